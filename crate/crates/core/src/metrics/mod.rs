//! Evaluation metrics: LPIPS-style perceptual distance and SSIM (paired),
//! FID and KID (distributional), CLIP-T and CLIP-I (alignment).

pub mod alignment;
pub mod fidelity;
pub mod realism;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub use alignment::{clip_i, clip_t, cosine, DualEncoder};
pub use fidelity::{pairwise_fidelity, ssim, FeatureDistance};
pub use realism::{distribution_realism, fid, frechet_distance, gaussian_fit, kid, ProjectionFeatures, FID_JITTER};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Setting {
    Paired,
    Unpaired,
}

impl Setting {
    pub fn as_str(self) -> &'static str {
        match self {
            Setting::Paired => "paired",
            Setting::Unpaired => "unpaired",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paired" => Ok(Setting::Paired),
            "unpaired" => Ok(Setting::Unpaired),
            _ => Err(Error::config("setting", format!("expected paired|unpaired, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub setting: Setting,
    /// Paired only.
    pub lpips: Option<f64>,
    /// Paired only.
    pub ssim: Option<f64>,
    pub fid: f64,
    /// ×1000.
    pub kid: f64,
    /// ×100.
    pub clip_t: f64,
    /// ×100; absent when no sample had retrieved garments.
    pub clip_i: Option<f64>,
    pub n_samples: usize,
    pub config: Vec<(String, String)>,
}

pub const TABLE_COLUMNS: [&str; 8] = ["setting", "n", "lpips", "ssim", "fid", "kid", "clip_t", "clip_i"];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

impl MetricReport {
    /// `key=value` lines; absent metrics are omitted.
    pub fn to_key_values(&self) -> String {
        let mut lines = vec![format!("setting={}", self.setting), format!("n_samples={}", self.n_samples)];
        if let Some(v) = self.lpips {
            lines.push(format!("lpips={v:.6}"));
        }
        if let Some(v) = self.ssim {
            lines.push(format!("ssim={v:.6}"));
        }
        lines.push(format!("fid={:.6}", self.fid));
        lines.push(format!("kid={:.6}", self.kid));
        lines.push(format!("clip_t={:.6}", self.clip_t));
        if let Some(v) = self.clip_i {
            lines.push(format!("clip_i={v:.6}"));
        }
        for (k, v) in &self.config {
            lines.push(format!("config.{k}={v}"));
        }
        lines.join("\n") + "\n"
    }

    pub fn table_header() -> String {
        TABLE_COLUMNS.join("\t")
    }

    pub fn table_row(&self) -> String {
        [
            self.setting.to_string(),
            self.n_samples.to_string(),
            opt(self.lpips),
            opt(self.ssim),
            format!("{:.4}", self.fid),
            format!("{:.4}", self.kid),
            format!("{:.4}", self.clip_t),
            opt(self.clip_i),
        ]
        .join("\t")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_key_values()).map_err(|e| Error::io(path, e))
    }
}

/// One line of the evaluation manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalEntry {
    pub sample_id: String,
    pub generated: PathBuf,
    pub reference: PathBuf,
    pub caption: String,
    pub retrieved_ids: Vec<String>,
}

pub fn write_eval_manifest(path: &Path, entries: &[EvalEntry]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for e in entries {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            e.sample_id,
            e.generated.display(),
            e.reference.display(),
            e.caption,
            e.retrieved_ids.join(",")
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_eval_manifest(path: &Path) -> Result<Vec<EvalEntry>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::format(
                path.display().to_string(),
                format!("line {}: expected 5 tab-separated fields, found {}", n + 1, f.len()),
            ));
        }
        out.push(EvalEntry {
            sample_id: f[0].to_string(),
            generated: PathBuf::from(f[1]),
            reference: PathBuf::from(f[2]),
            caption: f[3].to_string(),
            retrieved_ids: f[4].split(',').filter(|s| !s.is_empty()).map(String::from).collect(),
        });
    }
    Ok(out)
}
