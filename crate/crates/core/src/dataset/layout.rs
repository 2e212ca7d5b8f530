use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};

use crate::category::Category;
use crate::conditioning::Keypoint;
use crate::error::{Error, Result};
use crate::profile::POSE_CHANNELS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One fully resolved sample: person image I, garment, edit mask M,
/// keypoints and noun phrases.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAnnotation {
    pub sample_id: String,
    pub image: PathBuf,
    pub garment_id: String,
    pub garment_image: PathBuf,
    pub category: Category,
    pub mask: PathBuf,
    pub keypoints: Vec<Keypoint>,
    pub noun_phrases: Vec<String>,
}

#[derive(Debug)]
pub struct SampleError {
    pub sample_id: String,
    pub category: Category,
    pub reason: String,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub samples: Vec<SampleAnnotation>,
    pub rejected: Vec<SampleError>,
}

impl LoadReport {
    pub fn count(&self, category: Category) -> usize {
        self.samples.iter().filter(|s| s.category == category).count()
    }
}

/// Parses 18 lines of `x y confidence`.
pub fn parse_keypoints(text: &str) -> std::result::Result<Vec<Keypoint>, String> {
    let mut out = Vec::with_capacity(POSE_CHANNELS);
    for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let v: Vec<f32> = line
            .split_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| format!("keypoint line {}: {e}", n + 1))?;
        if v.len() != 3 || v.iter().any(|x| !x.is_finite()) {
            return Err(format!("keypoint line {} must hold three finite numbers", n + 1));
        }
        out.push(Keypoint {
            x: v[0],
            y: v[1],
            confidence: v[2],
        });
    }
    if out.len() != POSE_CHANNELS {
        return Err(format!("expected {POSE_CHANNELS} keypoints, found {}", out.len()));
    }
    Ok(out)
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

fn read_captions(path: &Path) -> Result<HashMap<String, Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let mut fields = l.split('\t');
            let id = fields.next()?.trim().to_string();
            let phrases = fields.map(|p| p.trim().to_string()).filter(|p| !p.is_empty()).collect();
            Some((id, phrases))
        })
        .collect())
}

fn resolve(dir: &Path, category: Category, sample_id: &str, garment_id: &str, captions: &HashMap<String, Vec<String>>) -> std::result::Result<SampleAnnotation, String> {
    let image = find_image(&dir.join("images"), sample_id).ok_or("person image missing")?;
    let garment_image = find_image(&dir.join("garments"), garment_id).ok_or("garment image missing")?;
    let mask = find_image(&dir.join("masks"), sample_id).ok_or("mask missing")?;
    let kp_path = dir.join("keypoints").join(format!("{sample_id}.txt"));
    let kp_text = fs::read_to_string(&kp_path).map_err(|e| format!("keypoints unreadable: {e}"))?;
    let keypoints = parse_keypoints(&kp_text)?;
    let noun_phrases = captions
        .get(sample_id)
        .cloned()
        .filter(|p| !p.is_empty())
        .ok_or("no noun phrases")?;
    Ok(SampleAnnotation {
        sample_id: sample_id.to_string(),
        image,
        garment_id: garment_id.to_string(),
        garment_image,
        category,
        mask,
        keypoints,
        noun_phrases,
    })
}

/// Reads `<root>/<category dir>/{split}_pairs.txt` for every category present.
/// Broken samples are collected in the report; an empty split is fatal.
pub fn load_dataset(root: &Path, split: Split) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    for category in Category::ALL {
        let dir = root.join(category.dir_name());
        let pairs_path = dir.join(format!("{split}_pairs.txt"));
        if !pairs_path.is_file() {
            continue;
        }
        let pairs = fs::read_to_string(&pairs_path).map_err(|e| Error::io(&pairs_path, e))?;
        let captions_path = dir.join("captions.tsv");
        let captions = if captions_path.is_file() {
            read_captions(&captions_path)?
        } else {
            HashMap::new()
        };
        for line in pairs.lines().filter(|l| !l.trim().is_empty()) {
            let mut f = line.split_whitespace();
            let (Some(sample_id), Some(garment_id)) = (f.next(), f.next()) else {
                report.rejected.push(SampleError {
                    sample_id: line.to_string(),
                    category,
                    reason: "malformed pairs line".into(),
                });
                continue;
            };
            match resolve(&dir, category, sample_id, garment_id, &captions) {
                Ok(s) => report.samples.push(s),
                Err(reason) => report.rejected.push(SampleError {
                    sample_id: sample_id.to_string(),
                    category,
                    reason,
                }),
            }
        }
    }
    for category in Category::ALL {
        log::info!("{split}: {} {} samples", report.count(category), category);
    }
    for r in &report.rejected {
        log::warn!("rejected {} ({}): {}", r.sample_id, r.category, r.reason);
    }
    if report.samples.is_empty() {
        return Err(Error::Data(format!(
            "no usable {split} samples under {} ({} rejected)",
            root.display(),
            report.rejected.len()
        )));
    }
    Ok(report)
}

/// Decoded pixels of one sample.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub annotation: SampleAnnotation,
    pub image: RgbImage,
    pub mask: GrayImage,
    pub garment: RgbImage,
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// Decodes a sample's images, resizing person image and mask to
/// `height × width` when they differ.
pub fn load_sample_images(annotation: &SampleAnnotation, height: u32, width: u32) -> Result<LoadedSample> {
    let mut image = open(&annotation.image)?.to_rgb8();
    let mut mask = open(&annotation.mask)?.to_luma8();
    if image.dimensions() != (width, height) {
        image = image::imageops::resize(&image, width, height, image::imageops::FilterType::Triangle);
    }
    if mask.dimensions() != (width, height) {
        mask = image::imageops::resize(&mask, width, height, image::imageops::FilterType::Nearest);
    }
    Ok(LoadedSample {
        annotation: annotation.clone(),
        image,
        mask,
        garment: open(&annotation.garment_image)?.to_rgb8(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keypoint_records() {
        let good: String = (0..18).map(|i| format!("{i} {} 1\n", i * 2)).collect();
        let kps = parse_keypoints(&good).unwrap();
        assert_eq!(kps[5], Keypoint { x: 5.0, y: 10.0, confidence: 1.0 });
        assert!(parse_keypoints(&good.replace("4 8 1", "4 8")).is_err());
        assert!(parse_keypoints(&good.replace("4 8 1", "4 x 1")).is_err());
        let short: String = (0..17).map(|i| format!("{i} 0 1\n")).collect();
        assert!(parse_keypoints(&short).is_err());
    }

    #[test]
    fn empty_root_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path(), Split::Train), Err(Error::Data(_))));
    }
}
