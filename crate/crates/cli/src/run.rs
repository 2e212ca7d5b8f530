//! Run directories and manifests.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use fashion_rag::{Error, Result};

/// `runs/<timestamp>/{checkpoints,images,reports}` plus `manifest`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(runs_dir: &Path) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S").to_string();
        let mut root = runs_dir.join(&stamp);
        let mut n = 1;
        while root.exists() {
            root = runs_dir.join(format!("{stamp}-{n}"));
            n += 1;
        }
        for sub in ["checkpoints", "images", "reports"] {
            let d = root.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self { root })
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Writes the manifest: the command line and input hash as comments,
    /// followed by the effective configuration, so the file can be passed
    /// back with `--config`.
    pub fn write_manifest(&self, command: &str, config: &RunConfig, inputs: &[&Path]) -> Result<()> {
        let hash = content_hash(inputs)?;
        let mut text = format!("# command={command}\n# seed={}\n# input_hash={hash}\n", config.seed);
        for p in inputs {
            text.push_str(&format!("# input={}\n", p.display()));
        }
        text.push_str(&config.to_text());
        let path = self.root.join("manifest");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 over every file below `inputs` (relative path, then bytes),
/// in sorted order. Missing inputs contribute nothing.
pub fn content_hash(inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for root in inputs {
        let mut files = Vec::new();
        collect_files(root, &mut files)?;
        for f in files {
            let rel = f.strip_prefix(root).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Newest file under `runs_dir/*/checkpoints` whose name starts with
/// `prefix`.
pub fn latest_checkpoint(runs_dir: &Path, prefix: &str) -> Option<PathBuf> {
    let mut best: Option<(std::time::SystemTime, PathBuf)> = None;
    for run in fs::read_dir(runs_dir).ok()?.flatten() {
        let Ok(files) = fs::read_dir(run.path().join("checkpoints")) else {
            continue;
        };
        for f in files.flatten() {
            let name = f.file_name().to_string_lossy().to_string();
            if !name.starts_with(prefix) || !name.ends_with(".safetensors") {
                continue;
            }
            let Ok(t) = f.metadata().and_then(|m| m.modified()) else {
                continue;
            };
            let p = f.path();
            if best.as_ref().is_none_or(|(bt, bp)| (t, &p) > (*bt, bp)) {
                best = Some((t, p));
            }
        }
    }
    best.map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_tracks_content_and_names() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        fs::create_dir_all(a.join("sub")).unwrap();
        fs::write(a.join("sub/x.txt"), "1").unwrap();
        let h1 = content_hash(&[&a]).unwrap();
        assert_eq!(h1, content_hash(&[&a]).unwrap());
        fs::write(a.join("sub/x.txt"), "2").unwrap();
        let h2 = content_hash(&[&a]).unwrap();
        assert_ne!(h1, h2);
        fs::rename(a.join("sub/x.txt"), a.join("sub/y.txt")).unwrap();
        assert_ne!(h2, content_hash(&[&a]).unwrap());
    }

    #[test]
    fn run_dirs_are_unique() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunDir::create(dir.path()).unwrap();
        let b = RunDir::create(dir.path()).unwrap();
        assert_ne!(a.root, b.root);
        assert!(a.checkpoints().is_dir() && a.images().is_dir() && a.reports().is_dir());
    }
}
