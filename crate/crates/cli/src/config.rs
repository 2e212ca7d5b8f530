//! Flat `key=value` run configuration. Blank lines and `#` comments are
//! ignored; later assignments win; command-line flags are applied last.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fashion_rag::diffusion::GuidanceConfig;
use fashion_rag::metrics::Setting;
use fashion_rag::profile::MAX_RETRIEVED;
use fashion_rag::{Error, Profile, Result};

pub const PROFILE_ENV: &str = "FASHIONRAG_PROFILE";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub data_root: PathBuf,
    pub index: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub runs_dir: PathBuf,
    pub n_r: usize,
    pub n_c: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub cond_dropout: f64,
    pub checkpoint_every: usize,
    pub setting: Setting,
    pub exclude_own: bool,
    pub unpaired_seed: u64,
}

/// Every key accepted in a config file or via `--set`.
pub const KEYS: [&str; 20] = [
    "profile",
    "data_root",
    "index",
    "checkpoint",
    "runs_dir",
    "n_r",
    "n_c",
    "guidance.text",
    "guidance.pose",
    "guidance.steps",
    "seed",
    "stage1.steps",
    "stage2.steps",
    "batch_size",
    "lr",
    "cond_dropout",
    "checkpoint_every",
    "setting",
    "retrieval.exclude_own",
    "unpaired_seed",
];

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            data_root: PathBuf::from("data/toy"),
            index: None,
            checkpoint: None,
            runs_dir: PathBuf::from("runs"),
            n_r: MAX_RETRIEVED,
            n_c: 3,
            guidance: GuidanceConfig::default(),
            seed: 0,
            stage1_steps: profile.stage1_steps(),
            stage2_steps: profile.stage2_steps(),
            batch_size: profile.batch_size(),
            lr: profile.learning_rate(),
            cond_dropout: 0.1,
            checkpoint_every: 500,
            setting: Setting::Paired,
            exclude_own: true,
            unpaired_seed: 0,
        }
    }

    /// Defaults for the profile named by `FASHIONRAG_PROFILE`, or desk.
    pub fn from_env() -> Result<Self> {
        let profile = match std::env::var(PROFILE_ENV) {
            Ok(v) if !v.trim().is_empty() => v.parse().map_err(|_| Error::config(PROFILE_ENV, format!("unknown profile `{v}`")))?,
            _ => Profile::Desk,
        };
        Ok(Self::for_profile(profile))
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(key, format!("cannot parse `{v}`")))
        }
        match key {
            "profile" => {
                let p: Profile = v.parse().map_err(|_| Error::config(key, format!("expected desk|full, got `{v}`")))?;
                if p != self.profile {
                    let keep = self.clone();
                    *self = Self::for_profile(p);
                    self.data_root = keep.data_root;
                    self.index = keep.index;
                    self.checkpoint = keep.checkpoint;
                    self.runs_dir = keep.runs_dir;
                }
            }
            "data_root" => self.data_root = PathBuf::from(v),
            "index" => self.index = (!v.is_empty()).then(|| PathBuf::from(v)),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "runs_dir" => self.runs_dir = PathBuf::from(v),
            "n_r" => self.n_r = num(key, v)?,
            "n_c" => self.n_c = num(key, v)?,
            "guidance.text" => self.guidance.text_scale = num(key, v)?,
            "guidance.pose" => self.guidance.pose_scale = num(key, v)?,
            "guidance.steps" => self.guidance.steps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "stage1.steps" => self.stage1_steps = num(key, v)?,
            "stage2.steps" => self.stage2_steps = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "cond_dropout" => self.cond_dropout = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "setting" => self.setting = v.parse().map_err(|_| Error::config(key, format!("expected paired|unpaired, got `{v}`")))?,
            "retrieval.exclude_own" => self.exclude_own = num(key, v)?,
            "unpaired_seed" => self.unpaired_seed = num(key, v)?,
            _ => return Err(Error::config(key, format!("unknown configuration key (known: {})", KEYS.join(", ")))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected key=value, got `{line}`")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_r > MAX_RETRIEVED {
            return Err(Error::config("n_r", format!("must be in 0..={MAX_RETRIEVED}, got {}", self.n_r)));
        }
        if !(1..=3).contains(&self.n_c) {
            return Err(Error::config("n_c", format!("must be in 1..=3, got {}", self.n_c)));
        }
        self.guidance.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Resolves the data root, failing on a missing directory.
    pub fn require_data_root(&self) -> Result<PathBuf> {
        if !self.data_root.is_dir() {
            return Err(Error::config("data_root", format!("`{}` is not a directory", self.data_root.display())));
        }
        Ok(self.data_root.clone())
    }

    /// The effective configuration in the same format it is read from.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let pairs: [(&str, String); 20] = [
            ("profile", self.profile.to_string()),
            ("data_root", self.data_root.display().to_string()),
            ("index", opt(&self.index)),
            ("checkpoint", opt(&self.checkpoint)),
            ("runs_dir", self.runs_dir.display().to_string()),
            ("n_r", self.n_r.to_string()),
            ("n_c", self.n_c.to_string()),
            ("guidance.text", self.guidance.text_scale.to_string()),
            ("guidance.pose", self.guidance.pose_scale.to_string()),
            ("guidance.steps", self.guidance.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("stage1.steps", self.stage1_steps.to_string()),
            ("stage2.steps", self.stage2_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("cond_dropout", self.cond_dropout.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("setting", self.setting.to_string()),
            ("retrieval.exclude_own", self.exclude_own.to_string()),
            ("unpaired_seed", self.unpaired_seed.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.apply_text("# comment\nn_r = 1\nguidance.text=3.5\nsetting=unpaired\nindex=x.idx\n").unwrap();
        let mut d = RunConfig::for_profile(Profile::Desk);
        d.apply_text(&c.to_text()).unwrap();
        assert_eq!(c, d);
        assert_eq!(d.n_r, 1);
        assert_eq!(d.index, Some(PathBuf::from("x.idx")));
    }

    #[test]
    fn every_key_is_settable_and_echoed() {
        let c = RunConfig::for_profile(Profile::Desk);
        let text = c.to_text();
        for k in KEYS {
            assert!(text.lines().any(|l| l.starts_with(&format!("{k}="))), "{k}");
        }
    }

    #[test]
    fn failing_key_is_reported() {
        let mut c = RunConfig::for_profile(Profile::Desk);
        match c.apply_text("bogus=1") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        c.n_r = 4;
        match c.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "n_r"),
            other => panic!("{other:?}"),
        }
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.n_c = 0;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "n_c"));
    }
}
