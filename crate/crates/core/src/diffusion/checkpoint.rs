use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use safetensors::SafeTensors;

use super::model::FashionRag;
use super::optim::AdamW;
use super::unet::UNetConfig;
use crate::error::{Error, Result};
use crate::inversion::AdapterConfig;
use crate::profile::Profile;

pub const CHECKPOINT_FORMAT: &str = "fashion-rag-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Header fields of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    pub stage: Stage,
    pub profile: Profile,
    pub step: usize,
    pub backbone: String,
    pub pose: bool,
    pub adapter: AdapterConfig,
    pub unet: UNetConfig,
    pub rng_seed: Option<u64>,
    pub rng_word_pos: Option<u128>,
    /// Content hash of the backbone the adapter was trained against.
    pub unet_hash: String,
}

pub struct LoadedCheckpoint {
    pub model: FashionRag,
    pub meta: CheckpointMeta,
    /// Optimizer moments keyed `m.<param>` / `v.<param>`.
    pub optimizer: HashMap<String, Tensor>,
}

impl LoadedCheckpoint {
    /// Generator positioned where training stopped.
    pub fn rng(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.meta.rng_seed?);
        rng.set_word_pos(self.meta.rng_word_pos?);
        Some(rng)
    }
}

/// Writes parameters, optimizer moments and metadata. Stage-1 files hold
/// only the adapter (the backbone is untouched and identified by tag and
/// hash); stage-2 files hold both.
pub fn save_checkpoint(
    path: &Path,
    model: &FashionRag,
    stage: Stage,
    step: usize,
    optimizer: Option<&AdamW>,
    rng: Option<(u64, &ChaCha8Rng)>,
) -> Result<()> {
    let mut tensors: HashMap<String, Tensor> = model.adapter_params.tensors("adapter.");
    if stage == Stage::Two {
        tensors.extend(model.unet_params.tensors("unet."));
    }
    if let Some(opt) = optimizer {
        for (k, v) in opt.state() {
            tensors.insert(format!("opt.{k}"), v);
        }
    }
    let mut meta: HashMap<String, String> = HashMap::new();
    meta.insert("format".into(), CHECKPOINT_FORMAT.into());
    meta.insert("version".into(), CHECKPOINT_VERSION.to_string());
    meta.insert("stage".into(), stage.number().to_string());
    meta.insert("profile".into(), model.profile.to_string());
    meta.insert("step".into(), step.to_string());
    meta.insert("backbone".into(), model.backbone_tag());
    meta.insert("pose".into(), model.has_pose().to_string());
    meta.insert("unet.hash".into(), model.unet_params.content_hash()?);
    meta.extend(model.adapter_config.to_pairs());
    meta.extend(model.unet_config.to_pairs());
    if let Some((seed, r)) = rng {
        meta.insert("rng.seed".into(), seed.to_string());
        meta.insert("rng.word_pos".into(), r.get_word_pos().to_string());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut sorted: Vec<(String, Tensor)> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    safetensors::serialize_to_file(sorted, Some(meta), path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn field<'a>(meta: &'a HashMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::format(path.display().to_string(), format!("missing metadata `{key}`")))
}

fn parse<T: std::str::FromStr>(value: &str, key: &str, path: &Path) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), format!("bad metadata `{key}` = `{value}`")))
}

pub fn read_meta(path: &Path, meta: &HashMap<String, String>) -> Result<CheckpointMeta> {
    if field(meta, "format", path)? != CHECKPOINT_FORMAT {
        return Err(Error::format(path.display().to_string(), "not a checkpoint"));
    }
    let version: u32 = parse(field(meta, "version", path)?, "version", path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let stage = match field(meta, "stage", path)? {
        "1" => Stage::One,
        "2" => Stage::Two,
        other => return Err(Error::format(path.display().to_string(), format!("bad stage `{other}`"))),
    };
    let profile: Profile = field(meta, "profile", path)?
        .parse()
        .map_err(|_| Error::format(path.display().to_string(), "bad profile"))?;
    let mut adapter = AdapterConfig::for_profile(profile);
    for (k, v) in meta.iter().filter(|(k, _)| k.starts_with("adapter.")) {
        adapter.set(k, v)?;
    }
    let channels = field(meta, "unet.channels", path)?
        .split(',')
        .map(|c| parse::<usize>(c, "unet.channels", path))
        .collect::<Result<Vec<_>>>()?;
    let unet = UNetConfig {
        channels,
        groups: parse(field(meta, "unet.groups", path)?, "unet.groups", path)?,
        time_dim: parse(field(meta, "unet.time_dim", path)?, "unet.time_dim", path)?,
        head_dim: parse(field(meta, "unet.head_dim", path)?, "unet.head_dim", path)?,
        context_dim: parse(field(meta, "unet.context_dim", path)?, "unet.context_dim", path)?,
    };
    Ok(CheckpointMeta {
        version,
        stage,
        profile,
        step: parse(field(meta, "step", path)?, "step", path)?,
        backbone: field(meta, "backbone", path)?.to_string(),
        pose: parse(field(meta, "pose", path)?, "pose", path)?,
        adapter,
        unet,
        rng_seed: meta.get("rng.seed").map(|v| parse(v, "rng.seed", path)).transpose()?,
        rng_word_pos: meta.get("rng.word_pos").map(|v| parse(v, "rng.word_pos", path)).transpose()?,
        unet_hash: field(meta, "unet.hash", path)?.to_string(),
    })
}

/// Rebuilds the model a checkpoint was written from.
pub fn load_checkpoint(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
    let meta_map = header.metadata().clone().unwrap_or_default();
    let meta = read_meta(path, &meta_map)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;

    let mut model = FashionRag::new(meta.profile, 0, dtype, device)?;
    if model.backbone_tag() != meta.backbone {
        return Err(Error::format(
            path.display().to_string(),
            format!("backbone `{}` does not match this build (`{}`)", meta.backbone, model.backbone_tag()),
        ));
    }
    if model.adapter_config != meta.adapter || model.unet_config != meta.unet {
        return Err(Error::format(path.display().to_string(), "architecture differs from this build"));
    }
    if meta.pose {
        model.attach_pose()?;
    }
    model.adapter_params.load_from(&tensors, "adapter.")?;
    if meta.stage == Stage::Two {
        model.unet_params.load_from(&tensors, "unet.")?;
    }
    if model.unet_params.content_hash()? != meta.unet_hash {
        return Err(Error::format(path.display().to_string(), "backbone parameters do not match the recorded hash"));
    }
    let optimizer = tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("opt.").map(|s| (s.to_string(), v.clone())))
        .collect();
    Ok(LoadedCheckpoint { model, meta, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn round_trip_both_stages() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = FashionRag::new(Profile::Desk, 3, DType::F32, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let p1 = dir.path().join("s1.safetensors");
        save_checkpoint(&p1, &model, Stage::One, 7, None, Some((9, &rng))).unwrap();
        let loaded = load_checkpoint(&p1, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(loaded.meta.step, 7);
        assert_eq!(loaded.meta.stage, Stage::One);
        assert_eq!(
            loaded.model.adapter_params.content_hash().unwrap(),
            model.adapter_params.content_hash().unwrap()
        );
        assert_eq!(loaded.rng().unwrap().next_u64(), rng.clone().next_u64());

        model.attach_pose().unwrap();
        let w = model.unet_params.var("conv_in_pose.weight").unwrap();
        w.set(&w.ones_like().unwrap()).unwrap();
        let p2 = dir.path().join("s2.safetensors");
        save_checkpoint(&p2, &model, Stage::Two, 8, None, None).unwrap();
        let loaded = load_checkpoint(&p2, DType::F32, &Device::Cpu).unwrap();
        assert!(loaded.model.has_pose());
        assert_eq!(
            loaded.model.unet_params.content_hash().unwrap(),
            model.unet_params.content_hash().unwrap()
        );
    }

    #[test]
    fn garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.safetensors");
        fs::write(&p, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&p, DType::F32, &Device::Cpu).is_err());
    }
}
