use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::checkpoint::{save_checkpoint, Stage};
use super::model::FashionRag;
use super::optim::{AdamW, AdamWConfig};
use super::schedule::{forward_noising, NoiseSchedule};
use super::unet::UNet;
use crate::conditioning::{
    assemble_spatial_input, encode_masked_image, image_to_tensor, mask_from_image, EditMask, Keypoint, PoseMap,
};
use crate::error::{Error, Result};
use crate::inversion::InversionAdapter;
use crate::profile::MAX_RETRIEVED;

/// Anything that maps (γ, t, ψ, key mask) to a noise estimate.
pub trait NoisePredictor {
    fn predict(&self, gamma: &Tensor, t: &[usize], psi: &Tensor, key_mask: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for UNet {
    fn predict(&self, gamma: &Tensor, t: &[usize], psi: &Tensor, key_mask: &Tensor) -> Result<Tensor> {
        self.forward(gamma, t, psi, key_mask, None)
    }
}

/// One training or evaluation sample with its latent-resolution inputs
/// precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub sample_id: String,
    pub caption: String,
    /// (4, h, w) latent of the full person image.
    pub x0: Tensor,
    /// (1, h, w).
    pub mask: Tensor,
    /// (4, h, w) E(I_M).
    pub masked_latent: Tensor,
    /// (18, h, w).
    pub pose: Tensor,
    /// Vision features of the retrieved garments, best first.
    pub retrieved: Vec<Tensor>,
    pub retrieved_ids: Vec<String>,
}

impl Example {
    pub fn prepare(
        model: &FashionRag,
        sample_id: &str,
        image: &RgbImage,
        mask: &GrayImage,
        keypoints: &[Keypoint],
        caption: &str,
        retrieved: &[(String, RgbImage)],
    ) -> Result<Self> {
        let (dtype, device) = (model.dtype(), model.device());
        let factor = model.components.vae.factor();
        let img = image_to_tensor(image, dtype, device)?;
        let edit = EditMask::new(mask_from_image(mask, dtype, device)?, factor)?;
        let masked_latent = encode_masked_image(&img, &edit, model.components.vae.as_ref())?;
        let x0 = model.components.vae.encode(&img.unsqueeze(0)?)?.squeeze(0)?;
        let (h, w) = (image.height() as usize, image.width() as usize);
        let pose = PoseMap::from_keypoints(keypoints, h, w, factor, device)?.latent.to_dtype(dtype)?;
        let mut features = Vec::with_capacity(retrieved.len());
        for (_, g) in retrieved.iter().take(MAX_RETRIEVED) {
            features.push(model.visual_features(g)?);
        }
        Ok(Self {
            sample_id: sample_id.to_string(),
            caption: caption.to_string(),
            x0,
            mask: edit.latent,
            masked_latent,
            pose,
            retrieved: features,
            retrieved_ids: retrieved.iter().take(MAX_RETRIEVED).map(|(id, _)| id.clone()).collect(),
        })
    }
}

/// N_r ~ Uniform{0, 1, 2, 3}.
pub fn sample_retrieval_count<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..=MAX_RETRIEVED)
}

/// Timesteps and Gaussian noise for one batch.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: Vec<usize>,
    pub eps: Tensor,
}

impl NoiseDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, like: &Tensor, schedule: &NoiseSchedule) -> Result<Self> {
        let bsz = like.dim(0)?;
        let t = (0..bsz).map(|_| rng.random_range(0..schedule.len())).collect();
        let n = like.elem_count();
        let data: Vec<f32> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let eps = Tensor::from_vec(data, like.dims(), like.device())?.to_dtype(like.dtype())?;
        Ok(Self { t, eps })
    }
}

/// Per-batch conditioning choices.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub n_r: usize,
    /// Replace text+retrieval with the empty sequence.
    pub drop_text: Vec<bool>,
    /// Zero the pose channels.
    pub drop_pose: Vec<bool>,
}

impl BatchPlan {
    pub fn plain(n_r: usize, batch: usize) -> Self {
        Self {
            n_r,
            drop_text: vec![false; batch],
            drop_pose: vec![false; batch],
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, batch: usize, dropout: f64) -> Self {
        let n_r = sample_retrieval_count(rng);
        let mut plan = Self::plain(n_r, batch);
        if dropout > 0.0 {
            for i in 0..batch {
                plan.drop_text[i] = rng.random_bool(dropout);
                plan.drop_pose[i] = rng.random_bool(dropout);
            }
        }
        plan
    }
}

/// Mean of (ε − ε̂)² over all elements.
pub fn denoising_loss(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    Ok((eps - eps_hat)?.sqr()?.mean_all()?)
}

/// Builds γ and ψ for a batch under `plan`, runs the predictor and returns
/// the denoising loss ‖ε − ε_θ(γ, ψ)‖² (mean per element).
pub fn training_loss(
    model: &FashionRag,
    predictor: &dyn NoisePredictor,
    adapter: &InversionAdapter,
    batch: &[&Example],
    plan: &BatchPlan,
    noise: &NoiseDraw,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    let stack = |f: fn(&Example) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::stack(&batch.iter().map(|e| f(e)).collect::<Vec<_>>(), 0)?)
    };
    let x0 = stack(|e| &e.x0)?;
    let z_t = forward_noising(&x0, &noise.t, &noise.eps, schedule)?;
    let poses = batch
        .iter()
        .zip(&plan.drop_pose)
        .map(|(e, drop)| if *drop { e.pose.zeros_like() } else { Ok(e.pose.clone()) })
        .collect::<candle_core::Result<Vec<_>>>()?;
    let gamma = assemble_spatial_input(
        &z_t,
        &stack(|e| &e.mask)?,
        &stack(|e| &e.masked_latent)?,
        &Tensor::stack(&poses, 0)?,
    )?;

    let items: Vec<(&str, &[Tensor])> = batch
        .iter()
        .zip(&plan.drop_text)
        .filter(|(_, drop)| !**drop)
        .map(|(e, _)| (e.caption.as_str(), &e.retrieved[..plan.n_r.min(e.retrieved.len())]))
        .collect();
    let mut conditioned = model.sequences(adapter, &items)?.into_iter();
    let empty = model.empty_sequence()?;
    let seqs: Vec<_> = plan
        .drop_text
        .iter()
        .map(|drop| if *drop { empty.clone() } else { conditioned.next().expect("one per kept sample") })
        .collect();
    let (psi, key_mask) = model.encode(&seqs)?;

    let eps_hat = predictor.predict(&gamma.gamma, &noise.t, &psi, &key_mask)?;
    denoising_loss(&noise.eps, &eps_hat)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probability of dropping each condition in stage 2.
    pub cond_dropout: f64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", format!("must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::config("cond_dropout", "must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub n_r: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    /// Mean loss over records `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Where a training run writes its checkpoints and loss log.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint_dir: PathBuf,
    pub loss_log: PathBuf,
}

struct LossLog(Option<BufWriter<File>>);

impl LossLog {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None)),
            Some(p) => {
                let f = File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(BufWriter::new(f))))
            }
        }
    }

    fn write(&mut self, r: &LossRecord) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{}\t{:.6}\t{:e}\t{}", r.step, r.loss, r.lr, r.n_r).map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("loss log", e))?;
        }
        Ok(())
    }
}

/// Stage 1: only F_θ is trained; the backbone and pose channels stay as
/// they are.
pub fn train_stage1(model: &mut FashionRag, data: &[Example], config: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainReport> {
    if model.has_pose() {
        return Err(Error::config("stage", "stage 1 runs before pose channels are attached"));
    }
    run_stage(model, Stage::One, data, config, out)
}

/// Stage 2: pose channels are attached (zero-initialized) and F_θ and the
/// U-Net are trained together with condition dropout.
pub fn train_stage2(model: &mut FashionRag, data: &[Example], config: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainReport> {
    model.attach_pose()?;
    run_stage(model, Stage::Two, data, config, out)
}

fn run_stage(model: &FashionRag, stage: Stage, data: &[Example], config: &TrainConfig, out: Option<&TrainOutput>) -> Result<TrainReport> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let train_unet = stage == Stage::Two;
    let adapter = model.adapter(true)?;
    let unet = model.unet(train_unet)?;
    let mut params: Vec<_> = model
        .adapter_params
        .vars()
        .into_iter()
        .map(|(n, v)| (format!("adapter.{n}"), v))
        .collect();
    if train_unet {
        params.extend(model.unet_params.vars().into_iter().map(|(n, v)| (format!("unet.{n}"), v)));
    }
    let mut opt_config = AdamWConfig::with_lr(config.lr);
    opt_config.weight_decay = config.weight_decay;
    let mut opt = AdamW::new(params, opt_config)?;
    let schedule = NoiseSchedule::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let dropout = if train_unet { config.cond_dropout } else { 0.0 };

    if let Some(o) = out {
        std::fs::create_dir_all(&o.checkpoint_dir).map_err(|e| Error::io(&o.checkpoint_dir, e))?;
    }
    let mut log = LossLog::open(out.map(|o| o.loss_log.as_path()))?;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().expect("refilled"));
        }
        let batch: Vec<&Example> = idx.iter().map(|&i| &data[i]).collect();
        let plan = BatchPlan::sample(&mut rng, batch.len(), dropout);
        let x0 = Tensor::stack(&batch.iter().map(|e| &e.x0).collect::<Vec<_>>(), 0)?;
        let noise = NoiseDraw::sample(&mut rng, &x0, &schedule)?;
        let loss = training_loss(model, &unet, &adapter, &batch, &plan, &noise, &schedule)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.sample_id.as_str()).collect();
            return Err(Error::NonFinite {
                step,
                diagnostics: format!("samples {ids:?}, timesteps {:?}, n_r {}", noise.t, plan.n_r),
            });
        }
        opt.step(&loss.backward()?)?;
        let record = LossRecord {
            step,
            loss: value,
            lr: config.lr,
            n_r: plan.n_r,
        };
        log.write(&record)?;
        report.losses.push(record);
        let due = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
        if let Some(o) = out {
            if due || step == config.steps {
                let path = o.checkpoint_dir.join(format!("stage{}-step{step:06}.safetensors", stage.number()));
                save_checkpoint(&path, model, stage, step, Some(&opt), Some((config.seed, &rng)))?;
                report.checkpoints.push(path);
            }
        }
    }
    log.flush()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::Profile;
    use candle_core::Device;

    struct Exact<'a>(&'a Tensor);

    impl NoisePredictor for Exact<'_> {
        fn predict(&self, _: &Tensor, _: &[usize], _: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict(&self, gamma: &Tensor, _: &[usize], _: &Tensor, _: &Tensor) -> Result<Tensor> {
            Ok(gamma.narrow(1, 0, 4)?.zeros_like()?)
        }
    }

    fn example(model: &FashionRag, i: usize) -> Example {
        let dev = Device::Cpu;
        Example {
            sample_id: format!("s{i}"),
            caption: "red top, striped pattern".into(),
            x0: Tensor::randn(0f32, 1.0, (4, 16, 12), &dev).unwrap(),
            mask: Tensor::ones((1, 16, 12), DType::F32, &dev).unwrap(),
            masked_latent: Tensor::zeros((4, 16, 12), DType::F32, &dev).unwrap(),
            pose: Tensor::zeros((18, 16, 12), DType::F32, &dev).unwrap(),
            retrieved: vec![model.visual_features(&RgbImage::from_pixel(16, 16, image::Rgb([200, 40, 40]))).unwrap()],
            retrieved_ids: vec!["g".into()],
        }
    }

    #[test]
    fn stub_predictors() {
        let model = FashionRag::new(Profile::Desk, 0, DType::F32, &Device::Cpu).unwrap();
        let adapter = model.adapter(false).unwrap();
        let schedule = NoiseSchedule::default();
        let ex: Vec<Example> = (0..4).map(|i| example(&model, i)).collect();
        let batch: Vec<&Example> = ex.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::stack(&batch.iter().map(|e| &e.x0).collect::<Vec<_>>(), 0).unwrap();
        let plan = BatchPlan::plain(1, 4);
        let noise = NoiseDraw::sample(&mut rng, &x0, &schedule).unwrap();
        let exact = training_loss(&model, &Exact(&noise.eps), &adapter, &batch, &plan, &noise, &schedule).unwrap();
        assert_eq!(exact.to_scalar::<f32>().unwrap(), 0.0);
        let mut total = 0.0;
        for _ in 0..50 {
            let noise = NoiseDraw::sample(&mut rng, &x0, &schedule).unwrap();
            total += training_loss(&model, &Zero, &adapter, &batch, &plan, &noise, &schedule)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap() as f64;
        }
        assert!((total / 50.0 - 1.0).abs() < 0.02, "{}", total / 50.0);
    }

    #[test]
    fn retrieval_count_is_uniform_and_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            counts[sample_retrieval_count(&mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / 40_000.0 - 0.25).abs() < 0.01, "{counts:?}");
        }
        let a: Vec<usize> = (0..20).map(|_| sample_retrieval_count(&mut ChaCha8Rng::seed_from_u64(5))).collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
    }
}
