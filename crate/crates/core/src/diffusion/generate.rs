use candle_core::Tensor;
use image::{GrayImage, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::guidance::{guided_prediction, ChainPredictions, GuidanceConfig};
use super::model::FashionRag;
use super::schedule::{ddim_step, ddim_timesteps, NoiseSchedule};
use super::train::Example;
use crate::conditioning::{assemble_spatial_input, tensor_to_image};
use crate::error::{Error, Result};
use crate::profile::MAX_RETRIEVED;

/// One inpainting request: the prepared example plus the pixels needed to
/// composite the result.
pub struct GenerationInput<'a> {
    pub example: &'a Example,
    pub image: &'a RgbImage,
    pub mask: &'a GrayImage,
    /// Seed of the initial latent noise.
    pub seed: u64,
}

/// Per-sample noise seed derived from a run seed and the sample id, so a
/// sample's output does not depend on batch composition.
pub fn sample_seed(run_seed: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn initial_noise(seed: u64, like: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..like.elem_count()).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(data, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

/// Keeps the input pixels outside the mask (mask < 128) and the generated
/// ones inside.
pub fn composite(original: &RgbImage, generated: &RgbImage, mask: &GrayImage) -> Result<RgbImage> {
    if original.dimensions() != generated.dimensions() || original.dimensions() != mask.dimensions() {
        return Err(Error::Shape(format!(
            "composite sizes differ: image {:?}, generated {:?}, mask {:?}",
            original.dimensions(),
            generated.dimensions(),
            mask.dimensions()
        )));
    }
    Ok(RgbImage::from_fn(original.width(), original.height(), |x, y| {
        if mask.get_pixel(x, y)[0] >= 128 {
            *generated.get_pixel(x, y)
        } else {
            *original.get_pixel(x, y)
        }
    }))
}

/// Guided DDIM sampling for a batch, conditioned on the caption and the
/// first `n_r` retrieved garments of each example. The three members of the
/// guidance chain run as one stacked forward pass per step; without pose
/// channels the last two members coincide and only two are evaluated.
pub fn generate(
    model: &FashionRag,
    inputs: &[GenerationInput<'_>],
    n_r: usize,
    guidance: &GuidanceConfig,
) -> Result<Vec<RgbImage>> {
    guidance.validate()?;
    if n_r > MAX_RETRIEVED {
        return Err(Error::config("n_r", format!("at most {MAX_RETRIEVED} retrieved garments, got {n_r}")));
    }
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let bsz = inputs.len();
    let unet = model.unet(false)?;
    let adapter = model.adapter(false)?;
    let schedule = NoiseSchedule::default();

    let items: Vec<(&str, &[Tensor])> = inputs
        .iter()
        .map(|g| {
            let e = g.example;
            (e.caption.as_str(), &e.retrieved[..n_r.min(e.retrieved.len())])
        })
        .collect();
    let mut seqs = vec![model.empty_sequence()?; bsz];
    seqs.extend(model.sequences(&adapter, &items)?);
    let (psi, key_mask) = model.encode(&seqs)?;

    let stack = |f: fn(&Example) -> &Tensor| -> Result<Tensor> {
        Ok(Tensor::stack(&inputs.iter().map(|g| f(g.example)).collect::<Vec<_>>(), 0)?)
    };
    let mask = stack(|e| &e.mask)?;
    let masked = stack(|e| &e.masked_latent)?;
    let pose = stack(|e| &e.pose)?;
    let no_pose = pose.zeros_like()?;

    let members = if model.has_pose() { 3 } else { 2 };
    let (psi, key_mask) = if members == 3 {
        (
            Tensor::cat(&[&psi, &psi.narrow(0, bsz, bsz)?], 0)?,
            Tensor::cat(&[&key_mask, &key_mask.narrow(0, bsz, bsz)?], 0)?,
        )
    } else {
        (psi, key_mask)
    };
    let rep = |t: &Tensor| -> Result<Tensor> { Ok(Tensor::cat(&vec![t; members], 0)?) };
    let mask_all = rep(&mask)?;
    let masked_all = rep(&masked)?;
    let pose_all = if members == 3 {
        Tensor::cat(&[&no_pose, &no_pose, &pose], 0)?
    } else {
        rep(&no_pose)?
    };

    let noise = inputs
        .iter()
        .map(|g| initial_noise(g.seed, &g.example.x0))
        .collect::<Result<Vec<_>>>()?;
    let mut z = Tensor::stack(&noise, 0)?;
    let steps = ddim_timesteps(schedule.len(), guidance.steps)?;
    for (i, &t) in steps.iter().enumerate() {
        let z_all = rep(&z)?;
        let gamma = assemble_spatial_input(&z_all, &mask_all, &masked_all, &pose_all)?;
        let ts = vec![t; members * bsz];
        let eps = unet.forward(&gamma.gamma, &ts, &psi, &key_mask, None)?;
        let e1 = eps.narrow(0, bsz, bsz)?;
        let preds = ChainPredictions {
            unconditional: Some(eps.narrow(0, 0, bsz)?),
            full: Some(if members == 3 { eps.narrow(0, 2 * bsz, bsz)? } else { e1.clone() }),
            text_retrieval: Some(e1),
        };
        let eps_hat = guided_prediction(&preds, guidance)?;
        z = ddim_step(&z, &eps_hat, t, steps.get(i + 1).copied(), &schedule)?;
    }

    let decoded = model.components.vae.decode(&z)?;
    inputs
        .iter()
        .enumerate()
        .map(|(i, g)| composite(g.image, &tensor_to_image(&decoded.get(i)?)?, g.mask))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::Keypoint;
    use crate::profile::Profile;
    use candle_core::{DType, Device};

    fn setup() -> (FashionRag, RgbImage, GrayImage, Example) {
        let model = FashionRag::new(Profile::Desk, 0, DType::F32, &Device::Cpu).unwrap();
        let d = model.dims();
        let (h, w) = (d.image_h as u32, d.image_w as u32);
        let image = RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 2) as u8, (y * 2) as u8, 90]));
        let mask = GrayImage::from_fn(w, h, |x, y| image::Luma([if (24..72).contains(&y) && (32..64).contains(&x) { 255 } else { 0 }]));
        let kps = vec![Keypoint::missing(); 18];
        let g = RgbImage::from_pixel(32, 32, image::Rgb([200, 40, 40]));
        let ex = Example::prepare(&model, "s0", &image, &mask, &kps, "red top", &[("g".into(), g)]).unwrap();
        (model, image, mask, ex)
    }

    #[test]
    fn output_keeps_unmasked_pixels_and_is_deterministic() {
        let (model, image, mask, ex) = setup();
        let cfg = GuidanceConfig { steps: 3, ..Default::default() };
        let input = || GenerationInput { example: &ex, image: &image, mask: &mask, seed: 5 };
        let a = generate(&model, &[input()], 1, &cfg).unwrap();
        let b = generate(&model, &[input(), GenerationInput { seed: 6, ..input() }], 1, &cfg).unwrap();
        assert_eq!(a[0], b[0]);
        for (x, y, p) in a[0].enumerate_pixels() {
            if mask.get_pixel(x, y)[0] < 128 {
                assert_eq!(p, image.get_pixel(x, y));
            }
        }
    }

    #[test]
    fn pose_chain_runs_three_members() {
        let (mut model, image, mask, _) = setup();
        model.attach_pose().unwrap();
        let kps = vec![Keypoint::missing(); 18];
        let ex = Example::prepare(&model, "s0", &image, &mask, &kps, "red top", &[]).unwrap();
        let cfg = GuidanceConfig { steps: 2, ..Default::default() };
        let out = generate(&model, &[GenerationInput { example: &ex, image: &image, mask: &mask, seed: 1 }], 0, &cfg).unwrap();
        assert_eq!(out[0].dimensions(), image.dimensions());
    }

    #[test]
    fn too_many_retrieved_is_rejected() {
        let (model, image, mask, ex) = setup();
        let input = GenerationInput { example: &ex, image: &image, mask: &mask, seed: 1 };
        assert!(generate(&model, &[input], 4, &GuidanceConfig::default()).is_err());
    }

    #[test]
    fn sample_seed_depends_on_both_parts() {
        assert_ne!(sample_seed(1, "a"), sample_seed(2, "a"));
        assert_ne!(sample_seed(1, "a"), sample_seed(1, "b"));
        assert_eq!(sample_seed(1, "a"), sample_seed(1, "a"));
    }
}
