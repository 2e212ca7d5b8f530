use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use crate::conditioning::image_to_tensor;
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, ParamStore};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a row-major plane.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM over channels and window positions (Gaussian window 11, σ 1.5,
/// pixel range 255).
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Shape(format!("ssim on {:?} vs {:?}", a.dimensions(), b.dimensions())));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let pa: Vec<f64> = a.pixels().map(|p| p[c] as f64).collect();
        let pb: Vec<f64> = b.pixels().map(|p| p[c] as f64).collect();
        let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (mu_a, _, _) = filter(&pa, h, w, &k);
        let (mu_b, _, _) = filter(&pb, h, w, &k);
        let (saa, _, _) = filter(&prod(&pa, &pa), h, w, &k);
        let (sbb, _, _) = filter(&prod(&pb, &pb), h, w, &k);
        let (sab, _, _) = filter(&prod(&pa, &pb), h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = saa[i] - ma * ma;
            let vb = sbb[i] - mb * mb;
            let cov = sab[i] - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

const LPIPS_SEED: u64 = 0x1b1b5;
const LPIPS_CHANNELS: [usize; 3] = [16, 32, 48];

/// Perceptual distance on a fixed, seeded convolutional feature stack:
/// features are unit-normalized across channels at every position, and the
/// squared differences are averaged spatially and summed over layers.
pub struct FeatureDistance {
    layers: Vec<Conv2d>,
}

impl FeatureDistance {
    pub fn new() -> Result<Self> {
        let store = ParamStore::new(LPIPS_SEED, DType::F32, &Device::Cpu);
        let b: Builder = store.builder(false);
        let mut cin = 3;
        let mut layers = Vec::new();
        for (i, &cout) in LPIPS_CHANNELS.iter().enumerate() {
            layers.push(Conv2d::new(&b.pp(&format!("l{i}")), cin, cout, 3, 2)?);
            cin = cout;
        }
        Ok(Self { layers })
    }

    fn features(&self, img: &RgbImage) -> Result<Vec<Tensor>> {
        let mut x = image_to_tensor(img, DType::F32, &Device::Cpu)?.unsqueeze(0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            x = l.forward(&x)?.relu()?;
            let norm = (x.sqr()?.sum_keepdim(1)?.sqrt()? + 1e-10)?;
            out.push(x.broadcast_div(&norm)?);
        }
        Ok(out)
    }

    pub fn distance(&self, a: &RgbImage, b: &RgbImage) -> Result<f64> {
        if a.dimensions() != b.dimensions() {
            return Err(Error::Shape(format!("lpips on {:?} vs {:?}", a.dimensions(), b.dimensions())));
        }
        let (fa, fb) = (self.features(a)?, self.features(b)?);
        let mut d = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let v: f32 = (x - y)?.sqr()?.sum(1)?.mean_all()?.to_scalar()?;
            d += v as f64;
        }
        Ok(d)
    }
}

/// Mean LPIPS-style distance and mean SSIM over aligned pairs.
pub fn pairwise_fidelity(generated: &[RgbImage], reference: &[RgbImage]) -> Result<(f64, f64)> {
    if generated.len() != reference.len() {
        return Err(Error::Dimension {
            context: "paired image sets".into(),
            expected: reference.len(),
            found: generated.len(),
        });
    }
    if generated.is_empty() {
        return Err(Error::Data("no images to compare".into()));
    }
    let net = FeatureDistance::new()?;
    let (mut l, mut s) = (0.0, 0.0);
    for (g, r) in generated.iter().zip(reference) {
        l += net.distance(g, r)?;
        s += ssim(g, r)?;
    }
    let n = generated.len() as f64;
    Ok((l / n, s / n))
}
