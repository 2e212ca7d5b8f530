use candle_core::Tensor;

use crate::error::{Error, Result};

/// Discrete forward process: β_t and ᾱ_t = Π(1 − β_s).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub const TRAIN_STEPS: usize = 1000;

    /// Betas linear in √β between `beta_start` and `beta_end`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::config(
                "schedule",
                format!("need steps >= 2 and 0 < beta_start < beta_end < 1, got {steps}, {beta_start}, {beta_end}"),
            ));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                let s = a + (b - a) * i as f64 / (steps - 1) as f64;
                s * s
            })
            .collect();
        let mut acc = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|beta| {
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cumprod(&self) -> &[f64] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod.get(t).copied().ok_or_else(|| {
            Error::config("t", format!("timestep {t} outside [0, {})", self.len()))
        })
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(Self::TRAIN_STEPS, 0.00085, 0.012).expect("valid constants")
    }
}

/// Per-sample coefficients shaped (B, 1, …, 1) to broadcast against `like`.
fn per_sample(values: &[f64], like: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1; like.rank()];
    shape[0] = values.len();
    Ok(Tensor::from_vec(values.to_vec(), shape, like.device())?.to_dtype(like.dtype())?)
}

/// z_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε, one timestep per batch element.
pub fn forward_noising(x0: &Tensor, t: &[usize], eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::Shape(format!("x0 {:?} vs noise {:?}", x0.dims(), eps.dims())));
    }
    if x0.dim(0)? != t.len() {
        return Err(Error::Shape(format!("{} timesteps for batch of {}", t.len(), x0.dim(0)?)));
    }
    let ab = t.iter().map(|&t| schedule.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let signal: Vec<f64> = ab.iter().map(|a| a.sqrt()).collect();
    let noise: Vec<f64> = ab.iter().map(|a| (1.0 - a).sqrt()).collect();
    Ok((x0.broadcast_mul(&per_sample(&signal, x0)?)? + eps.broadcast_mul(&per_sample(&noise, eps)?)?)?)
}

/// Evenly spaced inference timesteps, descending, ending at 0.
pub fn ddim_timesteps(train_steps: usize, infer_steps: usize) -> Result<Vec<usize>> {
    if infer_steps == 0 || infer_steps > train_steps {
        return Err(Error::config(
            "steps",
            format!("inference steps must be in 1..={train_steps}, got {infer_steps}"),
        ));
    }
    let stride = train_steps / infer_steps;
    Ok((0..infer_steps).rev().map(|i| i * stride).collect())
}

/// Deterministic DDIM update from t to `t_prev` (None = the clean end point,
/// ᾱ = 1).
pub fn ddim_step(z_t: &Tensor, eps: &Tensor, t: usize, t_prev: Option<usize>, schedule: &NoiseSchedule) -> Result<Tensor> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = match t_prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let x0 = ((z_t - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
    Ok(((x0 * ab_prev.sqrt())? + (eps * (1.0 - ab_prev).sqrt())?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 1000);
        assert!(s.betas().iter().all(|b| *b > 0.0));
        assert!(s.betas().windows(2).all(|w| w[1] > w[0]));
        assert!(s.alphas_cumprod().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alphas_cumprod().iter().all(|a| *a > 0.0 && *a <= 1.0));
        assert!((s.betas()[0] - 0.00085).abs() < 1e-12);
        assert!((s.betas()[999] - 0.012).abs() < 1e-12);
    }

    #[test]
    fn limits_and_range() {
        let s = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &dev).unwrap();
        let eps = Tensor::randn(0f64, 1.0, (1, 4, 3, 3), &dev).unwrap();
        let z = forward_noising(&x0, &[0], &eps, &s).unwrap();
        let err = (&z - &x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 0.03 * 4.0 + 1e-9, "{err}");
        let zero = eps.zeros_like().unwrap();
        let z = forward_noising(&x0, &[500], &zero, &s).unwrap();
        let expect = (&x0 * s.alpha_bar(500).unwrap().sqrt()).unwrap();
        let err = (z - expect).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(err, 0.0);
        assert!(forward_noising(&x0, &[1000], &eps, &s).is_err());
    }

    #[test]
    fn monte_carlo_variance() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let x_dist = Normal::new(0.5, 1.5).unwrap();
        let e_dist = Normal::new(0.0, 1.0).unwrap();
        for t in [10usize, 300, 700, 999] {
            let x: Vec<f64> = (0..n).map(|_| x_dist.sample(&mut rng)).collect();
            let e: Vec<f64> = (0..n).map(|_| e_dist.sample(&mut rng)).collect();
            let x0 = Tensor::from_vec(x.clone(), (n, 1), &Device::Cpu).unwrap();
            let eps = Tensor::from_vec(e, (n, 1), &Device::Cpu).unwrap();
            let z: Vec<f64> = forward_noising(&x0, &vec![t; n], &eps, &s).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let var = |v: &[f64]| {
                let m = v.iter().sum::<f64>() / v.len() as f64;
                v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
            };
            let ab = s.alpha_bar(t).unwrap();
            let expected = ab * var(&x) + (1.0 - ab);
            assert!((var(&z) / expected - 1.0).abs() < 0.03, "t={t}");
        }
    }

    #[test]
    fn ddim_with_true_noise_recovers_clean_latent() {
        let s = NoiseSchedule::default();
        let dev = Device::Cpu;
        let x0 = Tensor::randn(0f64, 1.0, (2, 4, 2, 2), &dev).unwrap();
        let eps = Tensor::randn(0f64, 1.0, (2, 4, 2, 2), &dev).unwrap();
        let steps = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(steps.len(), 50);
        assert_eq!((steps[0], *steps.last().unwrap()), (980, 0));
        let mut z = forward_noising(&x0, &[980, 980], &eps, &s).unwrap();
        for (i, &t) in steps.iter().enumerate() {
            z = ddim_step(&z, &eps, t, steps.get(i + 1).copied(), &s).unwrap();
        }
        let err = (z - x0).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(err < 1e-9, "{err}");
    }
}
