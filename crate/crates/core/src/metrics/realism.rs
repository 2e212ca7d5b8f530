use image::imageops::{resize, FilterType};
use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Covariance jitter used when a covariance is singular.
pub const FID_JITTER: f64 = 1e-6;

const PROXY_SEED: u64 = 0xf1d;
const PROXY_H: u32 = 16;
const PROXY_W: u32 = 12;
pub const PROXY_DIM: usize = 64;

/// Desk-scale feature extractor for FID/KID: a fixed Gaussian random
/// projection of the image downsampled to 16×12. Not comparable with
/// inception-based numbers.
pub struct ProjectionFeatures {
    projection: DMatrix<f64>,
}

impl Default for ProjectionFeatures {
    fn default() -> Self {
        let input = (3 * PROXY_H * PROXY_W) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(PROXY_SEED);
        let scale = 1.0 / (input as f64).sqrt();
        let projection = DMatrix::from_fn(PROXY_DIM, input, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v * scale
        });
        Self { projection }
    }
}

impl ProjectionFeatures {
    pub fn tag(&self) -> &str {
        "random-projection-16x12-64"
    }

    pub fn extract(&self, img: &RgbImage) -> DVector<f64> {
        let small = if img.dimensions() == (PROXY_W, PROXY_H) {
            img.clone()
        } else {
            resize(img, PROXY_W, PROXY_H, FilterType::Triangle)
        };
        let v = DVector::from_iterator(
            (3 * PROXY_H * PROXY_W) as usize,
            small.pixels().flat_map(|p| p.0.map(|c| c as f64 / 127.5 - 1.0)),
        );
        &self.projection * v
    }

    pub fn extract_all(&self, imgs: &[RgbImage]) -> Vec<DVector<f64>> {
        imgs.iter().map(|i| self.extract(i)).collect()
    }
}

/// Sample mean and unbiased covariance.
pub fn gaussian_fit(features: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Data(format!("need at least 2 feature vectors, got {n}")));
    }
    let d = features[0].len();
    let mut mean = DVector::zeros(d);
    for f in features {
        if f.len() != d {
            return Err(Error::Dimension {
                context: "feature width".into(),
                expected: d,
                found: f.len(),
            });
        }
        mean += f;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = f - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let s = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let e = SymmetricEigen::new(m.clone());
    e.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min) <= 0.0
}

/// ‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁^½ Σ₂ Σ₁^½)^½). A singular covariance gets
/// `FID_JITTER`·I added to both sides.
pub fn frechet_distance(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    if mu1.len() != mu2.len() || s1.shape() != s2.shape() || s1.nrows() != mu1.len() {
        return Err(Error::Shape(format!(
            "Fréchet distance between {}-d and {}-d Gaussians",
            mu1.len(),
            mu2.len()
        )));
    }
    let (mut s1, mut s2) = (s1.clone(), s2.clone());
    if is_singular(&s1) || is_singular(&s2) {
        log::warn!("singular covariance; adding {FID_JITTER:e}·I");
        let jitter = DMatrix::identity(s1.nrows(), s1.ncols()) * FID_JITTER;
        s1 += &jitter;
        s2 += &jitter;
    }
    let r1 = sym_sqrt(&s1);
    let cross = sym_sqrt(&(&r1 * &s2 * &r1));
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(d.max(0.0))
}

pub fn fid(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    let (m1, s1) = gaussian_fit(a)?;
    let (m2, s2) = gaussian_fit(b)?;
    frechet_distance(&m1, &s1, &m2, &s2)
}

fn poly_kernel(x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (x.dot(y) / x.len() as f64 + 1.0).powi(3)
}

/// Unbiased MMD² with the cubic polynomial kernel, ×1000.
pub fn kid(a: &[DVector<f64>], b: &[DVector<f64>]) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::Data(format!("KID needs at least 2 samples per set, got {m} and {n}")));
    }
    let within = |s: &[DVector<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += poly_kernel(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += poly_kernel(x, y);
        }
    }
    cross /= (m * n) as f64;
    Ok((within(a) + within(b) - 2.0 * cross) * 1000.0)
}

/// (FID, KID×1000) between two image sets under `features`.
pub fn distribution_realism(
    generated: &[RgbImage],
    reference: &[RgbImage],
    features: &ProjectionFeatures,
) -> Result<(f64, f64)> {
    let a = features.extract_all(generated);
    let b = features.extract_all(reference);
    Ok((fid(&a, &b)?, kid(&a, &b)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    fn gaussian_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                DVector::from_fn(d, |i, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * (1.0 + i as f64 * 0.1) + shift
                })
            })
            .collect()
    }

    #[test]
    fn identity_is_zero() {
        let x = gaussian_set(80, 6, 0.0, 1);
        assert!(fid(&x, &x).unwrap() <= 1e-6);
        // With identical sets only the kernel diagonal separates the terms:
        // KID = 2(mean off-diagonal − mean diagonal)/n, an O(1/n) residual.
        let n = x.len() as f64;
        let diag: f64 = x.iter().map(|v| (v.dot(v) / 6.0 + 1.0).powi(3)).sum::<f64>() / n;
        let mut off = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                if i != j {
                    off += (x[i].dot(&x[j]) / 6.0 + 1.0).powi(3);
                }
            }
        }
        off /= n * (n - 1.0);
        let want = 2000.0 * (off - diag) / n;
        assert!((kid(&x, &x).unwrap() - want).abs() < 1e-9 * want.abs());
    }

    #[test]
    fn closed_form_diagonal_case() {
        // Σ₁ = diag(a), Σ₂ = diag(b): FID = ‖Δμ‖² + Σ(√a − √b)².
        let mu1 = DVector::from_vec(vec![0.0, 1.0, 2.0]);
        let mu2 = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let a = [1.0, 4.0, 9.0];
        let b = [4.0, 1.0, 0.25];
        let s1 = DMatrix::from_diagonal(&DVector::from_row_slice(&a));
        let s2 = DMatrix::from_diagonal(&DVector::from_row_slice(&b));
        let want = 5.0 + a.iter().zip(&b).map(|(x, y): (&f64, &f64)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        assert!((frechet_distance(&mu1, &s1, &mu2, &s2).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn kid_is_near_zero_on_same_distribution() {
        let mut acc = 0.0;
        for s in 0..20 {
            acc += kid(&gaussian_set(64, 8, 0.0, 2 * s), &gaussian_set(64, 8, 0.0, 2 * s + 1)).unwrap();
        }
        let shifted = kid(&gaussian_set(64, 8, 0.0, 100), &gaussian_set(64, 8, 1.0, 101)).unwrap();
        assert!((acc / 20.0).abs() < shifted / 10.0, "{} vs {shifted}", acc / 20.0);
    }

    #[test]
    fn projection_features_are_deterministic() {
        let img = RgbImage::from_fn(96, 128, |x, y| image::Rgb([x as u8, y as u8, 7]));
        let f = ProjectionFeatures::default();
        assert_eq!(f.extract(&img), ProjectionFeatures::default().extract(&img));
        assert_eq!(f.extract(&img).len(), PROXY_DIM);
    }

    proptest! {
        #[test]
        fn fid_is_symmetric(seed in 0u64..1000, shift in -2.0f64..2.0) {
            let a = gaussian_set(30, 4, 0.0, seed);
            let b = gaussian_set(30, 4, shift, seed + 1);
            let (x, y) = (fid(&a, &b).unwrap(), fid(&b, &a).unwrap());
            prop_assert!((x - y).abs() <= 1e-8 * x.max(1.0));
        }
    }
}
