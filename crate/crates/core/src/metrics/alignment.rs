use image::RgbImage;

use crate::error::{Error, Result};
use crate::retrieval::{ImageEmbedder, TextEmbedder};

/// Image and text towers that share one embedding space.
pub struct DualEncoder<'a> {
    pub image: &'a dyn ImageEmbedder,
    pub text: &'a dyn TextEmbedder,
}

impl<'a> DualEncoder<'a> {
    pub fn new(image: &'a dyn ImageEmbedder, text: &'a dyn TextEmbedder) -> Result<Self> {
        if image.dim() != text.dim() {
            return Err(Error::Dimension {
                context: format!("dual encoder `{}` / `{}`", image.tag(), text.tag()),
                expected: image.dim(),
                found: text.dim(),
            });
        }
        Ok(Self { image, text })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean cosine(image, caption) × 100.
pub fn clip_t(generated: &[RgbImage], captions: &[String], enc: &DualEncoder<'_>) -> Result<f64> {
    if generated.len() != captions.len() {
        return Err(Error::Dimension {
            context: "clip_t captions".into(),
            expected: generated.len(),
            found: captions.len(),
        });
    }
    if generated.is_empty() {
        return Err(Error::Data("no images for clip_t".into()));
    }
    let mut total = 0.0;
    for (img, cap) in generated.iter().zip(captions) {
        total += cosine(&enc.image.embed_image(img)?, &enc.text.embed_text(cap)?);
    }
    Ok(100.0 * total / generated.len() as f64)
}

/// Per sample, the mean cosine with each of its retrieved garments; then
/// the mean over samples, × 100. Samples without retrieved garments are
/// skipped; `None` when no sample has any.
pub fn clip_i(generated: &[RgbImage], retrieved: &[Vec<RgbImage>], enc: &DualEncoder<'_>) -> Result<Option<f64>> {
    if generated.len() != retrieved.len() {
        return Err(Error::Dimension {
            context: "clip_i retrieved lists".into(),
            expected: generated.len(),
            found: retrieved.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (img, garments) in generated.iter().zip(retrieved) {
        if garments.is_empty() {
            continue;
        }
        let e = enc.image.embed_image(img)?;
        let mut s = 0.0;
        for g in garments {
            s += cosine(&e, &enc.image.embed_image(g)?);
        }
        total += s / garments.len() as f64;
        count += 1;
    }
    Ok((count > 0).then(|| 100.0 * total / count as f64))
}
