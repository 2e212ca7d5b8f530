use image::RgbImage;

use crate::error::{Error, Result};
use crate::palette::{color_by_name, motif_by_word, PALETTE};

/// Image tower of a dual encoder.
pub trait ImageEmbedder {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw (unnormalized) embedding.
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>>;
}

/// Text tower of a dual encoder.
pub trait TextEmbedder {
    fn tag(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed_text(&self, caption: &str) -> Result<Vec<f32>>;
}

/// Adapts a closure into an [`ImageEmbedder`].
pub struct FnImageEncoder<F> {
    tag: String,
    dim: usize,
    f: F,
}

impl<F> FnImageEncoder<F>
where
    F: Fn(&RgbImage) -> Vec<f32>,
{
    pub fn new(tag: impl Into<String>, dim: usize, f: F) -> Self {
        Self {
            tag: tag.into(),
            dim,
            f,
        }
    }
}

impl<F> ImageEmbedder for FnImageEncoder<F>
where
    F: Fn(&RgbImage) -> Vec<f32>,
{
    fn tag(&self) -> &str {
        &self.tag
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        Ok((self.f)(image))
    }
}

/// 8 palette affinities + 4 motif weights + 1 constant.
pub const TOY_RETRIEVAL_DIM: usize = PALETTE.len() + 4 + 1;

const COLOR_WEIGHT: f32 = 1.0;
const TEXTURE_WEIGHT: f32 = 0.5;
const BIAS: f32 = 0.1;
const CHROMA_TEMPERATURE: f32 = 0.005;
const MIN_SATURATION: i32 = 24;
const EDGE_THRESHOLD: f32 = 12.0;

fn chroma(rgb: [f32; 3]) -> [f32; 3] {
    let s = (rgb[0] + rgb[1] + rgb[2]).max(1.0);
    [rgb[0] / s, rgb[1] / s, rgb[2] / s]
}

/// Soft assignment of a color to the palette by chromaticity distance.
fn palette_affinity(rgb: [f32; 3]) -> [f32; 8] {
    let c = chroma(rgb);
    let mut logits = [0f32; 8];
    for (l, p) in logits.iter_mut().zip(PALETTE.iter()) {
        let pc = chroma(p.rgb.map(f32::from));
        let d2: f32 = c.iter().zip(pc.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        *l = -d2 / CHROMA_TEMPERATURE;
    }
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    logits.map(|l| l / sum)
}

/// Bilinear weights over (solid, striped, ribbed, checked) from the
/// horizontal/vertical change rates.
fn motif_weights(x: f32, y: f32) -> [f32; 4] {
    [(1.0 - x) * (1.0 - y), (1.0 - x) * y, x * (1.0 - y), x * y]
}

fn assemble(color: &[f32; 8], texture: &[f32; 4]) -> Vec<f32> {
    let mut v = Vec::with_capacity(TOY_RETRIEVAL_DIM);
    v.extend(color.iter().map(|c| c * COLOR_WEIGHT));
    v.extend(texture.iter().map(|t| t * TEXTURE_WEIGHT));
    v.push(BIAS);
    v
}

/// Toy image tower: palette histogram of saturated pixels plus a motif
/// descriptor from brightness changes between neighboring saturated pixels.
#[derive(Debug, Clone, Default)]
pub struct ColorStatsImageEncoder;

impl ColorStatsImageEncoder {
    fn saturated(p: &image::Rgb<u8>) -> bool {
        let [r, g, b] = p.0.map(i32::from);
        r.max(g).max(b) - r.min(g).min(b) >= MIN_SATURATION
    }

    fn luma(p: &image::Rgb<u8>) -> f32 {
        0.299 * p.0[0] as f32 + 0.587 * p.0[1] as f32 + 0.114 * p.0[2] as f32
    }
}

impl ImageEmbedder for ColorStatsImageEncoder {
    fn tag(&self) -> &str {
        "toy-colorstats-v1"
    }

    fn dim(&self) -> usize {
        TOY_RETRIEVAL_DIM
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f32>> {
        let mut color = [0f32; 8];
        let mut weight = 0f32;
        for p in image.pixels() {
            if !Self::saturated(p) {
                continue;
            }
            let [r, g, b] = p.0.map(i32::from);
            let sat = (r.max(g).max(b) - r.min(g).min(b)) as f32;
            let aff = palette_affinity(p.0.map(f32::from));
            for (c, a) in color.iter_mut().zip(aff) {
                *c += sat * a;
            }
            weight += sat;
        }
        if weight > 0.0 {
            color.iter_mut().for_each(|c| *c /= weight);
        }

        let (w, h) = image.dimensions();
        let (mut hx, mut nx, mut hy, mut ny) = (0u32, 0u32, 0u32, 0u32);
        for y in 0..h {
            for x in 0..w {
                let p = image.get_pixel(x, y);
                if !Self::saturated(p) {
                    continue;
                }
                if x + 1 < w {
                    let q = image.get_pixel(x + 1, y);
                    if Self::saturated(q) {
                        nx += 1;
                        if (Self::luma(p) - Self::luma(q)).abs() > EDGE_THRESHOLD {
                            hx += 1;
                        }
                    }
                }
                if y + 1 < h {
                    let q = image.get_pixel(x, y + 1);
                    if Self::saturated(q) {
                        ny += 1;
                        if (Self::luma(p) - Self::luma(q)).abs() > EDGE_THRESHOLD {
                            hy += 1;
                        }
                    }
                }
            }
        }
        let rate = |c: u32, n: u32| if n == 0 { 0.0 } else { (2.0 * c as f32 / n as f32).min(1.0) };
        let texture = if weight > 0.0 {
            motif_weights(rate(hx, nx), rate(hy, ny))
        } else {
            [0.0; 4]
        };
        Ok(assemble(&color, &texture))
    }
}

/// Toy text tower paired with [`ColorStatsImageEncoder`]: a palette color
/// word maps to that color's affinity vector, a motif word to its one-hot
/// motif weights.
#[derive(Debug, Clone, Default)]
pub struct ColorWordTextEncoder;

impl TextEmbedder for ColorWordTextEncoder {
    fn tag(&self) -> &str {
        "toy-colorwords-v1"
    }

    fn dim(&self) -> usize {
        TOY_RETRIEVAL_DIM
    }

    fn embed_text(&self, caption: &str) -> Result<Vec<f32>> {
        if caption.trim().is_empty() {
            return Err(Error::MissingQuery("caption is empty".into()));
        }
        let mut color = [0f32; 8];
        let mut texture = [0f32; 4];
        let lower = caption.to_lowercase();
        let words = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty());
        for word in words {
            if let Some((_, c)) = color_by_name(word) {
                if color.iter().all(|v| *v == 0.0) {
                    color = palette_affinity(c.rgb.map(f32::from));
                }
            } else if let Some(m) = motif_by_word(word) {
                if texture.iter().all(|v| *v == 0.0) {
                    texture[m.index()] = 1.0;
                }
            }
        }
        Ok(assemble(&color, &texture))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::palette::Motif;

    fn garment(rgb: [u8; 3], motif: Motif) -> RgbImage {
        RgbImage::from_fn(32, 32, |x, y| image::Rgb(motif.apply(rgb, x, y)))
    }

    fn cos(a: &[f32], b: &[f32]) -> f32 {
        let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn caption_matches_its_garment_best() {
        let img = ColorStatsImageEncoder;
        let txt = ColorWordTextEncoder;
        for (ci, c) in PALETTE.iter().enumerate() {
            for m in Motif::ALL {
                let q = txt
                    .embed_text(&format!("{} top, {} pattern", c.name, m.word()))
                    .unwrap();
                let own = cos(&q, &img.embed_image(&garment(c.rgb, m)).unwrap());
                assert!(own > 0.99, "{} {:?}: {own}", c.name, m);
                for (cj, d) in PALETTE.iter().enumerate() {
                    for n in Motif::ALL {
                        if ci == cj && m == n {
                            continue;
                        }
                        let other = cos(&q, &img.embed_image(&garment(d.rgb, n)).unwrap());
                        assert!(other < own, "{} {:?} vs {} {:?}", c.name, m, d.name, n);
                    }
                }
            }
        }
    }

    #[test]
    fn gray_image_has_only_bias() {
        let v = ColorStatsImageEncoder
            .embed_image(&RgbImage::from_pixel(8, 8, image::Rgb([200, 200, 200])))
            .unwrap();
        assert_eq!(v[..12].iter().sum::<f32>(), 0.0);
        assert_eq!(v[12], BIAS);
    }

    #[test]
    fn empty_caption_is_missing_query() {
        assert!(matches!(
            ColorWordTextEncoder.embed_text("  "),
            Err(Error::MissingQuery(_))
        ));
    }
}
