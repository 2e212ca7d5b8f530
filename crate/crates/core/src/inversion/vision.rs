use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};

/// Token sequence produced by a vision encoder for one garment image.
#[derive(Debug, Clone)]
pub struct VisualFeatureSequence {
    /// (tokens, width); never tracked by autograd.
    pub tokens: Tensor,
}

impl VisualFeatureSequence {
    pub fn token_count(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[1]
    }
}

/// Frozen image encoder whose last hidden states feed the adapter.
pub trait VisionEncoder {
    fn tag(&self) -> &str;
    /// Square input resolution.
    fn input_size(&self) -> u32;
    fn token_count(&self) -> usize;
    fn token_width(&self) -> usize;
    fn encode(&self, image: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor>;
}

/// Desk-scale vision encoder: the resized image is cut into square patches
/// and each patch becomes one token of 8 statistics (mean RGB, std RGB,
/// mean absolute horizontal and vertical luminance gradient), all in [0, 1].
#[derive(Debug, Clone)]
pub struct PatchStatsVisionEncoder {
    input: u32,
    patch: u32,
}

impl Default for PatchStatsVisionEncoder {
    fn default() -> Self {
        Self { input: 16, patch: 16 }
    }
}

impl PatchStatsVisionEncoder {
    pub fn new(input: u32, patch: u32) -> Result<Self> {
        if patch == 0 || input % patch != 0 {
            return Err(Error::config("vision.patch", format!("{patch} does not tile {input}")));
        }
        Ok(Self { input, patch })
    }

    fn patch_stats(&self, img: &RgbImage, px: u32, py: u32) -> [f64; 8] {
        let n = (self.patch * self.patch) as f64;
        let mut mean = [0f64; 3];
        let mut sq = [0f64; 3];
        let (mut gx, mut gy) = (0f64, 0f64);
        let luma = |p: &image::Rgb<u8>| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0;
        for y in py..py + self.patch {
            for x in px..px + self.patch {
                let p = img.get_pixel(x, y);
                for c in 0..3 {
                    let v = p[c] as f64 / 255.0;
                    mean[c] += v;
                    sq[c] += v * v;
                }
                if x + 1 < px + self.patch {
                    gx += (luma(p) - luma(img.get_pixel(x + 1, y))).abs();
                }
                if y + 1 < py + self.patch {
                    gy += (luma(p) - luma(img.get_pixel(x, y + 1))).abs();
                }
            }
        }
        let pairs = ((self.patch - 1) * self.patch).max(1) as f64;
        let mut out = [0f64; 8];
        for c in 0..3 {
            let m = mean[c] / n;
            out[c] = m;
            out[3 + c] = (sq[c] / n - m * m).max(0.0).sqrt();
        }
        out[6] = gx / pairs;
        out[7] = gy / pairs;
        out
    }
}

impl VisionEncoder for PatchStatsVisionEncoder {
    fn tag(&self) -> &str {
        "toy-patchstats-v1"
    }

    fn input_size(&self) -> u32 {
        self.input
    }

    fn token_count(&self) -> usize {
        ((self.input / self.patch) * (self.input / self.patch)) as usize
    }

    fn token_width(&self) -> usize {
        8
    }

    fn encode(&self, image: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
        let resized;
        let img = if image.dimensions() == (self.input, self.input) {
            image
        } else {
            resized = image::imageops::resize(image, self.input, self.input, FilterType::Triangle);
            &resized
        };
        let grid = self.input / self.patch;
        let mut data = Vec::with_capacity(self.token_count() * 8);
        for gy in 0..grid {
            for gx in 0..grid {
                data.extend(self.patch_stats(img, gx * self.patch, gy * self.patch));
            }
        }
        Ok(Tensor::from_vec(data, (self.token_count(), 8), device)?.to_dtype(dtype)?)
    }
}

/// Runs the frozen vision encoder; the result is detached from autograd.
pub fn extract_visual_features<V: VisionEncoder + ?Sized>(
    image: &RgbImage,
    encoder: &V,
    dtype: DType,
    device: &Device,
) -> Result<VisualFeatureSequence> {
    let tokens = encoder.encode(image, dtype, device)?.detach();
    let (n, w) = tokens.dims2()?;
    if n != encoder.token_count() || w != encoder.token_width() || n == 0 {
        return Err(Error::Shape(format!(
            "vision encoder `{}` produced {n}x{w}, expected {}x{}",
            encoder.tag(),
            encoder.token_count(),
            encoder.token_width()
        )));
    }
    Ok(VisualFeatureSequence { tokens })
}
