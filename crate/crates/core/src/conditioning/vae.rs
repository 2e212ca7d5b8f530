use candle_core::Tensor;

use super::maps::EditMask;
use crate::error::{Error, Result};
use crate::profile::LATENT_CHANNELS;

/// Frozen image autoencoder: encoder E_E and decoder E_D.
pub trait LatentCodec {
    fn tag(&self) -> &str;
    /// Spatial downsampling factor between image and latent.
    fn factor(&self) -> usize;
    /// Constant applied to every latent after encoding.
    fn scaling(&self) -> f64;
    /// Posterior mean, scaled: (B, 3, H, W) in [-1, 1] -> (B, 4, h, w).
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    /// (B, 4, h, w) scaled latents -> (B, 3, H, W) in [-1, 1].
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Parameter-free desk-scale autoencoder with a deterministic posterior.
///
/// Latent channels 0–2 hold the mean color of each 8×8 patch, channel 3 the
/// patch's luminance standard deviation (×4). Decoding paints each patch
/// flat with its mean color.
#[derive(Debug, Clone)]
pub struct ToyVae {
    pub factor: usize,
    pub scaling: f64,
}

impl Default for ToyVae {
    fn default() -> Self {
        Self { factor: 8, scaling: 1.0 }
    }
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

impl LatentCodec for ToyVae {
    fn tag(&self) -> &str {
        "toy-patch-vae-v1"
    }

    fn factor(&self) -> usize {
        self.factor
    }

    fn scaling(&self) -> f64 {
        self.scaling
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::Shape(format!(
                "autoencoder input must be (B, 3, H, W) with H, W divisible by {}, found {:?}",
                self.factor,
                images.dims()
            )));
        }
        let k = self.factor;
        let images = images.detach();
        let mean = images.avg_pool2d(k)?;
        let luma = (images.narrow(1, 0, 1)? * LUMA[0])?
            .add(&(images.narrow(1, 1, 1)? * LUMA[1])?)?
            .add(&(images.narrow(1, 2, 1)? * LUMA[2])?)?;
        let luma_mean = luma.avg_pool2d(k)?;
        let var = (luma.sqr()?.avg_pool2d(k)? - luma_mean.sqr()?)?.relu()?;
        let spread = (var.sqrt()? * 4.0)?;
        Ok((Tensor::cat(&[mean, spread], 1)? * self.scaling)?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = latents.dims4()?;
        if c != LATENT_CHANNELS {
            return Err(Error::Dimension {
                context: "latent channels".into(),
                expected: LATENT_CHANNELS,
                found: c,
            });
        }
        let color = (latents.narrow(1, 0, 3)? / self.scaling)?;
        Ok(color
            .upsample_nearest2d(h * self.factor, w * self.factor)?
            .clamp(-1.0, 1.0)?)
    }
}

/// I_M: the image with the edit region hidden (zeroed).
pub fn masked_image(image: &Tensor, mask: &EditMask) -> Result<Tensor> {
    let dims = image.dims();
    let (h, w) = (mask.height(), mask.width());
    if dims.len() != 3 || dims[1] != h || dims[2] != w {
        return Err(Error::Shape(format!("image {dims:?} does not match mask ({h}, {w})")));
    }
    let keep = mask.full.ones_like()?.sub(&mask.full)?.to_dtype(image.dtype())?;
    Ok(image.broadcast_mul(&keep)?)
}

/// E(I_M) with the posterior mean: (3, H, W) image -> (4, h, w) latent.
pub fn encode_masked_image<V: LatentCodec + ?Sized>(image: &Tensor, mask: &EditMask, vae: &V) -> Result<Tensor> {
    let masked = masked_image(image, mask)?;
    Ok(vae.encode(&masked.unsqueeze(0)?)?.squeeze(0)?.to_dtype(image.dtype())?)
}
