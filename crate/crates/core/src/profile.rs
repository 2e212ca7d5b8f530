//! Scale profiles.
//!
//! `Desk` runs the whole pipeline on a toy dataset with miniature encoders in
//! a few minutes on a CPU. `Full` carries the production constants (SD-2
//! inpainting backbone, OpenCLIP ViT-H/14 text space); its backbone weights
//! are not bundled.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Profile {
    #[default]
    Desk,
    Full,
}

impl Profile {
    pub fn dims(self) -> Dims {
        match self {
            Profile::Desk => Dims {
                image_h: 128,
                image_w: 96,
                latent_factor: 8,
                seq_len: 32,
                embed_width: 64,
                tokens_per_garment: 4,
            },
            Profile::Full => Dims {
                image_h: 512,
                image_w: 384,
                latent_factor: 8,
                seq_len: 77,
                embed_width: 1024,
                tokens_per_garment: 16,
            },
        }
    }

    /// Default learning rate. Desk runs use a larger rate because they train
    /// from scratch for a few thousand steps.
    pub fn learning_rate(self) -> f64 {
        match self {
            Profile::Desk => 1e-3,
            Profile::Full => 1e-5,
        }
    }

    pub fn stage1_steps(self) -> usize {
        match self {
            Profile::Desk => 2_000,
            Profile::Full => 200_000,
        }
    }

    pub fn stage2_steps(self) -> usize {
        match self {
            Profile::Desk => 2_000,
            Profile::Full => 120_000,
        }
    }

    pub fn batch_size(self) -> usize {
        4
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            other => Err(Error::config("profile", format!("expected desk|full, got `{other}`"))),
        }
    }
}

/// Geometry shared by every module of one profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    /// Person image height H.
    pub image_h: usize,
    /// Person image width W.
    pub image_w: usize,
    /// Spatial downscale between pixels and latents.
    pub latent_factor: usize,
    /// Text sequence length N_L.
    pub seq_len: usize,
    /// Text embedding width h_E.
    pub embed_width: usize,
    /// Pseudo-tokens per retrieved garment N_v.
    pub tokens_per_garment: usize,
}

impl Dims {
    pub fn latent_h(&self) -> usize {
        self.image_h / self.latent_factor
    }

    pub fn latent_w(&self) -> usize {
        self.image_w / self.latent_factor
    }
}

/// Channels of the noisy latent z_t and of the masked-image latent.
pub const LATENT_CHANNELS: usize = 4;
/// Body keypoints / pose heatmap channels.
pub const POSE_CHANNELS: usize = 18;
/// Channels of the stock inpainting input layer: z_t + m + E(I_M).
pub const BASE_INPUT_CHANNELS: usize = LATENT_CHANNELS + 1 + LATENT_CHANNELS;
/// Channels of the full spatial input γ.
pub const SPATIAL_CHANNELS: usize = BASE_INPUT_CHANNELS + POSE_CHANNELS;
/// Largest number of retrieved garments the generator accepts.
pub const MAX_RETRIEVED: usize = 3;
/// Fixed prompt prepended to every caption.
pub const FIXED_PROMPT: &str = "A photo of a model wearing a";
