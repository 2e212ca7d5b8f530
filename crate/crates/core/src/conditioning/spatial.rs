use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::profile::{LATENT_CHANNELS, POSE_CHANNELS, SPATIAL_CHANNELS};

/// Channel layout of γ: name, offset, width.
pub const SPATIAL_PIECES: [(&str, usize, usize); 4] = [
    ("z_t", 0, LATENT_CHANNELS),
    ("m", LATENT_CHANNELS, 1),
    ("masked_latent", LATENT_CHANNELS + 1, LATENT_CHANNELS),
    ("p", 2 * LATENT_CHANNELS + 1, POSE_CHANNELS),
];

/// γ = [z_t; m; E(I_M); p]: (B, 27, h, w).
#[derive(Debug, Clone)]
pub struct SpatialInput {
    pub gamma: Tensor,
}

impl SpatialInput {
    fn piece(&self, i: usize) -> Result<Tensor> {
        let (_, offset, width) = SPATIAL_PIECES[i];
        Ok(self.gamma.narrow(1, offset, width)?)
    }

    pub fn z_t(&self) -> Result<Tensor> {
        self.piece(0)
    }

    pub fn mask(&self) -> Result<Tensor> {
        self.piece(1)
    }

    pub fn masked_latent(&self) -> Result<Tensor> {
        self.piece(2)
    }

    pub fn pose(&self) -> Result<Tensor> {
        self.piece(3)
    }

    /// Same input with the pose channels zeroed.
    pub fn without_pose(&self) -> Result<Self> {
        let base = self.gamma.narrow(1, 0, SPATIAL_CHANNELS - POSE_CHANNELS)?;
        let pose = self.pose()?.zeros_like()?;
        Ok(Self {
            gamma: Tensor::cat(&[base, pose], 1)?,
        })
    }
}

/// Concatenates the four (B, c, h, w) pieces along channels in γ order.
pub fn assemble_spatial_input(z_t: &Tensor, m: &Tensor, masked_latent: &Tensor, p: &Tensor) -> Result<SpatialInput> {
    let pieces = [z_t, m, masked_latent, p];
    let reference = z_t.dims();
    let mut ok = reference.len() == 4;
    let mut report = Vec::new();
    for ((name, _, width), t) in SPATIAL_PIECES.iter().zip(pieces) {
        let d = t.dims();
        let good = d.len() == 4
            && d[1] == *width
            && reference.len() == 4
            && d[0] == reference[0]
            && d[2..] == reference[2..];
        ok &= good;
        report.push(format!(
            "{name}: {d:?} (want {width} channels){}",
            if good { "" } else { " MISMATCH" }
        ));
    }
    if !ok {
        return Err(Error::Shape(format!("spatial input pieces: {}", report.join("; "))));
    }
    let gamma = Tensor::cat(&pieces, 1)?;
    debug_assert_eq!(gamma.dim(1)?, SPATIAL_CHANNELS);
    Ok(SpatialInput { gamma })
}
