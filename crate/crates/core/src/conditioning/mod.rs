//! Spatial conditioning: edit mask, pose heatmaps, masked-image latent and
//! the 27-channel input γ = [z_t; m; E(I_M); p], plus the pose-extended input
//! projection of the U-Net.

mod maps;
mod projection;
mod spatial;
mod vae;

pub use maps::{
    image_to_tensor, mask_from_image, render_pose_heatmaps, resize_to_latent, tensor_to_image, EditMask, Keypoint,
    PoseMap, ResizeMode, POSE_SIGMA,
};
pub use projection::{extend_input_projection, InputProjection};
pub use spatial::{assemble_spatial_input, SpatialInput, SPATIAL_PIECES};
pub use vae::{encode_masked_image, masked_image, LatentCodec, ToyVae};
