//! Retrieval-augmented diffusion inpainting for multimodal fashion image
//! editing.
//!
//! A caption is used to retrieve garments from a catalog; each retrieved
//! garment is projected into the text-embedding space as a block of
//! pseudo-tokens, appended to the caption embeddings, and the resulting
//! sequence conditions a latent inpainting U-Net through cross-attention.
//! Body pose, the edit mask and the masked image enter through the U-Net's
//! input convolution.

pub mod category;
pub mod conditioning;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod palette;
pub mod pipeline;
pub mod profile;
pub mod retrieval;

pub use category::Category;
pub use error::{Error, Result};
pub use profile::{Dims, Profile};
