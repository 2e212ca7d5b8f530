//! Latent inpainting backbone, noise schedule, classifier-free guidance,
//! the two training stages and sampling.

pub mod checkpoint;
pub mod generate;
pub mod guidance;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod train;
pub mod unet;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedCheckpoint, Stage};
pub use generate::{composite, generate, sample_seed, GenerationInput};
pub use guidance::{guided_prediction, ChainPredictions, GuidanceConfig};
pub use model::FashionRag;
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{ddim_step, ddim_timesteps, forward_noising, NoiseSchedule};
pub use train::{training_loss, train_stage1, train_stage2, Example, TrainConfig, TrainOutput, TrainReport};
pub use unet::{UNet, UNetConfig};
