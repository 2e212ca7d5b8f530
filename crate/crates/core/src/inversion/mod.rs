//! Textual inversion of retrieved garments: vision features are mapped by a
//! small transformer + MLP into blocks of pseudo-token embeddings, which are
//! spliced into the caption's embedding sequence before the text encoder.

mod adapter;
mod sequence;
mod text_encoder;
mod tokens;
mod vision;

pub use adapter::{project_to_pseudo_tokens, AdapterConfig, InversionAdapter, PseudoTokenBlock};
pub use sequence::{
    assemble_conditioning_sequence, empty_sequence, stack_sequences, text_only_sequence,
    ConditioningSequence, SequenceLayout, TokenRole,
};
pub use text_encoder::{encode_conditioning, IdentityTextEncoder, TextTransformer, ToyTextEncoder};
pub use tokens::{HashTokenEmbedder, TokenEmbedder};
pub use vision::{extract_visual_features, PatchStatsVisionEncoder, VisionEncoder, VisualFeatureSequence};
