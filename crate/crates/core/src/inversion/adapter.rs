use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::vision::VisualFeatureSequence;
use crate::error::{Error, Result};
use crate::nn::{Builder, Init, LayerNorm, Linear, Mlp, TransformerBlock};
use crate::profile::Profile;

/// Hyperparameters of the inversion adapter F_θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Pseudo-tokens per garment (N_v).
    pub n_v: usize,
    /// Text embedding width (h_E); also the transformer width.
    pub h_e: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Width of one vision-encoder token.
    pub vision_width: usize,
    /// Tokens per garment produced by the vision encoder.
    pub vision_tokens: usize,
}

impl AdapterConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                n_v: 4,
                h_e: 64,
                depth: 2,
                heads: 2,
                mlp_hidden: 128,
                vision_width: 8,
                vision_tokens: 1,
            },
            // ViT-H/14 at 224 px: 16x16 patches + class token, width 1280.
            Profile::Full => Self {
                n_v: 16,
                h_e: 1024,
                depth: 4,
                heads: 16,
                mlp_hidden: 1024,
                vision_width: 1280,
                vision_tokens: 257,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_v == 0 {
            return Err(Error::config("adapter.n_v", "must be at least 1"));
        }
        if self.h_e == 0 || self.heads == 0 || self.h_e % self.heads != 0 {
            return Err(Error::config(
                "adapter.heads",
                format!("{} heads do not divide width {}", self.heads, self.h_e),
            ));
        }
        if self.vision_tokens == 0 || self.vision_width == 0 {
            return Err(Error::config("adapter.vision", "vision tokens and width must be positive"));
        }
        Ok(())
    }

    /// `adapter.*` keys as written to config files and checkpoints.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("adapter.n_v".into(), self.n_v.to_string()),
            ("adapter.h_e".into(), self.h_e.to_string()),
            ("adapter.depth".into(), self.depth.to_string()),
            ("adapter.heads".into(), self.heads.to_string()),
            ("adapter.mlp_hidden".into(), self.mlp_hidden.to_string()),
            ("adapter.vision_width".into(), self.vision_width.to_string()),
            ("adapter.vision_tokens".into(), self.vision_tokens.to_string()),
        ]
    }

    /// Applies a single `adapter.*` key; returns false for foreign keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(key, format!("`{v}` is not a non-negative integer")))
        };
        match key {
            "adapter.n_v" => self.n_v = parse(value)?,
            "adapter.h_e" => self.h_e = parse(value)?,
            "adapter.depth" => self.depth = parse(value)?,
            "adapter.heads" => self.heads = parse(value)?,
            "adapter.mlp_hidden" => self.mlp_hidden = parse(value)?,
            "adapter.vision_width" => self.vision_width = parse(value)?,
            "adapter.vision_tokens" => self.vision_tokens = parse(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// N_v × h_E pseudo-token embeddings for one garment.
#[derive(Debug, Clone)]
pub struct PseudoTokenBlock {
    pub vectors: Tensor,
}

/// F_θ: a small transformer over [learned queries; projected vision tokens]
/// whose query outputs pass through an MLP into the text-embedding space.
#[derive(Debug, Clone)]
pub struct InversionAdapter {
    config: AdapterConfig,
    input: Linear,
    positions: Tensor,
    queries: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head: Mlp,
}

impl InversionAdapter {
    pub fn new(b: &Builder, config: AdapterConfig) -> Result<Self> {
        Self::build(b, config, Init::Normal(0.02))
    }

    /// Same as [`InversionAdapter::new`] with the output layer of the MLP
    /// zero-initialized.
    pub fn with_zero_head(b: &Builder, config: AdapterConfig) -> Result<Self> {
        Self::build(b, config, Init::Zeros)
    }

    fn build(b: &Builder, config: AdapterConfig, head_init: Init) -> Result<Self> {
        config.validate()?;
        let w = config.h_e;
        let blocks = (0..config.depth)
            .map(|i| TransformerBlock::new(&b.pp(&format!("blocks.{i}")), w, config.heads, 4 * w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            input: Linear::new(&b.pp("input"), config.vision_width, w)?,
            positions: b.get("positions", &[1, config.vision_tokens, w], Init::Normal(0.02))?,
            queries: b.get("queries", &[1, config.n_v, w], Init::Normal(0.02))?,
            blocks,
            norm: LayerNorm::new(&b.pp("norm"), w)?,
            head: Mlp::with_output_init(&b.pp("head"), w, config.mlp_hidden, w, head_init)?,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    /// (B, tokens, vision_width) -> (B, N_v, h_E).
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let (bsz, tokens, width) = features.dims3()?;
        if width != self.config.vision_width {
            return Err(Error::Dimension {
                context: "adapter input width".into(),
                expected: self.config.vision_width,
                found: width,
            });
        }
        if tokens != self.config.vision_tokens {
            return Err(Error::Dimension {
                context: "adapter input tokens".into(),
                expected: self.config.vision_tokens,
                found: tokens,
            });
        }
        let x = self.input.forward(features)?.broadcast_add(&self.positions)?;
        let q = self.queries.broadcast_as((bsz, self.config.n_v, self.config.h_e))?;
        let mut h = Tensor::cat(&[&q, &x], 1)?;
        for block in &self.blocks {
            h = block.forward(&h, None)?;
        }
        let h = self.norm.forward(&h.narrow(1, 0, self.config.n_v)?)?;
        self.head.forward(&h)
    }
}

/// v* = F_θ(V_E(x_r)) for a single garment.
pub fn project_to_pseudo_tokens(
    features: &VisualFeatureSequence,
    adapter: &InversionAdapter,
) -> Result<PseudoTokenBlock> {
    let out = adapter.forward(&features.tokens.unsqueeze(0)?)?;
    Ok(PseudoTokenBlock {
        vectors: out.squeeze(0)?,
    })
}
