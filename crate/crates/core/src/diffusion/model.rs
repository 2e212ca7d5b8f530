use candle_core::{DType, Device, Tensor};
use image::RgbImage;

use super::unet::{UNet, UNetConfig};
use crate::conditioning::{LatentCodec, ToyVae};
use crate::error::{Error, Result};
use crate::inversion::{
    assemble_conditioning_sequence, empty_sequence, extract_visual_features, stack_sequences, AdapterConfig,
    ConditioningSequence, HashTokenEmbedder, InversionAdapter, PatchStatsVisionEncoder, PseudoTokenBlock,
    SequenceLayout, TextTransformer, TokenEmbedder, ToyTextEncoder, VisionEncoder,
};
use crate::nn::ParamStore;
use crate::profile::{Dims, Profile};

/// Seed of the frozen desk backbone; fixing it makes the backbone a
/// reproducible artifact in the same way loaded pretrained weights are.
pub const DESK_BACKBONE_SEED: u64 = 0x5eed_ba5e;
const DESK_TEXT_SEED: u64 = 0x7e47;
const DESK_TOKEN_SEED: u64 = 0x70c3;
const DESK_TEXT_HEADS: usize = 4;
const DESK_TEXT_DEPTH: usize = 1;

/// The frozen parts: autoencoder, vision encoder, tokenizer + embedding
/// table, and text encoder.
pub struct Components {
    pub vae: Box<dyn LatentCodec>,
    pub vision: Box<dyn VisionEncoder>,
    pub tokens: Box<dyn TokenEmbedder>,
    pub text: Box<dyn TextTransformer>,
    pub layout: SequenceLayout,
}

impl Components {
    pub fn for_profile(profile: Profile, dtype: DType, device: &Device) -> Result<Self> {
        let dims = profile.dims();
        match profile {
            Profile::Desk => Ok(Self {
                vae: Box::new(ToyVae::default()),
                vision: Box::new(PatchStatsVisionEncoder::default()),
                tokens: Box::new(HashTokenEmbedder::new(dims.embed_width, DESK_TOKEN_SEED)),
                text: Box::new(ToyTextEncoder::new(
                    dims.embed_width,
                    dims.seq_len,
                    DESK_TEXT_HEADS,
                    DESK_TEXT_DEPTH,
                    DESK_TEXT_SEED,
                    dtype,
                    device,
                )?),
                layout: SequenceLayout::from_dims(&dims),
            }),
            Profile::Full => Err(Error::Unsupported(
                "full-scale encoders and autoencoder require pretrained weights".into(),
            )),
        }
    }

    pub fn tag(&self) -> String {
        format!("{}+{}+{}", self.vae.tag(), self.vision.tag(), self.text.tag())
    }
}

/// Backbone U-Net, inversion adapter F_θ and the frozen components.
pub struct FashionRag {
    pub profile: Profile,
    pub components: Components,
    pub unet_config: UNetConfig,
    pub adapter_config: AdapterConfig,
    pub unet_params: ParamStore,
    pub adapter_params: ParamStore,
    pose: bool,
}

impl FashionRag {
    /// Fresh model: backbone from the fixed backbone seed, adapter from
    /// `seed`. Pose channels are not attached.
    pub fn new(profile: Profile, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let components = Components::for_profile(profile, dtype, device)?;
        let unet_config = UNetConfig::for_profile(profile)?;
        let mut adapter_config = AdapterConfig::for_profile(profile);
        adapter_config.vision_tokens = components.vision.token_count();
        adapter_config.vision_width = components.vision.token_width();
        let unet_params = ParamStore::new(DESK_BACKBONE_SEED, dtype, device);
        let adapter_params = ParamStore::new(seed, dtype, device);
        UNet::new(&unet_params.builder(false), &unet_config, false)?;
        InversionAdapter::new(&adapter_params.builder(false), adapter_config)?;
        Ok(Self {
            profile,
            components,
            unet_config,
            adapter_config,
            unet_params,
            adapter_params,
            pose: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.profile.dims()
    }

    pub fn dtype(&self) -> DType {
        self.unet_params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.unet_params.device()
    }

    pub fn has_pose(&self) -> bool {
        self.pose
    }

    /// Extends the input projection with zero-initialized pose channels.
    pub fn attach_pose(&mut self) -> Result<()> {
        if !self.pose {
            UNet::new(&self.unet_params.builder(false), &self.unet_config, true)?;
            self.pose = true;
        }
        Ok(())
    }

    pub fn backbone_tag(&self) -> String {
        format!("toy-unet-v1@{DESK_BACKBONE_SEED:x}+{}", self.components.tag())
    }

    pub fn unet(&self, trainable: bool) -> Result<UNet> {
        UNet::new(&self.unet_params.builder(trainable), &self.unet_config, self.pose)
    }

    pub fn adapter(&self, trainable: bool) -> Result<InversionAdapter> {
        InversionAdapter::new(&self.adapter_params.builder(trainable), self.adapter_config)
    }

    /// V_E(x_r): (tokens, width), detached.
    pub fn visual_features(&self, garment: &RgbImage) -> Result<Tensor> {
        Ok(extract_visual_features(garment, self.components.vision.as_ref(), self.dtype(), self.device())?.tokens)
    }

    /// One x_c per item (caption, ranked garment features). All garments of
    /// the batch go through the adapter in a single pass.
    pub fn sequences(&self, adapter: &InversionAdapter, items: &[(&str, &[Tensor])]) -> Result<Vec<ConditioningSequence>> {
        let all: Vec<&Tensor> = items.iter().flat_map(|(_, g)| g.iter()).collect();
        let blocks = if all.is_empty() {
            None
        } else {
            Some(adapter.forward(&Tensor::stack(&all, 0)?)?)
        };
        let mut offset = 0;
        let mut out = Vec::with_capacity(items.len());
        for (caption, garments) in items {
            let mut own = Vec::with_capacity(garments.len());
            for i in 0..garments.len() {
                let b = blocks.as_ref().expect("garments present");
                own.push(PseudoTokenBlock {
                    vectors: b.get(offset + i)?,
                });
            }
            offset += garments.len();
            let seq = if own.is_empty() {
                crate::inversion::text_only_sequence(
                    caption,
                    self.components.tokens.as_ref(),
                    &self.components.layout,
                    self.dtype(),
                    self.device(),
                )?
            } else {
                assemble_conditioning_sequence(caption, &own, self.components.tokens.as_ref(), &self.components.layout)?
            };
            out.push(seq);
        }
        Ok(out)
    }

    /// The unconditional (empty) sequence.
    pub fn empty_sequence(&self) -> Result<ConditioningSequence> {
        empty_sequence(
            self.components.tokens.as_ref(),
            &self.components.layout,
            self.dtype(),
            self.device(),
        )
    }

    /// ψ = T_E(x_c) and the key mask, both batched.
    pub fn encode(&self, seqs: &[ConditioningSequence]) -> Result<(Tensor, Tensor)> {
        let (x, mask) = stack_sequences(seqs)?;
        Ok((crate::inversion::encode_conditioning(&x, self.components.text.as_ref())?, mask))
    }

    /// Census of trainable parameters per stage.
    pub fn census(&self) -> (usize, usize) {
        (self.adapter_params.census(), self.unet_params.census())
    }

    /// Content hash of everything that is never trained: the text encoder's
    /// parameters (the autoencoder and vision encoder have none).
    pub fn frozen_hash(&self) -> Result<String> {
        match self.components.text.params() {
            Some(p) => p.content_hash(),
            None => Ok(String::new()),
        }
    }
}
