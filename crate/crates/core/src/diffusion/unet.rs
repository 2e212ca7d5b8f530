use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::conditioning::{extend_input_projection, InputProjection};
use crate::error::{Error, Result};
use crate::nn::{
    key_mask_bias, multi_head_attention, timestep_embedding, AttentionProbe, Builder, Conv2d, GroupNorm, LayerNorm,
    Linear, Mlp,
};
use crate::profile::{Profile, LATENT_CHANNELS, POSE_CHANNELS, SPATIAL_CHANNELS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
    /// Per-head key width d of every cross-attention.
    pub head_dim: usize,
    /// Width h_E of the conditioning sequence.
    pub context_dim: usize,
}

impl UNetConfig {
    /// The desk-scale backbone. Full scale needs pretrained weights, which
    /// this crate cannot load.
    pub fn for_profile(profile: Profile) -> Result<Self> {
        match profile {
            Profile::Desk => Ok(Self {
                channels: vec![32, 64],
                groups: 8,
                time_dim: 128,
                head_dim: 16,
                context_dim: profile.dims().embed_width,
            }),
            Profile::Full => Err(Error::Unsupported(
                "the full-scale backbone requires pretrained inpainting weights; only the desk profile can be built".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 2 {
            return Err(Error::config("unet.channels", "the backbone has exactly two levels"));
        }
        for c in &self.channels {
            if c % self.groups != 0 || c % self.head_dim != 0 {
                return Err(Error::config(
                    "unet.channels",
                    format!("{c} must be divisible by groups {} and head width {}", self.groups, self.head_dim),
                ));
            }
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            (
                "unet.channels".into(),
                self.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            ),
            ("unet.groups".into(), self.groups.to_string()),
            ("unet.time_dim".into(), self.time_dim.to_string()),
            ("unet.head_dim".into(), self.head_dim.to_string()),
            ("unet.context_dim".into(), self.context_dim.to_string()),
        ]
    }
}

/// Geometry of one cross-attention layer: Q = W_Q·x, K = W_K·ψ, V = W_V·ψ,
/// softmax scaled by 1/√d.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub head_dim: usize,
    pub query_width: usize,
    pub context_width: usize,
}

impl AttentionSpec {
    pub fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(b: &Builder, cin: usize, cout: usize, groups: usize, time_dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&b.pp("norm1"), groups, cin)?,
            conv1: Conv2d::new(&b.pp("conv1"), cin, cout, 3, 1)?,
            time: Linear::new(&b.pp("time"), time_dim, cout)?,
            norm2: GroupNorm::new(&b.pp("norm2"), groups, cout)?,
            conv2: Conv2d::new(&b.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&b.pp("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.time.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

#[derive(Debug, Clone)]
struct CrossAttention {
    spec: AttentionSpec,
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
    ln2: LayerNorm,
    ff: Mlp,
    proj_out: Linear,
}

impl CrossAttention {
    fn new(b: &Builder, spec: AttentionSpec, groups: usize) -> Result<Self> {
        let (c, inner, ctx) = (spec.query_width, spec.inner(), spec.context_width);
        Ok(Self {
            spec,
            norm: GroupNorm::new(&b.pp("norm"), groups, c)?,
            proj_in: Linear::new(&b.pp("proj_in"), c, c)?,
            ln1: LayerNorm::new(&b.pp("ln1"), c)?,
            to_q: Linear::with_init(&b.pp("to_q"), c, inner, crate::nn::Init::FanIn(c), false)?,
            to_k: Linear::with_init(&b.pp("to_k"), ctx, inner, crate::nn::Init::FanIn(ctx), false)?,
            to_v: Linear::with_init(&b.pp("to_v"), ctx, inner, crate::nn::Init::FanIn(ctx), false)?,
            to_out: Linear::new(&b.pp("to_out"), inner, c)?,
            ln2: LayerNorm::new(&b.pp("ln2"), c)?,
            ff: Mlp::new(&b.pp("ff"), c, 4 * c, c)?,
            proj_out: Linear::new(&b.pp("proj_out"), c, c)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor, bias: &Tensor, probe: Option<&mut AttentionProbe>) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let seq = self.norm.forward(x)?.reshape((bsz, c, h * w))?.transpose(1, 2)?;
        let seq = self.proj_in.forward(&seq)?;
        let q = self.to_q.forward(&self.ln1.forward(&seq)?)?;
        let k = self.to_k.forward(ctx)?;
        let v = self.to_v.forward(ctx)?;
        let a = multi_head_attention(&q, &k, &v, self.spec.heads, Some(bias), probe)?;
        let seq = (&seq + self.to_out.forward(&a)?)?;
        let seq = (&seq + self.ff.forward(&self.ln2.forward(&seq)?)?)?;
        let out = self.proj_out.forward(&seq)?.transpose(1, 2)?.reshape((bsz, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Desk-scale denoiser ε_θ(γ, ψ): two downsampling levels, a middle block
/// and two upsampling levels, with one cross-attention per resolution
/// (both down levels and the middle).
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: InputProjection,
    down_res: Vec<ResBlock>,
    down_attn: Vec<CrossAttention>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: CrossAttention,
    mid2: ResBlock,
    upconv: Vec<Conv2d>,
    up_res: Vec<ResBlock>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    /// Builds (or views) the backbone under `b`. With `pose` the input
    /// projection carries the zero-initialized pose kernel.
    pub fn new(b: &Builder, config: &UNetConfig, pose: bool) -> Result<Self> {
        config.validate()?;
        let (c0, c1) = (config.channels[0], config.channels[1]);
        let (g, td) = (config.groups, config.time_dim);
        let spec = |c: usize| AttentionSpec {
            heads: c / config.head_dim,
            head_dim: config.head_dim,
            query_width: c,
            context_width: config.context_dim,
        };
        let base = InputProjection::new(&b.pp("conv_in"), c0)?;
        let conv_in = if pose {
            extend_input_projection(base.base(), POSE_CHANNELS, &b.pp("conv_in_pose"))?
        } else {
            base
        };
        Ok(Self {
            config: config.clone(),
            time1: Linear::new(&b.pp("time1"), td / 2, td)?,
            time2: Linear::new(&b.pp("time2"), td, td)?,
            conv_in,
            down_res: vec![
                ResBlock::new(&b.pp("down0.res"), c0, c0, g, td)?,
                ResBlock::new(&b.pp("down1.res"), c0, c1, g, td)?,
            ],
            down_attn: vec![
                CrossAttention::new(&b.pp("down0.attn"), spec(c0), g)?,
                CrossAttention::new(&b.pp("down1.attn"), spec(c1), g)?,
            ],
            downsample: vec![
                Conv2d::new(&b.pp("down0.sample"), c0, c0, 3, 2)?,
                Conv2d::new(&b.pp("down1.sample"), c1, c1, 3, 2)?,
            ],
            mid1: ResBlock::new(&b.pp("mid.res1"), c1, c1, g, td)?,
            mid_attn: CrossAttention::new(&b.pp("mid.attn"), spec(c1), g)?,
            mid2: ResBlock::new(&b.pp("mid.res2"), c1, c1, g, td)?,
            upconv: vec![
                Conv2d::new(&b.pp("up1.conv"), c1, c1, 3, 1)?,
                Conv2d::new(&b.pp("up0.conv"), c1, c1, 3, 1)?,
            ],
            up_res: vec![
                ResBlock::new(&b.pp("up1.res"), 2 * c1, c1, g, td)?,
                ResBlock::new(&b.pp("up0.res"), c1 + c0, c0, g, td)?,
            ],
            norm_out: GroupNorm::new(&b.pp("norm_out"), g, c0)?,
            conv_out: Conv2d::new(&b.pp("conv_out"), c0, LATENT_CHANNELS, 3, 1)?,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn has_pose(&self) -> bool {
        self.conv_in.is_extended()
    }

    pub fn input_projection(&self) -> &InputProjection {
        &self.conv_in
    }

    /// Specs of the cross-attention layers in forward order.
    pub fn attention_specs(&self) -> Vec<AttentionSpec> {
        self.down_attn
            .iter()
            .chain(std::iter::once(&self.mid_attn))
            .map(|a| a.spec)
            .collect()
    }

    /// ε̂ for γ (B, 27, h, w), ψ (B, N_L, h_E) with key mask (B, N_L) and
    /// one timestep per sample.
    pub fn forward(
        &self,
        gamma: &Tensor,
        t: &[usize],
        psi: &Tensor,
        key_mask: &Tensor,
        mut probe: Option<&mut AttentionProbe>,
    ) -> Result<Tensor> {
        let (bsz, c, h, w) = gamma.dims4()?;
        if c != SPATIAL_CHANNELS {
            return Err(Error::Dimension {
                context: "γ channels".into(),
                expected: SPATIAL_CHANNELS,
                found: c,
            });
        }
        let (pb, _, pw) = psi.dims3()?;
        if pw != self.config.context_dim {
            return Err(Error::Dimension {
                context: "ψ width".into(),
                expected: self.config.context_dim,
                found: pw,
            });
        }
        if pb != bsz || t.len() != bsz || key_mask.dims() != [bsz, psi.dim(1)?] {
            return Err(Error::Shape(format!(
                "batch mismatch: γ {bsz}, ψ {pb}, timesteps {}, mask {:?}",
                t.len(),
                key_mask.dims()
            )));
        }
        let bias = key_mask_bias(&key_mask.to_dtype(psi.dtype())?)?;
        let temb = timestep_embedding(t, self.config.time_dim / 2, gamma.dtype(), gamma.device())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let mut x = self.conv_in.forward(gamma)?;
        let mut skips = Vec::with_capacity(2);
        for i in 0..2 {
            x = self.down_res[i].forward(&x, &temb)?;
            x = self.down_attn[i].forward(&x, psi, &bias, probe.as_deref_mut())?;
            skips.push(x.clone());
            x = self.downsample[i].forward(&x)?;
        }
        x = self.mid1.forward(&x, &temb)?;
        x = self.mid_attn.forward(&x, psi, &bias, probe.as_deref_mut())?;
        x = self.mid2.forward(&x, &temb)?;
        for i in 0..2 {
            let skip = skips.pop().expect("one skip per level");
            let (_, _, sh, sw) = skip.dims4()?;
            x = self.upconv[i].forward(&x.upsample_nearest2d(sh, sw)?)?;
            x = self.up_res[i].forward(&Tensor::cat(&[&x, &skip], 1)?, &temb)?;
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        debug_assert_eq!(out.dims(), [bsz, LATENT_CHANNELS, h, w]);
        Ok(out)
    }
}

/// Convenience wrapper over [`UNet::forward`].
pub fn predict_noise(
    unet: &UNet,
    gamma: &Tensor,
    psi: &Tensor,
    key_mask: &Tensor,
    t: &[usize],
    probe: Option<&mut AttentionProbe>,
) -> Result<Tensor> {
    unet.forward(gamma, t, psi, key_mask, probe)
}

/// Row sums of every probed attention map; each should be 1.
pub fn attention_row_sums(probe: &AttentionProbe) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for m in &probe.maps {
        let sums: Vec<f64> = m
            .sum(D::Minus1)?
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1()?;
        out.extend(sums);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    fn setup(pose: bool) -> (ParamStore, UNet) {
        let store = ParamStore::new(11, DType::F32, &Device::Cpu);
        let cfg = UNetConfig::for_profile(Profile::Desk).unwrap();
        let unet = UNet::new(&store.builder(false), &cfg, pose).unwrap();
        (store, unet)
    }

    #[test]
    fn output_shape_and_attention_rows() {
        let (_, unet) = setup(true);
        let dev = Device::Cpu;
        let gamma = Tensor::randn(0f32, 1.0, (2, 27, 16, 12), &dev).unwrap();
        let psi = Tensor::randn(0f32, 1.0, (2, 32, 64), &dev).unwrap();
        let mask = Tensor::ones((2, 32), DType::F32, &dev).unwrap();
        let mut probe = AttentionProbe::default();
        let eps = predict_noise(&unet, &gamma, &psi, &mask, &[3, 700], Some(&mut probe)).unwrap();
        assert_eq!(eps.dims(), &[2, 4, 16, 12]);
        assert_eq!(probe.maps.len(), 3);
        assert!(attention_row_sums(&probe).unwrap().iter().all(|s| (s - 1.0).abs() < 1e-5));
        for spec in unet.attention_specs() {
            assert_eq!(spec.context_width, 64);
            assert_eq!(spec.inner(), spec.query_width);
        }
    }

    #[test]
    fn padding_rows_are_neutral() {
        let (_, unet) = setup(false);
        let dev = Device::Cpu;
        let gamma = Tensor::randn(0f32, 1.0, (1, 27, 16, 12), &dev).unwrap();
        let psi = Tensor::randn(0f32, 1.0, (1, 32, 64), &dev).unwrap();
        let keep: Vec<f32> = (0..32).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
        let mask = Tensor::from_vec(keep, (1, 32), &dev).unwrap();
        let other = Tensor::cat(
            &[psi.narrow(1, 0, 20).unwrap(), Tensor::randn(0f32, 3.0, (1, 12, 64), &dev).unwrap()],
            1,
        )
        .unwrap();
        let a: Vec<f32> = unet.forward(&gamma, &[10], &psi, &mask, None).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = unet.forward(&gamma, &[10], &other, &mask, None).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_errors() {
        let (_, unet) = setup(false);
        let dev = Device::Cpu;
        let psi = Tensor::zeros((1, 32, 64), DType::F32, &dev).unwrap();
        let mask = Tensor::ones((1, 32), DType::F32, &dev).unwrap();
        let bad = Tensor::zeros((1, 9, 16, 12), DType::F32, &dev).unwrap();
        assert!(unet.forward(&bad, &[0], &psi, &mask, None).is_err());
        let gamma = Tensor::zeros((1, 27, 16, 12), DType::F32, &dev).unwrap();
        let narrow = Tensor::zeros((1, 32, 32), DType::F32, &dev).unwrap();
        assert!(unet.forward(&gamma, &[0], &narrow, &mask, None).is_err());
        assert!(UNetConfig::for_profile(Profile::Full).is_err());
    }
}
