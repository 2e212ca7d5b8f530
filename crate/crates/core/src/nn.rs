//! Minimal layer toolkit over candle with seeded, named parameters.
//!
//! Parameters live in a [`ParamStore`]. Modules are built through a
//! [`Builder`] that either creates a parameter (deterministically, from the
//! store's seeded generator) or hands out a view of an existing one. A view
//! is tracked by autograd when the builder is trainable and detached when it
//! is frozen, so freezing a module is a matter of how it is built.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual dense/conv default.
    FanIn(usize),
}

pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            dtype,
            device: device.clone(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder(&self, trainable: bool) -> Builder<'_> {
        Builder {
            store: self,
            prefix: String::new(),
            trainable,
        }
    }

    fn create(&self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Sorted (name, var) pairs.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.borrow().get(name).cloned()
    }

    pub fn insert(&self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let value = value.to_dtype(self.dtype)?.to_device(&self.device)?;
        self.vars.borrow_mut().insert(name.into(), Var::from_tensor(&value)?);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn census(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f64 values.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in self.vars.borrow().iter() {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values: Vec<f64> = var.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Detached copies keyed by `prefix + name`.
    pub fn tensors(&self, prefix: &str) -> HashMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites existing parameters from `tensors` (keys `prefix + name`).
    /// Every parameter of the store must be present with a matching shape.
    pub fn load_from(&self, tensors: &HashMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let key = format!("{prefix}{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter `{key}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{key}`: expected {:?}, found {:?}",
                    var.dims(),
                    t.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        candle_core::safetensors::save(&self.tensors(""), path)?;
        Ok(())
    }
}

pub struct Builder<'a> {
    store: &'a ParamStore,
    prefix: String,
    trainable: bool,
}

impl<'a> Builder<'a> {
    pub fn pp(&self, name: &str) -> Builder<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: self.store,
            prefix,
            trainable: self.trainable,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let existing = self.store.vars.borrow().get(&full).cloned();
        let var = match existing {
            Some(v) => {
                if v.dims() != shape {
                    return Err(Error::Shape(format!(
                        "parameter `{full}`: expected {shape:?}, found {:?}",
                        v.dims()
                    )));
                }
                v
            }
            None => {
                let v = Var::from_tensor(&self.store.create(shape, init)?)?;
                self.store.vars.borrow_mut().insert(full, v.clone());
                v
            }
        };
        Ok(if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &Builder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(b, in_dim, out_dim, Init::FanIn(in_dim), true)
    }

    pub fn with_init(b: &Builder, in_dim: usize, out_dim: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = b.get("weight", &[out_dim, in_dim], init)?;
        let bias = if bias {
            Some(b.get("bias", &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(b: &Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[dim], Init::Ones)?,
            bias: b.get("bias", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(b: &Builder, groups: usize, channels: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::Shape(format!("{channels} channels not divisible into {groups} groups")));
        }
        Ok(Self {
            weight: b.get("weight", &[channels], Init::Ones)?,
            bias: b.get("bias", &[channels], Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }

    /// `x`: (B, C, H, W).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (bsz, c, h, w) = x.dims4()?;
        let g = x.reshape((bsz, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .reshape((bsz, c, h, w))?;
        let scale = self.weight.reshape((1, c, 1, 1))?;
        let shift = self.bias.reshape((1, c, 1, 1))?;
        Ok(normed.broadcast_mul(&scale)?.broadcast_add(&shift)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(b: &Builder, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(b, cin, cout, kernel, stride, Init::FanIn(cin * kernel * kernel))
    }

    pub fn with_init(
        b: &Builder,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.get("weight", &[cout, cin, kernel, kernel], init)?,
            bias: b.get("bias", &[cout], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let (_, _, k, _) = weight.dims4()?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims1()?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }

    /// Convolution without the bias term.
    pub fn forward_no_bias(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(b: &Builder, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, hidden)?,
            fc2: Linear::new(&b.pp("fc2"), hidden, out)?,
        })
    }

    pub fn with_output_init(b: &Builder, dim: usize, hidden: usize, out: usize, init: Init) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&b.pp("fc1"), dim, hidden)?,
            fc2: Linear::with_init(&b.pp("fc2"), hidden, out, init, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Additive score bias that hides masked keys. `key_mask` is (B, Lk) with 1
/// for visible keys and 0 for hidden ones; result broadcasts over heads and
/// queries as (B, 1, 1, Lk).
pub fn key_mask_bias(key_mask: &Tensor) -> Result<Tensor> {
    let (bsz, lk) = key_mask.dims2()?;
    let bias = ((key_mask.ones_like()? - key_mask)? * -1e9)?;
    Ok(bias.reshape((bsz, 1, 1, lk))?)
}

/// (1, 1, L, L) bias forbidding attention to later positions.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j > i { -1e9 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

/// Collects attention probability maps when passed to a forward pass.
#[derive(Debug, Default)]
pub struct AttentionProbe {
    pub maps: Vec<Tensor>,
}

/// softmax(Q Kᵀ / √d + bias) V over `heads` heads of width d = inner/heads.
/// `q`: (B, Lq, inner), `k`/`v`: (B, Lk, inner).
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    bias: Option<&Tensor>,
    probe: Option<&mut AttentionProbe>,
) -> Result<Tensor> {
    let (bsz, lq, inner) = q.dims3()?;
    let lk = k.dim(1)?;
    if inner % heads != 0 {
        return Err(Error::Shape(format!("width {inner} not divisible by {heads} heads")));
    }
    let d = inner / heads;
    let split = |t: &Tensor, l: usize| -> Result<Tensor> {
        Ok(t.reshape((bsz, l, heads, d))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
    if let Some(bias) = bias {
        scores = scores.broadcast_add(bias)?;
    }
    let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
    if let Some(p) = probe {
        p.maps.push(probs.detach());
    }
    let out = probs.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((bsz, lq, inner))?)
}

/// Pre-norm transformer block (self-attention + MLP).
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    mlp: Mlp,
    heads: usize,
    width: usize,
}

impl TransformerBlock {
    pub fn new(b: &Builder, width: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&b.pp("ln1"), width)?,
            qkv: Linear::new(&b.pp("qkv"), width, 3 * width)?,
            proj: Linear::new(&b.pp("proj"), width, width)?,
            ln2: LayerNorm::new(&b.pp("ln2"), width)?,
            mlp: Mlp::new(&b.pp("mlp"), width, mlp_hidden, width)?,
            heads,
            width,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let qkv = self.qkv.forward(&h)?;
        let w = self.width;
        let q = qkv.narrow(D::Minus1, 0, w)?;
        let k = qkv.narrow(D::Minus1, w, w)?;
        let v = qkv.narrow(D::Minus1, 2 * w, w)?;
        let a = multi_head_attention(&q, &k, &v, self.heads, bias, None)?;
        let x = (x + self.proj.forward(&a)?)?;
        let h = self.ln2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

/// Sinusoidal embedding of integer timesteps: (B,) -> (B, dim).
pub fn timestep_embedding(timesteps: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let t = t as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).cos());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t * freq).sin());
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), 2 * half), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ParamStore::new(5, DType::F32, &Device::Cpu);
        let b = ParamStore::new(5, DType::F32, &Device::Cpu);
        Linear::new(&a.builder(true).pp("l"), 3, 4).unwrap();
        Linear::new(&b.builder(true).pp("l"), 3, 4).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        assert_eq!(a.census(), 16);
    }

    #[test]
    fn frozen_views_have_no_gradient() {
        let store = ParamStore::new(0, DType::F64, &Device::Cpu);
        let lin = Linear::new(&store.builder(false).pp("l"), 2, 2).unwrap();
        let x = Var::new(&[[1.0f64, 2.0]], &Device::Cpu).unwrap();
        let grads = lin.forward(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        for (_, v) in store.vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }

    #[test]
    fn masked_attention_rows_sum_to_one_and_ignore_hidden_keys() {
        let dev = Device::Cpu;
        let q = Tensor::randn(0f64, 1.0, (2, 5, 8), &dev).unwrap();
        let k = Tensor::randn(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        let v = Tensor::randn(0f64, 1.0, (2, 6, 8), &dev).unwrap();
        let mask = Tensor::new(&[[1f64, 1., 1., 0., 0., 0.], [1., 1., 1., 1., 1., 0.]], &dev).unwrap();
        let bias = key_mask_bias(&mask).unwrap();
        let mut probe = AttentionProbe::default();
        let out = multi_head_attention(&q, &k, &v, 2, Some(&bias), Some(&mut probe)).unwrap();
        let sums: Vec<f64> = probe.maps[0].sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
        // change hidden values: output bit-identical
        let noise = Tensor::randn(0f64, 5.0, (2, 6, 8), &dev).unwrap();
        let keep = mask.unsqueeze(2).unwrap().broadcast_as((2, 6, 8)).unwrap();
        let v2 = (v.broadcast_mul(&keep).unwrap() + noise.broadcast_mul(&(keep.ones_like().unwrap() - &keep).unwrap()).unwrap()).unwrap();
        let k2 = (k.broadcast_mul(&keep).unwrap() + noise.broadcast_mul(&(keep.ones_like().unwrap() - &keep).unwrap()).unwrap()).unwrap();
        let out2 = multi_head_attention(&q, &k2, &v2, 2, Some(&bias), None).unwrap();
        let a: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = out2.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
