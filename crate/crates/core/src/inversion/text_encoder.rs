use candle_core::{Device, DType, Tensor};

use super::sequence::ConditioningSequence;
use crate::error::{Error, Result};
use crate::nn::{causal_bias, Init, LayerNorm, ParamStore, TransformerBlock};

/// Frozen text encoder T_E mapping embedded sequences (B, N_L, h_E) to ψ of
/// the same shape.
pub trait TextTransformer {
    fn tag(&self) -> &str;
    fn width(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn forward(&self, x_c: &Tensor) -> Result<Tensor>;
    /// Parameters, when the encoder has any.
    fn params(&self) -> Option<&ParamStore> {
        None
    }
}

/// ψ = x_c.
#[derive(Debug, Clone)]
pub struct IdentityTextEncoder {
    pub width: usize,
    pub seq_len: usize,
}

impl TextTransformer for IdentityTextEncoder {
    fn tag(&self) -> &str {
        "identity"
    }

    fn width(&self) -> usize {
        self.width
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn forward(&self, x_c: &Tensor) -> Result<Tensor> {
        Ok(x_c.clone())
    }
}

/// Desk-scale stand-in for the CLIP text tower: learned positions, causal
/// transformer blocks and a final norm, all drawn from a fixed seed and
/// permanently frozen. Positions stay native: an inserted pseudo row sits at
/// whatever index it lands on.
pub struct ToyTextEncoder {
    store: ParamStore,
    positions: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    causal: Tensor,
    width: usize,
    seq_len: usize,
}

impl ToyTextEncoder {
    pub fn new(width: usize, seq_len: usize, heads: usize, depth: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let store = ParamStore::new(seed, dtype, device);
        let b = store.builder(false);
        let positions = b.get("positions", &[1, seq_len, width], Init::Normal(0.1))?;
        let blocks = (0..depth)
            .map(|i| TransformerBlock::new(&b.pp(&format!("blocks.{i}")), width, heads, 4 * width))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&b.pp("norm"), width)?;
        let causal = causal_bias(seq_len, dtype, device)?;
        drop(b);
        Ok(Self {
            store,
            positions,
            blocks,
            norm,
            causal,
            width,
            seq_len,
        })
    }

}

impl TextTransformer for ToyTextEncoder {
    fn tag(&self) -> &str {
        "toy-text-transformer-v1"
    }

    fn width(&self) -> usize {
        self.width
    }

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn forward(&self, x_c: &Tensor) -> Result<Tensor> {
        let mut h = x_c.broadcast_add(&self.positions)?;
        for block in &self.blocks {
            h = block.forward(&h, Some(&self.causal))?;
        }
        self.norm.forward(&h)
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }
}

/// ψ = T_E(x_c) for a batch (B, N_L, h_E) or a single sequence (N_L, h_E).
pub fn encode_conditioning<T: TextTransformer + ?Sized>(x_c: &Tensor, encoder: &T) -> Result<Tensor> {
    let single = x_c.rank() == 2;
    let batched = if single { x_c.unsqueeze(0)? } else { x_c.clone() };
    let (_, len, width) = batched.dims3()?;
    if len != encoder.seq_len() || width != encoder.width() {
        return Err(Error::Shape(format!(
            "text encoder `{}` expects ({}, {}), got ({len}, {width})",
            encoder.tag(),
            encoder.seq_len(),
            encoder.width()
        )));
    }
    let psi = encoder.forward(&batched)?;
    Ok(if single { psi.squeeze(0)? } else { psi })
}

impl ConditioningSequence {
    pub fn encode<T: TextTransformer + ?Sized>(&self, encoder: &T) -> Result<Tensor> {
        encode_conditioning(&self.x_c, encoder)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn identity_encoder_is_identity() {
        let x = Tensor::randn(0f32, 1.0, (32, 64), &Device::Cpu).unwrap();
        let enc = IdentityTextEncoder { width: 64, seq_len: 32 };
        let psi = encode_conditioning(&x, &enc).unwrap();
        let a: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = psi.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pseudo_rows_change_output_and_gradients_skip_encoder() {
        let enc = ToyTextEncoder::new(16, 8, 2, 1, 4, DType::F64, &Device::Cpu).unwrap();
        let base = Tensor::randn(0f64, 1.0, (8, 16), &Device::Cpu).unwrap();
        let pseudo = Var::randn(0f64, 1.0, (2, 16), &Device::Cpu).unwrap();
        let x = Tensor::cat(&[&base.narrow(0, 0, 3).unwrap(), pseudo.as_tensor(), &base.narrow(0, 5, 3).unwrap()], 0).unwrap();
        let psi_a = encode_conditioning(&x, &enc).unwrap();
        let psi_b = encode_conditioning(&base, &enc).unwrap();
        let diff = (&psi_a - &psi_b).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff > 1e-3);
        // rows before the pseudo positions are untouched (causal)
        let early = (psi_a.narrow(0, 0, 3).unwrap() - psi_b.narrow(0, 0, 3).unwrap()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(early, 0.0);

        let grads = psi_a.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(pseudo.as_tensor()).is_some());
        for (_, v) in enc.params().unwrap().vars() {
            assert!(grads.get(v.as_tensor()).is_none());
        }
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let enc = IdentityTextEncoder { width: 4, seq_len: 3 };
        let x = Tensor::zeros((5, 4), DType::F32, &Device::Cpu).unwrap();
        assert!(encode_conditioning(&x, &enc).is_err());
    }
}
