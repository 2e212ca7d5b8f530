use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Tokenizer plus frozen embedding lookup of a text encoder.
pub trait TokenEmbedder {
    fn width(&self) -> usize;
    fn bos(&self) -> u32;
    fn eos(&self) -> u32;
    fn tokenize(&self, text: &str) -> Vec<u32>;
    /// (ids.len(), width) embedding rows.
    fn embed(&self, ids: &[u32], dtype: DType, device: &Device) -> Result<Tensor>;
}

/// Desk-scale tokenizer: lower-cased alphanumeric words and commas, each
/// hashed (FNV-1a) to an id whose embedding row is drawn from a generator
/// seeded by the id. No vocabulary file is needed and rows never change.
#[derive(Debug, Clone)]
pub struct HashTokenEmbedder {
    width: usize,
    seed: u64,
    scale: f64,
}

impl HashTokenEmbedder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self { width, seed, scale: 1.0 }
    }

    fn fnv1a(word: &str) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for b in word.bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
        h & 0x7fff_ffff
    }

    fn row(&self, id: u32) -> impl Iterator<Item = f64> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        (0..self.width).map(move |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * self.scale
        })
    }
}

impl TokenEmbedder for HashTokenEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn bos(&self) -> u32 {
        0xffff_fffe
    }

    fn eos(&self) -> u32 {
        0xffff_ffff
    }

    fn tokenize(&self, text: &str) -> Vec<u32> {
        let lower = text.to_lowercase();
        let mut ids = Vec::new();
        let mut word = String::new();
        for ch in lower.chars() {
            if ch.is_alphanumeric() {
                word.push(ch);
                continue;
            }
            if !word.is_empty() {
                ids.push(Self::fnv1a(&word));
                word.clear();
            }
            if ch == ',' {
                ids.push(Self::fnv1a(","));
            }
        }
        if !word.is_empty() {
            ids.push(Self::fnv1a(&word));
        }
        ids
    }

    fn embed(&self, ids: &[u32], dtype: DType, device: &Device) -> Result<Tensor> {
        let data: Vec<f64> = ids.iter().flat_map(|&id| self.row(id)).collect();
        Ok(Tensor::from_vec(data, (ids.len(), self.width), device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizes_words_and_commas() {
        let t = HashTokenEmbedder::new(4, 0);
        let ids = t.tokenize("Red top, striped-pattern");
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], t.tokenize("red")[0]);
        assert_eq!(ids[2], t.tokenize(",")[0]);
        assert!(t.tokenize("").is_empty());
    }

    #[test]
    fn embedding_rows_are_stable() {
        let t = HashTokenEmbedder::new(6, 3);
        let a: Vec<f64> = t.embed(&[1, 2, 1], DType::F64, &Device::Cpu).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a[..6], a[12..]);
        assert_ne!(a[..6], a[6..12]);
    }
}
