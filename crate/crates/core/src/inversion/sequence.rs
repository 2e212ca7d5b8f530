use candle_core::{DType, Device, Tensor};

use super::adapter::PseudoTokenBlock;
use super::tokens::TokenEmbedder;
use crate::error::{Error, Result};
use crate::profile::{Dims, FIXED_PROMPT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    /// Begin marker and the fixed prompt.
    Prompt,
    /// Caption tokens and the end marker.
    Caption,
    Pseudo,
    Pad,
}

/// Geometry of the conditioning sequence x_c.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub seq_len: usize,
    pub tokens_per_garment: usize,
    pub prompt: String,
}

impl SequenceLayout {
    pub fn from_dims(dims: &Dims) -> Self {
        Self {
            seq_len: dims.seq_len,
            tokens_per_garment: dims.tokens_per_garment,
            prompt: FIXED_PROMPT.to_string(),
        }
    }
}

/// x_c with a role label per position.
#[derive(Debug, Clone)]
pub struct ConditioningSequence {
    /// (N_L, h_E).
    pub x_c: Tensor,
    pub roles: Vec<TokenRole>,
    /// Caption word tokens kept after truncation (N_q, excluding markers).
    pub caption_tokens: usize,
    /// Caption word tokens dropped by truncation.
    pub truncated_tokens: usize,
    pub garments: usize,
}

impl ConditioningSequence {
    pub fn count(&self, role: TokenRole) -> usize {
        self.roles.iter().filter(|r| **r == role).count()
    }

    /// 1 for attendable positions, 0 for padding: (N_L,).
    pub fn key_mask(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let m: Vec<f32> = self
            .roles
            .iter()
            .map(|r| if *r == TokenRole::Pad { 0.0 } else { 1.0 })
            .collect();
        Ok(Tensor::from_vec(m, self.roles.len(), device)?.to_dtype(dtype)?)
    }
}

fn prompt_ids<E: TokenEmbedder + ?Sized>(embedder: &E, layout: &SequenceLayout) -> Vec<u32> {
    let mut ids = vec![embedder.bos()];
    ids.extend(embedder.tokenize(&layout.prompt));
    ids
}

/// Builds the text rows (prompt, caption, end marker) with the caption cut to
/// `budget` rows including the end marker.
fn text_rows<E: TokenEmbedder + ?Sized>(
    caption: &str,
    embedder: &E,
    prompt: &[u32],
    budget: usize,
    dtype: DType,
    device: &Device,
) -> Result<(Tensor, Vec<TokenRole>, usize, usize)> {
    let words = embedder.tokenize(caption);
    let keep = words.len().min(budget.saturating_sub(1));
    let mut ids = prompt.to_vec();
    ids.extend_from_slice(&words[..keep]);
    ids.push(embedder.eos());
    let mut roles = vec![TokenRole::Prompt; prompt.len()];
    roles.extend(std::iter::repeat_n(TokenRole::Caption, keep + 1));
    Ok((embedder.embed(&ids, dtype, device)?, roles, keep, words.len() - keep))
}

/// Lays out `[prompt; caption; v*_1 … v*_{N_r}; 0…]` to length N_L.
///
/// The caption tail is truncated when the budget is short; pseudo-token
/// blocks are never dropped. Blocks are taken in the given (retrieval rank)
/// order and inserted without passing through the embedding lookup.
pub fn assemble_conditioning_sequence<E: TokenEmbedder + ?Sized>(
    caption: &str,
    blocks: &[PseudoTokenBlock],
    embedder: &E,
    layout: &SequenceLayout,
) -> Result<ConditioningSequence> {
    let prompt = prompt_ids(embedder, layout);
    let pseudo = blocks.len() * layout.tokens_per_garment;
    // The end marker needs a slot as well.
    if prompt.len() + pseudo + 1 > layout.seq_len {
        return Err(Error::config(
            "sequence",
            format!(
                "prompt ({}) + {} garments x {} pseudo-tokens + end marker exceed N_L = {}",
                prompt.len(),
                blocks.len(),
                layout.tokens_per_garment,
                layout.seq_len
            ),
        ));
    }
    let (dtype, device) = match blocks.first() {
        Some(b) => (b.vectors.dtype(), b.vectors.device().clone()),
        None => (DType::F32, Device::Cpu),
    };
    let budget = layout.seq_len - prompt.len() - pseudo;
    let (text, mut roles, kept, dropped) = text_rows(caption, embedder, &prompt, budget, dtype, &device)?;

    let mut parts = vec![text];
    for (i, block) in blocks.iter().enumerate() {
        let dims = block.vectors.dims();
        if dims != [layout.tokens_per_garment, embedder.width()] {
            return Err(Error::Shape(format!(
                "pseudo-token block {i} is {dims:?}, expected [{}, {}]",
                layout.tokens_per_garment,
                embedder.width()
            )));
        }
        parts.push(block.vectors.clone());
    }
    roles.extend(std::iter::repeat_n(TokenRole::Pseudo, pseudo));
    let pad = layout.seq_len - roles.len();
    if pad > 0 {
        parts.push(Tensor::zeros((pad, embedder.width()), dtype, &device)?);
    }
    roles.extend(std::iter::repeat_n(TokenRole::Pad, pad));
    Ok(ConditioningSequence {
        x_c: Tensor::cat(&parts, 0)?,
        roles,
        caption_tokens: kept,
        truncated_tokens: dropped,
        garments: blocks.len(),
    })
}

/// The retrieval-free sequence `[prompt; caption; 0…]`.
pub fn text_only_sequence<E: TokenEmbedder + ?Sized>(
    caption: &str,
    embedder: &E,
    layout: &SequenceLayout,
    dtype: DType,
    device: &Device,
) -> Result<ConditioningSequence> {
    let prompt = prompt_ids(embedder, layout);
    if prompt.len() + 1 > layout.seq_len {
        return Err(Error::config("sequence", "prompt does not fit in N_L"));
    }
    let budget = layout.seq_len - prompt.len();
    let (text, mut roles, kept, dropped) = text_rows(caption, embedder, &prompt, budget, dtype, device)?;
    let pad = layout.seq_len - roles.len();
    roles.extend(std::iter::repeat_n(TokenRole::Pad, pad));
    let x_c = if pad > 0 {
        Tensor::cat(&[text, Tensor::zeros((pad, embedder.width()), dtype, device)?], 0)?
    } else {
        text
    };
    Ok(ConditioningSequence {
        x_c,
        roles,
        caption_tokens: kept,
        truncated_tokens: dropped,
        garments: 0,
    })
}

/// Unconditional sequence used for guidance: begin and end markers only.
pub fn empty_sequence<E: TokenEmbedder + ?Sized>(
    embedder: &E,
    layout: &SequenceLayout,
    dtype: DType,
    device: &Device,
) -> Result<ConditioningSequence> {
    let ids = [embedder.bos(), embedder.eos()];
    let pad = layout.seq_len - ids.len();
    let x_c = Tensor::cat(
        &[
            embedder.embed(&ids, dtype, device)?,
            Tensor::zeros((pad, embedder.width()), dtype, device)?,
        ],
        0,
    )?;
    let mut roles = vec![TokenRole::Prompt, TokenRole::Caption];
    roles.extend(std::iter::repeat_n(TokenRole::Pad, pad));
    Ok(ConditioningSequence {
        x_c,
        roles,
        caption_tokens: 0,
        truncated_tokens: 0,
        garments: 0,
    })
}

/// Stacks sequences into (B, N_L, h_E) embeddings and a (B, N_L) key mask.
pub fn stack_sequences(seqs: &[ConditioningSequence]) -> Result<(Tensor, Tensor)> {
    let first = seqs
        .first()
        .ok_or_else(|| Error::Shape("cannot stack zero sequences".into()))?;
    let (dtype, device) = (first.x_c.dtype(), first.x_c.device().clone());
    let xs: Vec<&Tensor> = seqs.iter().map(|s| &s.x_c).collect();
    let masks = seqs
        .iter()
        .map(|s| s.key_mask(dtype, &device))
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&xs, 0)?, Tensor::stack(&masks, 0)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::HashTokenEmbedder;
    use crate::profile::Profile;

    fn block(n_v: usize, width: usize, fill: f64) -> PseudoTokenBlock {
        PseudoTokenBlock {
            vectors: Tensor::full(fill, (n_v, width), &Device::Cpu).unwrap(),
        }
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn full_scale_budget_arithmetic() {
        let dims = Profile::Full.dims();
        let layout = SequenceLayout::from_dims(&dims);
        let emb = HashTokenEmbedder::new(dims.embed_width, 0);
        let blocks: Vec<_> = (0..3).map(|i| block(16, 1024, i as f64)).collect();
        let long = vec!["word"; 60].join(" ");
        let seq = assemble_conditioning_sequence(&long, &blocks, &emb, &layout).unwrap();
        let prompt_len = 1 + emb.tokenize(FIXED_PROMPT).len();
        assert_eq!(prompt_len, 8);
        assert_eq!(seq.count(TokenRole::Pseudo), 48);
        assert_eq!(seq.count(TokenRole::Prompt), prompt_len);
        // caption budget (incl. end marker) = 77 - 48 - prompt
        assert_eq!(seq.count(TokenRole::Caption), 77 - 48 - prompt_len);
        assert_eq!(seq.caption_tokens + seq.truncated_tokens, 60);
        assert_eq!(seq.count(TokenRole::Pad), 0);
        assert_eq!(seq.x_c.dims(), &[77, 1024]);
    }

    #[test]
    fn no_retrieval_gives_text_then_padding() {
        let dims = Profile::Desk.dims();
        let layout = SequenceLayout::from_dims(&dims);
        let emb = HashTokenEmbedder::new(dims.embed_width, 0);
        let seq = assemble_conditioning_sequence("red dress", &[], &emb, &layout).unwrap();
        assert_eq!(seq.count(TokenRole::Pseudo), 0);
        assert_eq!(seq.caption_tokens, 2);
        let r = rows(&seq.x_c);
        let text_len = seq.count(TokenRole::Prompt) + seq.count(TokenRole::Caption);
        assert!(r[text_len..].iter().all(|row| row.iter().all(|v| *v == 0.0)));
        assert!(r[..text_len].iter().all(|row| row.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn layout_order_and_rank_equivariance() {
        let dims = Profile::Desk.dims();
        let layout = SequenceLayout::from_dims(&dims);
        let emb = HashTokenEmbedder::new(dims.embed_width, 0);
        let a = block(4, 64, 1.0);
        let b = block(4, 64, 2.0);
        let ab = assemble_conditioning_sequence("blue top", &[a.clone(), b.clone()], &emb, &layout).unwrap();
        let ba = assemble_conditioning_sequence("blue top", &[b, a], &emb, &layout).unwrap();
        let order: Vec<TokenRole> = {
            let mut o = ab.roles.clone();
            o.dedup();
            o
        };
        assert_eq!(order, vec![TokenRole::Prompt, TokenRole::Caption, TokenRole::Pseudo, TokenRole::Pad]);
        let (ra, rb) = (rows(&ab.x_c), rows(&ba.x_c));
        let start = ab.roles.iter().position(|r| *r == TokenRole::Pseudo).unwrap();
        for i in 0..32 {
            let j = if (start..start + 4).contains(&i) {
                i + 4
            } else if (start + 4..start + 8).contains(&i) {
                i - 4
            } else {
                i
            };
            assert_eq!(ra[i], rb[j], "position {i}");
        }
    }

    #[test]
    fn impossible_layout_is_fatal() {
        let layout = SequenceLayout {
            seq_len: 16,
            tokens_per_garment: 4,
            prompt: FIXED_PROMPT.into(),
        };
        let emb = HashTokenEmbedder::new(8, 0);
        let blocks: Vec<_> = (0..2).map(|_| block(4, 8, 0.5)).collect();
        assert!(matches!(
            assemble_conditioning_sequence("x", &blocks, &emb, &layout),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn empty_caption_keeps_markers() {
        let dims = Profile::Desk.dims();
        let layout = SequenceLayout::from_dims(&dims);
        let emb = HashTokenEmbedder::new(dims.embed_width, 0);
        let seq = assemble_conditioning_sequence("", &[], &emb, &layout).unwrap();
        assert_eq!(seq.count(TokenRole::Caption), 1);
        let empty = empty_sequence(&emb, &layout, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(empty.count(TokenRole::Pad), 30);
    }
}
