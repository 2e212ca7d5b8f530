use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Condition keys in chain order.
pub const GUIDANCE_ORDER: [&str; 2] = ["text_retrieval", "pose"];

/// Multi-condition classifier-free guidance over the nested chain
/// ∅ ⊂ {text+retrieval} ⊂ {text+retrieval, pose}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    /// s₁, applied to (ε(text+retrieval) − ε(∅)).
    pub text_scale: f64,
    /// s₂, applied to (ε(all) − ε(text+retrieval)).
    pub pose_scale: f64,
    pub steps: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            text_scale: 7.5,
            pose_scale: 1.5,
            steps: 50,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, s) in [("guidance.text", self.text_scale), ("guidance.pose", self.pose_scale)] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::config(key, format!("scale must be finite and >= 0, got {s}")));
            }
        }
        if self.steps == 0 {
            return Err(Error::config("guidance.steps", "need at least one step"));
        }
        Ok(())
    }

    /// Weights of (ε(∅), ε(c₁), ε(c₁,c₂)) in the combined prediction.
    pub fn weights(&self) -> [f64; 3] {
        [
            1.0 - self.text_scale,
            self.text_scale - self.pose_scale,
            self.pose_scale,
        ]
    }
}

/// Noise predictions along the condition chain.
#[derive(Debug, Clone)]
pub struct ChainPredictions {
    pub unconditional: Option<Tensor>,
    pub text_retrieval: Option<Tensor>,
    pub full: Option<Tensor>,
}

/// ε̂ = ε(∅) + s₁(ε(c₁) − ε(∅)) + s₂(ε(c₁,c₂) − ε(c₁)), evaluated in the
/// equivalent weighted form (1 − s₁)ε(∅) + (s₁ − s₂)ε(c₁) + s₂ε(c₁,c₂). With
/// both scales 1 the first two weights are exactly zero and the result is
/// exactly ε(c₁,c₂); with both scales 0 it is exactly ε(∅).
pub fn guided_prediction(preds: &ChainPredictions, config: &GuidanceConfig) -> Result<Tensor> {
    let missing = |name: &str| Error::config("guidance", format!("missing prediction for condition subset {name}"));
    let e0 = preds.unconditional.as_ref().ok_or_else(|| missing("∅"))?;
    let e1 = preds.text_retrieval.as_ref().ok_or_else(|| missing("{text_retrieval}"))?;
    let e2 = preds.full.as_ref().ok_or_else(|| missing("{text_retrieval, pose}"))?;
    let [w0, w1, w2] = config.weights();
    Ok(((e0 * w0)? + (e1 * w1)?)?.add(&(e2 * w2)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn preds() -> ChainPredictions {
        let r = |s: f64| Some(Tensor::randn(s as f32, 1.0f32, (2, 4, 3, 3), &Device::Cpu).unwrap());
        ChainPredictions {
            unconditional: r(0.0),
            text_retrieval: r(1.0),
            full: r(2.0),
        }
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn telescoping_is_exact() {
        let p = preds();
        let ones = GuidanceConfig { text_scale: 1.0, pose_scale: 1.0, steps: 1 };
        assert_eq!(vals(&guided_prediction(&p, &ones).unwrap()), vals(p.full.as_ref().unwrap()));
        let zeros = GuidanceConfig { text_scale: 0.0, pose_scale: 0.0, steps: 1 };
        assert_eq!(vals(&guided_prediction(&p, &zeros).unwrap()), vals(p.unconditional.as_ref().unwrap()));
    }

    #[test]
    fn matches_hand_computed_combination() {
        let p = preds();
        let cfg = GuidanceConfig { text_scale: 7.5, pose_scale: 1.5, steps: 1 };
        let got = vals(&guided_prediction(&p, &cfg).unwrap());
        let (a, b, c) = (
            vals(p.unconditional.as_ref().unwrap()),
            vals(p.text_retrieval.as_ref().unwrap()),
            vals(p.full.as_ref().unwrap()),
        );
        for i in 0..got.len() {
            let (a, b, c) = (a[i] as f64, b[i] as f64, c[i] as f64);
            let want = a + 7.5 * (b - a) + 1.5 * (c - b);
            assert!((got[i] as f64 - want).abs() <= 1e-6 * want.abs().max(1.0), "{i}");
        }
    }

    #[test]
    fn missing_subset_is_fatal() {
        let mut p = preds();
        p.text_retrieval = None;
        assert!(guided_prediction(&p, &GuidanceConfig::default()).is_err());
        assert!(GuidanceConfig { text_scale: -1.0, ..Default::default() }.validate().is_err());
    }
}
