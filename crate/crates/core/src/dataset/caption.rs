use crate::error::{Error, Result};

/// Number of noun phrases N_c used to form a caption.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptionSpec {
    n_c: usize,
}

impl CaptionSpec {
    pub const MAX: usize = 3;

    pub fn new(n_c: usize) -> Result<Self> {
        if !(1..=Self::MAX).contains(&n_c) {
            return Err(Error::config("n_c", format!("{n_c} is outside 1..={}", Self::MAX)));
        }
        Ok(Self { n_c })
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }
}

impl Default for CaptionSpec {
    fn default() -> Self {
        Self { n_c: Self::MAX }
    }
}

/// Joins the first N_c phrases with ", " in stored order.
pub fn build_caption<S: AsRef<str>>(phrases: &[S], spec: CaptionSpec) -> Result<String> {
    if spec.n_c > phrases.len() {
        return Err(Error::Data(format!(
            "caption needs {} noun phrases, sample has {}",
            spec.n_c,
            phrases.len()
        )));
    }
    Ok(phrases[..spec.n_c]
        .iter()
        .map(|p| p.as_ref().trim())
        .collect::<Vec<_>>()
        .join(", "))
}
