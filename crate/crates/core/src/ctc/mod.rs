//! Connectionist Temporal Classification: loss, greedy and prefix beam
//! decoding, and a character n-gram language model for shallow fusion.
//!
//! The blank symbol always occupies the last column of a [`LogPosteriors`]
//! matrix, so a model over `V` tokens emits `V + 1` columns and tokens keep
//! their indices when the vocabulary grows.

mod decode;
mod lm;
mod loss;

pub use decode::{
    beam_search_decode, beam_search_hypothesis, collapse_path, greedy_decode, greedy_path,
    DecoderConfig, Hypothesis,
};
pub use lm::{train_ngram_lm, CharNGramLM, LmSymbol};
pub use loss::{ctc_loss, required_frames, CtcLoss};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on the per-row log-sum-exp accepted by [`LogPosteriors::new`].
pub const ROW_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CtcError {
    #[error("invalid log-posteriors: {0}")]
    InvalidPosteriors(String),
    #[error("token {token} is outside the vocabulary of {vocab} tokens")]
    InvalidToken { token: usize, vocab: usize },
    #[error("infeasible-alignment: {frames} frames cannot emit a target needing {required}")]
    InfeasibleAlignment { frames: usize, required: usize },
    #[error("invalid decoder config: {0}")]
    InvalidConfig(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("malformed language model file: {0}")]
    LmFormat(String),
}

/// Numerically stable `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.into_iter().collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let lse = log_sum_exp(row.iter().copied());
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Per-frame log-probabilities over `V` tokens plus the trailing blank.
#[derive(Debug, Clone, PartialEq)]
pub struct LogPosteriors {
    values: Array2<f64>,
}

impl LogPosteriors {
    /// Validates shape and normalization of a `T x (V + 1)` matrix.
    pub fn new(values: Array2<f64>) -> Result<Self, CtcError> {
        let (frames, cols) = values.dim();
        if frames == 0 {
            return Err(CtcError::InvalidPosteriors("no frames".into()));
        }
        if cols < 2 {
            return Err(CtcError::InvalidPosteriors(
                "need at least one token besides blank".into(),
            ));
        }
        for (t, row) in values.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| v.is_nan() || *v > 0.0) {
                return Err(CtcError::InvalidPosteriors(format!(
                    "frame {t} has an entry that is NaN or positive"
                )));
            }
            let lse = log_sum_exp(row.iter().copied());
            if (lse.abs()).is_nan() || lse.abs() > ROW_NORM_TOLERANCE {
                return Err(CtcError::InvalidPosteriors(format!(
                    "frame {t} log-sum-exps to {lse}"
                )));
            }
        }
        Ok(Self { values })
    }

    pub fn from_logits(logits: ArrayView2<f64>) -> Result<Self, CtcError> {
        Self::new(log_softmax_rows(logits))
    }

    /// Wraps a matrix the caller has already normalized (e.g. a model's
    /// log-softmax output).
    pub(crate) fn from_normalized(values: Array2<f64>) -> Self {
        debug_assert!(values.nrows() >= 1 && values.ncols() >= 2);
        Self { values }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    /// Number of non-blank tokens `V`.
    pub fn num_tokens(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn blank(&self) -> usize {
        self.values.ncols() - 1
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn row(&self, t: usize) -> ArrayView1<'_, f64> {
        self.values.row(t)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// A label sequence without blanks. May be empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(Vec<usize>);

impl TokenSeq {
    pub fn new(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of positions where a token repeats its predecessor; each one
    /// costs an extra blank frame in any alignment.
    pub fn adjacent_repeats(&self) -> usize {
        self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    pub fn check_vocab(&self, num_tokens: usize) -> Result<(), CtcError> {
        match self.0.iter().find(|&&tok| tok >= num_tokens) {
            Some(&token) => Err(CtcError::InvalidToken {
                token,
                vocab: num_tokens,
            }),
            None => Ok(()),
        }
    }

    pub fn into_vec(self) -> Vec<usize> {
        self.0
    }
}

impl From<Vec<usize>> for TokenSeq {
    fn from(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }
}

impl From<&[usize]> for TokenSeq {
    fn from(tokens: &[usize]) -> Self {
        Self(tokens.to_vec())
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::Rng;

    pub fn random_log_posteriors(rng: &mut impl Rng, frames: usize, tokens: usize) -> LogPosteriors {
        let logits = Array2::from_shape_fn((frames, tokens + 1), |_| rng.random_range(-3.0..3.0));
        LogPosteriors::from_logits(logits.view()).unwrap()
    }

    /// Enumerates every frame labeling in `(V+1)^T`, so only usable on tiny
    /// instances.
    pub fn for_each_path(frames: usize, cols: usize, mut f: impl FnMut(&[usize])) {
        let mut path = vec![0usize; frames];
        loop {
            f(&path);
            let mut i = 0;
            loop {
                if i == frames {
                    return;
                }
                path[i] += 1;
                if path[i] < cols {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }
}
