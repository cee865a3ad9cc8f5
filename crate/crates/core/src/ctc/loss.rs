use ndarray::Array2;

use super::{log_add, CtcError, LogPosteriors, TokenSeq};

/// Result of a CTC forward-backward pass.
///
/// `grad` is the derivative of `loss` with respect to every log-posterior
/// entry, i.e. the negated state-occupancy posterior of each symbol. For an
/// infeasible target `loss` is `+inf`, `grad` is all-zero and `error` says
/// why.
#[derive(Debug, Clone)]
pub struct CtcLoss {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub error: Option<CtcError>,
}

impl CtcLoss {
    pub fn is_feasible(&self) -> bool {
        self.error.is_none()
    }

    fn infeasible(frames: usize, cols: usize, error: CtcError) -> Self {
        Self {
            loss: f64::INFINITY,
            grad: Array2::zeros((frames, cols)),
            error: Some(error),
        }
    }
}

/// Minimum number of frames any alignment of `target` needs.
pub fn required_frames(target: &TokenSeq) -> usize {
    target.len() + target.adjacent_repeats()
}

/// Negative log-likelihood of `target` under `lp`, summed over all
/// alignments, together with its gradient.
pub fn ctc_loss(lp: &LogPosteriors, target: &TokenSeq) -> CtcLoss {
    let frames = lp.frames();
    let cols = lp.num_tokens() + 1;
    if let Err(e) = target.check_vocab(lp.num_tokens()) {
        return CtcLoss::infeasible(frames, cols, e);
    }
    let required = required_frames(target);
    if frames < required {
        return CtcLoss::infeasible(
            frames,
            cols,
            CtcError::InfeasibleAlignment { frames, required },
        );
    }

    let blank = lp.blank();
    let values = lp.values();
    // blank-interleaved target: b y1 b y2 ... yL b
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.tokens().iter().flat_map(|&tok| [tok, blank]))
        .collect();
    let states = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, states), neg_inf);
    alpha[[0, 0]] = values[[0, ext[0]]];
    if states > 1 {
        alpha[[0, 1]] = values[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            if acc != neg_inf {
                alpha[[t, s]] = acc + values[[t, ext[s]]];
            }
        }
    }

    let mut beta = Array2::from_elem((frames, states), neg_inf);
    beta[[frames - 1, states - 1]] = values[[frames - 1, ext[states - 1]]];
    if states > 1 {
        beta[[frames - 1, states - 2]] = values[[frames - 1, ext[states - 2]]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < states {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            if acc != neg_inf {
                beta[[t, s]] = acc + values[[t, ext[s]]];
            }
        }
    }

    let mut log_likelihood = alpha[[frames - 1, states - 1]];
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha[[frames - 1, states - 2]]);
    }
    if log_likelihood == neg_inf {
        return CtcLoss::infeasible(
            frames,
            cols,
            CtcError::InfeasibleAlignment { frames, required },
        );
    }

    // alpha and beta both include the emission at t, so it is subtracted once.
    let mut grad = Array2::zeros((frames, cols));
    for t in 0..frames {
        for s in 0..states {
            let joint = alpha[[t, s]] + beta[[t, s]];
            if joint == neg_inf {
                continue;
            }
            let sym = ext[s];
            grad[[t, sym]] -= (joint - values[[t, sym]] - log_likelihood).exp();
        }
    }

    CtcLoss {
        loss: -log_likelihood,
        grad,
        error: None,
    }
}
