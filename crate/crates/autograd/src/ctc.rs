//! Connectionist temporal classification: log-space forward-backward.

use ndarray::{Array2, ArrayView2};

use crate::Mat;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CtcError {
    #[error("ctc: target of length {target_len} needs at least {required} frames, got {frames}")]
    Infeasible {
        target_len: usize,
        required: usize,
        frames: usize,
    },
    #[error("ctc: label {label} outside vocabulary of size {vocab}")]
    LabelOutOfRange { label: usize, vocab: usize },
    #[error("ctc: label {0} collides with the blank id")]
    LabelIsBlank(usize),
    #[error("ctc: empty log-probability sequence")]
    NoFrames,
}

#[inline]
fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `targets` under per-frame log-probabilities
/// `log_probs` (`[frames × vocab]`), together with its gradient with respect
/// to `log_probs`.
///
/// Rows of `log_probs` are expected to be normalized log-distributions; the
/// gradient is taken with respect to the log-probabilities themselves, so it
/// composes with an upstream log-softmax.
pub fn ctc_forward_backward(
    log_probs: ArrayView2<'_, f64>,
    targets: &[usize],
    blank: usize,
) -> Result<(f64, Mat), CtcError> {
    let (frames, vocab) = log_probs.dim();
    if frames == 0 {
        return Err(CtcError::NoFrames);
    }
    for &label in targets {
        if label >= vocab {
            return Err(CtcError::LabelOutOfRange { label, vocab });
        }
        if label == blank {
            return Err(CtcError::LabelIsBlank(label));
        }
    }
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    let required = targets.len() + repeats;
    if required > frames {
        return Err(CtcError::Infeasible {
            target_len: targets.len(),
            required,
            frames,
        });
    }

    // Extended label sequence: blank, l1, blank, l2, ..., blank.
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(blank);
    for &label in targets {
        ext.push(label);
        ext.push(blank);
    }
    let s_len = ext.len();
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let neg_inf = f64::NEG_INFINITY;
    let mut alpha = Array2::from_elem((frames, s_len), neg_inf);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if can_skip(s) {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = if acc == neg_inf {
                neg_inf
            } else {
                acc + log_probs[[t, ext[s]]]
            };
        }
    }

    let mut beta = Array2::from_elem((frames, s_len), neg_inf);
    let last = frames - 1;
    beta[[last, s_len - 1]] = log_probs[[last, ext[s_len - 1]]];
    if s_len > 1 {
        beta[[last, s_len - 2]] = log_probs[[last, ext[s_len - 2]]];
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, beta[[t + 1, s + 2]]);
            }
            beta[[t, s]] = if acc == neg_inf {
                neg_inf
            } else {
                acc + log_probs[[t, ext[s]]]
            };
        }
    }

    let mut log_lik = alpha[[last, s_len - 1]];
    if s_len > 1 {
        log_lik = log_add(log_lik, alpha[[last, s_len - 2]]);
    }

    // d(-log p)/d lp[t, k] = -sum_{s: ext[s]=k} exp(alpha + beta - lp[t,k] - log p)
    let mut grad = Array2::zeros((frames, vocab));
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[[t, s]] + beta[[t, s]];
            if ab == neg_inf {
                continue;
            }
            let k = ext[s];
            grad[[t, k]] -= (ab - log_probs[[t, k]] - log_lik).exp();
        }
    }
    Ok((-log_lik, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_frame_uniform() {
        let lp = array![[0.5f64.ln(), 0.5f64.ln()]];
        let (loss, _) = ctc_forward_backward(lp.view(), &[1], 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn infeasible_repeat() {
        let lp = Array2::from_elem((2, 3), (1.0f64 / 3.0).ln());
        let err = ctc_forward_backward(lp.view(), &[1, 1], 0).unwrap_err();
        assert!(matches!(err, CtcError::Infeasible { required: 3, .. }));
    }

    #[test]
    fn blank_label_rejected() {
        let lp = Array2::from_elem((2, 3), (1.0f64 / 3.0).ln());
        assert_eq!(
            ctc_forward_backward(lp.view(), &[0], 0).unwrap_err(),
            CtcError::LabelIsBlank(0)
        );
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let lp = array![[0.25f64.ln(), 0.75f64.ln()], [0.5f64.ln(), 0.5f64.ln()]];
        let (loss, _) = ctc_forward_backward(lp.view(), &[], 0).unwrap();
        assert!((loss + (0.25f64 * 0.5).ln()).abs() < 1e-12);
    }
}
