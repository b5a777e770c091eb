//! Cosine-classifier logits and the reweighted two-branch training loss.

use crate::error::Result;
use crate::tensor::{NodeId, Scalar, Tape};

/// Loss reweighting by mask share:
/// `w_r(k) = 2 * k^(1/r) / (k^(1/r) + (1-k)^(1/r))`,
/// extended by continuity to `w_r(0) = 0` and `w_r(1) = 2`.
pub fn weight_fn(kappa: f64, r: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&kappa) && r > 0.0);
    if kappa <= 0.0 {
        return 0.0;
    }
    if kappa >= 1.0 {
        return 2.0;
    }
    let a = kappa.powf(1.0 / r);
    let b = (1.0 - kappa).powf(1.0 / r);
    2.0 * a / (a + b)
}

/// Scaled cosine similarity between feature rows and classifier rows:
/// `logit[c] = scale * <f/|f|, w_c/|w_c|>`.
pub fn cosine_logits<T: Scalar>(
    tape: &mut Tape<T>,
    features: NodeId,
    head: NodeId,
    scale: f64,
) -> Result<NodeId> {
    let f = tape.l2_normalize(features)?;
    let w = tape.l2_normalize(head)?;
    let cos = tape.matmul(f, w, true)?;
    tape.scale(cos, scale)
}

/// Two cross-entropy terms weighted by each branch's mask share:
/// `w_r(kappa) * CE(y1, logits1) + w_r(1-kappa) * CE(y2, logits2)`.
pub fn ensemble_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits1: NodeId,
    logits2: NodeId,
    y1: &[usize],
    y2: &[usize],
    kappa_eff: f64,
    r: f64,
) -> Result<NodeId> {
    let ce1 = tape.softmax_cross_entropy(logits1, y1)?;
    let ce2 = tape.softmax_cross_entropy(logits2, y2)?;
    let t1 = tape.scale(ce1, weight_fn(kappa_eff, r))?;
    let t2 = tape.scale(ce2, weight_fn(1.0 - kappa_eff, r))?;
    tape.add(t1, t2)
}
