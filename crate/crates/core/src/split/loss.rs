//! Splitting loss over the shared softmax and its analytic gradient with
//! respect to the two trainable kernels.

use serde::{Deserialize, Serialize};

use crate::linalg::dot;
use crate::model::{softmax_unchecked, PrototypeBank};

use super::SplitHyperparams;

/// Which labeled set a training patch belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    /// Concept A, pulled onto the original channel.
    S1,
    /// Concept B, pulled onto the duplicated channel.
    S2,
    /// Everything else, pushed off both channels.
    Reference,
}

/// `-log(x + eps)`, floored at zero where `x + eps` exceeds one.
#[inline]
pub fn l_act(x: f64, eps: f64) -> f64 {
    (-(x + eps).ln()).max(0.0)
}

#[inline]
fn l_act_slope(x: f64, eps: f64) -> f64 {
    if x + eps < 1.0 {
        -1.0 / (x + eps)
    } else {
        0.0
    }
}

/// `max(0, -log(1 - x + eps) - kappa)`.
#[inline]
pub fn l_deact(x: f64, kappa: f64, eps: f64) -> f64 {
    (-(1.0 - x + eps).ln() - kappa).max(0.0)
}

#[inline]
fn l_deact_slope(x: f64, kappa: f64, eps: f64) -> f64 {
    if -(1.0 - x + eps).ln() - kappa > 0.0 {
        1.0 / (1.0 - x + eps)
    } else {
        0.0
    }
}

/// The two channels a split trains: the original and its duplicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelPair {
    pub original: usize,
    pub duplicate: usize,
}

/// Per-patch splitting loss for per-location activations `p`.
pub fn split_loss(
    membership: Membership,
    p: &[f64],
    pair: ChannelPair,
    hyper: &SplitHyperparams,
) -> f64 {
    let eps = hyper.epsilon;
    let (pe, pn) = (p[pair.original], p[pair.duplicate]);
    match membership {
        Membership::S1 => l_act(pe, eps),
        Membership::S2 => l_act(pn, eps),
        Membership::Reference => {
            hyper.alpha * (l_deact(pe, hyper.kappa, eps) + l_deact(pn, hyper.kappa, eps))
        }
    }
}

/// Loss and gradients of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGradient {
    pub loss: f64,
    pub original: Vec<f64>,
    pub duplicate: Vec<f64>,
}

/// Exact gradient of [`split_loss`] composed with the softmax over every
/// channel of `bank`, taken with respect to the kernels of `pair` only.
pub fn split_loss_gradient(
    feature: &[f64],
    bank: &PrototypeBank,
    pair: ChannelPair,
    membership: Membership,
    hyper: &SplitHyperparams,
) -> PatchGradient {
    let logits: Vec<f64> = bank.kernels().iter_rows().map(|k| dot(feature, k)).collect();
    let p = softmax_unchecked(&logits);
    let (dz_e, dz_n, loss) = logit_gradient(&p, pair, membership, hyper);
    PatchGradient {
        loss,
        original: feature.iter().map(|f| dz_e * f).collect(),
        duplicate: feature.iter().map(|f| dz_n * f).collect(),
    }
}

/// dL/dz for the two trainable logits, plus the loss itself.
///
/// With `g_i = dL/dp_i` non-zero only on the pair,
/// `dL/dz_j = p_j (g_j - sum_i g_i p_i)`.
pub(crate) fn logit_gradient(
    p: &[f64],
    pair: ChannelPair,
    membership: Membership,
    hyper: &SplitHyperparams,
) -> (f64, f64, f64) {
    let eps = hyper.epsilon;
    let (pe, pn) = (p[pair.original], p[pair.duplicate]);
    let (ge, gn) = match membership {
        Membership::S1 => (l_act_slope(pe, eps), 0.0),
        Membership::S2 => (0.0, l_act_slope(pn, eps)),
        Membership::Reference => (
            hyper.alpha * l_deact_slope(pe, hyper.kappa, eps),
            hyper.alpha * l_deact_slope(pn, hyper.kappa, eps),
        ),
    };
    let mixed = ge * pe + gn * pn;
    let loss = split_loss(membership, p, pair, hyper);
    (pe * (ge - mixed), pn * (gn - mixed), loss)
}
