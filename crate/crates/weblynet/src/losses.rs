//! Loss functions: per-network multi-label binary cross-entropy, the
//! symmetric generalized KL divergence used as the pairwise agreement
//! term, and the combined K-network objective.
//!
//! All losses are built from tape primitives so gradients flow through
//! both arguments. Log arguments are clamped to `[CLAMP_EPS, 1-CLAMP_EPS]`
//! (BCE) or `[CLAMP_EPS, inf)` (divergence), which bounds every |log| by
//! roughly 16 and with it the gradient magnitude at saturated sigmoids.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Shared clamp constant for BCE and divergence.
pub const CLAMP_EPS: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("expected {expected} divergence weights for {networks} networks, got {got}")]
    AlphaCount {
        networks: usize,
        expected: usize,
        got: usize,
    },
    #[error("divergence weight {index} is negative ({value})")]
    NegativeAlpha { index: usize, value: f64 },
    #[error("combined loss needs at least 2 networks, got {got}")]
    TooFewNetworks { got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-term decomposition of one combined loss evaluation.
///
/// `total` always equals `sum(per_network_bce) + Σ alphas[p] ·
/// per_pair_divergence[p]` recomposed in that order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_network_bce: Vec<f64>,
    pub per_pair_divergence: Vec<f64>,
    pub alphas: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomputes the total from the parts, in the same fold order the
    /// tape used, so it matches `total` exactly.
    pub fn recomposed_total(&self) -> f64 {
        let mut acc = 0.0;
        for &b in &self.per_network_bce {
            acc += b;
        }
        for (a, d) in self.alphas.iter().zip(&self.per_pair_divergence) {
            acc += a * d;
        }
        acc
    }

    /// Running mean over a stream of breakdowns (used for epoch logs).
    pub fn mean_of(items: &[LossBreakdown]) -> Option<LossBreakdown> {
        let first = items.first()?;
        let n = items.len() as f64;
        let mut out = LossBreakdown {
            per_network_bce: vec![0.0; first.per_network_bce.len()],
            per_pair_divergence: vec![0.0; first.per_pair_divergence.len()],
            alphas: first.alphas.clone(),
            total: 0.0,
        };
        for it in items {
            for (acc, v) in out.per_network_bce.iter_mut().zip(&it.per_network_bce) {
                *acc += v;
            }
            for (acc, v) in out
                .per_pair_divergence
                .iter_mut()
                .zip(&it.per_pair_divergence)
            {
                *acc += v;
            }
            out.total += it.total;
        }
        for v in &mut out.per_network_bce {
            *v /= n;
        }
        for v in &mut out.per_pair_divergence {
            *v /= n;
        }
        out.total /= n;
        Some(out)
    }
}

/// Multi-label binary cross-entropy, averaged over classes:
/// `(1/C) Σ_c −y_c·log(p_c) − (1−y_c)·log(1−p_c)`.
///
/// `p` is clamped into `[CLAMP_EPS, 1−CLAMP_EPS]` internally; `y` is a
/// constant multi-hot target.
pub fn bce_multilabel(tape: &mut Tape, p: Var, y: &Tensor) -> Result<Var> {
    if tape.shape(p) != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_multilabel",
            lhs: tape.shape(p).to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let y_var = tape.leaf(y);
    let pc = tape.clamp(p, CLAMP_EPS, 1.0 - CLAMP_EPS);
    // term = -(y·log p + (1-y)·log(1-p))
    let log_p = tape.log(pc);
    let pos = tape.mul(y_var, log_p)?;
    let neg_p = tape.scalar_mul(pc, -1.0);
    let one_minus_p = tape.scalar_add(neg_p, 1.0);
    let log_1mp = tape.log(one_minus_p);
    let neg_y = tape.scalar_mul(y_var, -1.0);
    let one_minus_y = tape.scalar_add(neg_y, 1.0);
    let neg = tape.mul(one_minus_y, log_1mp)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both);
    Ok(tape.scalar_mul(m, -1.0))
}

/// Symmetric generalized KL divergence between two positive vectors
/// (which need not sum to one): `Σ_i (a_i − b_i) · log(a_i / b_i)`.
///
/// Inputs are clamped to `≥ CLAMP_EPS`. The result is symmetric,
/// non-negative, zero iff the clamped inputs are equal, and equals
/// `Dgkl(a‖b) + Dgkl(b‖a)` for the generalized KL of
/// [`generalized_kl`].
pub fn sym_gkl(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op: "sym_gkl",
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let ac = tape.clamp(a, CLAMP_EPS, f64::INFINITY);
    let bc = tape.clamp(b, CLAMP_EPS, f64::INFINITY);
    let diff = tape.sub(ac, bc)?;
    let log_a = tape.log(ac);
    let log_b = tape.log(bc);
    let log_ratio = tape.sub(log_a, log_b)?;
    let terms = tape.mul(diff, log_ratio)?;
    Ok(tape.sum(terms))
}

/// One-sided generalized KL divergence for positive vectors:
/// `Σ x_i·log(x_i/y_i) − Σ x_i + Σ y_i`.
///
/// Plain-value helper (no gradients); the two-sided sum
/// `generalized_kl(a,b) + generalized_kl(b,a)` is the algebraic twin of
/// [`sym_gkl`] and the tests hold the two routes against each other.
pub fn generalized_kl(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let mut acc = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let xi = xi.max(CLAMP_EPS);
        let yi = yi.max(CLAMP_EPS);
        acc += xi * (xi / yi).ln() - xi + yi;
    }
    acc
}

/// Index pairs `(i, j)` with `i < j` in lexicographic order; the fixed
/// pair order that divergence weights align to.
pub fn network_pairs(k: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Expands a weight list to one weight per network pair: either already
/// per-pair, or a single shared value broadcast to all pairs.
pub fn resolve_alphas(alphas: &[f64], k: usize) -> std::result::Result<Vec<f64>, LossError> {
    let expected = k * (k - 1) / 2;
    let resolved = if alphas.len() == 1 && expected > 1 {
        vec![alphas[0]; expected]
    } else {
        alphas.to_vec()
    };
    if resolved.len() != expected {
        return Err(LossError::AlphaCount {
            networks: k,
            expected,
            got: alphas.len(),
        });
    }
    for (i, &a) in resolved.iter().enumerate() {
        if a < 0.0 {
            return Err(LossError::NegativeAlpha { index: i, value: a });
        }
    }
    Ok(resolved)
}

/// Combined co-teaching objective over K network outputs:
/// `Σ_k bce(outs[k], y) + Σ_{i<j} α_p · sym_gkl(outs[i], outs[j])`.
///
/// `alphas` must already be per-pair (see [`resolve_alphas`]), aligned to
/// [`network_pairs`] order.
pub fn weblynet_loss(
    tape: &mut Tape,
    outs: &[Var],
    y: &Tensor,
    alphas: &[f64],
) -> std::result::Result<(Var, LossBreakdown), LossError> {
    let k = outs.len();
    if k < 2 {
        return Err(LossError::TooFewNetworks { got: k });
    }
    let pairs = network_pairs(k);
    if alphas.len() != pairs.len() {
        return Err(LossError::AlphaCount {
            networks: k,
            expected: pairs.len(),
            got: alphas.len(),
        });
    }
    for (i, &a) in alphas.iter().enumerate() {
        if a < 0.0 {
            return Err(LossError::NegativeAlpha { index: i, value: a });
        }
    }

    let mut per_network_bce = Vec::with_capacity(k);
    let mut total: Option<Var> = None;
    for &out in outs {
        let bce = bce_multilabel(tape, out, y)?;
        per_network_bce.push(tape.scalar_value(bce));
        total = Some(match total {
            Some(acc) => tape.add(acc, bce)?,
            None => bce,
        });
    }
    let mut per_pair_divergence = Vec::with_capacity(pairs.len());
    let mut acc = total.expect("k >= 2");
    for (&(i, j), &alpha) in pairs.iter().zip(alphas) {
        let div = sym_gkl(tape, outs[i], outs[j])?;
        per_pair_divergence.push(tape.scalar_value(div));
        let weighted = tape.scalar_mul(div, alpha);
        acc = tape.add(acc, weighted)?;
    }
    let breakdown = LossBreakdown {
        per_network_bce,
        per_pair_divergence,
        alphas: alphas.to_vec(),
        total: tape.scalar_value(acc),
    };
    Ok((acc, breakdown))
}
