//! Hinge and base-2 logistic k-wise losses and their contrastive compositions.

use std::f64::consts::LN_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{dot, logistic_value, DiffError, GraphBuilder, NodeId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("loss of an empty score vector")]
    Empty,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("score range must be finite, got [{0}, {1}]")]
    UnboundedRange(f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Hinge,
    Logistic,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Hinge => "hinge",
            LossKind::Logistic => "logistic",
        }
    }
}

/// `ℓ(v)` for a score vector `v ∈ R^k`.
pub fn loss(kind: LossKind, v: &[f64]) -> Result<f64, LossError> {
    if v.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(match kind {
        LossKind::Hinge => (1.0 - v.iter().copied().fold(f64::INFINITY, f64::min)).max(0.0),
        LossKind::Logistic => logistic_value(v),
    })
}

/// `ℓ(0⃗_N)`.
pub fn loss_at_zero(kind: LossKind, n: usize) -> f64 {
    match kind {
        LossKind::Hinge => 1.0,
        LossKind::Logistic => (1.0 + n as f64).log2(),
    }
}

fn check_dims(f_x: &[f64], others: &[&[f64]]) -> Result<(), LossError> {
    for o in others {
        if o.len() != f_x.len() {
            return Err(LossError::DimMismatch(format!(
                "feature of length {} against anchor of length {}",
                o.len(),
                f_x.len()
            )));
        }
    }
    Ok(())
}

/// `ℓ({f_xᵀ(f_pos − f_negᵢ)}ᵢ)`.
pub fn contrastive_loss(
    kind: LossKind,
    f_x: &[f64],
    f_pos: &[f64],
    f_negs: &[&[f64]],
) -> Result<f64, LossError> {
    check_dims(f_x, &[f_pos])?;
    check_dims(f_x, f_negs)?;
    let base = dot(f_x, f_pos);
    let v: Vec<f64> = f_negs.iter().map(|n| base - dot(f_x, n)).collect();
    loss(kind, &v)
}

/// `ℓ(f_xᵀ(mean(f_pos) − mean(f_neg)))`.
pub fn block_loss(
    kind: LossKind,
    f_x: &[f64],
    f_pos: &[&[f64]],
    f_neg: &[&[f64]],
) -> Result<f64, LossError> {
    if f_pos.is_empty() || f_pos.len() != f_neg.len() {
        return Err(LossError::DimMismatch(format!(
            "blocks of size {} and {}",
            f_pos.len(),
            f_neg.len()
        )));
    }
    check_dims(f_x, f_pos)?;
    check_dims(f_x, f_neg)?;
    let b = f_pos.len() as f64;
    let sp: f64 = f_pos.iter().map(|p| dot(f_x, p)).sum();
    let sn: f64 = f_neg.iter().map(|n| dot(f_x, n)).sum();
    loss(kind, &[(sp - sn) / b])
}

/// Lipschitz constant of `ℓ` along the single-score path used by the bounds.
pub fn lipschitz_constant(kind: LossKind) -> f64 {
    match kind {
        LossKind::Hinge => 1.0,
        // |d/dv log2(1 + e^{-v})| = e^{-v} / ((1 + e^{-v}) ln 2) < 1 / ln 2
        LossKind::Logistic => 1.0 / LN_2,
    }
}

/// Upper bound on `ℓ` over `k` scores each in `[v_min, v_max]`.
pub fn effective_bound(kind: LossKind, k: usize, v_min: f64, v_max: f64) -> Result<f64, LossError> {
    if !v_min.is_finite() || !v_max.is_finite() || v_min > v_max {
        return Err(LossError::UnboundedRange(v_min, v_max));
    }
    Ok(match kind {
        LossKind::Hinge => (1.0 + (-v_min).max(0.0)).max(0.0),
        LossKind::Logistic => (1.0 + k as f64 * (-v_min).exp()).log2(),
    })
}

/// Append `ℓ(v)` to a graph.
pub fn append_loss(b: &mut GraphBuilder, kind: LossKind, v: NodeId) -> Result<NodeId, DiffError> {
    match kind {
        LossKind::Hinge => b.hinge(v),
        LossKind::Logistic => b.logistic(v),
    }
}

/// Append the objective an attacker ascends: a function whose maximizers
/// maximize `ℓ`. For hinge this is the unclamped margin, which keeps a
/// gradient on the zero-loss plateau; for logistic it is the loss itself.
pub fn append_attack_objective(
    b: &mut GraphBuilder,
    kind: LossKind,
    v: NodeId,
) -> Result<NodeId, DiffError> {
    match kind {
        LossKind::Hinge => b.hinge_margin(v),
        LossKind::Logistic => b.logistic(v),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub trials: usize,
    pub failures: usize,
    /// Smallest slack over all checked inequalities (negative means violated).
    pub worst_margin: f64,
    pub passed: bool,
}

/// Randomized check of `ℓ(v_{I₁}) ≤ ℓ(v) ≤ ℓ(v_{I₁}) + ℓ(v_{I₂})` (and the
/// same with `I₁, I₂` swapped) for random covers `I₁ ∪ I₂ = [d]`.
pub fn check_partition_with(
    f: impl Fn(&[f64]) -> f64,
    trials: usize,
    k_max: usize,
    seed: u64,
) -> PartitionReport {
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    let mut failures = 0;
    let k_max = k_max.max(2);
    for _ in 0..trials {
        let d = rng.random_range(2..=k_max);
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-4.0..4.0)).collect();
        // each index lands in I1 only, I2 only, or both; both sides non-empty
        let (i1, i2) = loop {
            let mut i1 = Vec::new();
            let mut i2 = Vec::new();
            for &x in &v {
                match rng.random_range(0..3) {
                    0 => i1.push(x),
                    1 => i2.push(x),
                    _ => {
                        i1.push(x);
                        i2.push(x);
                    }
                }
            }
            if !i1.is_empty() && !i2.is_empty() {
                break (i1, i2);
            }
        };
        let (lv, l1, l2) = (f(&v), f(&i1), f(&i2));
        let margins = [lv - l1, lv - l2, l1 + l2 - lv];
        let m = margins.iter().copied().fold(f64::INFINITY, f64::min);
        worst = worst.min(m);
        if m < -TOL {
            failures += 1;
        }
    }
    PartitionReport { trials, failures, worst_margin: worst, passed: failures == 0 }
}

pub fn check_partition(kind: LossKind, trials: usize, k_max: usize, seed: u64) -> PartitionReport {
    check_partition_with(|v| loss(kind, v).expect("non-empty"), trials, k_max, seed)
}
