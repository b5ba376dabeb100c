//! Pairwise uniformity losses and the held-out uniformity measurement.
//!
//! All three losses are log-mean-exp aggregates of exp(−t·D²) over unordered
//! row pairs, evaluated through one shared stable kernel
//! (`autodiff::pairwise_lme_forward`): LSE(−t·D² − ln p_j − ln p_m) − ln P.
//! Because value-level calls and graph nodes run the same kernel, the
//! reduction identities (p ≡ 1 gives loss_general; λ = 0 gives loss_general)
//! hold bit-for-bit, not just within tolerance.
//!
//! Sign conventions: every loss is ≤ 0 for t ≥ 0, with 0 the least uniform
//! (all points coincident) and more negative meaning more uniform. λ is a
//! signed knob (default −0.5): within-sequence pairs already repel inside
//! L_general, and the negative default diminishes their net repulsion.

use ndarray::{Array2, ArrayView2};
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{pairwise_lme_forward, Graph, NodeId};
use crate::error::{Result, UnitError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    None,
    General,
    Seq,
    Pop,
}

impl std::str::FromStr for Strategy {
    type Err = UnitError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Strategy::None),
            "general" => Ok(Strategy::General),
            "seq" => Ok(Strategy::Seq),
            "pop" => Ok(Strategy::Pop),
            other => Err(UnitError::Config(format!(
                "unknown uniformity strategy '{other}' (expected none|general|seq|pop)"
            ))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::None => "none",
            Strategy::General => "general",
            Strategy::Seq => "seq",
            Strategy::Pop => "pop",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformityConfig {
    pub strategy: Strategy,
    pub t: f64,
    /// Weight on the within-sequence term of the seq strategy; signed.
    pub lambda: f64,
    pub gamma: f64,
    pub measure_sample: usize,
    pub measure_t: f64,
}

impl Default for UniformityConfig {
    fn default() -> Self {
        UniformityConfig {
            strategy: Strategy::General,
            t: 1.0,
            lambda: -0.5,
            gamma: 0.03,
            measure_sample: 2000,
            measure_t: 1.0,
        }
    }
}

impl UniformityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 0.0 {
            return Err(UnitError::Config(format!("uniformity.t must be >= 0, got {}", self.t)));
        }
        if self.gamma < 0.0 {
            return Err(UnitError::Config(format!(
                "uniformity.gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        if self.measure_sample < 2 {
            return Err(UnitError::Config(format!(
                "uniformity.measure_sample must be >= 2, got {}",
                self.measure_sample
            )));
        }
        if self.measure_t < 0.0 {
            return Err(UnitError::Config(format!(
                "uniformity.measure_t must be >= 0, got {}",
                self.measure_t
            )));
        }
        Ok(())
    }
}

pub fn distance_sq(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UnitError::Usage(format!(
            "distance_sq dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

fn check_reps(reps: &ArrayView2<f64>, t: f64) -> Result<()> {
    if reps.nrows() < 2 {
        return Err(UnitError::Usage(format!(
            "uniformity loss needs at least 2 rows, got {}",
            reps.nrows()
        )));
    }
    if t < 0.0 {
        return Err(UnitError::Usage(format!("t must be >= 0, got {t}")));
    }
    Ok(())
}

/// Log of the mean over all unordered row pairs of exp(−t·D²).
pub fn loss_general(reps: &ArrayView2<f64>, t: f64) -> Result<f64> {
    check_reps(reps, t)?;
    Ok(pairwise_lme_forward(reps, t, None).0)
}

/// Mean over users (with k ≥ 2) of the per-sequence log-mean-exp; users
/// shorter than 2 contribute nothing and do not enter the denominator.
pub fn loss_sub_sequences(per_user: &[Array2<f64>], t: f64) -> Result<f64> {
    if t < 0.0 {
        return Err(UnitError::Usage(format!("t must be >= 0, got {t}")));
    }
    let mut sum = 0.0;
    let mut contributing = 0usize;
    for reps in per_user {
        if reps.nrows() < 2 {
            continue;
        }
        sum += pairwise_lme_forward(&reps.view(), t, None).0;
        contributing += 1;
    }
    if contributing == 0 {
        return Err(UnitError::Usage(
            "loss_sub_sequences: no user sequence has at least 2 items".into(),
        ));
    }
    Ok(sum / contributing as f64)
}

/// loss_general over the batch set plus λ times the within-sequence
/// term. λ = 0 short-circuits to the identical loss_general code path.
pub fn loss_seq(
    batch_reps: &ArrayView2<f64>,
    per_user: &[Array2<f64>],
    t: f64,
    lambda: f64,
) -> Result<f64> {
    let general = loss_general(batch_reps, t)?;
    if lambda == 0.0 {
        return Ok(general);
    }
    Ok(general + lambda * loss_sub_sequences(per_user, t)?)
}

/// Log-mean over pairs of exp(−t·D²)/(p_j·p_m), via
/// LSE(−t·D² − ln p_j − ln p_m) − ln P.
pub fn loss_pop(reps: &ArrayView2<f64>, p: &[f64], t: f64) -> Result<f64> {
    check_reps(reps, t)?;
    if p.len() != reps.nrows() {
        return Err(UnitError::Usage(format!(
            "popularity length {} does not match {} rows",
            p.len(),
            reps.nrows()
        )));
    }
    if let Some(bad) = p.iter().find(|&&v| v <= 0.0) {
        return Err(UnitError::Usage(format!("popularity values must be > 0, got {bad}")));
    }
    let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    Ok(pairwise_lme_forward(reps, t, Some(&log_p)).0)
}

/// Uniformity diagnostic: loss_general at `measure_t` over a seeded sample of
/// min(sample_size, n) distinct items. Pure measurement; no gradient flow.
pub fn uniformity_metric(
    full_reps: &ArrayView2<f64>,
    sample_size: usize,
    measure_t: f64,
    seed: u64,
) -> Result<f64> {
    let n = full_reps.nrows();
    if n < 2 {
        return Err(UnitError::Usage(format!("uniformity_metric needs >= 2 items, got {n}")));
    }
    if sample_size < 2 {
        return Err(UnitError::Usage(format!(
            "uniformity_metric sample_size must be >= 2, got {sample_size}"
        )));
    }
    let k = sample_size.min(n);
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    let mut sampled = Array2::zeros((k, full_reps.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        sampled.row_mut(r).assign(&full_reps.row(i));
    }
    loss_general(&sampled.view(), measure_t)
}

/// Graph node for loss_general; gradients flow into `reps`.
pub fn loss_general_node(g: &mut Graph, reps: NodeId, t: f64) -> Result<NodeId> {
    check_reps(&g.value(reps).view(), t)?;
    Ok(g.pairwise_log_mean_exp(reps, t, None))
}

/// Graph node for loss_pop; `p` aligns with the rows of `reps`.
pub fn loss_pop_node(g: &mut Graph, reps: NodeId, p: &[f64], t: f64) -> Result<NodeId> {
    check_reps(&g.value(reps).view(), t)?;
    if p.len() != g.value(reps).nrows() {
        return Err(UnitError::Usage(format!(
            "popularity length {} does not match {} rows",
            p.len(),
            g.value(reps).nrows()
        )));
    }
    if let Some(bad) = p.iter().find(|&&v| v <= 0.0) {
        return Err(UnitError::Usage(format!("popularity values must be > 0, got {bad}")));
    }
    let log_p: Vec<f64> = p.iter().map(|v| v.ln()).collect();
    Ok(g.pairwise_log_mean_exp(reps, t, Some(log_p)))
}

/// Graph node for loss_seq over a batch node and per-user rep nodes (each a
/// k_u × d matrix node; rows with k < 2 must be filtered by the caller).
pub fn loss_seq_node(
    g: &mut Graph,
    batch_reps: NodeId,
    per_user: &[NodeId],
    t: f64,
    lambda: f64,
) -> Result<NodeId> {
    let general = loss_general_node(g, batch_reps, t)?;
    if lambda == 0.0 {
        return Ok(general);
    }
    if per_user.is_empty() {
        return Err(UnitError::Usage(
            "loss_seq_node: no per-user sequences with at least 2 items".into(),
        ));
    }
    let subs: Vec<NodeId> = per_user
        .iter()
        .map(|&u| {
            check_reps(&g.value(u).view(), t)?;
            Ok(g.pairwise_log_mean_exp(u, t, None))
        })
        .collect::<Result<_>>()?;
    let mean = g.mean_scalars(subs);
    Ok(g.add_scaled(general, mean, lambda))
}
