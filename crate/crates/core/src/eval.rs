//! Leave-one-out ranking evaluation: HR@K and NDCG@K over a full-catalog
//! (default) or sampled-candidate ranking.
//!
//! Ranking order is dot-product score descending with ties broken by
//! ascending item index, so rankings are total and reproducible. With a
//! single binary-relevant target, IDCG@K is 1 and NDCG reduces to
//! 1/log2(rank+1) for ranks within the cutoff.

use std::collections::HashSet;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::backbone::score_items;
use crate::error::{Result, UnitError};
use crate::mlp::materialize_item_reps;
use crate::rng::stream;
use crate::train::{TrainData, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k: usize,
    /// Exclude the user's training prefix (minus the target) from rankings.
    pub exclude_seen: bool,
    /// Some(c): rank within c sampled eligible candidates plus the target.
    pub sampled_candidates: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 20, exclude_seen: true, sampled_candidates: None }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(UnitError::Config("eval.k must be >= 1".into()));
        }
        if let Some(c) = self.sampled_candidates {
            if c == 0 {
                return Err(UnitError::Config("eval.sampled_candidates must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub hr: f64,
    pub ndcg: f64,
    /// Target rank per user, split order; kept out of the JSON schema.
    #[serde(skip)]
    pub per_user_ranks: Vec<usize>,
}

/// Candidate indices ordered by descending score, ties by ascending index,
/// with `exclude` removed.
pub fn rank_full_catalog(
    hidden: &[f64],
    table: &ArrayView2<f64>,
    exclude: &HashSet<usize>,
) -> Result<Vec<usize>> {
    if table.nrows() == 0 {
        return Err(UnitError::Usage("rank_full_catalog: empty item table".into()));
    }
    let scores = score_items(hidden, table)?;
    let mut order: Vec<usize> = (0..table.nrows()).filter(|i| !exclude.contains(i)).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(order)
}

/// 1-based rank of `target` in the `rank_full_catalog` ordering.
pub fn rank_of_target(
    hidden: &[f64],
    table: &ArrayView2<f64>,
    exclude: &HashSet<usize>,
    target: usize,
) -> Result<usize> {
    if target >= table.nrows() {
        return Err(UnitError::Usage(format!(
            "target {target} out of range for {} items",
            table.nrows()
        )));
    }
    if exclude.contains(&target) {
        return Err(UnitError::Usage(format!(
            "protocol violation: target {target} is in the exclude set"
        )));
    }
    let ranked = rank_full_catalog(hidden, table, exclude)?;
    let pos = ranked
        .iter()
        .position(|&i| i == target)
        .expect("target survives exclusion by the check above");
    Ok(pos + 1)
}

pub fn hr_at_k(per_user_ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(per_user_ranks, k)?;
    let hits = per_user_ranks.iter().filter(|&&r| r <= k).count();
    Ok(hits as f64 / per_user_ranks.len() as f64)
}

pub fn ndcg_at_k(per_user_ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(per_user_ranks, k)?;
    let sum: f64 = per_user_ranks
        .iter()
        .map(|&r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 })
        .sum();
    Ok(sum / per_user_ranks.len() as f64)
}

fn check_ranks(per_user_ranks: &[usize], k: usize) -> Result<()> {
    if per_user_ranks.is_empty() {
        return Err(UnitError::Usage("rank metrics need at least one user".into()));
    }
    if k == 0 {
        return Err(UnitError::Usage("k must be >= 1".into()));
    }
    if per_user_ranks.iter().any(|&r| r == 0) {
        return Err(UnitError::Usage("ranks are 1-based; got 0".into()));
    }
    Ok(())
}

/// Ranks every split user's held-out target. Exclusion uses the training
/// prefix minus the target itself, so repeat-consumption data stays
/// evaluable; the sampled protocol ranks the target among `c` seeded
/// uniform draws from the eligible catalog.
pub fn evaluate_leave_one_out(
    state: &TrainState,
    data: &TrainData,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let n_items = data.cache.n_items();
    if data.split.users.is_empty() {
        return Err(UnitError::Usage("evaluate: empty split".into()));
    }
    for u in &data.split.users {
        if u.target >= n_items {
            return Err(UnitError::Data(format!(
                "user '{}' target {} missing from catalog of {} items",
                u.id, u.target, n_items
            )));
        }
        if let Some(&bad) = u.train.iter().find(|&&i| i >= n_items) {
            return Err(UnitError::Data(format!(
                "user '{}' trains on item {bad}, catalog has {} items",
                u.id, n_items
            )));
        }
    }

    let prefixes: Vec<(usize, &[usize])> = data
        .split
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| (i, u.train.as_slice()))
        .collect();
    let hidden = state.encode_prefixes(&data.cache, &prefixes)?;
    let all: Vec<usize> = (0..n_items).collect();
    let table = materialize_item_reps(&state.mlp, &state.store, &data.cache, &all)?;
    let tview = table.view();

    let mut ranks = Vec::with_capacity(data.split.users.len());
    for (ui, user) in data.split.users.iter().enumerate() {
        let mut exclude: HashSet<usize> = if cfg.exclude_seen {
            user.train.iter().copied().collect()
        } else {
            HashSet::new()
        };
        exclude.remove(&user.target);
        let hrow: Vec<f64> = hidden.row(ui).to_vec();
        let rank = match cfg.sampled_candidates {
            None => rank_of_target(&hrow, &tview, &exclude, user.target)?,
            Some(c) => {
                let eligible: Vec<usize> = (0..n_items)
                    .filter(|i| !exclude.contains(i) && *i != user.target)
                    .collect();
                let take = c.min(eligible.len());
                let mut rng = stream(seed, &[ui as u64]);
                let mut cand: Vec<usize> = rand::seq::index::sample(&mut rng, eligible.len(), take)
                    .into_iter()
                    .map(|j| eligible[j])
                    .collect();
                cand.push(user.target);
                let scores = score_items(&hrow, &tview)?;
                let ts = scores[user.target];
                let above = cand
                    .iter()
                    .filter(|&&i| i != user.target)
                    .filter(|&&i| match scores[i].total_cmp(&ts) {
                        std::cmp::Ordering::Greater => true,
                        std::cmp::Ordering::Equal => i < user.target,
                        std::cmp::Ordering::Less => false,
                    })
                    .count();
                above + 1
            }
        };
        ranks.push(rank);
    }
    Ok(EvalReport {
        k: cfg.k,
        hr: hr_at_k(&ranks, cfg.k)?,
        ndcg: ndcg_at_k(&ranks, cfg.k)?,
        per_user_ranks: ranks,
    })
}
