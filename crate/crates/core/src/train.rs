//! Single-phase training: Adam over projection + backbone parameters with
//! L = mean BCE over scored (positive, negative) pairs + γ · L_U.
//!
//! Every random draw comes from a stream derived as (seed, stream label,
//! epoch[, user]) so the parameter trajectory is a pure function of
//! (seed, config, data) and a resumed run replays the unbroken one. The text
//! embedding cache is read-only throughout; only projection, backbone,
//! positional, and mask parameters train.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph};
use crate::backbone::{
    causal_train_batch, eval_batch, masked_train_batch, Backbone, BackboneConfig, BackboneKind,
    SequenceBatch,
};
use crate::data::{DatasetSplit, PopularityTable};
use crate::encoder::EmbeddingCache;
use crate::error::{Result, UnitError};
use crate::eval::{evaluate_leave_one_out, EvalConfig};
use crate::mlp::{gather_cache_rows, init_projection, materialize_item_reps, ProjectionMlp};
use crate::params::ParamStore;
use crate::rng::{
    derive_seed, stream, STREAM_DROPOUT, STREAM_INIT, STREAM_MASK, STREAM_METRIC,
    STREAM_NEGATIVES, STREAM_SHUFFLE,
};
use crate::uniformity::{
    loss_general_node, loss_pop_node, loss_seq_node, uniformity_metric, Strategy,
    UniformityConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub negatives_per_positive: usize,
    /// Ranking metrics are computed every this many epochs (and on the last);
    /// off-schedule records carry the last computed values forward.
    pub eval_every: usize,
    /// false writes wall_time_seconds as 0.0 so logs are byte-comparable.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 512,
            learning_rate: 0.001,
            seed: 42,
            negatives_per_positive: 1,
            eval_every: 1,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(UnitError::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(UnitError::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(UnitError::Config(format!(
                "train.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.negatives_per_positive == 0 {
            return Err(UnitError::Config("train.negatives_per_positive must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(UnitError::Config("train.eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub rec_loss: f64,
    pub uni_loss: f64,
    pub total_loss: f64,
    pub hr_at_20: f64,
    pub ndcg_at_20: f64,
    pub uniformity_metric: f64,
    pub wall_time_seconds: f64,
}

/// Frozen inputs of a training run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub split: DatasetSplit,
    pub popularity: PopularityTable,
    pub cache: EmbeddingCache,
}

impl TrainData {
    pub fn validate(&self) -> Result<()> {
        let n = self.cache.n_items();
        if self.split.users.is_empty() {
            return Err(UnitError::Data("training split has no users".into()));
        }
        if self.popularity.p.len() != n {
            return Err(UnitError::Data(format!(
                "popularity table covers {} items, cache has {n}",
                self.popularity.p.len()
            )));
        }
        for u in &self.split.users {
            if u.train.is_empty() {
                return Err(UnitError::Data(format!("user '{}' has an empty train prefix", u.id)));
            }
            if u.target >= n || u.train.iter().any(|&i| i >= n) {
                return Err(UnitError::Data(format!(
                    "user '{}' references an item outside the {n}-item cache",
                    u.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub store: ParamStore,
    pub mlp: ProjectionMlp,
    pub backbone: Backbone,
    pub epochs_done: usize,
}

impl TrainState {
    /// Parameter layout and init draws are fixed: projection first, then
    /// backbone, one shared init stream. Changing this order changes every
    /// seeded trajectory.
    pub fn new(
        seed: u64,
        input_dim: usize,
        layer_dims: &[usize],
        backbone_cfg: BackboneConfig,
    ) -> Result<Self> {
        backbone_cfg.validate()?;
        if layer_dims.last() != Some(&backbone_cfg.d) {
            return Err(UnitError::Config(format!(
                "projection layer_dims must end at model.d: got {:?} vs d={}",
                layer_dims, backbone_cfg.d
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[STREAM_INIT]);
        let mlp = init_projection(&mut store, &mut rng, input_dim, layer_dims)?;
        let backbone = Backbone::init(&mut store, &mut rng, backbone_cfg)?;
        Ok(TrainState { store, mlp, backbone, epochs_done: 0 })
    }

    /// Projected representations of the full catalog.
    pub fn materialize_all(&self, cache: &EmbeddingCache) -> Result<Array2<f64>> {
        let all: Vec<usize> = (0..cache.n_items()).collect();
        materialize_item_reps(&self.mlp, &self.store, cache, &all)
    }

    /// One hidden row per (user, prefix): the last position for the causal
    /// kind, an appended mask slot for the masked kind. No dropout.
    pub fn encode_prefixes(
        &self,
        cache: &EmbeddingCache,
        users: &[(usize, &[usize])],
    ) -> Result<Array2<f64>> {
        let d = self.backbone.cfg.d;
        let mut out = Array2::zeros((users.len(), d));
        let mut row = 0usize;
        for chunk in users.chunks(128) {
            let batch = eval_batch(self.backbone.cfg.kind, chunk, self.backbone.cfg.max_len)?;
            let items = batch.window_items();
            let slot: HashMap<usize, usize> =
                items.iter().enumerate().map(|(s, &i)| (i, s)).collect();
            let x = gather_cache_rows(&self.mlp, cache, &items)?;
            let mut g = Graph::new();
            let xn = g.constant(x);
            let mlp_nodes = self.mlp.bind_frozen(&mut g, &self.store);
            let reps = self.mlp.project_node(&mut g, &mlp_nodes, xn);
            let bb_nodes = self.backbone.bind_frozen(&mut g, &self.store);
            let idx = batch.gather_indices(|i| slot.get(&i).copied())?;
            let h = self.backbone.forward(&mut g, &bb_nodes, &batch, reps, idx, None)?;
            let hv = g.value(h);
            for &flat in &batch.score_flat {
                out.row_mut(row).assign(&hv.row(flat));
                row += 1;
            }
        }
        debug_assert_eq!(row, users.len());
        Ok(out)
    }
}

/// Uniform draw over the catalog minus the user's entire sequence, with
/// replacement across draws. Deterministic given the seed.
pub fn sample_negatives(
    user_sequence: &[usize],
    n_items: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let exclude: HashSet<usize> = user_sequence.iter().copied().collect();
    if let Some(&bad) = exclude.iter().find(|&&i| i >= n_items) {
        return Err(UnitError::Usage(format!(
            "sequence item {bad} out of range for {n_items} items"
        )));
    }
    if exclude.len() >= n_items {
        return Err(UnitError::Data(format!(
            "no eligible negatives: user consumed all {n_items} items"
        )));
    }
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        use rand::Rng;
        let cand = rng.random_range(0..n_items);
        if !exclude.contains(&cand) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Σ softplus(−pos) + softplus(neg), the stable form of
/// −Σ log σ(pos) + log(1 − σ(neg)).
pub fn rec_loss(positive_scores: &[f64], negative_scores: &[f64]) -> Result<f64> {
    if positive_scores.len() != negative_scores.len() {
        return Err(UnitError::Usage(format!(
            "score lists differ in length: {} vs {}",
            positive_scores.len(),
            negative_scores.len()
        )));
    }
    Ok(positive_scores
        .iter()
        .zip(negative_scores)
        .map(|(&p, &n)| softplus(-p) + softplus(n))
        .sum())
}

pub fn total_loss(rec: f64, uni: f64, gamma: f64) -> Result<f64> {
    if gamma < 0.0 {
        return Err(UnitError::Usage(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(rec + gamma * uni)
}

/// Items a user's batch window consumes, in sequence order with duplicates:
/// the causal span is inputs plus the final target; the masked span is the
/// window itself (its items stay real at masked rows).
fn per_user_spans(batch: &SequenceBatch) -> Vec<Vec<usize>> {
    let windows = batch.windows();
    let mut spans = Vec::with_capacity(batch.n_users());
    for w in &windows {
        let mut span: Vec<usize> =
            (w.start..w.start + w.len).map(|f| batch.items[f] as usize).collect();
        if batch.kind == BackboneKind::Causal {
            let last_target = batch.targets[w.start + w.len - 1];
            debug_assert!(last_target >= 0);
            span.push(last_target as usize);
        }
        spans.push(span);
    }
    spans
}

/// One optimizer pass over all users in seed-shuffled order, then the
/// epoch's measurements. Loss figures are means over batches; rec_loss is
/// the per-pair mean within each batch.
pub fn train_epoch(
    state: &mut TrainState,
    data: &TrainData,
    tc: &TrainConfig,
    uc: &UniformityConfig,
    with_ranking_metrics: bool,
) -> Result<TrainLogRecord> {
    let t0 = std::time::Instant::now();
    let e = state.epochs_done as u64;
    let n_items = data.cache.n_items();
    let kind = state.backbone.cfg.kind;
    let max_len = state.backbone.cfg.max_len;

    let mut order: Vec<usize> = (0..data.split.users.len()).collect();
    order.shuffle(&mut stream(tc.seed, &[STREAM_SHUFFLE, e]));
    let mut dropout_rng = stream(tc.seed, &[STREAM_DROPOUT, e]);

    let mut rec_sum = 0.0;
    let mut uni_sum = 0.0;
    let mut total_sum = 0.0;
    let mut n_batches = 0usize;

    for (batch_no, chunk) in order.chunks(tc.batch_size).enumerate() {
        let eligible: Vec<(usize, &[usize])> = chunk
            .iter()
            .map(|&gu| (gu, data.split.users[gu].train.as_slice()))
            .filter(|(_, train)| match kind {
                BackboneKind::Causal => train.len() >= 2,
                BackboneKind::Masked => !train.is_empty(),
            })
            .collect();
        if eligible.is_empty() {
            continue;
        }
        let batch = match kind {
            BackboneKind::Causal => causal_train_batch(&eligible, max_len)?,
            BackboneKind::Masked => {
                let seeds: Vec<u64> = eligible
                    .iter()
                    .map(|(gu, _)| derive_seed(tc.seed, &[STREAM_MASK, e, *gu as u64]))
                    .collect();
                masked_train_batch(&eligible, max_len, state.backbone.cfg.mask_rate, &seeds)?
            }
        };

        // Per-user supervision and negatives, fixed user-major order.
        let windows = batch.windows();
        let mut supervised: Vec<Vec<(usize, usize)>> = Vec::with_capacity(batch.n_users());
        let mut negatives: Vec<Vec<usize>> = Vec::with_capacity(batch.n_users());
        for (u_row, &gu) in batch.users.iter().enumerate() {
            let w = windows[u_row];
            let sup: Vec<(usize, usize)> = (w.start..w.start + w.len)
                .filter_map(|flat| {
                    let t = batch.targets[flat];
                    (t >= 0).then_some((flat, t as usize))
                })
                .collect();
            let user = &data.split.users[gu];
            let mut full_seq = user.train.clone();
            full_seq.push(user.target);
            let negs = sample_negatives(
                &full_seq,
                n_items,
                sup.len() * tc.negatives_per_positive,
                derive_seed(tc.seed, &[STREAM_NEGATIVES, e, gu as u64]),
            )?;
            supervised.push(sup);
            negatives.push(negs);
        }

        let uni_items = batch.window_items();
        let mut all_items: std::collections::BTreeSet<usize> = uni_items.iter().copied().collect();
        for negs in &negatives {
            all_items.extend(negs.iter().copied());
        }
        let all_items: Vec<usize> = all_items.into_iter().collect();
        let slot: HashMap<usize, usize> =
            all_items.iter().enumerate().map(|(s, &i)| (i, s)).collect();

        // Forward graph: cache rows → projection → backbone → scores.
        let x = gather_cache_rows(&state.mlp, &data.cache, &all_items)?;
        let mut g = Graph::new();
        let xn = g.constant(x);
        let mlp_nodes = state.mlp.bind(&mut g, &state.store);
        let reps = state.mlp.project_node(&mut g, &mlp_nodes, xn);
        let bb_nodes = state.backbone.bind(&mut g, &state.store);
        let gather_idx = batch.gather_indices(|i| slot.get(&i).copied())?;
        let h = state.backbone.forward(
            &mut g,
            &bb_nodes,
            &batch,
            reps,
            gather_idx,
            Some(&mut dropout_rng),
        )?;

        let mut pos_pairs = Vec::new();
        let mut neg_pairs = Vec::new();
        for (u_row, sup) in supervised.iter().enumerate() {
            for (si, &(flat, target)) in sup.iter().enumerate() {
                for j in 0..tc.negatives_per_positive {
                    let neg = negatives[u_row][si * tc.negatives_per_positive + j];
                    pos_pairs.push((flat, slot[&target]));
                    neg_pairs.push((flat, slot[&neg]));
                }
            }
        }
        if pos_pairs.is_empty() {
            continue;
        }
        let n_pairs = pos_pairs.len();
        let pos_node = g.pair_dot(h, reps, pos_pairs);
        let neg_node = g.pair_dot(h, reps, neg_pairs);
        let bce = g.bce_sum(pos_node, neg_node);
        let rec_node = g.scale(bce, 1.0 / n_pairs as f64);

        // Uniformity over the batch's deduplicated positive item set.
        let uni_node = if uc.strategy != Strategy::None && uc.gamma > 0.0 && uni_items.len() >= 2 {
            let uni_slots: Vec<usize> = uni_items.iter().map(|i| slot[i]).collect();
            let set_node = g.gather_rows(reps, uni_slots);
            let node = match uc.strategy {
                Strategy::General => loss_general_node(&mut g, set_node, uc.t)?,
                Strategy::Pop => {
                    let p: Vec<f64> = uni_items.iter().map(|&i| data.popularity.p[i]).collect();
                    loss_pop_node(&mut g, set_node, &p, uc.t)?
                }
                Strategy::Seq => {
                    let spans = per_user_spans(&batch);
                    let per_user: Vec<_> = spans
                        .iter()
                        .filter(|s| s.len() >= 2)
                        .map(|s| {
                            let slots: Vec<usize> = s.iter().map(|i| slot[i]).collect();
                            g.gather_rows(reps, slots)
                        })
                        .collect();
                    if per_user.is_empty() {
                        // Degenerate batch of length-1 spans: only the
                        // batch-set term is defined.
                        loss_general_node(&mut g, set_node, uc.t)?
                    } else {
                        loss_seq_node(&mut g, set_node, &per_user, uc.t, uc.lambda)?
                    }
                }
                Strategy::None => unreachable!(),
            };
            Some(node)
        } else {
            None
        };

        let total_node = match uni_node {
            Some(u) => g.add_scaled(rec_node, u, uc.gamma),
            None => rec_node,
        };

        let rec_v = g.scalar(rec_node);
        let uni_v = uni_node.map(|u| g.scalar(u)).unwrap_or(0.0);
        let total_v = g.scalar(total_node);
        if !total_v.is_finite() {
            return Err(UnitError::Numeric(format!(
                "epoch {} batch {batch_no}: non-finite total loss (rec {rec_v}, uni {uni_v})",
                e + 1
            )));
        }

        g.backward(total_node);
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; state.store.len()];
        for (pid, node) in state
            .mlp
            .bound_params(&mlp_nodes)
            .into_iter()
            .chain(state.backbone.bound_params(&bb_nodes))
        {
            grads[pid.0] = g.take_grad(node);
        }
        state.store.adam_step(&grads, tc.learning_rate);

        rec_sum += rec_v;
        uni_sum += uni_v;
        total_sum += total_v;
        n_batches += 1;
    }

    if n_batches == 0 {
        return Err(UnitError::Data(
            "epoch produced no trainable batch (all prefixes too short)".into(),
        ));
    }

    state.epochs_done += 1;
    let epoch = state.epochs_done;

    let table = state.materialize_all(&data.cache)?;
    let metric = uniformity_metric(
        &table.view(),
        uc.measure_sample,
        uc.measure_t,
        derive_seed(tc.seed, &[STREAM_METRIC, e]),
    )?;

    let (hr, ndcg) = if with_ranking_metrics {
        let report = evaluate_leave_one_out(
            state,
            data,
            &EvalConfig::default(),
            derive_seed(tc.seed, &[STREAM_METRIC, e, 1]),
        )?;
        (report.hr, report.ndcg)
    } else {
        (f64::NAN, f64::NAN) // caller substitutes carried values
    };

    Ok(TrainLogRecord {
        epoch,
        rec_loss: rec_sum / n_batches as f64,
        uni_loss: uni_sum / n_batches as f64,
        total_loss: total_sum / n_batches as f64,
        hr_at_20: hr,
        ndcg_at_20: ndcg,
        uniformity_metric: metric,
        wall_time_seconds: if tc.log_wall_time { t0.elapsed().as_secs_f64() } else { 0.0 },
    })
}

/// Runs epochs `state.epochs_done+1 ..= tc.epochs`, invoking `on_record`
/// after each. Ranking metrics follow `eval_every` with carry-forward.
pub fn fit(
    state: &mut TrainState,
    data: &TrainData,
    tc: &TrainConfig,
    uc: &UniformityConfig,
    mut on_record: impl FnMut(&TrainLogRecord) -> Result<()>,
) -> Result<Vec<TrainLogRecord>> {
    tc.validate()?;
    uc.validate()?;
    data.validate()?;
    let mut records = Vec::new();
    let mut carried = (0.0, 0.0);
    while state.epochs_done < tc.epochs {
        let next = state.epochs_done + 1;
        let do_eval = next % tc.eval_every == 0 || next == tc.epochs;
        let mut rec = train_epoch(state, data, tc, uc, do_eval)?;
        if do_eval {
            carried = (rec.hr_at_20, rec.ndcg_at_20);
        } else {
            rec.hr_at_20 = carried.0;
            rec.ndcg_at_20 = carried.1;
        }
        on_record(&rec)?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_log_jsonl(records: &[TrainLogRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| UnitError::Data(format!("log serialization failed: {e}")))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| UnitError::io(path, e))?;
    f.write_all(&buf).map_err(|e| UnitError::io(path, e))
}

const CKPT_MAGIC: &[u8; 8] = b"UNITCKP1";

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let cfg = &state.backbone.cfg;
    buf.push(match cfg.kind {
        BackboneKind::Causal => 0,
        BackboneKind::Masked => 1,
    });
    for v in [cfg.d, cfg.max_len, cfg.n_blocks, cfg.n_heads] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.dropout.to_le_bytes());
    buf.extend_from_slice(&cfg.mask_rate.to_le_bytes());
    buf.extend_from_slice(&(state.mlp.input_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(state.mlp.layer_dims.len() as u32).to_le_bytes());
    for &d in &state.mlp.layer_dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&(state.epochs_done as u64).to_le_bytes());
    buf.extend_from_slice(&state.store.step.to_le_bytes());
    buf.extend_from_slice(&(state.store.len() as u32).to_le_bytes());
    for param in state.store.params() {
        buf.extend_from_slice(&(param.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(param.name.as_bytes());
        buf.extend_from_slice(&(param.value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(param.value.ncols() as u32).to_le_bytes());
        for arr in [&param.value, &param.m, &param.v] {
            for &x in arr.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    std::fs::write(path, buf).map_err(|e| UnitError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| UnitError::io(path, e))?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(UnitError::format(
                path,
                format!("truncated checkpoint: need {n} more bytes for {what}, have {}", cur.len()),
            ));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
    let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().unwrap());

    if take(8, "magic")? != CKPT_MAGIC {
        return Err(UnitError::format(path, "bad magic: not a UNITCKP1 checkpoint"));
    }
    let kind = match take(1, "backbone kind")?[0] {
        0 => BackboneKind::Causal,
        1 => BackboneKind::Masked,
        other => {
            return Err(UnitError::format(path, format!("unknown backbone kind tag {other}")))
        }
    };
    let d = u32_at(take(4, "d")?);
    let max_len = u32_at(take(4, "max_len")?);
    let n_blocks = u32_at(take(4, "n_blocks")?);
    let n_heads = u32_at(take(4, "n_heads")?);
    let dropout = f64_at(take(8, "dropout")?);
    let mask_rate = f64_at(take(8, "mask_rate")?);
    let input_dim = u32_at(take(4, "input_dim")?);
    let n_layers = u32_at(take(4, "layer count")?);
    let mut layer_dims = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layer_dims.push(u32_at(take(4, "layer dim")?));
    }
    let epochs_done = u64_at(take(8, "epochs_done")?) as usize;
    let step = u64_at(take(8, "optimizer step")?);

    let cfg = BackboneConfig { kind, d, max_len, n_blocks, n_heads, dropout, mask_rate };
    let mut state = TrainState::new(0, input_dim, &layer_dims, cfg)?;
    state.epochs_done = epochs_done;
    state.store.step = step;

    let by_name: HashMap<String, usize> = state
        .store
        .params()
        .iter()
        .enumerate()
        .map(|(i, p)| (p.name.clone(), i))
        .collect();
    let n_params = u32_at(take(4, "parameter count")?);
    if n_params != state.store.len() {
        return Err(UnitError::format(
            path,
            format!(
                "checkpoint holds {n_params} parameters but the header configuration \
                 (d={d}, n_blocks={n_blocks}, layer_dims={layer_dims:?}) implies {}",
                state.store.len()
            ),
        ));
    }
    let mut seen = vec![false; state.store.len()];
    for _ in 0..n_params {
        let name_len = u32_at(take(4, "parameter name length")?);
        let name = String::from_utf8(take(name_len, "parameter name")?.to_vec())
            .map_err(|_| UnitError::format(path, "parameter name is not UTF-8"))?;
        let rows = u32_at(take(4, "parameter rows")?);
        let cols = u32_at(take(4, "parameter cols")?);
        let &idx = by_name.get(&name).ok_or_else(|| {
            UnitError::format(path, format!("unexpected parameter '{name}'"))
        })?;
        if seen[idx] {
            return Err(UnitError::format(path, format!("duplicate parameter '{name}'")));
        }
        seen[idx] = true;
        let expected = state.store.params()[idx].value.dim();
        if (rows, cols) != expected {
            return Err(UnitError::format(
                path,
                format!(
                    "parameter '{name}' has shape {rows}x{cols} but the header \
                     (d={d}, max_len={max_len}, layer_dims={layer_dims:?}) implies {}x{}",
                    expected.0, expected.1
                ),
            ));
        }
        let mut arrays = Vec::with_capacity(3);
        for what in ["values", "first moments", "second moments"] {
            let raw = take(rows * cols * 8, what)?;
            let mut a = Array2::zeros((rows, cols));
            for (k, chunk) in raw.chunks_exact(8).enumerate() {
                a[(k / cols.max(1), k % cols.max(1))] = f64_at(chunk);
            }
            arrays.push(a);
        }
        let param = &mut state.store.params_mut()[idx];
        param.v = arrays.pop().unwrap();
        param.m = arrays.pop().unwrap();
        param.value = arrays.pop().unwrap();
    }
    if !cur.is_empty() {
        return Err(UnitError::format(
            path,
            format!("trailing bytes: {} unread after the last parameter", cur.len()),
        ));
    }
    Ok(state)
}
