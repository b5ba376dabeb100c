//! Python bindings: the uniformity losses, the evaluation helpers, and a
//! one-call synthetic experiment driver. Matrix arguments are plain nested
//! lists; every library error surfaces as ValueError.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use unit_rec::backbone::BackboneKind;
use unit_rec::experiment::{
    load_train_data, run_encode, run_ingest, ExperimentConfig, ModelSection,
};
use unit_rec::synth::SynthConfig;
use unit_rec::train::{fit, TrainConfig, TrainLogRecord, TrainState};
use unit_rec::uniformity::{Strategy, UniformityConfig};
use unit_rec::UnitError;

fn to_py(e: UnitError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{what} must be non-empty")));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err(format!("{what} rows have unequal lengths")));
    }
    let mut a = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            a[(i, j)] = v;
        }
    }
    Ok(a)
}

fn parse_strategy(name: &str) -> PyResult<Strategy> {
    match name {
        "none" => Ok(Strategy::None),
        "general" => Ok(Strategy::General),
        "seq" => Ok(Strategy::Seq),
        "pop" => Ok(Strategy::Pop),
        other => Err(PyValueError::new_err(format!(
            "unknown strategy '{other}' (expected none, general, seq, or pop)"
        ))),
    }
}

/// Feature-hashed unit-norm embedding of one text.
#[pyfunction]
fn hash_encode(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f32>> {
    unit_rec::encoder::hash_encode(text, dim, seed).map_err(to_py)
}

/// Squared Euclidean distance between two equal-length vectors.
#[pyfunction]
fn distance_sq(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    unit_rec::uniformity::distance_sq(&a, &b).map_err(to_py)
}

/// General uniformity loss over all unordered row pairs.
#[pyfunction]
fn loss_general(reps: Vec<Vec<f64>>, t: f64) -> PyResult<f64> {
    let m = matrix(reps, "reps")?;
    unit_rec::uniformity::loss_general(&m.view(), t).map_err(to_py)
}

/// Sequence-aware uniformity loss; `spans` lists row indices per user.
#[pyfunction]
fn loss_seq(reps: Vec<Vec<f64>>, spans: Vec<Vec<usize>>, t: f64, lambda: f64) -> PyResult<f64> {
    let m = matrix(reps, "reps")?;
    let n = m.nrows();
    let mut per_user = Vec::new();
    for span in spans.iter().filter(|s| s.len() >= 2) {
        if let Some(&bad) = span.iter().find(|&&i| i >= n) {
            return Err(PyValueError::new_err(format!(
                "span index {bad} out of range for {n} rows"
            )));
        }
        let mut a = Array2::zeros((span.len(), m.ncols()));
        for (r, &i) in span.iter().enumerate() {
            a.row_mut(r).assign(&m.row(i));
        }
        per_user.push(a);
    }
    unit_rec::uniformity::loss_seq(&m.view(), &per_user, t, lambda).map_err(to_py)
}

/// Popularity-weighted uniformity loss; `p` holds one weight per row.
#[pyfunction]
fn loss_pop(reps: Vec<Vec<f64>>, p: Vec<f64>, t: f64) -> PyResult<f64> {
    let m = matrix(reps, "reps")?;
    unit_rec::uniformity::loss_pop(&m.view(), &p, t).map_err(to_py)
}

/// Sampled uniformity diagnostic over an item table (lower = more uniform).
#[pyfunction]
fn uniformity_metric(
    reps: Vec<Vec<f64>>,
    sample_size: usize,
    t: f64,
    seed: u64,
) -> PyResult<f64> {
    let m = matrix(reps, "reps")?;
    unit_rec::uniformity::uniformity_metric(&m.view(), sample_size, t, seed).map_err(to_py)
}

/// Summed BCE recommendation loss from positive and negative pair scores.
#[pyfunction]
fn rec_loss(positive_scores: Vec<f64>, negative_scores: Vec<f64>) -> PyResult<f64> {
    unit_rec::train::rec_loss(&positive_scores, &negative_scores).map_err(to_py)
}

/// 1-based full-catalog rank of `target` given a user's hidden state.
#[pyfunction]
fn rank_of_target(
    hidden: Vec<f64>,
    table: Vec<Vec<f64>>,
    exclude: Vec<usize>,
    target: usize,
) -> PyResult<usize> {
    let m = matrix(table, "table")?;
    let ex = exclude.into_iter().collect();
    unit_rec::eval::rank_of_target(&hidden, &m.view(), &ex, target).map_err(to_py)
}

/// Hit rate at k over 1-based per-user ranks.
#[pyfunction]
fn hr_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    unit_rec::eval::hr_at_k(&ranks, k).map_err(to_py)
}

/// NDCG at k over 1-based per-user ranks.
#[pyfunction]
fn ndcg_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    unit_rec::eval::ndcg_at_k(&ranks, k).map_err(to_py)
}

/// (global, intra, ratio) mean pairwise distances for an item table and
/// per-user item-index sequences.
#[pyfunction]
fn intra_sequence_ratio(
    table: Vec<Vec<f64>>,
    sequences: Vec<Vec<usize>>,
    max_pairs_per_scope: usize,
    seed: u64,
) -> PyResult<(f64, f64, f64)> {
    let m = matrix(table, "table")?;
    unit_rec::analysis::intra_sequence_ratio(&m.view(), &sequences, max_pairs_per_scope, seed)
        .map_err(to_py)
}

/// Generate a synthetic corpus, train, and evaluate in one call. Returns a
/// dict with the final HR/NDCG, the final uniformity metric, and the
/// per-epoch log. Artifacts persist only when `out` is given.
#[pyfunction]
#[pyo3(signature = (
    users = 120,
    items = 60,
    topics = 6,
    epochs = 3,
    gamma = 0.03,
    strategy = "general",
    seed = 7,
    dim = 32,
    d = 16,
    out = None,
))]
#[allow(clippy::too_many_arguments)]
fn run_synthetic_experiment<'py>(
    py: Python<'py>,
    users: usize,
    items: usize,
    topics: usize,
    epochs: usize,
    gamma: f64,
    strategy: &str,
    seed: u64,
    dim: usize,
    d: usize,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyDict>> {
    let strategy = parse_strategy(strategy)?;
    let tmp;
    let out_dir = match &out {
        Some(p) => p.clone(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| PyValueError::new_err(e.to_string()))?;
            tmp.path().to_path_buf()
        }
    };

    let mut cfg = ExperimentConfig::default();
    cfg.out = out_dir;
    cfg.dataset.synth = SynthConfig { users, items, topics, seed, ..SynthConfig::default() };
    cfg.encoder.dim = dim;
    cfg.model = ModelSection {
        kind: BackboneKind::Causal,
        d,
        max_len: 16,
        n_blocks: 1,
        n_heads: 2,
        layer_dims: vec![dim.max(d), d],
        ..ModelSection::default()
    };
    cfg.train = TrainConfig {
        epochs,
        batch_size: 32,
        learning_rate: 0.01,
        seed,
        log_wall_time: false,
        ..TrainConfig::default()
    };
    cfg.uniformity = UniformityConfig { strategy, gamma, ..UniformityConfig::default() };
    cfg.validate().map_err(to_py)?;

    run_ingest(&cfg).map_err(to_py)?;
    run_encode(&cfg).map_err(to_py)?;
    let data = load_train_data(&cfg).map_err(to_py)?;
    let mut state = TrainState::new(
        cfg.train.seed,
        data.cache.dim,
        &cfg.model.layer_dims,
        cfg.model.backbone(),
    )
    .map_err(to_py)?;
    let records = fit(&mut state, &data, &cfg.train, &cfg.uniformity, |_| Ok(()))
        .map_err(to_py)?;

    let result = PyDict::new(py);
    let last = records.last().expect("epochs >= 1 is enforced by validate");
    result.set_item("hr_at_20", last.hr_at_20)?;
    result.set_item("ndcg_at_20", last.ndcg_at_20)?;
    result.set_item("uniformity_metric", last.uniformity_metric)?;
    let log: Vec<Bound<'py, PyDict>> = records
        .iter()
        .map(|r: &TrainLogRecord| -> PyResult<Bound<'py, PyDict>> {
            let row = PyDict::new(py);
            row.set_item("epoch", r.epoch)?;
            row.set_item("rec_loss", r.rec_loss)?;
            row.set_item("uni_loss", r.uni_loss)?;
            row.set_item("total_loss", r.total_loss)?;
            row.set_item("hr_at_20", r.hr_at_20)?;
            row.set_item("ndcg_at_20", r.ndcg_at_20)?;
            row.set_item("uniformity_metric", r.uniformity_metric)?;
            Ok(row)
        })
        .collect::<PyResult<_>>()?;
    result.set_item("log", log)?;
    result.set_item("out", out.map(|p| p.display().to_string()))?;
    Ok(result)
}

#[pymodule]
fn unit_rec_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(hash_encode, m)?)?;
    m.add_function(wrap_pyfunction!(distance_sq, m)?)?;
    m.add_function(wrap_pyfunction!(loss_general, m)?)?;
    m.add_function(wrap_pyfunction!(loss_seq, m)?)?;
    m.add_function(wrap_pyfunction!(loss_pop, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity_metric, m)?)?;
    m.add_function(wrap_pyfunction!(rec_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rank_of_target, m)?)?;
    m.add_function(wrap_pyfunction!(hr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(intra_sequence_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(run_synthetic_experiment, m)?)?;
    Ok(())
}
