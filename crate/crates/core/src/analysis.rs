//! Geometry diagnostics over a frozen item-representation table: the
//! intra-sequence distance ratio, the popular/cold distance split, and a
//! PCA-projected KDE grid export. All statistics use unsquared Euclidean
//! distance and are bit-reproducible given (seed, budget).

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UnitError};
use crate::rng::{stream, STREAM_ANALYSIS};

/// Pair-sampling cap per statistic scope; exact enumeration below it.
pub const DEFAULT_PAIR_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryReport {
    pub mean_global_distance: f64,
    pub mean_intra_sequence_distance: f64,
    pub ratio: f64,
    pub distance_pop: f64,
    pub distance_cold: f64,
    pub pop_fraction: f64,
}

fn row_distance(table: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    table
        .row(i)
        .iter()
        .zip(table.row(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance over the catalog's unordered pairs: exact when the pair
/// count fits the budget, otherwise `budget` uniform redraws.
fn mean_global(
    table: &ArrayView2<f64>,
    budget: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> f64 {
    let n = table.nrows();
    let total = n * (n - 1) / 2;
    if total <= budget {
        let mut sum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                sum += row_distance(table, i, j);
            }
        }
        return sum / total as f64;
    }
    let mut sum = 0.0;
    for _ in 0..budget {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        sum += row_distance(table, i, j);
    }
    sum / budget as f64
}

/// Mean within-group distance for an explicit member list, same
/// exact-or-sampled rule as [`mean_global`].
fn mean_within(
    table: &ArrayView2<f64>,
    members: &[usize],
    budget: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> f64 {
    let k = members.len();
    debug_assert!(k >= 2);
    let total = k * (k - 1) / 2;
    if total <= budget {
        let mut sum = 0.0;
        for a in 0..k {
            for b in a + 1..k {
                sum += row_distance(table, members[a], members[b]);
            }
        }
        return sum / total as f64;
    }
    let mut sum = 0.0;
    for _ in 0..budget {
        let a = rng.random_range(0..k);
        let mut b = rng.random_range(0..k - 1);
        if b >= a {
            b += 1;
        }
        sum += row_distance(table, members[a], members[b]);
    }
    sum / budget as f64
}

/// Mean catalog distance, mean within-sequence distance, and their ratio.
/// Sequences shorter than 2 contribute nothing; at least one must be longer.
/// Over-budget intra scopes sample pairs weighted by each sequence's pair
/// count, matching the exact enumeration's weighting.
pub fn intra_sequence_ratio(
    item_table: &ArrayView2<f64>,
    sequences: &[Vec<usize>],
    max_pairs_per_scope: usize,
    seed: u64,
) -> Result<(f64, f64, f64)> {
    let n = item_table.nrows();
    if n < 2 {
        return Err(UnitError::Usage(format!("need at least 2 items, got {n}")));
    }
    if max_pairs_per_scope == 0 {
        return Err(UnitError::Usage("max_pairs_per_scope must be >= 1".into()));
    }
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&i| i >= n) {
            return Err(UnitError::Usage(format!("sequence item {bad} outside {n}-item table")));
        }
    }
    let valid: Vec<&Vec<usize>> = sequences.iter().filter(|s| s.len() >= 2).collect();
    let pair_counts: Vec<usize> = valid.iter().map(|s| s.len() * (s.len() - 1) / 2).collect();
    let total_intra: usize = pair_counts.iter().sum();
    if total_intra == 0 {
        return Err(UnitError::Usage("no valid sequence pairs: every sequence has < 2 items".into()));
    }

    let mut rng = stream(seed, &[STREAM_ANALYSIS]);
    let global = mean_global(item_table, max_pairs_per_scope, &mut rng);

    let intra = if total_intra <= max_pairs_per_scope {
        let mut sum = 0.0;
        for seq in &valid {
            for a in 0..seq.len() {
                for b in a + 1..seq.len() {
                    sum += row_distance(item_table, seq[a], seq[b]);
                }
            }
        }
        sum / total_intra as f64
    } else {
        let mut cum = Vec::with_capacity(pair_counts.len());
        let mut acc = 0usize;
        for &c in &pair_counts {
            acc += c;
            cum.push(acc);
        }
        let mut sum = 0.0;
        for _ in 0..max_pairs_per_scope {
            let r = rng.random_range(0..total_intra);
            let s = cum.partition_point(|&c| c <= r);
            let seq = valid[s];
            let a = rng.random_range(0..seq.len());
            let mut b = rng.random_range(0..seq.len() - 1);
            if b >= a {
                b += 1;
            }
            sum += row_distance(item_table, seq[a], seq[b]);
        }
        sum / max_pairs_per_scope as f64
    };

    if !(global > 0.0) {
        return Err(UnitError::Numeric(
            "global mean distance is zero; the ratio is undefined".into(),
        ));
    }
    Ok((global, intra, intra / global))
}

/// Splits the catalog at the top ⌈pop_fraction·n⌉ items by count (ties break
/// toward the lower index) and returns each group's mean pairwise distance.
pub fn popularity_distance_split(
    item_table: &ArrayView2<f64>,
    popularity_counts: &[u64],
    pop_fraction: f64,
    budget: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = item_table.nrows();
    if popularity_counts.len() != n {
        return Err(UnitError::Usage(format!(
            "{} popularity counts for {n} items",
            popularity_counts.len()
        )));
    }
    if !(pop_fraction > 0.0 && pop_fraction < 1.0) {
        return Err(UnitError::Usage(format!(
            "pop_fraction must be in (0, 1), got {pop_fraction}"
        )));
    }
    if budget == 0 {
        return Err(UnitError::Usage("pair budget must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| popularity_counts[b].cmp(&popularity_counts[a]).then(a.cmp(&b)));
    let m = (pop_fraction * n as f64).ceil() as usize;
    let (popular, cold) = order.split_at(m.min(n));
    if popular.len() < 2 || cold.len() < 2 {
        return Err(UnitError::Usage(format!(
            "split {m}/{} leaves a group with < 2 items",
            n - m.min(n)
        )));
    }
    let mut rng = stream(seed, &[STREAM_ANALYSIS, 1]);
    let d_pop = mean_within(item_table, popular, budget, &mut rng);
    let d_cold = mean_within(item_table, cold, budget, &mut rng);
    Ok((d_pop, d_cold))
}

pub fn geometry_report(
    item_table: &ArrayView2<f64>,
    sequences: &[Vec<usize>],
    popularity_counts: &[u64],
    pop_fraction: f64,
    budget: usize,
    seed: u64,
) -> Result<GeometryReport> {
    let (global, intra, ratio) = intra_sequence_ratio(item_table, sequences, budget, seed)?;
    let (d_pop, d_cold) =
        popularity_distance_split(item_table, popularity_counts, pop_fraction, budget, seed)?;
    Ok(GeometryReport {
        mean_global_distance: global,
        mean_intra_sequence_distance: intra,
        ratio,
        distance_pop: d_pop,
        distance_cold: d_cold,
        pop_fraction,
    })
}

/// Centered projection onto the top-2 principal directions. Each direction's
/// first nonzero coordinate is made positive so the output is deterministic
/// up to that convention.
pub fn project_2d(item_table: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (n, d) = item_table.dim();
    if n < 3 {
        return Err(UnitError::Usage(format!("need at least 3 items to project, got {n}")));
    }
    if d < 2 {
        return Err(UnitError::Usage(format!("need at least 2 dimensions, got {d}")));
    }
    let mean = item_table.mean_axis(ndarray::Axis(0)).unwrap();
    let centered = item_table - &mean;

    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for r in 0..d {
        for c in r..d {
            let v = centered.column(r).dot(&centered.column(c)) / n as f64;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[idx[0]], eig.eigenvalues[idx[1]]);
    if !(l1 > 0.0) || l2 <= l1 * 1e-12 {
        return Err(UnitError::Numeric(format!(
            "table has rank < 2 (top eigenvalues {l1:.3e}, {l2:.3e}); nothing to project"
        )));
    }

    let mut out = Array2::zeros((n, 2));
    for (col, &ei) in idx[..2].iter().enumerate() {
        let mut dir: Vec<f64> = eig.eigenvectors.column(ei).iter().copied().collect();
        if let Some(&first) = dir.iter().find(|x| x.abs() > 1e-12) {
            if first < 0.0 {
                for x in &mut dir {
                    *x = -*x;
                }
            }
        }
        for i in 0..n {
            out[(i, col)] = centered.row(i).iter().zip(&dir).map(|(a, b)| a * b).sum();
        }
    }
    Ok(out)
}

/// Rows scaled to unit norm; exact-zero rows stay at the origin.
pub fn unit_normalize_rows(points: &mut Array2<f64>) {
    for mut row in points.rows_mut() {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|x| x / norm);
        }
    }
}

pub const KDE_GRID_MIN: f64 = -1.2;
pub const KDE_GRID_MAX: f64 = 1.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeExport {
    pub points: Vec<[f64; 2]>,
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid: Vec<Vec<f64>>,
    pub bandwidth: f64,
}

/// Gaussian KDE evaluated at cell centers of a `grid_size`² grid over
/// [−1.2, 1.2]²: density(g) = Σ_p exp(−‖g−p‖² / 2h²) / (n·2πh²). Grid rows
/// run over y ascending, columns over x ascending.
pub fn kde_grid(points: &[[f64; 2]], grid_size: usize, bandwidth: f64) -> Result<Vec<Vec<f64>>> {
    if points.is_empty() {
        return Err(UnitError::Usage("KDE needs at least one point".into()));
    }
    if grid_size < 16 {
        return Err(UnitError::Usage(format!("grid_size must be >= 16, got {grid_size}")));
    }
    if !(bandwidth > 0.0) {
        return Err(UnitError::Usage(format!("bandwidth must be > 0, got {bandwidth}")));
    }
    let cell = (KDE_GRID_MAX - KDE_GRID_MIN) / grid_size as f64;
    let norm = 1.0 / (points.len() as f64 * 2.0 * std::f64::consts::PI * bandwidth * bandwidth);
    let inv2h2 = 1.0 / (2.0 * bandwidth * bandwidth);
    let mut grid = vec![vec![0.0; grid_size]; grid_size];
    for (gy, row) in grid.iter_mut().enumerate() {
        let y = KDE_GRID_MIN + (gy as f64 + 0.5) * cell;
        for (gx, out) in row.iter_mut().enumerate() {
            let x = KDE_GRID_MIN + (gx as f64 + 0.5) * cell;
            let mut acc = 0.0;
            for p in points {
                let dx = x - p[0];
                let dy = y - p[1];
                acc += (-(dx * dx + dy * dy) * inv2h2).exp();
            }
            *out = acc * norm;
        }
    }
    Ok(grid)
}

/// PCA projection → unit normalization → KDE grid, written as one JSON file.
pub fn project_2d_kde_export(
    item_table: &ArrayView2<f64>,
    grid_size: usize,
    bandwidth: f64,
    out_path: &Path,
) -> Result<KdeExport> {
    let mut projected = project_2d(item_table)?;
    unit_normalize_rows(&mut projected);
    let points: Vec<[f64; 2]> =
        projected.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let grid = kde_grid(&points, grid_size, bandwidth)?;
    let export =
        KdeExport { points, grid_min: KDE_GRID_MIN, grid_max: KDE_GRID_MAX, grid, bandwidth };
    let json = serde_json::to_vec(&export)
        .map_err(|e| UnitError::Data(format!("KDE export serialization failed: {e}")))?;
    std::fs::write(out_path, json).map_err(|e| UnitError::io(out_path, e))?;
    Ok(export)
}
