//! Projection MLP from frozen text embeddings to item representations.
//!
//! This is the only trained mapping applied to text vectors: weights are
//! He-uniform (bound sqrt(6/fan_in)) and biases start at zero. ReLU sits
//! between layers but not after the last, so representations keep sign
//! information for the dot-product scorer.

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::autodiff::{Graph, NodeId};
use crate::encoder::EmbeddingCache;
use crate::error::{Result, UnitError};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct ProjectionMlp {
    pub input_dim: usize,
    pub layer_dims: Vec<usize>,
    weights: Vec<ParamId>,
    biases: Vec<ParamId>,
}

/// Per-graph bound nodes for the MLP parameters.
pub struct MlpNodes {
    weights: Vec<NodeId>,
    biases: Vec<NodeId>,
}

pub fn init_projection(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    input_dim: usize,
    layer_dims: &[usize],
) -> Result<ProjectionMlp> {
    if input_dim == 0 {
        return Err(UnitError::Usage("projection input_dim must be > 0".into()));
    }
    if layer_dims.is_empty() {
        return Err(UnitError::Usage("projection layer_dims must not be empty".into()));
    }
    if let Some(&bad) = layer_dims.iter().find(|&&d| d == 0) {
        return Err(UnitError::Usage(format!("projection layer dim must be > 0, got {bad}")));
    }
    let mut weights = Vec::with_capacity(layer_dims.len());
    let mut biases = Vec::with_capacity(layer_dims.len());
    let mut fan_in = input_dim;
    for (l, &out) in layer_dims.iter().enumerate() {
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, out), |_| rng.random_range(-bound..bound));
        weights.push(store.add(&format!("mlp.w{l}"), w));
        biases.push(store.add(&format!("mlp.b{l}"), Array2::zeros((1, out))));
        fan_in = out;
    }
    Ok(ProjectionMlp {
        input_dim,
        layer_dims: layer_dims.to_vec(),
        weights,
        biases,
    })
}

impl ProjectionMlp {
    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("layer_dims is never empty")
    }

    /// Binds every parameter as a grad-tracked leaf in `g`.
    pub fn bind(&self, g: &mut Graph, store: &ParamStore) -> MlpNodes {
        MlpNodes {
            weights: self.weights.iter().map(|&id| store.bind(g, id)).collect(),
            biases: self.biases.iter().map(|&id| store.bind(g, id)).collect(),
        }
    }

    /// Binds parameters as constants; used for evaluation-only forwards.
    pub fn bind_frozen(&self, g: &mut Graph, store: &ParamStore) -> MlpNodes {
        let bind = |g: &mut Graph, id: ParamId| {
            let v = store.value(id).clone();
            g.constant(v)
        };
        MlpNodes {
            weights: self.weights.iter().map(|&id| bind(g, id)).collect(),
            biases: self.biases.iter().map(|&id| bind(g, id)).collect(),
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.weights.iter().chain(self.biases.iter()).copied()
    }

    /// (ParamId, bound NodeId) pairs in `param_ids()` order.
    pub fn bound_params(&self, nodes: &MlpNodes) -> Vec<(ParamId, NodeId)> {
        self.param_ids()
            .zip(nodes.weights.iter().chain(nodes.biases.iter()).copied())
            .collect()
    }

    /// Graph forward: x (rows × input_dim) to representations (rows × d_out).
    pub fn project_node(&self, g: &mut Graph, nodes: &MlpNodes, x: NodeId) -> NodeId {
        let mut h = x;
        let last = self.weights.len() - 1;
        for l in 0..self.weights.len() {
            h = g.matmul(h, nodes.weights[l]);
            h = g.add_bias_row(h, nodes.biases[l]);
            if l != last {
                h = g.relu(h);
            }
        }
        h
    }

    /// Value-level forward with no gradient bookkeeping.
    pub fn project(&self, store: &ParamStore, vectors: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if vectors.ncols() != self.input_dim {
            return Err(UnitError::Usage(format!(
                "projection expects width {}, got {}",
                self.input_dim,
                vectors.ncols()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(vectors.to_owned());
        let nodes = self.bind_frozen(&mut g, store);
        let out = self.project_node(&mut g, &nodes, x);
        Ok(g.value(out).clone())
    }
}

/// Projects the cached text embeddings of `indices` through the MLP.
pub fn materialize_item_reps(
    mlp: &ProjectionMlp,
    store: &ParamStore,
    cache: &EmbeddingCache,
    indices: &[usize],
) -> Result<Array2<f64>> {
    let x = gather_cache_rows(mlp, cache, indices)?;
    mlp.project(store, &x.view())
}

/// Pulls cache rows (f32) into the f64 matrix the projection consumes.
pub fn gather_cache_rows(
    mlp: &ProjectionMlp,
    cache: &EmbeddingCache,
    indices: &[usize],
) -> Result<Array2<f64>> {
    if cache.dim != mlp.input_dim {
        return Err(UnitError::Usage(format!(
            "cache dim {} does not match projection input_dim {}",
            cache.dim, mlp.input_dim
        )));
    }
    let mut x = Array2::zeros((indices.len(), cache.dim));
    for (r, &i) in indices.iter().enumerate() {
        if i >= cache.n_items() {
            return Err(UnitError::Usage(format!(
                "item index {i} out of range for cache of {} items",
                cache.n_items()
            )));
        }
        for c in 0..cache.dim {
            x[(r, c)] = cache.matrix[(i, c)] as f64;
        }
    }
    Ok(x)
}
