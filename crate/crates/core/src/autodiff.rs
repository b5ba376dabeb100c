//! Tape-based reverse-mode differentiation over `f64` matrices.
//!
//! A [`Graph`] is a one-shot tape: builder methods append nodes eagerly
//! (forward values computed at construction), [`Graph::backward`] walks the
//! tape once in reverse. Coarse fused nodes (attention, layer norm, the
//! pairwise log-mean-exp loss, the BCE ranking loss) carry hand-derived
//! backward passes; every backward in this module is pinned by
//! finite-difference tests.
//!
//! Shape violations are programmer errors and panic; public operations in
//! higher modules validate inputs and return `Result` before building graphs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Contiguous block of rows belonging to one sequence inside a flattened
/// (B·L, d) activation matrix. Rows outside every window are padding.
#[derive(Debug, Clone, Copy)]
pub struct SeqWindow {
    pub start: usize,
    pub len: usize,
}

struct LayerNormOp {
    x: NodeId,
    gain: NodeId,
    shift: NodeId,
    inv_std: Array1<f64>,
    normed: Array2<f64>,
}

struct AttnSaved {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

struct AttentionOp {
    x: NodeId,
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    wo: NodeId,
    n_heads: usize,
    windows: Vec<SeqWindow>,
    saved: Vec<AttnSaved>,
}

struct PairwiseLmeOp {
    reps: NodeId,
    t: f64,
    log_p: Option<Vec<f64>>,
    lse: f64,
}

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// a + c·b
    AddScaled(NodeId, NodeId, f64),
    AddBiasRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm(Box<LayerNormOp>),
    GatherRows(NodeId, Vec<usize>),
    ScaleRows(NodeId, Vec<f64>),
    /// out = x with out[r] = row for r in targets
    OverwriteRows {
        x: NodeId,
        row: NodeId,
        targets: Vec<usize>,
    },
    /// Element mask holding 0.0 or 1/(1−rate)
    Dropout(NodeId, Array2<f64>),
    Attention(Box<AttentionOp>),
    /// out[p] = ⟨h[pairs[p].0], r[pairs[p].1]⟩
    PairDot {
        h: NodeId,
        r: NodeId,
        pairs: Vec<(usize, usize)>,
    },
    /// Σ softplus(−pos) + softplus(neg)
    BceSum(NodeId, NodeId),
    PairwiseLme(PairwiseLmeOp),
    MeanScalars(Vec<NodeId>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Stable log-mean-exp over all unordered pairs of rows:
/// returns (LSE(a) − ln P, LSE(a)) with a_{jm} = −t·‖e_j−e_m‖² − (lp_j + lp_m).
/// Shared by the value-level losses and the graph node so reduction
/// identities hold bit-for-bit.
pub(crate) fn pairwise_lme_forward(
    reps: &ArrayView2<f64>,
    t: f64,
    log_p: Option<&[f64]>,
) -> (f64, f64) {
    let owned = reps.as_standard_layout();
    let n = owned.nrows();
    let d = owned.ncols();
    debug_assert!(n >= 2);
    let flat = owned.as_slice().expect("standard layout");
    let row = |i: usize| &flat[i * d..(i + 1) * d];

    let a_at = |j: usize, m: usize| -> f64 {
        let (rj, rm) = (row(j), row(m));
        let mut d2 = 0.0;
        for c in 0..d {
            let diff = rj[c] - rm[c];
            d2 += diff * diff;
        }
        let mut a = -t * d2;
        if let Some(lp) = log_p {
            a -= lp[j] + lp[m];
        }
        a
    };

    let mut max_a = f64::NEG_INFINITY;
    for j in 0..n {
        for m in (j + 1)..n {
            max_a = max_a.max(a_at(j, m));
        }
    }
    let mut sum = 0.0;
    for j in 0..n {
        for m in (j + 1)..n {
            sum += (a_at(j, m) - max_a).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    let lse = max_a + sum.ln();
    (lse - pairs.ln(), lse)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "scalar() on non-scalar node");
        v[(0, 0)]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Array2<f64>> {
        self.nodes[id.0].grad.take()
    }

    pub fn leaf(&mut self, value: Array2<f64>, needs_grad: bool) -> NodeId {
        self.push(value, needs_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let value = av.dot(bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "add shapes");
            av + bv
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Add(a, b))
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let value = {
            let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
            assert_eq!(av.dim(), bv.dim(), "add_scaled shapes");
            av + &(bv * c)
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::AddScaled(a, b, c))
    }

    pub fn add_bias_row(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let value = {
            let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
            assert_eq!(bv.nrows(), 1, "bias must be a single row");
            assert_eq!(xv.ncols(), bv.ncols(), "bias width");
            xv + &bv.row(0)
        };
        let needs = self.needs(x) || self.needs(bias);
        self.push(value, needs, Op::AddBiasRow(x, bias))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = &self.nodes[x.0].value * c;
        let needs = self.needs(x);
        self.push(value, needs, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.nodes[x.0].value.mapv(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu(x))
    }

    /// Row-wise layer norm with trainable gain/shift (each 1×d).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId, eps: f64) -> NodeId {
        let (normed, inv_std, value) = {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gain.0].value;
            let sv = &self.nodes[shift.0].value;
            let d = xv.ncols();
            assert_eq!(gv.dim(), (1, d), "layer_norm gain shape");
            assert_eq!(sv.dim(), (1, d), "layer_norm shift shape");
            let mut normed = Array2::zeros(xv.raw_dim());
            let mut inv_std = Array1::zeros(xv.nrows());
            for (r, rowv) in xv.rows().into_iter().enumerate() {
                let mean = rowv.sum() / d as f64;
                let var = rowv.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for (c, &v) in rowv.iter().enumerate() {
                    normed[(r, c)] = (v - mean) * is;
                }
            }
            let value = &normed * &gv.row(0) + &sv.row(0);
            (normed, inv_std, value)
        };
        let needs = self.needs(x) || self.needs(gain) || self.needs(shift);
        self.push(
            value,
            needs,
            Op::LayerNorm(Box::new(LayerNormOp { x, gain, shift, inv_std, normed })),
        )
    }

    pub fn gather_rows(&mut self, src: NodeId, idx: Vec<usize>) -> NodeId {
        let value = {
            let sv = &self.nodes[src.0].value;
            let mut out = Array2::zeros((idx.len(), sv.ncols()));
            for (r, &i) in idx.iter().enumerate() {
                assert!(i < sv.nrows(), "gather index {i} out of range");
                out.row_mut(r).assign(&sv.row(i));
            }
            out
        };
        let needs = self.needs(src);
        self.push(value, needs, Op::GatherRows(src, idx))
    }

    pub fn scale_rows(&mut self, x: NodeId, weights: Vec<f64>) -> NodeId {
        let value = {
            let xv = &self.nodes[x.0].value;
            assert_eq!(weights.len(), xv.nrows(), "scale_rows weight count");
            let mut out = xv.clone();
            for (mut row, &w) in out.rows_mut().into_iter().zip(&weights) {
                row.mapv_inplace(|v| v * w);
            }
            out
        };
        let needs = self.needs(x);
        self.push(value, needs, Op::ScaleRows(x, weights))
    }

    pub fn overwrite_rows(&mut self, x: NodeId, row: NodeId, targets: Vec<usize>) -> NodeId {
        let value = {
            let xv = &self.nodes[x.0].value;
            let rv = &self.nodes[row.0].value;
            assert_eq!(rv.dim(), (1, xv.ncols()), "overwrite row shape");
            let mut out = xv.clone();
            for &r in &targets {
                assert!(r < out.nrows(), "overwrite target {r} out of range");
                out.row_mut(r).assign(&rv.row(0));
            }
            out
        };
        let needs = self.needs(x) || self.needs(row);
        self.push(value, needs, Op::OverwriteRows { x, row, targets })
    }

    /// Inverted dropout with a pre-drawn element mask. `rate == 0` is the
    /// identity and draws nothing from the stream.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut ChaCha12Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0,1)");
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let dim = self.nodes[x.0].value.raw_dim();
        let mut mask = Array2::zeros(dim);
        for v in mask.iter_mut() {
            *v = if rng.random::<f64>() < rate { 0.0 } else { keep };
        }
        let value = &self.nodes[x.0].value * &mask;
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout(x, mask))
    }

    /// Fused multi-head self-attention over per-sequence row windows of a
    /// flattened (B·L, d) input. Rows outside every window produce zeros and
    /// receive no gradient; with `causal` set, position i attends to j ≤ i.
    pub fn attention(
        &mut self,
        x: NodeId,
        wq: NodeId,
        wk: NodeId,
        wv: NodeId,
        wo: NodeId,
        n_heads: usize,
        windows: Vec<SeqWindow>,
        causal: bool,
    ) -> NodeId {
        let (value, saved) = {
            let xv = &self.nodes[x.0].value;
            let d = xv.ncols();
            assert_eq!(self.nodes[wq.0].value.dim(), (d, d), "wq shape");
            assert_eq!(self.nodes[wk.0].value.dim(), (d, d), "wk shape");
            assert_eq!(self.nodes[wv.0].value.dim(), (d, d), "wv shape");
            assert_eq!(self.nodes[wo.0].value.dim(), (d, d), "wo shape");
            assert!(n_heads >= 1 && d % n_heads == 0, "d divisible by n_heads");
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();

            let mut out = Array2::zeros(xv.raw_dim());
            let mut saved = Vec::with_capacity(windows.len());
            for w in &windows {
                assert!(w.len >= 1 && w.start + w.len <= xv.nrows(), "window out of range");
                let xb = xv.slice(s![w.start..w.start + w.len, ..]);
                let q = xb.dot(&self.nodes[wq.0].value);
                let k = xb.dot(&self.nodes[wk.0].value);
                let v = xb.dot(&self.nodes[wv.0].value);
                let mut concat = Array2::zeros((w.len, d));
                let mut attn_heads = Vec::with_capacity(n_heads);
                for h in 0..n_heads {
                    let cols = s![.., h * dh..(h + 1) * dh];
                    let qh = q.slice(cols);
                    let kh = k.slice(cols);
                    let vh = v.slice(cols);
                    let mut scores = qh.dot(&kh.t()) * scale;
                    if causal {
                        for i in 0..w.len {
                            for j in (i + 1)..w.len {
                                scores[(i, j)] = f64::NEG_INFINITY;
                            }
                        }
                    }
                    for mut rowv in scores.rows_mut() {
                        let max = rowv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        rowv.mapv_inplace(|s| (s - max).exp());
                        let sum = rowv.sum();
                        rowv.mapv_inplace(|s| s / sum);
                    }
                    let oh = scores.dot(&vh);
                    concat.slice_mut(cols).assign(&oh);
                    attn_heads.push(scores);
                }
                let y = concat.dot(&self.nodes[wo.0].value);
                out.slice_mut(s![w.start..w.start + w.len, ..]).assign(&y);
                saved.push(AttnSaved { q, k, v, attn: attn_heads, concat });
            }
            (out, saved)
        };
        let needs = self.needs(x)
            || self.needs(wq)
            || self.needs(wk)
            || self.needs(wv)
            || self.needs(wo);
        self.push(
            value,
            needs,
            Op::Attention(Box::new(AttentionOp {
                x,
                wq,
                wk,
                wv,
                wo,
                n_heads,
                windows,
                saved,
            })),
        )
    }

    /// (P,1) column of dot products between h rows and r rows.
    pub fn pair_dot(&mut self, h: NodeId, r: NodeId, pairs: Vec<(usize, usize)>) -> NodeId {
        let value = {
            let hv = &self.nodes[h.0].value;
            let rv = &self.nodes[r.0].value;
            assert_eq!(hv.ncols(), rv.ncols(), "pair_dot widths");
            let mut out = Array2::zeros((pairs.len(), 1));
            for (p, &(hi, ri)) in pairs.iter().enumerate() {
                assert!(hi < hv.nrows() && ri < rv.nrows(), "pair_dot index out of range");
                out[(p, 0)] = hv.row(hi).dot(&rv.row(ri));
            }
            out
        };
        let needs = self.needs(h) || self.needs(r);
        self.push(value, needs, Op::PairDot { h, r, pairs })
    }

    /// Σ_i softplus(−pos_i) + softplus(neg_i), the stable form of
    /// −Σ log σ(pos) + log(1−σ(neg)). Inputs are (P,1) columns.
    pub fn bce_sum(&mut self, pos: NodeId, neg: NodeId) -> NodeId {
        let value = {
            let pv = &self.nodes[pos.0].value;
            let nv = &self.nodes[neg.0].value;
            assert_eq!(pv.dim(), nv.dim(), "bce score shapes");
            assert_eq!(pv.ncols(), 1, "bce expects column vectors");
            let total: f64 = pv
                .iter()
                .zip(nv.iter())
                .map(|(&p, &n)| softplus(-p) + softplus(n))
                .sum();
            Array2::from_elem((1, 1), total)
        };
        let needs = self.needs(pos) || self.needs(neg);
        self.push(value, needs, Op::BceSum(pos, neg))
    }

    /// Log-mean-exp of exp(−t·D² − lp_j − lp_m) over unordered row pairs.
    pub fn pairwise_log_mean_exp(
        &mut self,
        reps: NodeId,
        t: f64,
        log_p: Option<Vec<f64>>,
    ) -> NodeId {
        let (value, lse) = {
            let rv = &self.nodes[reps.0].value;
            assert!(rv.nrows() >= 2, "pairwise loss needs >= 2 rows");
            if let Some(lp) = &log_p {
                assert_eq!(lp.len(), rv.nrows(), "log_p length");
            }
            pairwise_lme_forward(&rv.view(), t, log_p.as_deref())
        };
        let needs = self.needs(reps);
        self.push(
            Array2::from_elem((1, 1), value),
            needs,
            Op::PairwiseLme(PairwiseLmeOp { reps, t, log_p, lse }),
        )
    }

    /// Mean of (1,1) scalar nodes.
    pub fn mean_scalars(&mut self, parts: Vec<NodeId>) -> NodeId {
        assert!(!parts.is_empty(), "mean_scalars needs at least one part");
        let value = {
            let sum: f64 = parts.iter().map(|&p| self.scalar(p)).sum();
            Array2::from_elem((1, 1), sum / parts.len() as f64)
        };
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, needs, Op::MeanScalars(parts))
    }

    fn accumulate(&mut self, id: NodeId, delta: Array2<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        debug_assert_eq!(delta.raw_dim(), node.value.raw_dim());
        match &mut node.grad {
            Some(g) => *g += &delta,
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a (1,1) scalar node. Call once per graph.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=loss.0).rev() {
            self.backprop_node(i);
        }
    }

    fn backprop_node(&mut self, i: usize) {
        if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
            return;
        }
        let g = self.nodes[i].grad.take().expect("checked above");
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    self.accumulate(*a, da);
                }
                if self.needs(*b) {
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(*b, g.clone());
                }
            }
            Op::AddScaled(a, b, c) => {
                if self.needs(*a) {
                    self.accumulate(*a, g.clone());
                }
                if self.needs(*b) {
                    self.accumulate(*b, &g * *c);
                }
            }
            Op::AddBiasRow(x, bias) => {
                if self.needs(*x) {
                    self.accumulate(*x, g.clone());
                }
                if self.needs(*bias) {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(*bias, db);
                }
            }
            Op::Scale(x, c) => {
                if self.needs(*x) {
                    self.accumulate(*x, &g * *c);
                }
            }
            Op::Relu(x) => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    dx.zip_mut_with(&self.nodes[x.0].value, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    self.accumulate(*x, dx);
                }
            }
            Op::LayerNorm(ln) => {
                let d = g.ncols() as f64;
                let gain_row = self.nodes[ln.gain.0].value.row(0).to_owned();
                if self.needs(ln.gain) {
                    let dgain = (&g * &ln.normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(ln.gain, dgain);
                }
                if self.needs(ln.shift) {
                    let dshift = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(ln.shift, dshift);
                }
                if self.needs(ln.x) {
                    let mut dx = Array2::zeros(g.raw_dim());
                    for (r, grow) in g.rows().into_iter().enumerate() {
                        let dxh: Vec<f64> =
                            grow.iter().zip(gain_row.iter()).map(|(&gv, &ga)| gv * ga).collect();
                        let mean_dxh: f64 = dxh.iter().sum::<f64>() / d;
                        let mean_dxh_xh: f64 = dxh
                            .iter()
                            .enumerate()
                            .map(|(c, &v)| v * ln.normed[(r, c)])
                            .sum::<f64>()
                            / d;
                        for c in 0..g.ncols() {
                            dx[(r, c)] = ln.inv_std[r]
                                * (dxh[c] - mean_dxh - ln.normed[(r, c)] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(ln.x, dx);
                }
            }
            Op::GatherRows(src, idx) => {
                if self.needs(*src) {
                    let mut dsrc = Array2::zeros(self.nodes[src.0].value.raw_dim());
                    for (r, &i2) in idx.iter().enumerate() {
                        let mut dst = dsrc.row_mut(i2);
                        dst += &g.row(r);
                    }
                    self.accumulate(*src, dsrc);
                }
            }
            Op::ScaleRows(x, weights) => {
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for (mut rowv, &w) in dx.rows_mut().into_iter().zip(weights) {
                        rowv.mapv_inplace(|v| v * w);
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::OverwriteRows { x, row, targets } => {
                if self.needs(*row) {
                    let mut drow = Array2::zeros((1, g.ncols()));
                    for &r in targets {
                        let mut dst = drow.row_mut(0);
                        dst += &g.row(r);
                    }
                    self.accumulate(*row, drow);
                }
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for &r in targets {
                        dx.row_mut(r).fill(0.0);
                    }
                    self.accumulate(*x, dx);
                }
            }
            Op::Dropout(x, mask) => {
                if self.needs(*x) {
                    self.accumulate(*x, &g * mask);
                }
            }
            Op::Attention(at) => self.backprop_attention(at, &g),
            Op::PairDot { h, r, pairs } => {
                if self.needs(*h) {
                    let mut dh = Array2::zeros(self.nodes[h.0].value.raw_dim());
                    for (p, &(hi, ri)) in pairs.iter().enumerate() {
                        let gp = g[(p, 0)];
                        let rrow = self.nodes[r.0].value.row(ri).to_owned();
                        let mut dst = dh.row_mut(hi);
                        dst.zip_mut_with(&rrow, |d2, &v| *d2 += gp * v);
                    }
                    self.accumulate(*h, dh);
                }
                if self.needs(*r) {
                    let mut dr = Array2::zeros(self.nodes[r.0].value.raw_dim());
                    for (p, &(hi, ri)) in pairs.iter().enumerate() {
                        let gp = g[(p, 0)];
                        let hrow = self.nodes[h.0].value.row(hi).to_owned();
                        let mut dst = dr.row_mut(ri);
                        dst.zip_mut_with(&hrow, |d2, &v| *d2 += gp * v);
                    }
                    self.accumulate(*r, dr);
                }
            }
            Op::BceSum(pos, neg) => {
                let gs = g[(0, 0)];
                if self.needs(*pos) {
                    let dpos = self.nodes[pos.0].value.mapv(|p| gs * (sigmoid(p) - 1.0));
                    self.accumulate(*pos, dpos);
                }
                if self.needs(*neg) {
                    let dneg = self.nodes[neg.0].value.mapv(|n| gs * sigmoid(n));
                    self.accumulate(*neg, dneg);
                }
            }
            Op::PairwiseLme(lme) => {
                if self.needs(lme.reps) {
                    let gs = g[(0, 0)];
                    let rv = &self.nodes[lme.reps.0].value;
                    let n = rv.nrows();
                    let d = rv.ncols();
                    let mut dreps = Array2::zeros(rv.raw_dim());
                    for j in 0..n {
                        for m in (j + 1)..n {
                            let mut d2 = 0.0;
                            for c in 0..d {
                                let diff = rv[(j, c)] - rv[(m, c)];
                                d2 += diff * diff;
                            }
                            let mut a = -lme.t * d2;
                            if let Some(lp) = &lme.log_p {
                                a -= lp[j] + lp[m];
                            }
                            let w = (a - lme.lse).exp();
                            let coef = gs * w * (-2.0 * lme.t);
                            for c in 0..d {
                                let diff = rv[(j, c)] - rv[(m, c)];
                                dreps[(j, c)] += coef * diff;
                                dreps[(m, c)] -= coef * diff;
                            }
                        }
                    }
                    self.accumulate(lme.reps, dreps);
                }
            }
            Op::MeanScalars(parts) => {
                let share = g[(0, 0)] / parts.len() as f64;
                for &p in parts {
                    if self.needs(p) {
                        self.accumulate(p, Array2::from_elem((1, 1), share));
                    }
                }
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].grad = Some(g);
    }

    fn backprop_attention(&mut self, at: &AttentionOp, g: &Array2<f64>) {
        let d = g.ncols();
        let dh = d / at.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let wo_t = self.nodes[at.wo.0].value.t().to_owned();
        let wq_t = self.nodes[at.wq.0].value.t().to_owned();
        let wk_t = self.nodes[at.wk.0].value.t().to_owned();
        let wv_t = self.nodes[at.wv.0].value.t().to_owned();

        let mut dx_total = Array2::zeros(self.nodes[at.x.0].value.raw_dim());
        let mut dwq = Array2::zeros((d, d));
        let mut dwk = Array2::zeros((d, d));
        let mut dwv = Array2::zeros((d, d));
        let mut dwo = Array2::zeros((d, d));

        for (w, saved) in at.windows.iter().zip(&at.saved) {
            let gy = g.slice(s![w.start..w.start + w.len, ..]);
            // y = concat · Wo
            dwo += &saved.concat.t().dot(&gy);
            let dconcat = gy.dot(&wo_t);

            let mut dq = Array2::zeros((w.len, d));
            let mut dk = Array2::zeros((w.len, d));
            let mut dv = Array2::zeros((w.len, d));
            for h in 0..at.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let attn = &saved.attn[h];
                let vh = saved.v.slice(cols);
                let qh = saved.q.slice(cols);
                let kh = saved.k.slice(cols);
                let do_h = dconcat.slice(cols);

                // o_h = attn · v_h
                let da = do_h.dot(&vh.t());
                let dvh = attn.t().dot(&do_h);
                // softmax backward: ds = attn ⊙ (da − rowsum(da ⊙ attn))
                let rs = (&da * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = attn * &(&da - &rs);
                // scores = (q_h · k_hᵀ)·scale; masked entries have attn=0 ⇒ ds=0
                let dqh = ds.dot(&kh) * scale;
                let dkh = ds.t().dot(&qh) * scale;
                dq.slice_mut(cols).assign(&dqh);
                dk.slice_mut(cols).assign(&dkh);
                dv.slice_mut(cols).assign(&dvh);
            }
            let xb = self
                .nodes[at.x.0]
                .value
                .slice(s![w.start..w.start + w.len, ..])
                .to_owned();
            dwq += &xb.t().dot(&dq);
            dwk += &xb.t().dot(&dk);
            dwv += &xb.t().dot(&dv);
            let dxb = dq.dot(&wq_t) + dk.dot(&wk_t) + dv.dot(&wv_t);
            let mut dst = dx_total.slice_mut(s![w.start..w.start + w.len, ..]);
            dst += &dxb;
        }

        if self.needs(at.x) {
            self.accumulate(at.x, dx_total);
        }
        if self.needs(at.wq) {
            self.accumulate(at.wq, dwq);
        }
        if self.needs(at.wk) {
            self.accumulate(at.wk, dwk);
        }
        if self.needs(at.wv) {
            self.accumulate(at.wv, dwv);
        }
        if self.needs(at.wo) {
            self.accumulate(at.wo, dwo);
        }
    }
}

/// Central finite differences of a scalar-valued function at `at`,
/// element by element. The numerical oracle for every analytic backward.
pub fn central_diff_grad(
    mut f: impl FnMut(&Array2<f64>) -> f64,
    at: &Array2<f64>,
    h: f64,
) -> Array2<f64> {
    let mut grad = Array2::zeros(at.raw_dim());
    let mut x = at.clone();
    for idx in ndarray::indices(at.raw_dim()) {
        let orig = x[idx];
        x[idx] = orig + h;
        let up = f(&x);
        x[idx] = orig - h;
        let down = f(&x);
        x[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest relative elementwise deviation between two gradients, with an
/// absolute guard for entries near zero.
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
