//! Wengert-list reverse-mode differentiation.
//!
//! Every op evaluates eagerly, appends a node holding its value, and is
//! replayed in reverse by [`Tape::backward`]. Index arrays (CSR offsets,
//! gather lists) are shared through `Arc<[usize]>` so graphs can hand their
//! topology to a tape without copying.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Relu(Var),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    AssembleRows(Vec<Var>, Vec<Arc<[usize]>>),
    ConcatCols(Vec<Var>),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentWeightedSum {
        weights: Var,
        values: Var,
        index: Arc<[usize]>,
        offsets: Arc<[usize]>,
    },
    BlockScores {
        q: Var,
        k: Var,
        seq: usize,
        scale: f64,
    },
    BlockMix {
        attn: Var,
        values: Var,
        seq: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Dropout(Var, Vec<f64>),
    SumAll(Var),
    RowSum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Arc<[usize]>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<[f64]>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Reshape(_) => "reshape",
            Op::GatherRows(..) => "gather_rows",
            Op::AssembleRows(..) => "assemble_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SegmentSoftmax(..) => "softmax_groups",
            Op::SegmentWeightedSum { .. } => "segment_weighted_sum",
            Op::BlockScores { .. } => "block_scores",
            Op::BlockMix { .. } => "block_mix",
            Op::LayerNorm { .. } => "layer_norm",
            Op::L2Normalize { .. } => "l2_normalize_rows",
            Op::Dropout(..) => "dropout",
            Op::SumAll(_) => "sum_all",
            Op::RowSum(_) => "row_sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracks: bool,
}

/// Contiguous groups over a flat index range, given as CSR-style offsets.
///
/// Group `g` covers `offsets[g]..offsets[g + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Arc<[usize]>);

impl Segments {
    pub fn new(offsets: impl Into<Arc<[usize]>>) -> Result<Self> {
        let offsets = offsets.into();
        if offsets.first() != Some(&0) {
            return Err(Error::Graph("segment offsets must start at 0".into()));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Graph(
                "segment offsets must be non-decreasing".into(),
            ));
        }
        Ok(Segments(offsets))
    }

    /// `count` groups of `width` consecutive entries.
    pub fn uniform(count: usize, width: usize) -> Self {
        Segments((0..=count).map(|g| g * width).collect())
    }

    pub fn offsets(&self) -> &Arc<[usize]> {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.len() - 1
    }

    pub fn total(&self) -> usize {
        *self.0.last().unwrap_or(&0)
    }

    pub fn range(&self, g: usize) -> std::ops::Range<usize> {
        self.0[g]..self.0[g + 1]
    }
}

/// Softmax within each contiguous group, max-shifted.
pub fn softmax_groups(values: &[f64], groups: &Segments) -> Result<Vec<f64>> {
    if groups.total() != values.len() {
        return Err(Error::Shape {
            op: "softmax_groups",
            left: (values.len(), 1),
            right: (groups.total(), 1),
        });
    }
    let mut out = vec![0.0; values.len()];
    for g in 0..groups.count() {
        let r = groups.range(g);
        if r.is_empty() {
            return Err(Error::EmptyGroup(g));
        }
        softmax_slice(&values[r.clone()], &mut out[r]);
    }
    Ok(out)
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · bᵀ` where `b` is `k×n`.
fn gemm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(arow, brow);
        }
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k`, `b` is `m×n`.
fn gemm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient buffers indexed by [`Var`], produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `target.grad` (zeros if `v` did not
    /// influence the loss).
    pub fn write_into(&self, v: Var, target: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; target.len()]);
        target.set_grad(g)
    }
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<usize, Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].tracks
    }

    fn push(
        &mut self,
        op: Op,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        tracks: bool,
    ) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let value = Tensor::from_parts(rows, cols, data);
        self.nodes.push(Node { value, op, tracks });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        let tracks = t.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracks,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.leaf(&t)
    }

    /// Binds a keyed parameter once per tape; later calls return the same leaf.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        self.bound.insert(key, v);
        v
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.bound.iter().map(|(&k, &v)| (k, v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                left: (m, k),
                right: (k2, n),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let tracks = self.tracks(a) || self.tracks(b);
        self.push(Op::MatMul(a, b), m, n, out, tracks)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let tracks = self.tracks(a);
        self.push(Op::Transpose(a), n, m, out, tracks)
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(op.name(), a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let tracks = self.tracks(a) || self.tracks(b);
        self.push(op, r, c, out, tracks)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::Shape {
                op: "add_row",
                left: (r, c),
                right: self.shape(row),
            });
        }
        let bias = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let tracks = self.tracks(a) || self.tracks(row);
        self.push(Op::AddRow(a, row), r, c, out, tracks)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let tracks = self.tracks(a);
        self.push(Op::Scale(a, s), r, c, out, tracks)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!(
                "leaky_relu slope {slope} outside (0,1)"
            )));
        }
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x >= 0.0 { x } else { slope * x })
            .collect();
        let tracks = self.tracks(a);
        self.push(Op::LeakyRelu(a, slope), r, c, out, tracks)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let tracks = self.tracks(a);
        self.push(Op::Relu(a), r, c, out, tracks)
    }

    /// Reinterprets the row-major buffer under a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::Shape {
                op: "reshape",
                left: (r, c),
                right: (rows, cols),
            });
        }
        let out = self.value(a).data().to_vec();
        let tracks = self.tracks(a);
        self.push(Op::Reshape(a), rows, cols, out, tracks)
    }

    /// Row `i` of the result is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape {
                op: "gather_rows",
                left: (r, c),
                right: (bad, 0),
            });
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let tracks = self.tracks(a);
        let n = index.len();
        self.push(Op::GatherRows(a, index), n, c, out, tracks)
    }

    /// Scatters the rows of each part to the positions given by its index
    /// list. Every output row must be written exactly once.
    pub fn assemble_rows(
        &mut self,
        parts: Vec<Var>,
        index: Vec<Arc<[usize]>>,
        rows: usize,
    ) -> Result<Var> {
        if parts.len() != index.len() || parts.is_empty() {
            return Err(Error::Shape {
                op: "assemble_rows",
                left: (parts.len(), 0),
                right: (index.len(), 0),
            });
        }
        let cols = self.shape(parts[0]).1;
        let mut out = vec![0.0; rows * cols];
        let mut seen = vec![false; rows];
        for (&p, idx) in parts.iter().zip(&index) {
            let (pr, pc) = self.shape(p);
            if pc != cols || pr != idx.len() {
                return Err(Error::Shape {
                    op: "assemble_rows",
                    left: (pr, pc),
                    right: (idx.len(), cols),
                });
            }
            let src = self.value(p).data();
            for (k, &dst) in idx.iter().enumerate() {
                if dst >= rows || seen[dst] {
                    return Err(Error::graph(format!(
                        "assemble_rows: row {dst} out of range or duplicated"
                    )));
                }
                seen[dst] = true;
                out[dst * cols..(dst + 1) * cols].copy_from_slice(&src[k * cols..(k + 1) * cols]);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::graph("assemble_rows: not every row covered"));
        }
        let tracks = parts.iter().any(|&p| self.tracks(p));
        self.push(Op::AssembleRows(parts, index), rows, cols, out, tracks)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: (0, 0),
                    right: (0, 0),
                })
            }
        };
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]),
                    right: self.shape(p),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let tracks = parts.iter().any(|&p| self.tracks(p));
        self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out, tracks)
    }

    /// Grouped softmax over the flat buffer of `a`; groups must tile it.
    pub fn softmax_groups(&mut self, a: Var, groups: &Segments) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = softmax_groups(self.value(a).data(), groups)?;
        let tracks = self.tracks(a);
        self.push(
            Op::SegmentSoftmax(a, groups.offsets().clone()),
            r,
            c,
            out,
            tracks,
        )
    }

    /// `out[i] = Σ_{e ∈ group i} weights[e] · values[index[e]]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        index: Arc<[usize]>,
        groups: &Segments,
    ) -> Result<Var> {
        let e = groups.total();
        if self.shape(weights) != (e, 1) || index.len() != e {
            return Err(Error::Shape {
                op: "segment_weighted_sum",
                left: self.shape(weights),
                right: (index.len(), 1),
            });
        }
        let (vr, d) = self.shape(values);
        if index.iter().any(|&i| i >= vr) {
            return Err(Error::graph("segment_weighted_sum: index out of range"));
        }
        let n = groups.count();
        let w = self.value(weights).data();
        let vals = self.value(values).data();
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let orow = &mut out[i * d..(i + 1) * d];
            for k in groups.range(i) {
                let src = &vals[index[k] * d..(index[k] + 1) * d];
                let wk = w[k];
                for (o, s) in orow.iter_mut().zip(src) {
                    *o += wk * s;
                }
            }
        }
        let tracks = self.tracks(weights) || self.tracks(values);
        let op = Op::SegmentWeightedSum {
            weights,
            values,
            index,
            offsets: groups.offsets().clone(),
        };
        self.push(op, n, d, out, tracks)
    }

    /// Per-block scaled scores: `q`, `k` hold `b` blocks of `seq` rows each;
    /// row `(v, i)` of the result holds `scale · q[v,i] · k[v,j]` over `j`.
    pub fn block_scores(&mut self, q: Var, k: Var, seq: usize, scale: f64) -> Result<Var> {
        let (qr, dk) = self.same_shape("block_scores", q, k)?;
        if seq == 0 || qr % seq != 0 {
            return Err(Error::Shape {
                op: "block_scores",
                left: (qr, dk),
                right: (seq, 0),
            });
        }
        let blocks = qr / seq;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![0.0; qr * seq];
        for b in 0..blocks {
            for i in 0..seq {
                let qi = &qd[(b * seq + i) * dk..(b * seq + i + 1) * dk];
                for j in 0..seq {
                    let kj = &kd[(b * seq + j) * dk..(b * seq + j + 1) * dk];
                    out[(b * seq + i) * seq + j] = scale * dot(qi, kj);
                }
            }
        }
        let tracks = self.tracks(q) || self.tracks(k);
        self.push(Op::BlockScores { q, k, seq, scale }, qr, seq, out, tracks)
    }

    /// Per-block mixing: row `(v, i)` of the result is `Σ_j attn[(v,i),j] · values[v,j]`.
    pub fn block_mix(&mut self, attn: Var, values: Var, seq: usize) -> Result<Var> {
        let (ar, ac) = self.shape(attn);
        let (vr, dv) = self.shape(values);
        if ac != seq || ar != vr || seq == 0 || vr % seq != 0 {
            return Err(Error::Shape {
                op: "block_mix",
                left: (ar, ac),
                right: (vr, dv),
            });
        }
        let a = self.value(attn).data();
        let v = self.value(values).data();
        let mut out = vec![0.0; vr * dv];
        for b in 0..vr / seq {
            for i in 0..seq {
                let row = b * seq + i;
                let orow = &mut out[row * dv..(row + 1) * dv];
                for j in 0..seq {
                    let w = a[row * seq + j];
                    let vj = &v[(b * seq + j) * dv..(b * seq + j + 1) * dv];
                    for (o, x) in orow.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
        let tracks = self.tracks(attn) || self.tracks(values);
        self.push(Op::BlockMix { attn, values, seq }, vr, dv, out, tracks)
    }

    /// Row-wise normalization to zero mean / unit variance, then `gain`, `bias` (`1×c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, c) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: (r, c),
                    right: self.shape(p),
                });
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let nh = (row[j] - mean) * is;
                normed[i * c + j] = nh;
                out[i * c + j] = nh * g[j] + b[j];
            }
        }
        let tracks = self.tracks(x) || self.tracks(gain) || self.tracks(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        self.push(op, r, c, out, tracks)
    }

    /// Each row divided by `max(‖row‖₂, eps)`.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xs = self.value(x).data();
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let norm = dot(row, row).sqrt();
            norms[i] = norm;
            let denom = norm.max(eps);
            for j in 0..c {
                out[i * c + j] = row[j] / denom;
            }
        }
        let tracks = self.tracks(x);
        self.push(Op::L2Normalize { x, norms, eps }, r, c, out, tracks)
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0,1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let tracks = self.tracks(x);
        self.push(Op::Dropout(x, mask), r, c, out, tracks)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let tracks = self.tracks(a);
        self.push(Op::SumAll(a), 1, 1, vec![s], tracks)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums each row to a single column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = self
            .value(a)
            .data()
            .chunks(c.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let tracks = self.tracks(a);
        self.push(Op::RowSum(a), r, 1, out, tracks)
    }

    /// Mean over rows of `−log softmax(logits_r)[labels_r]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Arc<[usize]>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r || r == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: (r, c),
                right: (labels.len(), 1),
            });
        }
        if labels.iter().any(|&l| l >= c) {
            return Err(Error::Metric("label out of range".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            softmax_slice(row, &mut probs[i * c..(i + 1) * c]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[i]];
        }
        loss /= r as f64;
        let tracks = self.tracks(logits);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels,
            probs,
        };
        self.push(op, 1, 1, vec![loss], tracks)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against same-shape targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<[f64]>) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r * c || r * c == 0 {
            return Err(Error::Shape {
                op: "bce_with_logits",
                left: (r, c),
                right: (targets.len(), 1),
            });
        }
        let x = self.value(logits).data();
        let loss = x
            .iter()
            .zip(targets.iter())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / (r * c) as f64;
        let tracks = self.tracks(logits);
        self.push(
            Op::BceWithLogits { logits, targets },
            1,
            1,
            vec![loss],
            tracks,
        )
    }

    /// Reverse sweep from a `1×1` loss. Each recorded op is visited once, in
    /// reverse order; ops that do not influence the loss are skipped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            if !self.nodes[i].tracks {
                continue;
            }
            self.propagate(i, g, before);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.tracks {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (rows, cols) = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = cols;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt_acc(g, self.value(*b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn_acc(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    // node is rows×cols = n×m, input is m×n
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b).data();
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a).data();
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.slot(grads, *row) {
                    for chunk in g.chunks(cols.max(1)) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let av = self.value(*a).data();
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        *x += if *v >= 0.0 { *y } else { slope * y };
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let av = self.value(*a).data();
                    for ((x, y), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += y;
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GatherRows(a, index) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &src) in index.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        dst.iter_mut()
                            .zip(&g[k * cols..(k + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AssembleRows(parts, index) => {
                for (&p, idx) in parts.iter().zip(index) {
                    if let Some(gp) = self.slot(grads, p) {
                        for (k, &dst) in idx.iter().enumerate() {
                            let target = &mut gp[k * cols..(k + 1) * cols];
                            target
                                .iter_mut()
                                .zip(&g[dst * cols..(dst + 1) * cols])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            gp[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += pc;
                }
            }
            Op::SegmentSoftmax(a, offsets) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let y = node.value.data();
                    for w in offsets.windows(2) {
                        let (lo, hi) = (w[0], w[1]);
                        let inner = dot(&y[lo..hi], &g[lo..hi]);
                        for k in lo..hi {
                            ga[k] += y[k] * (g[k] - inner);
                        }
                    }
                }
            }
            Op::SegmentWeightedSum {
                weights,
                values,
                index,
                offsets,
            } => {
                let d = cols;
                let vals = self.value(*values).data();
                if let Some(gw) = self.slot(grads, *weights) {
                    for n in 0..rows {
                        let gr = &g[n * d..(n + 1) * d];
                        for k in offsets[n]..offsets[n + 1] {
                            gw[k] += dot(gr, &vals[index[k] * d..(index[k] + 1) * d]);
                        }
                    }
                }
                let w = self.value(*weights).data();
                if let Some(gv) = self.slot(grads, *values) {
                    for n in 0..rows {
                        let gr = &g[n * d..(n + 1) * d];
                        for k in offsets[n]..offsets[n + 1] {
                            let dst = &mut gv[index[k] * d..(index[k] + 1) * d];
                            dst.iter_mut().zip(gr).for_each(|(x, y)| *x += w[k] * y);
                        }
                    }
                }
            }
            Op::BlockScores { q, k, seq, scale } => {
                let seq = *seq;
                let dk = self.shape(*q).1;
                let qd = self.value(*q).data();
                let kd = self.value(*k).data();
                let blocks = rows / seq;
                if let Some(gq) = self.slot(grads, *q) {
                    for b in 0..blocks {
                        for i in 0..seq {
                            let row = b * seq + i;
                            for j in 0..seq {
                                let s = scale * g[row * seq + j];
                                let kj = &kd[(b * seq + j) * dk..(b * seq + j + 1) * dk];
                                gq[row * dk..(row + 1) * dk]
                                    .iter_mut()
                                    .zip(kj)
                                    .for_each(|(x, y)| *x += s * y);
                            }
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *k) {
                    for b in 0..blocks {
                        for i in 0..seq {
                            let row = b * seq + i;
                            let qi = &qd[row * dk..(row + 1) * dk];
                            for j in 0..seq {
                                let s = scale * g[row * seq + j];
                                let kr = b * seq + j;
                                gk[kr * dk..(kr + 1) * dk]
                                    .iter_mut()
                                    .zip(qi)
                                    .for_each(|(x, y)| *x += s * y);
                            }
                        }
                    }
                }
            }
            Op::BlockMix { attn, values, seq } => {
                let seq = *seq;
                let dv = cols;
                let a = self.value(*attn).data();
                let v = self.value(*values).data();
                let blocks = rows / seq;
                if let Some(ga) = self.slot(grads, *attn) {
                    for b in 0..blocks {
                        for i in 0..seq {
                            let row = b * seq + i;
                            let gr = &g[row * dv..(row + 1) * dv];
                            for j in 0..seq {
                                ga[row * seq + j] +=
                                    dot(gr, &v[(b * seq + j) * dv..(b * seq + j + 1) * dv]);
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *values) {
                    for b in 0..blocks {
                        for i in 0..seq {
                            let row = b * seq + i;
                            let gr = &g[row * dv..(row + 1) * dv];
                            for j in 0..seq {
                                let w = a[row * seq + j];
                                let vr = b * seq + j;
                                gv[vr * dv..(vr + 1) * dv]
                                    .iter_mut()
                                    .zip(gr)
                                    .for_each(|(x, y)| *x += w * y);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let c = cols;
                let gv = self.value(*gain).data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * normed[r * c + j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let cf = c as f64;
                    for r in 0..rows {
                        let mut sum = 0.0;
                        let mut sum_xh = 0.0;
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            sum += dxh;
                            sum_xh += dxh * normed[r * c + j];
                        }
                        for j in 0..c {
                            let dxh = g[r * c + j] * gv[j];
                            gx[r * c + j] +=
                                inv_std[r] / cf * (cf * dxh - sum - normed[r * c + j] * sum_xh);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms, eps } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let y = node.value.data();
                    let c = cols;
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        if norms[r] > *eps {
                            let proj = dot(yr, gr);
                            for j in 0..c {
                                gx[r * c + j] += (gr[j] - yr[j] * proj) / norms[r];
                            }
                        } else {
                            for j in 0..c {
                                gx[r * c + j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, y), m) in ga.iter_mut().zip(g).zip(mask) {
                        *x += y * m;
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::RowSum(a) => {
                let c = self.shape(*a).1;
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..rows {
                        ga[r * c..(r + 1) * c].iter_mut().for_each(|x| *x += g[r]);
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (r, c) = self.shape(*logits);
                if let Some(gl) = self.slot(grads, *logits) {
                    let s = g[0] / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            let y = if labels[i] == j { 1.0 } else { 0.0 };
                            gl[i * c + j] += s * (probs[i * c + j] - y);
                        }
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let x = self.value(*logits).data();
                    let s = g[0] / x.len() as f64;
                    for ((gx, &xv), &y) in gl.iter_mut().zip(x).zip(targets.iter()) {
                        *gx += s * (sigmoid(xv) - y);
                    }
                }
            }
        }
    }
}
