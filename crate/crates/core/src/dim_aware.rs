//! Dimension-aware encoder: each node's hidden vector is cut into tokens of
//! width `t` and a small transformer attends across those tokens, one node
//! at a time.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::numerics::{ParamId, ParamStore, Pass, Segments, Tensor, Var};
use crate::type_aware::{combine, NodeTypeTable};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct DimHead {
    /// `t × d_k`
    pub w_q: ParamId,
    /// `t × d_k`
    pub w_k: ParamId,
    /// `t × d_v`
    pub w_v: ParamId,
}

/// Position-wise feed-forward sub-layer `t → m → t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

/// One dimension-aware layer. Layer norms act on the node's whole `d`-wide
/// row; with `t = 1` a norm over a single token would erase it.
#[derive(Clone, Debug, PartialEq)]
pub struct DimLayerParams {
    pub heads: Vec<DimHead>,
    /// `(K_d · d_v) × t`
    pub w_o: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub ffn: Option<Ffn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DimShape {
    pub d: usize,
    pub t: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Hidden width of the feed-forward sub-layer; `None` disables it.
    pub ffn_hidden: Option<usize>,
}

impl DimShape {
    pub fn tokens(&self) -> Result<usize> {
        if self.t == 0 || !self.d.is_multiple_of(self.t) {
            return Err(Error::config(format!(
                "token size {} does not divide d = {}",
                self.t, self.d
            )));
        }
        Ok(self.d / self.t)
    }
}

impl DimLayerParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        shape: &DimShape,
        rng: &mut R,
    ) -> Result<Self> {
        shape.tokens()?;
        if shape.heads == 0 {
            return Err(Error::config(
                "dimension-aware layer needs at least one head",
            ));
        }
        let DimShape { d, t, d_k, d_v, .. } = *shape;
        let heads = (0..shape.heads)
            .map(|k| DimHead {
                w_q: store.insert_glorot(format!("{prefix}.head{k}.w_q"), t, d_k, rng),
                w_k: store.insert_glorot(format!("{prefix}.head{k}.w_k"), t, d_k, rng),
                w_v: store.insert_glorot(format!("{prefix}.head{k}.w_v"), t, d_v, rng),
            })
            .collect();
        let w_o = store.insert_glorot(format!("{prefix}.w_o"), shape.heads * d_v, t, rng);
        let ln_gain = store.insert(format!("{prefix}.ln.gain"), Tensor::ones(1, d));
        let ln_bias = store.insert(format!("{prefix}.ln.bias"), Tensor::zeros(1, d));
        let ffn = shape.ffn_hidden.map(|m| Ffn {
            w1: store.insert_glorot(format!("{prefix}.ffn.w1"), t, m, rng),
            b1: store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(1, m)),
            w2: store.insert_glorot(format!("{prefix}.ffn.w2"), m, t, rng),
            b2: store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(1, t)),
            ln_gain: store.insert(format!("{prefix}.ffn.ln.gain"), Tensor::ones(1, d)),
            ln_bias: store.insert(format!("{prefix}.ffn.ln.bias"), Tensor::zeros(1, d)),
        });
        Ok(DimLayerParams {
            heads,
            w_o,
            ln_gain,
            ln_bias,
            ffn,
        })
    }
}

/// Token view of an `n × d` matrix: `n · d/t` rows of width `t`, node-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Var,
    pub nodes: usize,
    pub per_node: usize,
    pub width: usize,
}

/// Hadamard product with each node's type row.
pub fn type_encode(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    table: Option<NodeTypeTable>,
) -> Result<Var> {
    combine(pass, h, g, table)
}

pub fn expand(pass: &mut Pass<'_>, h: Var, t: usize) -> Result<TokenSequence> {
    let (n, d) = pass.tape.shape(h);
    if t == 0 || d % t != 0 {
        return Err(Error::config(format!(
            "token size {t} does not divide d = {d}"
        )));
    }
    let per_node = d / t;
    let tokens = pass.tape.reshape(h, n * per_node, t)?;
    Ok(TokenSequence {
        tokens,
        nodes: n,
        per_node,
        width: t,
    })
}

pub fn flatten(pass: &mut Pass<'_>, seq: TokenSequence) -> Result<Var> {
    pass.tape
        .reshape(seq.tokens, seq.nodes, seq.per_node * seq.width)
}

/// One dimension-aware layer. Returns the new sequence and, per head, the
/// `(n · s) × s` attention weights.
pub fn dim_self_attention(
    pass: &mut Pass<'_>,
    seq: TokenSequence,
    layer: &DimLayerParams,
) -> Result<(TokenSequence, Vec<Var>)> {
    let s = seq.per_node;
    let groups = Segments::uniform(seq.nodes * s, s);
    let mut outs = Vec::with_capacity(layer.heads.len());
    let mut weights = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let wq = pass.p(head.w_q);
        let wk = pass.p(head.w_k);
        let wv = pass.p(head.w_v);
        let q = pass.tape.matmul(seq.tokens, wq)?;
        let k = pass.tape.matmul(seq.tokens, wk)?;
        let v = pass.tape.matmul(seq.tokens, wv)?;
        let d_k = pass.tape.shape(q).1;
        let scores = pass.tape.block_scores(q, k, s, 1.0 / (d_k as f64).sqrt())?;
        let attn = pass.tape.softmax_groups(scores, &groups)?;
        outs.push(pass.tape.block_mix(attn, v, s)?);
        weights.push(attn);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        pass.tape.concat_cols(&outs)?
    };
    let wo = pass.p(layer.w_o);
    let mixed = pass.tape.matmul(cat, wo)?;
    let res = pass.tape.add(mixed, seq.tokens)?;
    let mut x = norm_rows(pass, seq, res, layer.ln_gain, layer.ln_bias)?;

    if let Some(ffn) = &layer.ffn {
        let w1 = pass.p(ffn.w1);
        let b1 = pass.p(ffn.b1);
        let w2 = pass.p(ffn.w2);
        let b2 = pass.p(ffn.b2);
        let a = pass.tape.matmul(x, w1)?;
        let a = pass.tape.add_row(a, b1)?;
        let a = pass.tape.relu(a)?;
        let b = pass.tape.matmul(a, w2)?;
        let b = pass.tape.add_row(b, b2)?;
        let res = pass.tape.add(b, x)?;
        x = norm_rows(pass, seq, res, ffn.ln_gain, ffn.ln_bias)?;
    }
    Ok((TokenSequence { tokens: x, ..seq }, weights))
}

fn norm_rows(
    pass: &mut Pass<'_>,
    seq: TokenSequence,
    tokens: Var,
    gain: ParamId,
    bias: ParamId,
) -> Result<Var> {
    let rows = pass
        .tape
        .reshape(tokens, seq.nodes, seq.per_node * seq.width)?;
    let g = pass.p(gain);
    let b = pass.p(bias);
    let normed = pass.tape.layer_norm(rows, g, b, LAYER_NORM_EPS)?;
    pass.tape
        .reshape(normed, seq.nodes * seq.per_node, seq.width)
}

/// Type encoding, expansion, `layers.len()` attention layers, flatten.
/// An empty `layers` returns the type-encoded input.
pub fn encoder_forward(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    table: Option<NodeTypeTable>,
    layers: &[DimLayerParams],
    t: usize,
) -> Result<Var> {
    let encoded = type_encode(pass, h, g, table)?;
    let mut seq = expand(pass, encoded, t)?;
    for layer in layers {
        seq = dim_self_attention(pass, seq, layer)?.0;
    }
    flatten(pass, seq)
}

#[cfg(test)]
mod tests;
