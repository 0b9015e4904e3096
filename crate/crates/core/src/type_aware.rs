//! Type-aware encoder: per-type feature projection, node-type fusion, and
//! attention layers whose coefficients see both endpoint embeddings and a
//! learned edge-type embedding. Coefficients of consecutive layers are mixed
//! through an attention residual and heads are averaged.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::numerics::{ones_with_noise, ParamId, ParamStore, Pass, Tensor, Var};

/// Nonlinearity applied after neighborhood aggregation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn apply(self, pass: &mut Pass<'_>, x: Var) -> Result<Var> {
        match self {
            Activation::LeakyRelu(slope) => pass.tape.leaky_relu(x, slope),
            Activation::Identity => Ok(x),
        }
    }
}

/// `|A| × d` node-type embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeTypeTable(pub ParamId);

impl NodeTypeTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        types: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        NodeTypeTable(store.insert(name, ones_with_noise(types, d, 0.01, rng)))
    }
}

/// `(|R| + 1) × d_r` edge-type embeddings; the last row is the self-loop type.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EdgeTypeTable(pub ParamId);

impl EdgeTypeTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        edge_types: usize,
        d_r: usize,
        rng: &mut R,
    ) -> Self {
        EdgeTypeTable(store.insert_glorot(name, edge_types + 1, d_r, rng))
    }
}

/// Per node type: `weight` is `d_x(τ) × d`, `bias` is `1 × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub weights: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl ProjectionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        feature_dims: &[usize],
        d: usize,
        rng: &mut R,
    ) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (t, &dx) in feature_dims.iter().enumerate() {
            weights.push(store.insert_glorot(format!("proj.{t}.weight"), dx, d, rng));
            biases.push(store.insert(format!("proj.{t}.bias"), Tensor::zeros(1, d)));
        }
        ProjectionParams { weights, biases }
    }
}

/// One attention head of a type-aware layer.
///
/// The attention vector is kept as its three blocks: `a_target` scores the
/// aggregating node, `a_source` the neighbor, `a_edge` the transformed
/// edge-type embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `d × d`, applied as `h̃ · w`.
    pub w: ParamId,
    /// `d_r × d_e`.
    pub w_edge: ParamId,
    pub a_target: ParamId,
    pub a_source: ParamId,
    pub a_edge: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TypeAwareLayerParams {
    pub heads: Vec<HeadParams>,
}

impl TypeAwareLayerParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        d: usize,
        d_r: usize,
        d_e: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|k| HeadParams {
                w: store.insert_glorot(format!("{prefix}.head{k}.w"), d, d, rng),
                w_edge: store.insert_glorot(format!("{prefix}.head{k}.w_edge"), d_r, d_e, rng),
                a_target: store.insert_glorot(format!("{prefix}.head{k}.a_target"), d, 1, rng),
                a_source: store.insert_glorot(format!("{prefix}.head{k}.a_source"), d, 1, rng),
                a_edge: store.insert_glorot(format!("{prefix}.head{k}.a_edge"), d_e, 1, rng),
            })
            .collect();
        TypeAwareLayerParams { heads }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TypeAwareSettings {
    /// Attention residual weight, in `[0, 1]`.
    pub beta: f64,
    /// Slope of the LeakyReLU on attention logits.
    pub attention_slope: f64,
    pub dropout: f64,
    pub attention_dropout: f64,
}

impl Default for TypeAwareSettings {
    fn default() -> Self {
        TypeAwareSettings {
            beta: 0.05,
            attention_slope: crate::numerics::DEFAULT_LEAKY_SLOPE,
            dropout: 0.0,
            attention_dropout: 0.0,
        }
    }
}

/// Row `i` is `x_i · W_{φ(i)} + b_{φ(i)}`, one matmul per node type.
pub fn project_features(pass: &mut Pass<'_>, g: &HeteroGraph, p: &ProjectionParams) -> Result<Var> {
    if p.weights.len() != g.num_node_types() || p.biases.len() != g.num_node_types() {
        return Err(Error::config(format!(
            "projection has {} types, graph has {}",
            p.weights.len(),
            g.num_node_types()
        )));
    }
    let mut parts = Vec::with_capacity(g.num_node_types());
    let mut index = Vec::with_capacity(g.num_node_types());
    for (t, block) in g.features().iter().enumerate() {
        let w = pass.params.get(p.weights[t]);
        if w.rows() != block.dim {
            return Err(Error::config(format!(
                "node type {t}: features have width {} but projection expects {}",
                block.dim,
                w.rows()
            )));
        }
        let x = pass.tape.constant(Tensor::new(
            block.nodes.len(),
            block.dim,
            block.data.clone(),
        )?);
        let wv = pass.p(p.weights[t]);
        let bv = pass.p(p.biases[t]);
        let xw = pass.tape.matmul(x, wv)?;
        parts.push(pass.tape.add_row(xw, bv)?);
        index.push(block.nodes.clone());
    }
    pass.tape.assemble_rows(parts, index, g.num_nodes())
}

/// Hadamard fusion `h_i ∘ M[φ(i)]`. `None` skips fusion entirely.
pub fn combine(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    table: Option<NodeTypeTable>,
) -> Result<Var> {
    let Some(NodeTypeTable(id)) = table else {
        return Ok(h);
    };
    let m = pass.p(id);
    let rows = pass.tape.gather_rows(m, g.node_types().clone())?;
    pass.tape.mul(h, rows)
}

/// Transformed neighbor states `W h̃` and softmax-normalized per-edge
/// coefficients for one head.
pub struct HeadAttention {
    pub transformed: Var,
    pub alpha: Var,
}

pub fn head_attention(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    head: &HeadParams,
    edge_table: EdgeTypeTable,
    slope: f64,
) -> Result<HeadAttention> {
    if let Some(v) = (0..g.num_nodes()).find(|&v| g.in_edges(v).is_empty()) {
        return Err(Error::graph(format!(
            "node {v} has no incoming edge; add self-loops before attention"
        )));
    }
    let rows = pass.params.get(edge_table.0).rows();
    if let Some(&t) = g.edge_types().iter().find(|&&t| t >= rows) {
        return Err(Error::config(format!(
            "edge type {t} has no embedding row ({rows} rows)"
        )));
    }
    let w = pass.p(head.w);
    let z = pass.tape.matmul(h, w)?;
    let at = pass.p(head.a_target);
    let asrc = pass.p(head.a_source);
    let score_t = pass.tape.matmul(z, at)?;
    let score_s = pass.tape.matmul(z, asrc)?;

    let r = pass.p(edge_table.0);
    let we = pass.p(head.w_edge);
    let re = pass.tape.matmul(r, we)?;
    let ae = pass.p(head.a_edge);
    let score_e = pass.tape.matmul(re, ae)?;

    let et = pass.tape.gather_rows(score_t, g.edge_targets().clone())?;
    let es = pass.tape.gather_rows(score_s, g.edge_sources().clone())?;
    let ee = pass.tape.gather_rows(score_e, g.edge_types().clone())?;
    let sum = pass.tape.add(et, es)?;
    let logits = pass.tape.add(sum, ee)?;
    let act = pass.tape.leaky_relu(logits, slope)?;
    let alpha = pass.tape.softmax_groups(act, g.in_segments())?;
    Ok(HeadAttention {
        transformed: z,
        alpha,
    })
}

/// Per-edge attention coefficients of one head, normalized over each node's
/// incoming edges.
pub fn attention_coefficients(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    head: &HeadParams,
    edge_table: EdgeTypeTable,
    slope: f64,
) -> Result<Var> {
    Ok(head_attention(pass, h, g, head, edge_table, slope)?.alpha)
}

/// `(1-β)·now + β·prev`; the first layer passes `now` through.
pub fn attention_residual(
    pass: &mut Pass<'_>,
    now: Var,
    prev: Option<Var>,
    beta: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("beta {beta} outside [0,1]")));
    }
    let Some(prev) = prev else { return Ok(now) };
    if pass.tape.shape(now) != pass.tape.shape(prev) {
        return Err(Error::Shape {
            op: "attention_residual",
            left: pass.tape.shape(now),
            right: pass.tape.shape(prev),
        });
    }
    let a = pass.tape.scale(now, 1.0 - beta)?;
    let b = pass.tape.scale(prev, beta)?;
    pass.tape.add(a, b)
}

/// `σ(Σ_j α̂_ij · W h̃_j)` for one head.
pub fn aggregate_head(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    alpha_hat: Var,
    w: ParamId,
    activation: Activation,
) -> Result<Var> {
    let wv = pass.p(w);
    let z = pass.tape.matmul(h, wv)?;
    let agg =
        pass.tape
            .segment_weighted_sum(alpha_hat, z, g.edge_sources().clone(), g.in_segments())?;
    activation.apply(pass, agg)
}

/// Output of one type-aware layer.
pub struct LayerOutput {
    pub h: Var,
    /// Mixed coefficients `α̂` per head, fed to the next layer's residual.
    pub alpha_hat: Vec<Var>,
}

/// One layer: per-head attention, residual mixing with `prev`, aggregation,
/// averaging over heads, then `activation`.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    layer: &TypeAwareLayerParams,
    edge_table: EdgeTypeTable,
    prev: Option<&[Var]>,
    settings: &TypeAwareSettings,
    activation: Activation,
) -> Result<LayerOutput> {
    let k = layer.heads.len();
    if k == 0 {
        return Err(Error::config("type-aware layer needs at least one head"));
    }
    if let Some(prev) = prev {
        if prev.len() != k {
            return Err(Error::config(format!(
                "{} previous heads for {k} heads",
                prev.len()
            )));
        }
    }
    let mut total: Option<Var> = None;
    let mut alpha_hat = Vec::with_capacity(k);
    for (i, head) in layer.heads.iter().enumerate() {
        let att = head_attention(pass, h, g, head, edge_table, settings.attention_slope)?;
        let mixed = attention_residual(pass, att.alpha, prev.map(|p| p[i]), settings.beta)?;
        alpha_hat.push(mixed);
        let weights = pass.dropout(mixed, settings.attention_dropout)?;
        let agg = pass.tape.segment_weighted_sum(
            weights,
            att.transformed,
            g.edge_sources().clone(),
            g.in_segments(),
        )?;
        total = Some(match total {
            None => agg,
            Some(t) => pass.tape.add(t, agg)?,
        });
    }
    let mean = pass.tape.scale(total.expect("k >= 1"), 1.0 / k as f64)?;
    let out = activation.apply(pass, mean)?;
    Ok(LayerOutput { h: out, alpha_hat })
}

/// Full encoder output.
pub struct EncoderOutput {
    pub h: Var,
    /// `alpha_hat[l][k]` for layer `l`, head `k`.
    pub alpha_hat: Vec<Vec<Var>>,
}

/// Fuses node types once, then runs every layer, threading `α̂` between
/// consecutive layers. Inner layers use `inner`; the last one `last`.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    pass: &mut Pass<'_>,
    h: Var,
    g: &HeteroGraph,
    type_table: Option<NodeTypeTable>,
    layers: &[TypeAwareLayerParams],
    edge_table: EdgeTypeTable,
    settings: &TypeAwareSettings,
    inner: Activation,
    last: Activation,
) -> Result<EncoderOutput> {
    if layers.is_empty() {
        return Err(Error::config("type-aware encoder needs at least one layer"));
    }
    let mut x = combine(pass, h, g, type_table)?;
    let mut history: Vec<Vec<Var>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let act = if l + 1 == layers.len() { last } else { inner };
        let xin = pass.dropout(x, settings.dropout)?;
        let out = layer_forward(
            pass,
            xin,
            g,
            layer,
            edge_table,
            history.last().map(Vec::as_slice),
            settings,
            act,
        )?;
        x = out.h;
        history.push(out.alpha_hat);
    }
    Ok(EncoderOutput {
        h: x,
        alpha_hat: history,
    })
}

#[cfg(test)]
mod tests;
