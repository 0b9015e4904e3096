//! The cascade model: per-type projection, `N` blocks of type-aware then
//! dimension-aware encoding with concatenated outputs, and the task heads.

mod checkpoint;
mod config;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dim_aware::{self, DimLayerParams, DimShape};
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::numerics::{ParamId, ParamStore, Pass, Tensor, Var, DEFAULT_LEAKY_SLOPE};
use crate::type_aware::{
    self, Activation, EdgeTypeTable, NodeTypeTable, ProjectionParams, TypeAwareLayerParams,
    TypeAwareSettings,
};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{CascadeConfig, Task};
pub use train::{
    classification_loss, link_loss, link_scores, Adam, AdamSettings, Batch, LinkBatch, StepStats,
};

const L2_EPS: f64 = 1e-12;

/// Graph-dependent sizes a model is built for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphShape {
    pub feature_dims: Vec<usize>,
    pub num_edge_types: usize,
    /// Output classes; 0 for link prediction.
    pub classes: usize,
}

impl GraphShape {
    pub fn of(g: &HeteroGraph) -> Self {
        GraphShape {
            feature_dims: (0..g.num_node_types()).map(|t| g.feature_dim(t)).collect(),
            num_edge_types: g.num_edge_types(),
            classes: g.labels().map_or(0, |l| l.classes()),
        }
    }

    pub fn num_node_types(&self) -> usize {
        self.feature_dims.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub type_table: NodeTypeTable,
    pub dim_table: NodeTypeTable,
    pub type_layers: Vec<TypeAwareLayerParams>,
    pub dim_layers: Vec<DimLayerParams>,
}

/// `2d → d` map between consecutive blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bridge {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A parameterized model plus the settings it was built with.
#[derive(Clone, Debug)]
pub struct HetCan {
    pub config: CascadeConfig,
    pub shape: GraphShape,
    pub params: ParamStore,
    pub projection: ProjectionParams,
    pub edge_table: EdgeTypeTable,
    pub blocks: Vec<BlockParams>,
    pub bridges: Vec<Bridge>,
    /// `2d × C`; present when `shape.classes > 0`.
    pub head: Option<ParamId>,
}

/// Switches used by ablation checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Bypass every type-table product instead of multiplying by the table.
    pub skip_type_tables: bool,
}

impl HetCan {
    /// Builds and initializes every parameter from `config.seed`.
    pub fn new(config: CascadeConfig, shape: GraphShape) -> Result<Self> {
        config.validate()?;
        if shape.feature_dims.is_empty() {
            return Err(Error::config("graph has no node types"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let d = config.d;
        let projection = ProjectionParams::new(&mut params, &shape.feature_dims, d, &mut rng);
        let edge_table = EdgeTypeTable::new(
            &mut params,
            "edge_types",
            shape.num_edge_types,
            config.edge_dim(),
            &mut rng,
        );
        let dim_shape = DimShape {
            d,
            t: config.t,
            heads: config.dim_heads,
            d_k: config.d_k,
            d_v: config.d_v,
            ffn_hidden: config.ffn_in_dim_encoder.then_some(config.ffn_hidden),
        };
        let types = shape.num_node_types();
        let mut blocks = Vec::with_capacity(config.blocks);
        let mut bridges = Vec::new();
        for b in 0..config.blocks {
            if b > 0 {
                bridges.push(Bridge {
                    weight: params.insert_glorot(format!("bridge{b}.weight"), 2 * d, d, &mut rng),
                    bias: params.insert(format!("bridge{b}.bias"), Tensor::zeros(1, d)),
                });
            }
            let type_table = NodeTypeTable::new(
                &mut params,
                &format!("block{b}.node_types"),
                types,
                d,
                &mut rng,
            );
            let dim_table = if config.share_type_table {
                type_table
            } else {
                NodeTypeTable::new(
                    &mut params,
                    &format!("block{b}.dim_node_types"),
                    types,
                    d,
                    &mut rng,
                )
            };
            let type_layers = (0..config.layers)
                .map(|l| {
                    TypeAwareLayerParams::new(
                        &mut params,
                        &format!("block{b}.type{l}"),
                        config.heads,
                        d,
                        config.edge_dim(),
                        config.edge_hidden(),
                        &mut rng,
                    )
                })
                .collect();
            let dim_layers = (0..config.dim_layers)
                .map(|l| {
                    DimLayerParams::new(
                        &mut params,
                        &format!("block{b}.dim{l}"),
                        &dim_shape,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?;
            blocks.push(BlockParams {
                type_table,
                dim_table,
                type_layers,
                dim_layers,
            });
        }
        let head = (shape.classes > 0)
            .then(|| params.insert_glorot("head.weight", 2 * d, shape.classes, &mut rng));
        Ok(HetCan {
            config,
            shape,
            params,
            projection,
            edge_table,
            blocks,
            bridges,
            head,
        })
    }

    /// Every node-type table, without duplicates.
    pub fn type_tables(&self) -> Vec<NodeTypeTable> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for t in [b.type_table, b.dim_table] {
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
        out
    }

    /// Sets every node-type table to all ones and excludes it from training.
    pub fn freeze_type_tables_to_ones(&mut self) {
        for NodeTypeTable(id) in self.type_tables() {
            self.params.get_mut(id).data_mut().fill(1.0);
            self.params.freeze(id);
        }
    }

    pub fn settings(&self) -> TypeAwareSettings {
        TypeAwareSettings {
            beta: self.config.beta,
            attention_slope: DEFAULT_LEAKY_SLOPE,
            dropout: self.config.dropout,
            attention_dropout: self.config.attention_dropout,
        }
    }

    fn check_graph(&self, g: &HeteroGraph) -> Result<()> {
        if !g.has_self_loops() {
            return Err(Error::graph("model input graph must carry self-loops"));
        }
        let have = GraphShape::of(g);
        if have.feature_dims != self.shape.feature_dims
            || have.num_edge_types != self.shape.num_edge_types
        {
            return Err(Error::graph(format!(
                "graph (feature dims {:?}, {} edge types) does not match the model (feature dims {:?}, {} edge types)",
                have.feature_dims, have.num_edge_types, self.shape.feature_dims, self.shape.num_edge_types
            )));
        }
        Ok(())
    }

    /// One block: `[H' ‖ H̄]`, width `2d`.
    pub fn block_forward(
        &self,
        pass: &mut Pass<'_>,
        h: Var,
        g: &HeteroGraph,
        block: usize,
        opts: ForwardOptions,
    ) -> Result<Var> {
        let p = &self.blocks[block];
        let last = if block + 1 == self.blocks.len() {
            Activation::Identity
        } else {
            Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE)
        };
        let (tt, dt) = if opts.skip_type_tables {
            (None, None)
        } else {
            (Some(p.type_table), Some(p.dim_table))
        };
        let settings = self.settings();
        let out = type_aware::encoder_forward(
            pass,
            h,
            g,
            tt,
            &p.type_layers,
            self.edge_table,
            &settings,
            Activation::LeakyRelu(DEFAULT_LEAKY_SLOPE),
            last,
        )?;
        let hbar = dim_aware::encoder_forward(pass, out.h, g, dt, &p.dim_layers, self.config.t)?;
        pass.tape.concat_cols(&[out.h, hbar])
    }

    /// Final node representations, `n × 2d`.
    pub fn forward_with(
        &self,
        pass: &mut Pass<'_>,
        g: &HeteroGraph,
        opts: ForwardOptions,
    ) -> Result<Var> {
        self.check_graph(g)?;
        let mut h = type_aware::project_features(pass, g, &self.projection)?;
        let mut out = None;
        for b in 0..self.blocks.len() {
            if b > 0 {
                let bridge = self.bridges[b - 1];
                let w = pass.p(bridge.weight);
                let bias = pass.p(bridge.bias);
                let prev = out.expect("previous block output");
                let x = pass.tape.matmul(prev, w)?;
                h = pass.tape.add_row(x, bias)?;
            }
            out = Some(self.block_forward(pass, h, g, b, opts)?);
        }
        let out = out.expect("at least one block");
        if self.config.normalize_output() {
            pass.tape.l2_normalize_rows(out, L2_EPS)
        } else {
            Ok(out)
        }
    }

    pub fn forward(&self, pass: &mut Pass<'_>, g: &HeteroGraph) -> Result<Var> {
        self.forward_with(pass, g, ForwardOptions::default())
    }

    /// `H_f · W_c`, `n × C`.
    pub fn classify(&self, pass: &mut Pass<'_>, h: Var) -> Result<Var> {
        let head = self
            .head
            .ok_or_else(|| Error::config("model was built without a classification head"))?;
        let w = pass.p(head);
        pass.tape.matmul(h, w)
    }

    /// Evaluation-mode representations as a plain tensor.
    pub fn embed(&self, g: &HeteroGraph) -> Result<Tensor> {
        let mut pass = Pass::eval(&self.params);
        let h = self.forward(&mut pass, g)?;
        Ok(pass.tape.value(h).clone())
    }

    /// Evaluation-mode class logits.
    pub fn logits(&self, g: &HeteroGraph) -> Result<Tensor> {
        let mut pass = Pass::eval(&self.params);
        let h = self.forward(&mut pass, g)?;
        let z = self.classify(&mut pass, h)?;
        Ok(pass.tape.value(z).clone())
    }
}

/// `⟨h_src, h_dst⟩` of two rows of `h`.
pub fn link_score(h: &Tensor, src: usize, dst: usize) -> f64 {
    h.row(src).iter().zip(h.row(dst)).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests;
