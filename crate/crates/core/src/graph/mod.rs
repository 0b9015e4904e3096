//! Heterogeneous graph: typed nodes, typed edges stored as incoming CSR,
//! per-type feature blocks, labels and split masks.

mod io;
mod split;
mod synth;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Segments;

pub use io::{
    load_graph, load_graph_dir, write_graph, FileFormat, LoadOptions, EDGE_FILE, HGB_EDGE_FILE,
    HGB_LABEL_FILES, HGB_NODE_FILE, LABEL_FILE, NODE_FILE,
};
pub use split::{split_nodes, SplitMasks};
pub use synth::{synth_generate, SynthSpec};

/// A typed directed edge `src → dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: usize,
}

impl Edge {
    pub fn new(src: usize, dst: usize, edge_type: usize) -> Self {
        Edge {
            src,
            dst,
            edge_type,
        }
    }
}

/// How feature-less node types are filled in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFallback {
    /// Identity features: width equals the node count of the type.
    OneHot,
    /// A single constant feature of value 1.
    AllOne,
}

impl std::str::FromStr for FeatureFallback {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-hot" | "onehot" | "one_hot" => Ok(FeatureFallback::OneHot),
            "all-one" | "allone" | "all_one" => Ok(FeatureFallback::AllOne),
            other => Err(Error::config(format!("unknown feature fallback '{other}'"))),
        }
    }
}

/// Dense features of every node of one type, rows in ascending node id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBlock {
    pub dim: usize,
    pub nodes: Arc<[usize]>,
    pub data: Vec<f64>,
    /// Set when the block was synthesized rather than read.
    pub fallback: Option<FeatureFallback>,
}

impl FeatureBlock {
    pub fn fallback(nodes: Arc<[usize]>, kind: FeatureFallback) -> Self {
        let n = nodes.len();
        let (dim, data) = match kind {
            FeatureFallback::OneHot => {
                let mut d = vec![0.0; n * n];
                for i in 0..n {
                    d[i * n + i] = 1.0;
                }
                (n, d)
            }
            FeatureFallback::AllOne => (1, vec![1.0; n]),
        };
        FeatureBlock {
            dim,
            nodes,
            data,
            fallback: Some(kind),
        }
    }

    pub fn row(&self, local: usize) -> &[f64] {
        &self.data[local * self.dim..(local + 1) * self.dim]
    }
}

/// Node labels of the target type.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single {
        classes: usize,
        of: Vec<Option<usize>>,
    },
    Multi {
        classes: usize,
        of: Vec<Option<Vec<usize>>>,
    },
}

impl Labels {
    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn is_labeled(&self, node: usize) -> bool {
        match self {
            Labels::Single { of, .. } => of[node].is_some(),
            Labels::Multi { of, .. } => of[node].is_some(),
        }
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    pub fn labeled_nodes(&self) -> Vec<usize> {
        let n = match self {
            Labels::Single { of, .. } => of.len(),
            Labels::Multi { of, .. } => of.len(),
        };
        (0..n).filter(|&i| self.is_labeled(i)).collect()
    }
}

/// Immutable heterogeneous graph.
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    node_type: Arc<[usize]>,
    local_index: Arc<[usize]>,
    num_node_types: usize,
    num_edge_types: usize,
    offsets: Segments,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
    edge_type: Arc<[usize]>,
    self_loops: bool,
    features: Vec<FeatureBlock>,
    labels: Option<Labels>,
    target_type: Option<usize>,
    masks: Option<SplitMasks>,
}

impl HeteroGraph {
    /// Validates and builds a graph. Incoming lists are stored sorted by
    /// `(src, edge_type)`, so the result does not depend on the order of
    /// `edges`.
    pub fn new(
        node_type: Vec<usize>,
        num_node_types: usize,
        num_edge_types: usize,
        edges: Vec<Edge>,
        features: Vec<FeatureBlock>,
    ) -> Result<Self> {
        let n = node_type.len();
        if let Some((v, &t)) = node_type
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= num_node_types)
        {
            return Err(Error::graph(format!(
                "node {v} has type {t} >= {num_node_types}"
            )));
        }
        let mut local_index = vec![0; n];
        let mut counts = vec![0usize; num_node_types];
        for (v, &t) in node_type.iter().enumerate() {
            local_index[v] = counts[t];
            counts[t] += 1;
        }
        if features.len() != num_node_types {
            return Err(Error::graph(format!(
                "{} feature blocks for {num_node_types} node types",
                features.len()
            )));
        }
        for (t, block) in features.iter().enumerate() {
            let expected: Vec<usize> = (0..n).filter(|&v| node_type[v] == t).collect();
            if block.nodes.as_ref() != expected.as_slice() {
                return Err(Error::graph(format!(
                    "feature block {t} does not list the nodes of type {t}"
                )));
            }
            if block.data.len() != block.dim * block.nodes.len() {
                return Err(Error::graph(format!(
                    "feature block {t}: every row must have width {}",
                    block.dim
                )));
            }
            if block.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::graph(format!(
                    "feature block {t} has non-finite values"
                )));
            }
        }
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(Error::graph(format!(
                    "edge {}->{} references a node >= {n}",
                    e.src, e.dst
                )));
            }
        }
        let self_loop_type = num_edge_types;
        let mut self_loops = false;
        for e in &edges {
            if e.edge_type == self_loop_type {
                if e.src != e.dst {
                    return Err(Error::graph(
                        "reserved self-loop type used on a non-loop edge",
                    ));
                }
                self_loops = true;
            } else if e.edge_type > self_loop_type {
                return Err(Error::graph(format!(
                    "edge type {} >= {num_edge_types}",
                    e.edge_type
                )));
            }
        }
        let mut edges = edges;
        edges.sort_unstable_by_key(|e| (e.dst, e.src, e.edge_type));
        let mut g = Self::from_sorted(
            node_type,
            local_index,
            num_node_types,
            num_edge_types,
            &edges,
            features,
        );
        g.self_loops = self_loops;
        Ok(g)
    }

    fn from_sorted(
        node_type: Vec<usize>,
        local_index: Vec<usize>,
        num_node_types: usize,
        num_edge_types: usize,
        edges: &[Edge],
        features: Vec<FeatureBlock>,
    ) -> Self {
        let n = node_type.len();
        let mut offsets = vec![0usize; n + 1];
        for e in edges {
            offsets[e.dst + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        HeteroGraph {
            node_type: node_type.into(),
            local_index: local_index.into(),
            num_node_types,
            num_edge_types,
            offsets: Segments::new(offsets).expect("prefix sums are monotone"),
            src: edges.iter().map(|e| e.src).collect(),
            dst: edges.iter().map(|e| e.dst).collect(),
            edge_type: edges.iter().map(|e| e.edge_type).collect(),
            self_loops: false,
            features,
            labels: None,
            target_type: None,
            masks: None,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.node_type.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn num_node_types(&self) -> usize {
        self.num_node_types
    }

    /// Edge types present in the data, excluding the reserved self-loop type.
    pub fn num_edge_types(&self) -> usize {
        self.num_edge_types
    }

    /// The reserved self-loop type, equal to [`num_edge_types`](Self::num_edge_types).
    pub fn self_loop_type(&self) -> usize {
        self.num_edge_types
    }

    pub fn has_self_loops(&self) -> bool {
        self.self_loops
    }

    pub fn node_types(&self) -> &Arc<[usize]> {
        &self.node_type
    }

    pub fn node_type(&self, v: usize) -> usize {
        self.node_type[v]
    }

    pub fn local_index(&self, v: usize) -> usize {
        self.local_index[v]
    }

    pub fn nodes_of_type(&self, t: usize) -> &Arc<[usize]> {
        &self.features[t].nodes
    }

    /// Incoming-edge groups, one per target node.
    pub fn in_segments(&self) -> &Segments {
        &self.offsets
    }

    pub fn edge_sources(&self) -> &Arc<[usize]> {
        &self.src
    }

    pub fn edge_targets(&self) -> &Arc<[usize]> {
        &self.dst
    }

    pub fn edge_types(&self) -> &Arc<[usize]> {
        &self.edge_type
    }

    pub fn in_edges(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets.range(v)
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.num_edges()).map(move |k| Edge::new(self.src[k], self.dst[k], self.edge_type[k]))
    }

    pub fn features(&self) -> &[FeatureBlock] {
        &self.features
    }

    pub fn feature_dim(&self, t: usize) -> usize {
        self.features[t].dim
    }

    pub fn feature_row(&self, v: usize) -> &[f64] {
        self.features[self.node_type[v]].row(self.local_index[v])
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn target_type(&self) -> Option<usize> {
        self.target_type
    }

    pub fn masks(&self) -> Option<&SplitMasks> {
        self.masks.as_ref()
    }

    /// Attaches labels; every labeled node must share one node type.
    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        let len = match &labels {
            Labels::Single { of, .. } => of.len(),
            Labels::Multi { of, .. } => of.len(),
        };
        if len != self.num_nodes() {
            return Err(Error::graph(format!(
                "{len} label slots for {} nodes",
                self.num_nodes()
            )));
        }
        let classes = labels.classes();
        let in_range = match &labels {
            Labels::Single { of, .. } => of.iter().flatten().all(|&c| c < classes),
            Labels::Multi { of, .. } => of.iter().flatten().flatten().all(|&c| c < classes),
        };
        if !in_range {
            return Err(Error::graph(format!("label id >= {classes}")));
        }
        let labeled = labels.labeled_nodes();
        let target = labeled.first().map(|&v| self.node_type[v]);
        if let Some(t) = target {
            if let Some(&v) = labeled.iter().find(|&&v| self.node_type[v] != t) {
                return Err(Error::graph(format!(
                    "labeled node {v} has type {} but target type is {t}",
                    self.node_type[v]
                )));
            }
        }
        self.labels = Some(labels);
        self.target_type = target;
        self.masks = None;
        Ok(self)
    }

    /// Attaches split masks; they must partition the labeled nodes.
    pub fn with_masks(mut self, masks: SplitMasks) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::graph("masks need labels"))?;
        masks.validate(self.num_nodes(), labels)?;
        self.masks = Some(masks);
        Ok(self)
    }

    /// Adds one `v → v` edge per node with the reserved type. Idempotent.
    pub fn add_self_loops(&self) -> HeteroGraph {
        if self.self_loops {
            return self.clone();
        }
        let mut edges: Vec<Edge> = self.edges().collect();
        edges.extend((0..self.num_nodes()).map(|v| Edge::new(v, v, self.self_loop_type())));
        self.rebuilt(edges, true)
    }

    /// Union of the edge set with its reverse; reverse edges share the
    /// forward edge's type and exact duplicates are dropped.
    pub fn symmetrized(&self) -> HeteroGraph {
        let mut edges: Vec<Edge> = self.edges().collect();
        edges.extend(self.edges().map(|e| Edge::new(e.dst, e.src, e.edge_type)));
        edges.sort_unstable();
        edges.dedup();
        self.rebuilt(edges, self.self_loops)
    }

    /// Drops the given edges (matched on `src`, `dst`, type).
    pub fn without_edges(&self, remove: &std::collections::HashSet<Edge>) -> HeteroGraph {
        let edges = self.edges().filter(|e| !remove.contains(e)).collect();
        self.rebuilt(edges, self.self_loops)
    }

    /// Same graph with every incoming list stored in a random order. Encoder
    /// outputs must not depend on this order.
    pub fn shuffle_neighbor_order(&self, seed: u64) -> HeteroGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = self.clone();
        let mut src = self.src.to_vec();
        let mut et = self.edge_type.to_vec();
        for v in 0..self.num_nodes() {
            let r = self.in_edges(v);
            let mut perm: Vec<usize> = r.clone().collect();
            perm.shuffle(&mut rng);
            let s: Vec<usize> = perm.iter().map(|&k| self.src[k]).collect();
            let t: Vec<usize> = perm.iter().map(|&k| self.edge_type[k]).collect();
            src[r.clone()].copy_from_slice(&s);
            et[r].copy_from_slice(&t);
        }
        g.src = src.into();
        g.edge_type = et.into();
        g
    }

    fn rebuilt(&self, mut edges: Vec<Edge>, self_loops: bool) -> HeteroGraph {
        edges.sort_unstable_by_key(|e| (e.dst, e.src, e.edge_type));
        let mut g = Self::from_sorted(
            self.node_type.to_vec(),
            self.local_index.to_vec(),
            self.num_node_types,
            self.num_edge_types,
            &edges,
            self.features.clone(),
        );
        g.self_loops = self_loops;
        g.labels = self.labels.clone();
        g.target_type = self.target_type;
        g.masks = self.masks.clone();
        g
    }
}

#[cfg(test)]
mod tests;
