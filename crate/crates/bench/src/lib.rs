//! Random heterogeneous graphs for benchmarks.

use hetcan::graph::{Edge, FeatureBlock, HeteroGraph, Labels};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GraphParams {
    pub nodes: usize,
    /// Directed edges drawn before de-duplication; self-loops come on top.
    pub edges: usize,
    pub node_types: usize,
    pub edge_types: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for GraphParams {
    fn default() -> Self {
        GraphParams {
            nodes: 2000,
            edges: 20_000,
            node_types: 3,
            edge_types: 3,
            feature_dim: 8,
            classes: 3,
            seed: 7,
        }
    }
}

/// Uniform random typed graph with self-loops, uniform features in
/// [-1, 1) and a random class on every type-0 node.
pub fn random_graph(p: GraphParams) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let node_type: Vec<usize> = (0..p.nodes)
        .map(|v| {
            if v < p.node_types {
                v
            } else {
                rng.gen_range(0..p.node_types)
            }
        })
        .collect();
    let mut edges = Vec::with_capacity(p.edges);
    for _ in 0..p.edges {
        let (a, b) = (rng.gen_range(0..p.nodes), rng.gen_range(0..p.nodes));
        if a != b {
            edges.push(Edge::new(a, b, rng.gen_range(0..p.edge_types)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let features = (0..p.node_types)
        .map(|t| {
            let nodes: Vec<usize> = (0..p.nodes).filter(|&v| node_type[v] == t).collect();
            let data = (0..nodes.len() * p.feature_dim)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect();
            FeatureBlock {
                dim: p.feature_dim,
                nodes: nodes.into(),
                data,
                fallback: None,
            }
        })
        .collect();
    let labels = Labels::Single {
        classes: p.classes,
        of: node_type
            .iter()
            .map(|&t| (t == 0).then(|| rng.gen_range(0..p.classes)))
            .collect(),
    };
    HeteroGraph::new(node_type, p.node_types, p.edge_types, edges, features)
        .and_then(|g| g.with_labels(labels))
        .expect("random graph is valid")
        .add_self_loops()
}
