use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Edge, FeatureBlock, HeteroGraph};

/// Random graph with dense `dim`-wide features per type and self-loops.
pub fn random_graph(
    n: usize,
    types: usize,
    edge_types: usize,
    edges: usize,
    dim: usize,
    seed: u64,
) -> HeteroGraph {
    random_graph_scaled(n, types, edge_types, edges, dim, 1.0, seed)
}

/// As [`random_graph`] with features uniform in `[-scale, scale]`.
pub fn random_graph_scaled(
    n: usize,
    types: usize,
    edge_types: usize,
    edges: usize,
    dim: usize,
    scale: f64,
    seed: u64,
) -> HeteroGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let node_type: Vec<usize> = (0..n)
        .map(|v| {
            if v < types {
                v
            } else {
                rng.gen_range(0..types)
            }
        })
        .collect();
    let mut list = Vec::new();
    for _ in 0..edges {
        let s = rng.gen_range(0..n);
        let d = rng.gen_range(0..n);
        if s != d {
            list.push(Edge::new(s, d, rng.gen_range(0..edge_types)));
        }
    }
    list.sort_by_key(|e| (e.dst, e.src, e.edge_type));
    list.dedup();
    let features = (0..types)
        .map(|t| {
            let nodes: Arc<[usize]> = (0..n).filter(|&v| node_type[v] == t).collect();
            let data = (0..nodes.len() * dim)
                .map(|_| rng.gen_range(-scale..scale))
                .collect();
            FeatureBlock {
                dim,
                nodes,
                data,
                fallback: None,
            }
        })
        .collect();
    HeteroGraph::new(node_type, types, edge_types, list, features)
        .unwrap()
        .add_self_loops()
}
