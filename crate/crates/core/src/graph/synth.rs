use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Edge, FeatureBlock, FeatureFallback, HeteroGraph, Labels};
use crate::error::{Error, Result};

/// Class-mean separation (in noise standard deviations) at `signal = 1`.
const CENTROID_SCALE: f64 = 4.0;

/// Parameters of the planted-partition generator.
///
/// Node type 0 is the labeled target type. Every node draws a latent class;
/// features are Gaussian around a per-(type, class) centroid scaled by
/// `signal`, and edges prefer endpoints of the same class with probability
/// `homophily`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub nodes_per_type: Vec<usize>,
    pub num_edge_types: usize,
    pub num_classes: usize,
    /// Feature width per node type; 0 leaves the type featureless (one-hot).
    pub feature_dims: Vec<usize>,
    pub signal: f64,
    pub homophily: f64,
    /// Edges drawn from each node towards every other node type.
    pub degree: usize,
    /// Extra edges a target node sends to the node type preferred by its
    /// class, as a fraction of `degree`. Zero disables type-correlated wiring.
    pub type_affinity: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            nodes_per_type: vec![100, 50, 50],
            num_edge_types: 3,
            num_classes: 3,
            feature_dims: vec![16, 8, 8],
            signal: 1.0,
            homophily: 0.8,
            degree: 3,
            type_affinity: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let types = self.nodes_per_type.len();
        if types == 0 || self.nodes_per_type.contains(&0) {
            return Err(Error::config("every node type needs at least one node"));
        }
        if self.feature_dims.len() != types {
            return Err(Error::config(format!(
                "{} feature dims for {types} node types",
                self.feature_dims.len()
            )));
        }
        if self.num_edge_types == 0 || self.num_classes == 0 || self.degree == 0 {
            return Err(Error::config(
                "edge types, classes and degree must be positive",
            ));
        }
        for (name, v) in [
            ("signal", self.signal),
            ("homophily", self.homophily),
            ("type_affinity", self.type_affinity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Edge type for the node-type pair `(a, b)`, `a <= b`.
fn pair_type(a: usize, b: usize, types: usize, edge_types: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    // index of (a, b) among unordered pairs in row-major order
    let idx = a * types - a * (a + 1) / 2 + b;
    idx % edge_types
}

pub fn synth_generate(spec: &SynthSpec) -> Result<HeteroGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let types = spec.nodes_per_type.len();
    let classes = spec.num_classes;

    let mut node_type = Vec::new();
    for (t, &count) in spec.nodes_per_type.iter().enumerate() {
        node_type.extend(std::iter::repeat_n(t, count));
    }
    let n = node_type.len();
    let class: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();

    // members[t][c] = nodes of type t in class c
    let mut members = vec![vec![Vec::new(); classes]; types];
    let mut by_type = vec![Vec::new(); types];
    for v in 0..n {
        members[node_type[v]][class[v]].push(v);
        by_type[node_type[v]].push(v);
    }

    let mut features = Vec::with_capacity(types);
    for (t, nodes) in by_type.iter().enumerate() {
        let nodes = nodes.clone();
        let dim = spec.feature_dims[t];
        if dim == 0 {
            features.push(FeatureBlock::fallback(
                nodes.into(),
                FeatureFallback::OneHot,
            ));
            continue;
        }
        let centroids: Vec<Vec<f64>> = (0..classes)
            .map(|c| {
                if dim >= classes {
                    (0..dim).map(|k| if k == c { 1.0 } else { 0.0 }).collect()
                } else {
                    let raw: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    raw.into_iter().map(|x| x / norm).collect()
                }
            })
            .collect();
        let mut data = Vec::with_capacity(nodes.len() * dim);
        for &v in &nodes {
            for &mu in &centroids[class[v]] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(spec.signal * CENTROID_SCALE * mu + noise);
            }
        }
        features.push(FeatureBlock {
            dim,
            nodes: nodes.into(),
            data,
            fallback: None,
        });
    }

    let pick = |rng: &mut ChaCha8Rng, t: usize, c: usize| -> usize {
        let same = &members[t][c];
        if !same.is_empty() && rng.gen::<f64>() < spec.homophily {
            same[rng.gen_range(0..same.len())]
        } else {
            by_type[t][rng.gen_range(0..by_type[t].len())]
        }
    };

    let mut edges = Vec::new();
    for v in 0..n {
        let tv = node_type[v];
        let others: Vec<usize> = if types == 1 {
            vec![0]
        } else {
            (tv + 1..types).collect()
        };
        for t in others {
            let ty = pair_type(tv, t, types, spec.num_edge_types);
            for _ in 0..spec.degree {
                let u = pick(&mut rng, t, class[v]);
                if u != v {
                    edges.push(Edge::new(u, v, ty));
                }
            }
        }
        if tv == 0 && types > 1 && spec.type_affinity > 0.0 {
            let preferred = 1 + class[v] % (types - 1);
            let extra = (spec.type_affinity * spec.degree as f64 * 2.0).round() as usize;
            let ty = pair_type(0, preferred, types, spec.num_edge_types);
            for _ in 0..extra {
                let u = by_type[preferred][rng.gen_range(0..by_type[preferred].len())];
                edges.push(Edge::new(u, v, ty));
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();

    let g = HeteroGraph::new(node_type, types, spec.num_edge_types, edges, features)?;
    let of = (0..n)
        .map(|v| (g.node_type(v) == 0).then_some(class[v]))
        .collect();
    g.with_labels(Labels::Single { classes, of })
}
