use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeteroGraph, Labels};
use crate::error::{Error, Result};

/// Disjoint train/valid/test node masks over the labeled target nodes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMasks {
    pub train: Vec<bool>,
    pub valid: Vec<bool>,
    pub test: Vec<bool>,
}

impl SplitMasks {
    pub fn train_nodes(&self) -> Vec<usize> {
        ids(&self.train)
    }

    pub fn valid_nodes(&self) -> Vec<usize> {
        ids(&self.valid)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        ids(&self.test)
    }

    pub(super) fn validate(&self, n: usize, labels: &Labels) -> Result<()> {
        if self.train.len() != n || self.valid.len() != n || self.test.len() != n {
            return Err(Error::graph("mask length differs from node count"));
        }
        for v in 0..n {
            let hits = self.train[v] as u8 + self.valid[v] as u8 + self.test[v] as u8;
            if hits > 1 {
                return Err(Error::graph(format!("node {v} is in more than one split")));
            }
            if (hits == 1) != labels.is_labeled(v) {
                return Err(Error::graph(format!(
                    "masks must cover exactly the labeled nodes (node {v})"
                )));
            }
        }
        Ok(())
    }
}

fn ids(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect()
}

/// Shuffles the labeled nodes with a seeded RNG and cuts them into
/// `round(r_train·n)`, `round(r_valid·n)` and the remainder.
pub fn split_nodes(g: &HeteroGraph, ratios: (f64, f64, f64), seed: u64) -> Result<SplitMasks> {
    let (rt, rv, rs) = ratios;
    if !(rt > 0.0 && rv > 0.0 && rs > 0.0) {
        return Err(Error::config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if (rt + rv + rs - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let labels = g
        .labels()
        .ok_or_else(|| Error::graph("cannot split an unlabeled graph"))?;
    let mut nodes = labels.labeled_nodes();
    let total = nodes.len();
    if total < 3 {
        return Err(Error::graph(format!(
            "need at least 3 labeled nodes to split, found {total}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    nodes.shuffle(&mut rng);
    let clamp = |x: f64| (x.round() as usize).clamp(1, total - 2);
    let n_train = clamp(rt * total as f64);
    let n_valid = (rv * total as f64).round().max(1.0) as usize;
    let n_valid = n_valid.min(total - n_train - 1);
    let n = g.num_nodes();
    let mut masks = SplitMasks {
        train: vec![false; n],
        valid: vec![false; n],
        test: vec![false; n],
    };
    for (k, &v) in nodes.iter().enumerate() {
        if k < n_train {
            masks.train[v] = true;
        } else if k < n_train + n_valid {
            masks.valid[v] = true;
        } else {
            masks.test[v] = true;
        }
    }
    Ok(masks)
}
