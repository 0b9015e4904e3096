use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FeatureFallback;
use crate::kv::{self, Entry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    NodeClassification,
    LinkPrediction,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "node" | "node_classification" => Ok(Task::NodeClassification),
            "link" | "link_prediction" => Ok(Task::LinkPrediction),
            other => Err(Error::config(format!("unknown task '{other}'"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::NodeClassification => "node_classification",
            Task::LinkPrediction => "link_prediction",
        })
    }
}

/// Architecture and regularization settings of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Cascade blocks `N`.
    pub blocks: usize,
    /// Type-aware layers per block `L`.
    pub layers: usize,
    /// Dimension-aware layers per block `L_d`; 0 removes the encoder.
    pub dim_layers: usize,
    pub d: usize,
    pub heads: usize,
    pub dim_heads: usize,
    pub beta: f64,
    /// Edge-type embedding width; 0 means `d`.
    pub d_r: usize,
    /// Transformed edge-type width; 0 means `d_r`.
    pub d_e: usize,
    /// Token width.
    pub t: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub ffn_in_dim_encoder: bool,
    pub ffn_hidden: usize,
    pub share_type_table: bool,
    /// `None` picks the task default: on for link prediction only.
    pub l2_normalize_output: Option<bool>,
    pub symmetrize_edges: bool,
    pub feature_fallback: FeatureFallback,
    pub task: Task,
    pub seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            blocks: 1,
            layers: 2,
            dim_layers: 1,
            d: 64,
            heads: 2,
            dim_heads: 2,
            beta: 0.05,
            d_r: 0,
            d_e: 0,
            t: 1,
            d_k: 8,
            d_v: 8,
            dropout: 0.5,
            attention_dropout: 0.0,
            ffn_in_dim_encoder: false,
            ffn_hidden: 4,
            share_type_table: true,
            l2_normalize_output: None,
            symmetrize_edges: true,
            feature_fallback: FeatureFallback::OneHot,
            task: Task::NodeClassification,
            seed: 0,
        }
    }
}

pub(crate) fn fallback_name(f: FeatureFallback) -> &'static str {
    match f {
        FeatureFallback::OneHot => "one-hot",
        FeatureFallback::AllOne => "all-one",
    }
}

impl CascadeConfig {
    pub fn edge_dim(&self) -> usize {
        if self.d_r == 0 {
            self.d
        } else {
            self.d_r
        }
    }

    pub fn edge_hidden(&self) -> usize {
        if self.d_e == 0 {
            self.edge_dim()
        } else {
            self.d_e
        }
    }

    pub fn normalize_output(&self) -> bool {
        self.l2_normalize_output
            .unwrap_or(self.task == Task::LinkPrediction)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.blocks),
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("dim_heads", self.dim_heads),
            ("t", self.t),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if !self.d.is_multiple_of(self.t) {
            return Err(Error::config(format!(
                "t = {} does not divide d = {}",
                self.t, self.d
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(format!("beta {} outside [0,1]", self.beta)));
        }
        for (k, r) in [
            ("dropout", self.dropout),
            ("attention_dropout", self.attention_dropout),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::config(format!("{k} {r} outside [0,1)")));
            }
        }
        Ok(())
    }

    /// Applies one `key = value` entry; `Ok(false)` if the key is not a model key.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        match e.key.as_str() {
            "blocks" => self.blocks = kv::value(e)?,
            "layers" => self.layers = kv::value(e)?,
            "dim_layers" => self.dim_layers = kv::value(e)?,
            "d" => self.d = kv::value(e)?,
            "heads" => self.heads = kv::value(e)?,
            "dim_heads" => self.dim_heads = kv::value(e)?,
            "beta" => self.beta = kv::value(e)?,
            "d_r" => self.d_r = kv::value(e)?,
            "d_e" => self.d_e = kv::value(e)?,
            "t" => self.t = kv::value(e)?,
            "d_k" => self.d_k = kv::value(e)?,
            "d_v" => self.d_v = kv::value(e)?,
            "dropout" => self.dropout = kv::value(e)?,
            "attention_dropout" => self.attention_dropout = kv::value(e)?,
            "ffn_in_dim_encoder" => self.ffn_in_dim_encoder = kv::value(e)?,
            "ffn_hidden" => self.ffn_hidden = kv::value(e)?,
            "share_type_table" => self.share_type_table = kv::value(e)?,
            "l2_normalize_output" => {
                self.l2_normalize_output = match e.value.as_str() {
                    "auto" => None,
                    _ => Some(kv::value(e)?),
                }
            }
            "symmetrize_edges" => self.symmetrize_edges = kv::value(e)?,
            "feature_fallback" => {
                self.feature_fallback = e
                    .value
                    .parse()
                    .map_err(|err: Error| Error::config(format!("line {}: {err}", e.line)))?
            }
            "task" => {
                self.task = e
                    .value
                    .parse()
                    .map_err(|err: Error| Error::config(format!("line {}: {err}", e.line)))?
            }
            "seed" => self.seed = kv::value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = CascadeConfig::default();
        for e in kv::parse(text)? {
            if !c.apply(&e)? {
                return Err(Error::config(format!(
                    "line {}: unknown key `{}`",
                    e.line, e.key
                )));
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_kv(&self) -> String {
        let l2 = match self.l2_normalize_output {
            None => "auto".to_string(),
            Some(b) => b.to_string(),
        };
        let pairs: Vec<(&str, String)> = vec![
            ("blocks", self.blocks.to_string()),
            ("layers", self.layers.to_string()),
            ("dim_layers", self.dim_layers.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("dim_heads", self.dim_heads.to_string()),
            ("beta", self.beta.to_string()),
            ("d_r", self.d_r.to_string()),
            ("d_e", self.d_e.to_string()),
            ("t", self.t.to_string()),
            ("d_k", self.d_k.to_string()),
            ("d_v", self.d_v.to_string()),
            ("dropout", self.dropout.to_string()),
            ("attention_dropout", self.attention_dropout.to_string()),
            ("ffn_in_dim_encoder", self.ffn_in_dim_encoder.to_string()),
            ("ffn_hidden", self.ffn_hidden.to_string()),
            ("share_type_table", self.share_type_table.to_string()),
            ("l2_normalize_output", l2),
            ("symmetrize_edges", self.symmetrize_edges.to_string()),
            (
                "feature_fallback",
                fallback_name(self.feature_fallback).to_string(),
            ),
            ("task", self.task.to_string()),
            ("seed", self.seed.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
