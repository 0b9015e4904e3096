use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SynthSpec;
use crate::kv::{self, Entry};
use crate::model::{AdamSettings, CascadeConfig, Task};

/// Which encoder a run disables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Every node-type table frozen to all ones.
    NoTypeEncoder,
    /// No dimension-aware layers.
    NoDimEncoder,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_type" | "no_type_encoder" => Ok(Ablation::NoTypeEncoder),
            "no_dim" | "no_dim_encoder" => Ok(Ablation::NoDimEncoder),
            other => Err(Error::config(format!("unknown ablation '{other}'"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoTypeEncoder => "no_type_encoder",
            Ablation::NoDimEncoder => "no_dim_encoder",
        })
    }
}

/// Validation metric used for early stopping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MicroF1,
    MacroF1,
    Accuracy,
    RocAuc,
    Mrr,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro_f1" => Ok(Metric::MicroF1),
            "macro_f1" => Ok(Metric::MacroF1),
            "accuracy" => Ok(Metric::Accuracy),
            "roc_auc" => Ok(Metric::RocAuc),
            "mrr" => Ok(Metric::Mrr),
            other => Err(Error::config(format!("unknown metric '{other}'"))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::MicroF1 => "micro_f1",
            Metric::MacroF1 => "macro_f1",
            Metric::Accuracy => "accuracy",
            Metric::RocAuc => "roc_auc",
            Metric::Mrr => "mrr",
        })
    }
}

/// Held-out edge fractions and negative sampling for link prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkSettings {
    /// Edge types whose edges are predicted; empty means all of them.
    pub edge_types: Vec<usize>,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    /// Negatives per test positive in each ranking group.
    pub eval_negatives: usize,
}

impl Default for LinkSettings {
    fn default() -> Self {
        LinkSettings {
            edge_types: Vec::new(),
            valid_ratio: 0.1,
            test_ratio: 0.2,
            eval_negatives: 10,
        }
    }
}

/// Where the graph comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Dir { path: PathBuf, multi_label: bool },
    Synth(SynthSpec),
}

/// Everything one experiment needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<DataSource>,
    pub model: CascadeConfig,
    pub optimizer: AdamSettings,
    pub max_epochs: usize,
    pub patience: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Early-stopping metric; `None` picks micro-F1 or ROC-AUC by task.
    pub metric: Option<Metric>,
    pub split: (f64, f64, f64),
    pub seeds: Vec<u64>,
    pub ablation: Ablation,
    pub link: LinkSettings,
    pub out_dir: Option<PathBuf>,
    /// Seeds trained concurrently.
    pub workers: usize,
    pub save_checkpoints: bool,
    pub gradcheck_step: f64,
    /// Sampled entries per parameter tensor; 0 checks all of them.
    pub gradcheck_entries: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            model: CascadeConfig::default(),
            optimizer: AdamSettings::default(),
            max_epochs: 500,
            patience: 30,
            eval_every: 1,
            metric: None,
            split: (0.24, 0.06, 0.70),
            seeds: vec![1, 2, 3, 4, 5],
            ablation: Ablation::Full,
            link: LinkSettings::default(),
            out_dir: None,
            workers: 1,
            save_checkpoints: true,
            gradcheck_step: 1e-5,
            gradcheck_entries: 0,
        }
    }
}

/// Applies a `synth.*`-stripped key to a generator spec.
pub fn apply_synth(spec: &mut SynthSpec, key: &str, e: &Entry) -> Result<bool> {
    match key {
        "nodes_per_type" => spec.nodes_per_type = kv::list(e)?,
        "num_edge_types" => spec.num_edge_types = kv::value(e)?,
        "num_classes" => spec.num_classes = kv::value(e)?,
        "feature_dims" => spec.feature_dims = kv::list(e)?,
        "signal" => spec.signal = kv::value(e)?,
        "homophily" => spec.homophily = kv::value(e)?,
        "degree" => spec.degree = kv::value(e)?,
        "type_affinity" => spec.type_affinity = kv::value(e)?,
        "seed" => spec.seed = kv::value(e)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Parses a generator spec file with unprefixed keys.
pub fn synth_spec_from_kv(text: &str) -> Result<SynthSpec> {
    let mut spec = SynthSpec::default();
    for e in kv::parse(text)? {
        if !apply_synth(&mut spec, &e.key, &e)? {
            return Err(Error::config(format!(
                "line {}: unknown key `{}`",
                e.line, e.key
            )));
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn unknown(e: &Entry) -> Error {
    Error::config(format!("line {}: unknown key `{}`", e.line, e.key))
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut dir: Option<PathBuf> = None;
        let mut multi_label = false;
        let mut synth: Option<SynthSpec> = None;
        let mut use_synth = false;
        let mut repeat: Option<usize> = None;
        let mut seeds: Option<Vec<u64>> = None;
        for e in kv::parse(text)? {
            if c.model.apply(&e)? {
                continue;
            }
            if let Some(key) = e.key.strip_prefix("synth.") {
                let spec = synth.get_or_insert_with(SynthSpec::default);
                if !apply_synth(spec, key, &e)? {
                    return Err(unknown(&e));
                }
                continue;
            }
            match e.key.as_str() {
                "dataset_dir" => dir = Some(PathBuf::from(&e.value)),
                "multi_label" => multi_label = kv::value(&e)?,
                "synth" => use_synth = kv::value(&e)?,
                "lr" => c.optimizer.lr = kv::value(&e)?,
                "weight_decay" => c.optimizer.weight_decay = kv::value(&e)?,
                "adam_beta1" => c.optimizer.beta1 = kv::value(&e)?,
                "adam_beta2" => c.optimizer.beta2 = kv::value(&e)?,
                "adam_eps" => c.optimizer.eps = kv::value(&e)?,
                "max_epochs" => c.max_epochs = kv::value(&e)?,
                "patience" => c.patience = kv::value(&e)?,
                "eval_every" => c.eval_every = kv::value(&e)?,
                "metric" => {
                    c.metric = match e.value.as_str() {
                        "auto" => None,
                        v => Some(v.parse()?),
                    }
                }
                "train_ratio" => c.split.0 = kv::value(&e)?,
                "valid_ratio" => c.split.1 = kv::value(&e)?,
                "test_ratio" => c.split.2 = kv::value(&e)?,
                "seeds" => seeds = Some(kv::list(&e)?),
                "repeat" => repeat = Some(kv::value(&e)?),
                "ablation" => c.ablation = e.value.parse()?,
                "link_edge_types" => c.link.edge_types = kv::list(&e)?,
                "link_valid_ratio" => c.link.valid_ratio = kv::value(&e)?,
                "link_test_ratio" => c.link.test_ratio = kv::value(&e)?,
                "eval_negatives" => c.link.eval_negatives = kv::value(&e)?,
                "out_dir" => c.out_dir = Some(PathBuf::from(&e.value)),
                "workers" => c.workers = kv::value(&e)?,
                "save_checkpoints" => c.save_checkpoints = kv::value(&e)?,
                "gradcheck_step" => c.gradcheck_step = kv::value(&e)?,
                "gradcheck_entries" => c.gradcheck_entries = kv::value(&e)?,
                _ => return Err(unknown(&e)),
            }
        }
        c.seeds = match (seeds, repeat) {
            (Some(s), Some(r)) if s.len() != r => {
                return Err(Error::config(format!(
                    "repeat = {r} but {} seeds listed",
                    s.len()
                )))
            }
            (Some(s), _) => s,
            (None, Some(r)) => (1..=r as u64).collect(),
            (None, None) => c.seeds,
        };
        c.data = match (dir, use_synth || synth.is_some()) {
            (Some(_), true) => {
                return Err(Error::config("set either dataset_dir or synth, not both"))
            }
            (Some(path), false) => Some(DataSource::Dir { path, multi_label }),
            (None, true) => Some(DataSource::Synth(synth.unwrap_or_default())),
            (None, false) => None,
        };
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; a relative `dataset_dir` is taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = RunConfig::from_kv(&text)?;
        if let Some(DataSource::Dir { path: dir, .. }) = &mut c.data {
            if dir.is_relative() {
                if let Some(base) = path.parent() {
                    *dir = base.join(&*dir);
                }
            }
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("repeat count must be at least 1"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config(format!(
                "seeds must be distinct, got {:?}",
                self.seeds
            )));
        }
        if self.max_epochs == 0 || self.eval_every == 0 || self.workers == 0 {
            return Err(Error::config(
                "max_epochs, eval_every and workers must be positive",
            ));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::config(format!("invalid optimizer settings {o:?}")));
        }
        let l = &self.link;
        if !(l.valid_ratio > 0.0 && l.test_ratio > 0.0 && l.valid_ratio + l.test_ratio < 1.0) {
            return Err(Error::config(
                "link valid and test ratios must be positive and sum below 1",
            ));
        }
        if l.eval_negatives == 0 {
            return Err(Error::config("eval_negatives must be positive"));
        }
        if self.gradcheck_step.is_nan() || self.gradcheck_step <= 0.0 {
            return Err(Error::config("gradcheck_step must be positive"));
        }
        if let Some(m) = self.metric {
            let link_metric = matches!(m, Metric::RocAuc | Metric::Mrr);
            if link_metric != (self.model.task == Task::LinkPrediction) {
                return Err(Error::config(format!(
                    "metric {m} does not apply to {}",
                    self.model.task
                )));
            }
        }
        if let Some(DataSource::Synth(spec)) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn metric(&self) -> Metric {
        self.metric.unwrap_or(match self.model.task {
            Task::NodeClassification => Metric::MicroF1,
            Task::LinkPrediction => Metric::RocAuc,
        })
    }
}
