use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Ablation, Metric};
use super::metrics::mean_std;
use crate::error::Result;
use crate::model::Task;

/// Test-time scores; fields that do not apply to the task are absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub micro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_auc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mrr: Option<f64>,
}

impl EvalMetrics {
    pub fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::MicroF1 => self.micro_f1,
            Metric::MacroF1 => self.macro_f1,
            Metric::Accuracy => self.accuracy,
            Metric::RocAuc => self.roc_auc,
            Metric::Mrr => self.mrr,
        }
    }

    fn named(&self) -> Vec<(&'static str, f64)> {
        [
            ("micro_f1", self.micro_f1),
            ("macro_f1", self.macro_f1),
            ("accuracy", self.accuracy),
            ("roc_auc", self.roc_auc),
            ("mrr", self.mrr),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.map(|v| (k, v)))
        .collect()
    }
}

/// One training epoch. Wall-clock time stays out of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Present on validation epochs.
    pub val_metric: Option<f64>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub completed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    pub best_epoch: usize,
    pub best_val_metric: Option<f64>,
    pub train: EvalMetrics,
    pub test: EvalMetrics,
    /// Test scores of the freshly initialized model.
    pub untrained: EvalMetrics,
    pub epochs: Vec<EpochRecord>,
}

impl RunReport {
    pub(crate) fn new(seed: u64) -> Self {
        RunReport {
            seed,
            completed: false,
            error: None,
            exit_code: None,
            best_epoch: 0,
            best_val_metric: None,
            train: EvalMetrics::default(),
            test: EvalMetrics::default(),
            untrained: EvalMetrics::default(),
            epochs: Vec::new(),
        }
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        mean_std(&self.epochs.iter().map(|e| e.seconds).collect::<Vec<_>>()).0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: Task,
    pub ablation: Ablation,
    pub metric: Metric,
    pub seeds: Vec<u64>,
    /// False when at least one run aborted.
    pub complete: bool,
    pub runs: Vec<RunReport>,
    /// Test metrics over the completed runs.
    pub aggregate: BTreeMap<String, Summary>,
}

impl MetricsReport {
    pub(crate) fn assemble(
        task: Task,
        ablation: Ablation,
        metric: Metric,
        runs: Vec<RunReport>,
    ) -> Self {
        let done: Vec<&RunReport> = runs.iter().filter(|r| r.completed).collect();
        let mut aggregate = BTreeMap::new();
        let mut columns: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in &done {
            for (k, v) in r.test.named() {
                columns.entry(k).or_default().push(v);
            }
            columns
                .entry("best_epoch")
                .or_default()
                .push(r.best_epoch as f64);
        }
        for (k, xs) in columns {
            let (mean, std) = mean_std(&xs);
            aggregate.insert(
                k.to_string(),
                Summary {
                    mean,
                    std,
                    runs: xs.len(),
                },
            );
        }
        MetricsReport {
            task,
            ablation,
            metric,
            seeds: runs.iter().map(|r| r.seed).collect(),
            complete: done.len() == runs.len(),
            runs,
            aggregate,
        }
    }

    pub fn summary(&self, name: &str) -> Option<Summary> {
        self.aggregate.get(name).copied()
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One line per run, then mean and std rows over the completed runs.
    pub fn to_csv(&self) -> String {
        let cols = ["micro_f1", "macro_f1", "accuracy", "roc_auc", "mrr"];
        let fmt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = String::from("seed,completed,best_epoch,epochs,micro_f1,macro_f1,accuracy,roc_auc,mrr,mean_epoch_seconds\n");
        for r in &self.runs {
            let t = &r.test;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.seed,
                r.completed,
                r.best_epoch,
                r.epochs.len(),
                fmt(t.micro_f1),
                fmt(t.macro_f1),
                fmt(t.accuracy),
                fmt(t.roc_auc),
                fmt(t.mrr),
                r.mean_epoch_seconds()
            );
        }
        let secs: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.completed)
            .map(|r| r.mean_epoch_seconds())
            .collect();
        let (sm, ss) = mean_std(&secs);
        for (label, pick, time) in [("mean", 0, sm), ("std", 1, ss)] {
            let best = self
                .summary("best_epoch")
                .map(|s| if pick == 0 { s.mean } else { s.std });
            let cells: Vec<String> = cols
                .iter()
                .map(|c| {
                    fmt(self
                        .summary(c)
                        .map(|s| if pick == 0 { s.mean } else { s.std }))
                })
                .collect();
            let _ = writeln!(out, "{label},,{},,{},{time}", fmt(best), cells.join(","));
        }
        out
    }

    /// Writes `report.json`, `summary.csv` and one `run_<seed>.jsonl` per run.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json()?)?;
        fs::write(dir.join("summary.csv"), self.to_csv())?;
        for r in &self.runs {
            let mut lines = String::new();
            for e in &r.epochs {
                let row = serde_json::json!({
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "val_metric": e.val_metric,
                    "seconds": e.seconds,
                });
                lines.push_str(&row.to_string());
                lines.push('\n');
            }
            fs::write(dir.join(format!("run_{}.jsonl", r.seed)), lines)?;
        }
        Ok(())
    }
}
