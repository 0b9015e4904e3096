use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::HetCan;
use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::numerics::{ParamStore, Pass, Var};

/// Node pairs with 0/1 targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkBatch {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub targets: Arc<[f64]>,
}

impl LinkBatch {
    pub fn new(positives: &[(usize, usize)], negatives: &[(usize, usize)]) -> Self {
        let all: Vec<(usize, usize)> = positives.iter().chain(negatives).copied().collect();
        let targets: Vec<f64> = positives
            .iter()
            .map(|_| 1.0)
            .chain(negatives.iter().map(|_| 0.0))
            .collect();
        LinkBatch {
            src: all.iter().map(|p| p.0).collect(),
            dst: all.iter().map(|p| p.1).collect(),
            targets: targets.into(),
        }
    }

    pub fn positives(&self) -> usize {
        self.targets.iter().filter(|&&t| t == 1.0).count()
    }
}

/// What a training step fits.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    /// Single-label nodes and their classes.
    Nodes {
        nodes: Arc<[usize]>,
        labels: Arc<[usize]>,
    },
    /// Multi-label nodes with a row-major `nodes × C` 0/1 target matrix.
    MultiLabel {
        nodes: Arc<[usize]>,
        targets: Arc<[f64]>,
    },
    Links(LinkBatch),
}

/// Softmax cross-entropy or, for multi-label batches, sigmoid BCE, averaged.
pub fn classification_loss(pass: &mut Pass<'_>, logits: Var, batch: &Batch) -> Result<Var> {
    match batch {
        Batch::Nodes { nodes, labels } => {
            if nodes.is_empty() {
                return Err(Error::config("empty training node set"));
            }
            let rows = pass.tape.gather_rows(logits, nodes.clone())?;
            pass.tape.softmax_cross_entropy(rows, labels.clone())
        }
        Batch::MultiLabel { nodes, targets } => {
            if nodes.is_empty() {
                return Err(Error::config("empty training node set"));
            }
            let rows = pass.tape.gather_rows(logits, nodes.clone())?;
            pass.tape.bce_with_logits(rows, targets.clone())
        }
        Batch::Links(_) => Err(Error::config("link batch given to a classification loss")),
    }
}

/// Per-pair scores `⟨h_src, h_dst⟩`, `E × 1`.
pub fn link_scores(
    pass: &mut Pass<'_>,
    h: Var,
    src: Arc<[usize]>,
    dst: Arc<[usize]>,
) -> Result<Var> {
    let a = pass.tape.gather_rows(h, src)?;
    let b = pass.tape.gather_rows(h, dst)?;
    let prod = pass.tape.mul(a, b)?;
    pass.tape.row_sum(prod)
}

/// Mean BCE of pair scores against the batch targets.
pub fn link_loss(pass: &mut Pass<'_>, h: Var, batch: &LinkBatch) -> Result<Var> {
    if batch.positives() == 0 {
        return Err(Error::config("link loss needs at least one positive pair"));
    }
    let s = link_scores(pass, h, batch.src.clone(), batch.dst.clone())?;
    pass.tape.bce_with_logits(s, batch.targets.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty coefficient, added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        AdamSettings {
            lr: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias correction; one moment pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub settings: AdamSettings,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: u64,
}

impl Adam {
    pub fn new(settings: AdamSettings, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            settings,
            m: zeros.clone(),
            v: zeros,
            steps: 0,
        }
    }

    /// Applies the gradients stored on `params`; frozen tensors are skipped.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::config(
                "optimizer state does not match the parameter set",
            ));
        }
        self.steps += 1;
        let AdamSettings {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.settings;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if params.is_frozen(id) {
                continue;
            }
            let i = id.index();
            let t = params.get_mut(id);
            let grad = t
                .grad()
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()]);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, theta) in t.data_mut().iter_mut().enumerate() {
                let g = grad[k] + weight_decay * *theta;
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                *theta -= update;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub max_abs_grad: f64,
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl HetCan {
    /// Training-mode forward and loss on a fresh tape seeded with `seed`.
    pub fn loss<'a>(
        &'a self,
        g: &HeteroGraph,
        batch: &Batch,
        seed: u64,
    ) -> Result<(Pass<'a>, Var, Option<Var>)> {
        let mut pass = Pass::train(&self.params, seed);
        let h = self.forward(&mut pass, g)?;
        match batch {
            Batch::Links(lb) => {
                let loss = link_loss(&mut pass, h, lb)?;
                Ok((pass, loss, None))
            }
            _ => {
                let z = self.classify(&mut pass, h)?;
                let loss = classification_loss(&mut pass, z, batch)?;
                Ok((pass, loss, Some(z)))
            }
        }
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(
        &mut self,
        g: &HeteroGraph,
        batch: &Batch,
        adam: &mut Adam,
        seed: u64,
    ) -> Result<StepStats> {
        let numeric = |stage: &str, err: Error, params: &ParamStore, logit: Option<f64>| -> Error {
            let max_param = params
                .iter()
                .map(|(_, _, t)| max_abs(t.data()))
                .fold(0.0, f64::max);
            let max_grad = params
                .iter()
                .filter_map(|(_, _, t)| t.grad().map(max_abs))
                .fold(0.0, f64::max);
            let logit = logit.map_or("n/a".to_string(), |v| format!("{v:e}"));
            Error::Numeric(format!(
                "training aborted during {stage}: {err}; max |logit| {logit}, max |param| {max_param:e}, max |grad| of last step {max_grad:e}"
            ))
        };
        let (pass, loss, logits) = match self.loss(g, batch, seed) {
            Ok(x) => x,
            Err(e @ Error::NonFinite { .. }) => {
                return Err(numeric("forward", e, &self.params, None))
            }
            Err(e) => return Err(e),
        };
        let logit_max = logits.map(|z| max_abs(pass.tape.value(z).data()));
        let loss_value = pass.tape.value(loss).data()[0];
        let grads = match pass.tape.backward(loss) {
            Ok(gr) => gr,
            Err(e @ Error::NonFinite { .. }) => {
                return Err(numeric("backward", e, &self.params, logit_max))
            }
            Err(e) => return Err(e),
        };
        let tape = pass.tape;
        self.params.absorb_grads(&tape, &grads)?;
        let max_abs_grad = self
            .params
            .iter()
            .filter_map(|(_, _, t)| t.grad().map(max_abs))
            .fold(0.0, f64::max);
        adam.step(&mut self.params)?;
        Ok(StepStats {
            loss: loss_value,
            max_abs_grad,
        })
    }
}
