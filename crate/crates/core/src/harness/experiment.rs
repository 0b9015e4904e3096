use std::collections::HashSet;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, DataSource, Metric, RunConfig};
use super::metrics::{accuracy, micro_macro_f1, mrr, multilabel_f1, roc_auc, RankGroup};
use super::report::{EpochRecord, EvalMetrics, MetricsReport, RunReport};
use crate::error::{Error, Result};
use crate::graph::{
    load_graph_dir, split_nodes, synth_generate, Edge, HeteroGraph, Labels, LoadOptions,
};
use crate::model::{
    classification_loss, link_score, save_checkpoint, Adam, Batch, CascadeConfig, GraphShape,
    HetCan, LinkBatch, Task,
};
use crate::numerics::{grad_check, GradCheckReport, Pass, Tensor};

/// Loads or generates the graph without adding reverse edges or self-loops.
pub fn load_data(cfg: &RunConfig) -> Result<HeteroGraph> {
    match &cfg.data {
        None => Err(Error::config("no data source: set dataset_dir or synth")),
        Some(DataSource::Synth(spec)) => synth_generate(spec),
        Some(DataSource::Dir { path, multi_label }) => {
            let opts = LoadOptions {
                symmetrize: false,
                fallback: cfg.model.feature_fallback,
                multi_label: *multi_label,
                ..LoadOptions::default()
            };
            load_graph_dir(path, &opts)
        }
    }
}

/// Model settings for one seed and ablation variant.
pub fn run_model_config(cfg: &RunConfig, seed: u64) -> CascadeConfig {
    let mut m = cfg.model.clone();
    m.seed = seed;
    if cfg.ablation == Ablation::NoDimEncoder {
        m.dim_layers = 0;
    }
    m
}

fn build_model(cfg: &RunConfig, seed: u64, shape: GraphShape) -> Result<HetCan> {
    let mut model = HetCan::new(run_model_config(cfg, seed), shape)?;
    if cfg.ablation == Ablation::NoTypeEncoder {
        model.freeze_type_tables_to_ones();
    }
    Ok(model)
}

fn message_graph(g: &HeteroGraph, symmetrize: bool) -> HeteroGraph {
    if symmetrize {
        g.symmetrized().add_self_loops()
    } else {
        g.add_self_loops()
    }
}

/// Runs every seed and writes the outputs when `out_dir` is set.
pub fn run_experiment(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let raw = load_data(cfg)?;
    let prepared = match cfg.model.task {
        Task::NodeClassification => {
            if raw.labels().is_none() {
                return Err(Error::graph("node classification needs labels"));
            }
            Prepared::Node(message_graph(&raw, cfg.model.symmetrize_edges))
        }
        Task::LinkPrediction => Prepared::Link(raw),
    };
    let runs = run_seeds(cfg, &prepared);
    let report = MetricsReport::assemble(cfg.model.task, cfg.ablation, cfg.metric(), runs);
    if let Some(dir) = &cfg.out_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// The same experiment with one encoder switched off.
pub fn ablate(cfg: &RunConfig, variant: Ablation) -> Result<MetricsReport> {
    let mut c = cfg.clone();
    c.ablation = variant;
    run_experiment(&c)
}

enum Prepared {
    Node(HeteroGraph),
    Link(HeteroGraph),
}

fn run_seeds(cfg: &RunConfig, prepared: &Prepared) -> Vec<RunReport> {
    let one = |seed: u64| {
        let mut report = RunReport::new(seed);
        let outcome = match prepared {
            Prepared::Node(g) => train_node(cfg, g, seed, &mut report),
            Prepared::Link(g) => train_link(cfg, g, seed, &mut report),
        };
        match outcome {
            Ok(()) => report.completed = true,
            Err(e) => {
                report.exit_code = Some(e.exit_code());
                report.error = Some(e.to_string());
            }
        }
        report
    };
    if cfg.workers <= 1 || cfg.seeds.len() <= 1 {
        return cfg.seeds.iter().map(|&s| one(s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<RunReport>>> = Mutex::new(vec![None; cfg.seeds.len()]);
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(cfg.seeds.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cfg.seeds.len() {
                    break;
                }
                let r = one(cfg.seeds[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

/// Best-so-far tracking for early stopping: higher metric wins, lower
/// validation loss breaks ties.
struct Best {
    key: Option<(f64, f64)>,
    epoch: usize,
    model: Option<HetCan>,
    adam: Option<Adam>,
}

impl Best {
    fn new() -> Self {
        Best {
            key: None,
            epoch: 0,
            model: None,
            adam: None,
        }
    }

    fn offer(&mut self, epoch: usize, metric: f64, loss: f64, model: &HetCan, adam: &Adam) {
        let better = match self.key {
            None => true,
            Some((m, l)) => metric > m || (metric == m && loss < l),
        };
        if better {
            self.key = Some((metric, loss));
            self.epoch = epoch;
            self.model = Some(model.clone());
            self.adam = Some(adam.clone());
        }
    }
}

fn node_batch(g: &HeteroGraph, nodes: &[usize]) -> Result<Batch> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::graph("graph has no labels"))?;
    Ok(match labels {
        Labels::Single { of, .. } => Batch::Nodes {
            nodes: nodes.into(),
            labels: nodes
                .iter()
                .map(|&v| of[v].expect("split covers labeled nodes"))
                .collect(),
        },
        Labels::Multi { classes, of } => {
            let mut targets = vec![0.0; nodes.len() * classes];
            for (i, &v) in nodes.iter().enumerate() {
                for &c in of[v].as_ref().expect("split covers labeled nodes") {
                    targets[i * classes + c] = 1.0;
                }
            }
            Batch::MultiLabel {
                nodes: nodes.into(),
                targets: targets.into(),
            }
        }
    })
}

/// Evaluation-mode logits and mean loss on `batch`.
fn eval_logits(model: &HetCan, g: &HeteroGraph, batch: &Batch) -> Result<(Tensor, f64)> {
    let mut pass = Pass::eval(&model.params);
    let h = model.forward(&mut pass, g)?;
    let z = model.classify(&mut pass, h)?;
    let loss = classification_loss(&mut pass, z, batch)?;
    Ok((pass.tape.value(z).clone(), pass.tape.value(loss).data()[0]))
}

/// Node classification scores of `logits` on `nodes`.
pub fn node_metrics(logits: &Tensor, g: &HeteroGraph, nodes: &[usize]) -> Result<EvalMetrics> {
    let labels = g
        .labels()
        .ok_or_else(|| Error::graph("graph has no labels"))?;
    let classes = labels.classes();
    if logits.cols() != classes {
        return Err(Error::Shape {
            op: "node_metrics",
            left: logits.shape(),
            right: (g.num_nodes(), classes),
        });
    }
    match labels {
        Labels::Single { of, .. } => {
            let pred: Vec<usize> = nodes
                .iter()
                .map(|&v| {
                    let row = logits.row(v);
                    (0..classes).fold(0, |b, c| if row[c] > row[b] { c } else { b })
                })
                .collect();
            let truth: Vec<usize> = nodes
                .iter()
                .map(|&v| of[v].ok_or_else(|| Error::Metric(format!("node {v} is unlabeled"))))
                .collect::<Result<_>>()?;
            let (micro, macro_) = micro_macro_f1(&pred, &truth, classes)?;
            Ok(EvalMetrics {
                micro_f1: Some(micro),
                macro_f1: Some(macro_),
                accuracy: Some(accuracy(&pred, &truth)?),
                ..EvalMetrics::default()
            })
        }
        Labels::Multi { of, .. } => {
            let mut pred = Vec::with_capacity(nodes.len() * classes);
            let mut truth = Vec::with_capacity(nodes.len() * classes);
            let mut exact = 0usize;
            for &v in nodes {
                let set = of[v]
                    .as_ref()
                    .ok_or_else(|| Error::Metric(format!("node {v} is unlabeled")))?;
                let mut all = true;
                for c in 0..classes {
                    let p = logits.get(v, c) > 0.0;
                    let t = set.contains(&c);
                    all &= p == t;
                    pred.push(p);
                    truth.push(t);
                }
                exact += all as usize;
            }
            let (micro, macro_) = multilabel_f1(&pred, &truth, classes)?;
            Ok(EvalMetrics {
                micro_f1: Some(micro),
                macro_f1: Some(macro_),
                accuracy: Some(exact as f64 / nodes.len().max(1) as f64),
                ..EvalMetrics::default()
            })
        }
    }
}

fn require(m: &EvalMetrics, metric: Metric) -> Result<f64> {
    m.get(metric)
        .ok_or_else(|| Error::config(format!("metric {metric} is not computed for this task")))
}

fn train_node(cfg: &RunConfig, g: &HeteroGraph, seed: u64, report: &mut RunReport) -> Result<()> {
    let masks = match g.masks() {
        Some(m) => m.clone(),
        None => split_nodes(g, cfg.split, seed)?,
    };
    let (train, valid, test) = (masks.train_nodes(), masks.valid_nodes(), masks.test_nodes());
    let (train_b, valid_b, test_b) = (
        node_batch(g, &train)?,
        node_batch(g, &valid)?,
        node_batch(g, &test)?,
    );
    let mut model = build_model(cfg, seed, GraphShape::of(g))?;
    let mut adam = Adam::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let metric = cfg.metric();

    report.untrained = node_metrics(&eval_logits(&model, g, &test_b)?.0, g, &test)?;
    let mut best = Best::new();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let stats = model.train_step(g, &train_b, &mut adam, rng.gen())?;
        let seconds = start.elapsed().as_secs_f64();
        let mut val_metric = None;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let (z, loss) = eval_logits(&model, g, &valid_b)?;
            let v = require(&node_metrics(&z, g, &valid)?, metric)?;
            best.offer(epoch, v, loss, &model, &adam);
            val_metric = Some(v);
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            val_metric,
            seconds,
        });
        if epoch - best.epoch >= cfg.patience.max(1) && best.key.is_some() {
            break;
        }
    }
    let model = best.model.take().expect("at least one validation epoch");
    let (z, _) = eval_logits(&model, g, &test_b)?;
    report.best_epoch = best.epoch;
    report.best_val_metric = best.key.map(|k| k.0);
    report.train = node_metrics(&z, g, &train)?;
    report.test = node_metrics(&z, g, &test)?;
    save(cfg, &model, best.adam.as_ref(), best.epoch, seed)
}

fn save(
    cfg: &RunConfig,
    model: &HetCan,
    adam: Option<&Adam>,
    epoch: usize,
    seed: u64,
) -> Result<()> {
    match &cfg.out_dir {
        Some(dir) if cfg.save_checkpoints => {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(&dir.join(format!("model_{seed}.ckpt")), model, adam, epoch)
        }
        _ => Ok(()),
    }
}

/// Unordered node pair.
fn pair_key(a: usize, b: usize) -> (usize, usize) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Edges of the predicted types, split into train/valid/test pairs, and the
/// message-passing graph without the held-out pairs.
pub struct LinkSplit {
    pub graph: HeteroGraph,
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    /// Every positive pair, in both orientations' canonical form.
    pub known: HashSet<(usize, usize)>,
}

fn target_pairs(raw: &HeteroGraph, edge_types: &[usize]) -> Result<Vec<(usize, usize)>> {
    if let Some(&t) = edge_types.iter().find(|&&t| t >= raw.num_edge_types()) {
        return Err(Error::config(format!(
            "link edge type {t} not in the graph"
        )));
    }
    let wanted = |t: usize| edge_types.is_empty() || edge_types.contains(&t);
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    for e in raw.edges() {
        if e.src != e.dst
            && e.edge_type < raw.num_edge_types()
            && wanted(e.edge_type)
            && seen.insert(pair_key(e.src, e.dst))
        {
            pairs.push((e.src, e.dst));
        }
    }
    Ok(pairs)
}

pub fn split_links(cfg: &RunConfig, raw: &HeteroGraph, seed: u64) -> Result<LinkSplit> {
    let mut pairs = target_pairs(raw, &cfg.link.edge_types)?;
    let m = pairs.len();
    if m < 3 {
        return Err(Error::graph(format!(
            "need at least 3 candidate edges for link prediction, found {m}"
        )));
    }
    let known: HashSet<(usize, usize)> = pairs.iter().map(|&(a, b)| pair_key(a, b)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let n_test = ((cfg.link.test_ratio * m as f64).round() as usize).clamp(1, m - 2);
    let n_valid = ((cfg.link.valid_ratio * m as f64).round() as usize).clamp(1, m - n_test - 1);
    let test = pairs[..n_test].to_vec();
    let valid = pairs[n_test..n_test + n_valid].to_vec();
    let train = pairs[n_test + n_valid..].to_vec();
    let held: HashSet<(usize, usize)> = test
        .iter()
        .chain(&valid)
        .map(|&(a, b)| pair_key(a, b))
        .collect();
    let wanted = |t: usize| cfg.link.edge_types.is_empty() || cfg.link.edge_types.contains(&t);
    let remove: HashSet<Edge> = raw
        .edges()
        .filter(|e| wanted(e.edge_type) && held.contains(&pair_key(e.src, e.dst)))
        .collect();
    let graph = message_graph(&raw.without_edges(&remove), cfg.model.symmetrize_edges);
    Ok(LinkSplit {
        graph,
        train,
        valid,
        test,
        known,
    })
}

/// `per` negatives for every positive: same source, a destination of the
/// positive destination's node type, never a known positive pair.
pub fn sample_negatives<R: Rng>(
    g: &HeteroGraph,
    positives: &[(usize, usize)],
    known: &HashSet<(usize, usize)>,
    per: usize,
    rng: &mut R,
) -> Vec<Vec<(usize, usize)>> {
    positives
        .iter()
        .map(|&(s, d)| {
            let pool = g.nodes_of_type(g.node_type(d));
            let mut out = Vec::with_capacity(per);
            let mut tries = 0;
            while out.len() < per && tries < 50 * per {
                tries += 1;
                let c = pool[rng.gen_range(0..pool.len())];
                if c != s && !known.contains(&pair_key(s, c)) {
                    out.push((s, c));
                }
            }
            out
        })
        .collect()
}

/// ROC-AUC over each positive against its first negative and MRR over the
/// full groups. Positives without negatives are dropped.
pub fn link_metrics(
    h: &Tensor,
    positives: &[(usize, usize)],
    negatives: &[Vec<(usize, usize)>],
) -> Result<EvalMetrics> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (&(s, d), negs) in positives.iter().zip(negatives) {
        let Some(&(ns, nd)) = negs.first() else {
            continue;
        };
        let p = link_score(h, s, d);
        scores.push(p);
        labels.push(true);
        scores.push(link_score(h, ns, nd));
        labels.push(false);
        groups.push(RankGroup {
            positive: p,
            negatives: negs.iter().map(|&(a, b)| link_score(h, a, b)).collect(),
        });
    }
    Ok(EvalMetrics {
        roc_auc: Some(roc_auc(&scores, &labels)?),
        mrr: Some(mrr(&groups)?),
        ..EvalMetrics::default()
    })
}

fn train_link(cfg: &RunConfig, raw: &HeteroGraph, seed: u64, report: &mut RunReport) -> Result<()> {
    let split = split_links(cfg, raw, seed)?;
    let g = &split.graph;
    let shape = GraphShape {
        classes: 0,
        ..GraphShape::of(g)
    };
    let mut model = build_model(cfg, seed, shape)?;
    let mut adam = Adam::new(cfg.optimizer, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.link.eval_negatives;
    let valid_negs = sample_negatives(g, &split.valid, &split.known, k, &mut rng);
    let test_negs = sample_negatives(g, &split.test, &split.known, k, &mut rng);
    let metric = cfg.metric();

    report.untrained = link_metrics(&model.embed(g)?, &split.test, &test_negs)?;
    let mut best = Best::new();
    for epoch in 1..=cfg.max_epochs {
        let negs: Vec<(usize, usize)> =
            sample_negatives(g, &split.train, &split.known, 1, &mut rng).concat();
        let batch = Batch::Links(LinkBatch::new(&split.train, &negs));
        let start = Instant::now();
        let stats = model.train_step(g, &batch, &mut adam, rng.gen())?;
        let seconds = start.elapsed().as_secs_f64();
        let mut val_metric = None;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let v = require(
                &link_metrics(&model.embed(g)?, &split.valid, &valid_negs)?,
                metric,
            )?;
            best.offer(epoch, v, 0.0, &model, &adam);
            val_metric = Some(v);
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            val_metric,
            seconds,
        });
        if epoch - best.epoch >= cfg.patience.max(1) && best.key.is_some() {
            break;
        }
    }
    let model = best.model.take().expect("at least one validation epoch");
    let h = model.embed(g)?;
    report.best_epoch = best.epoch;
    report.best_val_metric = best.key.map(|k| k.0);
    let train_negs = sample_negatives(g, &split.train, &split.known, 1, &mut rng);
    report.train = link_metrics(&h, &split.train, &train_negs)?;
    report.test = link_metrics(&h, &split.test, &test_negs)?;
    save(cfg, &model, best.adam.as_ref(), best.epoch, seed)
}

/// Scores a trained model on every labeled node, or for link models on
/// every edge against sampled negatives.
pub fn evaluate_model(
    model: &HetCan,
    raw: &HeteroGraph,
    eval_negatives: usize,
) -> Result<EvalMetrics> {
    let g = message_graph(raw, model.config.symmetrize_edges);
    match model.config.task {
        Task::NodeClassification => {
            let labels = g
                .labels()
                .ok_or_else(|| Error::graph("dataset has no labels"))?;
            let nodes = labels.labeled_nodes();
            node_metrics(&model.logits(&g)?, &g, &nodes)
        }
        Task::LinkPrediction => {
            let pairs = target_pairs(raw, &[])?;
            let known = pairs.iter().map(|&(a, b)| pair_key(a, b)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
            let negs = sample_negatives(&g, &pairs, &known, eval_negatives, &mut rng);
            link_metrics(&model.embed(&g)?, &pairs, &negs)
        }
    }
}

/// Finite-difference check of the full node-classification loss over every
/// labeled node, with dropout disabled.
pub fn run_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    if cfg.model.task != Task::NodeClassification {
        return Err(Error::config(
            "gradcheck runs on node classification configs",
        ));
    }
    let g = message_graph(&load_data(cfg)?, cfg.model.symmetrize_edges);
    let labels = g
        .labels()
        .ok_or_else(|| Error::graph("gradcheck needs labels"))?;
    let batch = node_batch(&g, &labels.labeled_nodes())?;
    let mut c = cfg.clone();
    c.model.dropout = 0.0;
    c.model.attention_dropout = 0.0;
    let seed = cfg.seeds[0];
    let model = build_model(&c, seed, GraphShape::of(&g))?;
    let per_param = if cfg.gradcheck_entries == 0 {
        usize::MAX
    } else {
        cfg.gradcheck_entries
    };
    grad_check(
        |tape, params| {
            let mut pass = Pass::with_tape(std::mem::take(tape), params);
            let h = model.forward(&mut pass, &g)?;
            let z = model.classify(&mut pass, h)?;
            let loss = classification_loss(&mut pass, z, &batch)?;
            *tape = pass.tape;
            Ok(loss)
        },
        &model.params,
        cfg.gradcheck_step,
        per_param,
        seed,
    )
}
