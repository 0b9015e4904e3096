//! Command-line front end: training runs, checkpoint evaluation, gradient
//! checks and synthetic data generation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hetcan::graph::{load_graph_dir, synth_generate, write_graph, LoadOptions, SynthSpec};
use hetcan::harness::{self, Ablation, DataSource, RunConfig};
use hetcan::model::{load_checkpoint, Task};
use hetcan::{Error, Result};

/// Relative error a gradient check must stay under.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "hetcan",
    version,
    about = "Heterogeneous graph cascade attention network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and write report.json, summary.csv and per-epoch logs.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "synth")]
        dataset_dir: Option<PathBuf>,
        /// Use the config's synthetic generator spec (defaults if absent).
        #[arg(long)]
        synth: bool,
        #[arg(long)]
        task: Option<Task>,
        #[arg(long)]
        ablate: Option<Ablation>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long)]
        multi_label: bool,
        /// Negatives per positive edge for link models.
        #[arg(long, default_value_t = 10)]
        negatives: usize,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
    /// Generate a synthetic graph and write it as TSV files.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))
}

fn train(
    config: &Path,
    dataset_dir: Option<PathBuf>,
    synth: bool,
    task: Option<Task>,
    ablate: Option<Ablation>,
    seeds: Option<Vec<u64>>,
    out: Option<PathBuf>,
) -> Result<i32> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(path) = dataset_dir {
        let multi_label = matches!(
            cfg.data,
            Some(DataSource::Dir {
                multi_label: true,
                ..
            })
        );
        cfg.data = Some(DataSource::Dir { path, multi_label });
    } else if synth && !matches!(cfg.data, Some(DataSource::Synth(_))) {
        cfg.data = Some(DataSource::Synth(SynthSpec::default()));
    }
    if let Some(t) = task {
        cfg.model.task = t;
    }
    if let Some(a) = ablate {
        cfg.ablation = a;
    }
    if let Some(s) = seeds {
        cfg.seeds = s;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    let report = harness::run_experiment(&cfg)?;
    for r in &report.runs {
        match &r.error {
            None => eprintln!(
                "seed {}: best epoch {}, test {}",
                r.seed,
                r.best_epoch,
                serde_json::to_string(&r.test)?
            ),
            Some(e) => eprintln!("seed {}: failed: {e}", r.seed),
        }
    }
    println!("{}", serde_json::to_string(&report.aggregate)?);
    if report.complete {
        Ok(0)
    } else {
        Ok(report.runs.iter().find_map(|r| r.exit_code).unwrap_or(3))
    }
}

fn eval(checkpoint: &Path, dataset_dir: &Path, multi_label: bool, negatives: usize) -> Result<i32> {
    let ck = load_checkpoint(checkpoint)?;
    let opts = LoadOptions {
        symmetrize: false,
        fallback: ck.model.config.feature_fallback,
        multi_label,
        ..LoadOptions::default()
    };
    let raw = load_graph_dir(dataset_dir, &opts)?;
    let metrics = harness::evaluate_model(&ck.model, &raw, negatives)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(0)
}

fn gradcheck(config: &Path) -> Result<i32> {
    let cfg = RunConfig::from_file(config)?;
    let report = harness::run_gradcheck(&cfg)?;
    let passed = report.max_relative_error < GRADCHECK_TOLERANCE;
    let worst: Vec<_> = report
        .worst_entries(5)
        .into_iter()
        .map(|e| {
            serde_json::json!({
                "param": e.param,
                "index": e.index,
                "analytic": e.analytic,
                "numeric": e.numeric,
                "relative_error": e.relative_error,
            })
        })
        .collect();
    let out = serde_json::json!({
        "max_relative_error": report.max_relative_error,
        "checked": report.checked,
        "tolerance": GRADCHECK_TOLERANCE,
        "passed": passed,
        "worst": worst,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(if passed { 0 } else { 3 })
}

fn synth(spec: &Path, out: &Path) -> Result<i32> {
    let spec = harness::synth_spec_from_kv(&read_text(spec)?)?;
    let g = synth_generate(&spec)?;
    write_graph(&g, out)?;
    eprintln!(
        "wrote {} nodes and {} edges to {}",
        g.num_nodes(),
        g.num_edges(),
        out.display()
    );
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.command {
        Command::Train {
            config,
            dataset_dir,
            synth: use_synth,
            task,
            ablate,
            seeds,
            out,
        } => train(&config, dataset_dir, use_synth, task, ablate, seeds, out),
        Command::Eval {
            checkpoint,
            dataset_dir,
            multi_label,
            negatives,
        } => eval(&checkpoint, &dataset_dir, multi_label, negatives),
        Command::Gradcheck { config } => gradcheck(&config),
        Command::Synth { spec, out } => synth(&spec, &out),
    };
    match outcome {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
