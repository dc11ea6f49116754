//! Command-line front end: dataset export, training runs, checkpoint
//! probing, and grid sweeps, each leaving a manifest that pins down what
//! ran. Exit codes are a stable contract: 0 success, 2 config error,
//! 3 I/O error, 4 numeric failure, 5 sweep total failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::diagnostics::{
    grounding_scores, population_scatter_svg, run_sweep, training_curves_svg, SweepOutput,
    LAMBDA_GRID, MU_GRID,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig, Pass};
use crate::rng::stream;
use crate::scenes::{build_dataset, featurize_split, read_jsonl, write_jsonl, WorldConfig};
use crate::trainer::{train_run, MetricsRecord, TrainConfig};

#[derive(Parser)]
#[command(name = "w2r2", version, about = "Shortcut-deterrence training laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a dataset and write it out as JSON-lines splits.
    GenData {
        /// World configuration (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; the dataset is regenerated from the world config.
    Train {
        /// World configuration (JSON).
        #[arg(long)]
        world: PathBuf,
        /// Model configuration (JSON); defaults match the world's categories.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Training configuration (JSON); omitted fields take defaults.
        #[arg(long)]
        train: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint's fused and 2D-only passes against chance.
    Probe {
        /// Checkpoint written by `train` (model.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for probe.csv and scatter.svg.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one run per (lambda, mu) grid cell and report the grid.
    Sweep {
        /// Directory holding world.json; model.json and train.json are
        /// optional and default like `train`'s.
        #[arg(long)]
        base: PathBuf,
        /// Comma-separated lambda values (default 0.1,0.5,1.0,1.5,2.0).
        #[arg(long = "lambda-grid", value_delimiter = ',')]
        lambda_grid: Option<Vec<f64>>,
        /// Comma-separated mu values (default 0.1,0.3,0.5,0.7,0.9).
        #[arg(long = "mu-grid", value_delimiter = ',')]
        mu_grid: Option<Vec<f64>>,
        /// Worker threads over cells (default: available parallelism).
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses and runs a full command line (first element is the binary
/// name), returning the process exit code instead of exiting, so tests
/// can drive the whole surface in-process.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here too; those are success paths.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.cmd {
        Cmd::GenData { config, out } => cmd_gen_data(&config, &out),
        Cmd::Train { world, model, train, out } => {
            cmd_train(&world, model.as_deref(), train.as_deref(), &out)
        }
        Cmd::Probe { checkpoint, data, out } => cmd_probe(&checkpoint, &data, &out),
        Cmd::Sweep { base, lambda_grid, mu_grid, jobs, out } => {
            cmd_sweep(&base, lambda_grid, mu_grid, jobs, &out)
        }
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        detail: e.to_string(),
    })
}

fn write_pretty_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Seed override for smoke tests: when set, replaces every config seed.
fn seed_override() -> Result<Option<u64>> {
    match std::env::var("W2R2_SEED") {
        Ok(s) => s.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::Config(format!("W2R2_SEED must be an unsigned integer, got {s:?}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("W2R2_SEED: {e}"))),
    }
}

/// Everything needed to rerun a command: inputs by path, resolved seeds
/// and configs by value, and the artifacts the run is about to produce.
/// Written into the output directory before any long computation.
#[derive(Serialize)]
struct RunManifest {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    timestamp_unix: u64,
    config_paths: BTreeMap<&'static str, String>,
    resolved_seeds: BTreeMap<&'static str, u64>,
    artifacts: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    world: Option<WorldConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_grid: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    jobs: Option<usize>,
}

impl RunManifest {
    fn new(command: &'static str) -> RunManifest {
        RunManifest {
            tool: "w2r2",
            version: env!("CARGO_PKG_VERSION"),
            command,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config_paths: BTreeMap::new(),
            resolved_seeds: BTreeMap::new(),
            artifacts: Vec::new(),
            world: None,
            model: None,
            train: None,
            lambda_grid: None,
            mu_grid: None,
            jobs: None,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_pretty_json(&dir.join("manifest.json"), self)
    }
}

fn cmd_gen_data(config: &Path, out: &Path) -> Result<()> {
    let mut world: WorldConfig = load_json(config)?;
    if let Some(seed) = seed_override()? {
        world.seed = seed;
    }
    world.validate()?;

    let mut manifest = RunManifest::new("gen-data");
    manifest.config_paths.insert("world", config.display().to_string());
    manifest.resolved_seeds.insert("world", world.seed);
    manifest.artifacts = vec!["train.jsonl", "val.jsonl", "world.json"];
    manifest.world = Some(world.clone());
    manifest.write(out)?;

    let (train, val) = build_dataset(&world)?;
    write_jsonl(&out.join("train.jsonl"), &train)?;
    write_jsonl(&out.join("val.jsonl"), &val)?;
    write_pretty_json(&out.join("world.json"), &world)?;
    println!(
        "wrote {} train / {} val samples to {}",
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}

fn resolve_train_configs(
    world_path: &Path,
    model_path: Option<&Path>,
    train_path: Option<&Path>,
) -> Result<(WorldConfig, ModelConfig, TrainConfig)> {
    let mut world: WorldConfig = load_json(world_path)?;
    let mut mcfg: ModelConfig = match model_path {
        Some(p) => load_json(p)?,
        None => ModelConfig {
            n_categories: world.n_categories,
            ..ModelConfig::default()
        },
    };
    let mut tcfg: TrainConfig = match train_path {
        Some(p) => load_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        world.seed = seed;
        mcfg.seed = seed;
        tcfg.seed = seed;
    }
    world.validate()?;
    mcfg.validate()?;
    tcfg.validate()?;
    Ok((world, mcfg, tcfg))
}

fn cmd_train(
    world_path: &Path,
    model_path: Option<&Path>,
    train_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let (world, mcfg, tcfg) = resolve_train_configs(world_path, model_path, train_path)?;

    let mut manifest = RunManifest::new("train");
    manifest.config_paths.insert("world", world_path.display().to_string());
    if let Some(p) = model_path {
        manifest.config_paths.insert("model", p.display().to_string());
    }
    if let Some(p) = train_path {
        manifest.config_paths.insert("train", p.display().to_string());
    }
    manifest.resolved_seeds.insert("world", world.seed);
    manifest.resolved_seeds.insert("model", mcfg.seed);
    manifest.resolved_seeds.insert("train", tcfg.seed);
    manifest.artifacts = vec!["metrics.csv", "model.json", "curves.svg"];
    manifest.world = Some(world.clone());
    manifest.model = Some(mcfg);
    manifest.train = Some(tcfg);
    manifest.write(out)?;

    let (train, val) = build_dataset(&world)?;
    let run = train_run(&world, &mcfg, &tcfg, &train, &val, Some(out))?;
    let svg = out.join("curves.svg");
    fs::write(&svg, training_curves_svg(&run.records)).map_err(|e| Error::io(&svg, e))?;

    print_records(&run.records);
    println!("wrote metrics.csv, model.json, curves.svg to {}", out.display());
    Ok(())
}

fn fmt_sep(sep: Option<f64>) -> String {
    match sep {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

fn print_records(records: &[MetricsRecord]) {
    println!(
        "{:>6} {:>11} {:>12} {:>12} {:>10} {:>10} {:>11} {:>11}",
        "step",
        "loss_total",
        "acc50_fused",
        "acc50_short",
        "sel_fused",
        "sel_short",
        "separation",
        "hinge_rate"
    );
    for r in records {
        println!(
            "{:>6} {:>11.4} {:>12.4} {:>12.4} {:>10.4} {:>10.4} {:>11} {:>11.4}",
            r.step,
            r.loss_total,
            r.acc50_fused,
            r.acc50_shortcut,
            r.sel_acc_fused,
            r.sel_acc_shortcut,
            fmt_sep(r.separation_index),
            r.hinge_activation_rate
        );
    }
}

fn cmd_probe(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    let params = load_checkpoint(checkpoint)?;
    let world: WorldConfig = load_json(&data.join("world.json"))?;
    if params.cfg.n_categories != world.n_categories {
        return Err(Error::Shape {
            op: "probe",
            detail: format!(
                "checkpoint was built for {} categories but the data has {}",
                params.cfg.n_categories, world.n_categories
            ),
        });
    }
    let val = read_jsonl(&data.join("val.jsonl"))?;

    let mut manifest = RunManifest::new("probe");
    manifest.config_paths.insert("checkpoint", checkpoint.display().to_string());
    manifest.config_paths.insert("data", data.display().to_string());
    manifest.resolved_seeds.insert("world", world.seed);
    manifest.artifacts = vec!["probe.csv", "scatter.svg"];
    manifest.world = Some(world.clone());
    manifest.model = Some(params.cfg);
    manifest.write(out)?;

    let feats = featurize_split(&val, &world, stream::VAL_FEATURES);
    let fused = grounding_scores(&params, &val, &feats, Pass::Fused)?;
    let shortcut = grounding_scores(&params, &val, &feats, Pass::Shortcut { detach_2d: false })?;

    println!("{:<10} {:>8} {:>9} {:>9}", "pass", "sel_acc", "acc@0.25", "acc@0.50");
    println!(
        "{:<10} {:>8.4} {:>9.4} {:>9.4}",
        "fused", fused.sel_acc, fused.acc25, fused.acc50
    );
    println!(
        "{:<10} {:>8.4} {:>9.4} {:>9.4}",
        "shortcut", shortcut.sel_acc, shortcut.acc25, shortcut.acc50
    );
    println!("{:<10} {:>8.4}", "chance", fused.chance);

    let csv = out.join("probe.csv");
    let mut text = String::from("pass,n,chance,sel_acc,acc25,acc50\n");
    for (name, r) in [("fused", fused), ("shortcut", shortcut)] {
        text.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            r.n, r.chance, r.sel_acc, r.acc25, r.acc50
        ));
    }
    fs::write(&csv, text).map_err(|e| Error::io(&csv, e))?;

    let svg = out.join("scatter.svg");
    fs::write(&svg, population_scatter_svg(&params, &feats)?).map_err(|e| Error::io(&svg, e))?;
    println!("wrote probe.csv, scatter.svg to {}", out.display());
    Ok(())
}

fn cmd_sweep(
    base: &Path,
    lambda_grid: Option<Vec<f64>>,
    mu_grid: Option<Vec<f64>>,
    jobs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let model_path = base.join("model.json");
    let train_path = base.join("train.json");
    let (world, mcfg, tcfg) = resolve_train_configs(
        &base.join("world.json"),
        model_path.exists().then_some(model_path.as_path()),
        train_path.exists().then_some(train_path.as_path()),
    )?;
    let lambdas = lambda_grid.unwrap_or_else(|| LAMBDA_GRID.to_vec());
    let mus = mu_grid.unwrap_or_else(|| MU_GRID.to_vec());
    for (name, grid) in [("lambda", &lambdas), ("mu", &mus)] {
        let mut uniq = grid.clone();
        uniq.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        uniq.dedup();
        if uniq.len() < grid.len() {
            eprintln!("note: duplicate {name} grid values are ignored");
        }
    }
    let jobs = jobs.unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });

    let mut manifest = RunManifest::new("sweep");
    manifest.config_paths.insert("base", base.display().to_string());
    manifest.resolved_seeds.insert("world", world.seed);
    manifest.resolved_seeds.insert("model", mcfg.seed);
    manifest.resolved_seeds.insert("train", tcfg.seed);
    manifest.artifacts = vec!["sweep.csv", "sweep.svg", "cells"];
    manifest.world = Some(world.clone());
    manifest.model = Some(mcfg);
    manifest.train = Some(tcfg);
    manifest.lambda_grid = Some(lambdas.clone());
    manifest.mu_grid = Some(mus.clone());
    manifest.jobs = Some(jobs);
    manifest.write(out)?;

    let (train, val) = build_dataset(&world)?;
    let sweep = run_sweep(
        &world, &mcfg, &tcfg, &train, &val, &lambdas, &mus, jobs, Some(out),
    )?;
    print_sweep(&sweep);
    println!("wrote sweep.csv, sweep.svg, cells/ to {}", out.display());
    Ok(())
}

fn print_sweep(sweep: &SweepOutput) {
    println!(
        "{:>7} {:>5} {:>12} {:>10} {:>11}",
        "lambda", "mu", "acc50_fused", "sel_short", "separation"
    );
    for c in &sweep.cells {
        println!(
            "{:>7} {:>5} {:>12.4} {:>10.4} {:>11}",
            c.lambda,
            c.mu,
            c.last.acc50_fused,
            c.last.sel_acc_shortcut,
            fmt_sep(c.last.separation_index)
        );
    }
    if !sweep.failures.is_empty() {
        eprintln!(
            "{} of {} cells failed (see sweep_failures.txt)",
            sweep.failures.len(),
            sweep.cells.len() + sweep.failures.len()
        );
    }
}
