use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use assl::baselines::Strategy;
use assl::checkpoint;
use assl::data::{generate_synthetic, holdout, load_dataset, make_split, write_dataset, SkeletonSequence};
use assl::plot::{write_line_chart, Series};
use assl::trainer::ablation::{mean_std, run_ablation, run_k_sweep, write_table, AblationRun, SweepData};
use assl::trainer::export::export_embeddings;
use assl::trainer::{bank_seed, eval_seed, evaluate, run_experiment_with, MetricsRow, RunOptions};
use serde::Serialize;

use crate::config::CliConfig;
use crate::{AblateArgs, Cli, Command, DataArgs, EvalArgs, ExportArgs, GenDataArgs, GlobalArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Usage(String),
    /// I/O or training failure; exit code 1.
    Failure(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Failure(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Failure(m) => f.write_str(m),
        }
    }
}

impl From<assl::Error> for CliError {
    fn from(e: assl::Error) -> Self {
        match e {
            assl::Error::Config(_) | assl::Error::Split(_) => CliError::Usage(e.to_string()),
            other => CliError::Failure(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Per-run summary written next to the metrics.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub fraction: f64,
    pub seed: u64,
    pub best_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub k: usize,
}

fn resolve(global: &GlobalArgs) -> Result<CliConfig> {
    let mut cfg = match &global.config {
        Some(path) => CliConfig::load(path).map_err(CliError::Usage)?,
        None => CliConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &global.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(name) = &global.strategy {
        let name: Strategy = name.parse()?;
        if name != cfg.train.strategy.name {
            cfg.train.strategy = assl::baselines::StrategySpec::new(name);
        }
    }
    if let Some(f) = global.labels_fraction {
        cfg.labels_fraction = f;
    }
    cfg.dump_neighbors |= global.dump_neighbors;
    cfg.train.validate()?;
    if !(cfg.labels_fraction > 0.0 && cfg.labels_fraction <= 1.0) {
        return Err(CliError::Usage(format!("labels fraction must be in (0, 1], got {}", cfg.labels_fraction)));
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::GenData(args) => gen_data(cfg, &cli.global, args),
        Command::Train(args) => train(cfg, &args),
        Command::Eval(args) => eval(cfg, &args),
        Command::Ablate(args) => ablate(cfg, &args),
        Command::ExportEmbeddings(args) => export(cfg, &args),
    }
}

fn gen_data(mut cfg: CliConfig, global: &GlobalArgs, args: GenDataArgs) -> Result<()> {
    let s = &mut cfg.synthetic;
    if let Some(v) = args.classes {
        s.classes = v;
    }
    if let Some(v) = args.joints {
        s.joints = v;
    }
    if let Some(v) = args.frames {
        s.frames = v;
    }
    if let Some(v) = args.per_class {
        s.samples_per_class = v;
    }
    if let Some(v) = args.noise {
        s.noise_scale = v;
    }
    if let Some(v) = args.max_rotation {
        s.max_rotation_degrees = v;
    }
    if let Some(v) = global.seed {
        s.seed = v;
    }
    s.validate()?;
    let data = generate_synthetic(s)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_dataset(&args.out, &data)?;
    println!(
        "wrote {} sequences ({} classes x {} per class) to {}",
        data.len(),
        s.classes,
        s.samples_per_class,
        args.out.display()
    );
    Ok(())
}

/// Training and test corpora: files when given, otherwise the synthetic
/// generator; a stratified holdout when no test file is given.
fn corpus(cfg: &CliConfig, args: &DataArgs) -> Result<(Vec<SkeletonSequence>, Vec<SkeletonSequence>)> {
    let data = match args.data.as_ref().or(cfg.data.as_ref()) {
        Some(path) => load_dataset(path)?,
        None => generate_synthetic(&cfg.synthetic)?,
    };
    match args.test_data.as_ref().or(cfg.test_data.as_ref()) {
        Some(path) => Ok((data, load_dataset(path)?)),
        None => Ok(holdout(&data, cfg.test_fraction, cfg.holdout_seed)?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failure(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn plot_curves(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let series = |label: &str, f: fn(&MetricsRow) -> f64| Series::new(label, rows.iter().map(|r| (r.epoch as f64, f(r))).collect());
    write_line_chart(
        &dir.join("loss.svg"),
        "Training loss",
        "epoch",
        "loss",
        &[series("total", |r| r.total), series("supervised", |r| r.l_sup)],
    )?;
    write_line_chart(
        &dir.join("accuracy.svg"),
        "Accuracy",
        "epoch",
        "fraction",
        &[series("test accuracy", |r| r.test_accuracy), series("neighbour quality", |r| r.neighbor_quality_ratio)],
    )?;
    Ok(())
}

fn train(cfg: CliConfig, args: &DataArgs) -> Result<()> {
    let (train, test) = corpus(&cfg, args)?;
    let split = make_split(&train, cfg.labels_fraction, cfg.train.seed)?.with_test(test)?;
    let opts = RunOptions { out_dir: Some(cfg.out_dir.clone()), dump_neighbors: cfg.dump_neighbors, progress: true };
    let result = run_experiment_with(&cfg.train, &split, &opts)?;
    plot_curves(&cfg.out_dir, &result.rows)?;
    let summary = Summary {
        strategy: cfg.train.strategy.name.to_string(),
        fraction: cfg.labels_fraction,
        seed: cfg.train.seed,
        best_accuracy: result.best_accuracy,
        best_epoch: result.best_epoch,
        epochs: cfg.train.epochs,
        k: cfg.train.k,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).map_err(|e| CliError::Failure(e.to_string()))?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(assl::models::ModelBundle, usize)> {
    checkpoint::load(path).map_err(|e| CliError::Failure(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn eval(cfg: CliConfig, args: &EvalArgs) -> Result<()> {
    let (bundle, frames) = load_checkpoint(&args.checkpoint)?;
    let (_, test) = corpus(&cfg, &args.data)?;
    let accuracy = evaluate(&bundle, &test, frames, eval_seed(cfg.train.seed))?;
    println!("{}", serde_json::json!({ "accuracy": accuracy, "samples": test.len() }));
    Ok(())
}

fn export(cfg: CliConfig, args: &ExportArgs) -> Result<()> {
    let (bundle, frames) = load_checkpoint(&args.checkpoint)?;
    let (train, test) = corpus(&cfg, &args.data)?;
    let split = make_split(&train, cfg.labels_fraction, cfg.train.seed)?.with_test(test)?;
    let rows = export_embeddings(&bundle, &split, frames, bank_seed(cfg.train.seed), &args.out)?;
    println!("wrote {rows} embeddings of width {} to {}", bundle.feature_width(), args.out.display());
    Ok(())
}

fn run_dir(root: &Path, variant: Strategy, k: usize, seed: u64) -> PathBuf {
    root.join("runs").join(format!("{variant}_k{k}")).join(format!("seed{seed}"))
}

fn summarize(run: &AblationRun, fraction: f64, epochs: usize) -> Summary {
    Summary {
        strategy: run.variant.to_string(),
        fraction,
        seed: run.seed,
        best_accuracy: run.best_accuracy,
        best_epoch: None,
        epochs,
        k: run.k,
    }
}

/// Mean neighbour quality per epoch across the runs of each variant.
fn nqr_series(runs: &[AblationRun], k: usize) -> Vec<Series> {
    let mut by_variant: BTreeMap<String, Vec<&AblationRun>> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.k == k) {
        by_variant.entry(r.variant.to_string()).or_default().push(r);
    }
    by_variant
        .into_iter()
        .map(|(name, rs)| {
            let epochs = rs.iter().map(|r| r.rows.len()).min().unwrap_or(0);
            let points = (0..epochs)
                .map(|e| {
                    let vals: Vec<f64> = rs.iter().map(|r| r.rows[e].neighbor_quality_ratio).collect();
                    (e as f64, mean_std(&vals).0)
                })
                .collect();
            Series::new(name, points)
        })
        .collect()
}

fn ablate(cfg: CliConfig, args: &AblateArgs) -> Result<()> {
    let variants: Vec<Strategy> = match &args.variants {
        Some(names) => names.iter().map(|n| n.trim().parse()).collect::<assl::Result<_>>()?,
        None => cfg.ablation.variants.clone(),
    };
    let n_seeds = args.seeds.unwrap_or(cfg.ablation.seeds);
    let k_values = args.k_values.clone().unwrap_or_else(|| cfg.ablation.k_values.clone());
    let k_seeds = args.k_seeds.unwrap_or(cfg.ablation.k_seeds);
    if variants.is_empty() || n_seeds == 0 {
        return Err(CliError::Usage("need at least one variant and one seed".into()));
    }
    let base = cfg.train.seed;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| base + i).collect();
    let (train, test) = corpus(&cfg, &args.data)?;
    let data = SweepData { train: &train, test: &test, fraction: cfg.labels_fraction };
    let root = cfg.out_dir.clone();
    fs::create_dir_all(&root)?;
    let dump = cfg.dump_neighbors;
    let mut opts_for = |variant: Strategy, k: usize, seed: u64| RunOptions {
        out_dir: Some(run_dir(&root, variant, k, seed)),
        dump_neighbors: dump,
        progress: false,
    };

    let (table, runs) = run_ablation(&cfg.train, data, &variants, &seeds, &mut opts_for)?;
    for run in &runs {
        let dir = run_dir(&root, run.variant, run.k, run.seed);
        write_json(&dir.join("summary.json"), &summarize(run, cfg.labels_fraction, cfg.train.epochs))?;
    }
    write_table(&root.join("ablation.csv"), &table)?;
    write_line_chart(
        &root.join("neighbor_quality.svg"),
        "Neighbour quality ratio",
        "epoch",
        "same-label neighbour fraction",
        &nqr_series(&runs, cfg.train.k),
    )?;
    println!("variant,seeds,mean_acc,std_acc");
    for row in &table {
        println!("{},{},{:.4},{:.4}", row.variant, row.seeds, row.mean_acc, row.std_acc);
    }

    if !args.no_k_sweep && !k_values.is_empty() && k_seeds > 0 {
        let k_seed_list: Vec<u64> = (0..k_seeds as u64).map(|i| base + i).collect();
        let (sweep, sweep_runs) = run_k_sweep(&cfg.train, data, &k_values, &k_seed_list, &mut opts_for, &runs)?;
        for run in &sweep_runs {
            let dir = run_dir(&root, run.variant, run.k, run.seed);
            write_json(&dir.join("summary.json"), &summarize(run, cfg.labels_fraction, cfg.train.epochs))?;
        }
        write_table(&root.join("k_sweep.csv"), &sweep)?;
        let points = sweep.iter().map(|r| (r.k as f64, r.mean_acc)).collect();
        write_line_chart(
            &root.join("k_sweep.svg"),
            "Accuracy vs neighbourhood size",
            "K",
            "mean test accuracy",
            &[Series::new(cfg.train.strategy.name.to_string(), points)],
        )?;
        println!("k,seeds,mean_acc,std_acc");
        for row in &sweep {
            println!("{},{},{:.4},{:.4}", row.k, row.seeds, row.mean_acc, row.std_acc);
        }
    }
    Ok(())
}
