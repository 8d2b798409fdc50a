//! Multi-seed comparison runs: the component/adversarial ablation grid and
//! the neighbourhood-size sweep.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{run_experiment_with, MetricsRow, RunOptions, TrainConfig};
use crate::baselines::{Strategy, StrategySpec};
use crate::data::{make_split, SkeletonSequence};
use crate::error::{Error, Result};

/// Neighbourhood sizes swept by default.
pub const DEFAULT_K_SWEEP: [usize; 5] = [1, 2, 5, 10, 20];

/// One finished training run inside a sweep.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub variant: Strategy,
    pub k: usize,
    pub seed: u64,
    pub best_accuracy: f64,
    pub rows: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepRow {
    pub k: usize,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
}

/// Mean and sample standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Training data shared by every run of a sweep; each seed draws its own
/// labeled/unlabeled split.
#[derive(Debug, Clone, Copy)]
pub struct SweepData<'a> {
    pub train: &'a [SkeletonSequence],
    pub test: &'a [SkeletonSequence],
    pub fraction: f64,
}

/// Runs `cfg` for one seed with artifacts going where `opts` says.
pub fn run_seed(cfg: &TrainConfig, data: SweepData<'_>, seed: u64, opts: &RunOptions) -> Result<AblationRun> {
    let split = make_split(data.train, data.fraction, seed)?.with_test(data.test.to_vec())?;
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let result = run_experiment_with(&cfg, &split, opts)?;
    Ok(AblationRun { variant: cfg.strategy.name, k: cfg.k, seed, best_accuracy: result.best_accuracy, rows: result.rows })
}

/// Number of runs executed concurrently: the available hardware threads.
pub fn worker_count() -> usize {
    thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

struct Job {
    cfg: TrainConfig,
    seed: u64,
    opts: RunOptions,
}

/// Runs every job on up to [`worker_count`] threads; results keep job order.
fn run_jobs(jobs: Vec<Job>, data: SweepData<'_>) -> Result<Vec<AblationRun>> {
    let workers = worker_count().min(jobs.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { break };
                let out = run_seed(&job.cfg, data, job.seed, &job.opts);
                let failed = out.is_err();
                results.lock().expect("results lock")[i] = Some(out);
                if failed {
                    next.store(jobs.len(), Ordering::SeqCst);
                }
            });
        }
    });
    let results = results.into_inner().expect("results lock");
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Some(r) => runs.push(r?),
            None => return Err(Error::Contract("a sweep run was skipped after an earlier failure".into())),
        }
    }
    Ok(runs)
}

/// Every variant over every seed. `opts_for` supplies per-run options
/// (for example an output directory per variant and seed).
pub fn run_ablation(
    base: &TrainConfig,
    data: SweepData<'_>,
    variants: &[Strategy],
    seeds: &[u64],
    opts_for: &mut dyn FnMut(Strategy, usize, u64) -> RunOptions,
) -> Result<(Vec<AblationRow>, Vec<AblationRun>)> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one variant and one seed".into()));
    }
    let mut jobs = Vec::new();
    for &variant in variants {
        let strategy = if base.strategy.name == variant { base.strategy.clone() } else { StrategySpec::new(variant) };
        let cfg = TrainConfig { strategy, ..base.clone() };
        for &seed in seeds {
            let opts = opts_for(variant, cfg.k, seed);
            jobs.push(Job { cfg: cfg.clone(), seed, opts });
        }
    }
    let runs = run_jobs(jobs, data)?;
    let table = variants
        .iter()
        .zip(runs.chunks(seeds.len()))
        .map(|(variant, chunk)| {
            let accs: Vec<f64> = chunk.iter().map(|r| r.best_accuracy).collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            AblationRow { variant: variant.name().to_string(), seeds: seeds.len(), mean_acc, std_acc }
        })
        .collect();
    Ok((table, runs))
}

/// The base strategy for every K over every seed. Runs already present in
/// `reuse` (same strategy, K and seed) are not repeated.
pub fn run_k_sweep(
    base: &TrainConfig,
    data: SweepData<'_>,
    ks: &[usize],
    seeds: &[u64],
    opts_for: &mut dyn FnMut(Strategy, usize, u64) -> RunOptions,
    reuse: &[AblationRun],
) -> Result<(Vec<KSweepRow>, Vec<AblationRun>)> {
    if ks.is_empty() || seeds.is_empty() {
        return Err(Error::Config("a K sweep needs at least one K and one seed".into()));
    }
    let find = |k: usize, seed: u64| reuse.iter().find(|r| r.variant == base.strategy.name && r.k == k && r.seed == seed);
    let mut jobs = Vec::new();
    for &k in ks {
        let cfg = TrainConfig { k, ..base.clone() };
        for &seed in seeds {
            if find(k, seed).is_none() {
                let opts = opts_for(cfg.strategy.name, k, seed);
                jobs.push(Job { cfg: cfg.clone(), seed, opts });
            }
        }
    }
    let runs = run_jobs(jobs, data)?;
    let table = ks
        .iter()
        .map(|&k| {
            let accs: Vec<f64> = seeds
                .iter()
                .map(|&seed| {
                    find(k, seed)
                        .or_else(|| runs.iter().find(|r| r.k == k && r.seed == seed))
                        .map(|r| r.best_accuracy)
                        .expect("every (K, seed) pair has a run")
                })
                .collect();
            let (mean_acc, std_acc) = mean_std(&accs);
            KSweepRow { k, seeds: seeds.len(), mean_acc, std_acc }
        })
        .collect();
    Ok((table, runs))
}

pub fn write_table<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(super::csv_err)?;
    for r in rows {
        w.serialize(r).map_err(super::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(super::csv_err)?;
    r.deserialize().map(|row| row.map_err(super::csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_matches_manual_arithmetic() {
        let (m, s) = mean_std(&[0.5, 0.7, 0.6]);
        assert!((m - 0.6).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-15);
        assert_eq!(mean_std(&[0.42]), (0.42, 0.0));
    }
}
