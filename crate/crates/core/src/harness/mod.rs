//! Experiment runner: training loops, frac sweeps and optimizer comparisons.

mod config;
mod metrics;

pub use config::{
    default_convnet, default_mlp, format_layers, parse_frac, parse_layers, ExperimentConfig, OptimizerKind,
};
pub use metrics::{parse_csv, write_csv, MetricsRow, Summary, CSV_HEADER};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distsim::{cost_model, Cluster, LedgerEntry, MemoryReport, Optimizer, Phase};
use crate::error::{Error, Result};
use crate::network::{gen_dataset, Model};

/// Stream offset so minibatch order is independent of dataset generation.
const SHUFFLE_STREAM: u64 = 0x0062_6174_6368_6573;

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub rows: Vec<MetricsRow>,
    pub summary: Summary,
    /// Per-step eigen-phase compute units, indexed like `rows`.
    pub eigen_compute: Vec<f64>,
    /// Ledger of the whole run.
    pub ledger: Vec<LedgerEntry>,
    /// Worker memory after the last step.
    pub memory: MemoryReport,
}

impl ExperimentResult {
    pub fn csv(&self) -> String {
        write_csv(&self.rows)
    }
}

pub fn build_cluster(config: &ExperimentConfig) -> Result<Cluster> {
    let model = Model::new(&config.layers, config.seed)?;
    let optimizer = match config.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd,
        OptimizerKind::Kfac => Optimizer::Kfac(config.kfac),
    };
    Cluster::new(
        model,
        config.dist,
        optimizer,
        config.objective,
        config.lr,
        config.momentum,
        config.weight_decay,
    )
}

/// Trains for `config.iterations` steps and returns one row per step.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let (train, valid) = gen_dataset(config.dataset, config.dataset_n, config.effective_dataset_seed())?;
    let mut cluster = build_cluster(config)?;
    let steps_per_epoch = train.len() / config.batch_size;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    let mut rows = Vec::with_capacity(config.iterations);
    let mut eigen_compute = Vec::with_capacity(config.iterations);
    let mut accuracy = 0.0;
    for step in 0..config.iterations {
        let within = step % steps_per_epoch;
        if within == 0 {
            order.shuffle(&mut rng);
        }
        let batch = train.select(&order[within * config.batch_size..(within + 1) * config.batch_size])?;
        let outcome = cluster.step(&batch, step)?;

        let last = step + 1 == config.iterations;
        if step % config.eval_every == 0 || last {
            accuracy = cluster.model().accuracy(&valid)?;
        }
        let entries: Vec<LedgerEntry> = cluster.ledger().entries_for(step).cloned().collect();
        let time = cost_model(&entries, &cluster.dist);
        let (sim_time, phases) = time.first().map_or((0.0, Default::default()), |t| (t.total, t.phases));
        eigen_compute.push(
            entries
                .iter()
                .filter(|e| e.phase == Phase::EigenBcast)
                .map(|e| e.compute_units)
                .sum(),
        );
        let memory = cluster.memory_report()?;
        let row = MetricsRow {
            step,
            epoch: step / steps_per_epoch,
            train_loss: outcome.loss,
            valid_accuracy: accuracy,
            sim_time,
            phases,
            kfac_bytes: cluster.ledger().kfac_bytes(step),
            peak_overhead_bytes: memory.peak_total(),
        };
        if ![row.train_loss, row.valid_accuracy, row.sim_time, row.kfac_bytes]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(Error::State(format!("non-finite metric at step {step}")));
        }
        rows.push(row);
        if config.stop_at_target && accuracy >= config.target_metric {
            break;
        }
    }
    let summary = Summary::from_rows(&rows, config.target_metric);
    Ok(ExperimentResult {
        rows,
        summary,
        eigen_compute,
        ledger: cluster.ledger().entries.clone(),
        memory: cluster.memory_report()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub frac: f64,
    pub grad_workers: usize,
    pub mean_iter_time: f64,
    /// Mean simulated time of steps that recompute eigen decompositions.
    pub mean_eigen_step_time: f64,
    /// Mean simulated time of all other steps.
    pub mean_other_step_time: f64,
    /// Eigen state summed over workers at the end of the run.
    pub total_eigen_bytes: usize,
    /// Largest per-worker factor + eigen footprint.
    pub peak_worker_overhead_bytes: usize,
    pub mean_kfac_bytes: f64,
}

pub const SWEEP_HEADER: &str = "frac,grad_workers,mean_iter_time,mean_eigen_step_time,mean_other_step_time,total_eigen_bytes,peak_worker_overhead_bytes,mean_kfac_bytes";

impl SweepRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.frac,
            self.grad_workers,
            self.mean_iter_time,
            self.mean_eigen_step_time,
            self.mean_other_step_time,
            self.total_eigen_bytes,
            self.peak_worker_overhead_bytes,
            self.mean_kfac_bytes
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn sweep_point(config: &ExperimentConfig) -> Result<SweepRow> {
    let result = run_experiment(config)?;
    let mut eigen_steps = Vec::new();
    let mut other_steps = Vec::new();
    for r in &result.rows {
        if config.kfac.is_eigen_step(r.step) {
            eigen_steps.push(r.sim_time);
        } else {
            other_steps.push(r.sim_time);
        }
    }
    let all: Vec<f64> = result.rows.iter().map(|r| r.sim_time).collect();
    let kfac: Vec<f64> = result.rows.iter().map(|r| r.kfac_bytes).collect();
    let peak = result
        .memory
        .workers
        .iter()
        .map(|w| w.factor_bytes + w.eigen_bytes)
        .max()
        .unwrap_or(0);
    Ok(SweepRow {
        frac: config.dist.grad_worker_frac,
        grad_workers: config.dist.grad_worker_count(),
        mean_iter_time: mean(&all),
        mean_eigen_step_time: mean(&eigen_steps),
        mean_other_step_time: mean(&other_steps),
        total_eigen_bytes: result.memory.total_eigen_bytes(),
        peak_worker_overhead_bytes: peak,
        mean_kfac_bytes: mean(&kfac),
    })
}

/// Runs one K-FAC experiment per fraction, concurrently. Rows follow `fracs`.
pub fn sweep_frac(config: &ExperimentConfig, fracs: &[f64]) -> Result<Vec<SweepRow>> {
    if config.optimizer != OptimizerKind::Kfac {
        return Err(Error::config("optimizer", "a frac sweep needs the kfac optimizer"));
    }
    if fracs.is_empty() {
        return Err(Error::config("dist.grad_worker_frac", "no fractions given"));
    }
    let configs: Vec<ExperimentConfig> = fracs
        .iter()
        .map(|&f| {
            let mut c = config.clone();
            c.dist.grad_worker_frac = f;
            c.stop_at_target = false;
            c.validate().map(|_| c)
        })
        .collect::<Result<_>>()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || sweep_point(c))).collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Consistency("sweep worker panicked".into())))
            })
            .collect()
    })
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub baseline: ExperimentResult,
    pub candidate: ExperimentResult,
    /// `candidate steps / baseline steps`; `None` unless both reached the target.
    pub step_ratio: Option<f64>,
    /// Same ratio in simulated time.
    pub time_ratio: Option<f64>,
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let show = |v: Option<String>| v.unwrap_or_else(|| "not reached".to_string());
        format!(
            "baseline_steps_to_target = {}\ncandidate_steps_to_target = {}\nstep_ratio = {}\ntime_ratio = {}\n",
            show(self.baseline.summary.steps_to_target.map(|v| v.to_string())),
            show(self.candidate.summary.steps_to_target.map(|v| v.to_string())),
            show(self.step_ratio.map(|v| v.to_string())),
            show(self.time_ratio.map(|v| v.to_string())),
        )
    }
}

/// Checks that two configs differ only in optimizer settings.
pub fn check_comparable(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<()> {
    let mismatch = |field: &str| Err(Error::config(field, "differs between the compared configs"));
    if a.dataset != b.dataset {
        return mismatch("dataset.kind");
    }
    if a.dataset_n != b.dataset_n {
        return mismatch("dataset.n");
    }
    if a.effective_dataset_seed() != b.effective_dataset_seed() {
        return mismatch("dataset.seed");
    }
    if a.layers != b.layers {
        return mismatch("model.layers");
    }
    if a.seed != b.seed {
        return mismatch("seed");
    }
    if a.batch_size != b.batch_size {
        return mismatch("batch_size");
    }
    if a.target_metric != b.target_metric {
        return mismatch("target_metric");
    }
    Ok(())
}

pub fn compare_optimizers(baseline: &ExperimentConfig, candidate: &ExperimentConfig) -> Result<Comparison> {
    baseline.validate()?;
    candidate.validate()?;
    check_comparable(baseline, candidate)?;
    let (b, c) = std::thread::scope(|scope| {
        let hb = scope.spawn(|| run_experiment(baseline));
        let hc = scope.spawn(|| run_experiment(candidate));
        let join = |h: std::thread::ScopedJoinHandle<'_, Result<ExperimentResult>>| {
            h.join()
                .unwrap_or_else(|_| Err(Error::Consistency("experiment thread panicked".into())))
        };
        (join(hb), join(hc))
    });
    let (baseline, candidate) = (b?, c?);
    let ratio = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    Ok(Comparison {
        step_ratio: ratio(
            candidate.summary.steps_to_target.map(|v| v as f64),
            baseline.summary.steps_to_target.map(|v| v as f64),
        ),
        time_ratio: ratio(
            candidate.summary.sim_time_to_target,
            baseline.summary.sim_time_to_target,
        ),
        baseline,
        candidate,
    })
}
