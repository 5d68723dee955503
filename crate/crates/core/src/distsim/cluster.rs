use super::comm::{Ledger, Phase, SimContext};
use super::cost::{memory_report, MemoryReport};
use super::topology::{build_topology, DistConfig, EigenAssignment, Objective, WorkerTopology};
use crate::error::{Error, Result};
use crate::kfac::{
    accumulate_factors, compute_factors, damped_reciprocal, eigen_factor, precondition, scale_gradient,
    update_running_factors, EigenState, KfacConfig, KfacLayerState,
};
use crate::linalg::DenseMatrix;
use crate::network::{self, backward, capture_gradient, forward, Batch, LayerCapture, LayerSpec, Model};

/// Nominal flop count of a dense symmetric eigen decomposition with vectors.
const EIGEN_FLOPS_PER_CUBE: f64 = 9.0;
const WORKING_BYTES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Kfac(KfacConfig),
}

#[derive(Debug, Clone)]
pub struct Worker {
    pub rank: usize,
    pub model: Model,
    pub states: Vec<KfacLayerState>,
    pub peak_capture_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub factor_step: bool,
    pub eigen_step: bool,
}

/// A set of simulated workers advancing in lockstep.
pub struct Cluster {
    pub dist: DistConfig,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub topology: WorkerTopology,
    pub workers: Vec<Worker>,
    specs: Vec<LayerSpec>,
    ctx: SimContext,
}

impl Cluster {
    pub fn new(
        model: Model,
        dist: DistConfig,
        optimizer: Optimizer,
        objective: Objective,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
    ) -> Result<Self> {
        dist.validate()?;
        if let Optimizer::Kfac(cfg) = &optimizer {
            cfg.validate()?;
            if cfg.precision.element_bytes() != dist.element_bytes {
                return Err(Error::config(
                    "dist.element_bytes",
                    format!(
                        "{} bytes per element does not match {} precision",
                        dist.element_bytes,
                        cfg.precision.name()
                    ),
                ));
            }
        }
        let specs = model.specs();
        let topology = build_topology(&specs, &dist, objective)?;
        let workers = (0..dist.world_size)
            .map(|rank| Worker {
                rank,
                model: model.clone(),
                states: specs.iter().map(KfacLayerState::new).collect(),
                peak_capture_bytes: 0,
            })
            .collect();
        Ok(Self {
            dist,
            optimizer,
            lr,
            momentum,
            weight_decay,
            topology,
            workers,
            specs,
            ctx: SimContext::new(dist.world_size),
        })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ctx.ledger
    }

    /// Replica held by rank 0 (all replicas are identical between steps).
    pub fn model(&self) -> &Model {
        &self.workers[0].model
    }

    pub fn memory_report(&self) -> Result<MemoryReport> {
        memory_report(&self.workers, &self.topology, &self.dist)
    }

    /// Runs one training iteration on `batch`, split evenly across workers.
    pub fn step(&mut self, batch: &Batch, step: usize) -> Result<StepOutcome> {
        let world = self.dist.world_size;
        let shards = batch.shard(world)?;
        let kfac_cfg = match self.optimizer {
            Optimizer::Kfac(cfg) => Some(cfg),
            Optimizer::Sgd => None,
        };
        let factor_step = kfac_cfg.is_some_and(|c| c.is_factor_step(step));
        let eigen_step = kfac_cfg.is_some_and(|c| c.is_eigen_step(step));

        self.ctx.begin_phase(step, Phase::Forward);
        let mut passes = Vec::with_capacity(world);
        for (worker, shard) in self.workers.iter().zip(&shards) {
            passes.push(forward(&worker.model, shard, true)?);
            self.ctx.compute(worker.rank, forward_flops(&self.specs, shard.len()));
        }
        self.ctx.end_phase();

        self.ctx.begin_phase(step, Phase::Backward);
        let mut sample_losses = Vec::with_capacity(batch.len());
        for ((worker, shard), pass) in self.workers.iter_mut().zip(&shards).zip(passes.iter_mut()) {
            let back = backward(&worker.model, shard, pass)?;
            sample_losses.extend(back.sample_losses);
            self.ctx
                .compute(worker.rank, 2.0 * forward_flops(&self.specs, shard.len()));
            if factor_step {
                let bytes = pass
                    .captures
                    .iter()
                    .map(|c| WORKING_BYTES * c.a.rows() * (c.a.cols() + c.g.as_ref().map_or(0, |g| g.cols())))
                    .sum();
                worker.peak_capture_bytes = worker.peak_capture_bytes.max(bytes);
            }
        }
        self.ctx.end_phase();

        // Reductions stack the shard rows in rank order and evaluate once, so
        // the result is the whole-batch value on every worker.
        self.ctx.begin_phase(step, Phase::GradAllreduce);
        let mut global = Vec::with_capacity(self.specs.len());
        let mut grads = Vec::with_capacity(self.specs.len());
        for l in 0..self.specs.len() {
            let parts: Vec<&LayerCapture> = passes.iter().map(|p| &p.captures[l]).collect();
            let capture = LayerCapture::concat(&parts)?;
            let grad = capture_gradient(&capture)?;
            self.ctx
                .account_allreduce((grad.len() * WORKING_BYTES) as f64, Some(l), "gradient");
            grads.push(grad);
            global.push(capture);
        }
        let loss = sample_losses.iter().sum::<f64>() / sample_losses.len() as f64;
        self.ctx.end_phase();

        let updates = match kfac_cfg {
            Some(cfg) => {
                if factor_step {
                    self.factor_phase(step, &cfg, &global, &shards)?;
                }
                if eigen_step {
                    self.eigen_phase(step, &cfg)?;
                }
                self.precondition_phases(step, &cfg, &grads)?
            }
            None => vec![grads; world],
        };

        for (worker, update) in self.workers.iter_mut().zip(&updates) {
            network::sgd_step(&mut worker.model, update, self.lr, self.momentum, self.weight_decay)?;
        }
        self.check_replicas()?;
        if !self.workers[0].model.is_finite() {
            return Err(Error::State(format!("parameters became non-finite at step {step}")));
        }
        Ok(StepOutcome {
            loss,
            factor_step,
            eigen_step,
        })
    }

    fn factor_phase(&mut self, step: usize, cfg: &KfacConfig, global: &[LayerCapture], shards: &[Batch]) -> Result<()> {
        let eb = self.dist.element_bytes;
        self.ctx.begin_phase(step, Phase::FactorAllreduce);
        for (l, capture) in global.iter().enumerate() {
            let spec = &self.specs[l];
            let (na, ng) = (spec.param_cols(), spec.weight_out());
            for (rank, shard) in shards.iter().enumerate() {
                let rows = (shard.len() * spec.positions()) as f64;
                self.ctx
                    .compute(rank, 2.0 * rows * ((na * na) as f64 + (ng * ng) as f64));
            }
            let (a_batch, g_batch) = compute_factors(capture)?;
            for worker in &mut self.workers {
                let state = &mut worker.states[l];
                accumulate_factors(state, &a_batch, &g_batch)?;
                update_running_factors(state, cfg.running_avg_decay, cfg.precision)?;
            }
            for (n, label) in [(na, "factor_a"), (ng, "factor_g")] {
                let elements = if self.dist.triangular_comm {
                    n * (n + 1) / 2
                } else {
                    n * n
                };
                self.ctx.account_allreduce((elements * eb) as f64, Some(l), label);
            }
        }
        self.ctx.end_phase();
        Ok(())
    }

    fn eigen_phase(&mut self, step: usize, cfg: &KfacConfig) -> Result<()> {
        let eb = self.dist.element_bytes as f64;
        self.ctx.begin_phase(step, Phase::EigenBcast);
        for l in 0..self.specs.len() {
            let placement = self.topology.layers[l].clone();
            let primary = placement.eigen.primary();
            let factors = self.workers[primary].states[l]
                .factors()
                .cloned()
                .ok_or_else(|| Error::State(format!("layer {l} has no factors at eigen step {step}")))?;
            let (na, ng) = (factors.a.rows(), factors.g.rows());
            let (qa, va) = eigen_factor(&factors.a)?;
            let (qg, vg) = eigen_factor(&factors.g)?;
            let dga = damped_reciprocal(&vg, &va, cfg.damping);
            let eigen = EigenState::new(qa, qg, dga, cfg.precision);

            match placement.eigen {
                EigenAssignment::Layer(w) => {
                    self.ctx
                        .compute(w, eigen_flops(na) + eigen_flops(ng) + (na * ng) as f64);
                    self.ctx.broadcast(
                        w,
                        &placement.gradient_workers,
                        eb * eigen.element_count() as f64,
                        Some(l),
                        "eigen",
                    )?;
                }
                EigenAssignment::PerFactor { a, g } => {
                    self.ctx.compute(a, eigen_flops(na));
                    self.ctx.compute(g, eigen_flops(ng) + (na * ng) as f64);
                    if a != g {
                        // υ_A travels to the worker forming dGA
                        self.ctx
                            .broadcast(a, &[a, g], (na * WORKING_BYTES) as f64, Some(l), "eigenvalues_a")?;
                    }
                    let all: Vec<usize> = (0..self.dist.world_size).collect();
                    self.ctx
                        .broadcast(a, &all, eb * eigen.qa.len() as f64, Some(l), "eigen_a")?;
                    self.ctx.broadcast(
                        g,
                        &all,
                        eb * (eigen.qg.len() + eigen.dga.len()) as f64,
                        Some(l),
                        "eigen_g",
                    )?;
                }
            }
            for &r in &placement.gradient_workers {
                self.workers[r].states[l].set_eigen(eigen.clone())?;
            }
        }
        self.ctx.end_phase();
        Ok(())
    }

    /// Returns every worker's final per-layer update.
    fn precondition_phases(
        &mut self,
        step: usize,
        cfg: &KfacConfig,
        grads: &[DenseMatrix],
    ) -> Result<Vec<Vec<DenseMatrix>>> {
        let world = self.dist.world_size;
        let layers = self.specs.len();
        let mut results: Vec<Vec<Option<DenseMatrix>>> = vec![vec![None; layers]; world];

        self.ctx.begin_phase(step, Phase::Precond);
        for (l, grad) in grads.iter().enumerate() {
            let (out, inp) = grad.shape();
            let flops = 4.0 * (out * inp) as f64 * (out + inp) as f64 + (out * inp) as f64;
            let mut reference: Option<DenseMatrix> = None;
            for &r in &self.topology.layers[l].gradient_workers {
                let pre = precondition(&self.workers[r].states[l], grad)?;
                let scaled = scale_gradient(&pre, grad, cfg.grad_scale)?;
                self.ctx.compute(r, flops);
                match &reference {
                    Some(first) if !bit_identical(first, &scaled) => {
                        return Err(Error::Consistency(format!(
                            "gradient workers disagree on layer {l} at step {step}"
                        )));
                    }
                    Some(_) => {}
                    None => reference = Some(scaled.clone()),
                }
                results[r][l] = Some(scaled);
            }
        }
        self.ctx.end_phase();

        self.ctx.begin_phase(step, Phase::PrecondGradBcast);
        for (l, grad) in grads.iter().enumerate() {
            let placement = &self.topology.layers[l];
            if placement.gradient_workers.len() == world {
                continue;
            }
            let groups: Vec<(usize, Vec<usize>)> = placement
                .receivers
                .iter()
                .map(|(gw, rs)| {
                    let mut group = vec![*gw];
                    group.extend(rs);
                    (*gw, group)
                })
                .collect();
            self.ctx.broadcast_simultaneous(
                &groups,
                (grad.len() * WORKING_BYTES) as f64,
                Some(l),
                "preconditioned_gradient",
            )?;
            for (gw, rs) in &placement.receivers {
                let sent = results[*gw][l].clone();
                for &r in rs {
                    results[r][l] = sent.clone();
                }
            }
        }
        self.ctx.end_phase();

        results
            .into_iter()
            .enumerate()
            .map(|(r, per_layer)| {
                per_layer
                    .into_iter()
                    .enumerate()
                    .map(|(l, g)| g.ok_or_else(|| Error::Consistency(format!("worker {r} never received layer {l}"))))
                    .collect()
            })
            .collect()
    }

    fn check_replicas(&self) -> Result<()> {
        let reference = &self.workers[0].model;
        for worker in &self.workers[1..] {
            let same = worker
                .model
                .layers
                .iter()
                .zip(&reference.layers)
                .all(|(a, b)| bit_identical(&a.params, &b.params) && bit_identical(&a.velocity, &b.velocity));
            if !same {
                return Err(Error::Consistency(format!(
                    "replica {} diverged from replica 0",
                    worker.rank
                )));
            }
        }
        Ok(())
    }
}

fn bit_identical(a: &DenseMatrix, b: &DenseMatrix) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn forward_flops(specs: &[LayerSpec], samples: usize) -> f64 {
    specs
        .iter()
        .map(|s| 2.0 * (samples * s.positions() * s.weight_out() * s.param_cols()) as f64)
        .sum()
}

fn eigen_flops(n: usize) -> f64 {
    EIGEN_FLOPS_PER_CUBE * (n * n * n) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{gen_dataset, Activation, DatasetKind};

    fn model() -> Model {
        Model::new(
            &[
                LayerSpec::dense(2, 8, Activation::Relu),
                LayerSpec::dense(8, 2, Activation::SoftmaxCrossEntropy),
            ],
            4,
        )
        .unwrap()
    }

    fn cluster(world: usize, frac: f64) -> Cluster {
        let dist = DistConfig {
            world_size: world,
            grad_worker_frac: frac,
            ..DistConfig::default()
        };
        Cluster::new(
            model(),
            dist,
            Optimizer::Kfac(KfacConfig::default()),
            Objective::Time,
            0.1,
            0.9,
            0.0,
        )
        .unwrap()
    }

    #[test]
    fn replicas_stay_identical() {
        let (train, _) = gen_dataset(DatasetKind::TwoSpirals, 100, 3).unwrap();
        let batch = train.select(&(0..16).collect::<Vec<_>>()).unwrap();
        let mut c = cluster(4, 0.5);
        for step in 0..5 {
            c.step(&batch, step).unwrap();
        }
        let first = &c.workers[0].model;
        assert!(c.workers.iter().all(|w| &w.model == first));
    }

    #[test]
    fn eigen_state_only_on_gradient_workers() {
        let (train, _) = gen_dataset(DatasetKind::TwoSpirals, 100, 3).unwrap();
        let batch = train.select(&(0..16).collect::<Vec<_>>()).unwrap();
        let mut c = cluster(4, 0.25);
        c.step(&batch, 0).unwrap();
        for (l, placement) in c.topology.layers.iter().enumerate() {
            for w in &c.workers {
                assert_eq!(w.states[l].have_eigen(), placement.is_gradient_worker(w.rank));
                assert!(w.states[l].have_factors());
            }
        }
        assert!(c.memory_report().is_ok());
    }

    #[test]
    fn precision_must_match_element_bytes() {
        let cfg = KfacConfig {
            precision: crate::kfac::Precision::Half,
            ..KfacConfig::default()
        };
        let r = Cluster::new(
            model(),
            DistConfig::default(),
            Optimizer::Kfac(cfg),
            Objective::Time,
            0.1,
            0.0,
            0.0,
        );
        assert!(matches!(r, Err(Error::Config { .. })));
    }

    #[test]
    fn batch_must_split_evenly() {
        let (train, _) = gen_dataset(DatasetKind::TwoSpirals, 100, 3).unwrap();
        let batch = train.select(&(0..10).collect::<Vec<_>>()).unwrap();
        assert!(cluster(4, 1.0).step(&batch, 0).is_err());
    }
}
