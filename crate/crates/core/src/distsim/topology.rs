use crate::error::{Error, Result};
use crate::network::LayerSpec;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistConfig {
    pub world_size: usize,
    pub grad_worker_frac: f64,
    /// Simulated time per latency round.
    pub latency: f64,
    /// Simulated time per byte.
    pub inv_bandwidth: f64,
    /// Floating-point operations per unit of simulated time.
    pub compute_rate: f64,
    pub triangular_comm: bool,
    /// Bytes per factor/eigen element: 8 (full) or 2 (half).
    pub element_bytes: usize,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            world_size: 8,
            grad_worker_frac: 1.0 / 8.0,
            latency: 5.0,
            inv_bandwidth: 1e-3,
            compute_rate: 1e4,
            triangular_comm: false,
            element_bytes: 8,
        }
    }
}

impl DistConfig {
    /// `max(1, round(grad_worker_frac · world_size))`
    pub fn grad_worker_count(&self) -> usize {
        ((self.grad_worker_frac * self.world_size as f64).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world_size == 0 {
            return Err(Error::config("dist.world_size", "must be at least 1"));
        }
        if !(self.grad_worker_frac > 0.0 && self.grad_worker_frac <= 1.0) {
            return Err(Error::config("dist.grad_worker_frac", "must lie in (0, 1]"));
        }
        let w = self.grad_worker_count();
        if !self.world_size.is_multiple_of(w) {
            return Err(Error::config(
                "dist.grad_worker_frac",
                format!("{} gradient workers do not divide world size {}", w, self.world_size),
            ));
        }
        if self.element_bytes != 2 && self.element_bytes != 8 {
            return Err(Error::config("dist.element_bytes", "must be 2 or 8"));
        }
        for (field, v) in [
            ("dist.latency", self.latency),
            ("dist.inv_bandwidth", self.inv_bandwidth),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(self.compute_rate > 0.0 && self.compute_rate.is_finite()) {
            return Err(Error::config("dist.compute_rate", "must be positive"));
        }
        Ok(())
    }
}

/// Cost model used to balance eigen decompositions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Job cost `N³` per `N × N` factor.
    Time,
    /// Job cost `N²` per `N × N` factor.
    Memory,
}

impl Objective {
    fn factor_cost(&self, n: usize) -> f64 {
        let n = n as f64;
        match self {
            Objective::Time => n * n * n,
            Objective::Memory => n * n,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Time => "time",
            Objective::Memory => "memory",
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "time" => Ok(Objective::Time),
            "memory" => Ok(Objective::Memory),
            other => Err(Error::config("dist.objective", format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EigenAssignment {
    /// Both factors decomposed by one gradient worker.
    Layer(usize),
    /// Factors decomposed independently; the `g` worker also forms `dGA`.
    PerFactor { a: usize, g: usize },
}

impl EigenAssignment {
    /// Worker that ends up holding `dGA` first.
    pub fn primary(&self) -> usize {
        match *self {
            EigenAssignment::Layer(w) => w,
            EigenAssignment::PerFactor { g, .. } => g,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPlacement {
    pub gradient_workers: Vec<usize>,
    /// `(gradient worker, its receivers)`, in `gradient_workers` order.
    pub receivers: Vec<(usize, Vec<usize>)>,
    pub eigen: EigenAssignment,
}

impl LayerPlacement {
    pub fn is_gradient_worker(&self, rank: usize) -> bool {
        self.gradient_workers.contains(&rank)
    }

    /// Gradient worker that sends this layer's preconditioned gradient to `rank`.
    pub fn source_for(&self, rank: usize) -> Option<usize> {
        if self.is_gradient_worker(rank) {
            return Some(rank);
        }
        self.receivers
            .iter()
            .find(|(_, rs)| rs.contains(&rank))
            .map(|(gw, _)| *gw)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerTopology {
    pub world_size: usize,
    pub layers: Vec<LayerPlacement>,
    /// Makespan of the eigen assignment under the chosen objective.
    pub eigen_makespan: f64,
}

impl WorkerTopology {
    pub fn grad_worker_count(&self) -> usize {
        self.layers.first().map_or(0, |l| l.gradient_workers.len())
    }
}

/// Places gradient workers, receivers and eigen work for every layer.
///
/// Layer `ℓ` with `W` gradient workers out of `P` uses ranks
/// `(ℓ·W + j) mod P` for `j < W`. The remaining ranks, in ascending order, are
/// dealt round-robin to the gradient workers. Eigen jobs go through LPT: one
/// job per layer restricted to that layer's gradient workers when `W < P`,
/// one job per factor over all workers when `W = P`.
pub fn build_topology(specs: &[LayerSpec], dist: &DistConfig, objective: Objective) -> Result<WorkerTopology> {
    dist.validate()?;
    let p = dist.world_size;
    let w = dist.grad_worker_count();

    let mut layers: Vec<LayerPlacement> = (0..specs.len())
        .map(|l| {
            let gradient_workers: Vec<usize> = (0..w).map(|j| (l * w + j) % p).collect();
            let mut rest: Vec<usize> = (0..p).filter(|r| !gradient_workers.contains(r)).collect();
            rest.sort_unstable();
            let mut receivers: Vec<(usize, Vec<usize>)> = gradient_workers.iter().map(|&g| (g, Vec::new())).collect();
            for (i, r) in rest.into_iter().enumerate() {
                receivers[i % w].1.push(r);
            }
            LayerPlacement {
                gradient_workers,
                receivers,
                eigen: EigenAssignment::Layer(0),
            }
        })
        .collect();

    let eigen_makespan = if w < p {
        let costs: Vec<f64> = specs
            .iter()
            .map(|s| objective.factor_cost(s.param_cols()) + objective.factor_cost(s.weight_out()))
            .collect();
        let eligible: Vec<Vec<usize>> = layers.iter().map(|l| l.gradient_workers.clone()).collect();
        let (assignment, makespan) = lpt_schedule_constrained(&costs, p, |job| &eligible[job]);
        for (layer, worker) in layers.iter_mut().zip(assignment) {
            layer.eigen = EigenAssignment::Layer(worker);
        }
        makespan
    } else {
        // jobs 2ℓ and 2ℓ+1 are layer ℓ's A and G factors
        let costs: Vec<f64> = specs
            .iter()
            .flat_map(|s| {
                [
                    objective.factor_cost(s.param_cols()),
                    objective.factor_cost(s.weight_out()),
                ]
            })
            .collect();
        let (assignment, makespan) = lpt_schedule(&costs, p);
        for (l, layer) in layers.iter_mut().enumerate() {
            layer.eigen = EigenAssignment::PerFactor {
                a: assignment[2 * l],
                g: assignment[2 * l + 1],
            };
        }
        makespan
    };

    Ok(WorkerTopology {
        world_size: p,
        layers,
        eigen_makespan,
    })
}

/// Longest-processing-time-first scheduling.
///
/// Jobs are taken in decreasing cost (ties by job index) and each goes to the
/// least-loaded worker (ties to the lower id). Returns the worker of every job
/// and the makespan.
pub fn lpt_schedule(job_costs: &[f64], workers: usize) -> (Vec<usize>, f64) {
    let all: Vec<usize> = (0..workers).collect();
    lpt_schedule_constrained(job_costs, workers, |_| &all)
}

/// LPT where each job may only run on the workers listed by `eligible`.
pub fn lpt_schedule_constrained<'a>(
    job_costs: &[f64],
    workers: usize,
    eligible: impl Fn(usize) -> &'a [usize],
) -> (Vec<usize>, f64) {
    assert!(workers >= 1, "LPT needs at least one worker");
    let mut order: Vec<usize> = (0..job_costs.len()).collect();
    order.sort_by(|&a, &b| job_costs[b].total_cmp(&job_costs[a]).then(a.cmp(&b)));

    let mut loads = vec![0.0_f64; workers];
    let mut assignment = vec![0; job_costs.len()];
    for job in order {
        let target = eligible(job)
            .iter()
            .copied()
            .min_by(|&a, &b| loads[a].total_cmp(&loads[b]).then(a.cmp(&b)))
            .expect("every job has an eligible worker");
        loads[target] += job_costs[job];
        assignment[job] = target;
    }
    let makespan = loads.iter().fold(0.0_f64, |m, l| m.max(*l));
    (assignment, makespan)
}

/// Optimal makespan by enumerating all `workers^jobs` assignments.
pub fn brute_force_makespan(job_costs: &[f64], workers: usize) -> f64 {
    assert!(workers >= 1, "need at least one worker");
    fn search(costs: &[f64], loads: &mut [f64], best: &mut f64) {
        let current = loads.iter().fold(0.0_f64, |m, l| m.max(*l));
        if current >= *best {
            return;
        }
        match costs.split_first() {
            None => *best = current,
            Some((&job, rest)) => {
                for w in 0..loads.len() {
                    loads[w] += job;
                    search(rest, loads, best);
                    loads[w] -= job;
                }
            }
        }
    }
    let mut best = f64::INFINITY;
    search(job_costs, &mut vec![0.0; workers], &mut best);
    if job_costs.is_empty() {
        0.0
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::Activation;

    fn mlp() -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(2, 32, Activation::Relu),
            LayerSpec::dense(32, 32, Activation::Relu),
            LayerSpec::dense(32, 2, Activation::SoftmaxCrossEntropy),
        ]
    }

    fn dist(world: usize, frac: f64) -> DistConfig {
        DistConfig {
            world_size: world,
            grad_worker_frac: frac,
            ..DistConfig::default()
        }
    }

    #[test]
    fn mem_opt_layout() {
        let t = build_topology(&mlp(), &dist(8, 1.0 / 8.0), Objective::Time).unwrap();
        for (l, layer) in t.layers.iter().enumerate() {
            assert_eq!(layer.gradient_workers, vec![l % 8]);
            assert_eq!(layer.receivers.len(), 1);
            assert_eq!(layer.receivers[0].1.len(), 7);
            assert_eq!(layer.eigen, EigenAssignment::Layer(l % 8));
        }
    }

    #[test]
    fn hybrid_layout_pairs_workers() {
        let t = build_topology(&mlp(), &dist(8, 0.5), Objective::Time).unwrap();
        let first = &t.layers[0];
        assert_eq!(first.gradient_workers, vec![0, 1, 2, 3]);
        assert_eq!(
            first.receivers,
            vec![(0, vec![4]), (1, vec![5]), (2, vec![6]), (3, vec![7])]
        );
        for layer in &t.layers {
            assert!(layer.receivers.iter().all(|(_, r)| r.len() == 1));
            assert!(layer.is_gradient_worker(layer.eigen.primary()));
        }
        assert_eq!(t.layers[1].gradient_workers, vec![4, 5, 6, 7]);
    }

    #[test]
    fn comm_opt_layout() {
        let t = build_topology(&mlp(), &dist(8, 1.0), Objective::Time).unwrap();
        for layer in &t.layers {
            assert_eq!(layer.gradient_workers.len(), 8);
            assert!(layer.receivers.iter().all(|(_, r)| r.is_empty()));
            assert!(matches!(layer.eigen, EigenAssignment::PerFactor { .. }));
        }
    }

    #[test]
    fn receivers_partition_the_rest() {
        for (world, frac) in [(8, 0.25), (6, 1.0 / 3.0), (4, 0.5), (12, 0.25)] {
            let t = build_topology(&mlp(), &dist(world, frac), Objective::Memory).unwrap();
            let w = t.grad_worker_count();
            for layer in &t.layers {
                let mut seen: Vec<usize> = layer.gradient_workers.clone();
                for (gw, rs) in &layer.receivers {
                    assert!(layer.is_gradient_worker(*gw));
                    assert_eq!(rs.len(), (world - w) / w);
                    seen.extend(rs);
                }
                seen.sort_unstable();
                assert_eq!(seen, (0..world).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn frac_validation() {
        assert!(dist(8, 0.3).validate().is_ok());
        assert!(matches!(dist(8, 0.4).validate(), Err(Error::Config { .. })));
        assert!(dist(8, 0.0).validate().is_err());
        assert!(dist(8, 1.5).validate().is_err());
        assert_eq!(dist(8, 0.01).grad_worker_count(), 1);
        assert_eq!(dist(1, 0.5).grad_worker_count(), 1);
    }

    #[test]
    fn lpt_examples() {
        let (assign, makespan) = lpt_schedule(&[5.0, 4.0, 3.0, 3.0, 3.0], 2);
        assert_eq!(makespan, 10.0);
        assert_eq!(assign, vec![0, 1, 1, 0, 1]);
        assert_eq!(brute_force_makespan(&[5.0, 4.0, 3.0, 3.0, 3.0], 2), 9.0);

        assert_eq!(lpt_schedule(&[1.0, 2.0, 3.5], 1).1, 6.5);
        assert_eq!(lpt_schedule(&[1.0; 4], 4), (vec![0, 1, 2, 3], 1.0));
    }
}
