use super::cluster::Worker;
use super::comm::{LedgerEntry, Phase};
use super::topology::{DistConfig, WorkerTopology};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes(pub [f64; 7]);

impl PhaseTimes {
    pub fn get(&self, phase: Phase) -> f64 {
        self.0[phase.index()]
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTime {
    pub step: usize,
    pub total: f64,
    pub phases: PhaseTimes,
}

/// Simulated time per step:
/// `Σ_phases max_worker(compute)/compute_rate + rounds·latency + bytes·inv_bandwidth`.
///
/// Phases run back to back; overlap of communication with backprop is not modeled.
pub fn cost_model(entries: &[LedgerEntry], dist: &DistConfig) -> Vec<StepTime> {
    let mut out: Vec<StepTime> = Vec::new();
    for e in entries {
        let t = e.compute_units / dist.compute_rate + e.rounds as f64 * dist.latency + e.bytes * dist.inv_bandwidth;
        match out.last_mut() {
            Some(last) if last.step == e.step => {
                last.phases.0[e.phase.index()] += t;
                last.total += t;
            }
            _ => {
                let mut phases = PhaseTimes::default();
                phases.0[e.phase.index()] = t;
                out.push(StepTime {
                    step: e.step,
                    total: t,
                    phases,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerMemory {
    pub rank: usize,
    pub factor_bytes: usize,
    /// `Q_A + Q_G + dGA` for the layers this worker holds eigen state for.
    pub eigen_bytes: usize,
    /// Largest transient capture buffer seen (working precision).
    pub capture_bytes: usize,
}

impl WorkerMemory {
    pub fn total(&self) -> usize {
        self.factor_bytes + self.eigen_bytes + self.capture_bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub workers: Vec<WorkerMemory>,
}

impl MemoryReport {
    pub fn total_eigen_bytes(&self) -> usize {
        self.workers.iter().map(|w| w.eigen_bytes).sum()
    }

    pub fn total_factor_bytes(&self) -> usize {
        self.workers.iter().map(|w| w.factor_bytes).sum()
    }

    pub fn mean_eigen_bytes(&self) -> f64 {
        self.total_eigen_bytes() as f64 / self.workers.len() as f64
    }

    pub fn peak_total(&self) -> usize {
        self.workers.iter().map(|w| w.total()).max().unwrap_or(0)
    }
}

/// Byte counts of the curvature state each worker actually holds.
///
/// Fails if a worker holds eigen state for a layer it is not a gradient worker of.
pub fn memory_report(workers: &[Worker], topology: &WorkerTopology, dist: &DistConfig) -> Result<MemoryReport> {
    let eb = dist.element_bytes;
    let mut out = Vec::with_capacity(workers.len());
    for worker in workers {
        let mut mem = WorkerMemory {
            rank: worker.rank,
            factor_bytes: 0,
            eigen_bytes: 0,
            capture_bytes: worker.peak_capture_bytes,
        };
        for (l, state) in worker.states.iter().enumerate() {
            if let Some(f) = state.factors() {
                mem.factor_bytes += eb * (f.a.len() + f.g.len());
            }
            if let Some(e) = state.eigen() {
                if !topology.layers[l].is_gradient_worker(worker.rank) {
                    return Err(Error::Consistency(format!(
                        "worker {} holds eigen state for layer {l} without being a gradient worker",
                        worker.rank
                    )));
                }
                mem.eigen_bytes += eb * e.element_count();
            }
        }
        out.push(mem);
    }
    Ok(MemoryReport { workers: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(step: usize, phase: Phase, bytes: f64, rounds: u64, compute: f64) -> LedgerEntry {
        LedgerEntry {
            step,
            phase,
            bytes,
            rounds,
            compute_units: compute,
        }
    }

    fn dist(latency: f64, inv_bandwidth: f64) -> DistConfig {
        DistConfig {
            latency,
            inv_bandwidth,
            compute_rate: 1.0,
            ..DistConfig::default()
        }
    }

    #[test]
    fn empty_ledger_costs_nothing() {
        assert!(cost_model(&[], &dist(1.0, 1.0)).is_empty());
    }

    #[test]
    fn broadcast_cost() {
        let t = cost_model(&[entry(0, Phase::PrecondGradBcast, 1000.0, 3, 0.0)], &dist(1.0, 0.001));
        assert_eq!(t[0].total, 4.0);
        // two simultaneous group-2 broadcasts of 500 bytes: one round, 1000 bytes
        let t = cost_model(&[entry(0, Phase::PrecondGradBcast, 1000.0, 1, 0.0)], &dist(2.0, 0.01));
        assert_eq!(t[0].total, 2.0 + 10.0);
    }

    #[test]
    fn phases_sum_per_step() {
        let entries = [
            entry(0, Phase::Forward, 0.0, 0, 10.0),
            entry(0, Phase::GradAllreduce, 100.0, 2, 0.0),
            entry(1, Phase::Forward, 0.0, 0, 4.0),
        ];
        let t = cost_model(&entries, &dist(1.0, 0.5));
        assert_eq!(t.len(), 2);
        assert_eq!(t[0].phases.get(Phase::Forward), 10.0);
        assert_eq!(t[0].phases.get(Phase::GradAllreduce), 52.0);
        assert_eq!(t[0].total, 62.0);
        assert_eq!(t[1].total, t[1].phases.total());
    }
}
