use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Phase {
    Forward,
    Backward,
    GradAllreduce,
    /// Factor computation and factor allreduce.
    FactorAllreduce,
    /// Eigen decomposition and eigen-state broadcast.
    EigenBcast,
    /// Local preconditioning compute.
    Precond,
    PrecondGradBcast,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::Forward,
        Phase::Backward,
        Phase::GradAllreduce,
        Phase::FactorAllreduce,
        Phase::EigenBcast,
        Phase::Precond,
        Phase::PrecondGradBcast,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
            Phase::GradAllreduce => "grad_allreduce",
            Phase::FactorAllreduce => "factor_allreduce",
            Phase::EigenBcast => "eigen_bcast",
            Phase::Precond => "precond",
            Phase::PrecondGradBcast => "precond_grad_bcast",
        }
    }

    /// Phases whose traffic exists only because of K-FAC.
    pub fn is_kfac_comm(&self) -> bool {
        matches!(
            self,
            Phase::FactorAllreduce | Phase::EigenBcast | Phase::PrecondGradBcast
        )
    }

    pub fn index(&self) -> usize {
        Phase::ALL.iter().position(|p| p == self).expect("listed")
    }
}

/// Aggregate of one phase in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerEntry {
    pub step: usize,
    pub phase: Phase,
    pub bytes: f64,
    /// Latency rounds: summed over sequential collectives, max over simultaneous ones.
    pub rounds: u64,
    /// Largest per-worker floating-point operation count in the phase.
    pub compute_units: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CollectiveKind {
    Allreduce,
    Broadcast,
}

/// One collective call (possibly several simultaneous broadcasts).
#[derive(Debug, Clone, PartialEq)]
pub struct CommEvent {
    pub step: usize,
    pub phase: Phase,
    pub kind: CollectiveKind,
    pub layer: Option<usize>,
    pub label: &'static str,
    /// Group size of each simultaneous sub-collective.
    pub group_sizes: Vec<usize>,
    /// Payload per sub-collective.
    pub payload_bytes: f64,
    pub bytes: f64,
    pub rounds: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub entries: Vec<LedgerEntry>,
    pub events: Vec<CommEvent>,
}

impl Ledger {
    pub fn entries_for(&self, step: usize) -> impl Iterator<Item = &LedgerEntry> {
        self.entries.iter().filter(move |e| e.step == step)
    }

    pub fn entry(&self, step: usize, phase: Phase) -> Option<&LedgerEntry> {
        self.entries.iter().find(|e| e.step == step && e.phase == phase)
    }

    /// K-FAC communication bytes recorded in `step`.
    pub fn kfac_bytes(&self, step: usize) -> f64 {
        self.entries_for(step)
            .filter(|e| e.phase.is_kfac_comm())
            .map(|e| e.bytes)
            .sum()
    }

    pub fn steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = self.entries.iter().map(|e| e.step).collect();
        steps.dedup();
        steps
    }
}

/// Ring allreduce volume per worker: `2·S·(P−1)/P`.
pub fn ring_allreduce_bytes(payload_bytes: f64, world: usize) -> f64 {
    2.0 * payload_bytes * (world as f64 - 1.0) / world as f64
}

/// Minimum-spanning-tree broadcast rounds: `⌈log₂ p⌉`.
pub fn broadcast_rounds(group: usize) -> u64 {
    if group <= 1 {
        0
    } else {
        (usize::BITS - (group - 1).leading_zeros()) as u64
    }
}

struct OpenPhase {
    phase: Phase,
    bytes: f64,
    rounds: u64,
    compute: Vec<f64>,
}

/// Controller-side recorder. Phases are opened and closed between lockstep
/// barriers; collectives and compute are charged to the open phase.
pub struct SimContext {
    world_size: usize,
    step: usize,
    open: Option<OpenPhase>,
    pub ledger: Ledger,
}

impl SimContext {
    pub fn new(world_size: usize) -> Self {
        Self {
            world_size,
            step: 0,
            open: None,
            ledger: Ledger::default(),
        }
    }

    pub fn world_size(&self) -> usize {
        self.world_size
    }

    pub fn begin_phase(&mut self, step: usize, phase: Phase) {
        assert!(self.open.is_none(), "phase already open");
        self.step = step;
        self.open = Some(OpenPhase {
            phase,
            bytes: 0.0,
            rounds: 0,
            compute: vec![0.0; self.world_size],
        });
    }

    pub fn end_phase(&mut self) {
        let open = self.open.take().expect("no open phase");
        self.ledger.entries.push(LedgerEntry {
            step: self.step,
            phase: open.phase,
            bytes: open.bytes,
            rounds: open.rounds,
            compute_units: open.compute.iter().fold(0.0_f64, |m, c| m.max(*c)),
        });
    }

    fn open_mut(&mut self) -> &mut OpenPhase {
        self.open.as_mut().expect("no open phase")
    }

    pub fn compute(&mut self, worker: usize, units: f64) {
        self.open_mut().compute[worker] += units;
    }

    /// Elementwise mean over workers' values, computed once in rank order.
    pub fn allreduce(
        &mut self,
        values: &[DenseMatrix],
        element_bytes: usize,
        layer: Option<usize>,
    ) -> Result<DenseMatrix> {
        if values.len() != self.world_size {
            return Err(Error::dim(format!(
                "{} contributions for {} workers",
                values.len(),
                self.world_size
            )));
        }
        let mut sum = values[0].clone();
        for v in &values[1..] {
            sum = sum.add(v)?;
        }
        let mean = sum.scale(1.0 / self.world_size as f64);
        self.account_allreduce((mean.len() * element_bytes) as f64, layer, "allreduce");
        Ok(mean)
    }

    /// Charges an allreduce whose result the controller has already formed.
    pub fn account_allreduce(&mut self, payload_bytes: f64, layer: Option<usize>, label: &'static str) {
        let world = self.world_size;
        let bytes = ring_allreduce_bytes(payload_bytes, world);
        let rounds = 2 * (world as u64 - 1);
        let phase = {
            let open = self.open_mut();
            open.bytes += bytes;
            open.rounds += rounds;
            open.phase
        };
        self.ledger.events.push(CommEvent {
            step: self.step,
            phase,
            kind: CollectiveKind::Allreduce,
            layer,
            label,
            group_sizes: vec![world],
            payload_bytes,
            bytes,
            rounds,
        });
    }

    pub fn broadcast(
        &mut self,
        root: usize,
        group: &[usize],
        payload_bytes: f64,
        layer: Option<usize>,
        label: &'static str,
    ) -> Result<()> {
        self.broadcast_simultaneous(&[(root, group.to_vec())], payload_bytes, layer, label)
    }

    /// Broadcasts over pairwise-disjoint groups that run at the same time:
    /// rounds are the maximum, bytes the sum.
    pub fn broadcast_simultaneous(
        &mut self,
        groups: &[(usize, Vec<usize>)],
        payload_bytes: f64,
        layer: Option<usize>,
        label: &'static str,
    ) -> Result<()> {
        let mut seen = vec![false; self.world_size];
        for (root, group) in groups {
            if !group.contains(root) {
                return Err(Error::config("broadcast", format!("root {root} not in its group")));
            }
            for &m in group {
                if m >= self.world_size || seen[m] {
                    return Err(Error::config(
                        "broadcast",
                        format!("worker {m} is out of range or in two simultaneous groups"),
                    ));
                }
                seen[m] = true;
            }
        }
        let rounds = groups.iter().map(|(_, g)| broadcast_rounds(g.len())).max().unwrap_or(0);
        let bytes: f64 = groups.iter().map(|(_, g)| payload_bytes * (g.len() as f64 - 1.0)).sum();
        let phase = {
            let open = self.open_mut();
            open.bytes += bytes;
            open.rounds += rounds;
            open.phase
        };
        self.ledger.events.push(CommEvent {
            step: self.step,
            phase,
            kind: CollectiveKind::Broadcast,
            layer,
            label,
            group_sizes: groups.iter().map(|(_, g)| g.len()).collect(),
            payload_bytes,
            bytes,
            rounds,
        });
        Ok(())
    }
}

/// Row-major upper triangle (diagonal included) of a square matrix.
pub fn pack_triangular(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::dim(format!("pack_triangular of {:?}", m.shape())));
    }
    let n = m.rows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        out.extend_from_slice(&m.row(i)[i..]);
    }
    Ok(out)
}

/// Rebuilds the symmetric matrix from [`pack_triangular`] output.
pub fn unpack_triangular(packed: &[f64], n: usize) -> Result<DenseMatrix> {
    if n == 0 || packed.len() != n * (n + 1) / 2 {
        return Err(Error::dim(format!("{} packed values for side {n}", packed.len())));
    }
    let mut m = DenseMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m[(i, j)] = packed[k];
            m[(j, i)] = packed[k];
            k += 1;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_counts() {
        assert_eq!(broadcast_rounds(1), 0);
        assert_eq!(broadcast_rounds(2), 1);
        assert_eq!(broadcast_rounds(3), 2);
        assert_eq!(broadcast_rounds(4), 2);
        assert_eq!(broadcast_rounds(8), 3);
        assert_eq!(broadcast_rounds(9), 4);
    }

    #[test]
    fn allreduce_means_and_accounts() {
        let mut ctx = SimContext::new(1);
        ctx.begin_phase(0, Phase::GradAllreduce);
        let m = DenseMatrix::from_rows(&[&[1.5, -2.0]]);
        assert_eq!(ctx.allreduce(std::slice::from_ref(&m), 8, None).unwrap(), m);
        ctx.end_phase();
        assert_eq!(ctx.ledger.entries[0].bytes, 0.0);
        assert_eq!(ctx.ledger.entries[0].rounds, 0);

        let mut ctx = SimContext::new(2);
        ctx.begin_phase(0, Phase::GradAllreduce);
        let out = ctx
            .allreduce(&[DenseMatrix::zeros(1, 1), DenseMatrix::from_rows(&[&[2.0]])], 8, None)
            .unwrap();
        assert_eq!(out[(0, 0)], 1.0);
        ctx.end_phase();

        let mut ctx = SimContext::new(4);
        ctx.begin_phase(3, Phase::GradAllreduce);
        let vals = vec![DenseMatrix::zeros(1000, 1); 4];
        ctx.allreduce(&vals, 8, None).unwrap();
        ctx.end_phase();
        let e = &ctx.ledger.entries[0];
        assert_eq!((e.step, e.bytes, e.rounds), (3, 12000.0, 6));
    }

    #[test]
    fn allreduce_rejects_shape_mismatch() {
        let mut ctx = SimContext::new(2);
        ctx.begin_phase(0, Phase::GradAllreduce);
        let r = ctx.allreduce(&[DenseMatrix::zeros(1, 2), DenseMatrix::zeros(2, 1)], 8, None);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn broadcast_accounting() {
        let mut ctx = SimContext::new(8);
        ctx.begin_phase(0, Phase::PrecondGradBcast);
        ctx.broadcast(0, &(0..8).collect::<Vec<_>>(), 1000.0, None, "t")
            .unwrap();
        ctx.end_phase();
        assert_eq!(ctx.ledger.entries[0].rounds, 3);
        assert_eq!(ctx.ledger.entries[0].bytes, 7000.0);

        ctx.begin_phase(1, Phase::PrecondGradBcast);
        let groups: Vec<(usize, Vec<usize>)> = (0..4).map(|g| (g, vec![g, g + 4])).collect();
        ctx.broadcast_simultaneous(&groups, 500.0, None, "t").unwrap();
        ctx.end_phase();
        assert_eq!(ctx.ledger.entries[1].rounds, 1);
        assert_eq!(ctx.ledger.entries[1].bytes, 2000.0);

        ctx.begin_phase(2, Phase::PrecondGradBcast);
        ctx.broadcast(5, &[5], 1000.0, None, "t").unwrap();
        assert!(ctx.broadcast(1, &[2, 3], 10.0, None, "t").is_err());
        assert!(ctx
            .broadcast_simultaneous(&[(0, vec![0, 1]), (2, vec![2, 1])], 10.0, None, "t")
            .is_err());
        ctx.end_phase();
        assert_eq!((ctx.ledger.entries[2].rounds, ctx.ledger.entries[2].bytes), (0, 0.0));
    }

    #[test]
    fn compute_is_max_over_workers() {
        let mut ctx = SimContext::new(3);
        ctx.begin_phase(0, Phase::Precond);
        ctx.compute(0, 5.0);
        ctx.compute(2, 3.0);
        ctx.compute(2, 4.0);
        ctx.end_phase();
        assert_eq!(ctx.ledger.entries[0].compute_units, 7.0);
    }

    #[test]
    fn triangular_sizes() {
        let m = DenseMatrix::from_fn(4, 4, |i, j| (i + j) as f64);
        assert_eq!(pack_triangular(&m).unwrap().len(), 10);
        assert_eq!(pack_triangular(&DenseMatrix::identity(1)).unwrap(), vec![1.0]);
        assert!(unpack_triangular(&[1.0, 2.0], 2).is_err());
        assert!(pack_triangular(&DenseMatrix::zeros(2, 3)).is_err());
    }
}
