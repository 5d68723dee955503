//! Deterministic lockstep simulation of hybrid-parallel K-FAC.
//!
//! A [`Cluster`] holds one model replica and one set of curvature states per
//! simulated worker. Each call to [`Cluster::step`] runs the phases
//!
//! 1. local forward/backward on each worker's shard
//! 2. gradient allreduce
//! 3. factor allreduce and running-average update (factor steps)
//! 4. eigen decomposition on the assigned worker and broadcast of
//!    `Q_A`, `Q_G`, `dGA` to the layer's gradient workers (eigen steps)
//! 5. preconditioning on gradient workers and broadcast of the result to
//!    their receivers
//! 6. an identical SGD update on every replica
//!
//! Reductions are evaluated once, centrally, so every replica receives
//! bit-identical values. Communication is not performed on a wire; each
//! collective is charged to a [`Ledger`] with an exact byte and round count.

mod cluster;
mod comm;
mod cost;
mod topology;

pub use cluster::{Cluster, Optimizer, StepOutcome, Worker};
pub use comm::{pack_triangular, unpack_triangular, CollectiveKind, CommEvent, Ledger, LedgerEntry, Phase, SimContext};
pub use cost::{cost_model, memory_report, MemoryReport, PhaseTimes, StepTime, WorkerMemory};
pub use topology::{
    brute_force_makespan, build_topology, lpt_schedule, lpt_schedule_constrained, DistConfig, EigenAssignment,
    LayerPlacement, Objective, WorkerTopology,
};
