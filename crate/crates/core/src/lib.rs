//! Kronecker-factored curvature (K-FAC) preconditioning for small feed-forward
//! networks, plus a deterministic lockstep simulator of hybrid-parallel K-FAC
//! training.
//!
//! The simulator assigns each layer a set of *gradient workers* whose size is
//! controlled by `grad_worker_frac`. A fraction of `1 / world_size` stores each
//! layer's eigen decomposition on a single worker and broadcasts preconditioned
//! gradients; a fraction of `1` replicates the decomposition everywhere and
//! needs no gradient broadcast. Every collective is recorded in a byte/round
//! ledger so memory and communication tradeoffs can be measured exactly.
//!
//! Module map:
//!
//! * [`linalg`]: dense matrices, Jacobi eigen solver, Kronecker utilities, binary16 rounding
//! * [`network`]: dense/conv2d layers with activation and gradient capture, momentum SGD
//! * [`kfac`]: factor estimation, eigen-based preconditioning, brute-force oracle
//! * [`distsim`]: topology, LPT scheduling, collectives, ledgers, memory and cost models
//! * [`harness`]: experiment configuration, training loops, sweeps, CSV metrics

pub mod distsim;
pub mod error;
pub mod harness;
pub mod kfac;
pub mod linalg;
pub mod network;
pub mod selftest;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
