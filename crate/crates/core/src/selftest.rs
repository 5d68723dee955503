//! Fast oracle and invariant checks, run by `kfacsim selftest`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distsim::{brute_force_makespan, lpt_schedule, pack_triangular, unpack_triangular};
use crate::harness::{run_experiment, ExperimentConfig};
use crate::kfac::{
    accumulate_factors, compute_eigen, compute_factors, oracle_precondition, precondition, update_running_factors,
    KfacLayerState, Precision,
};
use crate::linalg::{kron, quantize_half, DenseMatrix};
use crate::network::{forward, Activation, Batch, LayerCapture, LayerSpec, Model, Targets};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.sub(b)
        .map_or(f64::INFINITY, |d| d.frobenius_norm() / b.frobenius_norm().max(1e-300))
}

fn oracle_equivalence(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let a_dim = rng.gen_range(2..=6);
        let g_dim = rng.gen_range(2..=6);
        let rows = rng.gen_range(4..=12);
        let damping = [0.003, 0.03, 0.3][i % 3];
        let capture = LayerCapture {
            layer_index: 0,
            a: random_matrix(rng, rows, a_dim),
            g: Some(random_matrix(rng, rows, g_dim)),
            sample_count: rows,
        };
        let mut state = KfacLayerState::with_dims(a_dim, g_dim);
        let grad = random_matrix(rng, g_dim, a_dim);
        let r = compute_factors(&capture)
            .and_then(|(a, g)| accumulate_factors(&mut state, &a, &g))
            .and_then(|_| update_running_factors(&mut state, 0.95, Precision::Full))
            .and_then(|_| compute_eigen(&mut state, damping, Precision::Full))
            .and_then(|_| {
                let f = state.factors().expect("factors set");
                let fast = precondition(&state, &grad)?;
                let slow = oracle_precondition(&f.a, &f.g, damping, &grad)?;
                Ok(rel_err(&fast, &slow))
            });
        match r {
            Ok(e) => worst = worst.max(e),
            Err(e) => {
                return Check {
                    name: "oracle equivalence",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    Check {
        name: "oracle equivalence",
        passed: worst <= 1e-8,
        detail: format!("50 instances, worst relative error {worst:.3e}"),
    }
}

fn kronecker_identities(rng: &mut ChaCha8Rng) -> Check {
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (m, n, p, q) = (
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
            rng.gen_range(1..4),
        );
        let a = random_matrix(rng, m, n);
        let b = random_matrix(rng, p, q);
        let x = random_matrix(rng, q, n);
        // (A ⊗ B) vec(X) = vec(B X Aᵀ)
        let lhs = kron(&a, &b).matmul(&x.vec_col_major());
        let rhs = b.matmul(&x).and_then(|bx| bx.matmul_t(&a));
        if let (Ok(l), Ok(r)) = (lhs, rhs) {
            worst = worst.max(rel_err(&l, &r.vec_col_major()));
        } else {
            worst = f64::INFINITY;
        }
        // (A ⊗ B)ᵀ = Aᵀ ⊗ Bᵀ
        worst = worst.max(rel_err(
            &kron(&a, &b).transpose(),
            &kron(&a.transpose(), &b.transpose()),
        ));
    }
    Check {
        name: "kronecker identities",
        passed: worst <= 1e-7,
        detail: format!("100 instances, worst relative error {worst:.3e}"),
    }
}

fn lpt_bound(rng: &mut ChaCha8Rng) -> Check {
    let mut violations = 0;
    for _ in 0..100 {
        let jobs: Vec<f64> = (0..rng.gen_range(1..=10))
            .map(|_| rng.gen_range(1..20) as f64)
            .collect();
        let workers = rng.gen_range(1..=4);
        let (_, lpt) = lpt_schedule(&jobs, workers);
        if lpt > 1.5 * brute_force_makespan(&jobs, workers) + 1e-9 {
            violations += 1;
        }
    }
    let (_, example) = lpt_schedule(&[5.0, 4.0, 3.0, 3.0, 3.0], 2);
    Check {
        name: "lpt bound",
        passed: violations == 0 && example == 10.0,
        detail: format!("{violations} violations over 100 instances, [5,4,3,3,3]/2 makespan {example}"),
    }
}

fn triangular_round_trip(rng: &mut ChaCha8Rng) -> Check {
    let mut ok = true;
    for _ in 0..100 {
        let n = rng.gen_range(1..8);
        let m = random_matrix(rng, n, n).symmetrize().expect("square");
        let packed = pack_triangular(&m).unwrap_or_default();
        ok &= packed.len() == n * (n + 1) / 2 && unpack_triangular(&packed, n).ok().as_ref() == Some(&m);
    }
    Check {
        name: "triangular packing",
        passed: ok,
        detail: "100 random symmetric matrices".into(),
    }
}

fn half_idempotent(rng: &mut ChaCha8Rng) -> Check {
    let m = DenseMatrix::from_fn(8, 8, |_, _| rng.gen_range(-70000.0..70000.0));
    let once = quantize_half(&m);
    Check {
        name: "half rounding idempotent",
        passed: quantize_half(&once) == once,
        detail: "64 values".into(),
    }
}

fn frac_invariance() -> Check {
    let mut losses = Vec::new();
    for frac in [0.125, 0.25, 0.5, 1.0] {
        let mut cfg = ExperimentConfig {
            dataset_n: 200,
            iterations: 25,
            batch_size: 32,
            ..ExperimentConfig::default()
        };
        cfg.dist.grad_worker_frac = frac;
        match run_experiment(&cfg) {
            Ok(r) => losses.push(r.rows.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>()),
            Err(e) => {
                return Check {
                    name: "frac invariance",
                    passed: false,
                    detail: e.to_string(),
                }
            }
        }
    }
    Check {
        name: "frac invariance",
        passed: losses.windows(2).all(|w| w[0] == w[1]),
        detail: "world 8, fracs 1/8..1, 25 steps".into(),
    }
}

fn shard_transparency() -> Check {
    let specs = [
        LayerSpec::dense(3, 5, Activation::Relu),
        LayerSpec::dense(5, 2, Activation::SoftmaxCrossEntropy),
    ];
    let model = Model::new(&specs, 9).expect("valid model");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = Batch::new(
        random_matrix(&mut rng, 8, 3),
        Targets::Classes((0..8).map(|i| i % 2).collect()),
    )
    .expect("valid batch");
    let whole = forward(&model, &batch, false).map(|p| p.logits);
    let parts: Vec<DenseMatrix> = batch
        .shard(4)
        .expect("even shards")
        .iter()
        .map(|b| forward(&model, b, false).expect("forward").logits)
        .collect();
    let stacked = DenseMatrix::vstack(&parts.iter().collect::<Vec<_>>());
    Check {
        name: "shard transparency",
        passed: whole.ok() == stacked.ok(),
        detail: "8 samples over 4 shards".into(),
    }
}

/// Runs every check with a fixed seed.
pub fn run_all() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    vec![
        oracle_equivalence(&mut rng),
        kronecker_identities(&mut rng),
        lpt_bound(&mut rng),
        triangular_round_trip(&mut rng),
        half_idempotent(&mut rng),
        shard_transparency(),
        frac_invariance(),
    ]
}
