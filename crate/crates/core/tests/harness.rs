use kfacsim::harness::{
    compare_optimizers, parse_csv, run_experiment, sweep_frac, ExperimentConfig, OptimizerKind, Summary, CSV_HEADER,
};
use kfacsim::network::{Activation, DatasetKind, LayerSpec};
use kfacsim::Error;

fn blobs_sgd() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        dataset: DatasetKind::Blobs,
        dataset_n: 200,
        layers: vec![
            LayerSpec::dense(2, 16, Activation::Relu),
            LayerSpec::dense(16, 3, Activation::SoftmaxCrossEntropy),
        ],
        optimizer: OptimizerKind::Sgd,
        lr: 0.1,
        batch_size: 32,
        iterations: 200,
        ..ExperimentConfig::default()
    }
}

fn short_kfac(iterations: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed: 2,
        iterations,
        ..ExperimentConfig::default()
    }
}

#[test]
fn sgd_runs_are_byte_identical() {
    let a = run_experiment(&blobs_sgd()).unwrap().csv();
    let b = run_experiment(&blobs_sgd()).unwrap().csv();
    assert_eq!(a, b);
    assert!(a.starts_with(&format!("{CSV_HEADER}\n")));
    assert_eq!(a.lines().count(), 201);
}

#[test]
fn csv_round_trip_and_summary_recomputable() {
    let cfg = short_kfac(60);
    let result = run_experiment(&cfg).unwrap();
    let parsed = parse_csv(&result.csv()).unwrap();
    assert_eq!(parsed, result.rows);
    assert_eq!(Summary::from_rows(&parsed, cfg.target_metric), result.summary);
    assert!(parsed.windows(2).all(|w| w[0].step < w[1].step));
}

#[test]
fn frac_changes_only_cost_columns() {
    let mut one = short_kfac(50);
    one.dist.grad_worker_frac = 1.0;
    let mut eighth = one.clone();
    eighth.dist.grad_worker_frac = 0.125;
    let (a, b) = (run_experiment(&one).unwrap(), run_experiment(&eighth).unwrap());
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
        assert_eq!(x.valid_accuracy.to_bits(), y.valid_accuracy.to_bits());
    }
    assert_ne!(a.summary.total_kfac_bytes, b.summary.total_kfac_bytes);
    assert!(a.rows.iter().zip(&b.rows).any(|(x, y)| x.sim_time != y.sim_time));
}

#[test]
fn unreachable_target_not_reached() {
    let cfg = ExperimentConfig {
        target_metric: 1.01,
        iterations: 20,
        ..blobs_sgd()
    };
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.summary.steps_to_target, None);
    assert!(r.summary.to_text().contains("steps_to_target = not reached"));
}

#[test]
fn config_file_round_trip() {
    let mut cfg = short_kfac(33);
    cfg.dist.grad_worker_frac = 0.5;
    cfg.dist.triangular_comm = true;
    cfg.kfac.precision = kfacsim::kfac::Precision::Half;
    cfg.sync_element_bytes();
    cfg.layers[1] = cfg.layers[1].without_bias();
    cfg.dataset_seed = Some(99);
    cfg.output = Some("runs/out.csv".into());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}

#[test]
fn invalid_config_names_field() {
    let text = "seed = 1\nbatch_size = 60\n";
    match ExperimentConfig::parse(text) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "batch_size"),
        other => panic!("{other:?}"),
    }
    match ExperimentConfig::parse("seed = 1\nkfac.eigen_update_freq = 5\n") {
        Err(Error::Config { field, .. }) => assert_eq!(field, "kfac.eigen_update_freq"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweep_worker_counts_and_linear_overhead() {
    let rows = sweep_frac(&short_kfac(25), &[0.125, 0.25, 0.5, 1.0]).unwrap();
    let counts: Vec<usize> = rows.iter().map(|r| r.grad_workers).collect();
    assert_eq!(counts, [1, 2, 4, 8]);
    for r in &rows {
        assert_eq!(r.total_eigen_bytes, r.grad_workers * rows[0].total_eigen_bytes);
    }
}

#[test]
fn sweep_single_layer_ratio_is_eight() {
    let cfg = ExperimentConfig {
        layers: vec![LayerSpec::dense(2, 2, Activation::SoftmaxCrossEntropy)],
        ..short_kfac(5)
    };
    let rows = sweep_frac(&cfg, &[0.125, 1.0]).unwrap();
    assert_eq!(rows[1].total_eigen_bytes, 8 * rows[0].total_eigen_bytes);
}

#[test]
fn sweep_rejects_illegal_frac() {
    match sweep_frac(&short_kfac(5), &[0.125, 0.4]) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "dist.grad_worker_frac"),
        other => panic!("{:?}", other.map(|r| r.len())),
    }
}

#[test]
fn bandwidth_bound_phase_tradeoff() {
    let mut cfg = short_kfac(40);
    cfg.kfac.factor_update_freq = 1;
    cfg.kfac.eigen_update_freq = 4;
    cfg.dist.latency = 1e-6;
    cfg.dist.inv_bandwidth = 1.0;
    cfg.dist.compute_rate = 1e12;
    let rows = sweep_frac(&cfg, &[0.125, 1.0]).unwrap();
    let (eighth, one) = (&rows[0], &rows[1]);
    assert!(one.mean_eigen_step_time > eighth.mean_eigen_step_time);
    assert!(one.mean_other_step_time < eighth.mean_other_step_time);
}

#[test]
fn identical_configs_ratio_one() {
    let cfg = ExperimentConfig {
        target_metric: 0.9,
        iterations: 100,
        ..blobs_sgd()
    };
    let report = compare_optimizers(&cfg, &cfg).unwrap();
    assert_eq!(report.step_ratio, Some(1.0));
    assert_eq!(report.baseline.rows, report.candidate.rows);
}

#[test]
fn compare_rejects_other_dataset() {
    let a = blobs_sgd();
    let b = ExperimentConfig {
        dataset_n: 300,
        ..blobs_sgd()
    };
    match compare_optimizers(&a, &b) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "dataset.n"),
        other => panic!("{:?}", other.map(|c| c.step_ratio)),
    }
}

#[test]
fn stale_curvature_converges_alike() {
    let mut fresh = short_kfac(400);
    fresh.seed = 3;
    fresh.kfac.factor_update_freq = 1;
    fresh.kfac.eigen_update_freq = 1;
    let mut stale = fresh.clone();
    stale.kfac.factor_update_freq = 2;
    stale.kfac.eigen_update_freq = 200;
    let report = compare_optimizers(&fresh, &stale).unwrap();
    assert!(report.baseline.summary.reached() && report.candidate.summary.reached());
    let units = |r: &kfacsim::harness::ExperimentResult| r.eigen_compute.iter().sum::<f64>();
    assert!(units(&report.candidate) * 100.0 < units(&report.baseline));
}

#[test]
fn tiny_images_convnet_trains() {
    let cfg = ExperimentConfig {
        seed: 4,
        dataset: DatasetKind::TinyImages,
        dataset_n: 240,
        layers: kfacsim::harness::default_convnet(),
        batch_size: 32,
        iterations: 60,
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&cfg).unwrap();
    let first = r.rows[0].train_loss;
    let last = r.rows.last().unwrap().train_loss;
    assert!(last < first, "loss {first} -> {last}");
    assert!(
        r.summary.final_valid_accuracy > 0.6,
        "{}",
        r.summary.final_valid_accuracy
    );
}
