use kfacsim::harness::{run_experiment, ExperimentConfig, OptimizerKind};
use kfacsim::network::{
    backward, forward, gen_dataset, Activation, Batch, DatasetKind, LayerCapture, LayerSpec, Model, Targets,
};
use kfacsim::DenseMatrix;

fn best_accuracy(layers: Vec<LayerSpec>, optimizer: OptimizerKind, lr: f64) -> f64 {
    let cfg = ExperimentConfig {
        seed: 1,
        layers,
        optimizer,
        lr,
        iterations: 600,
        ..ExperimentConfig::default()
    };
    let r = run_experiment(&cfg).unwrap();
    r.rows.iter().map(|x| x.valid_accuracy).fold(0.0, f64::max)
}

#[test]
fn spirals_defeat_a_linear_model() {
    let linear = vec![LayerSpec::dense(2, 2, Activation::SoftmaxCrossEntropy)];
    for lr in [0.03, 0.1, 0.3] {
        let acc = best_accuracy(linear.clone(), OptimizerKind::Sgd, lr);
        assert!(acc < 0.7, "linear model reached {acc} at lr {lr}");
    }
}

#[test]
fn spirals_fit_by_two_hidden_layers() {
    let acc = best_accuracy(kfacsim::harness::default_mlp(), OptimizerKind::Kfac, 0.3);
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn datasets_are_deterministic_and_balanced() {
    for kind in [DatasetKind::Blobs, DatasetKind::TwoSpirals, DatasetKind::TinyImages] {
        let (t1, v1) = gen_dataset(kind, 150, 8).unwrap();
        let (t2, v2) = gen_dataset(kind, 150, 8).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(v1, v2);
        assert_eq!((t1.len(), v1.len()), (120, 30));
        assert_eq!(t1.inputs.cols(), kind.features());
        let mut counts = vec![0; kind.classes()];
        for b in [&t1, &v1] {
            if let Targets::Classes(c) = &b.targets {
                for &k in c {
                    counts[k] += 1;
                }
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), 150);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    }
}

#[test]
fn conv_captures_concatenate_across_shards() {
    let specs = kfacsim::harness::default_convnet();
    let model = Model::new(&specs, 2).unwrap();
    let (train, _) = gen_dataset(DatasetKind::TinyImages, 100, 3).unwrap();
    let batch = train.select(&(0..16).collect::<Vec<_>>()).unwrap();
    let mut whole = forward(&model, &batch, true).unwrap();
    let whole_grads = backward(&model, &batch, &mut whole).unwrap().grads;

    let mut parts = Vec::new();
    for shard in batch.shard(4).unwrap() {
        let mut pass = forward(&model, &shard, true).unwrap();
        let back = backward(&model, &shard, &mut pass).unwrap();
        // shards see the same parameters, so their mean gradient equals the whole-batch one
        parts.push((pass, back.grads));
    }
    for l in 0..specs.len() {
        let captures: Vec<&LayerCapture> = parts.iter().map(|(p, _)| &p.captures[l]).collect();
        let joined = LayerCapture::concat(&captures).unwrap();
        assert_eq!(joined.a, whole.captures[l].a);
        assert_eq!(joined.g, whole.captures[l].g);
        let mean = parts
            .iter()
            .map(|(_, g)| g[l].clone())
            .reduce(|a, b| a.add(&b).unwrap())
            .unwrap()
            .scale(0.25);
        let err = mean.sub(&whole_grads[l]).unwrap().frobenius_norm();
        assert!(err <= 1e-12 * (1.0 + whole_grads[l].frobenius_norm()));
    }
}

#[test]
fn mse_head_gradient() {
    let spec = LayerSpec::dense(2, 1, Activation::Identity).without_bias();
    let mut model = Model::new(&[spec], 0).unwrap();
    model.set_params(vec![DenseMatrix::from_rows(&[&[1.0, -1.0]])]).unwrap();
    let batch = Batch::new(
        DenseMatrix::from_rows(&[&[2.0, 1.0], &[0.0, 1.0]]),
        Targets::Values(DenseMatrix::from_rows(&[&[0.0], &[0.0]])),
    )
    .unwrap();
    let mut pass = forward(&model, &batch, true).unwrap();
    let back = backward(&model, &batch, &mut pass).unwrap();
    // residuals 1 and -1: loss ½(1 + 1)/2, gradient mean of r·x
    assert_eq!(back.loss, 0.5);
    assert_eq!(back.grads[0], DenseMatrix::from_rows(&[&[1.0, 0.0]]));
}
