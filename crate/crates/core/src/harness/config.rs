use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distsim::{DistConfig, Objective};
use crate::error::{Error, Result};
use crate::kfac::{GradScaleMode, KfacConfig, Precision};
use crate::network::{validate_specs, Activation, DatasetKind, LayerKind, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Kfac,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Kfac => "kfac",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "kfac" => Ok(OptimizerKind::Kfac),
            other => Err(Error::config("optimizer", format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetKind,
    pub dataset_n: usize,
    /// Falls back to `seed` when unset.
    pub dataset_seed: Option<u64>,
    pub layers: Vec<LayerSpec>,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global batch, split evenly across `dist.world_size` workers.
    pub batch_size: usize,
    pub iterations: usize,
    /// Validation accuracy threshold.
    pub target_metric: f64,
    pub eval_every: usize,
    /// End the run at the first step that reaches `target_metric`.
    pub stop_at_target: bool,
    pub kfac: KfacConfig,
    /// `element_bytes` follows `kfac.precision` and is not read from files.
    pub dist: DistConfig,
    pub objective: Objective,
    pub output: Option<PathBuf>,
}

pub fn default_mlp() -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(2, 32, Activation::Relu),
        LayerSpec::dense(32, 32, Activation::Relu),
        LayerSpec::dense(32, 2, Activation::SoftmaxCrossEntropy),
    ]
}

/// Two 3×3 convolutions and a dense head for `tiny_images`.
pub fn default_convnet() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv2d(1, 4, (3, 3), 1, 1, (6, 6), Activation::Relu),
        LayerSpec::conv2d(4, 4, (3, 3), 2, 1, (6, 6), Activation::Relu),
        LayerSpec::dense(36, 3, Activation::SoftmaxCrossEntropy),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            dataset: DatasetKind::TwoSpirals,
            dataset_n: 500,
            dataset_seed: None,
            layers: default_mlp(),
            optimizer: OptimizerKind::Kfac,
            lr: 0.3,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 64,
            iterations: 600,
            target_metric: 0.95,
            eval_every: 1,
            stop_at_target: false,
            kfac: KfacConfig::default(),
            dist: DistConfig::default(),
            objective: Objective::Time,
            output: None,
        }
    }
}

impl ExperimentConfig {
    /// Copies the precision's element width into the simulator config.
    pub fn sync_element_bytes(&mut self) {
        self.dist.element_bytes = self.kfac.precision.element_bytes();
    }

    pub fn effective_dataset_seed(&self) -> u64 {
        self.dataset_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        validate_specs(&self.layers)?;
        let first = self.layers[0].input_size();
        if first != self.dataset.features() {
            return Err(Error::config(
                "model.layers",
                format!(
                    "first layer expects {first} inputs but {} has {} features",
                    self.dataset.name(),
                    self.dataset.features()
                ),
            ));
        }
        let last = self.layers[self.layers.len() - 1];
        if last.activation != Activation::SoftmaxCrossEntropy || last.output_size() != self.dataset.classes() {
            return Err(Error::config(
                "model.layers",
                format!(
                    "last layer must be a softmax head with {} outputs",
                    self.dataset.classes()
                ),
            ));
        }
        if self.dataset_n < 20 {
            return Err(Error::config("dataset.n", "need at least 20 samples"));
        }
        let n_train = self.dataset_n * 4 / 5;
        if self.batch_size == 0 || self.batch_size > n_train {
            return Err(Error::config(
                "batch_size",
                format!("must lie in 1..={n_train} for this dataset size"),
            ));
        }
        if !self.batch_size.is_multiple_of(self.dist.world_size.max(1)) {
            return Err(Error::config(
                "batch_size",
                format!(
                    "{} does not split evenly over {} workers",
                    self.batch_size, self.dist.world_size
                ),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive and finite"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be at least 1"));
        }
        if !self.target_metric.is_finite() {
            return Err(Error::config("target_metric", "must be finite"));
        }
        self.kfac.validate()?;
        if self.dist.element_bytes != self.kfac.precision.element_bytes() {
            return Err(Error::config("dist.element_bytes", "must follow kfac.precision"));
        }
        self.dist.validate()
    }

    /// Parses the flat `key = value` format. `seed` is required.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config("config", format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::config(key, "given more than once"));
            }
            cfg.set(key, value)?;
            seen.push(key.to_string());
        }
        if !seen.iter().any(|k| k == "seed") {
            return Err(Error::config(
                "seed",
                "missing; every experiment needs an explicit seed",
            ));
        }
        cfg.sync_element_bytes();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Sets a single key. Does not validate cross-field constraints.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, value)?,
            "dataset.kind" => self.dataset = value.parse()?,
            "dataset.n" => self.dataset_n = num(key, value)?,
            "dataset.seed" => self.dataset_seed = Some(num(key, value)?),
            "model.layers" => self.layers = parse_layers(value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "lr" => self.lr = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "target_metric" => self.target_metric = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "stop_at_target" => self.stop_at_target = num(key, value)?,
            "kfac.damping" => self.kfac.damping = num(key, value)?,
            "kfac.factor_update_freq" => self.kfac.factor_update_freq = num(key, value)?,
            "kfac.eigen_update_freq" => self.kfac.eigen_update_freq = num(key, value)?,
            "kfac.running_avg_decay" => self.kfac.running_avg_decay = num(key, value)?,
            "kfac.grad_scale" => self.kfac.grad_scale = value.parse::<GradScaleMode>()?,
            "kfac.precision" => {
                self.kfac.precision = value.parse::<Precision>()?;
                self.sync_element_bytes();
            }
            "dist.world_size" => self.dist.world_size = num(key, value)?,
            "dist.grad_worker_frac" => self.dist.grad_worker_frac = parse_frac(value)?,
            "dist.latency" => self.dist.latency = num(key, value)?,
            "dist.inv_bandwidth" => self.dist.inv_bandwidth = num(key, value)?,
            "dist.compute_rate" => self.dist.compute_rate = num(key, value)?,
            "dist.triangular_comm" => self.dist.triangular_comm = num(key, value)?,
            "dist.objective" => self.objective = value.parse()?,
            "output" => {
                self.output = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    /// Writes every key; `parse(to_text())` gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("dataset.kind", self.dataset.name().to_string());
        kv("dataset.n", self.dataset_n.to_string());
        if let Some(ds) = self.dataset_seed {
            kv("dataset.seed", ds.to_string());
        }
        kv("model.layers", format_layers(&self.layers));
        kv("optimizer", self.optimizer.name().to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("iterations", self.iterations.to_string());
        kv("target_metric", self.target_metric.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("stop_at_target", self.stop_at_target.to_string());
        kv("kfac.damping", self.kfac.damping.to_string());
        kv("kfac.factor_update_freq", self.kfac.factor_update_freq.to_string());
        kv("kfac.eigen_update_freq", self.kfac.eigen_update_freq.to_string());
        kv("kfac.running_avg_decay", self.kfac.running_avg_decay.to_string());
        kv("kfac.grad_scale", self.kfac.grad_scale.name().to_string());
        kv("kfac.precision", self.kfac.precision.name().to_string());
        kv("dist.world_size", self.dist.world_size.to_string());
        kv("dist.grad_worker_frac", self.dist.grad_worker_frac.to_string());
        kv("dist.latency", self.dist.latency.to_string());
        kv("dist.inv_bandwidth", self.dist.inv_bandwidth.to_string());
        kv("dist.compute_rate", self.dist.compute_rate.to_string());
        kv("dist.triangular_comm", self.dist.triangular_comm.to_string());
        kv("dist.objective", self.objective.name().to_string());
        if let Some(p) = &self.output {
            kv("output", p.display().to_string());
        }
        s
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

/// Accepts a decimal or a ratio such as `1/8`.
pub fn parse_frac(value: &str) -> Result<f64> {
    let bad = || Error::config("dist.grad_worker_frac", format!("cannot parse `{value}`"));
    match value.split_once('/') {
        Some((n, d)) => {
            let n: f64 = n.trim().parse().map_err(|_| bad())?;
            let d: f64 = d.trim().parse().map_err(|_| bad())?;
            Ok(n / d)
        }
        None => value.trim().parse().map_err(|_| bad()),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Relu => "relu",
        Activation::Identity => "identity",
        Activation::SoftmaxCrossEntropy => "softmax",
    }
}

fn parse_activation(s: &str) -> Result<Activation> {
    match s {
        "relu" => Ok(Activation::Relu),
        "identity" => Ok(Activation::Identity),
        "softmax" => Ok(Activation::SoftmaxCrossEntropy),
        other => Err(Error::config("model.layers", format!("unknown activation `{other}`"))),
    }
}

fn parse_pair(s: &str) -> Option<(usize, usize)> {
    let (a, b) = s.split_once('x')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// One layer per comma-separated item:
/// `dense:IN:OUT:ACT[:nobias]` or `conv:IC:OC:KHxKW:STRIDE:PAD:HxW:ACT[:nobias]`.
pub fn parse_layers(value: &str) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    for item in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let bad = || Error::config("model.layers", format!("cannot parse layer `{item}`"));
        let mut parts: Vec<&str> = item.split(':').collect();
        let bias = if parts.last() == Some(&"nobias") {
            parts.pop();
            false
        } else {
            true
        };
        let usize_at = |i: usize| parts.get(i).and_then(|p| p.parse::<usize>().ok()).ok_or_else(bad);
        let spec = match parts[0] {
            "dense" if parts.len() == 4 => LayerSpec::dense(usize_at(1)?, usize_at(2)?, parse_activation(parts[3])?),
            "conv" if parts.len() == 8 => LayerSpec::conv2d(
                usize_at(1)?,
                usize_at(2)?,
                parse_pair(parts[3]).ok_or_else(bad)?,
                usize_at(4)?,
                usize_at(5)?,
                parse_pair(parts[6]).ok_or_else(bad)?,
                parse_activation(parts[7])?,
            ),
            _ => return Err(bad()),
        };
        out.push(if bias { spec } else { spec.without_bias() });
    }
    if out.is_empty() {
        return Err(Error::config("model.layers", "no layers given"));
    }
    Ok(out)
}

pub fn format_layers(layers: &[LayerSpec]) -> String {
    let items: Vec<String> = layers
        .iter()
        .map(|l| {
            let mut s = match l.kind {
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => format!("dense:{in_features}:{out_features}:{}", activation_name(l.activation)),
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    in_height,
                    in_width,
                } => format!(
                    "conv:{in_channels}:{out_channels}:{kernel_h}x{kernel_w}:{stride}:{padding}:{in_height}x{in_width}:{}",
                    activation_name(l.activation)
                ),
            };
            if !l.has_bias {
                s.push_str(":nobias");
            }
            s
        })
        .collect();
    items.join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn conv_layers_round_trip() {
        let mut layers = default_convnet();
        layers[1] = layers[1].without_bias();
        assert_eq!(parse_layers(&format_layers(&layers)).unwrap(), layers);
    }

    #[test]
    fn missing_seed_is_named() {
        match ExperimentConfig::parse("lr = 0.1\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "seed"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        match ExperimentConfig::parse("seed = 1\nkfac.dampign = 0.1\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "kfac.dampign"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn comments_and_fractions() {
        let cfg =
            ExperimentConfig::parse("# run\nseed = 4 # inline\ndist.grad_worker_frac = 1/2\nkfac.precision = half\n")
                .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.dist.grad_worker_frac, 0.5);
        assert_eq!(cfg.dist.element_bytes, 2);
    }

    #[test]
    fn non_divisor_frac_rejected() {
        match ExperimentConfig::parse("seed = 1\ndist.grad_worker_frac = 0.4\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "dist.grad_worker_frac"),
            other => panic!("{other:?}"),
        }
    }
}
