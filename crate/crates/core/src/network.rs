//! A small feed-forward network with dense and conv2d layers.
//!
//! Each layer keeps its weight and bias in one parameter matrix of shape
//! `out × (in + 1)` when it has a bias (bias in the last column), or `out × in`
//! otherwise. Conv2d layers use `in = in_channels · kernel_h · kernel_w` and
//! are evaluated through patch extraction, so both layer kinds reduce to the
//! same row-wise matrix algebra:
//!
//! ```text
//! z = a · Wᵀ          a: one row per sample (dense) or sample×position (conv2d)
//! ```
//!
//! With capture enabled the forward pass records `a` (with a trailing 1 column
//! for the bias) and the backward pass records `g`, the gradient of the *summed*
//! loss with respect to `z`. Per-row values never depend on other rows, so
//! captures of disjoint shards stack into the capture of the whole batch.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    /// Final layer only: logits feed a softmax cross-entropy loss.
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense {
        in_features: usize,
        out_features: usize,
    },
    /// Inputs are `in_channels × in_height × in_width`, flattened channel-major.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        in_height: usize,
        in_width: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub has_bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn dense(in_features: usize, out_features: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense {
                in_features,
                out_features,
            },
            has_bias: true,
            activation,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: usize,
        input_hw: (usize, usize),
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h: kernel.0,
                kernel_w: kernel.1,
                stride,
                padding,
                in_height: input_hw.0,
                in_width: input_hw.1,
            },
            has_bias: true,
            activation,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            LayerKind::Dense {
                in_features,
                out_features,
            } => in_features >= 1 && out_features >= 1,
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
                in_height,
                in_width,
            } => {
                in_channels >= 1
                    && out_channels >= 1
                    && kernel_h >= 1
                    && kernel_w >= 1
                    && stride >= 1
                    && in_height + 2 * padding >= kernel_h
                    && in_width + 2 * padding >= kernel_w
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("model.layers", format!("invalid layer {self:?}")))
        }
    }

    /// Output spatial size `(height, width)`; `(1, 1)` for dense layers.
    pub fn output_hw(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Dense { .. } => (1, 1),
            LayerKind::Conv2d {
                kernel_h,
                kernel_w,
                stride,
                padding,
                in_height,
                in_width,
                ..
            } => (
                (in_height + 2 * padding - kernel_h) / stride + 1,
                (in_width + 2 * padding - kernel_w) / stride + 1,
            ),
        }
    }

    /// Rows contributed to `a`/`g` per sample.
    pub fn positions(&self) -> usize {
        let (h, w) = self.output_hw();
        h * w
    }

    /// Flattened per-sample input width.
    pub fn input_size(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels,
                in_height,
                in_width,
                ..
            } => in_channels * in_height * in_width,
        }
    }

    /// Flattened per-sample output width.
    pub fn output_size(&self) -> usize {
        self.weight_out() * self.positions()
    }

    /// Weight input dimension, excluding the bias column.
    pub fn weight_in(&self) -> usize {
        match self.kind {
            LayerKind::Dense { in_features, .. } => in_features,
            LayerKind::Conv2d {
                in_channels,
                kernel_h,
                kernel_w,
                ..
            } => in_channels * kernel_h * kernel_w,
        }
    }

    pub fn weight_out(&self) -> usize {
        match self.kind {
            LayerKind::Dense { out_features, .. } => out_features,
            LayerKind::Conv2d { out_channels, .. } => out_channels,
        }
    }

    /// Columns of the parameter matrix (and side of the activation factor).
    pub fn param_cols(&self) -> usize {
        self.weight_in() + usize::from(self.has_bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: DenseMatrix,
    pub velocity: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub rng_seed: u64,
}

impl Model {
    /// Builds a model with uniform He-style initialization and zero biases.
    pub fn new(specs: &[LayerSpec], rng_seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let layers = specs
            .iter()
            .map(|spec| {
                let fan_in = spec.weight_in();
                let bound = (6.0 / fan_in as f64).sqrt();
                let params = DenseMatrix::from_fn(spec.weight_out(), spec.param_cols(), |_, j| {
                    if j < fan_in {
                        rng.gen_range(-bound..bound)
                    } else {
                        0.0
                    }
                });
                let velocity = DenseMatrix::zeros(params.rows(), params.cols());
                Layer {
                    spec: *spec,
                    params,
                    velocity,
                }
            })
            .collect();
        Ok(Self { layers, rng_seed })
    }

    /// Replaces every parameter matrix; shapes must match.
    pub fn set_params(&mut self, params: Vec<DenseMatrix>) -> Result<()> {
        if params.len() != self.layers.len() {
            return Err(Error::dim(format!(
                "{} parameter matrices for {} layers",
                params.len(),
                self.layers.len()
            )));
        }
        for (layer, p) in self.layers.iter_mut().zip(params) {
            if p.shape() != layer.params.shape() {
                return Err(Error::dim(format!(
                    "parameter shape {:?} vs {:?}",
                    p.shape(),
                    layer.params.shape()
                )));
            }
            layer.params = p;
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty model").spec.output_size()
    }

    pub fn head(&self) -> Activation {
        self.layers.last().expect("non-empty model").spec.activation
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.params.is_finite())
    }

    /// Fraction of samples whose arg-max logit equals the class target.
    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        let classes = match &batch.targets {
            Targets::Classes(c) => c,
            Targets::Values(_) => return Err(Error::config("dataset", "accuracy needs class targets")),
        };
        let logits = forward(self, batch, false)?.logits;
        let correct = classes
            .iter()
            .enumerate()
            .filter(|(i, &t)| argmax(logits.row(*i)) == t)
            .count();
        Ok(correct as f64 / classes.len() as f64)
    }
}

pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::config("model.layers", "model has no layers"));
    }
    for (i, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let last = i + 1 == specs.len();
        if spec.activation == Activation::SoftmaxCrossEntropy && !last {
            return Err(Error::config(
                "model.layers",
                format!("layer {i}: softmax head is only allowed on the last layer"),
            ));
        }
        if last && spec.activation == Activation::Relu {
            return Err(Error::config(
                "model.layers",
                "last layer needs a softmax or identity head",
            ));
        }
        if let Some(next) = specs.get(i + 1) {
            if spec.output_size() != next.input_size() {
                return Err(Error::config(
                    "model.layers",
                    format!(
                        "layer {i} produces {} values but layer {} expects {}",
                        spec.output_size(),
                        i + 1,
                        next.input_size()
                    ),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes(Vec<usize>),
    Values(DenseMatrix),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub targets: Targets,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, targets: Targets) -> Result<Self> {
        if inputs.rows() != targets.len() {
            return Err(Error::dim(format!(
                "{} input rows but {} targets",
                inputs.rows(),
                targets.len()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Gathers the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::dim("empty selection"));
        }
        let cols = self.inputs.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        let inputs = DenseMatrix::new(indices.len(), cols, data)?;
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Values(v) => {
                let mut data = Vec::with_capacity(indices.len() * v.cols());
                for &i in indices {
                    data.extend_from_slice(v.row(i));
                }
                Targets::Values(DenseMatrix::new(indices.len(), v.cols(), data)?)
            }
        };
        Batch::new(inputs, targets)
    }

    /// Splits into `parts` contiguous shards of equal size.
    pub fn shard(&self, parts: usize) -> Result<Vec<Self>> {
        if parts == 0 || !self.len().is_multiple_of(parts) {
            return Err(Error::config(
                "batch_size",
                format!("batch of {} does not split into {parts} equal shards", self.len()),
            ));
        }
        let size = self.len() / parts;
        (0..parts)
            .map(|p| self.select(&(p * size..(p + 1) * size).collect::<Vec<_>>()))
            .collect()
    }
}

/// Per-layer data consumed by the curvature factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub layer_index: usize,
    /// Layer inputs, one row per sample or sample×position, bias column appended.
    pub a: DenseMatrix,
    /// Summed-loss gradients w.r.t. pre-activations; filled by [`backward`].
    pub g: Option<DenseMatrix>,
    pub sample_count: usize,
}

impl LayerCapture {
    /// Stacks shard captures of the same layer in the given order.
    pub fn concat(parts: &[&LayerCapture]) -> Result<LayerCapture> {
        let first = parts.first().ok_or_else(|| Error::dim("no captures"))?;
        let a = DenseMatrix::vstack(&parts.iter().map(|p| &p.a).collect::<Vec<_>>())?;
        let g = if parts.iter().all(|p| p.g.is_some()) {
            Some(DenseMatrix::vstack(
                &parts.iter().map(|p| p.g.as_ref().unwrap()).collect::<Vec<_>>(),
            )?)
        } else {
            None
        };
        Ok(LayerCapture {
            layer_index: first.layer_index,
            a,
            g,
            sample_count: parts.iter().map(|p| p.sample_count).sum(),
        })
    }
}

/// Output of [`forward`]; also carries what [`backward`] needs.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: DenseMatrix,
    pub captures: Vec<LayerCapture>,
    /// Per layer: input rows (bias column included) and pre-activations.
    inputs: Vec<DenseMatrix>,
    pre_activations: Vec<DenseMatrix>,
    samples: usize,
}

#[derive(Debug, Clone)]
pub struct BackwardPass {
    /// Mean loss over the batch.
    pub loss: f64,
    pub sample_losses: Vec<f64>,
    /// Gradients of the mean loss, shaped like each layer's parameter matrix.
    pub grads: Vec<DenseMatrix>,
}

pub fn forward(model: &Model, batch: &Batch, capture: bool) -> Result<ForwardPass> {
    if batch.inputs.cols() != model.input_size() {
        return Err(Error::dim(format!(
            "batch has {} features, model expects {}",
            batch.inputs.cols(),
            model.input_size()
        )));
    }
    let n = batch.len();
    let mut x = batch.inputs.clone();
    let mut inputs = Vec::with_capacity(model.layers.len());
    let mut pre_activations = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let a = layer_rows(&layer.spec, &x)?;
        let z = a.matmul_t(&layer.params)?;
        let activated = match layer.spec.activation {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity | Activation::SoftmaxCrossEntropy => z.clone(),
        };
        x = rows_to_samples(&layer.spec, &activated, n);
        inputs.push(a);
        pre_activations.push(z);
    }
    let captures = if capture {
        inputs
            .iter()
            .enumerate()
            .map(|(i, a)| LayerCapture {
                layer_index: i,
                a: a.clone(),
                g: None,
                sample_count: n,
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(ForwardPass {
        logits: x,
        captures,
        inputs,
        pre_activations,
        samples: n,
    })
}

/// Backpropagates the loss; fills `g` in every capture of `pass`.
pub fn backward(model: &Model, batch: &Batch, pass: &mut ForwardPass) -> Result<BackwardPass> {
    let n = pass.samples;
    if batch.len() != n || pass.logits.rows() != n {
        return Err(Error::dim(format!(
            "logits for {} samples, batch of {}",
            pass.logits.rows(),
            batch.len()
        )));
    }
    let (sample_losses, mut upstream) = loss_and_gradient(model.head(), &pass.logits, &batch.targets)?;
    let loss = sample_losses.iter().sum::<f64>() / n as f64;

    let mut grads = vec![None; model.layers.len()];
    for (idx, layer) in model.layers.iter().enumerate().rev() {
        let spec = &layer.spec;
        let z = &pass.pre_activations[idx];
        // summed-loss gradient w.r.t. z, in row layout
        let mut g = samples_to_rows(spec, &upstream, n);
        if spec.activation == Activation::Relu {
            for (gv, zv) in g.data_mut().iter_mut().zip(z.data()) {
                if *zv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let a = &pass.inputs[idx];
        grads[idx] = Some(weight_gradient(a, &g, n)?);
        if idx > 0 {
            let weights = weight_block(layer);
            let d_rows = g.matmul(&weights)?;
            upstream = rows_to_input_grad(spec, &d_rows, n);
        }
        if let Some(cap) = pass.captures.get_mut(idx) {
            cap.g = Some(g);
        }
    }
    Ok(BackwardPass {
        loss,
        sample_losses,
        grads: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
    })
}

/// Mean-loss parameter gradient from captured rows: `gᵀ·a / samples`.
pub fn weight_gradient(a: &DenseMatrix, g: &DenseMatrix, samples: usize) -> Result<DenseMatrix> {
    Ok(g.t_matmul(a)?.scale(1.0 / samples as f64))
}

/// Gradient of a capture whose `g` has been filled.
pub fn capture_gradient(capture: &LayerCapture) -> Result<DenseMatrix> {
    let g = capture
        .g
        .as_ref()
        .ok_or_else(|| Error::State(format!("capture {} has no g", capture.layer_index)))?;
    weight_gradient(&capture.a, g, capture.sample_count)
}

/// Per-sample losses and the summed-loss gradient w.r.t. the logits.
fn loss_and_gradient(head: Activation, logits: &DenseMatrix, targets: &Targets) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = logits.rows();
    let k = logits.cols();
    match (head, targets) {
        (Activation::SoftmaxCrossEntropy, Targets::Classes(classes)) => {
            if classes.len() != n {
                return Err(Error::dim(format!("{} targets for {n} logits", classes.len())));
            }
            let mut grad = DenseMatrix::zeros(n, k);
            let mut losses = Vec::with_capacity(n);
            for (i, &t) in classes.iter().enumerate() {
                if t >= k {
                    return Err(Error::dim(format!("class {t} with {k} logits")));
                }
                let row = logits.row(i);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                losses.push(total.ln() - (row[t] - max));
                for (j, e) in exps.iter().enumerate() {
                    grad[(i, j)] = e / total - if j == t { 1.0 } else { 0.0 };
                }
            }
            Ok((losses, grad))
        }
        (Activation::Identity, Targets::Values(values)) => {
            if values.shape() != logits.shape() {
                return Err(Error::dim(format!(
                    "targets {:?} vs outputs {:?}",
                    values.shape(),
                    logits.shape()
                )));
            }
            let grad = logits.sub(values)?;
            let losses = (0..n)
                .map(|i| 0.5 * grad.row(i).iter().map(|d| d * d).sum::<f64>())
                .collect();
            Ok((losses, grad))
        }
        _ => Err(Error::dim(format!("head {head:?} does not match target kind"))),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Parameter columns excluding the bias.
fn weight_block(layer: &Layer) -> DenseMatrix {
    let cols = layer.spec.weight_in();
    DenseMatrix::from_fn(layer.params.rows(), cols, |i, j| layer.params[(i, j)])
}

/// Builds the `a` rows of a layer from per-sample inputs.
fn layer_rows(spec: &LayerSpec, x: &DenseMatrix) -> Result<DenseMatrix> {
    let n = x.rows();
    let bias = usize::from(spec.has_bias);
    match spec.kind {
        LayerKind::Dense { in_features, .. } => {
            let mut out = DenseMatrix::zeros(n, in_features + bias);
            for i in 0..n {
                out.row_mut(i)[..in_features].copy_from_slice(x.row(i));
                if bias == 1 {
                    out[(i, in_features)] = 1.0;
                }
            }
            Ok(out)
        }
        LayerKind::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            in_height,
            in_width,
            ..
        } => {
            let (oh, ow) = spec.output_hw();
            let width = spec.weight_in();
            let mut out = DenseMatrix::zeros(n * oh * ow, width + bias);
            for s in 0..n {
                let sample = x.row(s);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = out.row_mut((s * oh + oy) * ow + ox);
                        let mut col = 0;
                        for c in 0..in_channels {
                            for ky in 0..kernel_h {
                                for kx in 0..kernel_w {
                                    let y = (oy * stride + ky) as isize - padding as isize;
                                    let xx = (ox * stride + kx) as isize - padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < in_height && (xx as usize) < in_width {
                                        row[col] = sample[(c * in_height + y as usize) * in_width + xx as usize];
                                    }
                                    col += 1;
                                }
                            }
                        }
                        if bias == 1 {
                            row[width] = 1.0;
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Row layout (`samples·positions × out`) to per-sample layout (`samples × out·positions`).
fn rows_to_samples(spec: &LayerSpec, rows: &DenseMatrix, n: usize) -> DenseMatrix {
    let positions = spec.positions();
    if positions == 1 {
        return rows.clone();
    }
    let out = spec.weight_out();
    let mut x = DenseMatrix::zeros(n, out * positions);
    for s in 0..n {
        for p in 0..positions {
            for c in 0..out {
                x[(s, c * positions + p)] = rows[(s * positions + p, c)];
            }
        }
    }
    x
}

fn samples_to_rows(spec: &LayerSpec, x: &DenseMatrix, n: usize) -> DenseMatrix {
    let positions = spec.positions();
    if positions == 1 {
        return x.clone();
    }
    let out = spec.weight_out();
    let mut rows = DenseMatrix::zeros(n * positions, out);
    for s in 0..n {
        for p in 0..positions {
            for c in 0..out {
                rows[(s * positions + p, c)] = x[(s, c * positions + p)];
            }
        }
    }
    rows
}

/// Scatters patch-row gradients back to per-sample input gradients.
fn rows_to_input_grad(spec: &LayerSpec, d_rows: &DenseMatrix, n: usize) -> DenseMatrix {
    match spec.kind {
        LayerKind::Dense { .. } => d_rows.clone(),
        LayerKind::Conv2d {
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            in_height,
            in_width,
            ..
        } => {
            let (oh, ow) = spec.output_hw();
            let mut dx = DenseMatrix::zeros(n, in_channels * in_height * in_width);
            for s in 0..n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let row = d_rows.row((s * oh + oy) * ow + ox);
                        let mut col = 0;
                        for c in 0..in_channels {
                            for ky in 0..kernel_h {
                                for kx in 0..kernel_w {
                                    let y = (oy * stride + ky) as isize - padding as isize;
                                    let xx = (ox * stride + kx) as isize - padding as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < in_height && (xx as usize) < in_width {
                                        dx[(s, (c * in_height + y as usize) * in_width + xx as usize)] += row[col];
                                    }
                                    col += 1;
                                }
                            }
                        }
                    }
                }
            }
            dx
        }
    }
}

/// Momentum SGD with coupled weight decay:
/// `v ← momentum·v + grad + weight_decay·w`, `w ← w − lr·v`.
pub fn sgd_step(model: &mut Model, grads: &[DenseMatrix], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if grads.len() != model.layers.len() {
        return Err(Error::dim(format!(
            "{} gradients for {} layers",
            grads.len(),
            model.layers.len()
        )));
    }
    for (layer, grad) in model.layers.iter_mut().zip(grads) {
        if grad.shape() != layer.params.shape() {
            return Err(Error::dim(format!(
                "gradient {:?} for parameters {:?}",
                grad.shape(),
                layer.params.shape()
            )));
        }
        for ((v, w), g) in layer
            .velocity
            .data_mut()
            .iter_mut()
            .zip(layer.params.data_mut())
            .zip(grad.data())
        {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Blobs,
    TwoSpirals,
    TinyImages,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Blobs => "blobs",
            DatasetKind::TwoSpirals => "two_spirals",
            DatasetKind::TinyImages => "tiny_images",
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            DatasetKind::Blobs | DatasetKind::TinyImages => 3,
            DatasetKind::TwoSpirals => 2,
        }
    }

    /// Per-sample feature count.
    pub fn features(&self) -> usize {
        match self {
            DatasetKind::Blobs | DatasetKind::TwoSpirals => 2,
            DatasetKind::TinyImages => TINY_SIDE * TINY_SIDE,
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "two_spirals" => Ok(DatasetKind::TwoSpirals),
            "tiny_images" => Ok(DatasetKind::TinyImages),
            other => Err(Error::config("dataset.kind", format!("unknown dataset `{other}`"))),
        }
    }
}

/// Side length of the single-channel tiny images.
pub const TINY_SIDE: usize = 6;

const BLOB_SIGMA: f64 = 0.1;
const SPIRAL_TURNS: f64 = 1.75;
const SPIRAL_NOISE: f64 = 0.03;

/// Generates a dataset and splits it 80/20 into train and validation batches.
///
/// Labels are dealt round-robin before shuffling, so classes are balanced
/// within one sample.
pub fn gen_dataset(kind: DatasetKind, n: usize, seed: u64) -> Result<(Batch, Batch)> {
    if n < 20 {
        return Err(Error::config("dataset.n", format!("need at least 20 samples, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = kind.classes();
    let features = kind.features();
    let mut data = Vec::with_capacity(n * features);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % k;
        labels.push(class);
        match kind {
            DatasetKind::Blobs => {
                // centers on an equilateral triangle of side 10σ
                let angle = class as f64 * 2.0 * std::f64::consts::PI / 3.0;
                let radius = 10.0 * BLOB_SIGMA / 3f64.sqrt();
                data.push(radius * angle.cos() + BLOB_SIGMA * normal(&mut rng));
                data.push(radius * angle.sin() + BLOB_SIGMA * normal(&mut rng));
            }
            DatasetKind::TwoSpirals => {
                let t: f64 = rng.gen_range(0.15..1.0);
                let angle = t * SPIRAL_TURNS * 2.0 * std::f64::consts::PI + class as f64 * std::f64::consts::PI;
                data.push(t * angle.cos() + SPIRAL_NOISE * normal(&mut rng));
                data.push(t * angle.sin() + SPIRAL_NOISE * normal(&mut rng));
            }
            DatasetKind::TinyImages => {
                let mut img = [0.0; TINY_SIDE * TINY_SIDE];
                let offset = rng.gen_range(0..TINY_SIDE);
                for j in 0..TINY_SIDE {
                    let (y, x) = match class {
                        0 => (offset, j),
                        1 => (j, offset),
                        _ => (j, (j + offset) % TINY_SIDE),
                    };
                    img[y * TINY_SIDE + x] = 1.0;
                }
                for v in img.iter_mut() {
                    *v += 0.1 * normal(&mut rng);
                }
                data.extend_from_slice(&img);
            }
        }
    }
    let all = Batch::new(DenseMatrix::new(n, features, data)?, Targets::Classes(labels))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = n * 4 / 5;
    Ok((all.select(&order[..n_train])?, all.select(&order[n_train..])?))
}

/// Standard normal via Box-Muller.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
