//! Kronecker-factored preconditioning.
//!
//! For a layer with parameter gradient `∇W` (shape `out × in`), activation
//! factor `A = E[a aᵀ]` and gradient factor `G = E[g gᵀ]`, the damped natural
//! gradient `(A ⊗ G + γI)⁻¹ vec(∇W)` is evaluated through the eigen
//! decompositions `A = Q_A diag(υ_A) Q_Aᵀ`, `G = Q_G diag(υ_G) Q_Gᵀ`:
//!
//! ```text
//! V₁ = Q_Gᵀ ∇W Q_A
//! V₂ = V₁ ⊙ dGA          dGA[o, i] = 1 / (υ_G[o] υ_A[i] + γ)
//! P  = Q_G V₂ Q_Aᵀ
//! ```
//!
//! `dGA` is formed once per eigen update and cached in place of the raw
//! eigenvalues. [`oracle_precondition`] builds the dense Kronecker system and
//! solves it directly; it exists to check the eigen route.

use crate::error::{Error, Result};
use crate::linalg::{self, kron, quantize_half, DenseMatrix};
use crate::network::{capture_gradient, LayerCapture, LayerSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScaleMode {
    None,
    /// Caps each layer's preconditioned gradient at the raw gradient's Frobenius norm.
    NormClip,
}

impl GradScaleMode {
    pub fn name(&self) -> &'static str {
        match self {
            GradScaleMode::None => "none",
            GradScaleMode::NormClip => "norm_clip",
        }
    }
}

impl std::str::FromStr for GradScaleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GradScaleMode::None),
            "norm_clip" => Ok(GradScaleMode::NormClip),
            other => Err(Error::config("kfac.grad_scale", format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Full,
    /// Stored factors and eigen state are rounded to binary16.
    Half,
}

impl Precision {
    /// Bytes per stored or communicated factor/eigen element.
    pub fn element_bytes(&self) -> usize {
        match self {
            Precision::Full => 8,
            Precision::Half => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Precision::Full => "full",
            Precision::Half => "half",
        }
    }

    fn store(&self, m: DenseMatrix) -> DenseMatrix {
        match self {
            Precision::Full => m,
            Precision::Half => quantize_half(&m),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Precision::Full),
            "half" => Ok(Precision::Half),
            other => Err(Error::config("kfac.precision", format!("unknown precision `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfacConfig {
    pub damping: f64,
    /// Iterations between factor updates.
    pub factor_update_freq: usize,
    /// Iterations between eigen decompositions; a multiple of `factor_update_freq`.
    pub eigen_update_freq: usize,
    pub running_avg_decay: f64,
    pub grad_scale: GradScaleMode,
    pub precision: Precision,
}

impl Default for KfacConfig {
    fn default() -> Self {
        Self {
            damping: 0.003,
            factor_update_freq: 2,
            eigen_update_freq: 20,
            running_avg_decay: 0.95,
            grad_scale: GradScaleMode::NormClip,
            precision: Precision::Full,
        }
    }
}

impl KfacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping.is_finite()) {
            return Err(Error::config("kfac.damping", "must be positive and finite"));
        }
        if self.factor_update_freq == 0 {
            return Err(Error::config("kfac.factor_update_freq", "must be at least 1"));
        }
        if self.eigen_update_freq < self.factor_update_freq
            || !self.eigen_update_freq.is_multiple_of(self.factor_update_freq)
        {
            return Err(Error::config(
                "kfac.eigen_update_freq",
                "must be a multiple of kfac.factor_update_freq",
            ));
        }
        if !(0.0..1.0).contains(&self.running_avg_decay) {
            return Err(Error::config("kfac.running_avg_decay", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn is_factor_step(&self, step: usize) -> bool {
        step.is_multiple_of(self.factor_update_freq)
    }

    pub fn is_eigen_step(&self, step: usize) -> bool {
        step.is_multiple_of(self.eigen_update_freq)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Factors {
    pub a: DenseMatrix,
    pub g: DenseMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenState {
    pub qa: DenseMatrix,
    pub qg: DenseMatrix,
    /// `1 / (υ_G υ_Aᵀ + γ)`, shape `out × in`.
    pub dga: DenseMatrix,
}

impl EigenState {
    pub fn new(qa: DenseMatrix, qg: DenseMatrix, dga: DenseMatrix, precision: Precision) -> Self {
        Self {
            qa: precision.store(qa),
            qg: precision.store(qg),
            dga: precision.store(dga),
        }
    }

    pub fn element_count(&self) -> usize {
        self.qa.len() + self.qg.len() + self.dga.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    a_sum: DenseMatrix,
    g_sum: DenseMatrix,
    count: usize,
}

/// Curvature state of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct KfacLayerState {
    a_dim: usize,
    g_dim: usize,
    factors: Option<Factors>,
    eigen: Option<EigenState>,
    pending: Option<Pending>,
}

impl KfacLayerState {
    pub fn new(spec: &LayerSpec) -> Self {
        Self::with_dims(spec.param_cols(), spec.weight_out())
    }

    pub fn with_dims(a_dim: usize, g_dim: usize) -> Self {
        Self {
            a_dim,
            g_dim,
            factors: None,
            eigen: None,
            pending: None,
        }
    }

    pub fn a_dim(&self) -> usize {
        self.a_dim
    }

    pub fn g_dim(&self) -> usize {
        self.g_dim
    }

    pub fn factors(&self) -> Option<&Factors> {
        self.factors.as_ref()
    }

    pub fn eigen(&self) -> Option<&EigenState> {
        self.eigen.as_ref()
    }

    pub fn have_factors(&self) -> bool {
        self.factors.is_some()
    }

    pub fn have_eigen(&self) -> bool {
        self.eigen.is_some()
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    /// Installs eigen state received from another worker.
    pub fn set_eigen(&mut self, eigen: EigenState) -> Result<()> {
        if eigen.qa.shape() != (self.a_dim, self.a_dim)
            || eigen.qg.shape() != (self.g_dim, self.g_dim)
            || eigen.dga.shape() != (self.g_dim, self.a_dim)
        {
            return Err(Error::dim("eigen state does not match layer dimensions"));
        }
        self.eigen = Some(eigen);
        Ok(())
    }

    pub fn clear_eigen(&mut self) {
        self.eigen = None;
    }
}

/// Per-batch factors `aᵀa / rows` and `gᵀg / rows`.
///
/// `g` holds summed-loss gradients, so dividing by the row count yields the
/// per-sample second moment for dense layers.
pub fn compute_factors(capture: &LayerCapture) -> Result<(DenseMatrix, DenseMatrix)> {
    let g = capture
        .g
        .as_ref()
        .ok_or_else(|| Error::State(format!("capture {} has no gradients", capture.layer_index)))?;
    if capture.sample_count == 0 || capture.a.rows() != g.rows() {
        return Err(Error::State(format!(
            "capture {} is empty or inconsistent",
            capture.layer_index
        )));
    }
    let rows = capture.a.rows() as f64;
    let a = capture.a.t_matmul(&capture.a)?.scale(1.0 / rows);
    let g = g.t_matmul(g)?.scale(1.0 / rows);
    Ok((a, g))
}

/// Adds one micro-batch's factors to the pending average.
pub fn accumulate_factors(state: &mut KfacLayerState, a_batch: &DenseMatrix, g_batch: &DenseMatrix) -> Result<()> {
    if a_batch.shape() != (state.a_dim, state.a_dim) || g_batch.shape() != (state.g_dim, state.g_dim) {
        return Err(Error::dim(format!(
            "factors {:?}/{:?} for a layer expecting {}x{} and {}x{}",
            a_batch.shape(),
            g_batch.shape(),
            state.a_dim,
            state.a_dim,
            state.g_dim,
            state.g_dim
        )));
    }
    state.pending = Some(match state.pending.take() {
        None => Pending {
            a_sum: a_batch.clone(),
            g_sum: g_batch.clone(),
            count: 1,
        },
        Some(p) => Pending {
            a_sum: p.a_sum.add(a_batch)?,
            g_sum: p.g_sum.add(g_batch)?,
            count: p.count + 1,
        },
    });
    Ok(())
}

/// Mean of the pending micro-batch factors, if any.
pub fn pending_factors(state: &KfacLayerState) -> Option<(DenseMatrix, DenseMatrix)> {
    state.pending.as_ref().map(|p| {
        let inv = 1.0 / p.count as f64;
        (p.a_sum.scale(inv), p.g_sum.scale(inv))
    })
}

/// Folds the pending factors into the running averages and clears them.
///
/// The first update adopts the pending factors directly.
pub fn update_running_factors(state: &mut KfacLayerState, decay: f64, precision: Precision) -> Result<()> {
    let (a_new, g_new) = pending_factors(state).ok_or_else(|| Error::State("no pending factors to fold in".into()))?;
    let factors = match state.factors.take() {
        None => Factors { a: a_new, g: g_new },
        Some(old) => Factors {
            a: old.a.scale(decay).add(&a_new.scale(1.0 - decay))?,
            g: old.g.scale(decay).add(&g_new.scale(1.0 - decay))?,
        },
    };
    state.factors = Some(Factors {
        a: precision.store(factors.a),
        g: precision.store(factors.g),
    });
    state.pending = None;
    Ok(())
}

/// Eigenvectors and eigenvalues (clamped at zero) of one factor.
pub fn eigen_factor(factor: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>)> {
    let eig = linalg::sym_eig(factor)?;
    let values = eig.values.into_iter().map(|v| v.max(0.0)).collect();
    Ok((eig.vectors, values))
}

/// `dGA[o, i] = 1 / (υ_G[o] υ_A[i] + γ)`
pub fn damped_reciprocal(values_g: &[f64], values_a: &[f64], damping: f64) -> DenseMatrix {
    DenseMatrix::from_fn(values_g.len(), values_a.len(), |o, i| {
        1.0 / (values_g[o] * values_a[i] + damping)
    })
}

/// Recomputes the eigen state from the running factors.
pub fn compute_eigen(state: &mut KfacLayerState, damping: f64, precision: Precision) -> Result<()> {
    let factors = state
        .factors
        .as_ref()
        .ok_or_else(|| Error::State("eigen update before any factor update".into()))?;
    let (qa, va) = eigen_factor(&factors.a)?;
    let (qg, vg) = eigen_factor(&factors.g)?;
    let dga = damped_reciprocal(&vg, &va, damping);
    state.eigen = Some(EigenState::new(qa, qg, dga, precision));
    Ok(())
}

/// `Q_G ((Q_Gᵀ grad Q_A) ⊙ dGA) Q_Aᵀ`
pub fn precondition(state: &KfacLayerState, grad: &DenseMatrix) -> Result<DenseMatrix> {
    let eigen = state
        .eigen
        .as_ref()
        .ok_or_else(|| Error::State("preconditioning without eigen state".into()))?;
    precondition_with(eigen, grad)
}

pub fn precondition_with(eigen: &EigenState, grad: &DenseMatrix) -> Result<DenseMatrix> {
    if grad.shape() != eigen.dga.shape() {
        return Err(Error::dim(format!(
            "gradient {:?} vs layer {:?}",
            grad.shape(),
            eigen.dga.shape()
        )));
    }
    let v1 = eigen.qg.t_matmul(grad)?.matmul(&eigen.qa)?;
    let v2 = v1.hadamard(&eigen.dga)?;
    eigen.qg.matmul(&v2)?.matmul_t(&eigen.qa)
}

/// Reference preconditioner: solves `(A ⊗ G + γI) vec(P) = vec(grad)` densely,
/// with column-major `vec`.
pub fn oracle_precondition(a: &DenseMatrix, g: &DenseMatrix, damping: f64, grad: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() || !g.is_square() || grad.shape() != (g.rows(), a.rows()) {
        return Err(Error::dim(format!(
            "oracle with A {:?}, G {:?}, grad {:?}",
            a.shape(),
            g.shape(),
            grad.shape()
        )));
    }
    let system = linalg::add_diag(&kron(a, g), damping)?;
    let solution = linalg::invert(&system)?.matmul(&grad.vec_col_major())?;
    DenseMatrix::unvec_col_major(solution.data(), grad.rows(), grad.cols())
}

pub fn scale_gradient(precond: &DenseMatrix, raw: &DenseMatrix, mode: GradScaleMode) -> Result<DenseMatrix> {
    if precond.shape() != raw.shape() {
        return Err(Error::dim(format!(
            "preconditioned {:?} vs raw {:?}",
            precond.shape(),
            raw.shape()
        )));
    }
    match mode {
        GradScaleMode::None => Ok(precond.clone()),
        GradScaleMode::NormClip => {
            let p = precond.frobenius_norm();
            let r = raw.frobenius_norm();
            if p == 0.0 || p <= r {
                Ok(precond.clone())
            } else {
                Ok(precond.scale(r / p))
            }
        }
    }
}

/// One preconditioning step over all layers of a single process.
///
/// On factor steps the pending factors are folded in; on eigen steps the
/// eigen state is rebuilt. Every step returns scaled preconditioned gradients.
pub fn kfac_step(
    states: &mut [KfacLayerState],
    grads: &[DenseMatrix],
    config: &KfacConfig,
    step_index: usize,
) -> Result<Vec<DenseMatrix>> {
    if states.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} layer states for {} gradients",
            states.len(),
            grads.len()
        )));
    }
    if config.is_factor_step(step_index) {
        for state in states.iter_mut() {
            update_running_factors(state, config.running_avg_decay, config.precision)?;
        }
    }
    if config.is_eigen_step(step_index) {
        for state in states.iter_mut() {
            compute_eigen(state, config.damping, config.precision)?;
        }
    }
    states
        .iter()
        .zip(grads)
        .map(|(state, grad)| scale_gradient(&precondition(state, grad)?, grad, config.grad_scale))
        .collect()
}

/// Single-process K-FAC preconditioner.
#[derive(Debug, Clone)]
pub struct KfacPreconditioner {
    pub config: KfacConfig,
    pub states: Vec<KfacLayerState>,
}

impl KfacPreconditioner {
    pub fn new(specs: &[LayerSpec], config: KfacConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            states: specs.iter().map(KfacLayerState::new).collect(),
        })
    }

    /// Records one (micro-)batch of captures.
    pub fn accumulate(&mut self, captures: &[LayerCapture]) -> Result<()> {
        for capture in captures {
            let state = self
                .states
                .get_mut(capture.layer_index)
                .ok_or_else(|| Error::dim(format!("no layer {}", capture.layer_index)))?;
            let (a, g) = compute_factors(capture)?;
            accumulate_factors(state, &a, &g)?;
        }
        Ok(())
    }

    pub fn step(&mut self, grads: &[DenseMatrix], step_index: usize) -> Result<Vec<DenseMatrix>> {
        kfac_step(&mut self.states, grads, &self.config, step_index)
    }

    /// Accumulates `captures` when this is a factor step, then steps.
    pub fn step_with_captures(&mut self, captures: &[LayerCapture], step_index: usize) -> Result<Vec<DenseMatrix>> {
        if self.config.is_factor_step(step_index) {
            self.accumulate(captures)?;
        }
        let grads = captures.iter().map(capture_gradient).collect::<Result<Vec<_>>>()?;
        self.step(&grads, step_index)
    }
}
