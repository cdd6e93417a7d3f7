//! Finite-width fully-connected networks with hand-written backpropagation.
//!
//! A network with widths `[M₀, M₁, …, M_{L-1}, 1]` has `L` weight layers; the
//! last one is a linear read-out, so `f(x) = h^L(x)`. Hidden and read-out
//! weights are drawn from `N(0, σ_w²/M_{l-1})`. Inputs are expected to have
//! unit norm and the first layer uses `N(0, σ_w²)`, so `h¹` has variance
//! `σ_w²‖x‖² + σ_b²` regardless of the input dimension. Biases are
//! `N(0, σ_b²)`.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! comes first in row-major order, followed by the bias vector.

use crate::activation::ActivationKind;
use crate::meanfield::InitHyper;
use crate::rng;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT: &str = "ntklab-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidWidths(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: usize,
        loss: f64,
        log: Box<TrainingLog>,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// A fully-connected network with a scalar linear read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    hyper: InitHyper,
    seed: u64,
}

/// Pre-activations `h^l` and activations `x^l` of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `x⁰ = x, x¹, …, x^{L-1}`.
    pub activations: Vec<DVector<f64>>,
    /// `h¹, …, h^L`.
    pub preactivations: Vec<DVector<f64>>,
}

/// Flat parameter gradient in the layout described in the module docs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub DVector<f64>);

impl GradientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Per-layer factors of the batched Jacobian: the gradient of `f(x_s)` with
/// respect to `W^l` is `deltas[l-1][:, s] · activations[l-1][:, s]ᵀ`, and with
/// respect to `b^l` it is `deltas[l-1][:, s]`.
#[derive(Debug, Clone)]
pub struct JacobianFactors {
    /// `X⁰, …, X^{L-1}`, each `M_l × S`.
    pub activations: Vec<DMatrix<f64>>,
    /// `Δ¹, …, Δ^L`, each `M_l × S`.
    pub deltas: Vec<DMatrix<f64>>,
}

/// `g ← g ⊙ φ′(h)` where `a = φ(h)`.
fn scale_by_derivative(act: ActivationKind, g: &mut DMatrix<f64>, h: &DMatrix<f64>, a: &DMatrix<f64>) {
    for ((g, &h), &a) in g.iter_mut().zip(h.iter()).zip(a.iter()) {
        *g *= act.derivative_from_output(h, a);
    }
}

fn check_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(NetError::InvalidWidths(format!(
            "need at least input and output widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(NetError::InvalidWidths(format!("zero width in {widths:?}")));
    }
    if *widths.last().unwrap() != 1 {
        return Err(NetError::InvalidWidths(format!(
            "the read-out must have width 1, got {widths:?}"
        )));
    }
    Ok(())
}

impl Mlp {
    /// Draws every parameter from its own random stream of `seed`: stream
    /// `2(l-1)` for `W^l` and `2(l-1)+1` for `b^l`.
    pub fn init(widths: &[usize], hyper: InitHyper, seed: u64) -> Result<Self> {
        check_widths(widths)?;
        let depth = widths.len() - 1;
        let mut weights = Vec::with_capacity(depth);
        let mut biases = Vec::with_capacity(depth);
        for l in 1..=depth {
            let (rows, cols) = (widths[l], widths[l - 1]);
            let fan_in = if l == 1 { 1.0 } else { cols as f64 };
            let std = (hyper.sigma_w_sq() / fan_in).sqrt();
            let mut buf = vec![0.0; rows * cols];
            rng::fill_normal(&mut rng::stream(seed, 2 * (l as u64 - 1)), std, &mut buf);
            weights.push(DMatrix::from_row_slice(rows, cols, &buf));
            let mut b = vec![0.0; rows];
            rng::fill_normal(
                &mut rng::stream(seed, 2 * (l as u64 - 1) + 1),
                hyper.sigma_b_sq().sqrt(),
                &mut b,
            );
            biases.push(DVector::from_vec(b));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            hyper,
            seed,
        })
    }

    /// Widths `[input_dim, width × (depth−1), 1]`.
    pub fn uniform_widths(input_dim: usize, width: usize, depth: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
        w.push(1);
        w
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn hyper(&self) -> &InitHyper {
        &self.hyper
    }

    pub fn activation(&self) -> ActivationKind {
        self.hyper.activation()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn num_params(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Flat parameter vector.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for i in 0..w.nrows() {
                out.extend(w.row(i).iter());
            }
            out.extend(b.iter());
        }
        out
    }

    /// Overwrites all parameters from a flat vector.
    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(NetError::Dimension {
                expected: self.num_params(),
                got: flat.len(),
            });
        }
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (rows, cols) = w.shape();
            for i in 0..rows {
                for j in 0..cols {
                    w[(i, j)] = flat[k];
                    k += 1;
                }
            }
            for v in b.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// Order-sensitive checksum of the parameters.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.params() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim() {
            return Err(NetError::Dimension {
                expected: self.input_dim(),
                got: len,
            });
        }
        Ok(())
    }

    /// Scalar output and the per-layer cache for one input.
    pub fn forward(&self, x: &DVector<f64>) -> Result<(f64, ForwardCache)> {
        self.check_input(x.len())?;
        let act = self.activation();
        let depth = self.depth();
        let mut activations = Vec::with_capacity(depth);
        let mut preactivations = Vec::with_capacity(depth);
        activations.push(x.clone());
        for l in 0..depth {
            let h = &self.weights[l] * &activations[l] + &self.biases[l];
            if l + 1 < depth {
                activations.push(h.map(|v| act.apply(v)));
            }
            preactivations.push(h);
        }
        let out = preactivations[depth - 1][0];
        Ok((
            out,
            ForwardCache {
                activations,
                preactivations,
            },
        ))
    }

    pub fn output(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.forward(x)?.0)
    }

    /// Exact gradient of `f(x)` with respect to every parameter.
    pub fn gradient(&self, x: &DVector<f64>) -> Result<GradientVector> {
        let (_, cache) = self.forward(x)?;
        let act = self.activation();
        let depth = self.depth();
        let mut deltas: Vec<DVector<f64>> = vec![DVector::zeros(0); depth];
        deltas[depth - 1] = DVector::from_element(1, 1.0);
        for l in (0..depth - 1).rev() {
            let back = self.weights[l + 1].tr_mul(&deltas[l + 1]);
            deltas[l] = back.zip_map(&cache.preactivations[l], |g, h| g * act.derivative(h));
        }
        let mut out = Vec::with_capacity(self.num_params());
        for l in 0..depth {
            let a = &cache.activations[l];
            for &d in deltas[l].iter() {
                out.extend(a.iter().map(|v| d * v));
            }
            out.extend(deltas[l].iter());
        }
        Ok(GradientVector(DVector::from_vec(out)))
    }

    /// Outputs for the columns of `inputs` (`M₀ × S`).
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DVector<f64>> {
        Ok(self.forward_batch_cached(inputs)?.0)
    }

    /// Batched forward pass returning outputs, `X⁰…X^{L-1}` and `H¹…H^L`.
    fn forward_batch_cached(
        &self,
        inputs: &DMatrix<f64>,
    ) -> Result<(DVector<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
        self.check_input(inputs.nrows())?;
        let act = self.activation();
        let depth = self.depth();
        let s = inputs.ncols();
        let mut activations = Vec::with_capacity(depth);
        let mut preactivations = Vec::with_capacity(depth);
        activations.push(inputs.clone());
        for l in 0..depth {
            let mut h = DMatrix::zeros(self.widths[l + 1], s);
            h.gemm(1.0, &self.weights[l], &activations[l], 0.0);
            for mut col in h.column_iter_mut() {
                col += &self.biases[l];
            }
            if l + 1 < depth {
                activations.push(h.map(|v| act.apply(v)));
            }
            preactivations.push(h);
        }
        let out = preactivations[depth - 1].row(0).transpose();
        Ok((out, activations, preactivations))
    }

    /// Batched Jacobian factors for the columns of `inputs`.
    pub fn jacobian_factors(&self, inputs: &DMatrix<f64>) -> Result<JacobianFactors> {
        let (_, activations, preactivations) = self.forward_batch_cached(inputs)?;
        let depth = self.depth();
        let s = inputs.ncols();
        let act = self.activation();
        let mut deltas = vec![DMatrix::zeros(0, 0); depth];
        deltas[depth - 1] = DMatrix::from_element(1, s, 1.0);
        for l in (0..depth - 1).rev() {
            let mut back = self.weights[l + 1].transpose() * &deltas[l + 1];
            scale_by_derivative(act, &mut back, &preactivations[l], &activations[l + 1]);
            deltas[l] = back;
        }
        Ok(JacobianFactors {
            activations,
            deltas,
        })
    }

    /// MSE loss `(1/S) Σ (f(x_s) − y_s)²` and its parameter gradient, laid
    /// out as per-layer `(∂W, ∂b)` pairs.
    pub fn loss_and_gradient(
        &self,
        inputs: &DMatrix<f64>,
        targets: &DVector<f64>,
    ) -> Result<(f64, Vec<(DMatrix<f64>, DVector<f64>)>)> {
        let s = inputs.ncols();
        if targets.len() != s {
            return Err(NetError::Dimension {
                expected: s,
                got: targets.len(),
            });
        }
        let (out, activations, preactivations) = self.forward_batch_cached(inputs)?;
        let resid = out - targets;
        let loss = resid.norm_squared() / s as f64;
        let act = self.activation();
        let depth = self.depth();
        let mut grads = Vec::with_capacity(depth);
        let mut g = DMatrix::from_row_slice(1, s, (resid * (2.0 / s as f64)).as_slice());
        for l in (0..depth).rev() {
            let mut dw = DMatrix::zeros(self.widths[l + 1], self.widths[l]);
            dw.gemm(1.0, &g, &activations[l].transpose(), 0.0);
            let db = g.column_sum();
            if l > 0 {
                let mut back = self.weights[l].transpose() * &g;
                scale_by_derivative(act, &mut back, &preactivations[l - 1], &activations[l]);
                g = back;
            }
            grads.push((dw, db));
        }
        grads.reverse();
        Ok((loss, grads))
    }

    /// MSE loss on a batch.
    pub fn loss(&self, inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<f64> {
        let out = self.forward_batch(inputs)?;
        if targets.len() != out.len() {
            return Err(NetError::Dimension {
                expected: out.len(),
                got: targets.len(),
            });
        }
        Ok((out - targets).norm_squared() / targets.len() as f64)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&Checkpoint::from(self))
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NetError::Checkpoint(e.to_string()))?;
        ck.into_mlp()
    }
}

/// Serialized network: architecture, provenance and the flat parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub widths: Vec<usize>,
    pub hyper: InitHyper,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl From<&Mlp> for Checkpoint {
    fn from(net: &Mlp) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            widths: net.widths.clone(),
            hyper: net.hyper,
            seed: net.seed,
            params: net.params(),
        }
    }
}

impl Checkpoint {
    pub fn into_mlp(self) -> Result<Mlp> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(NetError::Checkpoint(format!("unknown format '{}'", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let hyper = InitHyper::new(self.hyper.sigma_w_sq(), self.hyper.sigma_b_sq(), self.hyper.activation())
            .map_err(|e| NetError::Checkpoint(e.to_string()))?;
        check_widths(&self.widths)?;
        let mut net = Mlp {
            weights: self
                .widths
                .windows(2)
                .map(|w| DMatrix::zeros(w[1], w[0]))
                .collect(),
            biases: self.widths[1..].iter().map(|&m| DVector::zeros(m)).collect(),
            widths: self.widths,
            hyper,
            seed: self.seed,
        };
        net.set_params(&self.params)?;
        Ok(net)
    }
}

/// Full-batch gradient-descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub early_stop_delta: f64,
    pub early_stop_patience: usize,
    /// A loss above `divergence_factor` times the initial loss counts as
    /// divergence, as does any non-finite loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            max_steps: 100_000,
            early_stop_delta: 1e-7,
            early_stop_patience: 100,
            divergence_factor: 1e10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NetError::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(self.early_stop_delta.is_finite() && self.early_stop_delta >= 0.0) {
            return Err(NetError::InvalidConfig("early-stop delta must be non-negative".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(NetError::InvalidConfig("divergence factor must exceed 1".into()));
        }
        if self.early_stop_patience == 0 {
            return Err(NetError::InvalidConfig("early-stop patience must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxSteps,
    EarlyStop,
    ZeroLoss,
}

/// Loss before every update plus the loss after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// `losses[t]` is the loss after `t` updates.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub stop: Option<StopReason>,
}

impl TrainingLog {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("log holds the initial loss")
    }

    pub fn min_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Plain full-batch gradient descent on the MSE loss.
///
/// `on_step(t, net)` runs before the `t`-th update (so `t = 0` sees the
/// initial network) and once more after the last update, for every `t`
/// listed in `snapshot_steps`. Training stops after `max_steps` updates, when
/// the loss is exactly zero, or when the loss has not dropped by
/// `early_stop_delta` below its last improvement for `early_stop_patience`
/// consecutive steps. A non-finite loss, or one that grows past
/// `divergence_factor` times the initial loss, aborts with
/// [`NetError::Divergence`] carrying the log so far.
pub fn train_full_batch<F>(
    net: &mut Mlp,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    cfg: &TrainConfig,
    snapshot_steps: &[usize],
    mut on_step: F,
) -> Result<TrainingLog>
where
    F: FnMut(usize, &Mlp),
{
    cfg.validate()?;
    if inputs.ncols() == 0 || targets.len() != inputs.ncols() {
        return Err(NetError::Dimension {
            expected: inputs.ncols().max(1),
            got: targets.len(),
        });
    }
    let mut log = TrainingLog {
        losses: Vec::new(),
        steps: 0,
        stop: None,
    };
    let mut anchor = f64::INFINITY;
    let mut stalled = 0usize;
    let mut step = 0usize;
    loop {
        let (loss, grads) = net.loss_and_gradient(inputs, targets)?;
        let limit = log.losses.first().map_or(f64::INFINITY, |l0| l0 * cfg.divergence_factor);
        if !loss.is_finite() || (step > 0 && loss > limit) {
            log.losses.push(loss);
            log.steps = step;
            return Err(NetError::Divergence {
                step,
                loss,
                log: Box::new(log),
            });
        }
        log.losses.push(loss);
        if snapshot_steps.contains(&step) {
            on_step(step, net);
        }
        if loss == 0.0 {
            log.stop = Some(StopReason::ZeroLoss);
            break;
        }
        if loss < anchor - cfg.early_stop_delta {
            anchor = loss;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= cfg.early_stop_patience {
                log.stop = Some(StopReason::EarlyStop);
                break;
            }
        }
        if step == cfg.max_steps {
            log.stop = Some(StopReason::MaxSteps);
            break;
        }
        let lr = cfg.learning_rate;
        for (l, (dw, db)) in grads.into_iter().enumerate() {
            net.weights[l] -= dw * lr;
            net.biases[l].axpy(-lr, &db, 1.0);
        }
        step += 1;
    }
    log.steps = step;
    Ok(log)
}
