//! Mean-field signal propagation for wide fully-connected networks.
//!
//! Forward maps propagate the pre-activation variance `q`, the covariance
//! `q_sr` of two inputs and their activation counterparts `q̂`, `q̂_sr`;
//! backward maps propagate the summed squared backpropagated error `p` and its
//! two-input analogue `p_sr`. `χ₁ = σ_w² E[φ′(h)²]` is the per-layer gradient
//! multiplier whose value at the variance fixed point decides the phase.
//!
//! Layer indices follow the network: layers `1..=L`, with layer `L` the scalar
//! read-out, so `q^L` is the output variance and `p^L = p_sr^L = 1`.

pub mod integrals;

use crate::activation::ActivationKind;
use integrals::{
    activation_cross_moment, activation_second_moment, derivative_cross_moment,
    derivative_second_moment, IntegralMethod,
};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Half-width of the band `|χ₁ − 1|` classified as edge of chaos.
pub const EOC_TOLERANCE: f64 = 1e-6;
/// Correlations may exceed `±1` by this much before being treated as a bug.
pub const CORRELATION_SLACK: f64 = 1e-9;
pub const FIXED_POINT_MAX_ITER: usize = 10_000;
pub const FIXED_POINT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeanFieldError {
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("non-finite {quantity} at layer {}", fmt_layer(.layer))]
    Overflow {
        quantity: &'static str,
        layer: Option<usize>,
    },
    #[error("correlation {value} outside [-1, 1] at layer {}", fmt_layer(.layer))]
    CorrelationDomain { value: f64, layer: Option<usize> },
    #[error("variance fixed-point iteration did not converge after {iterations} steps (last q = {last})")]
    Divergence { last: f64, iterations: usize },
}

fn fmt_layer(layer: &Option<usize>) -> String {
    layer.map_or_else(|| "?".to_string(), |l| l.to_string())
}

impl MeanFieldError {
    fn at_layer(self, l: usize) -> Self {
        match self {
            MeanFieldError::Overflow { quantity, .. } => MeanFieldError::Overflow {
                quantity,
                layer: Some(l),
            },
            MeanFieldError::CorrelationDomain { value, .. } => MeanFieldError::CorrelationDomain {
                value,
                layer: Some(l),
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, MeanFieldError>;

/// Initialization hyperparameters `(σ_w², σ_b²)` together with the activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitHyper {
    sigma_w_sq: f64,
    sigma_b_sq: f64,
    activation: ActivationKind,
}

impl InitHyper {
    pub fn new(sigma_w_sq: f64, sigma_b_sq: f64, activation: ActivationKind) -> Result<Self> {
        if !(sigma_w_sq.is_finite() && sigma_w_sq > 0.0) {
            return Err(MeanFieldError::InvalidHyper(format!(
                "sigma_w^2 must be positive and finite, got {sigma_w_sq}"
            )));
        }
        if !(sigma_b_sq.is_finite() && sigma_b_sq >= 0.0) {
            return Err(MeanFieldError::InvalidHyper(format!(
                "sigma_b^2 must be non-negative and finite, got {sigma_b_sq}"
            )));
        }
        Ok(Self {
            sigma_w_sq,
            sigma_b_sq,
            activation,
        })
    }

    pub fn sigma_w_sq(&self) -> f64 {
        self.sigma_w_sq
    }

    pub fn sigma_b_sq(&self) -> f64 {
        self.sigma_b_sq
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    fn method(&self) -> IntegralMethod {
        IntegralMethod::preferred(self.activation)
    }
}

impl fmt::Display for InitHyper {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}(σw²={}, σb²={})",
            self.activation, self.sigma_w_sq, self.sigma_b_sq
        )
    }
}

fn finite(value: f64, quantity: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(MeanFieldError::Overflow {
            quantity,
            layer: None,
        })
    }
}

fn positive(value: f64, name: &str) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(MeanFieldError::InvalidInput(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Validates and clamps a correlation coefficient.
pub fn clamp_correlation(c: f64) -> Result<f64> {
    if c.is_nan() || c.abs() > 1.0 + CORRELATION_SLACK {
        return Err(MeanFieldError::CorrelationDomain {
            value: c,
            layer: None,
        });
    }
    Ok(c.clamp(-1.0, 1.0))
}

/// One step of the variance map.
///
/// Returns `(q, q̂)` where `q = σ_w² E[φ(√q_prev z)²] + σ_b²` and
/// `q̂ = E[φ(√q_prev z)²]` is the activation variance of the previous layer.
pub fn forward_variance_step(hyper: &InitHyper, q_prev: f64) -> Result<(f64, f64)> {
    positive(q_prev, "q_prev")?;
    let q_hat = finite(
        activation_second_moment(hyper.activation, q_prev, hyper.method()),
        "activation variance",
    )?;
    let q = finite(hyper.sigma_w_sq * q_hat + hyper.sigma_b_sq, "pre-activation variance")?;
    Ok((q, q_hat))
}

/// One step of the covariance map for two inputs with variances `q_s`, `q_r`.
///
/// Returns `(q_sr, q̂_sr)`.
pub fn forward_covariance_step(
    hyper: &InitHyper,
    q_s: f64,
    q_r: f64,
    q_sr_prev: f64,
) -> Result<(f64, f64)> {
    positive(q_s, "q_s")?;
    positive(q_r, "q_r")?;
    let c = clamp_correlation(q_sr_prev / (q_s * q_r).sqrt())?;
    let q_hat_sr = finite(
        activation_cross_moment(hyper.activation, q_s, q_r, c, hyper.method()),
        "activation covariance",
    )?;
    let q_sr = finite(
        hyper.sigma_w_sq * q_hat_sr + hyper.sigma_b_sq,
        "pre-activation covariance",
    )?;
    Ok((q_sr, q_hat_sr))
}

/// `χ₁ = σ_w² E[φ′(√q z)²]`.
pub fn chi1(hyper: &InitHyper, q: f64) -> Result<f64> {
    positive(q, "q")?;
    finite(
        hyper.sigma_w_sq * derivative_second_moment(hyper.activation, q, hyper.method()),
        "chi1",
    )
}

/// One step of the backpropagated-variance map.
///
/// Returns `(p, χ₁)` with `p = χ₁ · p_next · width_ratio`.
pub fn backward_step(hyper: &InitHyper, q: f64, p_next: f64, width_ratio: f64) -> Result<(f64, f64)> {
    positive(p_next, "p_next")?;
    positive(width_ratio, "width_ratio")?;
    let chi = chi1(hyper, q)?;
    let p = finite(chi * p_next * width_ratio, "backpropagated variance")?;
    Ok((p, chi))
}

/// One step of the backpropagated-covariance map at pre-activation correlation `c`.
pub fn backward_covariance_step(
    hyper: &InitHyper,
    q_s: f64,
    q_r: f64,
    c: f64,
    p_sr_next: f64,
    width_ratio: f64,
) -> Result<f64> {
    positive(q_s, "q_s")?;
    positive(q_r, "q_r")?;
    positive(width_ratio, "width_ratio")?;
    let c = clamp_correlation(c)?;
    let factor = derivative_cross_moment(hyper.activation, q_s, q_r, c, hyper.method());
    finite(
        hyper.sigma_w_sq * p_sr_next * width_ratio * factor,
        "backpropagated covariance",
    )
}

/// Initial condition of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TraceSeed {
    /// Inputs treated as layer-0 pre-activations with variance `q0` and
    /// covariance `q0_sr`; layer 1 applies the activation to them.
    PreActivation { q0: f64, q0_sr: f64 },
    /// Raw input vectors fed straight into layer 1, as in [`crate::finite_net::Mlp`]:
    /// `q̂⁰ = ‖x‖²` and `q̂⁰_sr = x_sᵀx_r` for two inputs of equal norm.
    Input { sq_norm: f64, dot: f64 },
}

/// Per-layer mean-field quantities for a pair of inputs of equal norm.
///
/// Index `i` of `q`, `q_sr`, `c`, `p`, `p_sr`, `chi1` is layer `i + 1`;
/// index `i` of `q_hat`, `q_hat_sr` is layer `i` (activations feeding layer `i + 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldTrace {
    pub hyper: InitHyper,
    pub seed: TraceSeed,
    pub q: Vec<f64>,
    pub q_hat: Vec<f64>,
    pub q_sr: Vec<f64>,
    pub q_hat_sr: Vec<f64>,
    pub c: Vec<f64>,
    pub p: Vec<f64>,
    pub p_sr: Vec<f64>,
    pub chi1: Vec<f64>,
}

impl MeanFieldTrace {
    pub fn depth(&self) -> usize {
        self.q.len()
    }

    /// Output variance `q^L`.
    pub fn output_variance(&self) -> f64 {
        *self.q.last().expect("trace has at least one layer")
    }

    /// Output covariance `q_sr^L`.
    pub fn output_covariance(&self) -> f64 {
        *self.q_sr.last().expect("trace has at least one layer")
    }
}

/// Full forward then backward sweep with the inputs taken as layer-0 pre-activations
/// `(q⁰, q⁰_sr)`, with terminal condition `p^L = p_sr^L = 1`.
pub fn run_trace(hyper: &InitHyper, depth: usize, q0: f64, q0_sr: f64) -> Result<MeanFieldTrace> {
    run_trace_seeded(hyper, depth, TraceSeed::PreActivation { q0, q0_sr })
}

/// Same as [`run_trace`] for an arbitrary [`TraceSeed`].
///
/// Widths do not enter: with fan-in-scaled weights the backward width ratio
/// is identically one, and layer widths only weight the kernel sums.
pub fn run_trace_seeded(hyper: &InitHyper, depth: usize, seed: TraceSeed) -> Result<MeanFieldTrace> {
    if depth == 0 {
        return Err(MeanFieldError::InvalidInput("depth must be at least 1".into()));
    }
    let mut q = Vec::with_capacity(depth);
    let mut q_hat = Vec::with_capacity(depth);
    let mut q_sr = Vec::with_capacity(depth);
    let mut q_hat_sr = Vec::with_capacity(depth);

    match seed {
        TraceSeed::PreActivation { q0, q0_sr } => {
            positive(q0, "q0")?;
            if q0_sr.abs() > q0 * (1.0 + CORRELATION_SLACK) {
                return Err(MeanFieldError::InvalidInput(format!(
                    "|q0_sr| = {} exceeds q0 = {q0}",
                    q0_sr.abs()
                )));
            }
            let (q1, qh0) = forward_variance_step(hyper, q0).map_err(|e| e.at_layer(1))?;
            let (qsr1, qhsr0) =
                forward_covariance_step(hyper, q0, q0, q0_sr).map_err(|e| e.at_layer(1))?;
            q.push(q1);
            q_hat.push(qh0);
            q_sr.push(qsr1);
            q_hat_sr.push(qhsr0);
        }
        TraceSeed::Input { sq_norm, dot } => {
            positive(sq_norm, "squared input norm")?;
            if dot.abs() > sq_norm * (1.0 + CORRELATION_SLACK) {
                return Err(MeanFieldError::InvalidInput(format!(
                    "|x_s·x_r| = {} exceeds ‖x‖² = {sq_norm}",
                    dot.abs()
                )));
            }
            q_hat.push(sq_norm);
            q_hat_sr.push(dot);
            q.push(finite(hyper.sigma_w_sq * sq_norm + hyper.sigma_b_sq, "pre-activation variance")
                .map_err(|e| e.at_layer(1))?);
            q_sr.push(finite(hyper.sigma_w_sq * dot + hyper.sigma_b_sq, "pre-activation covariance")
                .map_err(|e| e.at_layer(1))?);
        }
    }

    for l in 2..=depth {
        let q_prev = q[l - 2];
        let q_sr_prev = q_sr[l - 2];
        let (ql, qh) = forward_variance_step(hyper, q_prev).map_err(|e| e.at_layer(l))?;
        let (qsrl, qhsr) =
            forward_covariance_step(hyper, q_prev, q_prev, q_sr_prev).map_err(|e| e.at_layer(l))?;
        q.push(ql);
        q_hat.push(qh);
        q_sr.push(qsrl);
        q_hat_sr.push(qhsr);
    }

    let c = q
        .iter()
        .zip(&q_sr)
        .enumerate()
        .map(|(i, (&ql, &qsrl))| clamp_correlation(qsrl / ql).map_err(|e| e.at_layer(i + 1)))
        .collect::<Result<Vec<_>>>()?;

    let chi = q
        .iter()
        .enumerate()
        .map(|(i, &ql)| chi1(hyper, ql).map_err(|e| e.at_layer(i + 1)))
        .collect::<Result<Vec<_>>>()?;

    let mut p = vec![0.0; depth];
    let mut p_sr = vec![0.0; depth];
    p[depth - 1] = 1.0;
    p_sr[depth - 1] = 1.0;
    for i in (0..depth - 1).rev() {
        let l = i + 1;
        let (pl, _) = backward_step(hyper, q[i], p[i + 1], 1.0).map_err(|e| e.at_layer(l))?;
        p[i] = pl;
        p_sr[i] = backward_covariance_step(hyper, q[i], q[i], c[i], p_sr[i + 1], 1.0)
            .map_err(|e| e.at_layer(l))?;
    }

    Ok(MeanFieldTrace {
        hyper: *hyper,
        seed,
        q,
        q_hat,
        q_sr,
        q_hat_sr,
        c,
        p,
        p_sr,
        chi1: chi,
    })
}

/// Signal-propagation phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Ordered,
    Chaotic,
    #[serde(rename = "EOC")]
    EdgeOfChaos,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Ordered => "ordered",
            Phase::Chaotic => "chaotic",
            Phase::EdgeOfChaos => "EOC",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseLabel {
    pub phase: Phase,
    pub chi1_fixed_point: f64,
    /// `None` when `χ₁` does not depend on `q` (ReLU), so no fixed point is needed.
    pub q_fixed_point: Option<f64>,
}

impl PhaseLabel {
    fn from_chi1(chi1_fixed_point: f64, q_fixed_point: Option<f64>) -> Self {
        let phase = if (chi1_fixed_point - 1.0).abs() < EOC_TOLERANCE {
            Phase::EdgeOfChaos
        } else if chi1_fixed_point < 1.0 {
            Phase::Ordered
        } else {
            Phase::Chaotic
        };
        Self {
            phase,
            chi1_fixed_point,
            q_fixed_point,
        }
    }
}

/// Fixed point `q*` of the variance map, iterated from `q = 1`.
pub fn variance_fixed_point(hyper: &InitHyper) -> Result<f64> {
    let mut q = 1.0;
    for _ in 0..FIXED_POINT_MAX_ITER {
        let (next, _) = forward_variance_step(hyper, q).map_err(|e| match e {
            MeanFieldError::Overflow { .. } => MeanFieldError::Divergence {
                last: q,
                iterations: FIXED_POINT_MAX_ITER,
            },
            other => other,
        })?;
        if (next - q).abs() < FIXED_POINT_TOL * q.max(1.0) {
            return Ok(next);
        }
        q = next;
    }
    Err(MeanFieldError::Divergence {
        last: q,
        iterations: FIXED_POINT_MAX_ITER,
    })
}

/// Classifies `hyper` by `χ₁` at the variance fixed point.
pub fn classify_phase(hyper: &InitHyper) -> Result<PhaseLabel> {
    if hyper.activation == ActivationKind::Relu {
        // χ₁ = σ_w²/2 for every q, and q* need not exist (σ_w² ≥ 2)
        return Ok(PhaseLabel::from_chi1(hyper.sigma_w_sq / 2.0, None));
    }
    if hyper.sigma_b_sq == 0.0 {
        // q = 0 is a fixed point; it attracts whenever its own χ₁ is at most 1,
        // and the iteration would only creep towards it algebraically
        let slope = hyper.activation.derivative(0.0);
        let chi_zero = hyper.sigma_w_sq * slope * slope;
        if chi_zero <= 1.0 {
            return Ok(PhaseLabel::from_chi1(chi_zero, Some(0.0)));
        }
    }
    let q_star = variance_fixed_point(hyper)?;
    Ok(PhaseLabel::from_chi1(chi1(hyper, q_star)?, Some(q_star)))
}

/// Edge-of-chaos `σ_w²` at fixed `σ_b²`, by bisection on `χ₁(q*(σ_w²)) − 1`
/// over `[lo, hi]`.
pub fn locate_eoc(
    activation: ActivationKind,
    sigma_b_sq: f64,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let excess = |w: f64| -> Result<f64> {
        Ok(classify_phase(&InitHyper::new(w, sigma_b_sq, activation)?)?.chi1_fixed_point - 1.0)
    };
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (excess(a)?, excess(b)?);
    if fa.signum() == fb.signum() {
        return Err(MeanFieldError::InvalidInput(format!(
            "chi1 - 1 does not change sign on [{lo}, {hi}]"
        )));
    }
    let increasing = fb > fa;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        let fm = excess(mid)?;
        if (fm > 0.0) == increasing {
            b = mid;
        } else {
            a = mid;
        }
        if b - a < 1e-13 * b.abs().max(1.0) {
            break;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests;
