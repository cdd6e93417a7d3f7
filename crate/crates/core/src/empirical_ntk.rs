//! Empirical NTK of finite networks: Gram matrices of parameter gradients,
//! the variance ratio of `Θ⁰(x,x)` over initializations, and the relative
//! drift of the kernel during training.

use crate::finite_net::{train_full_batch, Mlp, NetError, StopReason, TrainConfig};
use crate::linalg::{asymmetry, min_eigenvalue, psd_floor};
use crate::meanfield::InitHyper;
use crate::rng;
use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest tolerated asymmetry of a kernel matrix.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Fraction of seeds allowed to overflow before the ratio is abandoned.
pub const MAX_FAILED_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EmpiricalError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("kernel is not a Gram matrix: {0}")]
    NotGram(String),
    #[error("{failed} of {total} initializations overflowed")]
    Overflow { failed: usize, total: usize },
    #[error("training diverged at step {step} (loss {loss})")]
    Divergence {
        step: usize,
        loss: f64,
        partial: Box<DriftStat>,
    },
}

pub type Result<T> = std::result::Result<T, EmpiricalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Empirical { seed: u64, step: usize },
    Theoretical,
    Nngp,
}

/// A symmetric `S × S` kernel on a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    pub matrix: DMatrix<f64>,
    pub provenance: Provenance,
}

impl KernelMatrix {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    /// Symmetry to `1e-12` (relative to the largest entry) and PSD to
    /// `-1e-8·tr/S`.
    pub fn check_gram(&self) -> Result<()> {
        let scale = self.matrix.amax().max(f64::MIN_POSITIVE);
        let asym = asymmetry(&self.matrix);
        if asym > SYMMETRY_TOLERANCE * scale {
            return Err(EmpiricalError::NotGram(format!("asymmetry {asym:e}")));
        }
        let lo = min_eigenvalue(&self.matrix);
        if lo < psd_floor(&self.matrix) {
            return Err(EmpiricalError::NotGram(format!("eigenvalue {lo:e}")));
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        self.matrix.norm()
    }
}

/// How the Gram matrix is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelMode {
    /// Per-layer factors `Σ_l (Δ_lᵀΔ_l) ⊙ (X_{l-1}ᵀX_{l-1} + 1)`; memory
    /// `O(Σ M_l · S)`, never materializes a gradient vector.
    #[default]
    Factored,
    /// All `S` flat gradient vectors held at once (`S × P` memory).
    Explicit,
}

/// Empirical NTK `Θ(x_i, x_j) = ∇f(x_i)ᵀ∇f(x_j)` on the columns of `inputs`.
pub fn empirical_kernel(net: &Mlp, inputs: &DMatrix<f64>) -> Result<KernelMatrix> {
    empirical_kernel_with(net, inputs, KernelMode::Factored, 0)
}

pub fn empirical_kernel_with(
    net: &Mlp,
    inputs: &DMatrix<f64>,
    mode: KernelMode,
    step: usize,
) -> Result<KernelMatrix> {
    let s = inputs.ncols();
    let matrix = match mode {
        KernelMode::Factored => {
            let jac = net.jacobian_factors(inputs)?;
            let mut theta = DMatrix::zeros(s, s);
            for (a, d) in jac.activations.iter().zip(&jac.deltas) {
                let mut dd = d.transpose() * d;
                let aa = (a.transpose() * a).add_scalar(1.0);
                dd.component_mul_assign(&aa);
                theta += dd;
            }
            theta
        }
        KernelMode::Explicit => {
            let mut grads = DMatrix::zeros(net.num_params(), s);
            for j in 0..s {
                let g = net.gradient(&inputs.column(j).into_owned())?;
                grads.set_column(j, &g.0);
            }
            grads.transpose() * &grads
        }
    };
    let sym = (&matrix + matrix.transpose()) * 0.5;
    Ok(KernelMatrix {
        matrix: sym,
        provenance: Provenance::Empirical {
            seed: net.seed(),
            step,
        },
    })
}

/// `Θ(x, x) = ‖∇f(x)‖²` from a single backward pass.
pub fn diagonal_ntk(net: &Mlp, x: &DVector<f64>) -> Result<f64> {
    let inputs = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let jac = net.jacobian_factors(&inputs)?;
    Ok(jac
        .activations
        .iter()
        .zip(&jac.deltas)
        .map(|(a, d)| d.norm_squared() * (a.norm_squared() + 1.0))
        .sum())
}

/// Unit-norm probe input determined by `seed`.
pub fn default_probe(dim: usize, seed: u64) -> DVector<f64> {
    let v = DVector::from_vec(rng::normals(&mut rng::stream(rng::derive_seed(seed, &[0x70_72_6f_62]), 0), dim));
    let n = v.norm();
    v / n
}

/// `E[Θ⁰(x,x)²] / E²[Θ⁰(x,x)]` over random initializations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatioStat {
    pub ratio: f64,
    /// Seeds that entered the estimate.
    pub n_seeds: usize,
    /// Seeds excluded because `Θ⁰(x,x)` overflowed.
    pub n_failed: usize,
    pub mean: f64,
    pub second_moment: f64,
    /// Jackknife standard error of `ratio`.
    pub standard_error: f64,
}

impl VarianceRatioStat {
    /// Ratio and jackknife error from per-seed values `Θ⁰(x,x)`.
    pub fn from_samples(values: &[f64], n_failed: usize) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(EmpiricalError::InvalidInput(format!(
                "need at least 2 samples, got {n}"
            )));
        }
        let s1 = neumaier_sum(values.iter().copied());
        let s2 = neumaier_sum(values.iter().map(|v| v * v));
        let nf = n as f64;
        let mean = s1 / nf;
        let second_moment = s2 / nf;
        let ratio = second_moment / (mean * mean);
        let m1 = nf - 1.0;
        let loo: Vec<f64> = values
            .iter()
            .map(|&t| {
                let mu = (s1 - t) / m1;
                ((s2 - t * t) / m1) / (mu * mu)
            })
            .collect();
        let loo_mean = loo.iter().sum::<f64>() / nf;
        let standard_error = (m1 / nf * loo.iter().map(|r| (r - loo_mean).powi(2)).sum::<f64>()).sqrt();
        if ratio < 1.0 - 3.0 * standard_error {
            warn!("variance ratio {ratio} below 1 by more than 3 standard errors");
        }
        Ok(Self {
            ratio,
            n_seeds: n,
            n_failed,
            mean,
            second_moment,
            standard_error,
        })
    }
}

fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Seed of replicate `index` of an experiment seeded with `seed`.
pub fn replicate_seed(seed: u64, index: usize) -> u64 {
    rng::derive_seed(seed, &[index as u64])
}

/// Variance ratio of `Θ⁰(x,x)` over `n_seeds` initializations of `widths`.
///
/// Replicate `i` uses [`replicate_seed`]`(seed, i)`. Seeds whose kernel is not
/// finite are dropped when they are at most 1% of the total; otherwise the
/// call fails with [`EmpiricalError::Overflow`].
pub fn init_variance_ratio(
    widths: &[usize],
    hyper: InitHyper,
    x: &DVector<f64>,
    n_seeds: usize,
    seed: u64,
) -> Result<VarianceRatioStat> {
    if n_seeds < 2 {
        return Err(EmpiricalError::InvalidInput(format!(
            "need at least 2 seeds, got {n_seeds}"
        )));
    }
    let values = (0..n_seeds)
        .into_par_iter()
        .map(|i| {
            let net = Mlp::init(widths, hyper, replicate_seed(seed, i))?;
            diagonal_ntk(&net, x)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (finite, failed): (Vec<f64>, Vec<f64>) = values.into_iter().partition(|v| v.is_finite());
    let failed = failed.len();
    if failed > 0 {
        if failed as f64 > MAX_FAILED_FRACTION * n_seeds as f64 {
            return Err(EmpiricalError::Overflow {
                failed,
                total: n_seeds,
            });
        }
        warn!("{failed} of {n_seeds} initializations overflowed and were excluded");
    }
    VarianceRatioStat::from_samples(&finite, failed)
}

/// Relative change `‖Θᵗ − Θ⁰‖_F / ‖Θ⁰‖_F` recorded during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftStat {
    pub steps: Vec<usize>,
    pub rel_change: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Gradient-descent updates actually performed.
    pub steps_run: usize,
    pub stop: Option<StopReason>,
}

impl DriftStat {
    pub fn final_drift(&self) -> f64 {
        *self.rel_change.last().unwrap_or(&0.0)
    }
}

/// Trains `net` on `(inputs, targets)` and records the kernel drift at every
/// requested step that is reached, and at the final step.
///
/// On divergence the partial record ends with the drift at the diverging
/// parameters, or `+∞` when that kernel is no longer finite.
pub fn training_drift(
    net: &mut Mlp,
    inputs: &DMatrix<f64>,
    targets: &DVector<f64>,
    cfg: &TrainConfig,
    snapshot_steps: &[usize],
) -> Result<DriftStat> {
    if inputs.ncols() == 0 {
        return Err(EmpiricalError::InvalidInput("empty dataset".into()));
    }
    if snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EmpiricalError::InvalidInput(
            "snapshot steps must be strictly increasing".into(),
        ));
    }
    let theta0 = empirical_kernel(net, inputs)?;
    let norm0 = theta0.frobenius();
    let drift_of = |n: &Mlp| -> Result<f64> {
        let theta = empirical_kernel(n, inputs)?;
        Ok((&theta.matrix - &theta0.matrix).norm() / norm0)
    };
    let mut steps = vec![0usize];
    let mut rel_change = vec![0.0];
    let mut callback_error = None;
    let wanted: Vec<usize> = snapshot_steps.iter().copied().filter(|&t| t > 0).collect();
    let outcome = train_full_batch(net, inputs, targets, cfg, &wanted, |t, n| match drift_of(n) {
        Ok(d) => {
            steps.push(t);
            rel_change.push(d);
        }
        Err(e) => {
            callback_error.get_or_insert(e);
        }
    });
    if let Some(e) = callback_error {
        return Err(e);
    }
    match outcome {
        Ok(log) => {
            if *steps.last().unwrap() != log.steps {
                steps.push(log.steps);
                rel_change.push(drift_of(net)?);
            }
            Ok(DriftStat {
                steps,
                rel_change,
                initial_loss: log.initial_loss(),
                final_loss: log.final_loss(),
                steps_run: log.steps,
                stop: log.stop,
            })
        }
        Err(NetError::Divergence { step, loss, log }) => {
            // An overflowing kernel has moved without bound.
            if *steps.last().unwrap() != step {
                steps.push(step);
                rel_change.push(match drift_of(net) {
                    Ok(d) if d.is_finite() => d,
                    _ => f64::INFINITY,
                });
            }
            Err(EmpiricalError::Divergence {
            step,
            loss,
            partial: Box::new(DriftStat {
                steps,
                rel_change,
                initial_loss: log.initial_loss(),
                final_loss: loss,
                steps_run: step,
                stop: None,
            }),
        })
        }
        Err(e) => Err(e.into()),
    }
}

/// Default snapshot grid `{0, 10, 10², 10³, 10⁴}`; the final step is always
/// added by [`training_drift`].
pub fn default_snapshot_steps() -> Vec<usize> {
    vec![0, 10, 100, 1_000, 10_000]
}

#[cfg(test)]
mod tests;
