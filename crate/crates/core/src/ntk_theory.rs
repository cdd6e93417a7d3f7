//! Deterministic infinite-width NTK, NNGP matrix, trained-output formula and
//! the data-independent output-variance predictor.
//!
//! Kernels are assembled from mean-field traces of input pairs. Widths enter
//! through fractions `α_l = M_l / M`; the NTK scale is `αM` with
//! `α = Σ_{l=1}^{L-1} α_l α_{l-1}`.

use crate::linalg::{psd_factor, JitteredCholesky, LinalgError};
use crate::meanfield::{run_trace_seeded, InitHyper, MeanFieldError, MeanFieldTrace, TraceSeed};
use crate::rng;
use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default input covariance used for the data-independent limits.
pub const DEFAULT_REFERENCE_COVARIANCE: f64 = 0.5;
/// Relative spread of squared input norms tolerated when building kernels.
pub const NORM_TOLERANCE: f64 = 1e-9;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NtkError {
    #[error(transparent)]
    MeanField(#[from] MeanFieldError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, NtkError>;

/// How inputs enter the first layer of the mean-field trace.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputConvention {
    /// Inputs act as layer-0 pre-activations (`q⁰ = ‖x‖²`, `q⁰_sr = x_sᵀx_r`).
    PreActivation,
    /// Inputs are fed to layer 1 unchanged, matching [`crate::finite_net::Mlp`].
    #[default]
    RawInput,
}

/// Diagonal and off-diagonal NTK scales for one input pair, plus the
/// data-independent values they are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaPair {
    pub kappa1: f64,
    pub kappa2: f64,
    pub kappa1_bar: f64,
    pub kappa2_bar: f64,
}

impl KappaPair {
    /// Replaces the data-independent values by those of `reference`.
    pub fn with_reference(self, reference: &KappaPair) -> Self {
        Self {
            kappa1_bar: reference.kappa1,
            kappa2_bar: reference.kappa2,
            ..self
        }
    }
}

/// `α = Σ_{l=1}^{L-1} α_l α_{l-1}` for fractions `α_0..α_L`.
///
/// A single-layer network has an empty sum; its scale is taken as `α_0`.
pub fn alpha(fractions: &[f64]) -> Result<f64> {
    if fractions.len() < 2 {
        return Err(NtkError::LengthMismatch(format!(
            "need fractions for layers 0..L, got {}",
            fractions.len()
        )));
    }
    if fractions.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(NtkError::InvalidInput("width fractions must be positive".into()));
    }
    let depth = fractions.len() - 1;
    if depth == 1 {
        return Ok(fractions[0]);
    }
    Ok((1..depth).map(|l| fractions[l] * fractions[l - 1]).sum())
}

/// `κ₁ = Σ_l (α_{l-1}/α) q̂^{l-1} p^l` and `κ₂` from the covariance channel.
///
/// `width_fractions` holds `α_0..α_L`. The returned bars equal the values
/// themselves; use [`KappaPair::with_reference`] to attach reference limits.
pub fn compute_kappas(trace: &MeanFieldTrace, width_fractions: &[f64]) -> Result<KappaPair> {
    let depth = trace.depth();
    if width_fractions.len() != depth + 1 {
        return Err(NtkError::LengthMismatch(format!(
            "trace has {depth} layers but {} width fractions were given (expected {})",
            width_fractions.len(),
            depth + 1
        )));
    }
    let a = alpha(width_fractions)?;
    let mut k1 = 0.0;
    let mut k2 = 0.0;
    for l in 0..depth {
        let w = width_fractions[l] / a;
        k1 += w * trace.q_hat[l] * trace.p[l];
        k2 += w * trace.q_hat_sr[l] * trace.p_sr[l];
    }
    Ok(KappaPair {
        kappa1: k1,
        kappa2: k2,
        kappa1_bar: k1,
        kappa2_bar: k2,
    })
}

/// Bias-parameter contributions `(Σ_l p^l, Σ_l p_sr^l)`.
pub fn bias_terms(trace: &MeanFieldTrace) -> (f64, f64) {
    (trace.p.iter().sum(), trace.p_sr.iter().sum())
}

/// Data-independent limits from a trace at the reference covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLimits {
    pub kappas: KappaPair,
    pub q_bar_l: f64,
    pub q_bar_sr_l: f64,
    pub reference_covariance: f64,
}

/// A network architecture seen through its infinite-width kernels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelModel {
    pub hyper: InitHyper,
    pub depth: usize,
    /// Base width `M`.
    pub width: f64,
    /// `α_0..α_L`.
    pub fractions: Vec<f64>,
    pub convention: InputConvention,
}

impl KernelModel {
    /// Equal fractions `α_l = 1`: every layer, the input included, has width `M`.
    pub fn uniform(
        hyper: InitHyper,
        depth: usize,
        width: f64,
        convention: InputConvention,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(NtkError::InvalidInput("depth must be at least 1".into()));
        }
        if !(width.is_finite() && width > 0.0) {
            return Err(NtkError::InvalidInput(format!("width must be positive, got {width}")));
        }
        Ok(Self {
            hyper,
            depth,
            width,
            fractions: vec![1.0; depth + 1],
            convention,
        })
    }

    /// Kernels of a finite network with layer widths `[M₀, M₁, …, M_{L-1}, 1]`.
    ///
    /// The first layer sees the raw input with unit-variance weights, so its
    /// effective input width is 1 whatever `M₀` is.
    pub fn for_network(hyper: InitHyper, widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(NtkError::InvalidInput(format!("invalid widths {widths:?}")));
        }
        let depth = widths.len() - 1;
        let m = if depth >= 2 { widths[1] as f64 } else { 1.0 };
        let mut fractions: Vec<f64> = widths.iter().map(|&w| w as f64 / m).collect();
        fractions[0] = 1.0 / m;
        Ok(Self {
            hyper,
            depth,
            width: m,
            fractions,
            convention: InputConvention::RawInput,
        })
    }

    pub fn alpha(&self) -> Result<f64> {
        alpha(&self.fractions)
    }

    /// NTK prefactor `αM`.
    pub fn scale(&self) -> Result<f64> {
        Ok(self.alpha()? * self.width)
    }

    pub fn trace(&self, sq_norm: f64, dot: f64) -> Result<MeanFieldTrace> {
        let seed = match self.convention {
            InputConvention::PreActivation => TraceSeed::PreActivation {
                q0: sq_norm,
                q0_sr: dot,
            },
            InputConvention::RawInput => TraceSeed::Input { sq_norm, dot },
        };
        Ok(run_trace_seeded(&self.hyper, self.depth, seed)?)
    }

    pub fn kappas(&self, sq_norm: f64, dot: f64) -> Result<KappaPair> {
        let k = compute_kappas(&self.trace(sq_norm, dot)?, &self.fractions)?;
        if dot >= 0.0 && k.kappa2 > k.kappa1 * (1.0 + 1e-12) {
            warn!("kappa2 = {} exceeds kappa1 = {} at input covariance {dot}", k.kappa2, k.kappa1);
        }
        Ok(k)
    }

    pub fn reference_limits(&self, reference_covariance: f64) -> Result<ReferenceLimits> {
        let trace = self.trace(1.0, reference_covariance)?;
        Ok(ReferenceLimits {
            kappas: compute_kappas(&trace, &self.fractions)?,
            q_bar_l: trace.output_variance(),
            q_bar_sr_l: trace.output_covariance(),
            reference_covariance,
        })
    }

    /// Pairwise traces over a Gram matrix of equal-norm inputs, in row-major
    /// upper-triangular order.
    fn pair_traces(&self, gram: &DMatrix<f64>) -> Result<(f64, Vec<((usize, usize), MeanFieldTrace)>)> {
        let sq_norm = common_norm(gram)?;
        let s = gram.nrows();
        let pairs: Vec<(usize, usize)> = (0..s).flat_map(|i| (i..s).map(move |j| (i, j))).collect();
        let traces = pairs
            .par_iter()
            .map(|&(i, j)| {
                let dot = if i == j {
                    sq_norm
                } else {
                    gram[(i, j)].clamp(-sq_norm, sq_norm)
                };
                self.trace(sq_norm, dot).map(|t| ((i, j), t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((sq_norm, traces))
    }

    /// `Λ` (κ₁ on the diagonal, κ₂ off it) and the exact bias matrix `Σ_l p_sr^l`.
    pub fn lambda_and_bias(&self, gram: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (_, traces) = self.pair_traces(gram)?;
        let s = gram.nrows();
        let mut lambda = DMatrix::zeros(s, s);
        let mut bias = DMatrix::zeros(s, s);
        for ((i, j), t) in traces {
            let k = compute_kappas(&t, &self.fractions)?;
            let (b_diag, b_off) = bias_terms(&t);
            let (kv, bv) = if i == j { (k.kappa1, b_diag) } else { (k.kappa2, b_off) };
            lambda[(i, j)] = kv;
            lambda[(j, i)] = kv;
            bias[(i, j)] = bv;
            bias[(j, i)] = bv;
        }
        Ok((lambda, bias))
    }

    /// Deterministic NTK on the inputs with Gram matrix `gram`.
    pub fn theta_star(&self, gram: &DMatrix<f64>, reference_covariance: f64) -> Result<ThetaStar> {
        let (lambda, bias) = self.lambda_and_bias(gram)?;
        let reference = self.reference_limits(reference_covariance)?.kappas;
        build_theta_star(&lambda, Some(&bias), self.width, self.alpha()?, &reference)
    }

    /// NNGP matrix `K(X)` with `q^L` on the diagonal and `q_sr^L` off it.
    pub fn nngp_matrix(&self, gram: &DMatrix<f64>) -> Result<NngpMatrix> {
        let (_, traces) = self.pair_traces(gram)?;
        let s = gram.nrows();
        let mut k = DMatrix::zeros(s, s);
        for ((i, j), t) in traces {
            let v = if i == j {
                t.output_variance()
            } else {
                t.output_covariance()
            };
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        Ok(NngpMatrix { matrix: k })
    }
}

fn common_norm(gram: &DMatrix<f64>) -> Result<f64> {
    let s = gram.nrows();
    if s == 0 || gram.ncols() != s {
        return Err(NtkError::InvalidInput(format!(
            "Gram matrix must be square and non-empty, got {}x{}",
            s,
            gram.ncols()
        )));
    }
    let diag = gram.diagonal();
    let mean = diag.mean();
    if !(mean.is_finite() && mean > 0.0) || diag.iter().any(|d| (d - mean).abs() > NORM_TOLERANCE * mean) {
        return Err(NtkError::InvalidInput(
            "theoretical kernels need inputs of equal, positive norm".into(),
        ));
    }
    Ok(mean)
}

/// Parameters of the data-independent part `Θ̄* = αM((κ̄₁−κ̄₂)I + κ̄₂𝟙𝟙ᵀ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaBar {
    pub kappa1_bar: f64,
    pub kappa2_bar: f64,
    pub size: usize,
    pub scale: f64,
}

impl ThetaBar {
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.size;
        DMatrix::from_fn(n, n, |i, j| {
            self.scale * (self.kappa2_bar + if i == j { self.kappa1_bar - self.kappa2_bar } else { 0.0 })
        })
    }

    /// Closed-form inverse by the Woodbury identity; `None` when `κ̄₁ = κ̄₂`
    /// or `κ̄₁ + (S−1)κ̄₂ = 0`.
    pub fn inverse(&self) -> Option<DMatrix<f64>> {
        let n = self.size;
        let gap = self.kappa1_bar - self.kappa2_bar;
        let denom = self.kappa1_bar + (n as f64 - 1.0) * self.kappa2_bar;
        if gap == 0.0 || denom == 0.0 || self.scale == 0.0 {
            return None;
        }
        let lead = 1.0 / (self.scale * gap);
        let off = self.kappa2_bar / denom;
        Some(DMatrix::from_fn(n, n, |i, j| {
            lead * (if i == j { 1.0 } else { 0.0 } - off)
        }))
    }

    /// Ratio of the largest to the smallest eigenvalue.
    pub fn condition_number(&self) -> f64 {
        let gap = self.kappa1_bar - self.kappa2_bar;
        let top = self.kappa1_bar + (self.size as f64 - 1.0) * self.kappa2_bar;
        let (hi, lo) = if top.abs() >= gap.abs() {
            (top.abs(), gap.abs())
        } else {
            (gap.abs(), top.abs())
        };
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Deterministic NTK matrix with its mean/perturbation split `Θ* = Θ̄*(I + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaStar {
    pub matrix: DMatrix<f64>,
    /// `αM`.
    pub scale: f64,
    pub alpha: f64,
    pub mean_part: ThetaBar,
    /// `ε = Θ̄*⁻¹Θ* − I`; `None` when `Θ̄*` is singular.
    pub perturbation: Option<DMatrix<f64>>,
}

/// Assembles `Θ* = αM Λ + B` from `Λ` (κ₁ diagonal, κ₂ off-diagonal) and an
/// optional bias matrix `B`, and splits it around `Θ̄*` built from `reference`.
pub fn build_theta_star(
    lambda: &DMatrix<f64>,
    bias: Option<&DMatrix<f64>>,
    width: f64,
    alpha: f64,
    reference: &KappaPair,
) -> Result<ThetaStar> {
    let s = lambda.nrows();
    if s == 0 || lambda.ncols() != s {
        return Err(NtkError::InvalidInput("Λ must be square and non-empty".into()));
    }
    if let Some(b) = bias {
        if b.shape() != lambda.shape() {
            return Err(NtkError::LengthMismatch("bias matrix shape differs from Λ".into()));
        }
    }
    if !(width > 0.0 && alpha > 0.0) {
        return Err(NtkError::InvalidInput("width and alpha must be positive".into()));
    }
    let scale = alpha * width;
    let mut matrix = lambda * scale;
    if let Some(b) = bias {
        matrix += b;
    }
    let matrix = (&matrix + matrix.transpose()) * 0.5;
    let mean_part = ThetaBar {
        kappa1_bar: reference.kappa1_bar,
        kappa2_bar: reference.kappa2_bar,
        size: s,
        scale,
    };
    let perturbation = mean_part
        .inverse()
        .map(|inv| inv * &matrix - DMatrix::identity(s, s));
    Ok(ThetaStar {
        matrix,
        scale,
        alpha,
        mean_part,
        perturbation,
    })
}

/// `κ̄₁/κ̄₂` and the condition number of the matching `Θ̄*`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionRatio {
    pub ratio: f64,
    /// Set when `κ̄₂ = 0`; `ratio` is then `+∞`.
    pub zero_denominator: bool,
    pub theta_bar_condition: f64,
}

/// `κ̄₁/κ̄₂`: as it approaches 1, `Θ̄*` approaches the singular `𝟙𝟙ᵀ` shape.
pub fn condition_ratio(kappas: &KappaPair, s: usize) -> ConditionRatio {
    let bar = ThetaBar {
        kappa1_bar: kappas.kappa1_bar,
        kappa2_bar: kappas.kappa2_bar,
        size: s.max(1),
        scale: 1.0,
    };
    if kappas.kappa2_bar == 0.0 {
        return ConditionRatio {
            ratio: f64::INFINITY,
            zero_denominator: true,
            theta_bar_condition: bar.condition_number(),
        };
    }
    let mut ratio = kappas.kappa1_bar / kappas.kappa2_bar;
    // κ̄₁ = κ̄₂ up to rounding at unit reference covariance
    if ratio < 1.0 && ratio > 1.0 - 1e-12 {
        ratio = 1.0;
    }
    ConditionRatio {
        ratio,
        zero_denominator: false,
        theta_bar_condition: bar.condition_number(),
    }
}

/// NNGP covariance matrix of the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct NngpMatrix {
    pub matrix: DMatrix<f64>,
}

/// Reusable factorization for `f(x) = Θ(x,X)Θ(X)⁻¹(Y − f⁰(X)) + f⁰(x)`.
#[derive(Debug, Clone)]
pub struct TrainedOutput {
    chol: JitteredCholesky,
    size: usize,
}

impl TrainedOutput {
    pub fn new(theta: &DMatrix<f64>) -> Result<Self> {
        Ok(Self {
            chol: JitteredCholesky::new(theta)?,
            size: theta.nrows(),
        })
    }

    pub fn jitter(&self) -> f64 {
        self.chol.jitter()
    }

    /// `Θ(X)⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        if v.len() != self.size {
            return Err(NtkError::LengthMismatch(format!(
                "expected length {}, got {}",
                self.size,
                v.len()
            )));
        }
        Ok(self.chol.solve(v))
    }

    pub fn evaluate(
        &self,
        theta_x: &DVector<f64>,
        f0_x: f64,
        f0_train: &DVector<f64>,
        y: &DVector<f64>,
    ) -> Result<f64> {
        if theta_x.len() != self.size || f0_train.len() != self.size || y.len() != self.size {
            return Err(NtkError::LengthMismatch(format!(
                "kernel has {} rows; got theta_x {}, f0 {}, y {}",
                self.size,
                theta_x.len(),
                f0_train.len(),
                y.len()
            )));
        }
        let z = self.chol.solve(&(y - f0_train));
        Ok(theta_x.dot(&z) + f0_x)
    }
}

/// Output of a network trained to convergence under a constant kernel.
pub fn trained_output(
    theta: &DMatrix<f64>,
    theta_x: &DVector<f64>,
    f0_x: f64,
    f0_train: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64> {
    TrainedOutput::new(theta)?.evaluate(theta_x, f0_x, f0_train, y)
}

/// Data-independent output-variance prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePrediction {
    #[serde(rename = "A")]
    pub a: f64,
    pub variance: f64,
    pub q_bar_l: f64,
    pub q_bar_sr_l: f64,
}

/// `A = S/(κ̄₁/κ̄₂ + S − 1)` and
/// `Var = (1 + A²/S)(q̄^L − q̄^L_sr) + (A − 1)² q̄^L_sr`.
pub fn predict_variance(
    kappas: &KappaPair,
    q_bar_l: f64,
    q_bar_sr_l: f64,
    s: usize,
) -> Result<VariancePrediction> {
    if s == 0 {
        return Err(NtkError::InvalidInput("sample count must be at least 1".into()));
    }
    let ratio = condition_ratio(kappas, s);
    if !(ratio.ratio >= 1.0) {
        return Err(NtkError::InvalidInput(format!(
            "kappa1_bar / kappa2_bar = {} is below 1",
            ratio.ratio
        )));
    }
    if !(q_bar_l >= q_bar_sr_l && q_bar_sr_l >= 0.0) {
        return Err(NtkError::InvalidInput(format!(
            "need q_bar_L >= q_bar_sr_L >= 0, got {q_bar_l}, {q_bar_sr_l}"
        )));
    }
    let sf = s as f64;
    let a = if ratio.zero_denominator {
        0.0
    } else {
        sf / (ratio.ratio + sf - 1.0)
    };
    // (1 + A²/S)(q̄ − q̄_sr) + (A − 1)² q̄_sr, grouped so that A = 0 gives q̄ exactly
    let variance = q_bar_l + a * a / sf * (q_bar_l - q_bar_sr_l) + a * (a - 2.0) * q_bar_sr_l;
    Ok(VariancePrediction {
        a,
        variance,
        q_bar_l,
        q_bar_sr_l,
    })
}

/// Monte-Carlo estimate of a variance with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McVariance {
    pub variance: f64,
    pub standard_error: f64,
    pub n_samples: usize,
}

#[derive(Clone, Copy)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
    m4_raw: f64,
}

/// `Var f^{t=∞}(x)` over `f⁰ ~ N(0, K)`, by sampling and applying
/// [`TrainedOutput`] to every draw.
///
/// `joint_nngp` is the NNGP matrix of `{x} ∪ X` with the test point first;
/// `theta` is `Θ(X)` and `theta_x` is `Θ(X, x)`. Labels do not affect the
/// variance and are set to zero. Samples are drawn in fixed-size chunks with
/// one random stream per chunk, so the result is independent of thread count.
pub fn variance_oracle_mc(
    theta: &DMatrix<f64>,
    theta_x: &DVector<f64>,
    joint_nngp: &NngpMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<McVariance> {
    let s = theta.nrows();
    if joint_nngp.matrix.nrows() != s + 1 || theta_x.len() != s {
        return Err(NtkError::LengthMismatch(format!(
            "Θ is {s}x{s}, Θ(x,X) has {} entries, joint NNGP is {}x{}",
            theta_x.len(),
            joint_nngp.matrix.nrows(),
            joint_nngp.matrix.ncols()
        )));
    }
    if n_samples < 2 {
        return Err(NtkError::InvalidInput("need at least two samples".into()));
    }
    let (factor, _) = psd_factor(&joint_nngp.matrix)?;
    let solver = TrainedOutput::new(theta)?;
    let zeros = DVector::zeros(s);
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let chunks: Vec<Moments> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = rng::stream(seed, c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut acc = Moments {
                n: 0.0,
                mean: 0.0,
                m2: 0.0,
                m4_raw: 0.0,
            };
            for _ in 0..count {
                let z = DVector::from_vec(rng::normals(&mut rng, s + 1));
                let f = &factor * z;
                let f_train = f.rows(1, s).into_owned();
                let v = solver
                    .evaluate(theta_x, f[0], &f_train, &zeros)
                    .expect("dimensions checked above");
                acc.n += 1.0;
                let d = v - acc.mean;
                acc.mean += d / acc.n;
                acc.m2 += d * (v - acc.mean);
                acc.m4_raw += v.powi(4);
            }
            acc
        })
        .collect();
    let total = chunks.iter().fold(
        Moments {
            n: 0.0,
            mean: 0.0,
            m2: 0.0,
            m4_raw: 0.0,
        },
        |a, b| {
            let n = a.n + b.n;
            let d = b.mean - a.mean;
            Moments {
                n,
                mean: a.mean + d * b.n / n,
                m2: a.m2 + b.m2 + d * d * a.n * b.n / n,
                m4_raw: a.m4_raw + b.m4_raw,
            }
        },
    );
    let variance = total.m2 / (total.n - 1.0);
    // the outputs are centred Gaussian, so E v⁴ estimates the fourth moment directly
    let m4 = total.m4_raw / total.n;
    let standard_error = ((m4 - variance * variance).max(0.0) / total.n).sqrt();
    Ok(McVariance {
        variance,
        standard_error,
        n_samples,
    })
}

/// Exact variance of `f⁰(x) − Θ(x,X)Θ(X)⁻¹f⁰(X)` under `f⁰ ~ N(0, K)`.
pub fn variance_exact(
    theta: &DMatrix<f64>,
    theta_x: &DVector<f64>,
    joint_nngp: &NngpMatrix,
) -> Result<f64> {
    let s = theta.nrows();
    if joint_nngp.matrix.nrows() != s + 1 || theta_x.len() != s {
        return Err(NtkError::LengthMismatch("inconsistent kernel sizes".into()));
    }
    let beta = TrainedOutput::new(theta)?.solve(theta_x)?;
    let mut w = DVector::zeros(s + 1);
    w[0] = 1.0;
    for i in 0..s {
        w[i + 1] = -beta[i];
    }
    Ok((joint_nngp.matrix.clone() * &w).dot(&w))
}
