//! Pointwise nonlinearities used by both the mean-field maps and the finite networks.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

/// Activation function of every hidden layer.
///
/// `Relu` and `Erf` have closed-form Gaussian integrals; `Tanh` is handled by
/// quadrature in the mean-field module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Erf,
    Tanh,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 3] = [ActivationKind::Relu, ActivationKind::Erf, ActivationKind::Tanh];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            ActivationKind::Erf => libm::erf(x),
            ActivationKind::Tanh => x.tanh(),
        }
    }

    /// Derivative; the ReLU derivative at exactly zero is 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Erf => 2.0 / PI.sqrt() * (-x * x).exp(),
            ActivationKind::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    /// Derivative at `x` given `y = self.apply(x)`; saves recomputing tanh.
    #[inline]
    pub fn derivative_from_output(self, x: f64, y: f64) -> f64 {
        match self {
            ActivationKind::Tanh => 1.0 - y * y,
            _ => self.derivative(x),
        }
    }

    /// Whether the Gaussian integrals of this activation have closed forms.
    pub fn has_closed_form(self) -> bool {
        !matches!(self, ActivationKind::Tanh)
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Erf => "erf",
            ActivationKind::Tanh => "tanh",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "erf" => Ok(ActivationKind::Erf),
            "tanh" => Ok(ActivationKind::Tanh),
            other => Err(format!("unknown activation '{other}' (expected relu, erf or tanh)")),
        }
    }
}
