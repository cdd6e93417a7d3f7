//! Gaussian expectations of an activation and its derivative.
//!
//! Every quantity is available through independent routes: the closed
//! forms (ReLU, erf), 64-node tensor Gauss–Hermite, a mid-size composite
//! Gauss–Legendre rule and a finer composite reference rule (accurate to
//! ~1e-13 on the mean-field parameter ranges). The mean-field maps use
//! [`IntegralMethod::preferred`].
//!
//! Plain Gauss–Hermite is only accurate for slowly varying integrands: for
//! tanh at `q = 4` its error is already ~1e-4, because `tanh′(√q z)²` is a
//! narrow bump. Activations without closed forms therefore default to the
//! composite rule.

use crate::activation::ActivationKind;
use crate::quadrature::{CompositeGauss, GaussHermite};
use std::f64::consts::PI;
use std::sync::OnceLock;

/// How a Gaussian integral is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegralMethod {
    ClosedForm,
    GaussHermite,
    /// 20 panels of 16 nodes on `[-10, 10]`, split at the activation kinks.
    Composite,
    /// 48 panels of 20 nodes on `[-12, 12]`, split at the activation kinks.
    Reference,
}

impl IntegralMethod {
    pub fn preferred(act: ActivationKind) -> Self {
        if act.has_closed_form() {
            IntegralMethod::ClosedForm
        } else {
            IntegralMethod::Composite
        }
    }

    fn resolve(self, act: ActivationKind) -> Self {
        match self {
            IntegralMethod::ClosedForm if !act.has_closed_form() => IntegralMethod::Composite,
            m => m,
        }
    }
}

/// `∫ Dz φ(√q z)²`.
pub fn activation_second_moment(act: ActivationKind, q: f64, method: IntegralMethod) -> f64 {
    match (method.resolve(act), act) {
        (IntegralMethod::ClosedForm, ActivationKind::Relu) => q / 2.0,
        (IntegralMethod::ClosedForm, ActivationKind::Erf) => {
            2.0 / PI * (q / (q + 0.25).sqrt()).atan()
        }
        (m, _) => univariate(q, m, |u| {
            let v = act.apply(u);
            v * v
        }),
    }
}

/// `∫ Dz φ′(√q z)²`.
pub fn derivative_second_moment(act: ActivationKind, q: f64, method: IntegralMethod) -> f64 {
    match (method.resolve(act), act) {
        (IntegralMethod::ClosedForm, ActivationKind::Relu) => 0.5,
        (IntegralMethod::ClosedForm, ActivationKind::Erf) => 2.0 / PI / (q + 0.25).sqrt(),
        (m, _) => univariate(q, m, |u| {
            let v = act.derivative(u);
            v * v
        }),
    }
}

/// `∫ Dz₁Dz₂ φ(u₁)φ(u₂)` with `u₁ = √q_s z₁`, `u₂ = √q_r (c z₁ + √(1−c²) z₂)`.
///
/// `c` must already lie in `[-1, 1]`.
pub fn activation_cross_moment(
    act: ActivationKind,
    q_s: f64,
    q_r: f64,
    c: f64,
    method: IntegralMethod,
) -> f64 {
    match (method.resolve(act), act) {
        (IntegralMethod::ClosedForm, ActivationKind::Relu) => {
            let s = (1.0 - c * c).max(0.0).sqrt();
            (q_s * q_r).sqrt() / (2.0 * PI) * (s + c * (PI / 2.0 + c.asin()))
        }
        (IntegralMethod::ClosedForm, ActivationKind::Erf) => {
            let cov = c * (q_s * q_r).sqrt();
            let det = ((1.0 + 2.0 * q_s) * (1.0 + 2.0 * q_r) - 4.0 * cov * cov).max(0.0);
            2.0 / PI * (2.0 * cov).atan2(det.sqrt())
        }
        (m, _) => bivariate(q_s, q_r, c, m, |u| act.apply(u)),
    }
}

/// `∫ Dz₁Dz₂ φ′(u₁)φ′(u₂)` with the same coupling as [`activation_cross_moment`].
pub fn derivative_cross_moment(
    act: ActivationKind,
    q_s: f64,
    q_r: f64,
    c: f64,
    method: IntegralMethod,
) -> f64 {
    match (method.resolve(act), act) {
        (IntegralMethod::ClosedForm, ActivationKind::Relu) => (PI / 2.0 + c.asin()) / (2.0 * PI),
        (IntegralMethod::ClosedForm, ActivationKind::Erf) => {
            let cov = c * (q_s * q_r).sqrt();
            let det = (1.0 + 2.0 * q_s) * (1.0 + 2.0 * q_r) - 4.0 * cov * cov;
            4.0 / PI / det.sqrt()
        }
        (m, _) => bivariate(q_s, q_r, c, m, |u| act.derivative(u)),
    }
}

fn composite_rule(method: IntegralMethod) -> Option<&'static CompositeGauss> {
    static MID: OnceLock<CompositeGauss> = OnceLock::new();
    match method {
        IntegralMethod::Reference => Some(CompositeGauss::reference()),
        IntegralMethod::Composite => Some(MID.get_or_init(|| CompositeGauss::new(10.0, 20, 16))),
        _ => None,
    }
}

fn univariate<G: Fn(f64) -> f64>(q: f64, method: IntegralMethod, g: G) -> f64 {
    let a = q.sqrt();
    match composite_rule(method) {
        Some(rule) => rule.expect_with_breaks(&[0.0], |z| g(a * z)),
        None => GaussHermite::standard().expect(|z| g(a * z)),
    }
}

fn bivariate<G: Fn(f64) -> f64>(q_s: f64, q_r: f64, c: f64, method: IntegralMethod, g: G) -> f64 {
    let (a, b) = (q_s.sqrt(), q_r.sqrt());
    let s = (1.0 - c * c).max(0.0).sqrt();
    match composite_rule(method) {
        Some(rule) => {
            if s < 1e-12 {
                return rule.expect_with_breaks(&[0.0], |z| g(a * z) * g(b * c * z));
            }
            // the inner integrand kinks where c z₁ + s z₂ = 0
            rule.expect_with_breaks(&[0.0], |z1| {
                let inner = rule.expect_with_breaks(&[-c * z1 / s], |z2| g(b * (c * z1 + s * z2)));
                g(a * z1) * inner
            })
        }
        None => GaussHermite::standard().expect2(|z1, z2| g(a * z1) * g(b * (c * z1 + s * z2))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ActivationKind::*;
    use IntegralMethod::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn relu_single_input_forms() {
        assert_eq!(activation_second_moment(Relu, 3.0, ClosedForm), 1.5);
        assert_eq!(derivative_second_moment(Relu, 3.0, ClosedForm), 0.5);
        // even node count keeps the kink off the grid, so the 1-D rules are exact
        assert!(rel(activation_second_moment(Relu, 3.0, GaussHermite), 1.5) < 1e-13);
        assert!(rel(derivative_second_moment(Relu, 3.0, GaussHermite), 0.5) < 1e-13);
    }

    #[test]
    fn erf_closed_forms_match_reference_quadrature() {
        for &q in &[0.25, 1.0, 4.0, 30.0] {
            let a = activation_second_moment(Erf, q, ClosedForm);
            let b = activation_second_moment(Erf, q, Reference);
            assert!(rel(a, b) < 1e-12, "q={q}: {a} vs {b}");
            let a = derivative_second_moment(Erf, q, ClosedForm);
            let b = derivative_second_moment(Erf, q, Reference);
            assert!(rel(a, b) < 1e-12, "q={q}: {a} vs {b}");
        }
    }

    #[test]
    fn relu_cross_moments_match_reference_quadrature() {
        for &c in &[-0.9, 0.0, 0.5, 0.99] {
            let a = activation_cross_moment(Relu, 1.0, 2.0, c, ClosedForm);
            let b = activation_cross_moment(Relu, 1.0, 2.0, c, Reference);
            assert!(rel(a, b) < 1e-11, "c={c}: {a} vs {b}");
            let a = derivative_cross_moment(Relu, 1.0, 2.0, c, ClosedForm);
            let b = derivative_cross_moment(Relu, 1.0, 2.0, c, Reference);
            assert!(rel(a, b) < 1e-11, "c={c}: {a} vs {b}");
        }
    }

    #[test]
    fn gauss_hermite_is_adequate_for_smooth_moderate_cases() {
        let a = activation_cross_moment(Erf, 1.0, 1.0, 0.5, ClosedForm);
        let b = activation_cross_moment(Erf, 1.0, 1.0, 0.5, GaussHermite);
        assert!(rel(a, b) < 1e-10);
    }

    #[test]
    fn cross_moment_at_full_correlation_is_second_moment() {
        for act in [Relu, Erf] {
            for &q in &[0.25, 1.0, 4.0] {
                let a = activation_cross_moment(act, q, q, 1.0, ClosedForm);
                let b = activation_second_moment(act, q, ClosedForm);
                assert!(rel(a, b) < 1e-14, "{act} q={q}");
                let a = derivative_cross_moment(act, q, q, 1.0, ClosedForm);
                let b = derivative_second_moment(act, q, ClosedForm);
                assert!(rel(a, b) < 1e-14, "{act} q={q}");
            }
        }
    }

    #[test]
    fn tanh_always_uses_quadrature() {
        let a = activation_second_moment(Tanh, 1.0, ClosedForm);
        let b = activation_second_moment(Tanh, 1.0, Composite);
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn tanh_composite_rule_matches_reference() {
        for &q in &[0.25, 1.0, 4.0, 10.0] {
            for &c in &[-0.9, 0.0, 0.4, 0.99] {
                let a = activation_cross_moment(Tanh, q, q, c, Composite);
                let b = activation_cross_moment(Tanh, q, q, c, Reference);
                assert!((a - b).abs() < 1e-9 * b.abs().max(1e-3), "q={q} c={c}");
                let a = derivative_cross_moment(Tanh, q, q, c, Composite);
                let b = derivative_cross_moment(Tanh, q, q, c, Reference);
                assert!(rel(a, b) < 1e-9, "q={q} c={c}");
            }
        }
    }
}
