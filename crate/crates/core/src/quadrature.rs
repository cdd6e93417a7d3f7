//! Gauss–Hermite rules rescaled to the standard normal measure `Dz`.
//!
//! Nodes are computed by Newton iteration on the orthonormal Hermite
//! recurrence, seeded with the classical asymptotic root estimates.

use std::f64::consts::PI;
use std::sync::OnceLock;

/// Number of nodes per dimension used throughout the mean-field module.
pub const DEFAULT_NODES: usize = 64;

/// Quadrature rule for `E[f(z)]`, `z ~ N(0, 1)`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
        let (x, w) = physicists_rule(n);
        let nodes = x.iter().map(|xi| xi * 2f64.sqrt()).collect();
        let weights = w.iter().map(|wi| wi / PI.sqrt()).collect();
        Self { nodes, weights }
    }

    /// Shared 64-node rule.
    pub fn standard() -> &'static GaussHermite {
        static RULE: OnceLock<GaussHermite> = OnceLock::new();
        RULE.get_or_init(|| GaussHermite::new(DEFAULT_NODES))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `∫ Dz f(z)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * f(z))
            .sum()
    }

    /// `∫ Dz₁ Dz₂ f(z₁, z₂)` on the tensor grid.
    pub fn expect2<F: Fn(f64, f64) -> f64>(&self, f: F) -> f64 {
        let mut total = 0.0;
        for (&z1, &w1) in self.nodes.iter().zip(&self.weights) {
            let mut inner = 0.0;
            for (&z2, &w2) in self.nodes.iter().zip(&self.weights) {
                inner += w2 * f(z1, z2);
            }
            total += w1 * inner;
        }
        total
    }
}

/// Composite Gauss–Legendre rule for `E[f(z)]`, `z ~ N(0, 1)`, on the
/// truncated line `[-half_width, half_width]`.
///
/// Panels can be split at caller-supplied breakpoints, so integrands with
/// kinks (ReLU and its step derivative) keep spectral accuracy. This is the
/// reference rule the closed-form maps are checked against.
#[derive(Debug, Clone)]
pub struct CompositeGauss {
    half_width: f64,
    panels: usize,
    unit_nodes: Vec<f64>,
    unit_weights: Vec<f64>,
}

impl CompositeGauss {
    pub fn new(half_width: f64, panels: usize, order: usize) -> Self {
        assert!(half_width > 0.0 && panels >= 1 && order >= 1);
        let (unit_nodes, unit_weights) = legendre_rule(order);
        Self {
            half_width,
            panels,
            unit_nodes,
            unit_weights,
        }
    }

    /// 48 panels of 20 nodes on `[-12, 12]`.
    pub fn reference() -> &'static CompositeGauss {
        static RULE: OnceLock<CompositeGauss> = OnceLock::new();
        RULE.get_or_init(|| CompositeGauss::new(12.0, 48, 20))
    }

    /// `∫ Dz f(z)` with extra panel boundaries at `breaks`.
    pub fn expect_with_breaks<F: Fn(f64) -> f64>(&self, breaks: &[f64], f: F) -> f64 {
        let h = self.half_width;
        let mut edges: Vec<f64> = (0..=self.panels)
            .map(|i| -h + 2.0 * h * i as f64 / self.panels as f64)
            .collect();
        edges.extend(breaks.iter().copied().filter(|b| b.abs() < h));
        edges.sort_by(|a, b| a.total_cmp(b));
        edges.dedup_by(|a, b| (*a - *b).abs() < 1e-14);
        let norm = 1.0 / (2.0 * PI).sqrt();
        let mut total = 0.0;
        for pair in edges.windows(2) {
            let (lo, hi) = (pair[0], pair[1]);
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            let mut panel = 0.0;
            for (&t, &w) in self.unit_nodes.iter().zip(&self.unit_weights) {
                let z = mid + half * t;
                panel += w * (-0.5 * z * z).exp() * f(z);
            }
            total += half * panel;
        }
        norm * total
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, f: F) -> f64 {
        self.expect_with_breaks(&[], f)
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut pp = 1.0;
        for _ in 0..100 {
            let mut p1 = 1.0;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = ((2.0 * jf + 1.0) * z * p2 - jf * p3) / (jf + 1.0);
            }
            pp = nf * (z * p1 - p2) / (z * z - 1.0);
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Nodes and weights for `∫ e^{-x²} f(x) dx`, ascending order.
fn physicists_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^{-1/4}
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    x.reverse();
    w.reverse();
    (x, w)
}
