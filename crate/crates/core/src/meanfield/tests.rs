use super::*;
use crate::activation::ActivationKind::{self, Erf, Relu, Tanh};
use proptest::prelude::*;
use std::f64::consts::PI;

fn hyper(w: f64, b: f64, act: ActivationKind) -> InitHyper {
    InitHyper::new(w, b, act).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Trace recomputed from the composite-rule quadrature only.
fn oracle_trace(h: &InitHyper, depth: usize, q0: f64, q0_sr: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = IntegralMethod::Reference;
    let act = h.activation();
    let (w, b) = (h.sigma_w_sq(), h.sigma_b_sq());
    let (mut q, mut q_sr) = (q0, q0_sr);
    let mut qs = vec![];
    let mut qsrs = vec![];
    for _ in 0..depth {
        let c = (q_sr / q).clamp(-1.0, 1.0);
        q_sr = w * activation_cross_moment(act, q, q, c, m) + b;
        q = w * activation_second_moment(act, q, m) + b;
        qs.push(q);
        qsrs.push(q_sr);
    }
    let mut p = vec![1.0; depth];
    let mut p_sr = vec![1.0; depth];
    for i in (0..depth - 1).rev() {
        p[i] = p[i + 1] * w * derivative_second_moment(act, qs[i], m);
        let c = (qsrs[i] / qs[i]).clamp(-1.0, 1.0);
        p_sr[i] = p_sr[i + 1] * w * derivative_cross_moment(act, qs[i], qs[i], c, m);
    }
    (qs, qsrs, p, p_sr)
}

#[test]
fn hyper_validation() {
    assert!(InitHyper::new(0.0, 1.0, Relu).is_err());
    assert!(InitHyper::new(-1.0, 1.0, Relu).is_err());
    assert!(InitHyper::new(1.0, -0.1, Relu).is_err());
    assert!(InitHyper::new(f64::NAN, 0.0, Relu).is_err());
    assert!(InitHyper::new(1.0, 0.0, Relu).is_ok());
}

#[test]
fn relu_eoc_variance_fixed_point() {
    let h = hyper(2.0, 0.0, Relu);
    let (q, q_hat) = forward_variance_step(&h, 1.0).unwrap();
    assert_eq!(q, 1.0);
    assert_eq!(q_hat, 0.5);
    let mut q = 1.0;
    for _ in 0..1000 {
        q = forward_variance_step(&h, q).unwrap().0;
    }
    assert_eq!(q, 1.0);
}

#[test]
fn erf_variance_step_matches_quadrature() {
    let h = hyper(1.0, 1.0, Erf);
    let (q, _) = forward_variance_step(&h, 1.0).unwrap();
    let expected = 2.0 / PI * (1.0 / 1.25f64.sqrt()).atan() + 1.0;
    assert!(rel(q, expected) < 1e-15);
    let quad = activation_second_moment(Erf, 1.0, IntegralMethod::Reference) + 1.0;
    assert!(rel(q, quad) < 1e-13);
}

#[test]
fn relu_covariance_at_zero_correlation() {
    let h = hyper(2.0, 0.0, Relu);
    let (q_sr, q_hat_sr) = forward_covariance_step(&h, 1.0, 1.0, 0.0).unwrap();
    assert!(rel(q_sr, 1.0 / PI) < 1e-15);
    assert!(rel(q_hat_sr, 0.5 / PI) < 1e-15);
    let quad = 2.0 * activation_cross_moment(Relu, 1.0, 1.0, 0.0, IntegralMethod::Reference);
    assert!(rel(q_sr, quad) < 1e-12);
}

#[test]
fn chi1_values() {
    for &q in &[0.1, 1.0, 7.0] {
        let (_, chi) = backward_step(&hyper(3.0, 1.0, Relu), q, 1.0, 1.0).unwrap();
        assert_eq!(chi, 1.5);
    }
    let (p, chi) = backward_step(&hyper(1.0, 1.0, Erf), 1.0, 1.0, 1.0).unwrap();
    let expected = 2.0 / PI / 1.25f64.sqrt();
    assert!(rel(chi, expected) < 1e-15);
    assert_eq!(p, chi);
    let quad = derivative_second_moment(Erf, 1.0, IntegralMethod::Reference);
    assert!(rel(chi, quad) < 1e-13);
    let (p, _) = backward_step(&hyper(1.0, 1.0, Erf), 1.0, 2.0, 3.0).unwrap();
    assert!(rel(p, 6.0 * expected) < 1e-15);
}

#[test]
fn relu_backward_covariance_at_zero_correlation() {
    let p_sr = backward_covariance_step(&hyper(2.0, 0.0, Relu), 1.0, 1.0, 0.0, 1.0, 1.0).unwrap();
    assert!(rel(p_sr, 0.5) < 1e-15);
}

#[test]
fn collapse_at_full_correlation() {
    for act in ActivationKind::ALL {
        for &(w, b) in &[(0.5, 0.0), (1.0, 1.0), (3.0, 1.0)] {
            let h = hyper(w, b, act);
            for &q in &[0.25, 1.0, 4.0] {
                let (qv, qh) = forward_variance_step(&h, q).unwrap();
                let (qc, qhc) = forward_covariance_step(&h, q, q, q).unwrap();
                assert!(rel(qc, qv) < 1e-12, "{act} q={q}");
                assert!(rel(qhc, qh) < 1e-12, "{act} q={q}");
                let (p, _) = backward_step(&h, q, 1.3, 1.0).unwrap();
                let p_sr = backward_covariance_step(&h, q, q, 1.0, 1.3, 1.0).unwrap();
                assert!(rel(p_sr, p) < 1e-12, "{act} q={q}");
            }
        }
    }
}

#[test]
fn correlation_domain_errors() {
    let h = hyper(1.0, 1.0, Erf);
    assert!(forward_covariance_step(&h, 1.0, 1.0, 1.0 + 1e-12).is_ok());
    assert!(matches!(
        forward_covariance_step(&h, 1.0, 1.0, 1.01),
        Err(MeanFieldError::CorrelationDomain { .. })
    ));
    assert!(backward_covariance_step(&h, 1.0, 1.0, -1.5, 1.0, 1.0).is_err());
    assert!(forward_variance_step(&h, 0.0).is_err());
}

#[test]
fn overflow_reports_layer() {
    let h = hyper(1e200, 0.0, Relu);
    let err = run_trace(&h, 10, 1.0, 0.5).unwrap_err();
    match err {
        MeanFieldError::Overflow { layer, .. } => assert_eq!(layer, Some(2)),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn relu_eoc_trace_is_flat() {
    let t = run_trace(&hyper(2.0, 0.0, Relu), 10, 1.0, 1.0).unwrap();
    assert_eq!(t.depth(), 10);
    assert!(t.q.iter().all(|&v| v == 1.0));
    assert!(t.chi1.iter().all(|&v| v == 1.0));
    assert!(t.p.iter().all(|&v| v == 1.0));
    assert!(t.q_hat.iter().all(|&v| v == 0.5));
}

#[test]
fn relu_ordered_gradients_vanish_geometrically() {
    let depth = 12;
    let t = run_trace(&hyper(1.0, 1.0, Relu), depth, 1.0, 0.3).unwrap();
    for l in 0..depth {
        let expected = 0.5f64.powi((depth - 1 - l) as i32);
        assert!(rel(t.p[l], expected) < 1e-15, "layer {}", l + 1);
        assert_eq!(t.chi1[l], 0.5);
    }
}

#[test]
fn input_seed_starts_from_raw_inputs() {
    let h = hyper(1.5, 0.2, Erf);
    let t = run_trace_seeded(&h, 3, TraceSeed::Input { sq_norm: 1.0, dot: 0.25 }).unwrap();
    assert_eq!(t.q_hat[0], 1.0);
    assert_eq!(t.q_hat_sr[0], 0.25);
    assert!(rel(t.q[0], 1.7) < 1e-15);
    assert!(rel(t.q_sr[0], 1.5 * 0.25 + 0.2) < 1e-15);
    let (q2, qh1) = forward_variance_step(&h, t.q[0]).unwrap();
    assert_eq!(t.q[1], q2);
    assert_eq!(t.q_hat[1], qh1);
}

#[test]
fn erf_chaotic_trace_matches_quadrature_oracle() {
    let h = hyper(3.0, 1.0, Erf);
    let t = run_trace(&h, 20, 1.0, 0.5).unwrap();
    let (q, q_sr, p, p_sr) = oracle_trace(&h, 20, 1.0, 0.5);
    for l in 0..20 {
        assert!(rel(t.q[l], q[l]) < 1e-12, "q layer {}", l + 1);
        assert!(rel(t.q_sr[l], q_sr[l]) < 1e-12, "q_sr layer {}", l + 1);
        assert!(rel(t.p[l], p[l]) < 1e-11, "p layer {}", l + 1);
        assert!(rel(t.p_sr[l], p_sr[l]) < 1e-11, "p_sr layer {}", l + 1);
    }
}

#[test]
fn erf_chaotic_trace_regression_fixture() {
    // frozen from the quadrature oracle above
    let t = run_trace(&hyper(3.0, 1.0, Erf), 20, 1.0, 0.5).unwrap();
    let fixture = [
        (0, FIXTURE_Q1, FIXTURE_QSR1, FIXTURE_P1, FIXTURE_PSR1),
        (19, FIXTURE_Q20, FIXTURE_QSR20, 1.0, 1.0),
    ];
    for (i, q, q_sr, p, p_sr) in fixture {
        assert!(rel(t.q[i], q) < 1e-12);
        assert!(rel(t.q_sr[i], q_sr) < 1e-12);
        assert!(rel(t.p[i], p) < 1e-11);
        assert!(rel(t.p_sr[i], p_sr) < 1e-11);
    }
}

const FIXTURE_Q1: f64 = 2.3936771631926184;
const FIXTURE_QSR1: f64 = 1.6490406878163544;
const FIXTURE_P1: f64 = 3.77438063393491;
const FIXTURE_PSR1: f64 = 3.570445077406445e-2;
const FIXTURE_Q20: f64 = 2.960553885220029;
const FIXTURE_QSR20: f64 = 2.740421972658569;

#[test]
fn tanh_trace_matches_reference_quadrature() {
    let h = hyper(1.5, 0.5, Tanh);
    let t = run_trace(&h, 6, 1.0, 0.4).unwrap();
    let (q, q_sr, p, p_sr) = oracle_trace(&h, 6, 1.0, 0.4);
    for l in 0..6 {
        assert!(rel(t.q[l], q[l]) < 1e-9);
        assert!(rel(t.q_sr[l], q_sr[l]) < 1e-9);
        assert!(rel(t.p[l], p[l]) < 1e-9);
        assert!(rel(t.p_sr[l], p_sr[l]) < 1e-9);
    }
}

#[test]
fn relu_phases() {
    assert_eq!(classify_phase(&hyper(2.0, 0.7, Relu)).unwrap().phase, Phase::EdgeOfChaos);
    let chaotic = classify_phase(&hyper(3.0, 1.0, Relu)).unwrap();
    assert_eq!(chaotic.phase, Phase::Chaotic);
    assert_eq!(chaotic.chi1_fixed_point, 1.5);
    assert_eq!(classify_phase(&hyper(1.0, 1.0, Relu)).unwrap().phase, Phase::Ordered);
}

#[test]
fn erf_fixed_point_solves_variance_map() {
    let h = hyper(1.0, 1.0, Erf);
    let q = variance_fixed_point(&h).unwrap();
    let (next, _) = forward_variance_step(&h, q).unwrap();
    assert!((next - q).abs() < 1e-11);
    let label = classify_phase(&h).unwrap();
    assert_eq!(label.phase, Phase::Ordered);
    assert_eq!(label.q_fixed_point, Some(q));
    assert_eq!(classify_phase(&hyper(3.0, 1.0, Erf)).unwrap().phase, Phase::Chaotic);
}

/// χ₁(q*) − 1 for erf from the reference quadrature alone.
fn erf_excess_oracle(w: f64, b: f64) -> f64 {
    let m = IntegralMethod::Reference;
    let mut q = 1.0;
    for _ in 0..10_000 {
        let next = w * activation_second_moment(Erf, q, m) + b;
        if (next - q).abs() < 1e-13 {
            q = next;
            break;
        }
        q = next;
    }
    w * derivative_second_moment(Erf, q, m) - 1.0
}

#[test]
fn erf_eoc_root_matches_oracle_bisection() {
    let root = locate_eoc(Erf, 1.0, 0.5, 3.0).unwrap();
    let (mut a, mut b) = (0.5, 3.0);
    for _ in 0..60 {
        let mid = 0.5 * (a + b);
        if erf_excess_oracle(mid, 1.0) > 0.0 {
            b = mid;
        } else {
            a = mid;
        }
    }
    let oracle = 0.5 * (a + b);
    assert!(rel(root, oracle) < 1e-9, "{root} vs {oracle}");
    assert!(rel(root, ERF_EOC_SIGMA_W_SQ_AT_B1) < 1e-9, "{root}");
    assert!((classify_phase(&hyper(root, 1.0, Erf)).unwrap().chi1_fixed_point - 1.0).abs() < 1e-9);
}

const ERF_EOC_SIGMA_W_SQ_AT_B1: f64 = 2.7183813523354594;

#[test]
fn locate_eoc_needs_a_bracket() {
    assert!(locate_eoc(Erf, 1.0, 0.5, 0.6).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariance_collapses_to_variance(w in 0.1f64..4.0, b in 0.0f64..2.0, q in 0.05f64..8.0, ai in 0usize..2) {
        let act = [Relu, Erf][ai];
        let h = hyper(w, b, act);
        let (qv, _) = forward_variance_step(&h, q).unwrap();
        let (qc, _) = forward_covariance_step(&h, q, q, q).unwrap();
        prop_assert!(rel(qc, qv) < 1e-12);
    }

    #[test]
    fn trace_correlations_stay_bounded(w in 0.1f64..4.0, b in 0.0f64..2.0, c0 in -1.0f64..=1.0, ai in 0usize..3, depth in 1usize..25) {
        let act = ActivationKind::ALL[ai];
        let t = run_trace(&hyper(w, b, act), depth, 1.0, c0).unwrap();
        for (&q, &c) in t.q.iter().zip(&t.c) {
            prop_assert!(q > 0.0);
            prop_assert!(c.abs() <= 1.0);
        }
    }

    #[test]
    fn relu_eoc_for_any_bias(b in 0.0f64..=2.0) {
        prop_assert_eq!(classify_phase(&hyper(2.0, b, Relu)).unwrap().phase, Phase::EdgeOfChaos);
    }

    #[test]
    fn p_is_chi1_times_next_layer(w in 0.1f64..4.0, b in 0.0f64..2.0, ai in 0usize..3) {
        let t = run_trace(&hyper(w, b, ActivationKind::ALL[ai]), 8, 1.0, 0.2).unwrap();
        for l in 0..7 {
            prop_assert!(rel(t.p[l], t.p[l + 1] * t.chi1[l]) < 1e-14);
        }
    }
}

#[test]
fn phase_boundary_is_crossed_once() {
    for act in [Relu, Erf, Tanh] {
        for &b in &[0.0, 0.5, 1.0] {
            let phases: Vec<Phase> = (1..=40)
                .map(|i| classify_phase(&hyper(0.1 * i as f64, b, act)).unwrap().phase)
                .collect();
            let rank = |p: Phase| match p {
                Phase::Ordered => 0,
                Phase::EdgeOfChaos => 1,
                Phase::Chaotic => 2,
            };
            assert!(phases.windows(2).all(|w| rank(w[0]) <= rank(w[1])), "{act} b={b}: {phases:?}");
            assert_eq!(phases[0], Phase::Ordered);
            assert_eq!(*phases.last().unwrap(), Phase::Chaotic);
        }
    }
}
