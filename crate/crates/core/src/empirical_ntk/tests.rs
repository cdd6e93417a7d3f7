use super::*;
use crate::activation::ActivationKind::{self, Erf, Relu, Tanh};
use crate::ntk_theory::{KernelModel, DEFAULT_REFERENCE_COVARIANCE};

fn hyper(w: f64, b: f64, act: ActivationKind) -> InitHyper {
    InitHyper::new(w, b, act).unwrap()
}

fn unit_columns(dim: usize, s: usize, seed: u64) -> DMatrix<f64> {
    let mut m = DMatrix::from_vec(dim, s, rng::normals(&mut rng::stream(seed, 5), dim * s));
    for mut c in m.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    m
}

#[test]
fn linear_network_kernel_is_dot_product_plus_one() {
    let net = Mlp::init(&[3, 1], hyper(1.0, 0.5, Tanh), 4).unwrap();
    let xs = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -2.0, 0.0, 0.25, 3.0]);
    for mode in [KernelMode::Factored, KernelMode::Explicit] {
        let k = empirical_kernel_with(&net, &xs, mode, 0).unwrap();
        let expected = xs.tr_mul(&xs).add_scalar(1.0);
        assert!((&k.matrix - &expected).amax() < 1e-15, "{mode:?}");
    }
}

#[test]
fn single_input_kernel_is_gradient_norm() {
    let net = Mlp::init(&[4, 6, 5, 1], hyper(1.8, 0.2, Erf), 9).unwrap();
    let x = unit_columns(4, 1, 2);
    let k = empirical_kernel(&net, &x).unwrap();
    let g = net.gradient(&x.column(0).into_owned()).unwrap();
    assert_eq!(k.size(), 1);
    assert!((k.matrix[(0, 0)] / g.0.norm_squared() - 1.0).abs() < 1e-13);
    let d = diagonal_ntk(&net, &x.column(0).into_owned()).unwrap();
    assert!((d / g.0.norm_squared() - 1.0).abs() < 1e-13);
    assert_eq!(k.provenance, Provenance::Empirical { seed: 9, step: 0 });
}

#[test]
fn factored_and_explicit_kernels_agree() {
    for act in [Relu, Erf, Tanh] {
        let net = Mlp::init(&[5, 12, 9, 7, 1], hyper(2.0, 0.3, act), 13).unwrap();
        let xs = unit_columns(5, 6, 3);
        let a = empirical_kernel_with(&net, &xs, KernelMode::Factored, 0).unwrap();
        let b = empirical_kernel_with(&net, &xs, KernelMode::Explicit, 0).unwrap();
        assert!((&a.matrix - &b.matrix).amax() < 1e-12 * b.matrix.amax(), "{act}");
        a.check_gram().unwrap();
        b.check_gram().unwrap();
    }
}

#[test]
fn gram_check_rejects_indefinite_and_asymmetric() {
    let bad = KernelMatrix {
        matrix: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
        provenance: Provenance::Theoretical,
    };
    assert!(matches!(bad.check_gram(), Err(EmpiricalError::NotGram(_))));
    let skew = KernelMatrix {
        matrix: DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
        provenance: Provenance::Nngp,
    };
    assert!(skew.check_gram().is_err());
}

#[test]
fn ratio_of_constant_samples_is_one() {
    let st = VarianceRatioStat::from_samples(&[3.5; 20], 0).unwrap();
    assert_eq!(st.ratio, 1.0);
    assert_eq!(st.standard_error, 0.0);
    assert!(VarianceRatioStat::from_samples(&[1.0], 0).is_err());
}

#[test]
fn ratio_and_jackknife_by_hand() {
    let st = VarianceRatioStat::from_samples(&[1.0, 2.0, 3.0], 0).unwrap();
    assert!((st.ratio - 7.0 / 6.0).abs() < 1e-15);
    // leave-one-out ratios: {2,3} → 13/12.5, {1,3} → 5/4, {1,2} → 2.5/2.25
    let loo = [13.0 / 12.5, 1.25, 2.5 / 2.25];
    let m = loo.iter().sum::<f64>() / 3.0;
    let se = (2.0 / 3.0 * loo.iter().map(|r| (r - m).powi(2)).sum::<f64>()).sqrt();
    assert!((st.standard_error - se).abs() < 1e-15);
}

#[test]
fn overflowing_initializations_are_reported() {
    let h = hyper(1e200, 0.0, Relu);
    let x = default_probe(4, 1);
    match init_variance_ratio(&[4, 8, 8, 8, 1], h, &x, 10, 0) {
        Err(EmpiricalError::Overflow { failed, total }) => assert_eq!((failed, total), (10, 10)),
        other => panic!("expected overflow, got {other:?}"),
    }
}

#[test]
fn probe_is_unit_norm_and_seeded() {
    let a = default_probe(50, 3);
    assert!((a.norm() - 1.0).abs() < 1e-12);
    assert_eq!(a, default_probe(50, 3));
    assert_ne!(a, default_probe(50, 4));
}

#[test]
fn mean_diagonal_kernel_matches_infinite_width_limit() {
    let (dim, width, depth, seeds) = (10, 200, 3, 200);
    let h = hyper(1.0, 1.0, Relu);
    let widths = Mlp::uniform_widths(dim, width, depth);
    let x = default_probe(dim, 7);
    let stat = init_variance_ratio(&widths, h, &x, seeds, 11).unwrap();
    let model = KernelModel::for_network(h, &widths).unwrap();
    let theta = model
        .theta_star(&DMatrix::from_element(1, 1, 1.0), DEFAULT_REFERENCE_COVARIANCE)
        .unwrap();
    let expected = theta.matrix[(0, 0)];
    assert!((stat.mean / expected - 1.0).abs() < 0.05, "{} vs {expected}", stat.mean);
    assert!(stat.ratio < 1.2);
}

#[test]
fn chaotic_ratio_grows_with_depth() {
    let h = hyper(3.0, 1.0, Relu);
    let x = default_probe(8, 0);
    let shallow = init_variance_ratio(&Mlp::uniform_widths(8, 32, 4), h, &x, 200, 1).unwrap();
    let deep = init_variance_ratio(&Mlp::uniform_widths(8, 32, 32), h, &x, 200, 1).unwrap();
    assert!(deep.ratio > 2.0 * shallow.ratio, "{} vs {}", deep.ratio, shallow.ratio);
}

#[test]
fn ratio_is_reproducible() {
    let h = hyper(1.5, 0.5, Tanh);
    let x = default_probe(6, 0);
    let a = init_variance_ratio(&[6, 10, 10, 1], h, &x, 16, 42).unwrap();
    let b = init_variance_ratio(&[6, 10, 10, 1], h, &x, 16, 42).unwrap();
    assert_eq!(a, b);
}

fn drift_problem() -> (DMatrix<f64>, DVector<f64>) {
    let xs = unit_columns(6, 10, 1);
    let ys = DVector::from_fn(10, |j, _| (j % 3) as f64 / 2.0);
    (xs, ys)
}

#[test]
fn zero_steps_give_zero_drift() {
    let (xs, ys) = drift_problem();
    let mut net = Mlp::init(&[6, 8, 8, 1], hyper(1.0, 1.0, Tanh), 3).unwrap();
    let cfg = TrainConfig { max_steps: 0, ..TrainConfig::default() };
    let d = training_drift(&mut net, &xs, &ys, &cfg, &default_snapshot_steps()).unwrap();
    assert_eq!(d.steps, vec![0]);
    assert_eq!(d.rel_change, vec![0.0]);
    assert_eq!(d.steps_run, 0);
}

#[test]
fn zero_learning_rate_gives_zero_drift() {
    let (xs, ys) = drift_problem();
    let mut net = Mlp::init(&[6, 8, 8, 1], hyper(1.0, 1.0, Tanh), 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        max_steps: 30,
        ..TrainConfig::default()
    };
    let d = training_drift(&mut net, &xs, &ys, &cfg, &[0, 10, 20]).unwrap();
    assert_eq!(d.steps, vec![0, 10, 20, 30]);
    assert!(d.rel_change.iter().all(|&r| r == 0.0));
}

#[test]
fn snapshots_do_not_interact() {
    let (xs, ys) = drift_problem();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        max_steps: 40,
        ..TrainConfig::default()
    };
    let run = |snaps: &[usize]| {
        let mut net = Mlp::init(&[6, 8, 8, 1], hyper(2.0, 0.5, Tanh), 3).unwrap();
        training_drift(&mut net, &xs, &ys, &cfg, snaps).unwrap()
    };
    let a = run(&[25]);
    let b = run(&[0, 5, 25, 33]);
    assert_eq!(a.steps, vec![0, 25, 40]);
    assert_eq!(b.steps, vec![0, 5, 25, 33, 40]);
    assert_eq!(a.rel_change[1], b.rel_change[2]);
    assert_eq!(a.rel_change[2], b.rel_change[4]);
    assert!(a.rel_change[2] > 0.0);
    assert!(a.final_loss < a.initial_loss);
}

#[test]
fn unsorted_snapshots_are_rejected() {
    let (xs, ys) = drift_problem();
    let mut net = Mlp::init(&[6, 4, 1], hyper(1.0, 1.0, Tanh), 3).unwrap();
    assert!(training_drift(&mut net, &xs, &ys, &TrainConfig::default(), &[5, 3]).is_err());
}

#[test]
fn divergence_keeps_recorded_drift() {
    let (xs, ys) = drift_problem();
    let mut net = Mlp::init(&[6, 8, 8, 1], hyper(3.0, 1.0, Relu), 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 5.0,
        max_steps: 1000,
        ..TrainConfig::default()
    };
    match training_drift(&mut net, &xs, &ys, &cfg, &[0, 1]) {
        Err(EmpiricalError::Divergence { partial, .. }) => {
            assert_eq!(partial.steps[0], 0);
            assert!(partial.steps.len() >= 2);
            assert!(partial.final_drift() > 0.0);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
