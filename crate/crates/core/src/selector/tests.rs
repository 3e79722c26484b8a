use super::*;
use crate::rng::rng_from;
use nalgebra::{DMatrix, DVector};
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;

fn pendulum_bounds() -> Bounds {
    Bounds::new(vec![-std::f64::consts::PI, -8.0], vec![std::f64::consts::PI, 8.0])
}

/// Posterior by explicit dense inversion.
fn dense_oracle(z: &Array2<f64>, y: &[f64], h: &GpHyper<f64>, zt: &Array2<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = z.nrows();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let k = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
        let d2: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        h.signal_var * (-d2 / (2.0 * h.lengthscale * h.lengthscale)).exp()
    };
    let kmat = DMatrix::from_fn(n, n, |i, j| {
        k(z.row(i), z.row(j)) + if i == j { h.noise_var + h.jitter } else { 0.0 }
    });
    let kinv = kmat.try_inverse().unwrap();
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for row in zt.rows() {
        let ks = DVector::from_fn(n, |i, _| k(z.row(i), row));
        means.push(ybar + (ks.transpose() * &kinv * &yc)[(0, 0)]);
        vars.push((h.signal_var - (ks.transpose() * &kinv * &ks)[(0, 0)]).max(0.0));
    }
    (means, vars)
}

#[test]
fn gp_matches_dense_inversion_for_small_sets() {
    let mut rng = rng_from(1);
    let h = GpHyper::default();
    for n in 1..=5 {
        for _ in 0..20 {
            let z = Array2::from_shape_simple_fn((n, 2), || rng.random_range(-1.0..1.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let zt = Array2::from_shape_simple_fn((7, 2), || rng.random_range(-1.2..1.2));
            let model = gp_fit(z.view(), &y, h).unwrap();
            let (m, v) = model.predict(zt.view()).unwrap();
            let (om, ov) = dense_oracle(&z, &y, &h, &zt);
            for i in 0..7 {
                assert!((m[i] - om[i]).abs() < 1e-8, "n={n}: mean {} vs {}", m[i], om[i]);
                assert!((v[i] - ov[i]).abs() < 1e-8, "n={n}: var {} vs {}", v[i], ov[i]);
            }
        }
    }
}

#[test]
fn batch_prediction_matches_single_rows() {
    let mut rng = rng_from(2);
    let z = Array2::from_shape_simple_fn((20, 2), || rng.random_range(-1.0..1.0));
    let y: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..5.0)).collect();
    let model = gp_fit(z.view(), &y, GpHyper::default()).unwrap();
    let zt = Array2::from_shape_simple_fn((10, 2), || rng.random_range(-1.0..1.0));
    let (m, v) = model.predict(zt.view()).unwrap();
    for i in 0..10 {
        let (mi, vi) = model.predict(zt.slice(ndarray::s![i..i + 1, ..])).unwrap();
        assert_eq!(m[i], mi[0]);
        assert_eq!(v[i], vi[0]);
    }
}

#[test]
fn branch_rule_examples() {
    assert_eq!(select_index(&[9.0, 1.0], &[0.1, 0.5], 0.3), (1, Branch::Variance));
    assert_eq!(select_index(&[9.0, 1.0], &[0.1, 0.2], 0.3), (0, Branch::Mean));
    assert_eq!(select_index(&[1.0, 5.0, 2.0], &[0.4, 0.4, 0.4], 0.3), (0, Branch::Variance));
    assert_eq!(select_index(&[3.0, 3.0], &[0.0, 0.0], 0.3), (0, Branch::Mean));
    // equal to the threshold is not above it
    assert_eq!(select_index(&[0.0, 1.0], &[0.3, 0.1], 0.3), (1, Branch::Mean));
    assert_eq!(select_index(&[0.0, 1.0], &[0.3, 0.1], f64::INFINITY), (1, Branch::Mean));
}

#[test]
fn normalization_round_trips() {
    let norm = Normalizer::new(pendulum_bounds()).unwrap();
    let states = vec![vec![-std::f64::consts::PI, -8.0], vec![0.0, 0.0], vec![1.0, 4.0]];
    let z = norm.normalize(&states).unwrap();
    assert_eq!(z.row(0).to_vec(), vec![-1.0, -1.0]);
    assert_eq!(z.row(1).to_vec(), vec![0.0, 0.0]);
    let back = norm.unnormalize(z.view()).unwrap();
    for (a, b) in back.iter().zip(&states) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    let clipped = norm.unnormalize(array![[2.0, -3.0]].view()).unwrap();
    assert_eq!(clipped[0], vec![std::f64::consts::PI, -8.0]);
    assert!(Normalizer::new(Bounds::new(vec![0.0], vec![0.0])).is_err());
}

#[test]
fn null_shift_is_identity() {
    let config = SelectorConfig {
        shift_sigma: 0.0,
        resample_fraction: 0.0,
        ..SelectorConfig::default()
    };
    let mut sel = SelectorState::new(config, pendulum_bounds(), 3).unwrap();
    let z = sel.shift_candidates();
    assert_eq!(&z, sel.pool());
}

#[test]
fn shift_displacement_matches_gaussian_norm() {
    // interior rows only, so clipping never engages (0.1 * 6 sigma < 0.4)
    let n = 10_000;
    let states: Vec<Vec<f64>> = (0..n).map(|i| vec![-1.0 + 2.0 * (i % 100) as f64 / 99.0, 0.0]).collect();
    let bounds = Bounds::new(vec![-2.5, -2.5], vec![2.5, 2.5]);
    let config = SelectorConfig {
        pool_size: n,
        shift_sigma: 0.1,
        resample_fraction: 0.0,
        ..SelectorConfig::default()
    };
    let mut sel = SelectorState::with_pool(config, bounds, &states, 4).unwrap();
    let before = sel.pool().clone();
    let after = sel.shift_candidates();
    let d: Vec<f64> = (0..n)
        .map(|i| ((after[(i, 0)] - before[(i, 0)]).powi(2) + (after[(i, 1)] - before[(i, 1)]).powi(2)).sqrt())
        .collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    // Rayleigh: E = sigma sqrt(pi / 2), Var = (4 - pi) / 2 sigma^2
    let expected = 0.1 * (std::f64::consts::PI / 2.0).sqrt();
    let se = 0.1 * ((4.0 - std::f64::consts::PI) / 2.0).sqrt() / (n as f64).sqrt();
    assert!((mean - expected).abs() < 3.0 * se, "{mean} vs {expected} (se {se})");
}

#[test]
fn resampling_replaces_the_configured_fraction() {
    let config = SelectorConfig {
        pool_size: 50,
        shift_sigma: 0.0,
        resample_fraction: 0.2,
        ..SelectorConfig::default()
    };
    let mut sel = SelectorState::new(config, pendulum_bounds(), 5).unwrap();
    let before = sel.pool().clone();
    let after = sel.shift_candidates();
    let changed = (0..50).filter(|&i| after.row(i) != before.row(i)).count();
    assert_eq!(changed, 10);
    assert!(after.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn frozen_scores_give_a_fixed_point() {
    let config = SelectorConfig {
        shift_sigma: 0.0,
        resample_fraction: 0.0,
        pool_size: 16,
        ..SelectorConfig::default()
    };
    let mut sel = SelectorState::new(config, pendulum_bounds(), 6).unwrap();
    let score = |s: &Vec<f64>| (s[0] - 0.5).powi(2) + 0.01 * s[1];
    let s1: Vec<f64> = sel.pool_states().iter().map(score).collect();
    let r1 = sel.epoch_step(&s1).unwrap();
    let s2: Vec<f64> = sel.pool_states().iter().map(score).collect();
    let r2 = sel.epoch_step(&s2).unwrap();
    assert_eq!(r1.selection.state, r2.selection.state);
    assert_eq!(r1.selection.branch, r2.selection.branch);
    assert_eq!(sel.epoch(), 2);
}

#[test]
fn pool_size_is_preserved() {
    let mut sel = SelectorState::new(SelectorConfig::default(), pendulum_bounds(), 7).unwrap();
    let mut rng = rng_from(8);
    for _ in 0..10 {
        let scores: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..10.0)).collect();
        let r = sel.epoch_step(&scores).unwrap();
        assert!(pendulum_bounds().contains(&r.selection.state));
        assert_eq!(sel.pool().nrows(), 64);
    }
    assert!(sel.epoch_step(&[1.0; 3]).is_err());
}

#[test]
fn degenerate_scores_force_the_variance_branch() {
    let mut sel = SelectorState::new(SelectorConfig::default(), pendulum_bounds(), 9).unwrap();
    let r = sel.epoch_step(&[2.0; 64]).unwrap();
    assert!(r.degenerate);
    assert_eq!(r.selection.branch, Branch::Variance);
    assert!(r.selection.max_variance.is_finite());
}

#[test]
fn config_validation() {
    for bad in [
        SelectorConfig { pool_size: 0, ..Default::default() },
        SelectorConfig { variance_threshold: -1.0, ..Default::default() },
        SelectorConfig { resample_fraction: 1.5, ..Default::default() },
        SelectorConfig { shift_sigma: f64::NAN, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn branch_rule_is_exact(
        rows in proptest::collection::vec((-10.0f64..10.0, 0.0f64..2.0), 1..40),
        v in 0.0f64..2.0,
    ) {
        let means: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let vars: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let (i, branch) = select_index(&means, &vars, v);
        let max_var = vars.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max_var > v {
            prop_assert_eq!(branch, Branch::Variance);
            prop_assert_eq!(vars[i], max_var);
            prop_assert!(vars[..i].iter().all(|&x| x < max_var));
        } else {
            let max_mean = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert_eq!(branch, Branch::Mean);
            prop_assert_eq!(means[i], max_mean);
            prop_assert!(means[..i].iter().all(|&x| x < max_mean));
        }
    }

    #[test]
    fn selected_states_are_within_bounds(
        raw in proptest::collection::vec((-3.0f64..3.0, -3.0f64..3.0, -5.0f64..5.0, 0.0f64..1.0), 1..20),
        v in prop_oneof![Just(0.0), Just(f64::INFINITY), 0.0f64..1.0],
    ) {
        let sel = SelectorState::new(SelectorConfig::default(), pendulum_bounds(), 0).unwrap();
        let zt = Array2::from_shape_fn((raw.len(), 2), |(i, j)| if j == 0 { raw[i].0 } else { raw[i].1 });
        let means: Vec<f64> = raw.iter().map(|r| r.2).collect();
        let vars: Vec<f64> = raw.iter().map(|r| r.3).collect();
        let config = SelectorConfig { variance_threshold: v, ..SelectorConfig::default() };
        let sel = SelectorState { config, ..sel };
        let s = sel.select_initial_state(&means, &vars, zt.view());
        prop_assert!(pendulum_bounds().contains(&s.state));
        prop_assert!(s.index < raw.len());
    }

    #[test]
    fn posterior_variance_is_bounded(
        pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -5.0f64..5.0), 1..25),
        probe in proptest::collection::vec((-1.5f64..1.5, -1.5f64..1.5), 1..10),
    ) {
        let z = Array2::from_shape_fn((pts.len(), 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
        let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let h = GpHyper::default();
        let model = gp_fit(z.view(), &y, h).unwrap();
        let zt = Array2::from_shape_fn((probe.len(), 2), |(i, j)| if j == 0 { probe[i].0 } else { probe[i].1 });
        let (_, raw) = model.predict_raw(zt.view()).unwrap();
        prop_assert!(raw.iter().all(|&v| v >= -1e-9 && v <= h.signal_var + 1e-9));
    }

    #[test]
    fn target_offset_shifts_means_only(
        pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -5.0f64..5.0), 2..15),
        c in -100.0f64..100.0,
    ) {
        let z = Array2::from_shape_fn((pts.len(), 2), |(i, j)| if j == 0 { pts[i].0 } else { pts[i].1 });
        let y: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let yc: Vec<f64> = y.iter().map(|v| v + c).collect();
        let zt = Array2::from_shape_fn((9, 2), |(i, j)| -1.0 + 0.25 * i as f64 + 0.1 * j as f64);
        let (m0, v0) = gp_fit(z.view(), &y, GpHyper::default()).unwrap().predict(zt.view()).unwrap();
        let (m1, v1) = gp_fit(z.view(), &yc, GpHyper::default()).unwrap().predict(zt.view()).unwrap();
        for i in 0..9 {
            prop_assert!((m1[i] - m0[i] - c).abs() < 1e-8);
            prop_assert_eq!(v0[i], v1[i]);
        }
        let (i0, _) = select_index(&m0, &v0, f64::INFINITY);
        let (i1, _) = select_index(&m1, &v1, f64::INFINITY);
        let tie = (m0[i0] - m0[i1]).abs() < 1e-8;
        prop_assert!(i0 == i1 || tie);
    }
}
