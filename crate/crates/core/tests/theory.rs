mod common;

use common::*;
use proptest::prelude::*;
use teal_core::theory::{
    expected_error_norm, gaussian_threshold, mc_relative_error, relative_error_magnitude, relative_error_random,
    scalar_error_variance, standard_threshold, McConfig, PruneMode,
};
use teal_core::{matmul_dense, Layout, Matrix64, RngStream};

#[test]
fn median_threshold_matches_quadrature() {
    let oracle = oracle_threshold(0.5);
    let t = gaussian_threshold(0.5, 1.0).unwrap();
    assert!((t - oracle).abs() < 1e-9, "{t} vs {oracle}");
    assert!((t - 0.674490).abs() < 1e-5);
    for p in [0.05, 0.25, 0.75, 0.95] {
        assert!((standard_threshold(p).unwrap() - oracle_threshold(p)).abs() < 1e-9);
    }
    assert_eq!(gaussian_threshold(0.5, 2.0).unwrap(), 2.0 * t);
    assert_eq!(gaussian_threshold(0.0, 1.0).unwrap(), 0.0);
}

#[test]
fn scalar_variance_matches_monte_carlo() {
    let mut rng = RngStream::new(40);
    let t = oracle_threshold(0.5);
    let n = 10_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let x = rng.standard_normal();
        let w = rng.standard_normal();
        let e = if x.abs() <= t { x * w } else { 0.0 };
        s += e;
        s2 += e * e;
    }
    let var = s2 / n as f64 - (s / n as f64).powi(2);
    let analytic = scalar_error_variance(1.0, 1.0, 0.5).unwrap();
    assert!((var - 0.0713).abs() < 0.002, "mc {var}");
    assert!((analytic - var).abs() < 0.002, "analytic {analytic} mc {var}");
    assert_eq!(scalar_error_variance(1.0, 1.0, 0.0).unwrap(), 0.0);
    assert!((scalar_error_variance(2.0, 3.0, 1.0).unwrap() - 36.0).abs() < 1e-12);
}

#[test]
fn expected_norm_matches_monte_carlo() {
    let (m, n, trials) = (1024, 1024, 100);
    let t = oracle_threshold(0.5);
    let root = RngStream::new(41);
    let mut total = 0.0;
    for k in 0..trials {
        let mut rng = root.split(k);
        let err: Vec<f64> = (0..m)
            .map(|_| rng.standard_normal())
            .map(|x| if x.abs() <= t { x } else { 0.0 })
            .collect();
        let w = Matrix64::from_fn(n, m, Layout::RowMajor, |_, _| rng.standard_normal());
        total += matmul_dense(&err, &w).unwrap().norm_l2();
    }
    let mc = total / trials as f64;
    let analytic = expected_error_norm(m, n, 1.0, 1.0, 0.5).unwrap();
    assert!((mc / analytic - 1.0).abs() < 0.02, "mc {mc} analytic {analytic}");
    let quad = expected_error_norm(2 * m, 2 * n, 1.0, 1.0, 0.5).unwrap();
    assert!((quad / analytic - 2.0).abs() < 1e-12);
    assert_eq!(expected_error_norm(m, n, 1.0, 1.0, 0.0).unwrap(), 0.0);
}

#[test]
fn relative_errors_against_monte_carlo() {
    let cfg = McConfig::square(1024, 100);
    let mag = mc_relative_error(&cfg, 0.5, PruneMode::Magnitude, &RngStream::new(42)).unwrap();
    let analytic = relative_error_magnitude(0.5).unwrap();
    assert!((analytic - 0.267).abs() < 0.01);
    assert!((mag.mean - 0.267).abs() < 0.01);
    assert!((mag.mean - analytic).abs() <= 3.0 * mag.stderr, "{mag:?} vs {analytic}");

    let rnd = mc_relative_error(&cfg, 0.5, PruneMode::Random, &RngStream::new(43)).unwrap();
    assert!((rnd.mean - 0.5f64.sqrt()).abs() <= 3.0 * rnd.stderr, "{rnd:?}");
    assert!((rnd.mean / 0.5f64.sqrt() - 1.0).abs() < 0.02);
    assert_eq!(relative_error_random(0.25).unwrap(), 0.5);
}

#[test]
fn monte_carlo_is_scale_invariant() {
    let base = McConfig::square(256, 200);
    let scaled = McConfig {
        sigma_x: 3.0,
        sigma_w: 0.25,
        ..base
    };
    let a = mc_relative_error(&base, 0.6, PruneMode::Magnitude, &RngStream::new(44)).unwrap();
    let b = mc_relative_error(&scaled, 0.6, PruneMode::Magnitude, &RngStream::new(45)).unwrap();
    let se = (a.stderr.powi(2) + b.stderr.powi(2)).sqrt();
    assert!((a.mean - b.mean).abs() <= 3.0 * se, "{a:?} {b:?}");
}

#[test]
fn magnitude_curve_is_increasing_and_below_random() {
    let mut prev = 0.0;
    for i in 1..1000 {
        let p = i as f64 / 1000.0;
        let m = relative_error_magnitude(p).unwrap();
        assert!(m > prev, "not increasing at {p}");
        assert!(m < relative_error_random(p).unwrap());
        assert!((0.0..=1.0).contains(&m));
        prev = m;
    }
    assert_eq!(relative_error_magnitude(0.0).unwrap(), 0.0);
    assert_eq!(relative_error_magnitude(1.0).unwrap(), 1.0);
}

proptest! {
    #[test]
    fn threshold_is_monotone_in_p(a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(standard_threshold(lo).unwrap() <= standard_threshold(hi).unwrap());
    }

    #[test]
    fn invalid_levels_rejected(p in prop_oneof![-10.0f64..-1e-9, 1.0 + 1e-9..10.0]) {
        prop_assert!(standard_threshold(p).is_err());
        prop_assert!(relative_error_magnitude(p).is_err());
    }
}
