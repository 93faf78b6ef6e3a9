//! Closed-form error of magnitude sparsification under an independent
//! Gaussian model, plus the Monte Carlo estimator used to check it.
//!
//! With `X_i ~ N(0, σ_X²)`, `W_ji ~ N(0, σ_W²)` and `t` the standardized
//! threshold `t_p / σ_X` (so that `P(|X| <= t_p) = p`):
//!
//! * `Var((X - s(X))·W) = σ_X² σ_W² (p - 2 t φ(t))`
//! * `E‖(X - s(X))Wᵀ‖₂ = σ_X σ_W sqrt(m n (p - 2 t φ(t)))`
//! * relative error `sqrt(p - 2 t φ(t))`, against `sqrt(p)` for a uniformly
//!   random mask of the same density.
//!
//! All normal-distribution quantities go through the single [`erf`] /
//! [`erfc`] pair defined here.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

use crate::error::{Result, TealError};
use crate::kernel::sparse_gemv;
use crate::rng::{fill_gaussian, RngStream};
use crate::sparsify::Threshold;
use crate::tensor::{matmul_dense, norm_l2, Layout, Matrix};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const SERIES_LIMIT: f64 = 3.0;

/// Error function. Power series `erf(x) = 2/√π · e^{-x²} Σ 2ⁿx^{2n+1}/(2n+1)!!`
/// below |x| = 3, continued fraction for `erfc` above.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return -erf(-x);
    }
    if x < SERIES_LIMIT {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function `1 - erf(x)`, accurate in the upper tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < SERIES_LIMIT {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut k = 0.0;
    loop {
        k += 1.0;
        term *= 2.0 * x2 / (2.0 * k + 1.0);
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    FRAC_2_SQRT_PI * (-x2).exp() * sum
}

// erfc(x) = e^{-x²}/√π · 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
// evaluated bottom-up; 80 levels is far past convergence for x >= 3.
fn erfc_cf(x: f64) -> f64 {
    if x > 27.0 {
        return 0.0;
    }
    let mut f = x;
    for n in (1..=80).rev() {
        f = x + (n as f64 * 0.5) / f;
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

/// Standard normal density φ.
pub fn normal_pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// Standard normal CDF Φ.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / SQRT_2)
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TealError::InvalidArgument(format!("sparsity {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_sigma(name: &str, s: f64) -> Result<()> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(TealError::InvalidArgument(format!("{name} must be positive, got {s}")));
    }
    Ok(())
}

/// Standardized threshold `t` with `P(|Z| <= t) = p`, `Z ~ N(0,1)`, i.e.
/// `Φ⁻¹((1+p)/2)`, by bisection to 1e-13. Infinite at `p = 1`.
pub fn standard_threshold(p: f64) -> Result<f64> {
    check_p(p)?;
    if p == 0.0 {
        return Ok(0.0);
    }
    if p == 1.0 {
        return Ok(f64::INFINITY);
    }
    // Compare through erfc in the upper half to keep precision near p = 1.
    let covers = |t: f64| {
        if p < 0.5 {
            erf(t / SQRT_2) >= p
        } else {
            erfc(t / SQRT_2) <= 1.0 - p
        }
    };
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if covers(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `t_p = σ_X · Φ⁻¹((1+p)/2)`; `+∞` at `p = 1`.
pub fn gaussian_threshold(p: f64, sigma_x: f64) -> Result<f64> {
    check_sigma("sigma_x", sigma_x)?;
    Ok(sigma_x * standard_threshold(p)?)
}

/// `p - 2 t φ(t)` at the standardized threshold, the pruned share of
/// `E[X²]`; clamped at 0 against rounding for tiny `p`.
pub fn pruned_energy_fraction(p: f64) -> Result<f64> {
    let t = standard_threshold(p)?;
    let tail = if t.is_finite() { 2.0 * t * normal_pdf(t) } else { 0.0 };
    Ok((p - tail).max(0.0))
}

/// `Var((X - s(X))·W)` for independent scalars.
pub fn scalar_error_variance(sigma_x: f64, sigma_w: f64, p: f64) -> Result<f64> {
    check_sigma("sigma_x", sigma_x)?;
    check_sigma("sigma_w", sigma_w)?;
    Ok(sigma_x * sigma_x * sigma_w * sigma_w * pruned_energy_fraction(p)?)
}

/// `E‖(x - s(x))Wᵀ‖₂ = σ_X σ_W sqrt(m·n·(p - 2tφ(t)))`.
pub fn expected_error_norm(m: usize, n: usize, sigma_x: f64, sigma_w: f64, p: f64) -> Result<f64> {
    if m == 0 || n == 0 {
        return Err(TealError::InvalidArgument("dimensions must be >= 1".into()));
    }
    check_sigma("sigma_x", sigma_x)?;
    check_sigma("sigma_w", sigma_w)?;
    Ok(sigma_x * sigma_w * (m as f64 * n as f64 * pruned_energy_fraction(p)?).sqrt())
}

/// Relative output error of magnitude pruning, `sqrt(p - 2tφ(t))`.
pub fn relative_error_magnitude(p: f64) -> Result<f64> {
    Ok(pruned_energy_fraction(p)?.sqrt())
}

/// Relative output error of a uniformly random mask with density `p`.
pub fn relative_error_random(p: f64) -> Result<f64> {
    check_p(p)?;
    Ok(p.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PruneMode {
    /// Zero entries with `|x_i| <= t_p` at the exact Gaussian threshold.
    Magnitude,
    /// Zero each entry independently with probability `p`.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    /// Input length (matrix columns).
    pub m: usize,
    /// Output length (matrix rows).
    pub n: usize,
    pub sigma_x: f64,
    pub sigma_w: f64,
    pub trials: usize,
}

impl McConfig {
    pub fn square(dim: usize, trials: usize) -> Self {
        McConfig {
            m: dim,
            n: dim,
            sigma_x: 1.0,
            sigma_w: 1.0,
            trials,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and standard error of `‖Y - Ŷ‖₂ / ‖Y‖₂` over `trials` independent
/// draws of both `x` and `W`. Trial `k` uses child stream `k` of `rng`, so
/// the result depends only on the arguments.
pub fn mc_relative_error(cfg: &McConfig, p: f64, mode: PruneMode, rng: &RngStream) -> Result<McEstimate> {
    check_p(p)?;
    check_sigma("sigma_x", cfg.sigma_x)?;
    check_sigma("sigma_w", cfg.sigma_w)?;
    if cfg.trials < 2 {
        return Err(TealError::InvalidArgument("need at least 2 trials".into()));
    }
    if cfg.m == 0 || cfg.n == 0 {
        return Err(TealError::InvalidArgument("dimensions must be >= 1".into()));
    }
    let t = gaussian_threshold(p, cfg.sigma_x)?;
    let skip_zero = Threshold::<f64>::zero();
    let mut x = vec![0.0f64; cfg.m];
    let mut err_in = vec![0.0f64; cfg.m];
    let mut wbuf = vec![0.0f64; cfg.m * cfg.n];
    let mut ratios = Vec::with_capacity(cfg.trials);
    for trial in 0..cfg.trials {
        let mut r = rng.split(trial as u64);
        fill_gaussian(&mut r, cfg.sigma_x, &mut x);
        fill_gaussian(&mut r, cfg.sigma_w, &mut wbuf);
        for (e, &xi) in err_in.iter_mut().zip(&x) {
            let pruned = match mode {
                PruneMode::Magnitude => xi.abs() <= t,
                PruneMode::Random => r.bernoulli(p),
            };
            *e = if pruned { xi } else { 0.0 };
        }
        let w = Matrix::new(cfg.n, cfg.m, Layout::ColMajor, std::mem::take(&mut wbuf))?;
        let y = matmul_dense(&x, &w)?;
        let dy = sparse_gemv(&err_in, skip_zero, &w)?;
        wbuf = w.into_inner();
        let ny = y.norm_l2();
        ratios.push(if ny > 0.0 { norm_l2(&dy) / ny } else { 0.0 });
    }
    let k = ratios.len() as f64;
    let mean = ratios.iter().sum::<f64>() / k;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (k - 1.0);
    Ok(McEstimate {
        mean,
        stderr: (var / k).sqrt(),
    })
}

/// One sparsity level of the analytic-vs-empirical error curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorCurvePoint {
    pub p: f64,
    pub analytic_magnitude: f64,
    pub analytic_random: f64,
    pub mc_magnitude: McEstimate,
    pub mc_random: McEstimate,
}

impl ErrorCurvePoint {
    pub fn magnitude_within(&self, k_stderr: f64) -> bool {
        (self.mc_magnitude.mean - self.analytic_magnitude).abs() <= k_stderr * self.mc_magnitude.stderr
    }

    pub fn random_within(&self, k_stderr: f64) -> bool {
        (self.mc_random.mean - self.analytic_random).abs() <= k_stderr * self.mc_random.stderr
    }
}

/// Analytic and Monte Carlo errors for both pruning modes at every level.
/// Level `i` draws from child streams `2i` (magnitude) and `2i+1` (random).
pub fn error_curve(ps: &[f64], cfg: &McConfig, rng: &RngStream) -> Result<Vec<ErrorCurvePoint>> {
    ps.iter()
        .enumerate()
        .map(|(i, &p)| {
            Ok(ErrorCurvePoint {
                p,
                analytic_magnitude: relative_error_magnitude(p)?,
                analytic_random: relative_error_random(p)?,
                mc_magnitude: mc_relative_error(cfg, p, PruneMode::Magnitude, &rng.split(2 * i as u64))?,
                mc_random: mc_relative_error(cfg, p, PruneMode::Random, &rng.split(2 * i as u64 + 1))?,
            })
        })
        .collect()
}
