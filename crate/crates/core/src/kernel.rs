//! Column-skipping sparse GEMV over column-major weights, a byte-traffic
//! model for it, and a median-of-reps latency harness.
//!
//! The threshold comparison is fused into the column loop: column `i` of `W`
//! is read only when `|x_i| > t`, and no separate mask is ever built.

use std::hint::black_box;
use std::time::{Duration, Instant};

use crate::error::{Result, TealError};
use crate::rng::{fill_gaussian, RngStream};
use crate::scalar::Scalar;
use crate::sparsify::{sparsify, Threshold};
use crate::tensor::{matmul_dense, Layout, Matrix, Vector};

fn check_operands<T: Scalar>(x: &[T], w: &Matrix<T>) -> Result<()> {
    if w.layout() != Layout::ColMajor {
        return Err(TealError::InvalidArgument(
            "sparse_gemv requires column-major weights".into(),
        ));
    }
    if x.len() != w.cols() {
        return Err(TealError::Shape(format!(
            "input length {} does not match matrix {}x{}",
            x.len(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

#[inline(always)]
fn gemv_skip<T: Scalar, const COUNT: bool>(x: &[T], t: Threshold<T>, w: &Matrix<T>, y: &mut [T]) -> u64 {
    let n = w.rows();
    let data = w.as_slice();
    let mut macs = 0u64;
    for (i, &xi) in x.iter().enumerate() {
        if t.prunes(xi) {
            continue;
        }
        let col = &data[i * n..(i + 1) * n];
        for (out, &wji) in y.iter_mut().zip(col) {
            *out = *out + xi * wji;
        }
        if COUNT {
            macs += n as u64;
        }
    }
    macs
}

/// `y = s_t(x)·Wᵀ` reading only the columns of `W` whose input survives the
/// threshold. Accumulates in ascending column order in the scalar type.
pub fn sparse_gemv<T: Scalar>(x: &[T], t: Threshold<T>, w: &Matrix<T>) -> Result<Vector<T>> {
    check_operands(x, w)?;
    let mut y = vec![T::zero(); w.rows()];
    gemv_skip::<T, false>(x, t, w, &mut y);
    Ok(y.into())
}

/// [`sparse_gemv`] into a caller-provided buffer (overwritten).
pub fn sparse_gemv_into<T: Scalar>(x: &[T], t: Threshold<T>, w: &Matrix<T>, y: &mut [T]) -> Result<()> {
    check_operands(x, w)?;
    if y.len() != w.rows() {
        return Err(TealError::Shape(format!(
            "output buffer has {} entries, matrix has {} rows",
            y.len(),
            w.rows()
        )));
    }
    y.fill(T::zero());
    gemv_skip::<T, false>(x, t, w, y);
    Ok(())
}

/// Instrumented variant: also returns the number of multiply-accumulates
/// executed.
pub fn sparse_gemv_counted<T: Scalar>(x: &[T], t: Threshold<T>, w: &Matrix<T>) -> Result<(Vector<T>, u64)> {
    check_operands(x, w)?;
    let mut y = vec![T::zero(); w.rows()];
    let macs = gemv_skip::<T, true>(x, t, w, &mut y);
    Ok((y.into(), macs))
}

/// Bytes moved by one GEMV under the column-skip model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficReport {
    pub weight_bytes_dense: u64,
    pub weight_bytes_sparse: u64,
    pub activation_bytes: u64,
    pub realized_sparsity: f64,
}

pub fn traffic_model(n: usize, m: usize, realized_sparsity: f64, bytes_per_element: usize) -> Result<TrafficReport> {
    if !(0.0..=1.0).contains(&realized_sparsity) {
        return Err(TealError::InvalidArgument(format!(
            "realized sparsity {realized_sparsity} outside [0, 1]"
        )));
    }
    let dense = (n as u64) * (m as u64) * bytes_per_element as u64;
    let sparse = ((1.0 - realized_sparsity) * dense as f64).round() as u64;
    Ok(TrafficReport {
        weight_bytes_dense: dense,
        weight_bytes_sparse: sparse,
        activation_bytes: (m * bytes_per_element) as u64,
        realized_sparsity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Output length `n` (matrix rows).
    pub rows: usize,
    /// Input length `m` (matrix columns).
    pub cols: usize,
    pub sparsities: Vec<f64>,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub const MIN_REPS: usize = 10;
    pub const MIN_WARMUP: usize = 3;
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchPoint {
    pub target_sparsity: f64,
    pub threshold: f64,
    pub traffic: TrafficReport,
    /// Columns actually read, `(1 - realized)·m`.
    pub columns_read: usize,
    pub median_ns: u64,
    pub min_ns: u64,
    pub dense_median_ns: u64,
    pub dense_min_ns: u64,
    pub reps: usize,
    /// Sum of the sparse outputs of the last rep, in f64.
    pub checksum: f64,
}

impl BenchPoint {
    pub fn speedup(&self) -> f64 {
        self.dense_median_ns as f64 / self.median_ns.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: usize,
    pub cols: usize,
    pub points: Vec<BenchPoint>,
}

fn median_min(mut samples: Vec<u64>) -> (u64, u64) {
    samples.sort_unstable();
    let n = samples.len();
    let med = if n % 2 == 1 {
        samples[n / 2]
    } else {
        (samples[n / 2 - 1] + samples[n / 2]) / 2
    };
    (med, samples[0])
}

/// Smallest nonzero step observed on the monotonic clock.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn relative_gap(a: &[f32], b: &[f32]) -> f64 {
    let num = crate::tensor::diff_norm_l2(a, b);
    let den = crate::tensor::norm_l2(b);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Times [`sparse_gemv`] against the dense reference on a seeded Gaussian
/// `W ∈ ℝ^{rows×cols}` (column-major) and `x ~ N(0,1)^cols`. For each
/// target sparsity `s` the threshold is the exact Gaussian quantile, so the
/// realized sparsity tracks `s`. Every rep's output is checked against
/// `matmul_dense(sparsify(x, t), W)` to 1e-5 relative.
pub fn bench_gemv(cfg: &BenchConfig) -> Result<BenchResult> {
    if cfg.reps < BenchConfig::MIN_REPS || cfg.warmup < BenchConfig::MIN_WARMUP {
        return Err(TealError::InvalidArgument(format!(
            "need reps >= {} and warmup >= {}, got {} / {}",
            BenchConfig::MIN_REPS,
            BenchConfig::MIN_WARMUP,
            cfg.reps,
            cfg.warmup
        )));
    }
    if cfg.rows == 0 || cfg.cols == 0 {
        return Err(TealError::InvalidArgument("matrix dimensions must be >= 1".into()));
    }
    let root = RngStream::new(cfg.seed);
    let mut w = vec![0.0f32; cfg.rows * cfg.cols];
    fill_gaussian(&mut root.split(0), 1.0, &mut w);
    let w = Matrix::new(cfg.rows, cfg.cols, Layout::ColMajor, w)?;
    let mut x = vec![0.0f32; cfg.cols];
    fill_gaussian(&mut root.split(1), 1.0, &mut x);

    let resolution = timer_resolution();
    let mut y = vec![0.0f32; cfg.rows];
    let mut points = Vec::with_capacity(cfg.sparsities.len());
    for &s in &cfg.sparsities {
        let t_exact = crate::theory::gaussian_threshold(s, 1.0)?;
        let t = if t_exact.is_finite() {
            Threshold::<f32>::from_f64(t_exact)?
        } else {
            Threshold::prune_all()
        };
        let reference = matmul_dense(&sparsify(&x, t), &w)?;
        let kept = x.iter().filter(|&&v| !t.prunes(v)).count();
        let realized = 1.0 - kept as f64 / cfg.cols as f64;
        let traffic = traffic_model(cfg.rows, cfg.cols, realized, 4)?;

        let mut sparse_ns = Vec::with_capacity(cfg.reps);
        let mut dense_ns = Vec::with_capacity(cfg.reps);
        for rep in 0..cfg.warmup + cfg.reps {
            let start = Instant::now();
            sparse_gemv_into(black_box(&x), black_box(t), black_box(&w), &mut y)?;
            black_box(&mut y);
            let el = start.elapsed();
            if relative_gap(&y, &reference) > 1e-5 {
                return Err(TealError::InvalidArgument(format!(
                    "sparse output diverged from reference at sparsity {s}, rep {rep}"
                )));
            }
            let start = Instant::now();
            let d = matmul_dense(black_box(&x), black_box(&w))?;
            black_box(&d);
            let el_dense = start.elapsed();
            if rep >= cfg.warmup {
                sparse_ns.push(el.as_nanos() as u64);
                dense_ns.push(el_dense.as_nanos() as u64);
            }
        }
        let (median_ns, min_ns) = median_min(sparse_ns);
        let (dense_median_ns, dense_min_ns) = median_min(dense_ns);
        let floor = 100 * resolution.as_nanos() as u64;
        if dense_median_ns < floor {
            return Err(TealError::TimerResolution(format!(
                "dense median {dense_median_ns} ns is under 100x the clock step ({} ns); \
                 use a larger shape or batch more work per rep",
                resolution.as_nanos()
            )));
        }
        points.push(BenchPoint {
            target_sparsity: s,
            threshold: t.value() as f64,
            traffic,
            columns_read: kept,
            median_ns,
            min_ns,
            dense_median_ns,
            dense_min_ns,
            reps: cfg.reps,
            checksum: y.iter().map(|&v| v as f64).sum(),
        });
    }
    Ok(BenchResult {
        rows: cfg.rows,
        cols: cfg.cols,
        points,
    })
}
