mod common;

use common::*;
use teal_core::model::{relative_error, tap_realized_sparsity};
use teal_core::{
    block_forward_dense, block_forward_observed, block_forward_sparse, calibrate_block, fit_distribution,
    intermediate_error_cats, intermediate_error_teal, linear, mlp_forward_cats, mlp_forward_dense, uniform_config,
    Block32, BlockDims, BlockSparsityConfig, Config32, Family, Layout, Matrix32, MatrixKind, RngStream, Tap,
    TransformerBlock,
};

fn small_dims() -> BlockDims {
    BlockDims {
        d_model: 64,
        heads: 4,
        d_ff: 176,
    }
}

/// Straight-line f64 transcription of the block, row by row.
fn scalar_block(block: &Block32, x: &Matrix32) -> Vec<Vec<f64>> {
    let d = block.dims();
    let hd = d.d_model / d.heads;
    let seq = x.rows();
    let matvec = |w: &Matrix32, v: &[f64]| -> Vec<f64> {
        (0..w.rows())
            .map(|i| (0..w.cols()).map(|j| w.get(i, j) as f64 * v[j]).sum())
            .collect()
    };
    let norm = |v: &[f64], g: &[f32]| -> Vec<f64> {
        let ms = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        v.iter().zip(g).map(|(a, &s)| a * inv * s as f64).collect()
    };
    let rows: Vec<Vec<f64>> = (0..seq)
        .map(|i| (0..d.d_model).map(|j| x.get(i, j) as f64).collect())
        .collect();
    let h: Vec<Vec<f64>> = rows.iter().map(|r| norm(r, block.rms_attn())).collect();
    let q: Vec<Vec<f64>> = h.iter().map(|r| matvec(block.matrix(MatrixKind::Q), r)).collect();
    let k: Vec<Vec<f64>> = h.iter().map(|r| matvec(block.matrix(MatrixKind::K), r)).collect();
    let v: Vec<Vec<f64>> = h.iter().map(|r| matvec(block.matrix(MatrixKind::V), r)).collect();
    let mut out = Vec::new();
    for i in 0..seq {
        let mut a = vec![0.0; d.d_model];
        for head in 0..d.heads {
            let r = head * hd..(head + 1) * hd;
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    q[i][r.clone()]
                        .iter()
                        .zip(&k[j][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / (hd as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in r.clone() {
                    a[c] += ej / z * v[j][c];
                }
            }
        }
        let o = matvec(block.matrix(MatrixKind::O), &a);
        let y: Vec<f64> = rows[i].iter().zip(&o).map(|(a, b)| a + b).collect();
        let h2 = norm(&y, block.rms_mlp());
        let g = matvec(block.matrix(MatrixKind::Gate), &h2);
        let u = matvec(block.matrix(MatrixKind::Up), &h2);
        let mid: Vec<f64> = g.iter().zip(&u).map(|(g, u)| g / (1.0 + (-g).exp()) * u).collect();
        let dn = matvec(block.matrix(MatrixKind::Down), &mid);
        out.push(y.iter().zip(&dn).map(|(a, b)| a + b).collect());
    }
    out
}

#[test]
fn dense_forward_matches_scalar_oracle() {
    let block = Block32::generate(&RngStream::new(8), small_dims()).unwrap();
    let x = isotropic_inputs(64, 9, 1, 8).remove(0);
    let y = block_forward_dense(&block, &x).unwrap();
    let want = scalar_block(&block, &x);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            num += (y.get(i, j) as f64 - w).powi(2);
            den += w * w;
        }
    }
    assert!((num / den).sqrt() < 1e-5, "relative gap {}", (num / den).sqrt());
}

#[test]
fn weight_scale_follows_fan_in() {
    let block = default_block();
    let w = block.matrix(MatrixKind::Q).as_slice();
    let n = w.len() as f64;
    let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
    let sd = (w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd * 16.0 - 1.0).abs() < 0.02, "sd {sd}");
}

#[test]
fn single_token_attention_returns_values() {
    let block = Block32::generate(&RngStream::new(3), small_dims()).unwrap();
    let x = isotropic_inputs(64, 4, 1, 1).remove(0);
    let mut pre = None;
    let mut intra = None;
    block_forward_observed(&block, &x, None, &mut |tap, m| match tap {
        Tap::PreAttn => pre = Some(m.clone()),
        Tap::IntraAttn => intra = Some(m.clone()),
        _ => {}
    })
    .unwrap();
    let v = linear(&pre.unwrap(), block.matrix(MatrixKind::V)).unwrap();
    assert_eq!(intra.unwrap(), v);
}

#[test]
fn zero_config_is_bit_identical_to_dense() {
    let block = default_block();
    let x = inputs(256, 5, 1, 32).remove(0);
    let dense = block_forward_dense(&block, &x).unwrap();
    let sparse = block_forward_sparse(&block, &x, &Config32::dense()).unwrap();
    let bits = |m: &Matrix32| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&dense), bits(&sparse));
}

#[test]
fn full_sparsity_leaves_only_the_residual() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, 2, 32));
    let x = inputs(256, 6, 1, 32).remove(0);
    let cfg = uniform_config::<f32>(&calib, 1.0).unwrap();
    assert_eq!(block_forward_sparse(&block, &x, &cfg).unwrap(), x);
}

#[test]
fn error_grows_with_uniform_sparsity() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, CALIB_SEQS, SEQ));
    let held = inputs(256, HELDOUT_SEED, 4, SEQ);
    let refs: Vec<Matrix32> = held.iter().map(|x| block_forward_dense(&block, x).unwrap()).collect();
    let mut prev = -1.0;
    for i in 0..10 {
        let p = i as f64 / 10.0;
        let cfg = uniform_config::<f32>(&calib, p).unwrap();
        let outs: Vec<Matrix32> = held
            .iter()
            .map(|x| block_forward_sparse(&block, x, &cfg).unwrap())
            .collect();
        let e = relative_error(&outs, &refs);
        if i == 0 {
            assert_eq!(e, 0.0);
        }
        assert!(e >= prev, "error fell at p={p}: {e} < {prev}");
        prev = e;
    }
    let cfg = uniform_config::<f32>(&calib, 0.25).unwrap();
    let outs: Vec<Matrix32> = held
        .iter()
        .map(|x| block_forward_sparse(&block, x, &cfg).unwrap())
        .collect();
    assert!(relative_error(&outs, &refs) < 0.15);
}

#[test]
fn causal_in_both_passes() {
    let block = Block32::generate(&RngStream::new(12), small_dims()).unwrap();
    let calib = calibrate_block(&block, &isotropic_inputs(64, 13, 2, 16), 512, "b").unwrap();
    let cfg = uniform_config::<f32>(&calib, 0.5).unwrap();
    let x = isotropic_inputs(64, 14, 1, 16).remove(0);
    let mut x2 = x.clone();
    for j in 0..64 {
        x2.set(9, j, x.get(9, j) * -3.0 + 1.0);
    }
    let dense = |x: &Matrix32| block_forward_dense(&block, x).unwrap();
    let sparse = |x: &Matrix32| block_forward_sparse(&block, x, &cfg).unwrap();
    let runs: [&dyn Fn(&Matrix32) -> Matrix32; 2] = [&dense, &sparse];
    for run in runs {
        let (a, b) = (run(&x), run(&x2));
        for i in 0..9 {
            assert_eq!(a.row(i), b.row(i), "row {i} changed");
        }
        assert_ne!(a.row(9), b.row(9));
    }
}

#[test]
fn cats_endpoints_and_calibrated_sparsity() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, CALIB_SEQS, SEQ));
    let x = stacked_mlp_inputs(&block, &inputs(256, HELDOUT_SEED, 4, SEQ));
    let dense = mlp_forward_dense(&block, &x).unwrap();
    let at = |p| mlp_forward_cats(&block, &x, calib.tap_threshold(Tap::GateAct, p).unwrap()).unwrap();
    assert_eq!(at(0.0).output, dense);
    assert!(at(1.0).output.as_slice().iter().all(|&v| v == 0.0));
    let half = at(0.5).intermediate_sparsity;
    assert!((0.49..=0.51).contains(&half), "{half}");
}

#[test]
fn intermediate_errors_endpoints() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, 2, 64));
    let x = stacked_mlp_inputs(&block, &inputs(256, HELDOUT_SEED, 2, 64));
    let teal = |p| intermediate_error_teal(&block, &x, calib.tap_threshold(Tap::PreMlp, p).unwrap()).unwrap();
    let cats = |p| intermediate_error_cats(&block, &x, calib.tap_threshold(Tap::GateAct, p).unwrap()).unwrap();
    assert_eq!(teal(0.0), 0.0);
    assert_eq!(cats(0.0), 0.0);
    assert!((teal(1.0) - 1.0).abs() < 1e-12);
    assert!((cats(1.0) - 1.0).abs() < 1e-12);
    let zero = Matrix32::zeros(3, 256, Layout::RowMajor);
    assert!(intermediate_error_teal(&block, &zero, calib.tap_threshold(Tap::PreMlp, 0.5).unwrap()).is_err());
}

#[test]
fn calibration_counts_and_determinism() {
    let block = Block32::generate(&RngStream::new(15), small_dims()).unwrap();
    let xs = isotropic_inputs(64, 16, 3, 20);
    let a = calibrate_block(&block, &xs, 256, "b").unwrap();
    let b = calibrate_block(&block, &xs, 256, "b").unwrap();
    assert_eq!(a, b);
    for (tap, width) in [
        (Tap::PreAttn, 64),
        (Tap::IntraAttn, 64),
        (Tap::PreMlp, 64),
        (Tap::IntraMlp, 176),
        (Tap::GateAct, 176),
    ] {
        assert_eq!(a.histogram(tap).total(), 3 * 20 * width, "{}", tap.name());
    }
    assert!(calibrate_block::<f32>(&block, &[], 256, "b").is_err());
}

#[test]
fn pre_attention_is_gaussian_and_mlp_intermediate_is_laplacian() {
    let block = default_block();
    let mut pre = Vec::new();
    let mut mid = Vec::new();
    for x in isotropic_inputs(256, 17, 4, SEQ) {
        block_forward_observed(&block, &x, None, &mut |tap, m| match tap {
            Tap::PreAttn => pre.extend_from_slice(m.as_slice()),
            Tap::IntraMlp => mid.extend_from_slice(m.as_slice()),
            _ => {}
        })
        .unwrap();
    }
    let nll = |xs: &[f32], f| fit_distribution(xs, f).unwrap().neg_log_likelihood;
    assert!(nll(&pre, Family::Gaussian) < nll(&pre, Family::Laplace));
    assert!(nll(&mid, Family::Laplace) < nll(&mid, Family::Gaussian));
}

#[test]
fn uniform_thresholds_reproduce_realized_sparsity() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, CALIB_SEQS, SEQ));
    let held = inputs(256, HELDOUT_SEED, CALIB_SEQS, SEQ);
    for tap in [Tap::PreAttn, Tap::IntraAttn, Tap::PreMlp, Tap::IntraMlp] {
        for p in [0.25, 0.5, 0.75] {
            let s = tap_realized_sparsity(&block, &held, &calib, tap, p).unwrap();
            assert!((s - p).abs() <= 0.01, "{} p={p}: {s}", tap.name());
        }
    }
}

#[test]
fn uniform_config_bookkeeping() {
    let block = default_block();
    let calib = calibrate(&block, &inputs(256, CALIB_SEED, 1, 32));
    let zero = uniform_config::<f32>(&calib, 0.0).unwrap();
    assert_eq!(zero, BlockSparsityConfig::dense());
    let c = uniform_config::<f32>(&calib, 0.4).unwrap();
    assert_eq!(c.block_sparsity(&block.dims()), 0.4);
    assert!(uniform_config::<f32>(&calib, 1.1).is_err());
}

#[test]
fn f64_block_agrees_with_f32() {
    let b32 = Block32::generate(&RngStream::new(21), small_dims()).unwrap();
    let b64 = TransformerBlock::<f64>::generate(&RngStream::new(21), small_dims()).unwrap();
    let x32 = isotropic_inputs(64, 22, 1, 8).remove(0);
    let x64 = teal_core::Matrix64::from_fn(8, 64, Layout::RowMajor, |i, j| x32.get(i, j) as f64);
    let y32 = block_forward_dense(&b32, &x32).unwrap();
    let y64 = block_forward_dense(&b64, &x64).unwrap();
    for i in 0..8 {
        for j in 0..64 {
            assert!((y32.get(i, j) as f64 - y64.get(i, j)).abs() < 1e-4);
        }
    }
}
