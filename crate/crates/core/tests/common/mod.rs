#![allow(dead_code)]

use teal_core::{
    calibrate_block, mlp_input, Block32, BlockCalibration, BlockDims, InputDistribution, Layout, Matrix32, Model32,
    RngStream, TransformerBlock, DEFAULT_BINS,
};

pub const BLOCK_SEED: u64 = 2024;
pub const PROFILE_SEED: u64 = 77;
pub const CALIB_SEED: u64 = 1;
pub const HELDOUT_SEED: u64 = 2;
pub const SEQ: usize = 128;
pub const CALIB_SEQS: usize = 10;

pub fn default_block() -> Block32 {
    TransformerBlock::generate(&RngStream::new(BLOCK_SEED), BlockDims::DEFAULT).unwrap()
}

pub fn default_model() -> Model32 {
    Model32::generate(BLOCK_SEED, 4, BlockDims::DEFAULT).unwrap()
}

/// Residual-stream inputs with heterogeneous channel scales.
pub fn inputs(d_model: usize, seed: u64, count: usize, seq: usize) -> Vec<Matrix32> {
    InputDistribution::with_channel_spread(d_model, InputDistribution::DEFAULT_SPREAD, PROFILE_SEED)
        .unwrap()
        .sample_many(&RngStream::new(seed), count, seq)
}

pub fn isotropic_inputs(d_model: usize, seed: u64, count: usize, seq: usize) -> Vec<Matrix32> {
    InputDistribution::isotropic(d_model).sample_many(&RngStream::new(seed), count, seq)
}

pub fn calibrate(block: &Block32, samples: &[Matrix32]) -> BlockCalibration {
    calibrate_block(block, samples, DEFAULT_BINS, "block").unwrap()
}

pub fn stack(ms: &[Matrix32]) -> Matrix32 {
    let cols = ms[0].cols();
    let mut data = Vec::new();
    for m in ms {
        data.extend_from_slice(m.to_layout(Layout::RowMajor).as_slice());
    }
    Matrix32::new(data.len() / cols, cols, Layout::RowMajor, data).unwrap()
}

/// All MLP-input rows of the given block inputs as one matrix.
pub fn stacked_mlp_inputs(block: &Block32, xs: &[Matrix32]) -> Matrix32 {
    let hs: Vec<Matrix32> = xs.iter().map(|x| mlp_input(block, x).unwrap()).collect();
    stack(&hs)
}

/// `P(|Z| <= t)` by composite Simpson on the standard normal density.
pub fn simpson_central_mass(t: f64) -> f64 {
    let n = 4000;
    let h = t / n as f64;
    let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = phi(0.0) + phi(t);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * phi(i as f64 * h);
    }
    2.0 * s * h / 3.0
}

/// Inverse of [`simpson_central_mass`] by bisection.
pub fn oracle_threshold(p: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 10.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if simpson_central_mass(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
