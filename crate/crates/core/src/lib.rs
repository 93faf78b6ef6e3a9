//! Training-free activation sparsity on toy transformer blocks.
//!
//! Magnitude thresholding with histogram calibration, closed-form error
//! theory and its Monte Carlo check, per-matrix greedy sparsity allocation,
//! and a column-skipping sparse GEMV with a benchmark harness. Everything
//! numeric is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! bottom fix the common choices.

pub mod error;
pub mod fit;
pub mod greedy;
pub mod histogram;
pub mod io;
pub mod kernel;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod sparsify;
pub mod tensor;
pub mod theory;

pub use error::{Result, TealError};
pub use fit::{fit_distribution, DistributionFit, Family};
pub use greedy::{
    cost_estimate, greedy_allocate, greedy_optimize, select_config, uniform_config, BlockObjective, GreedyStep,
    GreedyTrace, SparsityObjective, StepPolicy,
};
pub use histogram::{ActivationHistogram, DEFAULT_BINS};
pub use kernel::{
    bench_gemv, sparse_gemv, sparse_gemv_counted, traffic_model, BenchConfig, BenchPoint, BenchResult, TrafficReport,
};
pub use model::{
    block_forward_dense, block_forward_observed, block_forward_sparse, calibrate_block, intermediate_error_cats,
    intermediate_error_teal, mlp_forward_cats, mlp_forward_dense, mlp_input, BlockCalibration, BlockDims,
    BlockSparsityConfig, InputDistribution, MatrixKind, Model, Tap, TransformerBlock,
};
pub use rng::{sample_gaussian, sample_laplace, RngStream};
pub use scalar::Scalar;
pub use sparsify::{realized_sparsity, sparsify, sparsify_batched, BatchSparsified, Threshold};
pub use tensor::{linear, matmul_dense, Layout, Matrix, Vector};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type Vector32 = Vector<f32>;
pub type Vector64 = Vector<f64>;
pub type Threshold32 = Threshold<f32>;
pub type Threshold64 = Threshold<f64>;
pub type Block32 = TransformerBlock<f32>;
pub type Block64 = TransformerBlock<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Config32 = BlockSparsityConfig<f32>;
pub type Config64 = BlockSparsityConfig<f64>;
