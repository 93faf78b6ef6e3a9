//! Footprint-weighted greedy allocation of per-matrix sparsity inside a
//! block, plus selection of a recorded configuration at a target level.

use crate::error::{Result, TealError};
use crate::model::{
    block_forward_dense, block_forward_sparse, block_sparsity, BlockCalibration, BlockSparsityConfig, MatrixKind,
    TransformerBlock,
};
use crate::scalar::Scalar;
use crate::tensor::{diff_norm_l2, Matrix};

/// Tolerance on the bookkeeping identity `P = Σ p_i f_i / F`.
pub const TRACE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPolicy {
    alpha: f64,
}

impl StepPolicy {
    pub const CAP: f64 = 1.0;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(TealError::InvalidArgument(format!(
                "alpha must be in (0, 1], got {alpha}"
            )));
        }
        Ok(StepPolicy { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `δ_i = α F / f_i`.
    pub fn deltas(&self, footprints: &[u64]) -> Vec<f64> {
        let total: u64 = footprints.iter().sum();
        footprints
            .iter()
            .map(|&f| self.alpha * total as f64 / f as f64)
            .collect()
    }
}

/// Anything whose error can be scored as a function of per-layer levels.
pub trait SparsityObjective {
    fn layer_names(&self) -> Vec<String>;
    fn footprints(&self) -> Vec<u64>;
    fn error(&self, levels: &[f64]) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyStep {
    pub block_sparsity: f64,
    pub levels: Vec<f64>,
    /// Layer index raised at this step; `None` for the initial record.
    pub chosen: Option<usize>,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GreedyTrace {
    pub block_id: String,
    pub alpha: f64,
    pub layer_names: Vec<String>,
    pub footprints: Vec<u64>,
    pub steps: Vec<GreedyStep>,
}

impl GreedyTrace {
    pub fn chosen_name(&self, step: &GreedyStep) -> &str {
        step.chosen.map_or("-", |i| self.layer_names[i].as_str())
    }

    pub fn final_step(&self) -> Option<&GreedyStep> {
        self.steps.last()
    }

    /// Check ordering and bookkeeping invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.layer_names.len();
        if n == 0 || self.footprints.len() != n || self.footprints.contains(&0) {
            return Err(TealError::InvalidArgument(
                "trace needs one positive footprint per layer".into(),
            ));
        }
        if self.steps.is_empty() {
            return Err(TealError::Empty("trace has no steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            if s.levels.len() != n {
                return Err(TealError::Shape(format!(
                    "step {i} has {} levels, expected {n}",
                    s.levels.len()
                )));
            }
            if s.levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(TealError::InvalidArgument(format!(
                    "step {i} has a level outside [0, 1]"
                )));
            }
            let p = block_sparsity(&s.levels, &self.footprints);
            if (p - s.block_sparsity).abs() > TRACE_TOLERANCE {
                return Err(TealError::InvalidArgument(format!(
                    "step {i}: recorded P {} but levels give {p}",
                    s.block_sparsity
                )));
            }
            if s.chosen.is_some_and(|c| c >= n) {
                return Err(TealError::InvalidArgument(format!(
                    "step {i}: chosen layer out of range"
                )));
            }
            if i > 0 {
                let prev = &self.steps[i - 1];
                if s.block_sparsity <= prev.block_sparsity {
                    return Err(TealError::InvalidArgument(format!(
                        "P not strictly increasing at step {i}"
                    )));
                }
                if s.levels.iter().zip(&prev.levels).any(|(a, b)| a < b) {
                    return Err(TealError::InvalidArgument(format!("a level decreased at step {i}")));
                }
            }
        }
        Ok(())
    }

    /// First record with `P ≥ target`.
    pub fn select(&self, target: f64) -> Result<&GreedyStep> {
        if !(0.0..=1.0).contains(&target) {
            return Err(TealError::InvalidArgument(format!("target {target} outside [0, 1]")));
        }
        self.steps.iter().find(|s| s.block_sparsity >= target).ok_or_else(|| {
            TealError::InvalidArgument(format!(
                "target {target} beyond trace range (max P {})",
                self.steps.last().map_or(0.0, |s| s.block_sparsity)
            ))
        })
    }
}

/// Greedy loop over an arbitrary objective: from all-zero levels, try
/// raising each uncapped layer by its `δ_i` with the others held at their
/// committed levels, keep the lowest-error candidate (ties go to the lower
/// index), record, and stop once `P ≥ 1` or every layer is capped.
pub fn greedy_allocate<O: SparsityObjective + ?Sized>(
    objective: &O,
    policy: StepPolicy,
    block_id: &str,
) -> Result<GreedyTrace> {
    let names = objective.layer_names();
    let footprints = objective.footprints();
    if names.is_empty() || names.len() != footprints.len() || footprints.contains(&0) {
        return Err(TealError::InvalidArgument(
            "objective needs one positive footprint per layer".into(),
        ));
    }
    let deltas = policy.deltas(&footprints);
    let mut levels = vec![0.0; names.len()];
    let mut steps = vec![GreedyStep {
        block_sparsity: 0.0,
        levels: levels.clone(),
        chosen: None,
        error: objective.error(&levels)?,
    }];
    loop {
        let p = block_sparsity(&levels, &footprints);
        if p >= 1.0 {
            break;
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..levels.len() {
            if levels[i] >= StepPolicy::CAP {
                continue;
            }
            let saved = levels[i];
            levels[i] = (saved + deltas[i]).min(StepPolicy::CAP);
            let e = objective.error(&levels)?;
            levels[i] = saved;
            if !e.is_finite() {
                return Err(TealError::NonFinite(format!("candidate error for {}", names[i])));
            }
            if best.is_none_or(|(_, b)| e < b) {
                best = Some((i, e));
            }
        }
        let Some((i, e)) = best else { break };
        levels[i] = (levels[i] + deltas[i]).min(StepPolicy::CAP);
        steps.push(GreedyStep {
            block_sparsity: block_sparsity(&levels, &footprints),
            levels: levels.clone(),
            chosen: Some(i),
            error: e,
        });
    }
    Ok(GreedyTrace {
        block_id: block_id.to_string(),
        alpha: policy.alpha(),
        layer_names: names,
        footprints,
        steps,
    })
}

/// Block output error against the dense forward, Frobenius over all
/// calibration sequences.
pub struct BlockObjective<'a, T> {
    block: &'a TransformerBlock<T>,
    calib: &'a BlockCalibration,
    inputs: &'a [Matrix<T>],
    reference: Vec<Matrix<T>>,
}

impl<'a, T: Scalar> BlockObjective<'a, T> {
    pub fn new(block: &'a TransformerBlock<T>, calib: &'a BlockCalibration, inputs: &'a [Matrix<T>]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(TealError::Empty("greedy needs calibration inputs".into()));
        }
        let reference = inputs
            .iter()
            .map(|x| block_forward_dense(block, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockObjective {
            block,
            calib,
            inputs,
            reference,
        })
    }

    pub fn config(&self, levels: &[f64]) -> Result<BlockSparsityConfig<T>> {
        let levels: [f64; 7] = levels
            .try_into()
            .map_err(|_| TealError::Shape(format!("expected 7 levels, got {}", levels.len())))?;
        BlockSparsityConfig::resolve(levels, self.calib)
    }
}

impl<T: Scalar> SparsityObjective for BlockObjective<'_, T> {
    fn layer_names(&self) -> Vec<String> {
        MatrixKind::ALL.iter().map(|k| k.name().to_string()).collect()
    }

    fn footprints(&self) -> Vec<u64> {
        self.block.dims().footprints().to_vec()
    }

    fn error(&self, levels: &[f64]) -> Result<f64> {
        let cfg = self.config(levels)?;
        let mut sq = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.reference) {
            let y_hat = block_forward_sparse(self.block, x, &cfg)?;
            sq += diff_norm_l2(y.as_slice(), y_hat.as_slice()).powi(2);
        }
        Ok(sq.sqrt())
    }
}

/// Greedy allocation for one transformer block.
pub fn greedy_optimize<T: Scalar>(
    block: &TransformerBlock<T>,
    calib: &BlockCalibration,
    inputs: &[Matrix<T>],
    policy: StepPolicy,
    block_id: &str,
) -> Result<GreedyTrace> {
    greedy_allocate(&BlockObjective::new(block, calib, inputs)?, policy, block_id)
}

/// All seven levels equal to `p`.
pub fn uniform_config<T: Scalar>(calib: &BlockCalibration, p: f64) -> Result<BlockSparsityConfig<T>> {
    BlockSparsityConfig::uniform(p, calib)
}

/// Levels of the first record with `P ≥ target`, resolved to thresholds.
pub fn select_config<T: Scalar>(
    trace: &GreedyTrace,
    target: f64,
    calib: &BlockCalibration,
) -> Result<BlockSparsityConfig<T>> {
    let step = trace.select(target)?;
    let levels: [f64; 7] = step
        .levels
        .as_slice()
        .try_into()
        .map_err(|_| TealError::Shape("block configs need exactly 7 levels".into()))?;
    BlockSparsityConfig::resolve(levels, calib)
}

/// Forward passes needed by the greedy search: `⌈M n² / α⌉` for `M`
/// calibration samples and `n` matrices.
pub fn cost_estimate(n_matrices: u64, alpha: f64, samples: u64) -> Result<u64> {
    if n_matrices == 0 || samples == 0 || !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TealError::InvalidArgument(format!(
            "cost_estimate needs positive arguments, got n={n_matrices} alpha={alpha} samples={samples}"
        )));
    }
    let raw = samples as f64 * (n_matrices * n_matrices) as f64 / alpha;
    let nearest = raw.round();
    // 0.05 is not exact in binary; do not let representation error add one.
    Ok(if (raw - nearest).abs() <= 1e-9 * raw.max(1.0) {
        nearest as u64
    } else {
        raw.ceil() as u64
    })
}
