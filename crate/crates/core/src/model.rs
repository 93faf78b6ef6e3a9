//! Miniature pre-norm transformer block: RMSNorm, causal multi-head
//! attention without positional encoding, and a SwiGLU MLP
//! `(SiLU(x·W_gateᵀ) ⊙ x·W_upᵀ)·W_downᵀ`.
//!
//! Sparse forwards put each of the seven matrix inputs through its own
//! threshold before the multiplication. Attention scores are never
//! thresholded.

use std::borrow::Cow;
use std::fmt;

use crate::error::{Result, TealError};
use crate::histogram::ActivationHistogram;
use crate::rng::{fill_gaussian, RngStream};
use crate::scalar::Scalar;
use crate::sparsify::{realized_sparsity, sparsify_batched, Threshold};
use crate::tensor::{diff_norm_l2, linear, norm_l2, Layout, Matrix, Vector};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MatrixKind {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl MatrixKind {
    pub const ALL: [MatrixKind; 7] = [
        MatrixKind::Q,
        MatrixKind::K,
        MatrixKind::V,
        MatrixKind::O,
        MatrixKind::Gate,
        MatrixKind::Up,
        MatrixKind::Down,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MatrixKind::Q => "q",
            MatrixKind::K => "k",
            MatrixKind::V => "v",
            MatrixKind::O => "o",
            MatrixKind::Gate => "gate",
            MatrixKind::Up => "up",
            MatrixKind::Down => "down",
        }
    }

    pub fn parse(s: &str) -> Option<MatrixKind> {
        MatrixKind::ALL.into_iter().find(|k| k.name() == s)
    }

    /// Hidden state this matrix consumes.
    pub fn input_tap(self) -> Tap {
        match self {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V => Tap::PreAttn,
            MatrixKind::O => Tap::IntraAttn,
            MatrixKind::Gate | MatrixKind::Up => Tap::PreMlp,
            MatrixKind::Down => Tap::IntraMlp,
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Observation points inside a block. The first four are the matrix input
/// positions; `GateAct` is `SiLU(x·W_gateᵀ)`, needed only for output-side
/// (CATS-style) masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tap {
    PreAttn,
    IntraAttn,
    PreMlp,
    IntraMlp,
    GateAct,
}

impl Tap {
    pub const ALL: [Tap; 5] = [Tap::PreAttn, Tap::IntraAttn, Tap::PreMlp, Tap::IntraMlp, Tap::GateAct];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Tap::PreAttn => "pre_attn",
            Tap::IntraAttn => "intra_attn",
            Tap::PreMlp => "pre_mlp",
            Tap::IntraMlp => "intra_mlp",
            Tap::GateAct => "gate_act",
        }
    }

    pub fn parse(s: &str) -> Option<Tap> {
        Tap::ALL.into_iter().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
}

impl BlockDims {
    /// 256 / 4 heads / 704, a Llama-like 2.75× MLP ratio.
    pub const DEFAULT: BlockDims = BlockDims {
        d_model: 256,
        heads: 4,
        d_ff: 704,
    };

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(TealError::InvalidArgument(format!("dimensions must be >= 1: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(TealError::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// (rows, cols) of each weight matrix.
    pub fn shape(&self, kind: MatrixKind) -> (usize, usize) {
        let (d, f) = (self.d_model, self.d_ff);
        match kind {
            MatrixKind::Q | MatrixKind::K | MatrixKind::V | MatrixKind::O => (d, d),
            MatrixKind::Gate | MatrixKind::Up => (f, d),
            MatrixKind::Down => (d, f),
        }
    }

    pub fn footprints(&self) -> [u64; 7] {
        MatrixKind::ALL.map(|k| {
            let (r, c) = self.shape(k);
            (r * c) as u64
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock<T> {
    dims: BlockDims,
    weights: [Matrix<T>; 7],
    rms_attn: Vector<T>,
    rms_mlp: Vector<T>,
}

impl<T: Scalar> TransformerBlock<T> {
    pub fn new(dims: BlockDims, weights: [Matrix<T>; 7], rms_attn: Vector<T>, rms_mlp: Vector<T>) -> Result<Self> {
        dims.validate()?;
        for kind in MatrixKind::ALL {
            let w = &weights[kind.index()];
            if (w.rows(), w.cols()) != dims.shape(kind) {
                return Err(TealError::Shape(format!(
                    "W_{kind} is {}x{}, expected {:?}",
                    w.rows(),
                    w.cols(),
                    dims.shape(kind)
                )));
            }
        }
        if rms_attn.len() != dims.d_model || rms_mlp.len() != dims.d_model {
            return Err(TealError::Shape("norm scale length must equal d_model".into()));
        }
        Ok(TransformerBlock {
            dims,
            weights,
            rms_attn,
            rms_mlp,
        })
    }

    /// Weights i.i.d. `N(0, 1/d_in)` with `d_in` the column count; unit
    /// norm scales. Matrix `k` draws from child stream `k` of `rng`.
    pub fn generate(rng: &RngStream, dims: BlockDims) -> Result<Self> {
        dims.validate()?;
        let weights = MatrixKind::ALL.map(|kind| {
            let (r, c) = dims.shape(kind);
            let mut data = vec![T::zero(); r * c];
            fill_gaussian(&mut rng.split(kind.index() as u64), 1.0 / (c as f64).sqrt(), &mut data);
            Matrix::new(r, c, Layout::RowMajor, data).expect("shape from dims")
        });
        Self::new(
            dims,
            weights,
            vec![T::one(); dims.d_model].into(),
            vec![T::one(); dims.d_model].into(),
        )
    }

    pub fn dims(&self) -> BlockDims {
        self.dims
    }

    pub fn matrix(&self, kind: MatrixKind) -> &Matrix<T> {
        &self.weights[kind.index()]
    }

    pub fn weights(&self) -> &[Matrix<T>; 7] {
        &self.weights
    }

    pub fn rms_attn(&self) -> &Vector<T> {
        &self.rms_attn
    }

    pub fn rms_mlp(&self) -> &Vector<T> {
        &self.rms_mlp
    }

    /// Copy with one weight matrix replaced.
    pub fn with_matrix(&self, kind: MatrixKind, w: Matrix<T>) -> Result<Self> {
        let mut weights = self.weights.clone();
        weights[kind.index()] = w;
        Self::new(self.dims, weights, self.rms_attn.clone(), self.rms_mlp.clone())
    }
}

fn rms_norm<T: Scalar>(x: &Matrix<T>, scale: &[T]) -> Matrix<T> {
    let d = x.cols();
    let eps = T::lit(RMS_EPS);
    let dn = T::lit(d as f64);
    let mut out = Matrix::zeros(x.rows(), d, Layout::RowMajor);
    for i in 0..x.rows() {
        let row = x.row(i);
        let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / dn;
        let inv = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in out.row_mut(i).iter_mut().zip(row).zip(scale) {
            *o = v * inv * g;
        }
    }
    out
}

fn silu<T: Scalar>(v: T) -> T {
    v / (T::one() + (-v).exp())
}

fn causal_attention<T: Scalar>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, heads: usize) -> Matrix<T> {
    let (seq, d) = (q.rows(), q.cols());
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = Matrix::zeros(seq, d, Layout::RowMajor);
    let mut w = vec![T::zero(); seq];
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..seq {
            let qi = &q.row(i)[cols.clone()];
            let mut max = T::neg_infinity();
            for (j, wj) in w.iter_mut().enumerate().take(i + 1) {
                let kj = &k.row(j)[cols.clone()];
                let s = qi.iter().zip(kj).fold(T::zero(), |a, (&x, &y)| a + x * y) * scale;
                *wj = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for wj in &mut w[..=i] {
                *wj = (*wj - max).exp();
                sum = sum + *wj;
            }
            let oi = &mut out.row_mut(i)[cols.clone()];
            for (j, &wj) in w[..=i].iter().enumerate() {
                let a = wj / sum;
                for (o, &vv) in oi.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + a * vv;
                }
            }
        }
    }
    out
}

fn add<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x + y).collect();
    Matrix::new(a.rows(), a.cols(), Layout::RowMajor, data).expect("same shape")
}

fn masked<T: Scalar>(x: &Matrix<T>, t: Option<Threshold<T>>) -> Cow<'_, Matrix<T>> {
    match t {
        None => Cow::Borrowed(x),
        Some(t) => Cow::Owned(x.map(|v| if t.prunes(v) { T::zero() } else { v })),
    }
}

fn ensure_finite<T: Scalar>(m: &Matrix<T>, at: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(TealError::NonFinite(at.to_string()))
    }
}

fn check_input<T: Scalar>(block: &TransformerBlock<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols() != block.dims.d_model {
        return Err(TealError::Shape(format!(
            "block input has width {}, d_model is {}",
            x.cols(),
            block.dims.d_model
        )));
    }
    if x.rows() == 0 {
        return Err(TealError::Empty("block input has no tokens".into()));
    }
    ensure_finite(x, "block input")?;
    Ok(x.to_layout(Layout::RowMajor))
}

/// Shared forward. `thresholds = None` is the dense pass.
fn forward_inner<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    thresholds: Option<&[Threshold<T>; 7]>,
    observe: &mut dyn FnMut(Tap, &Matrix<T>),
) -> Result<Matrix<T>> {
    let x = check_input(block, x)?;
    let t = |k: MatrixKind| thresholds.map(|ts| ts[k.index()]);

    let h = rms_norm(&x, &block.rms_attn);
    ensure_finite(&h, Tap::PreAttn.name())?;
    observe(Tap::PreAttn, &h);
    let q = linear(&masked(&h, t(MatrixKind::Q)), block.matrix(MatrixKind::Q))?;
    let k = linear(&masked(&h, t(MatrixKind::K)), block.matrix(MatrixKind::K))?;
    let v = linear(&masked(&h, t(MatrixKind::V)), block.matrix(MatrixKind::V))?;
    let a = causal_attention(&q, &k, &v, block.dims.heads);
    ensure_finite(&a, Tap::IntraAttn.name())?;
    observe(Tap::IntraAttn, &a);
    let o = linear(&masked(&a, t(MatrixKind::O)), block.matrix(MatrixKind::O))?;
    let y = add(&x, &o);

    let h2 = rms_norm(&y, &block.rms_mlp);
    ensure_finite(&h2, Tap::PreMlp.name())?;
    observe(Tap::PreMlp, &h2);
    let g = linear(&masked(&h2, t(MatrixKind::Gate)), block.matrix(MatrixKind::Gate))?;
    let u = linear(&masked(&h2, t(MatrixKind::Up)), block.matrix(MatrixKind::Up))?;
    let s = g.map(silu);
    ensure_finite(&s, Tap::GateAct.name())?;
    observe(Tap::GateAct, &s);
    let mid = Matrix::new(
        s.rows(),
        s.cols(),
        Layout::RowMajor,
        s.as_slice().iter().zip(u.as_slice()).map(|(&a, &b)| a * b).collect(),
    )?;
    ensure_finite(&mid, Tap::IntraMlp.name())?;
    observe(Tap::IntraMlp, &mid);
    let down = linear(&masked(&mid, t(MatrixKind::Down)), block.matrix(MatrixKind::Down))?;
    let out = add(&y, &down);
    ensure_finite(&out, "block output")?;
    Ok(out)
}

/// `Y = X + Attn(RMSNorm(X))`, then `Y += MLP(RMSNorm(Y))`.
pub fn block_forward_dense<T: Scalar>(block: &TransformerBlock<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    forward_inner(block, x, None, &mut |_, _| {})
}

/// Dense topology with every matrix input thresholded by its own level.
pub fn block_forward_sparse<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    cfg: &BlockSparsityConfig<T>,
) -> Result<Matrix<T>> {
    forward_inner(block, x, Some(&cfg.thresholds), &mut |_, _| {})
}

/// Forward pass reporting every hidden state in [`Tap`] to `observe`.
pub fn block_forward_observed<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    cfg: Option<&BlockSparsityConfig<T>>,
    observe: &mut dyn FnMut(Tap, &Matrix<T>),
) -> Result<Matrix<T>> {
    forward_inner(block, x, cfg.map(|c| &c.thresholds), observe)
}

/// `RMSNorm(X + Attn(RMSNorm(X)))`: the dense MLP input for block input `X`.
pub fn mlp_input<T: Scalar>(block: &TransformerBlock<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut out = None;
    block_forward_observed(block, x, None, &mut |tap, m| {
        if tap == Tap::PreMlp {
            out = Some(m.clone());
        }
    })?;
    Ok(out.expect("pre_mlp tap always fires"))
}

fn gate_and_up<T: Scalar>(block: &TransformerBlock<T>, x: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    if x.cols() != block.dims.d_model {
        return Err(TealError::Shape(format!(
            "MLP input width {} != d_model {}",
            x.cols(),
            block.dims.d_model
        )));
    }
    let s = linear(x, block.matrix(MatrixKind::Gate))?.map(silu);
    let u = linear(x, block.matrix(MatrixKind::Up))?;
    Ok((s, u))
}

/// Dense SwiGLU MLP on an already-normalized input.
pub fn mlp_forward_dense<T: Scalar>(block: &TransformerBlock<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    let (s, u) = gate_and_up(block, x)?;
    let mid = Matrix::new(
        s.rows(),
        s.cols(),
        Layout::RowMajor,
        s.as_slice().iter().zip(u.as_slice()).map(|(&a, &b)| a * b).collect(),
    )?;
    linear(&mid, block.matrix(MatrixKind::Down))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatsOutput<T> {
    pub output: Matrix<T>,
    /// Zero fraction of the masked intermediate state.
    pub intermediate_sparsity: f64,
}

/// Output-sparse MLP: `W_gate` dense, the mask `s'_t(SiLU(x·W_gateᵀ))`
/// applied to the rows of `x·W_upᵀ`, and `W_down` consuming the resulting
/// sparse intermediate.
pub fn mlp_forward_cats<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    t_gate: Threshold<T>,
) -> Result<CatsOutput<T>> {
    let (s, u) = gate_and_up(block, x)?;
    let mid: Vec<T> = s
        .as_slice()
        .iter()
        .zip(u.as_slice())
        .map(|(&a, &b)| if t_gate.prunes(a) { T::zero() } else { a * b })
        .collect();
    let pruned = s.as_slice().iter().filter(|&&a| t_gate.prunes(a)).count();
    let intermediate_sparsity = pruned as f64 / s.len().max(1) as f64;
    let mid = Matrix::new(s.rows(), s.cols(), Layout::RowMajor, mid)?;
    Ok(CatsOutput {
        output: linear(&mid, block.matrix(MatrixKind::Down))?,
        intermediate_sparsity,
    })
}

fn ratio(num: f64, den: f64) -> Result<f64> {
    if den == 0.0 {
        return Err(TealError::InvalidArgument("reference product has zero norm".into()));
    }
    Ok(num / den)
}

/// `‖(x - s_t(x))·W_upᵀ ⊙ SiLU(x·W_gateᵀ)‖ / ‖x·W_upᵀ ⊙ SiLU(x·W_gateᵀ)‖`
/// for MLP input `x` (input sparsity on `W_up`).
pub fn intermediate_error_teal<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    t_input: Threshold<T>,
) -> Result<f64> {
    let (s, u) = gate_and_up(block, x)?;
    let residual = x.map(|v| if t_input.prunes(v) { v } else { T::zero() });
    let du = linear(&residual, block.matrix(MatrixKind::Up))?;
    let err: Vec<T> = du.as_slice().iter().zip(s.as_slice()).map(|(&a, &b)| a * b).collect();
    let full: Vec<T> = u.as_slice().iter().zip(s.as_slice()).map(|(&a, &b)| a * b).collect();
    ratio(norm_l2(&err), norm_l2(&full))
}

/// `‖x·W_upᵀ ⊙ [SiLU(x·W_gateᵀ) - s'_t(SiLU(x·W_gateᵀ))]‖` over the same
/// normalizer (output sparsity on `W_up`).
pub fn intermediate_error_cats<T: Scalar>(
    block: &TransformerBlock<T>,
    x: &Matrix<T>,
    t_gate: Threshold<T>,
) -> Result<f64> {
    let (s, u) = gate_and_up(block, x)?;
    let err: Vec<T> = u
        .as_slice()
        .iter()
        .zip(s.as_slice())
        .map(|(&b, &a)| if t_gate.prunes(a) { a * b } else { T::zero() })
        .collect();
    let full: Vec<T> = u.as_slice().iter().zip(s.as_slice()).map(|(&b, &a)| a * b).collect();
    ratio(norm_l2(&err), norm_l2(&full))
}

/// Magnitude histograms at every [`Tap`] of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockCalibration {
    hists: [ActivationHistogram; 5],
}

impl BlockCalibration {
    pub fn from_histograms(hists: [ActivationHistogram; 5]) -> Self {
        BlockCalibration { hists }
    }

    pub fn histogram(&self, tap: Tap) -> &ActivationHistogram {
        &self.hists[tap.index()]
    }

    pub fn histograms(&self) -> &[ActivationHistogram; 5] {
        &self.hists
    }

    /// Threshold for sparsity `p` at `tap`; `p = 1` prunes everything.
    pub fn tap_threshold<T: Scalar>(&self, tap: Tap, p: f64) -> Result<Threshold<T>> {
        if p == 1.0 {
            return Ok(Threshold::prune_all());
        }
        self.histogram(tap).threshold(p)
    }

    pub fn threshold<T: Scalar>(&self, kind: MatrixKind, p: f64) -> Result<Threshold<T>> {
        self.tap_threshold(kind.input_tap(), p)
    }
}

/// Histograms at every tap, ranged on the first sample and filled with all.
/// Layer ids are `<prefix>.<tap>`.
pub fn calibrate_block<T: Scalar>(
    block: &TransformerBlock<T>,
    samples: &[Matrix<T>],
    bins: usize,
    prefix: &str,
) -> Result<BlockCalibration> {
    let (first, rest) = samples
        .split_first()
        .ok_or_else(|| TealError::Empty("calibration needs at least one sample".into()))?;
    let mut taps: Vec<(Tap, Matrix<T>)> = Vec::with_capacity(5);
    block_forward_observed(block, first, None, &mut |tap, m| taps.push((tap, m.clone())))?;
    taps.sort_by_key(|(t, _)| *t);
    let mut hists = Vec::with_capacity(5);
    for (tap, m) in &taps {
        let mut h = ActivationHistogram::with_range_from(format!("{prefix}.{}", tap.name()), bins, m.as_slice())?;
        h.record(m.as_slice())?;
        hists.push(h);
    }
    let mut hists: [ActivationHistogram; 5] = hists
        .try_into()
        .map_err(|_| TealError::InvalidArgument("forward did not report every tap".into()))?;
    for x in rest {
        let mut failure = None;
        block_forward_observed(block, x, None, &mut |tap, m| {
            if let Err(e) = hists[tap.index()].record(m.as_slice()) {
                failure.get_or_insert(e);
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(BlockCalibration { hists })
}

/// Per-matrix sparsity levels and the thresholds they resolve to.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSparsityConfig<T> {
    levels: [f64; 7],
    thresholds: [Threshold<T>; 7],
}

fn check_levels(levels: &[f64; 7]) -> Result<()> {
    if let Some(p) = levels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(TealError::InvalidArgument(format!("sparsity level {p} outside [0, 1]")));
    }
    Ok(())
}

impl<T: Scalar> BlockSparsityConfig<T> {
    /// All levels zero: the sparse forward reproduces the dense one.
    pub fn dense() -> Self {
        BlockSparsityConfig {
            levels: [0.0; 7],
            thresholds: [Threshold::zero(); 7],
        }
    }

    pub fn resolve(levels: [f64; 7], calib: &BlockCalibration) -> Result<Self> {
        check_levels(&levels)?;
        let mut thresholds = [Threshold::zero(); 7];
        for kind in MatrixKind::ALL {
            thresholds[kind.index()] = calib.threshold(kind, levels[kind.index()])?;
        }
        Ok(BlockSparsityConfig { levels, thresholds })
    }

    pub fn uniform(p: f64, calib: &BlockCalibration) -> Result<Self> {
        Self::resolve([p; 7], calib)
    }

    /// Explicit levels and thresholds, e.g. read back from a config file.
    pub fn from_parts(levels: [f64; 7], thresholds: [Threshold<T>; 7]) -> Result<Self> {
        check_levels(&levels)?;
        Ok(BlockSparsityConfig { levels, thresholds })
    }

    pub fn levels(&self) -> &[f64; 7] {
        &self.levels
    }

    pub fn thresholds(&self) -> &[Threshold<T>; 7] {
        &self.thresholds
    }

    pub fn level(&self, kind: MatrixKind) -> f64 {
        self.levels[kind.index()]
    }

    pub fn threshold(&self, kind: MatrixKind) -> Threshold<T> {
        self.thresholds[kind.index()]
    }

    /// Footprint-weighted block sparsity `Σ p_i f_i / Σ f_i`.
    pub fn block_sparsity(&self, dims: &BlockDims) -> f64 {
        block_sparsity(&self.levels, &dims.footprints())
    }
}

pub fn block_sparsity(levels: &[f64], footprints: &[u64]) -> f64 {
    let total: u64 = footprints.iter().sum();
    levels.iter().zip(footprints).map(|(p, &f)| p * f as f64).sum::<f64>() / total as f64
}

/// Stack of blocks sharing one set of dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    blocks: Vec<TransformerBlock<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(blocks: Vec<TransformerBlock<T>>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| TealError::Empty("model needs at least one block".into()))?;
        if blocks.iter().any(|b| b.dims != first.dims) {
            return Err(TealError::Shape("all blocks must share dimensions".into()));
        }
        Ok(Model { blocks })
    }

    /// Block `b` is generated from child stream `b` of a stream seeded by `seed`.
    pub fn generate(seed: u64, n_blocks: usize, dims: BlockDims) -> Result<Self> {
        let root = RngStream::new(seed);
        let blocks = (0..n_blocks)
            .map(|b| TransformerBlock::generate(&root.split(b as u64), dims))
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    pub fn blocks(&self) -> &[TransformerBlock<T>] {
        &self.blocks
    }

    pub fn dims(&self) -> BlockDims {
        self.blocks[0].dims
    }

    pub fn forward_dense(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.blocks
            .iter()
            .try_fold(x.clone(), |h, b| block_forward_dense(b, &h))
    }

    pub fn forward_sparse(&self, x: &Matrix<T>, cfgs: &[BlockSparsityConfig<T>]) -> Result<Matrix<T>> {
        if cfgs.len() != self.blocks.len() {
            return Err(TealError::Shape(format!(
                "{} configs for {} blocks",
                cfgs.len(),
                self.blocks.len()
            )));
        }
        self.blocks
            .iter()
            .zip(cfgs)
            .try_fold(x.clone(), |h, (b, c)| block_forward_sparse(b, &h, c))
    }

    /// Dense input reaching every block: entry `b` is the output of blocks `0..b`.
    pub fn block_inputs(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let mut h = x.clone();
        for b in &self.blocks[..self.blocks.len() - 1] {
            let next = block_forward_dense(b, &h)?;
            out.push(std::mem::replace(&mut h, next));
        }
        out.push(h);
        Ok(out)
    }
}

/// Synthetic residual-stream inputs: token rows of independent Gaussians
/// with a fixed per-channel gain profile. Log-normal gains of spread `σ`
/// mimic the outlier channels of real hidden states; `σ = 0` is isotropic.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDistribution {
    gains: Vec<f64>,
}

impl InputDistribution {
    pub const DEFAULT_SPREAD: f64 = 1.2;

    pub fn isotropic(d_model: usize) -> Self {
        InputDistribution {
            gains: vec![1.0; d_model],
        }
    }

    /// Gains `exp(σ z_c)` normalized to unit mean square.
    pub fn with_channel_spread(d_model: usize, spread: f64, profile_seed: u64) -> Result<Self> {
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(TealError::InvalidArgument(format!("spread must be >= 0, got {spread}")));
        }
        if d_model == 0 {
            return Err(TealError::InvalidArgument("d_model must be >= 1".into()));
        }
        let mut rng = RngStream::new(profile_seed);
        let mut gains: Vec<f64> = (0..d_model).map(|_| (spread * rng.standard_normal()).exp()).collect();
        let rms = (gains.iter().map(|g| g * g).sum::<f64>() / d_model as f64).sqrt();
        for g in &mut gains {
            *g /= rms;
        }
        Ok(InputDistribution { gains })
    }

    pub fn gains(&self) -> &[f64] {
        &self.gains
    }

    pub fn sample<T: Scalar>(&self, rng: &mut RngStream, seq: usize) -> Matrix<T> {
        let d = self.gains.len();
        Matrix::from_fn(seq, d, Layout::RowMajor, |_, c| {
            T::lit(self.gains[c] * rng.standard_normal())
        })
    }

    /// `count` sequences; sequence `i` draws from child stream `i` of `rng`.
    pub fn sample_many<T: Scalar>(&self, rng: &RngStream, count: usize, seq: usize) -> Vec<Matrix<T>> {
        (0..count).map(|i| self.sample(&mut rng.split(i as u64), seq)).collect()
    }
}

/// Relative L2 distance `‖a - b‖ / ‖b‖` pooled over a set of outputs.
pub fn relative_error<T: Scalar>(approx: &[Matrix<T>], reference: &[Matrix<T>]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (a, b) in approx.iter().zip(reference) {
        num += diff_norm_l2(a.as_slice(), b.as_slice()).powi(2);
        den += norm_l2(b.as_slice()).powi(2);
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// One row of the batch-size ablation for `W_down`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchedErrorRow {
    pub batch_size: usize,
    pub target_sparsity: f64,
    pub threshold: f64,
    pub realized_column_sparsity: f64,
    pub relative_error: f64,
}

fn intra_mlp_rows<T: Scalar>(block: &TransformerBlock<T>, inputs: &[Matrix<T>]) -> Result<Vec<Vector<T>>> {
    let mut rows = Vec::new();
    for x in inputs {
        block_forward_observed(block, x, None, &mut |tap, m| {
            if tap == Tap::IntraMlp {
                rows.extend((0..m.rows()).map(|i| Vector::new(m.row(i).to_vec())));
            }
        })?;
    }
    Ok(rows)
}

/// Layer error of `W_down` under the batch mean-magnitude criterion. For
/// each batch size `B`, consecutive groups of `B` tokens form a batch; the
/// threshold is calibrated on a histogram of batch-mean magnitudes from
/// `calib_inputs` and evaluated on `eval_inputs`.
pub fn batched_down_error<T: Scalar>(
    block: &TransformerBlock<T>,
    calib_inputs: &[Matrix<T>],
    eval_inputs: &[Matrix<T>],
    batch_sizes: &[usize],
    p: f64,
    bins: usize,
) -> Result<Vec<BatchedErrorRow>> {
    let calib_rows = intra_mlp_rows(block, calib_inputs)?;
    let eval_rows = intra_mlp_rows(block, eval_inputs)?;
    let w_down = block.matrix(MatrixKind::Down);
    let mut out = Vec::with_capacity(batch_sizes.len());
    for &b in batch_sizes {
        if b == 0 || b > calib_rows.len() || b > eval_rows.len() {
            return Err(TealError::InvalidArgument(format!(
                "batch size {b} does not fit the samples"
            )));
        }
        let means: Vec<Vector<T>> = calib_rows
            .chunks_exact(b)
            .map(crate::sparsify::batch_mean_magnitudes)
            .collect::<Result<_>>()?;
        let mut hist = ActivationHistogram::with_range_from(format!("batch{b}.down"), bins, &means[0])?;
        for m in &means {
            hist.record(m)?;
        }
        let t: Threshold<T> = hist.threshold(p)?;
        let (mut num, mut den, mut pruned, mut cols) = (0.0, 0.0, 0usize, 0usize);
        for batch in eval_rows.chunks_exact(b) {
            let s = sparsify_batched(batch, t)?;
            pruned += s.pruned.iter().filter(|&&v| v).count();
            cols += s.pruned.len();
            for (row, sp) in batch.iter().zip(&s.rows) {
                let full = linear(&Matrix::new(1, row.len(), Layout::RowMajor, row.to_vec())?, w_down)?;
                let approx = linear(&Matrix::new(1, sp.len(), Layout::RowMajor, sp.to_vec())?, w_down)?;
                num += diff_norm_l2(full.as_slice(), approx.as_slice()).powi(2);
                den += norm_l2(full.as_slice()).powi(2);
            }
        }
        out.push(BatchedErrorRow {
            batch_size: b,
            target_sparsity: p,
            threshold: t.value().to_f64().unwrap_or(f64::NAN),
            realized_column_sparsity: pruned as f64 / cols.max(1) as f64,
            relative_error: if den > 0.0 { (num / den).sqrt() } else { 0.0 },
        });
    }
    Ok(out)
}

/// Zero fraction produced on `x` by the threshold for level `p` at `tap`.
pub fn tap_realized_sparsity<T: Scalar>(
    block: &TransformerBlock<T>,
    inputs: &[Matrix<T>],
    calib: &BlockCalibration,
    tap: Tap,
    p: f64,
) -> Result<f64> {
    let t: Threshold<T> = calib.tap_threshold(tap, p)?;
    let (mut pruned, mut total) = (0.0, 0usize);
    for x in inputs {
        block_forward_observed(block, x, None, &mut |k, m| {
            if k == tap {
                pruned += realized_sparsity(m.as_slice(), t).unwrap_or(0.0) * m.len() as f64;
                total += m.len();
            }
        })?;
    }
    if total == 0 {
        return Err(TealError::Empty("no activations observed".into()));
    }
    Ok(pruned / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TransformerBlock<f32> {
        TransformerBlock::generate(
            &RngStream::new(1),
            BlockDims {
                d_model: 16,
                heads: 2,
                d_ff: 24,
            },
        )
        .unwrap()
    }

    #[test]
    fn dims_validation() {
        assert!(BlockDims {
            d_model: 10,
            heads: 3,
            d_ff: 8
        }
        .validate()
        .is_err());
        assert!(BlockDims {
            d_model: 0,
            heads: 1,
            d_ff: 8
        }
        .validate()
        .is_err());
        assert!(BlockDims::DEFAULT.validate().is_ok());
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let d = BlockDims {
            d_model: 16,
            heads: 2,
            d_ff: 24,
        };
        let a = TransformerBlock::<f32>::generate(&RngStream::new(4), d).unwrap();
        let b = TransformerBlock::<f32>::generate(&RngStream::new(4), d).unwrap();
        let c = TransformerBlock::<f32>::generate(&RngStream::new(5), d).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix(MatrixKind::Q), c.matrix(MatrixKind::Q));
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let b = small();
        let x = Matrix::<f32>::zeros(5, 16, Layout::RowMajor);
        let y = block_forward_dense(&b, &x).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_width_rejected() {
        let b = small();
        let x = Matrix::<f32>::zeros(5, 15, Layout::RowMajor);
        assert!(matches!(block_forward_dense(&b, &x), Err(TealError::Shape(_))));
    }

    #[test]
    fn non_finite_input_rejected() {
        let b = small();
        let mut x = Matrix::<f32>::zeros(2, 16, Layout::RowMajor);
        x.set(1, 3, f32::INFINITY);
        assert!(matches!(block_forward_dense(&b, &x), Err(TealError::NonFinite(_))));
    }

    #[test]
    fn with_matrix_checks_shape() {
        let b = small();
        assert!(b
            .with_matrix(MatrixKind::V, Matrix::zeros(16, 16, Layout::RowMajor))
            .is_ok());
        assert!(b
            .with_matrix(MatrixKind::V, Matrix::zeros(16, 24, Layout::RowMajor))
            .is_err());
    }

    #[test]
    fn level_outside_unit_interval_rejected() {
        let mut levels = [0.0; 7];
        levels[3] = 1.2;
        assert!(BlockSparsityConfig::<f32>::from_parts(levels, [Threshold::zero(); 7]).is_err());
    }

    #[test]
    fn block_inputs_chain_dense_outputs() {
        let m = Model::<f32>::generate(
            3,
            3,
            BlockDims {
                d_model: 8,
                heads: 2,
                d_ff: 12,
            },
        )
        .unwrap();
        let x = InputDistribution::isotropic(8).sample::<f32>(&mut RngStream::new(0), 4);
        let ins = m.block_inputs(&x).unwrap();
        assert_eq!(ins.len(), 3);
        assert_eq!(ins[0], x);
        assert_eq!(ins[1], block_forward_dense(&m.blocks()[0], &x).unwrap());
        assert_eq!(
            m.forward_dense(&x).unwrap(),
            block_forward_dense(&m.blocks()[2], &ins[2]).unwrap()
        );
    }

    #[test]
    fn spread_profile_has_unit_mean_square() {
        let d = InputDistribution::with_channel_spread(64, 0.8, 1).unwrap();
        let ms = d.gains().iter().map(|g| g * g).sum::<f64>() / 64.0;
        assert!((ms - 1.0).abs() < 1e-12);
        assert!(InputDistribution::with_channel_spread(64, -1.0, 1).is_err());
    }
}
