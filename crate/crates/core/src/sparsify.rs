//! Magnitude thresholding of activation vectors.

use crate::error::{Result, TealError};
use crate::scalar::Scalar;
use crate::tensor::Vector;

/// Magnitude cutoff: entries with `|x| <= t` are pruned (closed boundary).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold<T>(T);

impl<T: Scalar> Threshold<T> {
    pub fn new(value: T) -> Result<Self> {
        if !(value >= T::zero() && value.is_finite()) {
            return Err(TealError::InvalidArgument(format!(
                "threshold must be finite and >= 0, got {value}"
            )));
        }
        Ok(Threshold(value))
    }

    pub fn from_f64(value: f64) -> Result<Self> {
        match T::from_f64(value) {
            Some(v) => Self::new(v),
            None => Err(TealError::InvalidArgument(format!(
                "threshold {value} not representable"
            ))),
        }
    }

    pub fn zero() -> Self {
        Threshold(T::zero())
    }

    /// Largest finite threshold; prunes every finite entry.
    pub fn prune_all() -> Self {
        Threshold(T::max_value())
    }

    pub fn value(self) -> T {
        self.0
    }

    #[inline(always)]
    pub fn prunes(self, x: T) -> bool {
        x.abs() <= self.0
    }
}

/// `s_t(x)`: zero every entry with `|x_i| <= t`, keep the rest unchanged.
pub fn sparsify<T: Scalar>(x: &[T], t: Threshold<T>) -> Vector<T> {
    x.iter()
        .map(|&v| if t.prunes(v) { T::zero() } else { v })
        .collect::<Vec<_>>()
        .into()
}

pub fn sparsify_in_place<T: Scalar>(x: &mut [T], t: Threshold<T>) {
    for v in x {
        if t.prunes(*v) {
            *v = T::zero();
        }
    }
}

/// Fraction of entries with `|x_i| <= t`.
pub fn realized_sparsity<T: Scalar>(x: &[T], t: Threshold<T>) -> Result<f64> {
    if x.is_empty() {
        return Err(TealError::Empty("realized sparsity of an empty vector".into()));
    }
    let pruned = x.iter().filter(|&&v| t.prunes(v)).count();
    Ok(pruned as f64 / x.len() as f64)
}

/// Result of the batch criterion: every row with the pruned columns zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSparsified<T> {
    pub rows: Vec<Vector<T>>,
    /// `true` where the column was pruned across the whole batch.
    pub pruned: Vec<bool>,
}

impl<T> BatchSparsified<T> {
    pub fn column_sparsity(&self) -> f64 {
        if self.pruned.is_empty() {
            return 0.0;
        }
        self.pruned.iter().filter(|&&p| p).count() as f64 / self.pruned.len() as f64
    }
}

fn check_batch<T: Scalar>(batch: &[Vector<T>]) -> Result<usize> {
    let first = batch
        .first()
        .ok_or_else(|| TealError::Empty("batch needs at least one row".into()))?;
    let m = first.len();
    if let Some((b, row)) = batch.iter().enumerate().find(|(_, r)| r.len() != m) {
        return Err(TealError::Shape(format!(
            "ragged batch: row 0 has {m} entries, row {b} has {}",
            row.len()
        )));
    }
    Ok(m)
}

/// Per-column mean magnitude `(1/B) Σ_b |X_{b,i}|`.
pub fn batch_mean_magnitudes<T: Scalar>(batch: &[Vector<T>]) -> Result<Vector<T>> {
    let m = check_batch(batch)?;
    let inv = T::lit(batch.len() as f64);
    let mut acc = vec![T::zero(); m];
    for row in batch {
        for (a, &v) in acc.iter_mut().zip(row.iter()) {
            *a = *a + v.abs();
        }
    }
    for a in &mut acc {
        *a = *a / inv;
    }
    Ok(acc.into())
}

/// Batched criterion: a column is pruned in every row when its mean
/// magnitude over the batch is `<= t`. With one row this is [`sparsify`].
pub fn sparsify_batched<T: Scalar>(batch: &[Vector<T>], t: Threshold<T>) -> Result<BatchSparsified<T>> {
    let means = batch_mean_magnitudes(batch)?;
    let pruned: Vec<bool> = means.iter().map(|&v| v <= t.value()).collect();
    let rows = batch
        .iter()
        .map(|row| {
            row.iter()
                .zip(&pruned)
                .map(|(&v, &p)| if p { T::zero() } else { v })
                .collect::<Vec<_>>()
                .into()
        })
        .collect();
    Ok(BatchSparsified { rows, pruned })
}
