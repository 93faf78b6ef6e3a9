//! Fixed-bin histograms over activation magnitudes and CDF inversion.
//!
//! Calibration streams `|x|` into `bin_count` uniform bins on `[0, hi]`;
//! magnitudes above `hi` go to a single overflow counter. The threshold for
//! a sparsity level `p` is the smallest `t` at which the piecewise-linear
//! empirical CDF reaches `p`.

use std::fmt::Write as _;

use crate::error::{Result, TealError};
use crate::scalar::Scalar;
use crate::sparsify::Threshold;

/// Bins used when no explicit count is requested.
pub const DEFAULT_BINS: usize = 4096;

/// Range factor: `hi` is this many standard deviations of the first batch.
pub const RANGE_STDS: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationHistogram {
    layer_id: String,
    hi: f64,
    counts: Vec<u64>,
    overflow: u64,
    total: u64,
}

fn check_layer_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(TealError::InvalidArgument(format!(
            "layer id must be non-empty without whitespace, got {id:?}"
        )));
    }
    Ok(())
}

impl ActivationHistogram {
    pub fn new(layer_id: impl Into<String>, bin_count: usize, hi: f64) -> Result<Self> {
        let layer_id = layer_id.into();
        check_layer_id(&layer_id)?;
        if bin_count == 0 {
            return Err(TealError::InvalidArgument("bin count must be >= 1".into()));
        }
        if !(hi > 0.0 && hi.is_finite()) {
            return Err(TealError::InvalidArgument(format!(
                "histogram upper bound must be positive and finite, got {hi}"
            )));
        }
        Ok(ActivationHistogram {
            layer_id,
            hi,
            counts: vec![0; bin_count],
            overflow: 0,
            total: 0,
        })
    }

    /// Histogram whose range is [`RANGE_STDS`] times the standard deviation
    /// of `first_batch`. The batch itself is not recorded. A constant batch
    /// falls back to `hi = max(8·|x|, 1)`.
    pub fn with_range_from<T: Scalar>(
        layer_id: impl Into<String>,
        bin_count: usize,
        first_batch: &[T],
    ) -> Result<Self> {
        let n = first_batch.len();
        if n == 0 {
            return Err(TealError::Empty("range estimation needs samples".into()));
        }
        let vals: Vec<f64> = first_batch.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(TealError::NonFinite("histogram range batch".into()));
        }
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let mut hi = RANGE_STDS * var.sqrt();
        if hi.is_nan() || hi <= 0.0 {
            hi = (RANGE_STDS * mean.abs()).max(1.0);
        }
        Self::new(layer_id, bin_count, hi)
    }

    pub fn layer_id(&self) -> &str {
        &self.layer_id
    }

    pub fn set_layer_id(&mut self, id: impl Into<String>) -> Result<()> {
        let id = id.into();
        check_layer_id(&id)?;
        self.layer_id = id;
        Ok(())
    }

    pub fn bin_count(&self) -> usize {
        self.counts.len()
    }

    pub fn lo(&self) -> f64 {
        0.0
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bin_width(&self) -> f64 {
        self.hi / self.counts.len() as f64
    }

    /// Adds `|x_i|` for every entry. Rejects the whole call (no partial
    /// update) if any entry is NaN.
    pub fn record<T: Scalar>(&mut self, x: &[T]) -> Result<()> {
        if let Some(i) = x.iter().position(|v| v.is_nan()) {
            return Err(TealError::NonFinite(format!(
                "entry {i} recorded into histogram {}",
                self.layer_id
            )));
        }
        let width = self.bin_width();
        let last = self.counts.len() - 1;
        for v in x {
            let a = v.abs().to_f64().unwrap_or(f64::INFINITY);
            if a > self.hi {
                self.overflow += 1;
            } else {
                let b = ((a / width) as usize).min(last);
                self.counts[b] += 1;
            }
        }
        self.total += x.len() as u64;
        Ok(())
    }

    /// Bin-wise sum with a histogram of identical binning.
    pub fn merge(&mut self, other: &ActivationHistogram) -> Result<()> {
        if other.counts.len() != self.counts.len() || other.hi != self.hi {
            return Err(TealError::Shape(format!(
                "cannot merge histogram ({} bins, hi={}) into ({} bins, hi={})",
                other.counts.len(),
                other.hi,
                self.counts.len(),
                self.hi
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.overflow += other.overflow;
        self.total += other.total;
        Ok(())
    }

    /// Empirical `P(|x| <= t)`, linear within bins, jumping to 1 only at
    /// the overflow region.
    pub fn cdf(&self, t: f64) -> f64 {
        if self.total == 0 || t <= 0.0 {
            return 0.0;
        }
        if t > self.hi {
            return 1.0;
        }
        let width = self.bin_width();
        let pos = t / width;
        let full = (pos as usize).min(self.counts.len());
        let mut mass = self.counts[..full].iter().sum::<u64>() as f64;
        if full < self.counts.len() {
            mass += (pos - full as f64) * self.counts[full] as f64;
        }
        mass / self.total as f64
    }

    /// Smallest `t` with interpolated CDF `>= p`. `p = 0` gives 0 and `p = 1`
    /// gives `hi`; if the overflow mass is needed to reach `p` the result is
    /// also `hi`.
    pub fn estimate_threshold(&self, p: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&p) {
            return Err(TealError::InvalidArgument(format!("sparsity {p} outside [0, 1]")));
        }
        if self.total == 0 {
            return Err(TealError::Empty(format!("histogram {} has no samples", self.layer_id)));
        }
        if p == 0.0 {
            return Ok(0.0);
        }
        if p == 1.0 {
            return Ok(self.hi);
        }
        let target = p * self.total as f64;
        let width = self.bin_width();
        let mut cum = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            if cum + c >= target {
                let frac = ((target - cum) / c).clamp(0.0, 1.0);
                return Ok(((b as f64 + frac) * width).min(self.hi));
            }
            cum += c;
        }
        Ok(self.hi)
    }

    pub fn threshold<T: Scalar>(&self, p: f64) -> Result<Threshold<T>> {
        Threshold::from_f64(self.estimate_threshold(p)?)
    }

    /// `TEALH1 <layer_id> <bin_count> <lo> <hi> <total> <overflow>` followed
    /// by one count per line.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(16 + self.counts.len() * 4);
        let _ = writeln!(
            s,
            "TEALH1 {} {} {:?} {:?} {} {}",
            self.layer_id,
            self.counts.len(),
            0.0f64,
            self.hi,
            self.total,
            self.overflow
        );
        for c in &self.counts {
            let _ = writeln!(s, "{c}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |d: String| TealError::format("histogram", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 7 || f[0] != "TEALH1" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let bins: usize = f[2].parse().map_err(|_| bad(format!("bin count {:?}", f[2])))?;
        let lo: f64 = f[3].parse().map_err(|_| bad(format!("lo {:?}", f[3])))?;
        let hi: f64 = f[4].parse().map_err(|_| bad(format!("hi {:?}", f[4])))?;
        let total: u64 = f[5].parse().map_err(|_| bad(format!("total {:?}", f[5])))?;
        let overflow: u64 = f[6].parse().map_err(|_| bad(format!("overflow {:?}", f[6])))?;
        if lo != 0.0 {
            return Err(bad(format!("lo must be 0, got {lo}")));
        }
        let mut h = ActivationHistogram::new(f[1], bins, hi)?;
        for (b, slot) in h.counts.iter_mut().enumerate() {
            let line = lines.next().ok_or_else(|| bad(format!("missing count for bin {b}")))?;
            *slot = line.trim().parse().map_err(|_| bad(format!("bin {b}: {line:?}")))?;
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing data after counts".into()));
        }
        h.overflow = overflow;
        h.total = total;
        let sum: u64 = h.counts.iter().sum::<u64>() + overflow;
        if sum != total {
            return Err(bad(format!("total {total} != counts + overflow {sum}")));
        }
        Ok(h)
    }
}
