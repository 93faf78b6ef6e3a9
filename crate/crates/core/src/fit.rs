//! Maximum-likelihood Gaussian and Laplace fits, used to tell the two
//! activation shapes apart by negative log-likelihood.

use std::fmt;

use crate::error::{Result, TealError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Gaussian,
    Laplace,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Laplace => "laplace",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistributionFit {
    pub family: Family,
    pub location: f64,
    /// σ for Gaussian, b for Laplace.
    pub scale: f64,
    /// Total negative log-likelihood of the samples under the fit.
    pub neg_log_likelihood: f64,
}

impl DistributionFit {
    pub fn nll_per_sample(&self, n: usize) -> f64 {
        self.neg_log_likelihood / n as f64
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Gaussian: (mean, std with 1/n). Laplace: (median, mean absolute
/// deviation from the median).
pub fn fit_distribution<T: Scalar>(samples: &[T], family: Family) -> Result<DistributionFit> {
    let n = samples.len();
    if n < 2 {
        return Err(TealError::InvalidArgument(format!(
            "distribution fit needs at least 2 samples, got {n}"
        )));
    }
    let xs: Vec<f64> = samples.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(TealError::NonFinite("distribution fit samples".into()));
    }
    let nf = n as f64;
    let (location, scale, nll) = match family {
        Family::Gaussian => {
            let mean = xs.iter().sum::<f64>() / nf;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
            let sd = var.sqrt();
            let nll = 0.5 * nf * (2.0 * std::f64::consts::PI * var).ln() + 0.5 * nf;
            (mean, sd, nll)
        }
        Family::Laplace => {
            let mut sorted = xs.clone();
            sorted.sort_by(f64::total_cmp);
            let med = median(&sorted);
            let b = xs.iter().map(|x| (x - med).abs()).sum::<f64>() / nf;
            let nll = nf * (2.0 * b).ln() + nf;
            (med, b, nll)
        }
    };
    if scale.is_nan() || scale <= 0.0 {
        return Err(TealError::InvalidArgument(
            "samples are constant; fitted scale is zero".into(),
        ));
    }
    Ok(DistributionFit {
        family,
        location,
        scale,
        neg_log_likelihood: nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_gaussian, sample_laplace, RngStream};
    use crate::tensor::Vector;

    #[test]
    fn symmetric_pair_centres_at_zero() {
        let f = fit_distribution(&[-1.0f64, 1.0], Family::Gaussian).unwrap();
        assert_eq!(f.location, 0.0);
        assert_eq!(f.scale, 1.0);
    }

    #[test]
    fn constant_samples_rejected() {
        assert!(fit_distribution(&[2.0f32; 10], Family::Gaussian).is_err());
        assert!(fit_distribution(&[2.0f32; 10], Family::Laplace).is_err());
        assert!(fit_distribution(&[2.0f32], Family::Laplace).is_err());
    }

    #[test]
    fn gaussian_mle_recovers_sigma() {
        let x: Vector<f64> = sample_gaussian(&mut RngStream::new(31), 1_000_000, 2.0).unwrap();
        let f = fit_distribution(&x, Family::Gaussian).unwrap();
        assert!((1.99..=2.01).contains(&f.scale), "sigma={}", f.scale);
        let l = fit_distribution(&x, Family::Laplace).unwrap();
        assert!(f.neg_log_likelihood < l.neg_log_likelihood);
    }

    #[test]
    fn laplace_mle_recovers_scale() {
        let x: Vector<f64> = sample_laplace(&mut RngStream::new(32), 1_000_000, 1.0).unwrap();
        let f = fit_distribution(&x, Family::Laplace).unwrap();
        assert!((0.99..=1.01).contains(&f.scale), "b={}", f.scale);
        let g = fit_distribution(&x, Family::Gaussian).unwrap();
        assert!(f.neg_log_likelihood < g.neg_log_likelihood);
    }
}
