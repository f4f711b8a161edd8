use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

/// Exact (Clopper-Pearson) confidence interval for a binomial proportion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialCI {
    pub k: u64,
    pub n: u64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

impl BinomialCI {
    pub fn estimate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

/// Inverts the regularized incomplete beta function by bisection.
fn beta_quantile(p: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// The lower bound solves `P(X >= k | p) = alpha/2` and the upper bound
/// `P(X <= k | p) = alpha/2`, both through the beta/binomial tail identity.
pub fn clopper_pearson(k: u64, n: u64, level: f64) -> Result<BinomialCI> {
    if n == 0 {
        return Err(Error::InvalidCount("n must be at least 1".into()));
    }
    if k > n {
        return Err(Error::InvalidCount(format!("k={k} exceeds n={n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidCount(format!("level {level} outside (0, 1)")));
    }
    let alpha = 1.0 - level;
    let (kf, nf) = (k as f64, n as f64);
    let lower = if k == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, kf, nf - kf + 1.0)
    };
    let upper = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, kf + 1.0, nf - kf)
    };
    Ok(BinomialCI {
        k,
        n,
        level,
        lower,
        upper,
    })
}
