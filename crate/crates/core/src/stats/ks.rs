use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum KsMethod {
    /// Limiting Kolmogorov distribution at the effective sample size.
    #[default]
    Asymptotic,
    /// Exact lattice-path count when `n_x * n_y <= 400`, asymptotic otherwise.
    ExactSmall,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    pub p: f64,
    pub n_x: usize,
    pub n_y: usize,
    /// Method actually used for `p`.
    pub method: KsMethod,
}

const EXACT_LIMIT: usize = 400;

/// Survival function of the Kolmogorov distribution, `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small lambda
        let x = -std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda);
        let mut cdf = 0.0;
        for k in 0..20 {
            let j = (2 * k + 1) as f64;
            cdf += (j * j * x).exp();
        }
        cdf *= (2.0 * std::f64::consts::PI).sqrt() / lambda;
        return (1.0 - cdf).clamp(0.0, 1.0);
    }
    let mut total = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        total += if k % 2 == 1 { term } else { -term };
        if term < 1e-17 {
            break;
        }
    }
    (2.0 * total).clamp(0.0, 1.0)
}

fn sorted(sample: &[f64], name: &'static str) -> Result<Vec<f64>> {
    if sample.is_empty() {
        return Err(Error::EmptySample(name));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData(format!("{name} contains non-finite values")));
    }
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// `max |i * n_y - j * n_x|` over the merged ECDF steps; `D` is this value
/// divided by `n_x * n_y`.
fn max_scaled_gap(x: &[f64], y: &[f64]) -> u64 {
    let (nx, ny) = (x.len() as u64, y.len() as u64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut best = 0u64;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] == t {
            i += 1;
        }
        while j < y.len() && y[j] == t {
            j += 1;
        }
        best = best.max((i as u64 * ny).abs_diff(j as u64 * nx));
    }
    best
}

/// Probability that a random interleaving reaches a scaled gap of at least
/// `gap`, by counting lattice paths that stay strictly inside.
fn exact_p(nx: usize, ny: usize, gap: u64) -> f64 {
    let inside = |i: usize, j: usize| ((i * ny) as u64).abs_diff((j * nx) as u64) < gap;
    // paths / C(nx+ny, nx) accumulated as probabilities to avoid overflow
    let mut row = vec![0.0f64; ny + 1];
    for i in 0..=nx {
        for j in 0..=ny {
            let v = if i == 0 && j == 0 {
                1.0
            } else if !inside(i, j) {
                0.0
            } else {
                let from_left = if j > 0 { row[j - 1] } else { 0.0 };
                let from_top = if i > 0 { row[j] } else { 0.0 };
                // weights keep each cell a probability under uniform interleaving
                let n = (i + j) as f64;
                from_top * i as f64 / n + from_left * j as f64 / n
            };
            row[j] = v;
        }
    }
    (1.0 - row[ny]).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(x: &[f64], y: &[f64], method: KsMethod) -> Result<KsResult> {
    let xs = sorted(x, "x")?;
    let ys = sorted(y, "y")?;
    let (nx, ny) = (xs.len(), ys.len());
    let gap = max_scaled_gap(&xs, &ys);
    let d = gap as f64 / (nx as f64 * ny as f64);
    let (p, used) = if method == KsMethod::ExactSmall && nx * ny <= EXACT_LIMIT {
        (if gap == 0 { 1.0 } else { exact_p(nx, ny, gap) }, KsMethod::ExactSmall)
    } else {
        let en = (nx as f64 * ny as f64) / (nx + ny) as f64;
        (kolmogorov_survival(en.sqrt() * d), KsMethod::Asymptotic)
    };
    Ok(KsResult {
        d,
        p,
        n_x: nx,
        n_y: ny,
        method: used,
    })
}
