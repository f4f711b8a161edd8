use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

/// Discordant and concordant counts for two paired binary raters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairedOutcome {
    /// First correct, second wrong.
    pub b: u64,
    /// First wrong, second correct.
    pub c: u64,
    pub n_concordant: u64,
}

impl PairedOutcome {
    /// Tallies paired correctness vectors.
    pub fn from_correctness(first: &[bool], second: &[bool]) -> Self {
        let mut out = PairedOutcome::default();
        for (&x, &y) in first.iter().zip(second) {
            match (x, y) {
                (true, false) => out.b += 1,
                (false, true) => out.c += 1,
                _ => out.n_concordant += 1,
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum McNemarVariant {
    /// Exact binomial test on the discordant pairs.
    #[default]
    Exact,
    /// Chi-square with continuity correction, for large discordant counts.
    ChiSquareCorrected,
}

/// `sum_{i<=m} C(n, i)`, exact for `n <= 120`.
fn binomial_prefix_count(m: u64, n: u64) -> u128 {
    let mut coef: u128 = 1;
    let mut total: u128 = 1;
    for i in 1..=m {
        coef = coef * u128::from(n - i + 1) / u128::from(i);
        total += coef;
    }
    total
}

/// `P(X <= m)` for `X ~ Binomial(n, 1/2)`.
fn half_binomial_cdf(m: u64, n: u64) -> f64 {
    if m >= n {
        return 1.0;
    }
    if n <= 120 {
        return binomial_prefix_count(m, n) as f64 / 2f64.powi(n as i32);
    }
    beta_reg((n - m) as f64, (m + 1) as f64, 0.5)
}

/// Two-tailed exact McNemar p-value: `min(1, 2 P(X <= min(b, c)))` with
/// `X ~ Binomial(b + c, 1/2)`; 1 when there are no discordant pairs.
pub fn mcnemar_two_tailed(outcome: PairedOutcome) -> f64 {
    let n = outcome.b + outcome.c;
    if n == 0 {
        return 1.0;
    }
    let m = outcome.b.min(outcome.c);
    if n <= 120 {
        // doubling stays in the integer part so the result is exact
        let total = binomial_prefix_count(m, n);
        return ((2 * total) as f64 / 2f64.powi(n as i32)).min(1.0);
    }
    (2.0 * half_binomial_cdf(m, n)).min(1.0)
}

pub fn mcnemar_chi2_corrected(outcome: PairedOutcome) -> f64 {
    let n = outcome.b + outcome.c;
    if n == 0 {
        return 1.0;
    }
    let diff = (outcome.b.abs_diff(outcome.c) as f64 - 1.0).max(0.0);
    let stat = diff * diff / n as f64;
    // chi-square(1) survival function
    erfc((stat / 2.0).sqrt()).min(1.0)
}

pub fn mcnemar(outcome: PairedOutcome, variant: McNemarVariant) -> f64 {
    match variant {
        McNemarVariant::Exact => mcnemar_two_tailed(outcome),
        McNemarVariant::ChiSquareCorrected => mcnemar_chi2_corrected(outcome),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paired(b: u64, c: u64) -> PairedOutcome {
        PairedOutcome {
            b,
            c,
            n_concordant: 0,
        }
    }

    #[test]
    fn examples() {
        assert_eq!(mcnemar_two_tailed(paired(0, 0)), 1.0);
        assert!((mcnemar_two_tailed(paired(10, 0)) - 0.001953125).abs() < 1e-15);
        assert_eq!(mcnemar_two_tailed(paired(5, 5)), 1.0);
    }

    #[test]
    fn symmetric_and_ignores_concordant() {
        for b in 0..15 {
            for c in 0..15 {
                let p = mcnemar_two_tailed(paired(b, c));
                assert_eq!(p, mcnemar_two_tailed(paired(c, b)));
                let with_concordant = PairedOutcome {
                    b,
                    c,
                    n_concordant: 77,
                };
                assert_eq!(p, mcnemar_two_tailed(with_concordant));
                assert!((0.0..=1.0).contains(&p));
            }
        }
    }

    #[test]
    fn large_counts_use_beta_route() {
        // continuity across the integer/beta switch
        let small = 2.0 * half_binomial_cdf(50, 120);
        let large = 2.0 * beta_reg(70.0, 51.0, 0.5);
        assert!((small - large).abs() < 1e-12);
        let p = mcnemar_two_tailed(paired(100, 140));
        assert!(p > 0.0 && p < 0.05);
    }

    #[test]
    fn chi_square_variant() {
        // b=10, c=0: (10-1)^2/10 = 8.1 -> p = 0.00443
        let p = mcnemar_chi2_corrected(paired(10, 0));
        assert!((p - 0.004_427_0).abs() < 1e-6, "{p}");
        assert_eq!(mcnemar_chi2_corrected(paired(3, 3)), 1.0);
    }

    #[test]
    fn tally() {
        let first = [true, true, false, false, true];
        let second = [true, false, true, false, false];
        let o = PairedOutcome::from_correctness(&first, &second);
        assert_eq!((o.b, o.c, o.n_concordant), (2, 1, 2));
    }
}
