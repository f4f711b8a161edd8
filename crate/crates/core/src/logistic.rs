//! Unpenalized multivariable logistic regression by iteratively reweighted
//! least squares, with Wald statistics and separation diagnostics.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::grade::{BinaryLabelSet, FeatureId};

pub const INTERCEPT: &str = "(intercept)";

/// Outcome and predictors with complete cases only. The intercept column is
/// implicit and always first in the fitted coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    columns: Vec<String>,
    x: Vec<Vec<f64>>,
    y: Vec<bool>,
    n_dropped: usize,
}

impl DesignMatrix {
    pub fn new(columns: Vec<String>, x: Vec<Vec<f64>>, y: Vec<bool>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: y.len(),
            });
        }
        if let Some(row) = x.iter().find(|r| r.len() != columns.len()) {
            return Err(Error::LengthMismatch {
                left: row.len(),
                right: columns.len(),
            });
        }
        if x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateData("non-finite predictor value".into()));
        }
        Ok(DesignMatrix {
            columns,
            x,
            y,
            n_dropped: 0,
        })
    }

    /// Binary design from label sets, dropping any case with a missing
    /// outcome or a missing included predictor.
    pub fn from_labels(features: &[FeatureId], labels: &[BinaryLabelSet]) -> Self {
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut n_dropped = 0;
        for l in labels {
            let row: Option<Vec<f64>> = features
                .iter()
                .map(|&f| l.feature(f).map(|b| if b { 1.0 } else { 0.0 }))
                .collect();
            match (l.refer, row) {
                (Some(r), Some(row)) => {
                    x.push(row);
                    y.push(r);
                }
                _ => n_dropped += 1,
            }
        }
        DesignMatrix {
            columns: features.iter().map(|f| f.column().to_string()).collect(),
            x,
            y,
            n_dropped,
        }
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn outcome(&self) -> &[bool] {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_dropped(&self) -> usize {
        self.n_dropped
    }

    fn row_with_intercept(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(1.0).chain(self.x[i].iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// |beta| above this at termination flags quasi-separation.
    pub beta_cap: f64,
    pub se_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 100,
            beta_cap: 15.0,
            se_cap: 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CoefFlag {
    QuasiSeparated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub beta: f64,
    pub odds_ratio: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    /// 1-based rank by descending odds ratio; 0 for the intercept.
    pub rank: usize,
    pub flags: Vec<CoefFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub intercept: Coefficient,
    /// Predictors in declaration order.
    pub coefficients: Vec<Coefficient>,
    pub log_likelihood: f64,
    pub n_iter: usize,
    pub converged: bool,
    pub n: usize,
    pub n_dropped: usize,
    /// Stopped early because the information matrix lost rank mid-fit.
    pub information_collapsed: bool,
    /// Coefficient vector after each iteration, intercept first.
    pub beta_trace: Vec<Vec<f64>>,
}

impl RegressionReport {
    pub fn any_separation(&self) -> bool {
        self.information_collapsed
            || std::iter::once(&self.intercept)
                .chain(&self.coefficients)
                .any(|c| c.flags.contains(&CoefFlag::QuasiSeparated))
    }
}

/// Lower-triangular Cholesky factor of a `p x p` row-major matrix, or `None`
/// when a pivot falls below `1e-12` of its original diagonal.
fn cholesky(a: &[f64], p: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; p * p];
    for j in 0..p {
        let mut d = a[j * p + j];
        for k in 0..j {
            d -= l[j * p + k] * l[j * p + k];
        }
        if !(d > 1e-12 * a[j * p + j].abs()) || a[j * p + j] <= 0.0 {
            return None;
        }
        let d = d.sqrt();
        l[j * p + j] = d;
        for i in j + 1..p {
            let mut s = a[i * p + j];
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            l[i * p + j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], p: usize, b: &[f64]) -> Vec<f64> {
    let mut z = b.to_vec();
    for i in 0..p {
        for k in 0..i {
            z[i] -= l[i * p + k] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    for i in (0..p).rev() {
        for k in i + 1..p {
            z[i] -= l[k * p + i] * z[k];
        }
        z[i] /= l[i * p + i];
    }
    z
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Bernoulli log-likelihood, computed stably from the linear predictor.
fn log_likelihood(d: &DesignMatrix, beta: &[f64]) -> f64 {
    (0..d.n())
        .map(|i| {
            let eta: f64 = d.row_with_intercept(i).zip(beta).map(|(x, b)| x * b).sum();
            // log(1 + e^eta) without overflow
            let softplus = if eta > 0.0 {
                eta + (-eta).exp().ln_1p()
            } else {
                eta.exp().ln_1p()
            };
            if d.y[i] {
                eta - softplus
            } else {
                -softplus
            }
        })
        .sum()
}

/// Fisher information `X' W X` (row-major) and score `X' (y - mu)`.
fn information_and_score(d: &DesignMatrix, beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let p = beta.len();
    let mut info = vec![0.0; p * p];
    let mut score = vec![0.0; p];
    let mut row = vec![0.0; p];
    for i in 0..d.n() {
        for (slot, v) in row.iter_mut().zip(d.row_with_intercept(i)) {
            *slot = v;
        }
        let eta: f64 = row.iter().zip(beta).map(|(x, b)| x * b).sum();
        let mu = sigmoid(eta);
        let w = mu * (1.0 - mu);
        let r = if d.y[i] { 1.0 } else { 0.0 } - mu;
        for a in 0..p {
            score[a] += row[a] * r;
            let wa = w * row[a];
            for b in 0..=a {
                info[a * p + b] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            info[b * p + a] = info[a * p + b];
        }
    }
    (info, score)
}

/// Columns that are linear combinations of the intercept and earlier
/// columns, found by adding columns one at a time.
fn collinear_columns(d: &DesignMatrix) -> Vec<String> {
    let p = d.columns.len() + 1;
    let names: Vec<&str> = std::iter::once(INTERCEPT)
        .chain(d.columns.iter().map(String::as_str))
        .collect();
    let mut gram = vec![0.0; p * p];
    for i in 0..d.n() {
        let row: Vec<f64> = d.row_with_intercept(i).collect();
        for a in 0..p {
            for b in 0..p {
                gram[a * p + b] += row[a] * row[b];
            }
        }
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..p {
        let mut trial = kept.clone();
        trial.push(j);
        let q = trial.len();
        let sub: Vec<f64> = trial
            .iter()
            .flat_map(|&a| trial.iter().map(move |&b| (a, b)))
            .map(|(a, b)| gram[a * p + b])
            .collect();
        if cholesky(&sub, q).is_some() {
            kept.push(j);
        } else {
            bad.push(names[j].to_string());
        }
    }
    bad
}

fn wald(name: &str, beta: f64, se: f64, opts: &FitOptions) -> Coefficient {
    let z = beta / se;
    let p = if z.is_finite() {
        erfc(z.abs() / std::f64::consts::SQRT_2)
    } else {
        1.0
    };
    let mut flags = Vec::new();
    if beta.abs() > opts.beta_cap || !(se <= opts.se_cap) {
        flags.push(CoefFlag::QuasiSeparated);
    }
    Coefficient {
        name: name.to_string(),
        beta,
        odds_ratio: beta.exp(),
        se,
        z: if z.is_finite() { z } else { 0.0 },
        p,
        rank: 0,
        flags,
    }
}

pub fn fit_logistic(d: &DesignMatrix, opts: &FitOptions) -> Result<RegressionReport> {
    let p = d.columns.len() + 1;
    if d.n() < p {
        return Err(Error::InvalidCount(format!(
            "{} complete cases for {} parameters",
            d.n(),
            p
        )));
    }
    let positives = d.y.iter().filter(|&&v| v).count();
    if positives == 0 {
        return Err(Error::OneClassOnly("negatives"));
    }
    if positives == d.n() {
        return Err(Error::OneClassOnly("positives"));
    }

    let mut beta = vec![0.0; p];
    let mut trace = Vec::new();
    let mut converged = false;
    let mut collapsed = false;
    let mut n_iter = 0;
    while n_iter < opts.max_iter {
        let (info, score) = information_and_score(d, &beta);
        let Some(l) = cholesky(&info, p) else {
            if n_iter == 0 {
                return Err(Error::SingularInformation {
                    columns: collinear_columns(d),
                });
            }
            collapsed = true;
            break;
        };
        let step = cholesky_solve(&l, p, &score);
        let max_step = step.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        beta.iter_mut().zip(&step).for_each(|(b, s)| *b += s);
        trace.push(beta.clone());
        n_iter += 1;
        if max_step < opts.tol {
            converged = true;
            break;
        }
    }

    let (info, _) = information_and_score(d, &beta);
    let se: Vec<f64> = match cholesky(&info, p) {
        Some(l) => (0..p)
            .map(|j| {
                let mut e = vec![0.0; p];
                e[j] = 1.0;
                cholesky_solve(&l, p, &e)[j].sqrt()
            })
            .collect(),
        None => {
            collapsed = true;
            vec![f64::INFINITY; p]
        }
    };

    let intercept = wald(INTERCEPT, beta[0], se[0], opts);
    let mut coefficients: Vec<Coefficient> = d
        .columns
        .iter()
        .enumerate()
        .map(|(j, name)| wald(name, beta[j + 1], se[j + 1], opts))
        .collect();
    let mut order: Vec<usize> = (0..coefficients.len()).collect();
    // ratios equal to 12 significant digits count as ties
    let key = |v: f64| -> f64 { format!("{v:.11e}").parse().unwrap_or(v) };
    order.sort_by(|&a, &b| key(coefficients[b].odds_ratio).total_cmp(&key(coefficients[a].odds_ratio)));
    for (rank, &j) in order.iter().enumerate() {
        coefficients[j].rank = rank + 1;
    }
    Ok(RegressionReport {
        intercept,
        coefficients,
        log_likelihood: log_likelihood(d, &beta),
        n_iter,
        converged,
        n: d.n(),
        n_dropped: d.n_dropped,
        information_collapsed: collapsed,
        beta_trace: trace,
    })
}

/// Predictors by descending odds ratio; equal ratios keep declaration order.
pub fn rank_features(r: &RegressionReport) -> Vec<&Coefficient> {
    let mut v: Vec<&Coefficient> = r.coefficients.iter().collect();
    v.sort_by_key(|c| c.rank);
    v
}

/// The five label sources a regression can be run on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegressionPreset {
    ReferenceStandard,
    Round1Median,
    AlgorithmPredictions,
    TrainingMedian,
    TuningMedian,
}

impl RegressionPreset {
    pub const ALL: [RegressionPreset; 5] = [
        RegressionPreset::ReferenceStandard,
        RegressionPreset::Round1Median,
        RegressionPreset::AlgorithmPredictions,
        RegressionPreset::TrainingMedian,
        RegressionPreset::TuningMedian,
    ];

    pub fn label(self) -> &'static str {
        match self {
            RegressionPreset::ReferenceStandard => "reference_standard",
            RegressionPreset::Round1Median => "round1_median",
            RegressionPreset::AlgorithmPredictions => "algorithm",
            RegressionPreset::TrainingMedian => "training_median",
            RegressionPreset::TuningMedian => "tuning_median",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == token)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(a: usize, b: usize, c: usize, d: usize) -> DesignMatrix {
        // a: x=1,y=1  b: x=1,y=0  c: x=0,y=1  d: x=0,y=0
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (n, xv, yv) in [(a, 1.0, true), (b, 1.0, false), (c, 0.0, true), (d, 0.0, false)] {
            for _ in 0..n {
                x.push(vec![xv]);
                y.push(yv);
            }
        }
        DesignMatrix::new(vec!["x".into()], x, y).unwrap()
    }

    #[test]
    fn balanced_table_gives_zero() {
        let r = fit_logistic(&table(20, 20, 20, 20), &FitOptions::default()).unwrap();
        assert_eq!(r.coefficients[0].beta, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn saturated_log_odds_ratio() {
        let r = fit_logistic(&table(30, 10, 10, 30), &FitOptions::default()).unwrap();
        assert!((r.coefficients[0].beta - 9f64.ln()).abs() < 1e-8);
        assert!((r.coefficients[0].odds_ratio - 9.0).abs() < 1e-7);
        // Woolf standard error sqrt(1/a + 1/b + 1/c + 1/d)
        let se = (1.0 / 30.0 + 1.0 / 10.0 + 1.0 / 10.0 + 1.0 / 30.0f64).sqrt();
        assert!((r.coefficients[0].se - se).abs() < 1e-8);
        assert_eq!(rank_features(&r)[0].rank, 1);
    }

    #[test]
    fn separation_flagged_and_beta_grows() {
        let r = fit_logistic(&table(10, 0, 3, 12), &FitOptions::default()).unwrap();
        assert!(r.any_separation());
        assert!(r.coefficients[0].flags.contains(&CoefFlag::QuasiSeparated));
        let path: Vec<f64> = r.beta_trace.iter().map(|b| b[1].abs()).collect();
        assert!(path.windows(2).all(|w| w[1] >= w[0]), "{path:?}");
    }

    #[test]
    fn collinear_columns_reported() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| {
                let a = f64::from(i % 2);
                vec![a, f64::from(i % 3 == 0), a]
            })
            .collect();
        let y = (0..20).map(|i| i % 5 < 2).collect();
        let d = DesignMatrix::new(vec!["a".into(), "b".into(), "a_copy".into()], x, y).unwrap();
        match fit_logistic(&d, &FitOptions::default()) {
            Err(Error::SingularInformation { columns }) => assert_eq!(columns, vec!["a_copy"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_class_and_too_few_rows() {
        let d = DesignMatrix::new(vec!["x".into()], vec![vec![0.0], vec![1.0]], vec![true, true]).unwrap();
        assert!(matches!(fit_logistic(&d, &FitOptions::default()), Err(Error::OneClassOnly(_))));
        let d = DesignMatrix::new(vec!["x".into()], vec![vec![0.0]], vec![true]).unwrap();
        assert!(fit_logistic(&d, &FitOptions::default()).is_err());
    }

    #[test]
    fn ranks_and_ties() {
        // two identical columns in distribution but not collinear
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (a, b, yv, n) in [
            (1.0, 0.0, true, 6),
            (1.0, 0.0, false, 2),
            (0.0, 1.0, true, 6),
            (0.0, 1.0, false, 2),
            (0.0, 0.0, true, 2),
            (0.0, 0.0, false, 6),
        ] {
            for _ in 0..n {
                x.push(vec![a, b]);
                y.push(yv);
            }
        }
        let d = DesignMatrix::new(vec!["first".into(), "second".into()], x, y).unwrap();
        let r = fit_logistic(&d, &FitOptions::default()).unwrap();
        let ranked = rank_features(&r);
        assert_eq!(ranked[0].name, "first");
        assert_eq!(ranked[1].name, "second");
    }

    #[test]
    fn duplication_halves_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x: Vec<Vec<f64>> = (0..200).map(|_| vec![f64::from(rng.random_bool(0.5)), rng.random_range(-1.0..1.0)]).collect();
        let y: Vec<bool> = x.iter().map(|r| rng.random_bool(sigmoid(0.3 + r[0] - 0.8 * r[1]))).collect();
        let d = DesignMatrix::new(vec!["a".into(), "b".into()], x.clone(), y.clone()).unwrap();
        let d2 = DesignMatrix::new(
            vec!["a".into(), "b".into()],
            x.iter().chain(&x).cloned().collect(),
            y.iter().chain(&y).copied().collect(),
        )
        .unwrap();
        let r = fit_logistic(&d, &FitOptions::default()).unwrap();
        let r2 = fit_logistic(&d2, &FitOptions::default()).unwrap();
        for (a, b) in r.coefficients.iter().zip(&r2.coefficients) {
            assert!((a.beta - b.beta).abs() < 1e-9);
            assert!((a.se * a.se / 2.0 - b.se * b.se).abs() < 1e-9);
        }
        // row order
        let mut idx: Vec<usize> = (0..200).collect();
        idx.reverse();
        let d3 = DesignMatrix::new(
            vec!["a".into(), "b".into()],
            idx.iter().map(|&i| x[i].clone()).collect(),
            idx.iter().map(|&i| y[i]).collect(),
        )
        .unwrap();
        let r3 = fit_logistic(&d3, &FitOptions::default()).unwrap();
        for (a, b) in r.coefficients.iter().zip(&r3.coefficients) {
            assert!((a.beta - b.beta).abs() < 1e-10);
        }
    }

    #[test]
    fn from_labels_drops_incomplete() {
        let mut a = BinaryLabelSet::default();
        a.refer = Some(true);
        a.feature_positive.insert(FeatureId::Notch, Some(true));
        let mut b = a.clone();
        b.feature_positive.insert(FeatureId::Notch, None);
        let mut c = a.clone();
        c.refer = None;
        let d = DesignMatrix::from_labels(&[FeatureId::Notch], &[a, b, c]);
        assert_eq!(d.n(), 1);
        assert_eq!(d.n_dropped(), 2);
    }

    proptest! {
        #[test]
        fn beats_grid_on_small_problems(
            rows in proptest::collection::vec((any::<bool>(), any::<bool>()), 4..12)
        ) {
            let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![f64::from(r.0)]).collect();
            let y: Vec<bool> = rows.iter().map(|r| r.1).collect();
            let d = DesignMatrix::new(vec!["x".into()], x, y).unwrap();
            if let Ok(r) = fit_logistic(&d, &FitOptions::default()) {
                let best = r.log_likelihood;
                for i in 0..=40 {
                    for j in 0..=40 {
                        let b = [-10.0 + 0.5 * f64::from(i), -10.0 + 0.5 * f64::from(j)];
                        prop_assert!(log_likelihood(&d, &b) <= best + 1e-9);
                    }
                }
            }
        }
    }
}
