//! ROC analysis of referable-GON scores: curves and AUC, bootstrap AUC
//! intervals, operating-point calibration on a tuning set, sensitivity and
//! specificity with exact intervals, and grader-versus-algorithm comparison.
//!
//! A case is called positive at threshold `t` when `score >= t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjudication::ReferenceStandard;
use crate::error::{Error, Result};
use crate::grade::{FeatureId, GraderRole};
use crate::stats::bootstrap::{draw_indices, interval, resample_rng};
use crate::stats::{
    clopper_pearson, ks_two_sample, mcnemar, BinomialCI, BootstrapConfig, BootstrapResult,
    KsMethod, KsResult, McNemarVariant, PairedOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCase {
    pub image_id: String,
    pub score: f64,
    /// Reference label (referable).
    pub label: bool,
}

impl ScoredCase {
    pub fn new(image_id: impl Into<String>, score: f64, label: bool) -> Result<Self> {
        let image_id = image_id.into();
        if !(score.is_finite() && (0.0..=1.0).contains(&score)) {
            return Err(Error::InvalidProbabilities {
                image_id,
                message: format!("score {score} outside [0, 1]"),
            });
        }
        Ok(ScoredCase {
            image_id,
            score,
            label,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From threshold `+inf` (0, 0) down to the lowest score (1, 1).
    pub points: Vec<RocPoint>,
    pub auc: f64,
    pub n_pos: u64,
    pub n_neg: u64,
}

/// Cases grouped by distinct score, highest first.
struct ScoreBlocks {
    thresholds: Vec<f64>,
    block_of: Vec<usize>,
    pos: Vec<u64>,
    neg: Vec<u64>,
}

impl ScoreBlocks {
    fn new(cases: &[ScoredCase]) -> Self {
        let mut order: Vec<usize> = (0..cases.len()).collect();
        order.sort_by(|&a, &b| cases[b].score.total_cmp(&cases[a].score));
        let mut thresholds = Vec::new();
        let mut block_of = vec![0; cases.len()];
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for &i in &order {
            if thresholds.last() != Some(&cases[i].score) {
                thresholds.push(cases[i].score);
                pos.push(0);
                neg.push(0);
            }
            let b = thresholds.len() - 1;
            block_of[i] = b;
            if cases[i].label {
                pos[b] += 1;
            } else {
                neg[b] += 1;
            }
        }
        ScoreBlocks {
            thresholds,
            block_of,
            pos,
            neg,
        }
    }
}

/// Twice the trapezoid area under the count-scaled ROC staircase, together
/// with the class totals. Integer arithmetic keeps it exact.
fn doubled_area(pos: &[u64], neg: &[u64]) -> (u128, u64, u64) {
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut area = 0u128;
    for (&p, &n) in pos.iter().zip(neg) {
        let (tp_next, fp_next) = (tp + p, fp + n);
        area += u128::from(fp_next - fp) * u128::from(tp + tp_next);
        tp = tp_next;
        fp = fp_next;
    }
    (area, tp, fp)
}

fn auc_from_counts(pos: &[u64], neg: &[u64]) -> Option<f64> {
    let (area, p, n) = doubled_area(pos, neg);
    (p > 0 && n > 0).then(|| area as f64 / (2 * u128::from(p) * u128::from(n)) as f64)
}

fn class_counts(cases: &[ScoredCase]) -> Result<(u64, u64)> {
    let p = cases.iter().filter(|c| c.label).count() as u64;
    let n = cases.len() as u64 - p;
    match (p, n) {
        (0, _) => Err(Error::OneClassOnly("negatives")),
        (_, 0) => Err(Error::OneClassOnly("positives")),
        _ => Ok((p, n)),
    }
}

/// ROC curve over every distinct score, with trapezoidal AUC. Ties between
/// a positive and a negative count one half, matching the rank statistic.
pub fn roc(cases: &[ScoredCase]) -> Result<RocCurve> {
    let (n_pos, n_neg) = class_counts(cases)?;
    let blocks = ScoreBlocks::new(cases);
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0u64, 0u64);
    for (b, &threshold) in blocks.thresholds.iter().enumerate() {
        tp += blocks.pos[b];
        fp += blocks.neg[b];
        points.push(RocPoint {
            threshold,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    let auc = auc_from_counts(&blocks.pos, &blocks.neg).expect("both classes present");
    Ok(RocCurve {
        points,
        auc,
        n_pos,
        n_neg,
    })
}

const MAX_REDRAWS: u32 = 10_000;

/// Bootstrap interval for the AUC over image-level resamples. Resamples that
/// contain a single class are redrawn from the same substream; the number of
/// redraws is reported.
pub fn auc_with_ci(cases: &[ScoredCase], cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    class_counts(cases)?;
    if cfg.n_resamples == 0 {
        return Err(Error::InvalidCount("n_resamples must be positive".into()));
    }
    let blocks = ScoreBlocks::new(cases);
    let point = auc_from_counts(&blocks.pos, &blocks.neg).expect("both classes present");
    let n = cases.len();
    let k = blocks.thresholds.len();

    let draws: Vec<(f64, u64)> = (0..cfg.n_resamples)
        .into_par_iter()
        .map(|i| {
            let mut rng = resample_rng(cfg.seed, i);
            let mut idx = Vec::with_capacity(n);
            let (mut pos, mut neg) = (vec![0u64; k], vec![0u64; k]);
            for attempt in 0..MAX_REDRAWS {
                draw_indices(&mut rng, n, &mut idx);
                pos.iter_mut().for_each(|v| *v = 0);
                neg.iter_mut().for_each(|v| *v = 0);
                for &j in &idx {
                    let b = blocks.block_of[j];
                    if cases[j].label {
                        pos[b] += 1;
                    } else {
                        neg[b] += 1;
                    }
                }
                if let Some(auc) = auc_from_counts(&pos, &neg) {
                    return Ok((auc, u64::from(attempt)));
                }
            }
            Err(Error::StatisticUndefined {
                index: i,
                message: format!("{MAX_REDRAWS} consecutive single-class resamples"),
            })
        })
        .collect::<Result<_>>()?;
    let replicates: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let n_redrawn = draws.iter().map(|d| d.1).sum();

    let jackknife: Vec<f64> = (0..n)
        .into_par_iter()
        .filter_map(|skip| {
            let (mut pos, mut neg) = (blocks.pos.clone(), blocks.neg.clone());
            let b = blocks.block_of[skip];
            if cases[skip].label {
                pos[b] -= 1;
            } else {
                neg[b] -= 1;
            }
            auc_from_counts(&pos, &neg)
        })
        .collect();
    let (lower, upper) = interval(point, &replicates, Some(&jackknife), cfg.level, cfg.method);
    Ok(BootstrapResult {
        point,
        lower,
        upper,
        n_resamples: cfg.n_resamples,
        seed: cfg.seed,
        level: cfg.level,
        method: cfg.method,
        n_redrawn,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OperatingPointKind {
    HighSensitivity,
    HighSpecificity,
    Balanced,
}

impl OperatingPointKind {
    pub fn label(self) -> &'static str {
        match self {
            OperatingPointKind::HighSensitivity => "high_sensitivity",
            OperatingPointKind::HighSpecificity => "high_specificity",
            OperatingPointKind::Balanced => "balanced",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub kind: OperatingPointKind,
    pub threshold: f64,
    pub tuning_sens: f64,
    pub tuning_spec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPointFailure {
    pub kind: OperatingPointKind,
    pub message: String,
}

/// Calibrated thresholds; a point whose target cannot be met is listed in
/// `failures` while the others are still returned.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoints {
    pub points: Vec<OperatingPoint>,
    pub failures: Vec<OperatingPointFailure>,
}

impl OperatingPoints {
    pub fn get(&self, kind: OperatingPointKind) -> Option<&OperatingPoint> {
        self.points.iter().find(|p| p.kind == kind)
    }
}

/// Threshold sweep over the distinct tuning scores.
///
/// * Balanced: minimal `|sens - spec|`, ties going to the higher sensitivity.
/// * High sensitivity: the largest threshold with `sens >= sens_target`.
/// * High specificity: the smallest threshold with `spec >= spec_target`.
pub fn select_operating_points(
    tuning: &[ScoredCase],
    sens_target: f64,
    spec_target: f64,
) -> Result<OperatingPoints> {
    let (p, n) = class_counts(tuning)?;
    let blocks = ScoreBlocks::new(tuning);
    // (threshold, tp, tn) in descending threshold order
    let mut sweep = Vec::with_capacity(blocks.thresholds.len());
    let (mut tp, mut fp) = (0u64, 0u64);
    for (b, &t) in blocks.thresholds.iter().enumerate() {
        tp += blocks.pos[b];
        fp += blocks.neg[b];
        sweep.push((t, tp, n - fp));
    }
    let point = |kind, (t, tp, tn): (f64, u64, u64)| OperatingPoint {
        kind,
        threshold: t,
        tuning_sens: tp as f64 / p as f64,
        tuning_spec: tn as f64 / n as f64,
    };

    let mut out = OperatingPoints::default();

    let mut best: Option<((f64, u64, u64), u128)> = None;
    for &entry in &sweep {
        // |tp/p - tn/n| compared exactly as |tp*n - tn*p|
        let gap = (u128::from(entry.1) * u128::from(n)).abs_diff(u128::from(entry.2) * u128::from(p));
        if best.is_none_or(|(_, g)| gap <= g) {
            best = Some((entry, gap));
        }
    }
    if let Some((entry, _)) = best {
        out.points.push(point(OperatingPointKind::Balanced, entry));
    }

    match sweep.iter().find(|e| e.1 as f64 / p as f64 >= sens_target) {
        Some(&e) => out.points.push(point(OperatingPointKind::HighSensitivity, e)),
        None => out.failures.push(OperatingPointFailure {
            kind: OperatingPointKind::HighSensitivity,
            message: Error::TargetUnachievable {
                kind: "sensitivity".into(),
                target: sens_target,
            }
            .to_string(),
        }),
    }
    match sweep.iter().rev().find(|e| e.2 as f64 / n as f64 >= spec_target) {
        Some(&e) => out.points.push(point(OperatingPointKind::HighSpecificity, e)),
        None => out.failures.push(OperatingPointFailure {
            kind: OperatingPointKind::HighSpecificity,
            message: Error::TargetUnachievable {
                kind: "specificity".into(),
                target: spec_target,
            }
            .to_string(),
        }),
    }
    out.points.sort_by_key(|p| p.kind);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensSpec {
    pub threshold: f64,
    pub tp: u64,
    pub fn_: u64,
    pub tn: u64,
    pub fp: u64,
    pub sensitivity: BinomialCI,
    pub specificity: BinomialCI,
}

pub fn sens_spec_at(cases: &[ScoredCase], threshold: f64, level: f64) -> Result<SensSpec> {
    class_counts(cases)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for c in cases {
        match (c.label, c.score >= threshold) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    Ok(SensSpec {
        threshold,
        tp,
        fn_,
        tn,
        fp,
        sensitivity: clopper_pearson(tp, tp + fn_, level)?,
        specificity: clopper_pearson(tn, tn + fp, level)?,
    })
}

/// One grader's referral call on one case.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraderCall {
    pub refer: Option<bool>,
    pub gradable: bool,
}

impl GraderCall {
    pub fn graded(refer: bool) -> Self {
        GraderCall {
            refer: Some(refer),
            gradable: true,
        }
    }

    pub fn ungradable() -> Self {
        GraderCall {
            refer: None,
            gradable: false,
        }
    }
}

/// A grader's calls aligned with the case list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderCalls {
    pub grader_id: String,
    pub role: GraderRole,
    pub calls: Vec<GraderCall>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ComparisonMode {
    /// Ungradable calls count as "refer"; every grader is scored on all cases.
    #[default]
    UngradableAsRefer,
    /// Each grader is scored only on the cases they found gradable, and the
    /// algorithm is re-evaluated on the same subset.
    ExcludeUngradablePerGrader,
}

impl ComparisonMode {
    pub fn label(self) -> &'static str {
        match self {
            ComparisonMode::UngradableAsRefer => "ungradable-as-refer",
            ComparisonMode::ExcludeUngradablePerGrader => "exclude-ungradable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum McNemarPairing {
    /// Sensitivity compared on reference-positive cases, specificity on
    /// reference-negative cases.
    #[default]
    ByClass,
    /// Overall correctness paired on every case; both p-values coincide.
    FullSetAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub level: f64,
    pub pairing: McNemarPairing,
    pub variant: McNemarVariant,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            level: 0.95,
            pairing: McNemarPairing::default(),
            variant: McNemarVariant::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderComparison {
    pub grader_id: String,
    pub role: GraderRole,
    pub mode: ComparisonMode,
    pub n: u64,
    pub sens: BinomialCI,
    pub spec: BinomialCI,
    pub algo_sens: BinomialCI,
    pub algo_spec: BinomialCI,
    pub p_sens: f64,
    pub p_spec: f64,
    pub sens_outcome: PairedOutcome,
    pub spec_outcome: PairedOutcome,
}

pub fn compare_graders(
    cases: &[ScoredCase],
    graders: &[GraderCalls],
    threshold: f64,
    mode: ComparisonMode,
    opts: CompareOptions,
) -> Result<Vec<GraderComparison>> {
    graders
        .iter()
        .map(|g| compare_one(cases, g, threshold, mode, opts))
        .collect()
}

fn compare_one(
    cases: &[ScoredCase],
    grader: &GraderCalls,
    threshold: f64,
    mode: ComparisonMode,
    opts: CompareOptions,
) -> Result<GraderComparison> {
    if grader.calls.len() != cases.len() {
        return Err(Error::Alignment(format!(
            "grader {} has {} calls for {} cases",
            grader.grader_id,
            grader.calls.len(),
            cases.len()
        )));
    }
    // (label, algorithm call, grader call)
    let mut rows = Vec::with_capacity(cases.len());
    for (case, call) in cases.iter().zip(&grader.calls) {
        let grader_refer = match (call.gradable, call.refer, mode) {
            (true, Some(r), _) => r,
            (true, None, _) => {
                return Err(Error::Alignment(format!(
                    "grader {} marked {} gradable without a referral call",
                    grader.grader_id, case.image_id
                )))
            }
            (false, _, ComparisonMode::UngradableAsRefer) => true,
            (false, _, ComparisonMode::ExcludeUngradablePerGrader) => continue,
        };
        rows.push((case.label, case.score >= threshold, grader_refer));
    }

    let tally = |label: bool| {
        let (mut algo_ok, mut grader_ok, mut total) = (0u64, 0u64, 0u64);
        let mut algo_v = Vec::new();
        let mut grader_v = Vec::new();
        for &(l, a, g) in rows.iter().filter(|r| r.0 == label) {
            total += 1;
            algo_ok += u64::from(a == l);
            grader_ok += u64::from(g == l);
            algo_v.push(a == l);
            grader_v.push(g == l);
        }
        (algo_ok, grader_ok, total, PairedOutcome::from_correctness(&algo_v, &grader_v))
    };
    let (algo_tp, grader_tp, n_pos, sens_outcome) = tally(true);
    let (algo_tn, grader_tn, n_neg, spec_outcome) = tally(false);
    if n_pos == 0 {
        return Err(Error::OneClassOnly("negatives"));
    }
    if n_neg == 0 {
        return Err(Error::OneClassOnly("positives"));
    }

    let (p_sens, p_spec) = match opts.pairing {
        McNemarPairing::ByClass => (
            mcnemar(sens_outcome, opts.variant),
            mcnemar(spec_outcome, opts.variant),
        ),
        McNemarPairing::FullSetAccuracy => {
            let all = PairedOutcome {
                b: sens_outcome.b + spec_outcome.b,
                c: sens_outcome.c + spec_outcome.c,
                n_concordant: sens_outcome.n_concordant + spec_outcome.n_concordant,
            };
            let p = mcnemar(all, opts.variant);
            (p, p)
        }
    };
    Ok(GraderComparison {
        grader_id: grader.grader_id.clone(),
        role: grader.role,
        mode,
        n: rows.len() as u64,
        sens: clopper_pearson(grader_tp, n_pos, opts.level)?,
        spec: clopper_pearson(grader_tn, n_neg, opts.level)?,
        algo_sens: clopper_pearson(algo_tp, n_pos, opts.level)?,
        algo_spec: clopper_pearson(algo_tn, n_neg, opts.level)?,
        p_sens,
        p_spec,
        sens_outcome,
        spec_outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferralRateRow {
    pub feature: FeatureId,
    pub level: u8,
    pub label: String,
    pub n: u64,
    pub n_refer: u64,
    /// `None` when no image carries this level.
    pub rate: Option<BinomialCI>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureReferralTable {
    pub rows: Vec<ReferralRateRow>,
    pub cdr_refer: Vec<f64>,
    pub cdr_nonrefer: Vec<f64>,
    /// Comparison of vertical CDR between referable and non-referable images.
    pub cdr_ks: Option<KsResult>,
}

/// Referral rate at every level of every feature over images with a
/// gradable referral label.
pub fn feature_referral_rates(refs: &[ReferenceStandard], level: f64) -> Result<FeatureReferralTable> {
    let gradable: Vec<&ReferenceStandard> = refs.iter().filter(|r| r.labels.refer.is_some()).collect();
    if gradable.is_empty() {
        return Err(Error::EmptySample("reference standards with a referral label"));
    }
    let mut rows = Vec::new();
    for feature in FeatureId::ALL {
        for lvl in 1..=feature.levels() {
            let at_level: Vec<bool> = gradable
                .iter()
                .filter(|r| r.feature_level(feature) == Some(lvl))
                .map(|r| r.labels.refer == Some(true))
                .collect();
            let n = at_level.len() as u64;
            let n_refer = at_level.iter().filter(|&&b| b).count() as u64;
            rows.push(ReferralRateRow {
                feature,
                level: lvl,
                label: feature.labels()[lvl as usize - 1].to_string(),
                n,
                n_refer,
                rate: if n > 0 {
                    Some(clopper_pearson(n_refer, n, level)?)
                } else {
                    None
                },
            });
        }
    }
    let cdr = |refer: bool| -> Vec<f64> {
        gradable
            .iter()
            .filter(|r| r.labels.refer == Some(refer))
            .filter_map(|r| r.feature_level(FeatureId::VerticalCdr))
            .map(|t| f64::from(t) / 10.0)
            .collect()
    };
    let (cdr_refer, cdr_nonrefer) = (cdr(true), cdr(false));
    let cdr_ks = if cdr_refer.is_empty() || cdr_nonrefer.is_empty() {
        None
    } else {
        Some(ks_two_sample(&cdr_refer, &cdr_nonrefer, KsMethod::Asymptotic)?)
    };
    Ok(FeatureReferralTable {
        rows,
        cdr_refer,
        cdr_nonrefer,
        cdr_ks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjudication::Resolution;
    use crate::grade::{Assessment, Item};
    use crate::stats::CiMethod;
    use proptest::prelude::*;

    fn cases(pos: &[f64], neg: &[f64]) -> Vec<ScoredCase> {
        pos.iter()
            .map(|&s| (s, true))
            .chain(neg.iter().map(|&s| (s, false)))
            .enumerate()
            .map(|(i, (s, l))| ScoredCase::new(format!("c{i:03}"), s, l).unwrap())
            .collect()
    }

    fn pair_auc(cases: &[ScoredCase]) -> f64 {
        let (mut num, mut p, mut n) = (0u64, 0u64, 0u64);
        for a in cases.iter().filter(|c| c.label) {
            p += 1;
            for b in cases.iter().filter(|c| !c.label) {
                num += if a.score > b.score {
                    2
                } else if a.score == b.score {
                    1
                } else {
                    0
                };
            }
        }
        n += cases.iter().filter(|c| !c.label).count() as u64;
        num as f64 / (2 * p * n) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc(&cases(&[0.9, 0.8], &[0.2, 0.1])).unwrap().auc, 1.0);
        assert_eq!(roc(&cases(&[0.5, 0.5], &[0.5, 0.5])).unwrap().auc, 0.5);
        assert_eq!(roc(&cases(&[0.8, 0.4], &[0.6, 0.2])).unwrap().auc, 0.75);
    }

    #[test]
    fn one_class_rejected() {
        assert!(matches!(roc(&cases(&[0.3], &[])), Err(Error::OneClassOnly(_))));
        assert!(matches!(
            auc_with_ci(&cases(&[], &[0.3]), &BootstrapConfig::default()),
            Err(Error::OneClassOnly(_))
        ));
    }

    #[test]
    fn curve_shape() {
        let c = cases(&[0.9, 0.6, 0.6, 0.3], &[0.7, 0.6, 0.2]);
        let curve = roc(&c).unwrap();
        let first = curve.points.first().unwrap();
        let last = curve.points.last().unwrap();
        assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold);
            assert!(w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr);
        }
    }

    #[test]
    fn sens_spec_extremes() {
        let c = cases(&[0.9, 0.6, 0.3], &[0.7, 0.2]);
        let s = sens_spec_at(&c, 0.0, 0.95).unwrap();
        assert_eq!(s.sensitivity.estimate(), 1.0);
        let s = sens_spec_at(&c, 0.95, 0.95).unwrap();
        assert_eq!(s.sensitivity.estimate(), 0.0);
        assert_eq!(s.specificity.estimate(), 1.0);
    }

    #[test]
    fn sens_spec_tally() {
        let c = cases(
            &[0.95, 0.81, 0.64, 0.5, 0.33],
            &[0.72, 0.5, 0.41, 0.12, 0.03],
        );
        let s = sens_spec_at(&c, 0.5, 0.95).unwrap();
        // positives >= 0.5: 0.95, 0.81, 0.64, 0.5; negatives >= 0.5: 0.72, 0.5
        assert_eq!((s.tp, s.fn_, s.tn, s.fp), (4, 1, 3, 2));
        assert_eq!(s.sensitivity.estimate(), 0.8);
        assert_eq!(s.specificity.estimate(), 0.6);
    }

    #[test]
    fn balanced_point_zero_gap() {
        let c = cases(&[0.9, 0.8, 0.4], &[0.6, 0.3, 0.1]);
        let ops = select_operating_points(&c, 0.9, 0.95).unwrap();
        let bal = ops.get(OperatingPointKind::Balanced).unwrap();
        // at 0.6: tp 2 of 3, tn 2 of 3
        assert_eq!(bal.tuning_sens, bal.tuning_spec);
        assert_eq!(bal.threshold, 0.6);
    }

    #[test]
    fn full_sensitivity_target_takes_lowest_positive_cut() {
        let c = cases(&[0.9, 0.5, 0.2], &[0.6, 0.3, 0.1]);
        let ops = select_operating_points(&c, 1.0, 0.95).unwrap();
        let hs = ops.get(OperatingPointKind::HighSensitivity).unwrap();
        assert_eq!(hs.threshold, 0.2);
        assert_eq!(hs.tuning_sens, 1.0);
        // the top score is a negative, so no observed cut reaches spec 1.0
        let c = cases(&[0.9, 0.5, 0.2], &[0.95, 0.3, 0.1]);
        let ops = select_operating_points(&c, 0.9, 1.0).unwrap();
        assert!(ops.get(OperatingPointKind::HighSpecificity).is_none());
        assert_eq!(ops.failures.len(), 1);
        assert_eq!(ops.failures[0].kind, OperatingPointKind::HighSpecificity);
    }

    #[test]
    fn auc_ci_perfect_separation() {
        let c = cases(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]);
        let r = auc_with_ci(&c, &BootstrapConfig::default()).unwrap();
        assert_eq!((r.point, r.lower, r.upper), (1.0, 1.0, 1.0));
    }

    #[test]
    fn auc_ci_deterministic_and_counts_redraws() {
        let c = cases(&[0.9, 0.4], &[0.6, 0.2, 0.5]);
        let cfg = BootstrapConfig {
            seed: 5,
            method: CiMethod::Percentile,
            ..Default::default()
        };
        let a = auc_with_ci(&c, &cfg).unwrap();
        let b = auc_with_ci(&c, &cfg).unwrap();
        assert_eq!(a, b);
        // five cases with two positives: single-class resamples are common
        assert!(a.n_redrawn > 0);
        assert!(a.lower <= a.point && a.point <= a.upper);
    }

    fn calls(v: &[Option<bool>]) -> Vec<GraderCall> {
        v.iter()
            .map(|r| match r {
                Some(b) => GraderCall::graded(*b),
                None => GraderCall::ungradable(),
            })
            .collect()
    }

    #[test]
    fn grader_identical_to_algorithm() {
        let c = cases(&[0.9, 0.7, 0.2], &[0.8, 0.3, 0.1]);
        let algo: Vec<Option<bool>> = c.iter().map(|c| Some(c.score >= 0.5)).collect();
        let g = GraderCalls {
            grader_id: "g".into(),
            role: GraderRole::Optometrist,
            calls: calls(&algo),
        };
        let r = compare_graders(&c, &[g], 0.5, ComparisonMode::UngradableAsRefer, CompareOptions::default()).unwrap();
        assert_eq!((r[0].p_sens, r[0].p_spec), (1.0, 1.0));
    }

    #[test]
    fn all_ungradable_forces_refer() {
        let c = cases(&[0.9, 0.7], &[0.8, 0.3]);
        let g = GraderCalls {
            grader_id: "g".into(),
            role: GraderRole::Unknown,
            calls: calls(&[None, None, None, None]),
        };
        let r = compare_graders(&c, std::slice::from_ref(&g), 0.5, ComparisonMode::UngradableAsRefer, CompareOptions::default())
            .unwrap();
        assert_eq!(r[0].sens.estimate(), 1.0);
        assert_eq!(r[0].spec.estimate(), 0.0);
        assert_eq!(r[0].n, 4);
        let err = compare_graders(&c, &[g], 0.5, ComparisonMode::ExcludeUngradablePerGrader, CompareOptions::default());
        assert!(err.is_err());
    }

    #[test]
    fn exclude_mode_subsets_algorithm_too() {
        let c = cases(&[0.9, 0.7, 0.2], &[0.8, 0.3, 0.1]);
        let g = GraderCalls {
            grader_id: "g".into(),
            role: GraderRole::Unknown,
            calls: calls(&[Some(true), None, Some(true), Some(false), Some(false), None]),
        };
        let r = compare_graders(&c, &[g], 0.5, ComparisonMode::ExcludeUngradablePerGrader, CompareOptions::default())
            .unwrap();
        assert_eq!(r[0].n, 4);
        // algorithm on the kept positives 0.9, 0.2 -> 1 of 2
        assert_eq!(r[0].algo_sens.k, 1);
        assert_eq!(r[0].algo_sens.n, 2);
        assert_eq!(r[0].sens.k, 2);
    }

    #[test]
    fn planted_flips_feed_mcnemar() {
        // 20 positives, 20 negatives; algorithm perfect at 0.5
        let pos: Vec<f64> = (0..20).map(|i| 0.6 + i as f64 * 0.01).collect();
        let neg: Vec<f64> = (0..20).map(|i| 0.1 + i as f64 * 0.01).collect();
        let c = cases(&pos, &neg);
        let mut v: Vec<Option<bool>> = c.iter().map(|c| Some(c.label)).collect();
        for i in [0, 3, 7] {
            v[i] = Some(false); // missed positives
        }
        for i in [25, 30] {
            v[i] = Some(true); // false alarms
        }
        let g = GraderCalls {
            grader_id: "g".into(),
            role: GraderRole::Unknown,
            calls: calls(&v),
        };
        let r = compare_graders(&c, &[g], 0.5, ComparisonMode::UngradableAsRefer, CompareOptions::default())
            .unwrap();
        assert_eq!((r[0].sens_outcome.b, r[0].sens_outcome.c), (3, 0));
        assert_eq!((r[0].spec_outcome.b, r[0].spec_outcome.c), (2, 0));
        assert_eq!(r[0].p_sens, 0.25);
        assert_eq!(r[0].p_spec, 0.5);
    }

    #[test]
    fn misaligned_grader() {
        let c = cases(&[0.9], &[0.1]);
        let g = GraderCalls {
            grader_id: "g".into(),
            role: GraderRole::Unknown,
            calls: calls(&[Some(true)]),
        };
        assert!(matches!(
            compare_graders(&c, &[g], 0.5, ComparisonMode::UngradableAsRefer, CompareOptions::default()),
            Err(Error::Alignment(_))
        ));
    }

    fn reference(id: &str, gon: u8, notch: Option<u8>, cdr: Option<u8>) -> ReferenceStandard {
        let mut raw = [None; Item::COUNT];
        raw[Item::Gon.index()] = Some(Assessment::Graded(gon));
        raw[Item::Feature(FeatureId::Notch).index()] = notch.map(Assessment::Graded);
        raw[Item::Feature(FeatureId::VerticalCdr).index()] = cdr.map(Assessment::Graded);
        ReferenceStandard::from_raw(id, raw, Resolution::ConsensusRound1, 3)
    }

    #[test]
    fn referral_rates_by_level() {
        let refs = vec![
            reference("a", 4, Some(3), Some(8)),
            reference("b", 3, Some(3), Some(7)),
            reference("c", 1, Some(1), Some(3)),
            reference("d", 2, Some(1), Some(4)),
            reference("e", 3, Some(1), Some(7)),
        ];
        let t = feature_referral_rates(&refs, 0.95).unwrap();
        let row = |lvl| {
            t.rows
                .iter()
                .find(|r| r.feature == FeatureId::Notch && r.level == lvl)
                .unwrap()
                .clone()
        };
        assert_eq!(row(3).n, 2);
        assert_eq!(row(3).rate.unwrap().estimate(), 1.0);
        assert_eq!(row(3).rate.unwrap().upper, 1.0);
        assert_eq!(row(2).n, 0);
        assert!(row(2).rate.is_none());
        assert_eq!(row(1).n_refer, 1);
        assert_eq!(t.cdr_refer.len(), 3);
        assert_eq!(t.cdr_ks.unwrap().d, 1.0);
        assert!(feature_referral_rates(&[], 0.95).is_err());
    }

    proptest! {
        #[test]
        fn trapezoid_equals_pair_count(
            raw in proptest::collection::vec((0u8..20, any::<bool>()), 2..120)
        ) {
            let c: Vec<ScoredCase> = raw
                .iter()
                .enumerate()
                .map(|(i, &(s, l))| ScoredCase::new(format!("{i}"), f64::from(s) / 19.0, l).unwrap())
                .collect();
            if let Ok(curve) = roc(&c) {
                prop_assert_eq!(curve.auc, pair_auc(&c));
                // strictly increasing transform
                let t: Vec<ScoredCase> = c.iter().map(|x| ScoredCase { score: x.score.powi(3), ..x.clone() }).collect();
                prop_assert_eq!(roc(&t).unwrap().auc, curve.auc);
                // duplication
                let d: Vec<ScoredCase> = c.iter().chain(c.iter()).cloned().collect();
                prop_assert_eq!(roc(&d).unwrap().auc, curve.auc);
            }
        }
    }
}
