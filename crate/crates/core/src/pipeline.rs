//! Subcommand orchestration: reads inputs, runs the analyses and writes every
//! report atomically into the output directory.
//!
//! Reports are deterministic: JSON keeps struct field order with full
//! precision floats, text tables use six significant digits, and nothing
//! depends on wall-clock time or thread scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::adjudication::{adjudicate, method_agreement, summarize, AdjudicationSummary, MedianPolicy, MethodAgreementMatrix, ResolveMode};
use crate::agreement::{agreement_table, AgreementRow, DistanceMetric, GradeSource};
use crate::error::{Error, Result};
use crate::fundus::{self, AugmentParams, FundusMask};
use crate::grade::{Assessment, BinaryLabelSet, FeatureId, GradeRecord, GraderRole, Item, Round};
use crate::io;
use crate::logistic::{fit_logistic, rank_features, DesignMatrix, FitOptions, RegressionPreset, RegressionReport};
use crate::report::{self, opt_sig6, sig6, MarkerKind, PlotMarker};
use crate::roc::{
    auc_with_ci, compare_graders, feature_referral_rates, roc, select_operating_points, sens_spec_at, CompareOptions,
    ComparisonMode, FeatureReferralTable, GraderCall, GraderCalls, GraderComparison, McNemarPairing,
    OperatingPointKind, OperatingPoints, ScoredCase, SensSpec,
};
use crate::scores::{ensemble_by_image, referable_score_with, score_patients, EyePolicy, ModelOutput, ScoreMode};
use crate::stats::{BootstrapConfig, BootstrapResult, CiMethod, McNemarVariant};
use crate::synth::{self, CohortSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateArgs {
    pub spec: CohortSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjudicateArgs {
    pub grades: PathBuf,
    pub mode: ResolveMode,
    pub policy: MedianPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementArgs {
    pub grades: PathBuf,
    pub metric: DistanceMetric,
    pub round2: GradeSource,
}

/// Where tuning-set labels come from when calibrating operating points.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TuningInputs {
    pub scores: Option<PathBuf>,
    /// Table with `image_id,refer` (reference or truth layout accepted).
    pub labels: Option<PathBuf>,
    /// Grade log resolved by the median of its round-1 grades.
    pub grades: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsArgs {
    pub scores: PathBuf,
    pub labels: PathBuf,
    pub tuning: TuningInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareArgs {
    pub scores: PathBuf,
    pub labels: PathBuf,
    pub readers: PathBuf,
    /// Fixed threshold; otherwise calibrated on the tuning inputs.
    pub threshold: Option<f64>,
    pub operating_point: OperatingPointKind,
    pub tuning: TuningInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureArgs {
    pub references: Option<PathBuf>,
    /// Panel log for the round-1 median preset.
    pub grades: Option<PathBuf>,
    /// Model outputs for the algorithm preset.
    pub scores: Option<PathBuf>,
    pub training_grades: Option<PathBuf>,
    pub tuning_grades: Option<PathBuf>,
    /// Referable-score cut for the algorithm preset's outcome.
    pub algo_threshold: f64,
    /// Cut applied to every feature head in the algorithm preset.
    pub head_threshold: f64,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoresArgs {
    pub scores: PathBuf,
    pub patients: Option<PathBuf>,
    pub eye_policy: EyePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessArgs {
    pub input: PathBuf,
    pub reject_log: Option<PathBuf>,
    /// Apply one random augmentation per image, seeded by the run seed and
    /// the image's position in name order.
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Command {
    Simulate(SimulateArgs),
    Adjudicate(AdjudicateArgs),
    Agreement(AgreementArgs),
    Metrics(MetricsArgs),
    CompareGraders(CompareArgs),
    FeatureImportance(FeatureArgs),
    Scores(ScoresArgs),
    Preprocess(PreprocessArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Adjudicate(_) => "adjudicate",
            Command::Agreement(_) => "agreement",
            Command::Metrics(_) => "metrics",
            Command::CompareGraders(_) => "compare-graders",
            Command::FeatureImportance(_) => "feature-importance",
            Command::Scores(_) => "scores",
            Command::Preprocess(_) => "preprocess",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub bootstrap_n: usize,
    pub ci_level: f64,
    pub ci_method: CiMethod,
    pub sens_target: f64,
    pub spec_target: f64,
    pub mode: ComparisonMode,
    pub pairing: McNemarPairing,
    pub mcnemar_variant: McNemarVariant,
    pub score_mode: ScoreMode,
    pub format_version: u32,
}

impl RunConfig {
    pub fn new(command: Command, out_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            command,
            out_dir: out_dir.into(),
            seed: 0,
            bootstrap_n: 2000,
            ci_level: 0.95,
            ci_method: CiMethod::default(),
            sens_target: 0.90,
            spec_target: 0.95,
            mode: ComparisonMode::default(),
            pairing: McNemarPairing::default(),
            mcnemar_variant: McNemarVariant::default(),
            score_mode: ScoreMode::default(),
            format_version: FORMAT_VERSION,
        }
    }

    fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            n_resamples: self.bootstrap_n,
            level: self.ci_level,
            seed: self.seed,
            method: self.ci_method,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.bootstrap_n == 0 {
            return Err(Error::InvalidCount("bootstrap_n must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidCount(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        for (name, v) in [("sens_target", self.sens_target), ("spec_target", self.spec_target)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidCount(format!("{name} {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Fixed choices in effect for a run, recorded in every JSON report.
#[derive(Debug, Clone, Serialize)]
struct Decisions {
    decision_rule: &'static str,
    referable_score: &'static str,
    ci_method: &'static str,
    bootstrap_unit: &'static str,
    single_class_resamples: &'static str,
    binomial_interval: &'static str,
    mcnemar_test: &'static str,
    mcnemar_pairing: &'static str,
    grader_ungradable: &'static str,
    balanced_tie_break: &'static str,
    median_ungradable: &'static str,
    agreement_distance: &'static str,
}

fn decisions(cfg: &RunConfig) -> Decisions {
    Decisions {
        decision_rule: "refer when score >= threshold",
        referable_score: cfg.score_mode.label(),
        ci_method: cfg.ci_method.label(),
        bootstrap_unit: "image",
        single_class_resamples: "redrawn and counted",
        binomial_interval: "clopper-pearson",
        mcnemar_test: match cfg.mcnemar_variant {
            McNemarVariant::Exact => "exact binomial",
            McNemarVariant::ChiSquareCorrected => "chi-square with continuity correction",
        },
        mcnemar_pairing: match cfg.pairing {
            McNemarPairing::ByClass => "sensitivity on reference positives, specificity on reference negatives",
            McNemarPairing::FullSetAccuracy => "overall correctness on every case",
        },
        grader_ungradable: cfg.mode.label(),
        balanced_tie_break: "higher sensitivity",
        median_ungradable: "ranks below every grade",
        agreement_distance: "ordinal level difference",
    }
}

#[derive(Debug, Clone, Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: String,
    config: &'a RunConfig,
    decisions: Decisions,
}

fn provenance(cfg: &RunConfig) -> Provenance<'_> {
    Provenance {
        tool: "discgrade",
        version: format!("v{}", env!("CARGO_PKG_VERSION")),
        config: cfg,
        decisions: decisions(cfg),
    }
}

#[derive(Debug, Serialize)]
struct Report<'a, T: Serialize> {
    provenance: Provenance<'a>,
    #[serde(flatten)]
    body: T,
}

/// Files written by a run, in write order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        io::write_atomic(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, cfg: &RunConfig, body: T) -> Result<()> {
        let bytes = report::to_json(&Report {
            provenance: provenance(cfg),
            body,
        })?;
        self.write(name, &bytes)
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    let name = cfg.command.name();
    run_inner(cfg).map_err(|e| e.context(name))
}

fn run_inner(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let mut out = Outputs {
        dir: &cfg.out_dir,
        files: Vec::new(),
    };
    match &cfg.command {
        Command::Simulate(a) => simulate(cfg, a, &mut out)?,
        Command::Adjudicate(a) => run_adjudicate(cfg, a, &mut out)?,
        Command::Agreement(a) => run_agreement(cfg, a, &mut out)?,
        Command::Metrics(a) => metrics(cfg, a, &mut out)?,
        Command::CompareGraders(a) => run_compare(cfg, a, &mut out)?,
        Command::FeatureImportance(a) => feature_importance(cfg, a, &mut out)?,
        Command::Scores(a) => run_scores(cfg, a, &mut out)?,
        Command::Preprocess(a) => preprocess(cfg, a, &mut out)?,
    }
    Ok(RunSummary { files: out.files })
}

// ---------------------------------------------------------------- simulate

#[derive(Serialize)]
struct CohortReport<'a> {
    spec: &'a CohortSpec,
    analytic_auc: f64,
    n_images: usize,
    n_refer: usize,
    n_tuning: usize,
    n_panel_records: usize,
    n_reader_records: usize,
    n_patients: usize,
}

fn simulate(cfg: &RunConfig, a: &SimulateArgs, out: &mut Outputs) -> Result<()> {
    let spec = CohortSpec {
        seed: cfg.seed,
        ..a.spec.clone()
    };
    let c = synth::generate(&spec)?;
    out.write("panel_grades.csv", &io::grades_to_csv(&c.panel_log)?)?;
    out.write("reader_grades.csv", &io::grades_to_csv(&c.reader_log)?)?;
    out.write("scores.csv", &io::outputs_to_csv(&c.outputs)?)?;
    out.write("truth.csv", &io::truth_to_csv(&c.truth)?)?;
    out.write("tuning_grades.csv", &io::grades_to_csv(&c.tuning_log)?)?;
    out.write("tuning_scores.csv", &io::outputs_to_csv(&c.tuning_outputs)?)?;
    out.write("tuning_truth.csv", &io::truth_to_csv(&c.tuning_truth)?)?;
    out.write("patients.csv", &io::patients_to_csv(&c.patients)?)?;
    out.json(
        "cohort.json",
        cfg,
        CohortReport {
            spec: &spec,
            analytic_auc: c.analytic_auc,
            n_images: c.truth.len(),
            n_refer: c.truth.iter().filter(|t| t.refer).count(),
            n_tuning: c.tuning_truth.len(),
            n_panel_records: c.panel_log.len(),
            n_reader_records: c.reader_log.len(),
            n_patients: c.patients.len(),
        },
    )
}

// -------------------------------------------------------------- adjudicate

#[derive(Serialize)]
struct AdjudicationReport {
    summary: AdjudicationSummary,
    /// Round-1 median against the full protocol, when round 2 exists.
    round1_median_vs_final: Option<MethodAgreementMatrix>,
}

fn run_adjudicate(cfg: &RunConfig, a: &AdjudicateArgs, out: &mut Outputs) -> Result<()> {
    let log = io::read_grades(&a.grades)?;
    let refs = adjudicate(&log, a.mode, a.policy)?;
    out.write("reference.csv", &io::references_to_csv(&refs)?)?;
    let summary = summarize(&refs);

    let comparison = if a.mode == ResolveMode::TwoRound && log.iter().any(|r| r.round == Round::Two) {
        let single = adjudicate(&log, ResolveMode::SingleRound, a.policy)?;
        let (x, y): (Vec<_>, Vec<_>) = single
            .iter()
            .zip(&refs)
            .filter_map(|(s, f)| Some((s.gon()?, f.gon()?)))
            .unzip();
        Some(method_agreement(&x, &y)?)
    } else {
        None
    };

    let rows = vec![
        vec!["images".to_string(), summary.n_images.to_string()],
        vec!["excluded (ungradable)".to_string(), summary.n_excluded.to_string()],
        vec!["consensus, round 1".to_string(), summary.consensus_round1.to_string()],
        vec!["consensus, round 2".to_string(), summary.consensus_round2.to_string()],
        vec!["median, round 2".to_string(), summary.median_round2.to_string()],
        vec!["median, round 1".to_string(), summary.median_round1.to_string()],
        vec!["consensus fraction".to_string(), sig6(summary.consensus_fraction)],
    ];
    out.write("adjudication.txt", report::text_table(&["resolution", "count"], &rows).as_bytes())?;
    out.json(
        "adjudication.json",
        cfg,
        AdjudicationReport {
            summary,
            round1_median_vs_final: comparison,
        },
    )
}

// --------------------------------------------------------------- agreement

#[derive(Serialize)]
struct AgreementReport {
    rows: Vec<AgreementRow>,
}

fn run_agreement(cfg: &RunConfig, a: &AgreementArgs, out: &mut Outputs) -> Result<()> {
    let log = io::read_grades(&a.grades)?;
    let rows = agreement_table(&log, a.metric, a.round2);
    let header = ["question", "alpha_round1", "alpha_round2", "items_round1", "items_round2"];
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.question.clone(),
                r.alpha_round1.map(|v| v.to_string()).unwrap_or_default(),
                r.alpha_round2.map(|v| v.to_string()).unwrap_or_default(),
                r.items_round1.to_string(),
                r.items_round2.to_string(),
            ]
        })
        .collect();
    let text_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.question.clone(),
                opt_sig6(r.alpha_round1),
                opt_sig6(r.alpha_round2),
                r.items_round1.to_string(),
                r.items_round2.to_string(),
            ]
        })
        .collect();
    out.write("agreement.csv", &report::csv_table(&header, &csv_rows)?)?;
    out.write("agreement.txt", report::text_table(&header, &text_rows).as_bytes())?;
    out.json("agreement.json", cfg, AgreementReport { rows })
}

// ------------------------------------------------------------ shared input

fn load_outputs(path: &Path) -> Result<Vec<ModelOutput>> {
    ensemble_by_image(&io::read_outputs(path)?)
}

fn score_map(outputs: &[ModelOutput], mode: ScoreMode) -> BTreeMap<String, f64> {
    outputs
        .iter()
        .map(|o| (o.image_id.clone(), referable_score_with(o, mode)))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
struct CaseCounts {
    n_cases: usize,
    n_pos: usize,
    n_neg: usize,
    /// Labelled images whose reference referral answer is ungradable.
    n_ungradable_reference: usize,
    /// Scored images without a label row.
    n_unlabelled_scores: usize,
}

/// Cases in label-file order; every gradable labelled image needs a score.
fn build_cases(labels: &[(String, Option<bool>)], scores: &BTreeMap<String, f64>) -> Result<(Vec<ScoredCase>, CaseCounts)> {
    let mut cases = Vec::new();
    let mut ungradable = 0;
    for (id, refer) in labels {
        let Some(label) = refer else {
            ungradable += 1;
            continue;
        };
        let score = scores
            .get(id)
            .ok_or_else(|| Error::Alignment(format!("labelled image {id} has no score")))?;
        cases.push(ScoredCase::new(id.clone(), *score, *label)?);
    }
    let labelled: std::collections::HashSet<&str> = labels.iter().map(|l| l.0.as_str()).collect();
    let counts = CaseCounts {
        n_cases: cases.len(),
        n_pos: cases.iter().filter(|c| c.label).count(),
        n_neg: cases.iter().filter(|c| !c.label).count(),
        n_ungradable_reference: ungradable,
        n_unlabelled_scores: scores.keys().filter(|k| !labelled.contains(k.as_str())).count(),
    };
    Ok((cases, counts))
}

fn refer_labels(labels: &[(String, BinaryLabelSet)]) -> Vec<(String, Option<bool>)> {
    labels.iter().map(|(id, l)| (id.clone(), l.refer)).collect()
}

fn round1_median_labels(log: &[GradeRecord]) -> Result<Vec<(String, BinaryLabelSet)>> {
    Ok(adjudicate(log, ResolveMode::SingleRound, MedianPolicy::default())?
        .into_iter()
        .map(|r| (r.image_id, r.labels))
        .collect())
}

fn tuning_cases(cfg: &RunConfig, t: &TuningInputs) -> Result<Option<Vec<ScoredCase>>> {
    let Some(scores) = &t.scores else {
        return Ok(None);
    };
    let labels = match (&t.labels, &t.grades) {
        (Some(p), _) => refer_labels(&io::read_binary_labels(p)?),
        (None, Some(g)) => refer_labels(&round1_median_labels(&io::read_grades(g)?)?),
        (None, None) => {
            return Err(Error::InvalidCount(
                "tuning scores need tuning labels or tuning grades".into(),
            ))
        }
    };
    let map = score_map(&load_outputs(scores)?, cfg.score_mode);
    let (cases, _) = build_cases(&labels, &map)?;
    Ok(Some(cases))
}

// ----------------------------------------------------------------- metrics

#[derive(Serialize)]
struct PointEvaluation {
    kind: OperatingPointKind,
    threshold: f64,
    tuning_sens: f64,
    tuning_spec: f64,
    validation: SensSpec,
}

#[derive(Serialize)]
struct FeatureAucRow {
    feature: FeatureId,
    n_pos: usize,
    n_neg: usize,
    auc: Option<BootstrapResult>,
    note: Option<String>,
}

#[derive(Serialize)]
struct MetricsReport {
    counts: CaseCounts,
    auc: BootstrapResult,
    operating_points: Option<OperatingPoints>,
    evaluations: Vec<PointEvaluation>,
    feature_auc: Vec<FeatureAucRow>,
}

fn evaluate_points(cfg: &RunConfig, ops: &OperatingPoints, cases: &[ScoredCase]) -> Result<Vec<PointEvaluation>> {
    ops.points
        .iter()
        .map(|p| {
            Ok(PointEvaluation {
                kind: p.kind,
                threshold: p.threshold,
                tuning_sens: p.tuning_sens,
                tuning_spec: p.tuning_spec,
                validation: sens_spec_at(cases, p.threshold, cfg.ci_level)?,
            })
        })
        .collect()
}

fn feature_aucs(cfg: &RunConfig, labels: &[(String, BinaryLabelSet)], outputs: &[ModelOutput]) -> Result<Vec<FeatureAucRow>> {
    let by_id: HashMap<&str, &ModelOutput> = outputs.iter().map(|o| (o.image_id.as_str(), o)).collect();
    let mut rows = Vec::new();
    for f in FeatureId::ALL {
        let cases: Vec<ScoredCase> = labels
            .iter()
            .filter_map(|(id, l)| {
                let label = l.feature(f)?;
                let head = by_id.get(id.as_str())?.feature_probs.get(&f)?;
                Some(ScoredCase::new(id.clone(), head.positive_prob(f), label))
            })
            .collect::<Result<_>>()?;
        if cases.is_empty() {
            continue;
        }
        let n_pos = cases.iter().filter(|c| c.label).count();
        let n_neg = cases.len() - n_pos;
        let (auc, note) = match auc_with_ci(&cases, &cfg.bootstrap()) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        rows.push(FeatureAucRow {
            feature: f,
            n_pos,
            n_neg,
            auc,
            note,
        });
    }
    Ok(rows)
}

fn ci_text(r: &BootstrapResult) -> String {
    format!("{} ({}, {})", sig6(r.point), sig6(r.lower), sig6(r.upper))
}

fn prop_text(ci: &crate::stats::BinomialCI) -> String {
    format!("{} ({}, {})", sig6(ci.estimate()), sig6(ci.lower), sig6(ci.upper))
}

fn op_markers(evals: &[PointEvaluation]) -> Vec<PlotMarker> {
    evals
        .iter()
        .map(|e| PlotMarker {
            label: e.kind.label().to_string(),
            fpr: 1.0 - e.validation.specificity.estimate(),
            tpr: e.validation.sensitivity.estimate(),
            kind: MarkerKind::OperatingPoint,
        })
        .collect()
}

fn metrics(cfg: &RunConfig, a: &MetricsArgs, out: &mut Outputs) -> Result<()> {
    let labels = io::read_binary_labels(&a.labels)?;
    let outputs = load_outputs(&a.scores)?;
    let (cases, counts) = build_cases(&refer_labels(&labels), &score_map(&outputs, cfg.score_mode))?;
    let curve = roc(&cases)?;
    let auc = auc_with_ci(&cases, &cfg.bootstrap())?;
    let ops = match tuning_cases(cfg, &a.tuning)? {
        Some(t) => Some(select_operating_points(&t, cfg.sens_target, cfg.spec_target)?),
        None => None,
    };
    let evaluations = match &ops {
        Some(o) => evaluate_points(cfg, o, &cases)?,
        None => Vec::new(),
    };
    let feature_auc = feature_aucs(cfg, &labels, &outputs)?;

    out.write("roc.csv", &report::roc_csv(&curve)?)?;
    out.write(
        "roc.svg",
        report::roc_svg(&curve, "Referable GON", &op_markers(&evaluations)).as_bytes(),
    )?;

    let mut rows = vec![
        vec!["cases".into(), counts.n_cases.to_string()],
        vec!["referable".into(), counts.n_pos.to_string()],
        vec![format!("AUC ({} {} CI)", auc.method.label(), sig6(cfg.ci_level)), ci_text(&auc)],
    ];
    for e in &evaluations {
        rows.push(vec![
            format!("{} threshold", e.kind.label()),
            sig6(e.threshold),
        ]);
        rows.push(vec![format!("{} sensitivity", e.kind.label()), prop_text(&e.validation.sensitivity)]);
        rows.push(vec![format!("{} specificity", e.kind.label()), prop_text(&e.validation.specificity)]);
    }
    if let Some(o) = &ops {
        for f in &o.failures {
            rows.push(vec![format!("{} threshold", f.kind.label()), f.message.clone()]);
        }
    }
    for f in &feature_auc {
        rows.push(vec![
            format!("AUC {}", f.feature.display_name()),
            f.auc.as_ref().map_or_else(|| f.note.clone().unwrap_or_default(), ci_text),
        ]);
    }
    out.write("metrics.txt", report::text_table(&["metric", "value"], &rows).as_bytes())?;
    out.json(
        "metrics.json",
        cfg,
        MetricsReport {
            counts,
            auc,
            operating_points: ops,
            evaluations,
            feature_auc,
        },
    )
}

// --------------------------------------------------------- compare-graders

/// Each reader's referral call per case from their latest round-1 record.
fn reader_calls(log: &[GradeRecord], cases: &[ScoredCase]) -> Result<Vec<GraderCalls>> {
    let mut latest: BTreeMap<(&str, &str), &GradeRecord> = BTreeMap::new();
    let mut roles: BTreeMap<&str, GraderRole> = BTreeMap::new();
    for r in log.iter().filter(|r| r.round == Round::One) {
        roles.insert(&r.grader_id, r.grader_role);
        latest
            .entry((r.grader_id.as_str(), r.image_id.as_str()))
            .and_modify(|e| {
                if r.seq > e.seq {
                    *e = r;
                }
            })
            .or_insert(r);
    }
    roles
        .iter()
        .map(|(&g, &role)| {
            let calls = cases
                .iter()
                .map(|c| {
                    let rec = latest
                        .get(&(g, c.image_id.as_str()))
                        .ok_or_else(|| Error::Alignment(format!("grader {g} did not grade {}", c.image_id)))?;
                    Ok(match rec.assessment(Item::Gon) {
                        Some(Assessment::Graded(l)) => GraderCall::graded(Item::Gon.is_positive_level(l)),
                        Some(Assessment::Ungradable) => GraderCall::ungradable(),
                        None => {
                            return Err(Error::Alignment(format!(
                                "grader {g} left the referral question blank on {}",
                                c.image_id
                            )))
                        }
                    })
                })
                .collect::<Result<_>>()?;
            Ok(GraderCalls {
                grader_id: g.to_string(),
                role,
                calls,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct CompareReport {
    counts: CaseCounts,
    threshold: f64,
    threshold_source: String,
    algorithm: SensSpec,
    auc: f64,
    evaluations: Vec<PointEvaluation>,
    graders: Vec<GraderComparison>,
}

fn run_compare(cfg: &RunConfig, a: &CompareArgs, out: &mut Outputs) -> Result<()> {
    let labels = refer_labels(&io::read_binary_labels(&a.labels)?);
    let (cases, counts) = build_cases(&labels, &score_map(&load_outputs(&a.scores)?, cfg.score_mode))?;
    let readers = io::read_grades(&a.readers)?;
    let graders = reader_calls(&readers, &cases)?;

    let (threshold, source, evaluations) = match a.threshold {
        Some(t) => (t, "fixed".to_string(), Vec::new()),
        None => {
            let tuning = tuning_cases(cfg, &a.tuning)?
                .ok_or_else(|| Error::InvalidCount("either a threshold or tuning inputs are required".into()))?;
            let ops = select_operating_points(&tuning, cfg.sens_target, cfg.spec_target)?;
            let point = ops.get(a.operating_point).ok_or_else(|| {
                ops.failures
                    .iter()
                    .find(|f| f.kind == a.operating_point)
                    .map(|f| Error::TargetUnachievable {
                        kind: f.kind.label().to_string(),
                        target: if f.kind == OperatingPointKind::HighSensitivity {
                            cfg.sens_target
                        } else {
                            cfg.spec_target
                        },
                    })
                    .unwrap_or_else(|| Error::DegenerateData("operating point unavailable".into()))
            })?;
            (point.threshold, format!("tuning:{}", a.operating_point.label()), evaluate_points(cfg, &ops, &cases)?)
        }
    };
    let opts = CompareOptions {
        level: cfg.ci_level,
        pairing: cfg.pairing,
        variant: cfg.mcnemar_variant,
    };
    let comparisons: Vec<GraderComparison> = graders
        .par_iter()
        .map(|g| compare_graders(&cases, std::slice::from_ref(g), threshold, cfg.mode, opts).map(|mut v| v.remove(0)))
        .collect::<Result<_>>()?;
    let algorithm = sens_spec_at(&cases, threshold, cfg.ci_level)?;
    let curve = roc(&cases)?;

    let header = [
        "grader", "role", "n", "sensitivity", "sens_lower", "sens_upper", "specificity", "spec_lower", "spec_upper",
        "algo_sensitivity", "algo_specificity", "p_sensitivity", "p_specificity",
    ];
    let mut csv_rows = vec![vec![
        "algorithm".to_string(),
        source.clone(),
        counts.n_cases.to_string(),
        algorithm.sensitivity.estimate().to_string(),
        algorithm.sensitivity.lower.to_string(),
        algorithm.sensitivity.upper.to_string(),
        algorithm.specificity.estimate().to_string(),
        algorithm.specificity.lower.to_string(),
        algorithm.specificity.upper.to_string(),
        algorithm.sensitivity.estimate().to_string(),
        algorithm.specificity.estimate().to_string(),
        String::new(),
        String::new(),
    ]];
    let mut text_rows = vec![vec![
        "algorithm".to_string(),
        source.clone(),
        counts.n_cases.to_string(),
        prop_text(&algorithm.sensitivity),
        prop_text(&algorithm.specificity),
        String::new(),
        String::new(),
    ]];
    for c in &comparisons {
        csv_rows.push(vec![
            c.grader_id.clone(),
            c.role.label().to_string(),
            c.n.to_string(),
            c.sens.estimate().to_string(),
            c.sens.lower.to_string(),
            c.sens.upper.to_string(),
            c.spec.estimate().to_string(),
            c.spec.lower.to_string(),
            c.spec.upper.to_string(),
            c.algo_sens.estimate().to_string(),
            c.algo_spec.estimate().to_string(),
            c.p_sens.to_string(),
            c.p_spec.to_string(),
        ]);
        text_rows.push(vec![
            c.grader_id.clone(),
            c.role.label().to_string(),
            c.n.to_string(),
            prop_text(&c.sens),
            prop_text(&c.spec),
            sig6(c.p_sens),
            sig6(c.p_spec),
        ]);
    }
    out.write("grader_comparison.csv", &report::csv_table(&header, &csv_rows)?)?;
    out.write(
        "grader_comparison.txt",
        report::text_table(
            &["grader", "role", "n", "sensitivity (95% CI)", "specificity (95% CI)", "p_sens", "p_spec"],
            &text_rows,
        )
        .as_bytes(),
    )?;
    let mut markers: Vec<PlotMarker> = comparisons
        .iter()
        .map(|c| PlotMarker {
            label: format!("{} ({})", c.grader_id, c.role.label()),
            fpr: 1.0 - c.spec.estimate(),
            tpr: c.sens.estimate(),
            kind: MarkerKind::Grader,
        })
        .collect();
    markers.push(PlotMarker {
        label: source.clone(),
        fpr: 1.0 - algorithm.specificity.estimate(),
        tpr: algorithm.sensitivity.estimate(),
        kind: MarkerKind::OperatingPoint,
    });
    out.write("roc_graders.svg", report::roc_svg(&curve, "Algorithm and graders", &markers).as_bytes())?;
    out.json(
        "grader_comparison.json",
        cfg,
        CompareReport {
            counts,
            threshold,
            threshold_source: source,
            algorithm,
            auc: curve.auc,
            evaluations,
            graders: comparisons,
        },
    )
}

// ------------------------------------------------------ feature-importance

#[derive(Serialize)]
struct PresetResult {
    preset: RegressionPreset,
    n_labelled: usize,
    report: RegressionReport,
}

#[derive(Serialize)]
struct FeatureReport {
    regressions: Vec<PresetResult>,
    referral_rates: Option<FeatureReferralTable>,
}

fn algorithm_labels(outputs: &[ModelOutput], a: &FeatureArgs, mode: ScoreMode) -> Vec<(String, BinaryLabelSet)> {
    outputs
        .iter()
        .map(|o| {
            let labels = BinaryLabelSet {
                refer: Some(referable_score_with(o, mode) >= a.algo_threshold),
                feature_positive: FeatureId::ALL
                    .into_iter()
                    .map(|f| (f, o.feature_call(f, a.head_threshold)))
                    .collect(),
            };
            (o.image_id.clone(), labels)
        })
        .collect()
}

fn feature_importance(cfg: &RunConfig, a: &FeatureArgs, out: &mut Outputs) -> Result<()> {
    let mut sources: Vec<(RegressionPreset, Vec<(String, BinaryLabelSet)>)> = Vec::new();
    let mut references = None;
    if let Some(p) = &a.references {
        let refs = io::read_references(p)?;
        sources.push((
            RegressionPreset::ReferenceStandard,
            refs.iter().map(|r| (r.image_id.clone(), r.labels.clone())).collect(),
        ));
        references = Some(refs);
    }
    if let Some(p) = &a.grades {
        sources.push((RegressionPreset::Round1Median, round1_median_labels(&io::read_grades(p)?)?));
    }
    if let Some(p) = &a.scores {
        sources.push((
            RegressionPreset::AlgorithmPredictions,
            algorithm_labels(&load_outputs(p)?, a, cfg.score_mode),
        ));
    }
    if let Some(p) = &a.training_grades {
        sources.push((RegressionPreset::TrainingMedian, round1_median_labels(&io::read_grades(p)?)?));
    }
    if let Some(p) = &a.tuning_grades {
        sources.push((RegressionPreset::TuningMedian, round1_median_labels(&io::read_grades(p)?)?));
    }
    if sources.is_empty() {
        return Err(Error::InvalidCount("no label source given for the regression".into()));
    }

    let regressions: Vec<PresetResult> = sources
        .par_iter()
        .map(|(preset, labels)| {
            let sets: Vec<BinaryLabelSet> = labels.iter().map(|l| l.1.clone()).collect();
            let d = DesignMatrix::from_labels(&FeatureId::ALL, &sets);
            let report = fit_logistic(&d, &a.fit).map_err(|e| e.context(preset.label()))?;
            Ok(PresetResult {
                preset: *preset,
                n_labelled: labels.len(),
                report,
            })
        })
        .collect::<Result<_>>()?;

    let header = ["preset", "predictor", "beta", "odds_ratio", "se", "p", "rank", "flags"];
    let mut csv_rows = Vec::new();
    let mut text_rows = Vec::new();
    for r in &regressions {
        for c in rank_features(&r.report) {
            let flags = c.flags.iter().map(|f| format!("{f:?}")).collect::<Vec<_>>().join(";");
            csv_rows.push(vec![
                r.preset.label().to_string(),
                c.name.clone(),
                c.beta.to_string(),
                c.odds_ratio.to_string(),
                c.se.to_string(),
                c.p.to_string(),
                c.rank.to_string(),
                flags.clone(),
            ]);
            text_rows.push(vec![
                r.preset.label().to_string(),
                FeatureId::from_column(&c.name).map_or(c.name.clone(), |f| f.display_name().to_string()),
                sig6(c.beta),
                sig6(c.odds_ratio),
                sig6(c.se),
                sig6(c.p),
                c.rank.to_string(),
                flags,
            ]);
        }
    }
    out.write("feature_importance.csv", &report::csv_table(&header, &csv_rows)?)?;
    out.write("feature_importance.txt", report::text_table(&header, &text_rows).as_bytes())?;

    let referral_rates = match &references {
        Some(refs) => Some(feature_referral_rates(refs, cfg.ci_level)?),
        None => None,
    };
    if let Some(t) = &referral_rates {
        let rows: Vec<Vec<String>> = t
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.feature.column().to_string(),
                    r.label.clone(),
                    r.n.to_string(),
                    r.n_refer.to_string(),
                    r.rate.map(|c| c.estimate().to_string()).unwrap_or_default(),
                    r.rate.map(|c| c.lower.to_string()).unwrap_or_default(),
                    r.rate.map(|c| c.upper.to_string()).unwrap_or_default(),
                ]
            })
            .collect();
        out.write(
            "referral_rates.csv",
            &report::csv_table(&["feature", "level", "n", "n_refer", "rate", "lower", "upper"], &rows)?,
        )?;
    }
    out.json(
        "feature_importance.json",
        cfg,
        FeatureReport {
            regressions,
            referral_rates,
        },
    )
}

// ------------------------------------------------------------------ scores

#[derive(Serialize)]
struct ScoresReport {
    n_images: usize,
    n_patients: Option<usize>,
    eye_policy: EyePolicy,
}

fn run_scores(cfg: &RunConfig, a: &ScoresArgs, out: &mut Outputs) -> Result<()> {
    let outputs = load_outputs(&a.scores)?;
    let scores = score_map(&outputs, cfg.score_mode);
    let rows: Vec<Vec<String>> = scores.iter().map(|(id, s)| vec![id.clone(), s.to_string()]).collect();
    out.write("image_scores.csv", &report::csv_table(&["image_id", "score"], &rows)?)?;
    let n_patients = match &a.patients {
        Some(p) => {
            let patients = io::read_patients(p)?;
            let lookup: HashMap<String, f64> = scores.iter().map(|(k, v)| (k.clone(), *v)).collect();
            let per_patient = score_patients(&patients, &lookup, a.eye_policy)?;
            out.write("patient_scores.csv", &io::patient_scores_to_csv(&per_patient)?)?;
            Some(per_patient.len())
        }
        None => None,
    };
    out.json(
        "scores.json",
        cfg,
        ScoresReport {
            n_images: scores.len(),
            n_patients,
            eye_policy: a.eye_policy,
        },
    )
}

// -------------------------------------------------------------- preprocess

#[derive(Serialize)]
struct PreprocessEntry {
    file: String,
    mask: Option<FundusMask>,
    error: Option<String>,
}

#[derive(Serialize)]
struct PreprocessReport {
    n_images: usize,
    n_written: usize,
    n_rejected: usize,
    entries: Vec<PreprocessEntry>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pnm")
    )
}

fn preprocess(cfg: &RunConfig, a: &PreprocessArgs, out: &mut Outputs) -> Result<()> {
    let mut files: Vec<PathBuf> = fs::read_dir(&a.input)
        .map_err(|e| Error::io(&a.input, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&a.input, err)))
        .collect::<Result<_>>()?;
    files.retain(|p| p.is_file() && is_image(p));
    files.sort();
    if a.input.canonicalize().ok() == cfg.out_dir.canonicalize().ok() {
        return Err(Error::InvalidCount("input and output directories must differ".into()));
    }

    let results: Vec<(PathBuf, Result<(FundusMask, fundus::RasterImage)>)> = files
        .par_iter()
        .enumerate()
        .map(|(i, path)| {
            let r = (|| {
                let img = fundus::read_image(path)?;
                let mask = fundus::detect_mask(&img)?;
                let mut norm = fundus::normalize_scale(&img, &mask)?;
                if a.augment {
                    let mut rng = crate::stats::bootstrap::resample_rng(cfg.seed, i);
                    let params = AugmentParams::sample(&mut rng);
                    norm = fundus::augment(&norm, &params, rand::Rng::random(&mut rng))?;
                }
                Ok((mask, norm))
            })();
            (path.clone(), r)
        })
        .collect();

    let mut entries = Vec::new();
    let mut rejects = Vec::new();
    let mut n_written = 0;
    for (path, r) in results {
        let file = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match r {
            Ok((mask, img)) => {
                let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let target = cfg.out_dir.join(format!("{stem}.png"));
                fundus::write_image(&img, &target)?;
                out.files.push(target);
                n_written += 1;
                entries.push(PreprocessEntry {
                    file,
                    mask: Some(mask),
                    error: None,
                });
            }
            // data errors abort; an undetectable mask only excludes the image
            Err(e) if matches!(e.root(), Error::MaskNotFound(_)) => {
                rejects.push(vec![file.clone(), e.to_string()]);
                entries.push(PreprocessEntry {
                    file,
                    mask: None,
                    error: Some(e.to_string()),
                });
            }
            Err(e) => return Err(e),
        }
    }
    let reject_bytes = report::csv_table(&["file", "reason"], &rejects)?;
    match &a.reject_log {
        Some(p) => {
            io::write_atomic(p, &reject_bytes)?;
            out.files.push(p.clone());
        }
        None => out.write("rejects.csv", &reject_bytes)?,
    }
    out.json(
        "preprocess.json",
        cfg,
        PreprocessReport {
            n_images: files.len(),
            n_written,
            n_rejected: rejects.len(),
            entries,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(dir: &Path) -> RunConfig {
        let spec = CohortSpec {
            n_images: 240,
            n_tuning: 120,
            ..Default::default()
        };
        let mut cfg = RunConfig::new(Command::Simulate(SimulateArgs { spec }), dir);
        cfg.seed = 5;
        cfg.bootstrap_n = 200;
        run_pipeline(&cfg).unwrap();
        cfg
    }

    #[test]
    fn adjudicate_then_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let base = cohort(dir.path());
        let d = dir.path();
        let adj = RunConfig {
            command: Command::Adjudicate(AdjudicateArgs {
                grades: d.join("panel_grades.csv"),
                mode: ResolveMode::TwoRound,
                policy: MedianPolicy::default(),
            }),
            ..base.clone()
        };
        run_pipeline(&adj).unwrap();
        let m = RunConfig {
            command: Command::Metrics(MetricsArgs {
                scores: d.join("scores.csv"),
                labels: d.join("reference.csv"),
                tuning: TuningInputs {
                    scores: Some(d.join("tuning_scores.csv")),
                    labels: None,
                    grades: Some(d.join("tuning_grades.csv")),
                },
            }),
            ..base.clone()
        };
        let files = run_pipeline(&m).unwrap().files;
        assert!(files.iter().any(|f| f.ends_with("roc.svg")));
        let json: serde_json::Value = serde_json::from_slice(&fs::read(d.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(json["provenance"]["config"]["bootstrap_n"], 200);
        assert!(json["auc"]["point"].as_f64().unwrap() > 0.7);
    }

    #[test]
    fn errors_carry_subcommand_context() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::new(
            Command::Agreement(AgreementArgs {
                grades: dir.path().join("missing.csv"),
                metric: DistanceMetric::Absolute,
                round2: GradeSource::Round2Latest,
            }),
            dir.path(),
        );
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(err.to_string().starts_with("agreement:"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
}
