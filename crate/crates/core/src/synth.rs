//! Seeded synthetic cohorts with known ground truth: panel and reader grade
//! logs, model outputs, tuning data and patient records.
//!
//! Each component draws from its own ChaCha8 stream, so changing one part of
//! the specification (say, the reader list) leaves the others unchanged.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, Continuous, ContinuousCDF};

use crate::adjudication::ordinal_median3;
use crate::error::{Error, Result};
use crate::grade::{Assessment, FeatureId, GradeRecord, GraderRole, Item, Round};
use crate::scores::{CodeEvent, CodeKind, Eye, FeatureHead, ModelOutput, PatientRecord, Visit, VisitImage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraderProfile {
    pub id: String,
    pub role: GraderRole,
    pub sens: f64,
    pub spec: f64,
    pub ungradable_rate: f64,
}

impl GraderProfile {
    pub fn new(id: impl Into<String>, role: GraderRole, sens: f64, spec: f64, ungradable_rate: f64) -> Self {
        GraderProfile {
            id: id.into(),
            role,
            sens,
            spec,
            ungradable_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub refer: BetaParams,
    pub nonrefer: BetaParams,
}

/// Probability that a feature is truly positive given the referral status.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRates {
    pub given_refer: f64,
    pub given_nonrefer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub n_images: usize,
    pub n_tuning: usize,
    pub prevalence: f64,
    /// Adjudication panel; each image is graded by three consecutive
    /// members in rotation.
    pub panel: Vec<GraderProfile>,
    /// Independent readers who grade every validation image once.
    pub readers: Vec<GraderProfile>,
    /// Chance that a round-2 reviewer adopts the current item-wise median.
    pub revision_prob: f64,
    pub score_model: ScoreModel,
    pub feature_model: BTreeMap<FeatureId, FeatureRates>,
    pub seed: u64,
}

fn default_feature_model() -> BTreeMap<FeatureId, FeatureRates> {
    use FeatureId::*;
    [
        (RimIvsS, 0.55, 0.08),
        (RimSvsT, 0.45, 0.06),
        (Notch, 0.50, 0.04),
        (LaminarDot, 0.60, 0.25),
        (NasalEmerging, 0.35, 0.05),
        (NasalDirected, 0.40, 0.07),
        (Circumlinear, 0.20, 0.04),
        (DiscHeme, 0.12, 0.02),
        (BetaPpa, 0.55, 0.20),
        (RnflDefect, 0.45, 0.05),
        (VerticalCdr, 0.85, 0.08),
    ]
    .into_iter()
    .map(|(f, r, n)| {
        (
            f,
            FeatureRates {
                given_refer: r,
                given_nonrefer: n,
            },
        )
    })
    .collect()
}

impl Default for CohortSpec {
    fn default() -> Self {
        let panel = (1..=5)
            .map(|i| GraderProfile::new(format!("panel{i}"), GraderRole::GlaucomaSpecialist, 0.93, 0.95, 0.01))
            .collect();
        let readers = vec![
            GraderProfile::new("gs1", GraderRole::GlaucomaSpecialist, 0.75, 0.92, 0.02),
            GraderProfile::new("gs2", GraderRole::GlaucomaSpecialist, 0.70, 0.94, 0.03),
            GraderProfile::new("oph1", GraderRole::Ophthalmologist, 0.55, 0.95, 0.04),
            GraderProfile::new("oph2", GraderRole::Ophthalmologist, 0.45, 0.97, 0.05),
            GraderProfile::new("opt1", GraderRole::Optometrist, 0.40, 0.96, 0.06),
            GraderProfile::new("opt2", GraderRole::Optometrist, 0.60, 0.90, 0.05),
        ];
        CohortSpec {
            n_images: 2000,
            n_tuning: 500,
            prevalence: 0.3,
            panel,
            readers,
            revision_prob: 0.7,
            score_model: ScoreModel {
                refer: BetaParams { a: 5.0, b: 2.0 },
                nonrefer: BetaParams { a: 2.0, b: 5.0 },
            },
            feature_model: default_feature_model(),
            seed: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidSpec(msg.into())
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(format!("{name} = {v} outside [0, 1]")))
    }
}

impl CohortSpec {
    pub fn validate(&self) -> Result<()> {
        check_rate("prevalence", self.prevalence)?;
        check_rate("revision_prob", self.revision_prob)?;
        if self.panel.len() < 3 {
            return Err(invalid("the panel needs at least 3 graders"));
        }
        let mut ids: Vec<&str> = self.panel.iter().chain(&self.readers).map(|g| g.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("grader ids must be unique"));
        }
        for g in self.panel.iter().chain(&self.readers) {
            if g.id.is_empty() || g.id.contains(',') {
                return Err(invalid(format!("grader id {:?} is not a plain token", g.id)));
            }
            check_rate(&format!("{} sens", g.id), g.sens)?;
            check_rate(&format!("{} spec", g.id), g.spec)?;
            check_rate(&format!("{} ungradable_rate", g.id), g.ungradable_rate)?;
        }
        for (name, p) in [("refer", self.score_model.refer), ("nonrefer", self.score_model.nonrefer)] {
            // the quadrature for the analytic AUC assumes bounded densities
            if !(p.a >= 1.0 && p.b >= 1.0 && p.a.is_finite() && p.b.is_finite()) {
                return Err(invalid(format!("{name} score Beta({}, {}) needs both shapes >= 1", p.a, p.b)));
            }
        }
        for f in FeatureId::ALL {
            let r = self
                .feature_model
                .get(&f)
                .ok_or_else(|| invalid(format!("feature model lacks {}", f.column())))?;
            check_rate(f.column(), r.given_refer)?;
            check_rate(f.column(), r.given_nonrefer)?;
        }
        Ok(())
    }
}

/// Latent truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub image_id: String,
    pub refer: bool,
    /// True level of each item, in `Item::ALL` order.
    pub levels: [u8; Item::COUNT],
}

impl TruthRecord {
    pub fn assessments(&self) -> [Option<Assessment>; Item::COUNT] {
        self.levels.map(|l| Some(Assessment::Graded(l)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub spec: CohortSpec,
    pub truth: Vec<TruthRecord>,
    pub panel_log: Vec<GradeRecord>,
    pub reader_log: Vec<GradeRecord>,
    pub outputs: Vec<ModelOutput>,
    pub tuning_truth: Vec<TruthRecord>,
    pub tuning_log: Vec<GradeRecord>,
    pub tuning_outputs: Vec<ModelOutput>,
    pub patients: Vec<PatientRecord>,
    pub analytic_auc: f64,
}

/// `P(X > Y)` for independent `X ~ Beta(pos)`, `Y ~ Beta(neg)`:
/// `integral f_X(x) F_Y(x) dx` by composite Simpson on 20 000 panels.
pub fn analytic_auc(model: &ScoreModel) -> Result<f64> {
    let pos = BetaDist::new(model.refer.a, model.refer.b).map_err(|e| invalid(e.to_string()))?;
    let neg = BetaDist::new(model.nonrefer.a, model.nonrefer.b).map_err(|e| invalid(e.to_string()))?;
    const PANELS: usize = 20_000;
    let h = 1.0 / PANELS as f64;
    let g = |x: f64| {
        let d = pos.pdf(x);
        if d.is_finite() {
            d * neg.cdf(x)
        } else {
            0.0
        }
    };
    let mut total = g(0.0) + g(1.0);
    for i in 1..PANELS {
        let x = i as f64 * h;
        total += if i % 2 == 1 { 4.0 } else { 2.0 } * g(x);
    }
    Ok(total * h / 3.0)
}

fn draw_level<R: Rng>(rng: &mut R, item: Item, positive: bool) -> u8 {
    let candidates: Vec<u8> = (1..=item.levels())
        .filter(|&l| item.is_positive_level(l) == positive)
        .collect();
    candidates[rng.random_range(0..candidates.len())]
}

fn draw_truth<R: Rng>(rng: &mut R, spec: &CohortSpec, image_id: String) -> TruthRecord {
    let refer = rng.random_bool(spec.prevalence);
    let mut levels = [0u8; Item::COUNT];
    levels[Item::Gon.index()] = draw_level(rng, Item::Gon, refer);
    for f in FeatureId::ALL {
        let r = spec.feature_model[&f];
        let positive = rng.random_bool(if refer { r.given_refer } else { r.given_nonrefer });
        let item = Item::Feature(f);
        levels[item.index()] = draw_level(rng, item, positive);
    }
    TruthRecord {
        image_id,
        refer,
        levels,
    }
}

/// One grader's view: the true level with probability sens (positive truth)
/// or spec (negative truth), otherwise a level across the referral cut.
fn grade_image<R: Rng>(rng: &mut R, g: &GraderProfile, truth: &TruthRecord) -> [Option<Assessment>; Item::COUNT] {
    if rng.random_bool(g.ungradable_rate) {
        return [Some(Assessment::Ungradable); Item::COUNT];
    }
    let mut out = [None; Item::COUNT];
    for item in Item::ALL {
        let level = truth.levels[item.index()];
        let positive = item.is_positive_level(level);
        let keep = rng.random_bool(if positive { g.sens } else { g.spec });
        let reported = if keep { level } else { draw_level(rng, item, !positive) };
        out[item.index()] = Some(Assessment::Graded(reported));
    }
    out
}

fn record(
    truth: &TruthRecord,
    g: &GraderProfile,
    round: Round,
    seq: u32,
    grades: &[Option<Assessment>; Item::COUNT],
) -> GradeRecord {
    let mut r = GradeRecord::new(&truth.image_id, &g.id, g.role, round, seq).expect("seq starts at 1");
    for item in Item::ALL {
        r.set(item, grades[item.index()]).expect("levels drawn from the item scale");
    }
    r
}

/// Round 1 by three rotating panel members; on disagreement each reviews
/// once in turn until the three agree. A reviewer revises with
/// `revision_prob`: per item, to the true grade when some panel member
/// already holds it, else to the item-wise median.
fn panel_log<R: Rng>(rng: &mut R, spec: &CohortSpec, truth: &[TruthRecord], two_rounds: bool) -> Vec<GradeRecord> {
    let mut log = Vec::new();
    let p = spec.panel.len();
    for (k, t) in truth.iter().enumerate() {
        let graders: Vec<&GraderProfile> = (0..3).map(|j| &spec.panel[(k + j) % p]).collect();
        let mut latest: Vec<[Option<Assessment>; Item::COUNT]> = graders.iter().map(|g| grade_image(rng, g, t)).collect();
        let mut seq = 0;
        for (g, grades) in graders.iter().zip(&latest) {
            seq += 1;
            log.push(record(t, g, Round::One, seq, grades));
        }
        if !two_rounds {
            continue;
        }
        for j in 0..3 {
            if latest[0] == latest[1] && latest[0] == latest[2] {
                break;
            }
            if rng.random_bool(spec.revision_prob) {
                let truth_grades = t.assessments();
                let revised: [Option<Assessment>; Item::COUNT] = std::array::from_fn(|i| {
                    let held = [latest[0][i], latest[1][i], latest[2][i]];
                    if held.contains(&truth_grades[i]) {
                        truth_grades[i]
                    } else {
                        Some(ordinal_median3(
                            held[0].expect("every item graded"),
                            held[1].expect("every item graded"),
                            held[2].expect("every item graded"),
                        ))
                    }
                });
                latest[j] = revised;
            }
            seq += 1;
            log.push(record(t, graders[j], Round::Two, seq, &latest[j]));
        }
    }
    log
}

fn reader_log<R: Rng>(rng: &mut R, spec: &CohortSpec, truth: &[TruthRecord]) -> Vec<GradeRecord> {
    let mut log = Vec::new();
    for t in truth {
        for (j, g) in spec.readers.iter().enumerate() {
            let grades = grade_image(rng, g, t);
            log.push(record(t, g, Round::One, j as u32 + 1, &grades));
        }
    }
    log
}

/// Model outputs whose referable score is the drawn Beta score: half the
/// score on each referable class, half the remainder on each other class.
fn outputs<R: Rng>(rng: &mut R, spec: &CohortSpec, truth: &[TruthRecord]) -> Result<Vec<ModelOutput>> {
    let beta = |p: BetaParams| Beta::new(p.a, p.b).map_err(|e| invalid(e.to_string()));
    let pos = beta(spec.score_model.refer)?;
    let neg = beta(spec.score_model.nonrefer)?;
    let head_pos = Beta::new(6.0, 2.0).expect("valid shape");
    let head_neg = Beta::new(2.0, 6.0).expect("valid shape");
    truth
        .iter()
        .map(|t| {
            let s: f64 = if t.refer { pos.sample(rng) } else { neg.sample(rng) };
            let q = 1.0 - s;
            let mut heads = BTreeMap::new();
            for f in FeatureId::ALL {
                let item = Item::Feature(f);
                let positive = item.is_positive_level(t.levels[item.index()]);
                let p: f64 = if positive { head_pos.sample(rng) } else { head_neg.sample(rng) };
                heads.insert(f, FeatureHead::Positive(p));
            }
            ModelOutput::new(&t.image_id, "synthetic", [q / 2.0, q / 2.0, s / 2.0, s / 2.0], heads)
        })
        .collect()
}

/// Two images per patient (one per eye) at one visit; patients with a
/// referable eye carry a glaucoma code a month after the visit.
fn patients(truth: &[TruthRecord]) -> Vec<PatientRecord> {
    let base = NaiveDate::from_ymd_opt(2016, 1, 4).expect("valid date");
    truth
        .chunks(2)
        .enumerate()
        .map(|(i, pair)| {
            let date = base + chrono::Duration::days(i as i64 % 1500);
            let images = pair
                .iter()
                .zip([Eye::Od, Eye::Os])
                .map(|(t, eye)| VisitImage {
                    image_id: t.image_id.clone(),
                    eye,
                })
                .collect();
            let code_events = if pair.iter().any(|t| t.refer) {
                vec![CodeEvent {
                    date: date + chrono::Duration::days(30),
                    kind: CodeKind::GlaucomaIcd,
                }]
            } else {
                Vec::new()
            };
            PatientRecord {
                patient_id: format!("p{:05}", i + 1),
                visits: vec![Visit { date, images }],
                code_events,
            }
        })
        .collect()
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate(spec: &CohortSpec) -> Result<Cohort> {
    spec.validate()?;
    let mut truth_rng = stream(spec.seed, 0);
    let truth: Vec<TruthRecord> = (0..spec.n_images)
        .map(|i| draw_truth(&mut truth_rng, spec, format!("img{:05}", i + 1)))
        .collect();
    let tuning_truth: Vec<TruthRecord> = (0..spec.n_tuning)
        .map(|i| draw_truth(&mut truth_rng, spec, format!("tune{:05}", i + 1)))
        .collect();
    let panel_log = panel_log(&mut stream(spec.seed, 1), spec, &truth, true);
    let reader_log = reader_log(&mut stream(spec.seed, 2), spec, &truth);
    let outputs = outputs(&mut stream(spec.seed, 3), spec, &truth)?;
    let tuning_log = panel_log_round1(&mut stream(spec.seed, 4), spec, &tuning_truth);
    let tuning_outputs = self::outputs(&mut stream(spec.seed, 5), spec, &tuning_truth)?;
    Ok(Cohort {
        spec: spec.clone(),
        patients: patients(&truth),
        truth,
        panel_log,
        reader_log,
        outputs,
        tuning_truth,
        tuning_log,
        tuning_outputs,
        analytic_auc: analytic_auc(&spec.score_model)?,
    })
}

fn panel_log_round1<R: Rng>(rng: &mut R, spec: &CohortSpec, truth: &[TruthRecord]) -> Vec<GradeRecord> {
    panel_log(rng, spec, truth, false)
}
