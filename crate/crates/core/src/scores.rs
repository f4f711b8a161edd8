//! Model outputs to analysis-ready scores: ensemble averaging, the referable
//! score, feature-head binarization, and visit/patient aggregation.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::FeatureId;

const SUM_TOLERANCE: f64 = 1e-6;

/// One feature head's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureHead {
    /// Probability that the feature is at a positive level.
    Positive(f64),
    /// Full distribution over the feature's levels, in ordinal order.
    Levels(Vec<f64>),
}

impl FeatureHead {
    /// Probability mass of the positive levels.
    pub fn positive_prob(&self, feature: FeatureId) -> f64 {
        match self {
            FeatureHead::Positive(p) => *p,
            FeatureHead::Levels(v) => v
                .iter()
                .enumerate()
                .filter(|(i, _)| feature.is_positive_level(*i as u8 + 1))
                .map(|(_, p)| p)
                .sum(),
        }
    }

    fn shape(&self) -> Option<usize> {
        match self {
            FeatureHead::Positive(_) => None,
            FeatureHead::Levels(v) => Some(v.len()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutput {
    pub image_id: String,
    pub model_id: String,
    /// Non-glaucomatous, low risk, high risk, likely glaucoma.
    pub gon_probs: [f64; 4],
    pub feature_probs: BTreeMap<FeatureId, FeatureHead>,
}

fn check_prob(image_id: &str, what: &str, p: f64) -> Result<()> {
    if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidProbabilities {
            image_id: image_id.to_string(),
            message: format!("{what} = {p} outside [0, 1]"),
        });
    }
    Ok(())
}

fn check_sum(image_id: &str, what: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidProbabilities {
            image_id: image_id.to_string(),
            message: format!("{what} sums to {sum}, expected 1 within {SUM_TOLERANCE}"),
        });
    }
    Ok(())
}

impl ModelOutput {
    pub fn new(
        image_id: impl Into<String>,
        model_id: impl Into<String>,
        gon_probs: [f64; 4],
        feature_probs: BTreeMap<FeatureId, FeatureHead>,
    ) -> Result<Self> {
        let out = ModelOutput {
            image_id: image_id.into(),
            model_id: model_id.into(),
            gon_probs,
            feature_probs,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.image_id;
        for (p, name) in self.gon_probs.iter().zip(["p_non", "p_low", "p_high", "p_likely"]) {
            check_prob(id, name, *p)?;
        }
        check_sum(id, "gon probabilities", &self.gon_probs)?;
        for (f, head) in &self.feature_probs {
            match head {
                FeatureHead::Positive(p) => check_prob(id, f.column(), *p)?,
                FeatureHead::Levels(v) => {
                    if v.len() != usize::from(f.levels()) {
                        return Err(Error::ShapeMismatch(format!(
                            "{}: {} head has {} entries, expected {}",
                            id,
                            f.column(),
                            v.len(),
                            f.levels()
                        )));
                    }
                    for p in v {
                        check_prob(id, f.column(), *p)?;
                    }
                    check_sum(id, f.column(), v)?;
                }
            }
        }
        Ok(())
    }

    /// Feature positivity at `threshold` on the positive-level mass.
    pub fn feature_call(&self, feature: FeatureId, threshold: f64) -> Option<bool> {
        self.feature_probs
            .get(&feature)
            .map(|h| h.positive_prob(feature) >= threshold)
    }
}

/// Elementwise mean of several models' outputs for one image.
/// Arithmetic mean; a run of equal values returns that value unchanged.
fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mut it = values.clone();
    let first = it.next().unwrap_or(f64::NAN);
    if it.all(|v| v == first) {
        return first;
    }
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

pub fn ensemble_average(outputs: &[ModelOutput]) -> Result<ModelOutput> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no outputs to average".into()))?;
    for o in &outputs[1..] {
        if o.image_id != first.image_id {
            return Err(Error::ShapeMismatch(format!(
                "mixed image ids {} and {}",
                first.image_id, o.image_id
            )));
        }
        let same_heads = o.feature_probs.len() == first.feature_probs.len()
            && o
                .feature_probs
                .iter()
                .zip(&first.feature_probs)
                .all(|((fa, ha), (fb, hb))| fa == fb && ha.shape() == hb.shape());
        if !same_heads {
            return Err(Error::ShapeMismatch(format!(
                "{}: models {} and {} have different feature heads",
                first.image_id, first.model_id, o.model_id
            )));
        }
    }
    let gon: [f64; 4] = std::array::from_fn(|k| mean(outputs.iter().map(|o| o.gon_probs[k])));

    let mut features = BTreeMap::new();
    for (f, head) in &first.feature_probs {
        let avg = match head {
            FeatureHead::Positive(_) => FeatureHead::Positive(mean(outputs.iter().map(|o| match &o.feature_probs[f] {
                FeatureHead::Positive(p) => *p,
                FeatureHead::Levels(_) => unreachable!("shapes checked"),
            }))),
            FeatureHead::Levels(v) => FeatureHead::Levels(
                (0..v.len())
                    .map(|k| {
                        mean(outputs.iter().map(|o| match &o.feature_probs[f] {
                            FeatureHead::Levels(w) => w[k],
                            FeatureHead::Positive(_) => unreachable!("shapes checked"),
                        }))
                    })
                    .collect(),
            ),
        };
        features.insert(*f, avg);
    }
    let model_id = if outputs.iter().all(|o| o.model_id == first.model_id) {
        first.model_id.clone()
    } else {
        "ensemble".to_string()
    };
    Ok(ModelOutput {
        image_id: first.image_id.clone(),
        model_id,
        gon_probs: gon,
        feature_probs: features,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ScoreMode {
    /// `p_high + p_likely`.
    #[default]
    ReferableMass,
    /// 1 when the most probable class is referable, else 0.
    Argmax,
}

impl ScoreMode {
    pub fn label(self) -> &'static str {
        match self {
            ScoreMode::ReferableMass => "referable-mass",
            ScoreMode::Argmax => "argmax",
        }
    }
}

pub fn referable_score(m: &ModelOutput) -> f64 {
    referable_score_with(m, ScoreMode::ReferableMass)
}

pub fn referable_score_with(m: &ModelOutput, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::ReferableMass => m.gon_probs[2] + m.gon_probs[3],
        ScoreMode::Argmax => {
            let mut best = 0;
            for i in 1..4 {
                if m.gon_probs[i] > m.gon_probs[best] {
                    best = i;
                }
            }
            if best >= 2 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Averages the outputs of every model per image, ordered by image id.
pub fn ensemble_by_image(outputs: &[ModelOutput]) -> Result<Vec<ModelOutput>> {
    let mut groups: BTreeMap<&str, Vec<ModelOutput>> = BTreeMap::new();
    for o in outputs {
        groups.entry(&o.image_id).or_default().push(o.clone());
    }
    groups.values().map(|g| ensemble_average(g)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Eye {
    Od,
    Os,
    Unknown,
}

impl Eye {
    pub fn label(self) -> &'static str {
        match self {
            Eye::Od => "OD",
            Eye::Os => "OS",
            Eye::Unknown => "unknown",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_uppercase().as_str() {
            "OD" | "R" | "RIGHT" => Some(Eye::Od),
            "OS" | "L" | "LEFT" => Some(Eye::Os),
            "" | "UNKNOWN" | "OU" => Some(Eye::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CodeKind {
    GlaucomaIcd,
    OnhReferral,
}

impl CodeKind {
    pub fn label(self) -> &'static str {
        match self {
            CodeKind::GlaucomaIcd => "glaucoma_icd",
            CodeKind::OnhReferral => "onh_referral",
        }
    }

    /// Accepts the two tags, plus raw ICD codes (ICD-9 365.x, ICD-10 H40.x).
    pub fn parse(token: &str) -> Option<Self> {
        let t = token.trim();
        match t.to_ascii_lowercase().as_str() {
            "glaucoma_icd" | "icd" => return Some(CodeKind::GlaucomaIcd),
            "onh_referral" | "referral" => return Some(CodeKind::OnhReferral),
            _ => {}
        }
        let upper = t.to_ascii_uppercase();
        (upper.starts_with("365") || upper.starts_with("H40")).then_some(CodeKind::GlaucomaIcd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisitImage {
    pub image_id: String,
    pub eye: Eye,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    pub date: NaiveDate,
    pub images: Vec<VisitImage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeEvent {
    pub date: NaiveDate,
    pub kind: CodeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Visit>,
    pub code_events: Vec<CodeEvent>,
}

const ICD_WINDOW_DAYS: i64 = 365;

/// Picks the analysis visit:
/// 1. the visit on the date of the earliest ONH referral that matches a visit;
/// 2. otherwise the visit closest to the earliest glaucoma ICD code among
///    visits no more than a year before it (ties to the earlier visit);
/// 3. otherwise the earliest visit.
pub fn select_visit(p: &PatientRecord) -> Result<&Visit> {
    if p.visits.is_empty() {
        return Err(Error::NoVisits(p.patient_id.clone()));
    }
    let mut referrals: Vec<NaiveDate> = p
        .code_events
        .iter()
        .filter(|e| e.kind == CodeKind::OnhReferral)
        .map(|e| e.date)
        .collect();
    referrals.sort();
    for date in referrals {
        if let Some(v) = p.visits.iter().filter(|v| v.date == date).min_by_key(|v| v.date) {
            return Ok(v);
        }
    }
    let icd = p
        .code_events
        .iter()
        .filter(|e| e.kind == CodeKind::GlaucomaIcd)
        .map(|e| e.date)
        .min();
    if let Some(code) = icd {
        let best = p
            .visits
            .iter()
            .filter(|v| (v.date - code).num_days() >= -ICD_WINDOW_DAYS)
            .min_by_key(|v| ((v.date - code).num_days().abs(), v.date));
        if let Some(v) = best {
            return Ok(v);
        }
    }
    Ok(p.visits.iter().min_by_key(|v| v.date).expect("non-empty"))
}

/// Highest-scoring image; equal scores go to the smaller image id.
pub fn patient_level_score<'a>(images: &[(&'a str, f64)]) -> Result<(&'a str, f64)> {
    images
        .iter()
        .copied()
        .reduce(|best, cur| {
            if cur.1 > best.1 || (cur.1 == best.1 && cur.0 < best.0) {
                cur
            } else {
                best
            }
        })
        .ok_or(Error::NoImages)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EyePolicy {
    /// The eye holding the highest-scoring image of the visit.
    #[default]
    HighestScore,
    /// One eye per patient drawn from a generator keyed by seed and patient.
    SeededRandom { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub patient_id: String,
    pub visit_date: NaiveDate,
    pub eye: Eye,
    pub image_id: String,
    pub score: f64,
    pub n_images: usize,
}

fn patient_rng(seed: u64, patient_id: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream independent of patient order
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in patient_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Patient-level score from the selected visit. Images without a score are
/// ignored; a visit with no scored image is an error.
pub fn score_patient(
    p: &PatientRecord,
    scores: &HashMap<String, f64>,
    policy: EyePolicy,
) -> Result<PatientScore> {
    let visit = select_visit(p)?;
    let scored: Vec<(&str, f64, Eye)> = visit
        .images
        .iter()
        .filter_map(|im| scores.get(&im.image_id).map(|&s| (im.image_id.as_str(), s, im.eye)))
        .collect();
    if scored.is_empty() {
        return Err(Error::NoImages.context(format!("patient {}", p.patient_id)));
    }
    let eye = match policy {
        EyePolicy::HighestScore => None,
        EyePolicy::SeededRandom { seed } => {
            let eyes: Vec<Eye> = scored.iter().map(|s| s.2).collect::<BTreeSet<_>>().into_iter().collect();
            let mut rng = patient_rng(seed, &p.patient_id);
            Some(eyes[rng.random_range(0..eyes.len())])
        }
    };
    let pool: Vec<(&str, f64)> = scored
        .iter()
        .filter(|s| eye.is_none_or(|e| s.2 == e))
        .map(|s| (s.0, s.1))
        .collect();
    let (image_id, score) = patient_level_score(&pool)?;
    let eye = scored.iter().find(|s| s.0 == image_id).expect("chosen from pool").2;
    Ok(PatientScore {
        patient_id: p.patient_id.clone(),
        visit_date: visit.date,
        eye,
        image_id: image_id.to_string(),
        score,
        n_images: pool.len(),
    })
}

pub fn score_patients(
    patients: &[PatientRecord],
    scores: &HashMap<String, f64>,
    policy: EyePolicy,
) -> Result<Vec<PatientScore>> {
    patients.iter().map(|p| score_patient(p, scores, policy)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn out(id: &str, g: [f64; 4]) -> ModelOutput {
        ModelOutput::new(id, "m", g, BTreeMap::new()).unwrap()
    }

    fn day(n: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + chrono::Duration::days(n)
    }

    fn visit(n: i64, ids: &[&str]) -> Visit {
        Visit {
            date: day(n),
            images: ids
                .iter()
                .map(|i| VisitImage {
                    image_id: i.to_string(),
                    eye: Eye::Unknown,
                })
                .collect(),
        }
    }

    #[test]
    fn referable_score_examples() {
        assert_eq!(referable_score(&out("a", [1.0, 0.0, 0.0, 0.0])), 0.0);
        assert_eq!(referable_score(&out("a", [0.0, 0.0, 0.0, 1.0])), 1.0);
        assert!((referable_score(&out("a", [0.5, 0.2, 0.2, 0.1])) - 0.3).abs() < 1e-15);
        let m = out("a", [0.3, 0.1, 0.4, 0.2]);
        assert_eq!(referable_score_with(&m, ScoreMode::Argmax), 1.0);
    }

    #[test]
    fn rejects_bad_sums() {
        let err = ModelOutput::new("x", "m", [0.5, 0.2, 0.2, 0.2], BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("sums to"), "{err}");
        assert!(ModelOutput::new("x", "m", [1.2, -0.2, 0.0, 0.0], BTreeMap::new()).is_err());
    }

    #[test]
    fn ensemble_two() {
        let a = out("i", [0.6, 0.2, 0.1, 0.1]);
        let b = out("i", [0.2, 0.2, 0.3, 0.3]);
        let e = ensemble_average(&[a, b]).unwrap();
        for (x, y) in e.gon_probs.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((x - y).abs() < 1e-15);
        }
        let ten = vec![out("i", [0.1, 0.2, 0.3, 0.4]); 10];
        assert_eq!(ensemble_average(&ten).unwrap().gon_probs[3], 0.4);
    }

    #[test]
    fn ensemble_shape_checks() {
        let a = out("i", [1.0, 0.0, 0.0, 0.0]);
        let b = out("j", [1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(ensemble_average(&[a.clone(), b]), Err(Error::ShapeMismatch(_))));
        let mut heads = BTreeMap::new();
        heads.insert(FeatureId::Notch, FeatureHead::Positive(0.3));
        let c = ModelOutput::new("i", "m2", [1.0, 0.0, 0.0, 0.0], heads).unwrap();
        assert!(ensemble_average(&[a, c]).is_err());
        assert!(ensemble_average(&[]).is_err());
    }

    #[test]
    fn level_heads_binarize_on_positive_mass() {
        let h = FeatureHead::Levels(vec![0.2, 0.3, 0.5]);
        assert!((h.positive_prob(FeatureId::Notch) - 0.8).abs() < 1e-15);
        assert!((h.positive_prob(FeatureId::RimIvsS) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn visit_selection() {
        let single = PatientRecord {
            patient_id: "p".into(),
            visits: vec![visit(5, &["a"])],
            code_events: vec![],
        };
        assert_eq!(select_visit(&single).unwrap().date, day(5));

        let icd = PatientRecord {
            patient_id: "p".into(),
            visits: vec![visit(300, &["b"]), visit(90, &["a"])],
            code_events: vec![CodeEvent {
                date: day(100),
                kind: CodeKind::GlaucomaIcd,
            }],
        };
        assert_eq!(select_visit(&icd).unwrap().date, day(90));

        let referral = PatientRecord {
            patient_id: "p".into(),
            visits: vec![visit(10, &["a"]), visit(20, &["b"]), visit(30, &["c"])],
            code_events: vec![CodeEvent {
                date: day(20),
                kind: CodeKind::OnhReferral,
            }],
        };
        assert_eq!(select_visit(&referral).unwrap().date, day(20));

        let early = PatientRecord {
            patient_id: "p".into(),
            visits: vec![visit(0, &["a"]), visit(900, &["b"])],
            code_events: vec![CodeEvent {
                date: day(400),
                kind: CodeKind::GlaucomaIcd,
            }],
        };
        // day 0 is outside the one-year window before the code
        assert_eq!(select_visit(&early).unwrap().date, day(900));

        let none = PatientRecord {
            patient_id: "p".into(),
            visits: vec![],
            code_events: vec![],
        };
        assert!(matches!(select_visit(&none), Err(Error::NoVisits(_))));
    }

    #[test]
    fn patient_max_and_ties() {
        assert_eq!(patient_level_score(&[("a", 0.2), ("b", 0.7)]).unwrap(), ("b", 0.7));
        assert_eq!(patient_level_score(&[("z", 0.4)]).unwrap(), ("z", 0.4));
        assert_eq!(patient_level_score(&[("b", 0.5), ("a", 0.5)]).unwrap(), ("a", 0.5));
        assert!(matches!(patient_level_score(&[]), Err(Error::NoImages)));
    }

    #[test]
    fn eye_policies() {
        let p = PatientRecord {
            patient_id: "p1".into(),
            visits: vec![Visit {
                date: day(0),
                images: vec![
                    VisitImage {
                        image_id: "r".into(),
                        eye: Eye::Od,
                    },
                    VisitImage {
                        image_id: "l".into(),
                        eye: Eye::Os,
                    },
                ],
            }],
            code_events: vec![],
        };
        let scores: HashMap<String, f64> = [("r".to_string(), 0.2), ("l".to_string(), 0.9)].into();
        let s = score_patient(&p, &scores, EyePolicy::HighestScore).unwrap();
        assert_eq!((s.image_id.as_str(), s.eye), ("l", Eye::Os));
        let a = score_patient(&p, &scores, EyePolicy::SeededRandom { seed: 4 }).unwrap();
        let b = score_patient(&p, &scores, EyePolicy::SeededRandom { seed: 4 }).unwrap();
        assert_eq!(a, b);
        let eyes: BTreeSet<Eye> = (0..40)
            .map(|seed| score_patient(&p, &scores, EyePolicy::SeededRandom { seed }).unwrap().eye)
            .collect();
        assert_eq!(eyes.len(), 2);
    }

    #[test]
    fn code_kind_tokens() {
        assert_eq!(CodeKind::parse("H40.1132"), Some(CodeKind::GlaucomaIcd));
        assert_eq!(CodeKind::parse("365.11"), Some(CodeKind::GlaucomaIcd));
        assert_eq!(CodeKind::parse("onh_referral"), Some(CodeKind::OnhReferral));
        assert_eq!(CodeKind::parse("E11.9"), None);
    }

    fn stochastic(raw: [u8; 4]) -> [f64; 4] {
        // dyadic values keep the arithmetic exact
        let total: u32 = raw.iter().map(|&r| u32::from(r) + 1).sum();
        let scale = 256.0 / f64::from(total);
        let mut v = raw.map(|r| ((f64::from(r) + 1.0) * scale).floor() / 256.0);
        v[0] += 1.0 - v.iter().sum::<f64>();
        v
    }

    proptest! {
        #[test]
        fn ensemble_is_linear_and_permutation_invariant(
            raws in proptest::collection::vec(any::<[u8; 4]>(), 1..9),
            log2n in 0u32..4,
        ) {
            let n = 1usize << log2n;
            let outs: Vec<ModelOutput> = raws.iter().cycle().take(n).map(|r| out("i", stochastic(*r))).collect();
            let e = ensemble_average(&outs).unwrap();
            let mean_score = outs.iter().map(referable_score).sum::<f64>() / n as f64;
            prop_assert_eq!(referable_score(&e), mean_score);
            prop_assert!((e.gon_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let mut rev = outs.clone();
            rev.reverse();
            prop_assert_eq!(ensemble_average(&rev).unwrap().gon_probs, e.gon_probs);
            prop_assert_eq!(ensemble_average(&outs[..1]).unwrap(), outs[0].clone());
        }

        #[test]
        fn patient_score_dominates(scores in proptest::collection::vec(0.0f64..=1.0, 1..20)) {
            let ids: Vec<String> = (0..scores.len()).map(|i| format!("img{i}")).collect();
            let pairs: Vec<(&str, f64)> = ids.iter().map(String::as_str).zip(scores.iter().copied()).collect();
            let (_, best) = patient_level_score(&pairs).unwrap();
            prop_assert!(scores.iter().all(|&s| best >= s));
        }
    }
}
