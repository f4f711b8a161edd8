//! Graded quantities: referral risk, optic nerve head features, gradability,
//! their ordinal codings, and the cutoffs that turn grades into binary labels.
//!
//! Every graded item is stored as a small ordinal code (`1..=levels`). The
//! textual tokens used in CSV files are listed per item in ordinal order, so
//! `labels()[code - 1]` is always the token for `code`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Glaucoma risk estimate, ordered by increasing suspicion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GonRisk {
    NonGlaucomatous = 1,
    LowRisk = 2,
    HighRisk = 3,
    Likely = 4,
}

impl GonRisk {
    pub const ALL: [GonRisk; 4] = [
        GonRisk::NonGlaucomatous,
        GonRisk::LowRisk,
        GonRisk::HighRisk,
        GonRisk::Likely,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(GonRisk::NonGlaucomatous),
            2 => Some(GonRisk::LowRisk),
            3 => Some(GonRisk::HighRisk),
            4 => Some(GonRisk::Likely),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        GON_LABELS[self as usize - 1]
    }
}

impl fmt::Display for GonRisk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

const GON_LABELS: &[&str] = &["non_glaucomatous", "low_risk", "high_risk", "likely_glaucoma"];
const THREE_LEVEL: &[&str] = &["no", "possible", "yes"];
const RIM_I_VS_S: &[&str] = &["i_clearly_greater", "similar", "s_clearly_greater"];
const RIM_S_VS_T: &[&str] = &["s_clearly_greater", "similar", "t_clearly_greater"];
const NASAL_EMERGING: &[&str] = &["no", "borderline", "yes"];
const NASAL_DIRECTED: &[&str] = &["no", "minimal", "yes"];
const CIRCUMLINEAR: &[&str] = &["none_present", "present_not_bared", "possibly", "present_bared"];
const CDR: &[&str] = &["0.1", "0.2", "0.3", "0.4", "0.5", "0.6", "0.7", "0.8", "0.9"];

/// Optic nerve head features graded alongside referral risk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FeatureId {
    RimIvsS,
    RimSvsT,
    Notch,
    LaminarDot,
    NasalEmerging,
    NasalDirected,
    Circumlinear,
    DiscHeme,
    BetaPpa,
    RnflDefect,
    VerticalCdr,
}

impl FeatureId {
    pub const ALL: [FeatureId; 11] = [
        FeatureId::RimIvsS,
        FeatureId::RimSvsT,
        FeatureId::Notch,
        FeatureId::LaminarDot,
        FeatureId::NasalEmerging,
        FeatureId::NasalDirected,
        FeatureId::Circumlinear,
        FeatureId::DiscHeme,
        FeatureId::BetaPpa,
        FeatureId::RnflDefect,
        FeatureId::VerticalCdr,
    ];

    /// Column name used in every CSV schema.
    pub fn column(self) -> &'static str {
        match self {
            FeatureId::RimIvsS => "rim_i_vs_s",
            FeatureId::RimSvsT => "rim_s_vs_t",
            FeatureId::Notch => "notch",
            FeatureId::LaminarDot => "laminar_dot",
            FeatureId::NasalEmerging => "nasal_emerging",
            FeatureId::NasalDirected => "nasal_directed",
            FeatureId::Circumlinear => "circumlinear",
            FeatureId::DiscHeme => "disc_heme",
            FeatureId::BetaPpa => "beta_ppa",
            FeatureId::RnflDefect => "rnfl_defect",
            FeatureId::VerticalCdr => "vertical_cdr",
        }
    }

    pub fn from_column(name: &str) -> Option<Self> {
        FeatureId::ALL.into_iter().find(|f| f.column() == name)
    }

    /// Human-readable name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            FeatureId::RimIvsS => "Rim width I vs S",
            FeatureId::RimSvsT => "Rim width S vs T",
            FeatureId::Notch => "Notch",
            FeatureId::LaminarDot => "Laminar dot sign",
            FeatureId::NasalEmerging => "Nasalization emerging",
            FeatureId::NasalDirected => "Nasalization directed",
            FeatureId::Circumlinear => "Baring of circumlinear vessels",
            FeatureId::DiscHeme => "Disc hemorrhage",
            FeatureId::BetaPpa => "Beta PPA",
            FeatureId::RnflDefect => "RNFL defect",
            FeatureId::VerticalCdr => "Vertical CD ratio",
        }
    }

    /// Textual description of the binary cutoff.
    pub fn cutoff(self) -> &'static str {
        match self {
            FeatureId::RimIvsS => "I<S vs I>S or I~S",
            FeatureId::RimSvsT => "S<T vs S>T or S~T",
            FeatureId::NasalEmerging | FeatureId::NasalDirected => "Yes vs Possible/No",
            FeatureId::Circumlinear => "Present and clearly bared vs All else",
            FeatureId::VerticalCdr => ">=0.7 vs <0.7",
            _ => "Yes/Possible vs No",
        }
    }

    /// Level tokens in ordinal order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            FeatureId::RimIvsS => RIM_I_VS_S,
            FeatureId::RimSvsT => RIM_S_VS_T,
            FeatureId::NasalEmerging => NASAL_EMERGING,
            FeatureId::NasalDirected => NASAL_DIRECTED,
            FeatureId::Circumlinear => CIRCUMLINEAR,
            FeatureId::VerticalCdr => CDR,
            FeatureId::Notch
            | FeatureId::LaminarDot
            | FeatureId::DiscHeme
            | FeatureId::BetaPpa
            | FeatureId::RnflDefect => THREE_LEVEL,
        }
    }

    pub fn levels(self) -> u8 {
        self.labels().len() as u8
    }

    /// `false` for the one categorical answer set (circumlinear vessels),
    /// whose ordering is a convention rather than part of the question.
    pub fn is_ordinal(self) -> bool {
        self != FeatureId::Circumlinear
    }

    /// Binary cutoff on the ordinal code.
    pub fn is_positive_level(self, level: u8) -> bool {
        match self {
            FeatureId::Notch
            | FeatureId::LaminarDot
            | FeatureId::DiscHeme
            | FeatureId::BetaPpa
            | FeatureId::RnflDefect => level >= 2,
            FeatureId::NasalEmerging | FeatureId::NasalDirected => level == 3,
            FeatureId::Circumlinear => level == 4,
            FeatureId::RimIvsS | FeatureId::RimSvsT => level == 3,
            FeatureId::VerticalCdr => level >= 7,
        }
    }
}

impl fmt::Display for FeatureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// A single feature grade. Vertical CDR is held as integer tenths so the
/// 0.7 cutoff is an exact comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureGrade {
    feature: FeatureId,
    level: u8,
}

impl FeatureGrade {
    pub fn new(feature: FeatureId, level: u8) -> Result<Self> {
        if level == 0 || level > feature.levels() {
            return Err(Error::InvalidGrade(format!(
                "level {level} outside 1..={} for {feature}",
                feature.levels()
            )));
        }
        Ok(FeatureGrade { feature, level })
    }

    pub fn vertical_cdr_tenths(tenths: u8) -> Result<Self> {
        FeatureGrade::new(FeatureId::VerticalCdr, tenths)
    }

    pub fn parse(feature: FeatureId, token: &str) -> Result<Self> {
        let level = parse_level(feature.labels(), token).ok_or_else(|| {
            Error::InvalidGrade(format!("'{token}' is not a valid {feature} grade"))
        })?;
        FeatureGrade::new(feature, level)
    }

    pub fn feature(self) -> FeatureId {
        self.feature
    }

    pub fn level(self) -> u8 {
        self.level
    }

    pub fn label(self) -> &'static str {
        self.feature.labels()[self.level as usize - 1]
    }

    /// Vertical cup-to-disc ratio as a decimal, `None` for other features.
    pub fn cdr(self) -> Option<f64> {
        (self.feature == FeatureId::VerticalCdr).then(|| f64::from(self.level) / 10.0)
    }
}

fn parse_level(labels: &[&str], token: &str) -> Option<u8> {
    let token = token.trim();
    if let Some(pos) = labels.iter().position(|l| l.eq_ignore_ascii_case(token)) {
        return Some(pos as u8 + 1);
    }
    // CDR written as e.g. "0.70" or ".7"
    if labels == CDR {
        let value: f64 = token.parse().ok()?;
        let tenths = (value * 10.0).round();
        if (value * 10.0 - tenths).abs() < 1e-9 && (1.0..=9.0).contains(&tenths) {
            return Some(tenths as u8);
        }
    }
    None
}

/// Any graded question: referral risk or one of the features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Item {
    Gon,
    Feature(FeatureId),
}

impl Item {
    pub const COUNT: usize = 12;

    pub const ALL: [Item; Item::COUNT] = [
        Item::Gon,
        Item::Feature(FeatureId::RimIvsS),
        Item::Feature(FeatureId::RimSvsT),
        Item::Feature(FeatureId::Notch),
        Item::Feature(FeatureId::LaminarDot),
        Item::Feature(FeatureId::NasalEmerging),
        Item::Feature(FeatureId::NasalDirected),
        Item::Feature(FeatureId::Circumlinear),
        Item::Feature(FeatureId::DiscHeme),
        Item::Feature(FeatureId::BetaPpa),
        Item::Feature(FeatureId::RnflDefect),
        Item::Feature(FeatureId::VerticalCdr),
    ];

    pub fn index(self) -> usize {
        match self {
            Item::Gon => 0,
            Item::Feature(f) => f as usize + 1,
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Item::Gon => "gon",
            Item::Feature(f) => f.column(),
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Item::Gon => "Referable GON risk",
            Item::Feature(f) => f.display_name(),
        }
    }

    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Item::Gon => GON_LABELS,
            Item::Feature(f) => f.labels(),
        }
    }

    pub fn levels(self) -> u8 {
        self.labels().len() as u8
    }

    pub fn is_ordinal(self) -> bool {
        match self {
            Item::Gon => true,
            Item::Feature(f) => f.is_ordinal(),
        }
    }

    pub fn parse_level(self, token: &str) -> Option<u8> {
        parse_level(self.labels(), token)
    }

    pub fn label(self, level: u8) -> &'static str {
        self.labels()[level as usize - 1]
    }

    /// Binary label for a graded level of this item.
    pub fn is_positive_level(self, level: u8) -> bool {
        match self {
            Item::Gon => level >= GonRisk::HighRisk.code(),
            Item::Feature(f) => f.is_positive_level(level),
        }
    }
}

impl fmt::Display for Item {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gradability {
    Gradable,
    Ungradable,
}

impl Gradability {
    pub fn label(self) -> &'static str {
        match self {
            Gradability::Gradable => "gradable",
            Gradability::Ungradable => "ungradable",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "gradable" => Some(Gradability::Gradable),
            "ungradable" => Some(Gradability::Ungradable),
            _ => None,
        }
    }
}

/// One grader's answer for one item: either a grade or "ungradable".
///
/// `Ungradable` sorts below every grade, which is how gradability takes part
/// in the median of three.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Assessment {
    Ungradable,
    Graded(u8),
}

impl Assessment {
    pub fn gradability(self) -> Gradability {
        match self {
            Assessment::Ungradable => Gradability::Ungradable,
            Assessment::Graded(_) => Gradability::Gradable,
        }
    }

    pub fn level(self) -> Option<u8> {
        match self {
            Assessment::Graded(l) => Some(l),
            Assessment::Ungradable => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GraderRole {
    GlaucomaSpecialist,
    Ophthalmologist,
    Optometrist,
    Unknown,
}

impl GraderRole {
    pub fn label(self) -> &'static str {
        match self {
            GraderRole::GlaucomaSpecialist => "glaucoma_specialist",
            GraderRole::Ophthalmologist => "ophthalmologist",
            GraderRole::Optometrist => "optometrist",
            GraderRole::Unknown => "unknown",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token.trim().to_ascii_lowercase().as_str() {
            "glaucoma_specialist" => Some(GraderRole::GlaucomaSpecialist),
            "ophthalmologist" => Some(GraderRole::Ophthalmologist),
            "optometrist" => Some(GraderRole::Optometrist),
            "unknown" | "" => Some(GraderRole::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Round {
    One = 1,
    Two = 2,
}

impl Round {
    pub fn from_number(n: u32) -> Option<Self> {
        match n {
            1 => Some(Round::One),
            2 => Some(Round::Two),
            _ => None,
        }
    }

    pub fn number(self) -> u32 {
        self as u32
    }
}

/// One grader's assessment of one image in one round.
///
/// An item is either not assessed (`None`), ungradable, or graded; a grade
/// can therefore only exist when the item was judged gradable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradeRecord {
    pub image_id: String,
    pub grader_id: String,
    pub grader_role: GraderRole,
    pub round: Round,
    pub seq: u32,
    assessments: [Option<Assessment>; Item::COUNT],
    /// Free-text findings carried through untouched.
    pub other_findings: Option<String>,
}

impl GradeRecord {
    pub fn new(
        image_id: impl Into<String>,
        grader_id: impl Into<String>,
        grader_role: GraderRole,
        round: Round,
        seq: u32,
    ) -> Result<Self> {
        if seq == 0 {
            return Err(Error::InvalidGrade("seq must be >= 1".into()));
        }
        Ok(GradeRecord {
            image_id: image_id.into(),
            grader_id: grader_id.into(),
            grader_role,
            round,
            seq,
            assessments: [None; Item::COUNT],
            other_findings: None,
        })
    }

    pub fn set(&mut self, item: Item, assessment: Option<Assessment>) -> Result<()> {
        if let Some(Assessment::Graded(level)) = assessment {
            if level == 0 || level > item.levels() {
                return Err(Error::InvalidGrade(format!(
                    "level {level} outside 1..={} for {item}",
                    item.levels()
                )));
            }
        }
        self.assessments[item.index()] = assessment;
        Ok(())
    }

    pub fn with(mut self, item: Item, assessment: Assessment) -> Result<Self> {
        self.set(item, Some(assessment))?;
        Ok(self)
    }

    pub fn assessment(&self, item: Item) -> Option<Assessment> {
        self.assessments[item.index()]
    }

    pub fn assessments(&self) -> &[Option<Assessment>; Item::COUNT] {
        &self.assessments
    }

    pub fn gon(&self) -> Option<GonRisk> {
        self.assessment(Item::Gon)
            .and_then(Assessment::level)
            .and_then(GonRisk::from_code)
    }

    pub fn feature(&self, feature: FeatureId) -> Option<FeatureGrade> {
        self.assessment(Item::Feature(feature))
            .and_then(Assessment::level)
            .map(|level| FeatureGrade { feature, level })
    }

    pub fn gradability(&self, item: Item) -> Option<Gradability> {
        self.assessment(item).map(Assessment::gradability)
    }
}

/// Binary referral and feature labels derived from grades.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryLabelSet {
    pub refer: Option<bool>,
    pub feature_positive: BTreeMap<FeatureId, Option<bool>>,
}

impl BinaryLabelSet {
    /// Labels for a full set of per-item assessments, `None` where the item
    /// was not assessed or was ungradable.
    pub fn from_assessments(assessments: &[Option<Assessment>; Item::COUNT]) -> Self {
        let label = |item: Item| {
            assessments[item.index()]
                .and_then(Assessment::level)
                .map(|level| item.is_positive_level(level))
        };
        BinaryLabelSet {
            refer: label(Item::Gon),
            feature_positive: FeatureId::ALL
                .into_iter()
                .map(|f| (f, label(Item::Feature(f))))
                .collect(),
        }
    }

    pub fn feature(&self, feature: FeatureId) -> Option<bool> {
        self.feature_positive.get(&feature).copied().flatten()
    }
}

/// High-risk suspects and likely glaucoma are referable.
pub fn binarize_gon(risk: GonRisk) -> bool {
    risk >= GonRisk::HighRisk
}

pub fn binarize_feature(grade: FeatureGrade) -> bool {
    grade.feature.is_positive_level(grade.level)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gon_binarization() {
        assert!(binarize_gon(GonRisk::HighRisk));
        assert!(binarize_gon(GonRisk::Likely));
        assert!(!binarize_gon(GonRisk::LowRisk));
        assert!(!binarize_gon(GonRisk::NonGlaucomatous));
        // monotone in the code
        let flags: Vec<bool> = GonRisk::ALL.iter().map(|&g| binarize_gon(g)).collect();
        assert!(flags.windows(2).all(|w| w[0] <= w[1]));
    }

    fn grade(f: FeatureId, token: &str) -> FeatureGrade {
        FeatureGrade::parse(f, token).unwrap()
    }

    #[test]
    fn feature_cutoffs() {
        assert!(binarize_feature(grade(FeatureId::Notch, "possible")));
        assert!(binarize_feature(grade(FeatureId::VerticalCdr, "0.7")));
        assert!(!binarize_feature(grade(FeatureId::VerticalCdr, "0.6")));
        assert!(!binarize_feature(grade(FeatureId::Circumlinear, "possibly")));
        assert!(binarize_feature(grade(FeatureId::Circumlinear, "present_bared")));
        assert!(!binarize_feature(grade(FeatureId::NasalEmerging, "borderline")));
        assert!(!binarize_feature(grade(FeatureId::NasalDirected, "minimal")));
        assert!(binarize_feature(grade(FeatureId::RimIvsS, "s_clearly_greater")));
        assert!(!binarize_feature(grade(FeatureId::RimIvsS, "similar")));
        assert!(binarize_feature(grade(FeatureId::RimSvsT, "t_clearly_greater")));
        assert!(!binarize_feature(grade(FeatureId::RimSvsT, "s_clearly_greater")));
    }

    #[test]
    fn binarization_is_total() {
        let expected_positive: &[(FeatureId, &[&str])] = &[
            (FeatureId::RimIvsS, &["s_clearly_greater"]),
            (FeatureId::RimSvsT, &["t_clearly_greater"]),
            (FeatureId::Notch, &["yes", "possible"]),
            (FeatureId::LaminarDot, &["yes", "possible"]),
            (FeatureId::NasalEmerging, &["yes"]),
            (FeatureId::NasalDirected, &["yes"]),
            (FeatureId::Circumlinear, &["present_bared"]),
            (FeatureId::DiscHeme, &["yes", "possible"]),
            (FeatureId::BetaPpa, &["yes", "possible"]),
            (FeatureId::RnflDefect, &["yes", "possible"]),
            (FeatureId::VerticalCdr, &["0.7", "0.8", "0.9"]),
        ];
        for &(feature, positives) in expected_positive {
            for level in 1..=feature.levels() {
                let g = FeatureGrade::new(feature, level).unwrap();
                assert_eq!(
                    binarize_feature(g),
                    positives.contains(&g.label()),
                    "{feature} {}",
                    g.label()
                );
            }
            assert!(FeatureGrade::new(feature, 0).is_err());
            assert!(FeatureGrade::new(feature, feature.levels() + 1).is_err());
        }
    }

    #[test]
    fn three_level_codes() {
        assert_eq!(grade(FeatureId::DiscHeme, "yes").level(), 3);
        assert_eq!(grade(FeatureId::DiscHeme, "possible").level(), 2);
        assert_eq!(grade(FeatureId::DiscHeme, "no").level(), 1);
        assert_eq!(grade(FeatureId::RimIvsS, "i_clearly_greater").level(), 1);
    }

    #[test]
    fn cdr_parsing_is_exact() {
        assert_eq!(grade(FeatureId::VerticalCdr, "0.70").level(), 7);
        assert_eq!(grade(FeatureId::VerticalCdr, ".3").level(), 3);
        assert_eq!(grade(FeatureId::VerticalCdr, "0.7").cdr(), Some(0.7));
        assert!(FeatureGrade::parse(FeatureId::VerticalCdr, "0.75").is_err());
        assert!(FeatureGrade::parse(FeatureId::VerticalCdr, "1.0").is_err());
        assert!(FeatureGrade::parse(FeatureId::VerticalCdr, "0.0").is_err());
    }

    #[test]
    fn item_indices_cover_all() {
        for (i, item) in Item::ALL.iter().enumerate() {
            assert_eq!(item.index(), i);
        }
    }

    #[test]
    fn record_accessors() {
        let rec = GradeRecord::new("img", "g1", GraderRole::Unknown, Round::One, 1)
            .unwrap()
            .with(Item::Gon, Assessment::Graded(3))
            .unwrap()
            .with(Item::Feature(FeatureId::Notch), Assessment::Ungradable)
            .unwrap();
        assert_eq!(rec.gon(), Some(GonRisk::HighRisk));
        assert_eq!(rec.feature(FeatureId::Notch), None);
        assert_eq!(
            rec.gradability(Item::Feature(FeatureId::Notch)),
            Some(Gradability::Ungradable)
        );
        assert_eq!(rec.gradability(Item::Feature(FeatureId::BetaPpa)), None);
        let labels = BinaryLabelSet::from_assessments(rec.assessments());
        assert_eq!(labels.refer, Some(true));
        assert_eq!(labels.feature(FeatureId::Notch), None);
        assert!(GradeRecord::new("img", "g1", GraderRole::Unknown, Round::One, 0).is_err());
        let mut rec = rec;
        assert!(rec.set(Item::Gon, Some(Assessment::Graded(5))).is_err());
    }
}
