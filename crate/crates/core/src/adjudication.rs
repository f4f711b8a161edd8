//! Reference-standard construction from multi-grader grade logs.
//!
//! Each image is graded independently by three graders (round 1). When they
//! disagree, the same graders revise their grades one at a time with the
//! earlier annotations visible (round 2), stopping as soon as all three agree.
//! Images still unresolved after round 2 take the per-item median of the
//! three latest grades.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{Assessment, BinaryLabelSet, FeatureId, GonRisk, GradeRecord, Item, Round};

/// How a reference standard was reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Resolution {
    ConsensusRound1,
    ConsensusRound2,
    MedianRound2,
    /// Median of the round-1 grades with no round-2 replay (single-round
    /// logs, or the "round 1 median" comparison labels).
    MedianRound1,
}

impl Resolution {
    pub fn label(self) -> &'static str {
        match self {
            Resolution::ConsensusRound1 => "consensus_round1",
            Resolution::ConsensusRound2 => "consensus_round2",
            Resolution::MedianRound2 => "median_round2",
            Resolution::MedianRound1 => "median_round1",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        [
            Resolution::ConsensusRound1,
            Resolution::ConsensusRound2,
            Resolution::MedianRound2,
            Resolution::MedianRound1,
        ]
        .into_iter()
        .find(|r| r.label() == token.trim())
    }

    pub fn is_consensus(self) -> bool {
        matches!(self, Resolution::ConsensusRound1 | Resolution::ConsensusRound2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianPolicy {
    /// Order circumlinear answers by suspicion (none < not bared < possibly <
    /// bared). When disabled, a three-way split on that item is an error.
    pub circumlinear_ordered: bool,
}

impl Default for MedianPolicy {
    fn default() -> Self {
        MedianPolicy {
            circumlinear_ordered: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ResolveMode {
    /// Round-1 grades, then sequential round-2 revisions.
    #[default]
    TwoRound,
    /// Round-1 grades only (majority vote / median); round-2 rows are ignored.
    SingleRound,
}

/// Majority value when two or more agree, otherwise the middle value.
pub fn ordinal_median3<T: Ord + Copy>(a: T, b: T, c: T) -> T {
    if a == b || a == c {
        return a;
    }
    if b == c {
        return b;
    }
    let mut v = [a, b, c];
    v.sort();
    v[1]
}

/// Median of three assessments of one item, with ungradable ranked below
/// every grade (so a majority of ungradable answers yields ungradable).
pub fn median3_item(
    item: Item,
    a: Assessment,
    b: Assessment,
    c: Assessment,
    policy: MedianPolicy,
) -> Result<Assessment> {
    let all_differ = a != b && a != c && b != c;
    if all_differ && !item.is_ordinal() && !policy.circumlinear_ordered {
        return Err(Error::NonOrdinalTie {
            item: item.column().to_string(),
        });
    }
    Ok(ordinal_median3(a, b, c))
}

/// Final per-image labels together with how they were obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceStandard {
    pub image_id: String,
    pub labels: BinaryLabelSet,
    raw: [Option<Assessment>; Item::COUNT],
    pub resolution: Resolution,
    pub n_reviews: u32,
    /// Final referral-risk answer is ungradable; the image drops out of
    /// referral analyses.
    pub excluded: bool,
}

impl ReferenceStandard {
    pub fn from_raw(
        image_id: impl Into<String>,
        raw: [Option<Assessment>; Item::COUNT],
        resolution: Resolution,
        n_reviews: u32,
    ) -> Self {
        ReferenceStandard {
            image_id: image_id.into(),
            labels: BinaryLabelSet::from_assessments(&raw),
            raw,
            resolution,
            n_reviews,
            excluded: raw[Item::Gon.index()] == Some(Assessment::Ungradable),
        }
    }

    pub fn raw(&self, item: Item) -> Option<Assessment> {
        self.raw[item.index()]
    }

    pub fn raw_all(&self) -> &[Option<Assessment>; Item::COUNT] {
        &self.raw
    }

    pub fn gon(&self) -> Option<GonRisk> {
        self.raw(Item::Gon)
            .and_then(Assessment::level)
            .and_then(GonRisk::from_code)
    }

    /// Feature level, `None` when not assessed or ungradable.
    pub fn feature_level(&self, feature: FeatureId) -> Option<u8> {
        self.raw(Item::Feature(feature)).and_then(Assessment::level)
    }
}

type Grades = [Option<Assessment>; Item::COUNT];

fn malformed(image_id: &str, message: impl Into<String>) -> Error {
    Error::MalformedLog {
        image_id: image_id.to_string(),
        message: message.into(),
    }
}

fn median_grades(image_id: &str, latest: [&Grades; 3], policy: MedianPolicy) -> Result<Grades> {
    let mut out = [None; Item::COUNT];
    for item in Item::ALL {
        let i = item.index();
        out[i] = match (latest[0][i], latest[1][i], latest[2][i]) {
            (None, None, None) => None,
            (Some(a), Some(b), Some(c)) => Some(median3_item(item, a, b, c, policy)?),
            _ => {
                return Err(malformed(
                    image_id,
                    format!("item {item} assessed by only some graders"),
                ))
            }
        };
    }
    Ok(out)
}

/// Replays one image's grade log into its reference standard.
pub fn resolve_image(
    log: &[GradeRecord],
    mode: ResolveMode,
    policy: MedianPolicy,
) -> Result<ReferenceStandard> {
    let first = log
        .first()
        .ok_or_else(|| malformed("", "empty grade log"))?;
    let image_id = first.image_id.as_str();
    if let Some(other) = log.iter().find(|r| r.image_id != image_id) {
        return Err(malformed(
            image_id,
            format!("log mixes images {image_id} and {}", other.image_id),
        ));
    }

    let mut round1: Vec<&GradeRecord> = log.iter().filter(|r| r.round == Round::One).collect();
    let mut round2: Vec<&GradeRecord> = match mode {
        ResolveMode::TwoRound => log.iter().filter(|r| r.round == Round::Two).collect(),
        ResolveMode::SingleRound => Vec::new(),
    };
    round1.sort_by_key(|r| r.seq);
    round2.sort_by_key(|r| r.seq);
    for round in [&round1, &round2] {
        if let Some(w) = round.windows(2).find(|w| w[0].seq == w[1].seq) {
            return Err(malformed(image_id, format!("duplicate seq {}", w[0].seq)));
        }
    }

    if round1.len() != 3 {
        return Err(malformed(
            image_id,
            format!("expected 3 round-1 grades, found {}", round1.len()),
        ));
    }
    let graders: Vec<&str> = round1.iter().map(|r| r.grader_id.as_str()).collect();
    if graders[0] == graders[1] || graders[0] == graders[2] || graders[1] == graders[2] {
        return Err(malformed(image_id, "round-1 graders are not distinct"));
    }
    let mut reviews = [1u32; 3];
    for r in &round2 {
        let g = graders
            .iter()
            .position(|&g| g == r.grader_id)
            .ok_or_else(|| {
                malformed(
                    image_id,
                    format!("round-2 grader {} did not grade round 1", r.grader_id),
                )
            })?;
        reviews[g] += 1;
        if reviews[g] > 2 {
            return Err(malformed(
                image_id,
                format!("grader {} reviewed more than twice", r.grader_id),
            ));
        }
    }

    let mut latest: [&Grades; 3] = [
        round1[0].assessments(),
        round1[1].assessments(),
        round1[2].assessments(),
    ];
    let agree = |l: &[&Grades; 3]| l[0] == l[1] && l[0] == l[2];

    if agree(&latest) {
        return Ok(ReferenceStandard::from_raw(
            image_id,
            *latest[0],
            Resolution::ConsensusRound1,
            3,
        ));
    }

    let mut n_reviews = 3;
    for r in &round2 {
        let g = graders.iter().position(|&g| g == r.grader_id).unwrap();
        latest[g] = r.assessments();
        n_reviews += 1;
        if agree(&latest) {
            return Ok(ReferenceStandard::from_raw(
                image_id,
                *latest[0],
                Resolution::ConsensusRound2,
                n_reviews,
            ));
        }
    }

    let resolution = if round2.is_empty() {
        Resolution::MedianRound1
    } else {
        Resolution::MedianRound2
    };
    let raw = median_grades(image_id, latest, policy)?;
    Ok(ReferenceStandard::from_raw(image_id, raw, resolution, n_reviews))
}

/// Groups a full log by image and resolves each image, ordered by image id.
pub fn adjudicate(
    log: &[GradeRecord],
    mode: ResolveMode,
    policy: MedianPolicy,
) -> Result<Vec<ReferenceStandard>> {
    let mut by_image: BTreeMap<&str, Vec<GradeRecord>> = BTreeMap::new();
    for r in log {
        by_image.entry(&r.image_id).or_default().push(r.clone());
    }
    by_image
        .into_par_iter()
        .map(|(_, records)| resolve_image(&records, mode, policy))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdjudicationSummary {
    pub n_images: usize,
    pub n_excluded: usize,
    pub consensus_round1: usize,
    pub consensus_round2: usize,
    pub median_round2: usize,
    pub median_round1: usize,
    pub consensus_fraction: f64,
}

pub fn summarize(refs: &[ReferenceStandard]) -> AdjudicationSummary {
    let count = |res: Resolution| refs.iter().filter(|r| r.resolution == res).count();
    let consensus = refs.iter().filter(|r| r.resolution.is_consensus()).count();
    AdjudicationSummary {
        n_images: refs.len(),
        n_excluded: refs.iter().filter(|r| r.excluded).count(),
        consensus_round1: count(Resolution::ConsensusRound1),
        consensus_round2: count(Resolution::ConsensusRound2),
        median_round2: count(Resolution::MedianRound2),
        median_round1: count(Resolution::MedianRound1),
        consensus_fraction: if refs.is_empty() {
            0.0
        } else {
            consensus as f64 / refs.len() as f64
        },
    }
}

/// Cross-tabulation of two labelings of the same images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MethodAgreementMatrix {
    pub levels: [GonRisk; 4],
    /// `counts[i][j]`: images labelled `levels[i]` by the first method and
    /// `levels[j]` by the second.
    pub counts: [[u64; 4]; 4],
    pub n_label_changes: u64,
    pub n_referral_changes: u64,
}

impl MethodAgreementMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn method_agreement(a: &[GonRisk], b: &[GonRisk]) -> Result<MethodAgreementMatrix> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let mut m = MethodAgreementMatrix {
        levels: GonRisk::ALL,
        counts: [[0; 4]; 4],
        n_label_changes: 0,
        n_referral_changes: 0,
    };
    for (&x, &y) in a.iter().zip(b) {
        m.counts[x.code() as usize - 1][y.code() as usize - 1] += 1;
        if x != y {
            m.n_label_changes += 1;
        }
        if crate::grade::binarize_gon(x) != crate::grade::binarize_gon(y) {
            m.n_referral_changes += 1;
        }
    }
    Ok(m)
}
