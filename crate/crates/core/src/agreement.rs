//! Krippendorff's alpha for many graders with missing grades.
//!
//! Computed through the coincidence matrix: every ordered pair of values
//! coded for the same item contributes `1 / (m_u - 1)`, where `m_u` is the
//! number of values present for that item. Items with fewer than two values
//! cannot be paired and are dropped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grade::{Assessment, GradeRecord, Item, Round};

/// Distance between two ordinal codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMetric {
    /// `|a - b|`, the grade difference.
    #[default]
    Absolute,
    /// `(a - b)^2`, the interval metric.
    Squared,
    /// 0 when equal, 1 otherwise.
    Nominal,
}

impl DistanceMetric {
    pub fn distance(self, a: u32, b: u32) -> f64 {
        let d = f64::from(a.abs_diff(b));
        match self {
            DistanceMetric::Absolute => d,
            DistanceMetric::Squared => d * d,
            DistanceMetric::Nominal => {
                if a == b {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }
}

/// Graders × items table of ordinal codes, `None` where a grade is missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ReliabilityMatrix {
    items: Vec<String>,
    graders: Vec<String>,
    values: Vec<Vec<Option<u32>>>,
}

impl ReliabilityMatrix {
    /// `values[g][i]` is grader `g`'s code for item `i`.
    pub fn new(
        items: Vec<String>,
        graders: Vec<String>,
        values: Vec<Vec<Option<u32>>>,
    ) -> Result<Self> {
        if values.len() != graders.len() {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: graders.len(),
            });
        }
        if let Some(row) = values.iter().find(|row| row.len() != items.len()) {
            return Err(Error::LengthMismatch {
                left: row.len(),
                right: items.len(),
            });
        }
        Ok(ReliabilityMatrix {
            items,
            graders,
            values,
        })
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn graders(&self) -> &[String] {
        &self.graders
    }

    pub fn values(&self) -> &[Vec<Option<u32>>] {
        &self.values
    }

    /// Number of items carrying at least two codes.
    pub fn pairable_items(&self) -> usize {
        (0..self.items.len())
            .filter(|&i| self.values.iter().filter(|row| row[i].is_some()).count() >= 2)
            .count()
    }
}

pub fn krippendorff_alpha(m: &ReliabilityMatrix, metric: DistanceMetric) -> Result<f64> {
    let mut codes: Vec<u32> = m.values.iter().flatten().flatten().copied().collect();
    codes.sort_unstable();
    codes.dedup();
    let index: BTreeMap<u32, usize> = codes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let k = codes.len();

    let mut coincidence = vec![vec![0.0f64; k]; k];
    let mut counts = vec![0usize; k];
    let mut pairable = 0usize;
    for item in 0..m.items.len() {
        counts.iter_mut().for_each(|c| *c = 0);
        let mut m_u = 0usize;
        for row in &m.values {
            if let Some(code) = row[item] {
                counts[index[&code]] += 1;
                m_u += 1;
            }
        }
        if m_u < 2 {
            continue;
        }
        pairable += 1;
        let scale = 1.0 / (m_u - 1) as f64;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for kk in 0..k {
                let pairs = if c == kk {
                    counts[c] * (counts[c] - 1)
                } else {
                    counts[c] * counts[kk]
                };
                if pairs > 0 {
                    coincidence[c][kk] += pairs as f64 * scale;
                }
            }
        }
    }
    if pairable == 0 {
        return Err(Error::DegenerateData(
            "no item carries two or more grades".into(),
        ));
    }

    let marginals: Vec<f64> = coincidence.iter().map(|row| row.iter().sum()).collect();
    let n: f64 = marginals.iter().sum();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for c in 0..k {
        for kk in 0..k {
            let d = metric.distance(codes[c], codes[kk]);
            observed += coincidence[c][kk] * d;
            expected += marginals[c] * marginals[kk] * d;
        }
    }
    if expected == 0.0 {
        return Err(Error::DegenerateData(
            "all pairable grades are identical; expected disagreement is zero".into(),
        ));
    }
    Ok(1.0 - (n - 1.0) * observed / expected)
}

/// Which grades of a two-round log enter an agreement matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GradeSource {
    Round1,
    /// Each grader's latest grade after round 2 (round-1 grade if never revised).
    Round2Latest,
    /// Round-2 grades only; graders who did not revise are missing.
    Round2Only,
}

/// A question whose inter-grader agreement is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Question {
    Grade(Item),
    /// Gradability of the referral-risk question (ungradable=1, gradable=2).
    GonGradability,
}

impl Question {
    pub fn all() -> Vec<Question> {
        let mut qs = vec![Question::Grade(Item::Gon), Question::GonGradability];
        qs.extend(Item::ALL[1..].iter().map(|&i| Question::Grade(i)));
        qs
    }

    pub fn label(self) -> String {
        match self {
            Question::Grade(item) => item.display_name().to_string(),
            Question::GonGradability => "Glaucoma gradability".to_string(),
        }
    }

    fn code(self, assessment: Assessment) -> Option<u32> {
        match (self, assessment) {
            (Question::Grade(_), Assessment::Graded(l)) => Some(u32::from(l)),
            (Question::Grade(_), Assessment::Ungradable) => None,
            (Question::GonGradability, Assessment::Ungradable) => Some(1),
            (Question::GonGradability, Assessment::Graded(_)) => Some(2),
        }
    }

    fn item(self) -> Item {
        match self {
            Question::Grade(item) => item,
            Question::GonGradability => Item::Gon,
        }
    }
}

/// Builds the graders × images matrix for one question.
pub fn reliability_matrix(
    log: &[GradeRecord],
    question: Question,
    source: GradeSource,
) -> ReliabilityMatrix {
    // (image, grader) -> (round, seq, assessment) keeping the latest entry
    let mut latest: BTreeMap<(&str, &str), (Round, u32, Option<Assessment>)> = BTreeMap::new();
    for r in log {
        let keep = match source {
            GradeSource::Round1 => r.round == Round::One,
            GradeSource::Round2Only => r.round == Round::Two,
            GradeSource::Round2Latest => true,
        };
        if !keep {
            continue;
        }
        let entry = (r.round, r.seq, r.assessment(question.item()));
        latest
            .entry((r.image_id.as_str(), r.grader_id.as_str()))
            .and_modify(|e| {
                if (entry.0, entry.1) > (e.0, e.1) {
                    *e = entry;
                }
            })
            .or_insert(entry);
    }

    let mut items: Vec<String> = log.iter().map(|r| r.image_id.clone()).collect();
    items.sort();
    items.dedup();
    let mut graders: Vec<String> = log.iter().map(|r| r.grader_id.clone()).collect();
    graders.sort();
    graders.dedup();

    let values = graders
        .iter()
        .map(|g| {
            items
                .iter()
                .map(|i| {
                    latest
                        .get(&(i.as_str(), g.as_str()))
                        .and_then(|&(_, _, a)| a)
                        .and_then(|a| question.code(a))
                })
                .collect()
        })
        .collect();
    ReliabilityMatrix {
        items,
        graders,
        values,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub question: String,
    pub alpha_round1: Option<f64>,
    pub alpha_round2: Option<f64>,
    pub items_round1: usize,
    pub items_round2: usize,
}

/// One alpha per question for round 1 and for the chosen round-2 source.
/// Questions with no measurable disagreement report `None`.
pub fn agreement_table(
    log: &[GradeRecord],
    metric: DistanceMetric,
    round2: GradeSource,
) -> Vec<AgreementRow> {
    Question::all()
        .into_iter()
        .map(|q| {
            let r1 = reliability_matrix(log, q, GradeSource::Round1);
            let r2 = reliability_matrix(log, q, round2);
            AgreementRow {
                question: q.label(),
                alpha_round1: krippendorff_alpha(&r1, metric).ok(),
                alpha_round2: krippendorff_alpha(&r2, metric).ok(),
                items_round1: r1.pairable_items(),
                items_round2: r2.pairable_items(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(values: Vec<Vec<Option<u32>>>) -> ReliabilityMatrix {
        let items = (0..values[0].len()).map(|i| format!("i{i}")).collect();
        let graders = (0..values.len()).map(|g| format!("g{g}")).collect();
        ReliabilityMatrix::new(items, graders, values).unwrap()
    }

    /// Direct pair enumeration: within-item pairs for observed disagreement,
    /// all pairs of pairable values for expected disagreement.
    fn alpha_by_pairs(values: &[Vec<Option<u32>>], metric: DistanceMetric) -> f64 {
        let n_items = values[0].len();
        let units: Vec<Vec<u32>> = (0..n_items)
            .map(|i| values.iter().filter_map(|row| row[i]).collect::<Vec<_>>())
            .filter(|u| u.len() >= 2)
            .collect();
        let pooled: Vec<u32> = units.iter().flatten().copied().collect();
        let n = pooled.len() as f64;
        let mut d_o = 0.0;
        for u in &units {
            let mut s = 0.0;
            for i in 0..u.len() {
                for j in 0..u.len() {
                    if i != j {
                        s += metric.distance(u[i], u[j]);
                    }
                }
            }
            d_o += s / (u.len() - 1) as f64;
        }
        d_o /= n;
        let mut d_e = 0.0;
        for i in 0..pooled.len() {
            for j in 0..pooled.len() {
                if i != j {
                    d_e += metric.distance(pooled[i], pooled[j]);
                }
            }
        }
        d_e /= n * (n - 1.0);
        1.0 - d_o / d_e
    }

    #[test]
    fn perfect_agreement_is_one() {
        let m = matrix(vec![
            vec![Some(1), Some(2), Some(3)],
            vec![Some(1), Some(2), Some(3)],
            vec![None, Some(2), Some(3)],
        ]);
        assert_eq!(krippendorff_alpha(&m, DistanceMetric::Absolute).unwrap(), 1.0);
    }

    #[test]
    fn single_value_is_degenerate() {
        let m = matrix(vec![vec![Some(2), Some(2)], vec![Some(2), Some(2)]]);
        assert!(matches!(
            krippendorff_alpha(&m, DistanceMetric::Absolute),
            Err(Error::DegenerateData(_))
        ));
        let lonely = matrix(vec![vec![Some(1), None], vec![None, Some(3)]]);
        assert!(krippendorff_alpha(&lonely, DistanceMetric::Absolute).is_err());
    }

    #[test]
    fn planted_disagreement_matches_pairs() {
        let mut values = vec![
            vec![Some(1), Some(2), Some(3), Some(4), Some(2), Some(1)],
            vec![Some(1), Some(2), Some(3), Some(4), Some(2), Some(1)],
            vec![Some(1), Some(2), Some(3), Some(4), Some(2), Some(1)],
        ];
        values[2][3] = Some(2);
        let m = matrix(values.clone());
        let alpha = krippendorff_alpha(&m, DistanceMetric::Absolute).unwrap();
        let oracle = alpha_by_pairs(&values, DistanceMetric::Absolute);
        assert!((alpha - oracle).abs() < 1e-12, "{alpha} vs {oracle}");
        assert!(alpha < 1.0);
    }

    #[test]
    fn textbook_nominal_example() {
        // Krippendorff's reliability-data example (4 coders, 12 units,
        // nominal alpha = 0.743).
        let data: [[u32; 12]; 4] = [
            [1, 2, 3, 3, 2, 1, 4, 1, 2, 0, 0, 0],
            [1, 2, 3, 3, 2, 2, 4, 1, 2, 5, 0, 3],
            [0, 3, 3, 3, 2, 3, 4, 2, 2, 5, 1, 0],
            [1, 2, 3, 3, 2, 4, 4, 1, 2, 5, 1, 0],
        ];
        let values = data
            .iter()
            .map(|row| row.iter().map(|&v| (v != 0).then_some(v)).collect())
            .collect();
        let alpha = krippendorff_alpha(&matrix(values), DistanceMetric::Nominal).unwrap();
        assert!((alpha - 0.743).abs() < 5e-4, "{alpha}");
    }

    #[test]
    fn larger_distance_lowers_alpha() {
        let base = vec![
            vec![Some(1), Some(2), Some(3), Some(4), Some(1)],
            vec![Some(1), Some(2), Some(3), Some(4), Some(1)],
        ];
        let mut near = base.clone();
        near[1][0] = Some(2);
        let mut far = base.clone();
        far[1][0] = Some(4);
        let a_near = krippendorff_alpha(&matrix(near), DistanceMetric::Absolute).unwrap();
        let a_far = krippendorff_alpha(&matrix(far), DistanceMetric::Absolute).unwrap();
        assert!(a_far <= a_near);
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<Option<u32>>>> {
        (2usize..6, 2usize..20).prop_flat_map(|(g, i)| {
            proptest::collection::vec(
                proptest::collection::vec(proptest::option::weighted(0.8, 1u32..5), i),
                g,
            )
        })
    }

    proptest! {
        #[test]
        fn matches_pair_enumeration(values in arb_matrix()) {
            let m = matrix(values.clone());
            for metric in [DistanceMetric::Absolute, DistanceMetric::Squared, DistanceMetric::Nominal] {
                if let Ok(alpha) = krippendorff_alpha(&m, metric) {
                    let oracle = alpha_by_pairs(&values, metric);
                    prop_assert!((alpha - oracle).abs() < 1e-10);
                    prop_assert!(alpha <= 1.0 + 1e-12);
                }
            }
        }

        #[test]
        fn invariant_to_permutation_and_empty_graders(values in arb_matrix(), shift in 0usize..5) {
            let m = matrix(values.clone());
            if let Ok(alpha) = krippendorff_alpha(&m, DistanceMetric::Absolute) {
                let mut rows = values.clone();
                rows.reverse();
                let n = rows[0].len();
                for row in rows.iter_mut() {
                    row.rotate_left(shift % n);
                }
                rows.push(vec![None; n]);
                let permuted = krippendorff_alpha(&matrix(rows), DistanceMetric::Absolute).unwrap();
                prop_assert!((alpha - permuted).abs() < 1e-12);
            }
        }
    }
}
