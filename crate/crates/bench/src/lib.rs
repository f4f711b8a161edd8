//! Shared fixtures for the benchmarks.

use discgrade::fundus::{synthetic_disc, RasterImage};
use discgrade::logistic::DesignMatrix;
use discgrade::roc::ScoredCase;
use discgrade::scores::referable_score;
use discgrade::synth::{generate, CohortSpec};
use discgrade::GradeRecord;

/// Validation cases and panel log from a seeded synthetic cohort.
pub fn cohort(n_images: usize, seed: u64) -> (Vec<ScoredCase>, Vec<GradeRecord>) {
    let spec = CohortSpec {
        n_images,
        n_tuning: 50,
        seed,
        ..Default::default()
    };
    let c = generate(&spec).expect("default spec is valid");
    let cases = c
        .truth
        .iter()
        .zip(&c.outputs)
        .map(|(t, o)| ScoredCase::new(t.image_id.clone(), referable_score(o), t.refer).expect("score in [0, 1]"))
        .collect();
    (cases, c.panel_log)
}

/// Binary design with `p` predictors and a deterministic pseudo-random outcome.
pub fn design(n: usize, p: usize) -> DesignMatrix {
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| (next() & 1) as f64).collect())
        .collect();
    let y = x
        .iter()
        .map(|row| {
            let eta = -0.5 + row.iter().enumerate().map(|(j, v)| v * (0.3 + 0.2 * j as f64)).sum::<f64>();
            (next() as f64 / u64::MAX as f64) < 1.0 / (1.0 + (-eta).exp())
        })
        .collect();
    DesignMatrix::new((0..p).map(|j| format!("x{j}")).collect(), x, y).expect("consistent shape")
}

/// Disc of the given diameter on a canvas 20% wider than it.
pub fn disc(diameter: f64) -> RasterImage {
    let side = (diameter * 1.2).ceil() as u32;
    let c = f64::from(side) / 2.0;
    synthetic_disc(side, side, (c, c), diameter, [220, 120, 60], [0, 0, 0])
}
