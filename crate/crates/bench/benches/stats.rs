use criterion::{criterion_group, criterion_main, Criterion};
use discgrade::adjudication::{adjudicate, MedianPolicy, ResolveMode};
use discgrade::agreement::{agreement_table, DistanceMetric, GradeSource};
use discgrade::logistic::{fit_logistic, FitOptions};
use discgrade::roc::{auc_with_ci, roc, select_operating_points};
use discgrade::stats::{clopper_pearson, BootstrapConfig};
use discgrade_bench::{cohort, design};
use std::hint::black_box;

fn bench_stats(c: &mut Criterion) {
    let (cases, log) = cohort(2000, 1);

    c.bench_function("roc_auc_2000", |b| b.iter(|| roc(black_box(&cases)).unwrap().auc));
    c.bench_function("auc_bootstrap_2000x200", |b| {
        let cfg = BootstrapConfig {
            n_resamples: 200,
            ..Default::default()
        };
        b.iter(|| auc_with_ci(black_box(&cases), &cfg).unwrap())
    });
    c.bench_function("operating_points_2000", |b| {
        b.iter(|| select_operating_points(black_box(&cases), 0.9, 0.95).unwrap())
    });
    c.bench_function("clopper_pearson_n1000", |b| b.iter(|| clopper_pearson(black_box(613), 1000, 0.95).unwrap()));
    c.bench_function("adjudicate_2000", |b| {
        b.iter(|| adjudicate(black_box(&log), ResolveMode::TwoRound, MedianPolicy::default()).unwrap())
    });
    c.bench_function("agreement_table_2000", |b| {
        b.iter(|| agreement_table(black_box(&log), DistanceMetric::Absolute, GradeSource::Round2Latest))
    });
    let d = design(5000, 11);
    c.bench_function("logistic_5000x11", |b| b.iter(|| fit_logistic(black_box(&d), &FitOptions::default()).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench_stats
}
criterion_main!(benches);
