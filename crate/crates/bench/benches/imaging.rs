use criterion::{criterion_group, criterion_main, Criterion};
use discgrade::fundus::{augment, detect_mask, normalize_scale, AugmentParams, FlipMode};
use discgrade_bench::disc;
use std::hint::black_box;

fn bench_imaging(c: &mut Criterion) {
    for d in [300.0, 1200.0] {
        let img = disc(d);
        c.bench_function(&format!("detect_mask_d{d}"), |b| b.iter(|| detect_mask(black_box(&img)).unwrap()));
        let mask = detect_mask(&img).unwrap();
        c.bench_function(&format!("normalize_scale_d{d}"), |b| {
            b.iter(|| normalize_scale(black_box(&img), &mask).unwrap())
        });
    }
    let norm = {
        let img = disc(587.0);
        normalize_scale(&img, &detect_mask(&img).unwrap()).unwrap()
    };
    // non-identity so every stage runs
    let p = AugmentParams {
        brightness_delta: 0.05,
        saturation_factor: 1.2,
        hue_delta: 0.02,
        contrast_factor: 1.3,
        flips: FlipMode::Random,
    };
    c.bench_function("augment_587", |b| b.iter(|| augment(black_box(&norm), &p, 7).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_imaging
}
criterion_main!(benches);
