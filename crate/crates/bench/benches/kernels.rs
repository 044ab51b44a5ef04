use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use pixsim::simreg::{pixel_similarity, threshold_target, SimilarityTarget};
use pixsim::analysis::{fourier_power, radial_spectrum};
use pixsim_bench::{bench_set, desk_net, full_step, random_batch};

fn bench_forward(c: &mut Criterion) {
    let net = desk_net(1);
    let batch = random_batch(64, 1, 28, 28, 3);
    c.bench_function("desk_forward_b64", |b| {
        b.iter(|| black_box(net.forward(black_box(&batch)).unwrap()))
    });
}

fn bench_training_step(c: &mut Criterion) {
    let net = desk_net(1);
    let batch = random_batch(64, 1, 28, 28, 3);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    let reg = random_batch(32, 1, 28, 28, 5);
    let mut target = SimilarityTarget::empty(32, 1e-6).unwrap();
    for p in 0..16 {
        target.set_pair(p, 16 + p, [1i8, 0, -1][p % 3], true).unwrap();
    }
    c.bench_function("desk_train_step_b64_k16", |b| {
        b.iter(|| black_box(full_step(&net, &batch, &labels, &reg, &target)))
    });
}

fn bench_pixel_similarity(c: &mut Criterion) {
    let imgs = random_batch(256, 1, 28, 28, 9);
    c.bench_function("pixel_similarity_n256", |b| {
        b.iter(|| black_box(pixel_similarity(black_box(&imgs)).unwrap()))
    });
    let s = pixel_similarity(&imgs).unwrap();
    c.bench_function("threshold_target_n256", |b| {
        b.iter(|| black_box(threshold_target(black_box(&s), 0.2, 1e-6).unwrap()))
    });
}

fn bench_fourier(c: &mut Criterion) {
    let set = bench_set(1);
    let img = pixsim::tensor::Tensor::new(
        vec![16, 16],
        set.image(0).to_vec(),
    )
    .unwrap();
    c.bench_function("fourier_power_16x16", |b| {
        b.iter(|| black_box(fourier_power(black_box(&img)).unwrap()))
    });
    let power = fourier_power(&img).unwrap();
    c.bench_function("radial_spectrum_16x16", |b| {
        b.iter(|| black_box(radial_spectrum(black_box(&power))))
    });
}

criterion_group!(benches, bench_forward, bench_training_step, bench_pixel_similarity, bench_fourier);
criterion_main!(benches);
