//! Wall-clock benchmarks for the three hot paths: a teacher-forced forward
//! pass, a full optimizer step (forward, backward, parameter update), and
//! beam-search decoding.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use micar_bench::{bench_model, probe_image};
use micar_core::data::vocab::SOS;
use micar_core::decode::generate_caption;
use micar_core::optim::{AdamW, AdamWConfig};
use micar_core::train::{train_step, Sample};
use micar_core::{Phase, Session};

fn forward_eval(c: &mut Criterion) {
    let mut model = bench_model();
    let image = probe_image(model.cfg.vision.in_channels, 32);
    let tokens = [SOS, 4, 5, 6, 7, 8];

    c.bench_function("forward_eval", |b| {
        b.iter(|| {
            let mut sess = Session::new(Phase::Eval, 7, 0);
            let out = model
                .forward(&mut sess, black_box(&image), black_box(&tokens))
                .expect("the forward pass is valid by construction");
            black_box(sess.tape.data(out.logits)[0])
        })
    });
}

fn optimizer_step(c: &mut Criterion) {
    let mut model = bench_model();
    let mut opt = AdamW::new(AdamWConfig::default());
    let image = probe_image(model.cfg.vision.in_channels, 32);
    let batch = [
        Sample { image: &image, input: vec![SOS, 4, 5, 6], target: vec![4, 5, 6, 7] },
        Sample { image: &image, input: vec![SOS, 8, 9], target: vec![8, 9, 10] },
    ];

    let mut step = 0;
    c.bench_function("train_step_batch2", |b| {
        b.iter(|| {
            step += 1;
            let metrics = train_step(&mut model, &mut opt, &batch, 7, step, 1.0)
                .expect("the step is valid by construction");
            black_box(metrics.total)
        })
    });
}

fn beam_decode(c: &mut Criterion) {
    let model = bench_model();
    let image = probe_image(model.cfg.vision.in_channels, 32);

    c.bench_function("beam_decode_w3", |b| {
        b.iter(|| {
            let ids = generate_caption(&model, black_box(&image), 3, 12, false)
                .expect("decoding is valid by construction");
            black_box(ids)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default()
        .sample_size(10)
        .warm_up_time(Duration::from_millis(300))
        .measurement_time(Duration::from_secs(2));
    targets = forward_eval, optimizer_step, beam_decode
}
criterion_main!(benches);
