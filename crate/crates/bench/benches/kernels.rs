use std::rc::Rc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use misr_core::data::{batch_scenes, synthesize_dataset, SynthParams};
use misr_core::metrics::{cpsnr, cssim};
use misr_core::model::{fusion::joint_layout, FrameBiasMode, ModelConfig};
use misr_core::ops::{attention_tensor, conv2d_tensor, fft2_real, BiasLayout};
use misr_core::train::{TrainConfig, Trainer};
use misr_core::{Tape, Tensor};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("conv2d_3x3");
    for &side in &[16usize, 32] {
        let x = random(&[4, 16, side, side], &mut rng);
        let k = random(&[16, 16, 3, 3], &mut rng);
        group.throughput(Throughput::Elements((4 * side * side) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| b.iter(|| conv2d_tensor(&x, &k, None, 1, 1).unwrap()));
    }
    group.finish();
}

fn bench_fft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("fft2");
    for &side in &[32usize, 48, 64] {
        let x = random(&[8, side, side], &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(side), &side, |b, _| b.iter(|| fft2_real(&x).unwrap()));
    }
    group.finish();
}

fn bench_joint_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut group = c.benchmark_group("joint_attention");
    group.sample_size(10);
    for &side in &[8usize, 16] {
        let layout = Rc::new(BiasLayout::Relative(joint_layout(4, side, side, Some(1), 32, FrameBiasMode::FullSequence, 4).unwrap()));
        let x = random(&[1, layout.tokens(), 16], &mut rng);
        let table = random(&[2, layout.entries()], &mut rng);
        group.throughput(Throughput::Elements(layout.tokens() as u64));
        group.bench_with_input(BenchmarkId::new("forward", side), &side, |b, _| {
            b.iter(|| attention_tensor(&x, &x, &x, 2, Some((&layout, &table))).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", side), &side, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let q = tape.param(x.clone());
                let t = tape.param(table.clone());
                let o = q.attention(q, q, 2, Some((t, layout.clone()))).unwrap();
                tape.backward(o.sum().unwrap()).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let hr = Tensor::from_fn(&[1, 96, 96], |_| rng.gen_range(0.0..1.0f32));
    let sr = Tensor::from_fn(&[1, 96, 96], |i| (hr.data()[i] + 0.01).min(1.0));
    let sm = vec![true; 96 * 96];
    c.bench_function("cpsnr_96", |b| b.iter(|| cpsnr(&sr, &hr, &sm).unwrap()));
    c.bench_function("cssim_96", |b| b.iter(|| cssim(&sr, &hr, &sm).unwrap()));
}

fn bench_train_step(c: &mut Criterion) {
    let scenes = synthesize_dataset(2, 16, &SynthParams { frames: 4, ..SynthParams::default() }).unwrap();
    let model = ModelConfig { bias_extent: 16, ..ModelConfig::desk() };
    let mut trainer = Trainer::new(&model, &TrainConfig { batch_size: 2, crop: Some(16), ..TrainConfig::desk() }).unwrap();
    let batch = batch_scenes(&scenes, 4, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function("desk_batch2_16px", |b| b.iter(|| trainer.step(&batch).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_conv, bench_fft, bench_joint_attention, bench_metrics, bench_train_step);
criterion_main!(benches);
