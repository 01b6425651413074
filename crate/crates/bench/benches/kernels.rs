use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use speechssl::ctc::ctc_loss;
use speechssl::features::{log_mel, FeaturizerConfig};
use speechssl::tensor::ConvPadding;
use speechssl::{Backbone, DType, ModelConfig, ModelInput, Tape};
use speechssl_bench::{features, tensor, waveform};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 64, 128] {
        let (a, b) = (tensor(&[n, n], 1), tensor(&[n, n], 2));
        group.bench_with_input(BenchmarkId::new("fwd_bwd", n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new(DType::F32);
                let (x, y) = (tape.leaf(&a), tape.leaf(&b));
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z).unwrap();
                tape.backward(s).unwrap();
                black_box(tape.value(s).unwrap()[0])
            })
        });
    }
    group.finish();
}

fn softmax(c: &mut Criterion) {
    let a = tensor(&[128, 128], 3);
    c.bench_function("softmax_128x128", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(DType::F32);
            let x = tape.leaf(&a);
            let y = tape.softmax(x, 1, None).unwrap();
            black_box(tape.value(y).unwrap()[0])
        })
    });
}

fn conv1d(c: &mut Criterion) {
    let (x, k) = (tensor(&[400, 8], 4), tensor(&[3, 8, 64], 5));
    c.bench_function("conv1d_400x8_to_64", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(DType::F32);
            let (xv, kv) = (tape.leaf(&x), tape.leaf(&k));
            let y = tape.conv1d(xv, kv, 2, ConvPadding::Same).unwrap();
            black_box(tape.value(y).unwrap()[0])
        })
    });
}

fn ctc(c: &mut Criterion) {
    let logits = tensor(&[100, 32], 6);
    let target: Vec<usize> = (0..30).map(|i| 1 + i % 31).collect();
    c.bench_function("ctc_loss_T100_V32_L30", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(DType::F64);
            let x = tape.leaf(&logits);
            let lp = tape.log_softmax(x, 1).unwrap();
            let loss = ctc_loss(&mut tape, lp, &target, 100).unwrap();
            tape.backward(loss).unwrap();
            black_box(tape.value(loss).unwrap()[0])
        })
    });
}

fn featurize(c: &mut Criterion) {
    let w = waveform();
    let cfg = FeaturizerConfig::default();
    c.bench_function("log_mel_1s", |bench| {
        bench.iter(|| black_box(log_mel(&w, &cfg).unwrap()))
    });
}

fn forward(c: &mut Criterion) {
    let cfg = ModelConfig::toy();
    let model = Backbone::build(&cfg, 0).unwrap();
    let input = ModelInput::from_features(&features(200, cfg.feature_dim, 7), cfg.dtype);
    c.bench_function("toy_backbone_forward_200", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new(cfg.dtype);
            let h = model.view().forward(&mut tape, &input, None).unwrap();
            black_box(tape.value(h).unwrap()[0])
        })
    });
}

criterion_group!(benches, matmul, softmax, conv1d, ctc, featurize, forward);
criterion_main!(benches);
