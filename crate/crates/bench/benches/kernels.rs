use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waferssl::losses::supcon_loss;
use waferssl::model::{backward, forward, OutputGrads};
use waferssl::{init_params, smote_oversample, LossConfig, ModelConfig, NUM_CLASSES};

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn network(c: &mut Criterion) {
    let cfg = ModelConfig {
        input_height: 24,
        input_width: 24,
        ..ModelConfig::default()
    };
    let p = init_params(&cfg, 0).unwrap();
    let batch = 32;
    let x = uniform(batch * cfg.input_len(), 1);
    let grads = OutputGrads {
        logits: Some(uniform(batch * NUM_CLASSES, 2)),
        projections: Some(uniform(batch * cfg.proj_dim, 3)),
        embeddings: None,
    };

    let mut g = c.benchmark_group("network_24x24_b32");
    g.sample_size(20);
    g.bench_function("forward_eval", |b| b.iter(|| forward(&p, black_box(&x), batch, false).unwrap()));
    g.bench_function("forward_backward", |b| {
        b.iter(|| {
            let (_, cache) = forward(&p, black_box(&x), batch, true).unwrap();
            backward(&p, &cache, &grads).unwrap()
        })
    });
    g.finish();
}

fn supcon(c: &mut Criterion) {
    let mut g = c.benchmark_group("supcon");
    let cfg = LossConfig::default();
    for batch in [16, 64, 256] {
        let dim = 64;
        let z = uniform(batch * dim, 4);
        let labels: Vec<usize> = (0..batch).map(|i| i % NUM_CLASSES).collect();
        g.bench_with_input(BenchmarkId::from_parameter(batch), &batch, |b, _| {
            b.iter(|| supcon_loss(black_box(&z), dim, &labels, &cfg).unwrap())
        });
    }
    g.finish();
}

fn smote(c: &mut Criterion) {
    let mut g = c.benchmark_group("smote_576d");
    for n in [50, 200] {
        let samples: Vec<Vec<f64>> = (0..n).map(|i| uniform(576, 10 + i as u64)).collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| smote_oversample(black_box(&samples), 500, 5, 0).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, network, supcon, smote);
criterion_main!(benches);
