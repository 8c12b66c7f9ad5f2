use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use freqlab::model::{Model, ModelConfig};
use freqlab::roae::RoaeConfig;
use freqlab::tensor::kernels::{gemm_seq, Layout};

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &n in &[32usize, 128, 256] {
        let a: Vec<f32> = (0..n * n).map(|i| (i as f32 * 0.01).sin()).collect();
        let b: Vec<f32> = (0..n * n).map(|i| (i as f32 * 0.02).cos()).collect();
        let mut out = vec![0.0f32; n * n];
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, &n| {
            bench.iter(|| gemm_seq(Layout::NN, (n, n, n), &a, &b, &mut out))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("rayon", n), &n, |bench, &n| {
            bench.iter(|| freqlab::tensor::kernels::gemm_par(Layout::NN, (n, n, n), &a, &b, &mut out))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::<f32>::new(ModelConfig::toy(), &mut rng).unwrap();
    model
        .attach_roae(RoaeConfig { rank: 16, ..RoaeConfig::default() }, &mut rng)
        .unwrap();
    model.freeze_base();
    let (batch, seq) = (16, 64);
    let tokens: Vec<usize> = (0..batch * seq).map(|i| (i * 31 + 7) % 64).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|i| (i * 17 + 3) % 64).collect();

    // Forward + backward on the toy model; `gemm` picks the rayon path for
    // the larger products when the `parallel` feature is on.
    let name = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };
    c.bench_function(&format!("toy_forward_backward/{name}"), |bench| {
        bench.iter(|| {
            model.store.zero_grad();
            model.loss_and_backward(&tokens, &targets, None, batch, seq).unwrap()
        })
    });
}

criterion_group!(benches, matmul, train_step);
criterion_main!(benches);
