//! Benchmarks for the hot paths of a run: matrix multiplication, the full
//! encoder forward pass, a training step, and trial scoring.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use petforge_core::backbone::BackboneConfig;
use petforge_core::data::seeded_rng;
use petforge_core::metrics::{self, DcfParams};
use petforge_core::model::ModelConfig;
use petforge_core::params::Binder;
use petforge_core::pet::{ForwardOpts, Method, MethodSpec};
use petforge_core::sv::BackendConfig;
use petforge_core::Tensor;
use rand::Rng;

fn desk_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::desk(),
        method: MethodSpec::desk(Method::Unipet),
        backend: BackendConfig::desk(),
        num_speakers: 20,
    }
}

fn random_wave(len: usize, seed: u64) -> Tensor<f32> {
    let mut rng = seeded_rng(seed, 60, 0);
    Tensor::vector((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
}

fn bench_matmul(c: &mut Criterion) {
    let mut rng = seeded_rng(1, 61, 0);
    let a = Tensor::<f32>::new(
        vec![78, 64],
        (0..78 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let b = Tensor::<f32>::new(
        vec![64, 256],
        (0..64 * 256).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    c.bench_function("matmul_78x64x256_fwd_bwd", |bench| {
        bench.iter_batched(
            petforge_core::Tape::<f32>::new,
            |mut tape| {
                let va = tape.leaf(a.clone());
                let vb = tape.leaf(b.clone());
                let y = tape.matmul(va, vb).unwrap();
                let s = tape.sum_all(y);
                tape.backward(s).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_forward(c: &mut Criterion) {
    let model = desk_model();
    let reg = model.init_registry::<f32>(7).unwrap();
    let wave = random_wave(3200, 2);
    c.bench_function("desk_embedding_forward", |bench| {
        bench.iter(|| {
            let mut b = Binder::new(&reg, false);
            let w = b.tape.constant(wave.clone());
            let e = model.embedding(&mut b, w, ForwardOpts::default()).unwrap();
            b.tape.value(e).data()[0]
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let model = desk_model();
    let reg = model.init_registry::<f32>(7).unwrap();
    let waves: Vec<Tensor<f32>> = (0..4).map(|i| random_wave(3200, 10 + i)).collect();
    let labels = [0usize, 3, 7, 11];
    c.bench_function("desk_unipet_loss_and_grads_batch4", |bench| {
        bench.iter(|| {
            model
                .loss_and_grads(&reg, &waves, &labels, ForwardOpts::default())
                .unwrap()
                .0
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let mut rng = seeded_rng(3, 62, 0);
    let n = 10_000;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    c.bench_function("eer_mindcf_10k_trials", |bench| {
        bench.iter(|| {
            let eer = metrics::compute_eer(&scores, &labels).unwrap();
            let dcf = metrics::compute_min_dcf(&scores, &labels, &DcfParams::default()).unwrap();
            eer + dcf
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_matmul, bench_forward, bench_train_step, bench_metrics
}
criterion_main!(benches);
