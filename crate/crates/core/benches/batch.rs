use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempr::dataio::{generate_synthetic, SynthConfig};
use tempr::exec::ExecMode;
use tempr::model::{ModelConfig, TemprModel};
use tempr::trainer::{batch_gradients, Sample};

fn samples(model: &TemprModel, count: usize) -> Vec<Sample> {
    let ds = generate_synthetic(&SynthConfig::new(4, count.div_ceil(4), 16, 16, 16, 0)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    ds.clips
        .iter()
        .take(count)
        .map(|clip| {
            let (_, inputs) = model.prepare_inputs(clip, 0.7, &mut rng).unwrap();
            Sample { inputs, label: clip.label }
        })
        .collect()
}

fn bench(c: &mut Criterion) {
    let model = TemprModel::new(ModelConfig::desk(4, 1), 0).unwrap();
    let batch = samples(&model, 8);
    let modes = [
        ("sequential", ExecMode::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", ExecMode::Parallel),
    ];

    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, mode) in modes {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &mode| {
            b.iter(|| batch_gradients(&model, &batch, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
