use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use latentgrade::model::{build_dae, train_dae, DaeConfig, TrainOptions};
use latentgrade::synth::{generate_dataset, DatasetSpec, Split};
use latentgrade::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn spec(n: usize) -> DatasetSpec {
    DatasetSpec {
        n_train: n,
        n_val: 0,
        n_test: 0,
        ..DatasetSpec::default()
    }
}

fn images(n: usize) -> Vec<Vec<f32>> {
    generate_dataset(&spec(n), Exec::Parallel)
        .expect("dataset")
        .split(Split::Train)
        .map(|(_, i)| i.pixels.clone())
        .collect()
}

fn dataset_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_dataset_256");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&spec(256), exec).expect("dataset"))
        });
    }
    g.finish();
}

fn training_steps(c: &mut Criterion) {
    let imgs = images(64);
    let cfg = DaeConfig {
        batch_size: 32,
        total_samples: 64,
        ..DaeConfig::desk()
    };
    let mut g = c.benchmark_group("train_two_batches_of_32");
    g.sample_size(10);
    for (name, exec) in MODES {
        let opts = TrainOptions {
            exec,
            val_limit: 0,
            ..TrainOptions::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_dae(&imgs, &[], &cfg, &opts).expect("training"))
        });
    }
    g.finish();
}

fn batch_encoding(c: &mut Criterion) {
    let imgs = images(128);
    let model = build_dae(DaeConfig::desk(), 0).expect("model");
    let mut g = c.benchmark_group("encode_semantic_128");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec.try_map(&imgs, |img| model.encode_semantic(img)).expect("encode"))
        });
    }
    g.finish();
}

criterion_group!(benches, dataset_generation, training_steps, batch_encoding);
criterion_main!(benches);
