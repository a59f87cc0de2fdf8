use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lammvit::data_synth::generate;
use lammvit::model::{Model, ModelConfig, PreparedSample};
use lammvit::par::Execution;
use lammvit::training::{batch_gradients, predict, LossTerms};

fn setup(n: usize) -> (Model, Vec<PreparedSample>, Vec<bool>) {
    let model = Model::new(ModelConfig::toy(), 0).expect("toy model");
    let records = generate(n, 0.5, 11, model.config().image_size).expect("corpus");
    let samples = records
        .iter()
        .map(|r| model.prepare(&r.image, &r.landmarks).expect("prepare"))
        .collect();
    let labels = records.iter().map(|r| r.label).collect();
    (model, samples, labels)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn bench_gradients(c: &mut Criterion) {
    let (model, samples, labels) = setup(16);
    let refs: Vec<&PreparedSample> = samples.iter().collect();
    let mut group = c.benchmark_group("batch_gradients_toy_16");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                batch_gradients(&model.arch, &model.store, black_box(&refs), &labels, LossTerms::Combined, exec)
                    .expect("gradients")
            })
        });
    }
    group.finish();
}

fn bench_predict(c: &mut Criterion) {
    let (model, samples, _) = setup(32);
    let mut group = c.benchmark_group("predict_toy_32");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| predict(&model, black_box(&samples), exec).expect("predict"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_predict);
criterion_main!(benches);
