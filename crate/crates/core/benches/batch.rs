use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pointer_gpt::cli::copy_task;
use pointer_gpt::model::{HeadKind, ModelConfig, ModelParams};
use pointer_gpt::par::Execution;
use pointer_gpt::tokenizer::{EncodedExample, Vocabulary};
use pointer_gpt::trainer::evaluate_loss;

fn setup(n: usize) -> (ModelParams, Vec<EncodedExample>) {
    let corpus = copy_task(n, 1);
    let texts: Vec<&str> = corpus
        .records
        .iter()
        .flat_map(|r| [r.source.as_str(), r.summary.as_str()])
        .collect();
    let vocab = Vocabulary::build(&texts, corpus.vocab_max_size, 1).unwrap();
    let data = corpus
        .records
        .iter()
        .map(|r| EncodedExample::encode(&r.source, &r.summary, &vocab))
        .collect();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 64,
        n_heads: 2,
        n_layers: 2,
        d_ff: 128,
        max_seq_len: 64,
        dropout_rate: 0.0,
        seed: 0,
        head: HeadKind::Pointer,
    };
    (ModelParams::init(&cfg).unwrap(), data)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)]
}

fn batch_gradients(c: &mut Criterion) {
    let (params, data) = setup(16);
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                let grads = exec.map(data.len(), |i| params.loss_and_grads(&data[i], None).unwrap());
                black_box(grads)
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (params, data) = setup(64);
    let mut group = c.benchmark_group("evaluate_loss");
    group.sample_size(10);
    for (name, exec) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(evaluate_loss(&params, &data, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradients, evaluation);
criterion_main!(benches);
