//! Sequential against parallel execution for the two batch workloads.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use craftloop::grammar::GeneratorGrammar;
use craftloop::par::Exec;
use craftloop::parser::ParserModel;
use craftloop::pipeline::vision_accuracy;
use craftloop::vision::scene::{held_out, SceneConfig};
use craftloop::vision::{SegConfig, SegModel};

fn parser_evaluate(c: &mut Criterion) {
    let grammar = GeneratorGrammar::default();
    let model = ParserModel::new().train(&grammar.generate(500, u32::MAX, 1), 0).unwrap();
    let test = grammar.generate(300, u32::MAX, 2);
    let mut group = c.benchmark_group("parser_evaluate");
    for exec in Exec::available() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| b.iter(|| model.evaluate(&test, exec)));
    }
    group.finish();
}

fn vision_predict(c: &mut Criterion) {
    let (pos, neg) = held_out(&SceneConfig::default(), 20, 2);
    let data: Vec<_> = pos.into_iter().chain(neg).collect();
    let model = SegModel::init(SegConfig::default(), 3);
    let mut group = c.benchmark_group("vision_predict");
    group.sample_size(10);
    for exec in Exec::available() {
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| b.iter(|| vision_accuracy(&model, &data, exec)));
    }
    group.finish();
}

criterion_group!(benches, parser_evaluate, vision_predict);
criterion_main!(benches);
