use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fewshot_tokens::eval::{evaluate, EvalConfig};
use fewshot_tokens::synth::DistractorSpec;
use fewshot_tokens::{ClassifierConfig, Execution};

fn bench_evaluate(c: &mut Criterion) {
    let spec = DistractorSpec::default();
    let data = spec.generate(0);
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (way, shot) in [(5, 1), (5, 5)] {
        let cfg = EvalConfig {
            episodes: 32,
            classifier: ClassifierConfig {
                mask_window: 3,
                ..ClassifierConfig::for_dim(spec.dim)
            },
            ..EvalConfig::new(way, shot, ClassifierConfig::for_dim(spec.dim))
        };
        for (name, exec) in [
            ("sequential", Execution::Sequential),
            ("parallel", Execution::Parallel),
        ] {
            group.bench_with_input(
                BenchmarkId::new(name, format!("{way}w{shot}s")),
                &cfg,
                |b, cfg| b.iter(|| evaluate(&data, cfg, exec).unwrap()),
            );
        }
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate);
criterion_main!(benches);
