use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elastic_vit::data::{synth_shapes_with, DatasetSpec};
use elastic_vit::model::{
    batch_step, evaluate, EvalSpec, ModelConfig, TrainConfig, TrainState,
};
use elastic_vit::par::Exec;
use elastic_vit::perturb::{Dropout, PerturbConfig};
use elastic_vit::sampling::{EdgeParams, Sampler};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn model() -> ModelConfig {
    ModelConfig {
        r: 8,
        channels: 1,
        dim: 32,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        classes: 4,
        dropout: 0.0,
        pe_base: 10_000.0,
    }
}

fn bench_generation(c: &mut Criterion) {
    let spec = DatasetSpec::new(4, 256, 64, 1);
    let mut g = c.benchmark_group("synth_shapes_256");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| synth_shapes_with(&spec, exec).unwrap())
        });
    }
    g.finish();
}

fn bench_eval(c: &mut Criterion) {
    let data = synth_shapes_with(&DatasetSpec::new(4, 128, 64, 2), Exec::Parallel).unwrap();
    let state = TrainState::<f32>::new(model(), &TrainConfig::default()).unwrap();
    let specs = [
        ("grid_perturbed", EvalSpec::new(
            Sampler::Grid,
            PerturbConfig::new(0.5, 2.0, 0.5, Dropout::Fraction(0.5)),
        )),
        ("edge_64", EvalSpec::new(
            Sampler::Edge {
                tokens: 64,
                params: EdgeParams::default(),
            },
            PerturbConfig::identity(),
        )),
    ];
    for (label, spec) in &specs {
        let mut g = c.benchmark_group(format!("evaluate_128_{label}"));
        g.sample_size(10);
        for (name, exec) in MODES {
            g.bench_function(BenchmarkId::from_parameter(name), |b| {
                b.iter(|| evaluate(&state.params, &data, spec, 0, exec).unwrap())
            });
        }
        g.finish();
    }
}

fn bench_train_step(c: &mut Criterion) {
    let data = synth_shapes_with(&DatasetSpec::new(4, 64, 64, 3), Exec::Parallel).unwrap();
    let indices: Vec<usize> = (0..64).collect();
    let cfg = TrainConfig {
        elastic_fraction: 1.0,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("elastic_batch_step_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        let mut state = TrainState::<f32>::new(model(), &cfg).unwrap();
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_step(&mut state, &data, &indices, &cfg, 1e-3, 7, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_generation, bench_eval, bench_train_step);
criterion_main!(benches);
