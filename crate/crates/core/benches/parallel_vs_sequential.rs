//! Data-parallel paths against their sequential fallbacks.

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use consensus_mapping::engine::{Engine, EngineOptions};
use consensus_mapping::harness::{preset, MappingObjective, RunOptions};
use consensus_mapping::metrics::extract_zero_set;
use consensus_mapping::network_sim::{topology, WireLayout};
use consensus_mapping::neural_map::NeuralMap;

fn engine(parallel: bool) -> Engine<MappingObjective> {
    let cfg = preset("agent-scaling").unwrap();
    let n = 6;
    let map = Arc::new(NeuralMap::new(cfg.grid.clone(), cfg.decoder).unwrap());
    let scene = Arc::new(cfg.scene.clone());
    let objectives = cfg
        .trajectories_for(n)
        .into_iter()
        .map(|t| MappingObjective::new(map.clone(), cfg.loss.clone(), scene.clone(), cfg.sensor.clone(), t))
        .collect();
    let opts = EngineOptions {
        seed: 1,
        trial: 0,
        parallel,
        layout: WireLayout {
            levels: cfg.grid.levels() as u32,
            feature_dim: cfg.grid.feature_dim as u32,
        },
    };
    let graph = topology(cfg.network.topology, n, cfg.network.policy).unwrap();
    let mut e = Engine::new(cfg.consensus.clone(), graph, objectives, map.zeros(), opts).unwrap();
    e.run(20).unwrap();
    e
}

fn engine_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("engine_step_6_agents");
    for parallel in [false, true] {
        let mut e = engine(parallel);
        group.bench_function(BenchmarkId::from_parameter(mode(parallel)), |b| {
            b.iter(|| e.step().unwrap())
        });
    }
    group.finish();
}

fn zero_set(c: &mut Criterion) {
    let scene = preset("success-sweep").unwrap().scene;
    let mut group = c.benchmark_group("zero_set_256");
    for parallel in [false, true] {
        group.bench_function(BenchmarkId::from_parameter(mode(parallel)), |b| {
            b.iter(|| extract_zero_set(|p| scene.gt_sdf(p), scene.bounds, black_box(256), 500, parallel))
        });
    }
    group.finish();
}

fn trials(c: &mut Criterion) {
    let mut cfg = preset("split-room").unwrap();
    cfg.iterations = 20;
    cfg.trials = 4;
    cfg.eval.every = 20;
    let mut group = c.benchmark_group("experiment_4_trials");
    group.sample_size(10);
    for parallel in [false, true] {
        let opts = RunOptions {
            parallel_trials: parallel,
            parallel_agents: false,
        };
        group.bench_function(BenchmarkId::from_parameter(mode(parallel)), |b| {
            b.iter(|| consensus_mapping::harness::run_experiment(&cfg, opts).unwrap())
        });
    }
    group.finish();
}

fn mode(parallel: bool) -> &'static str {
    if parallel {
        "parallel"
    } else {
        "sequential"
    }
}

criterion_group!(benches, engine_step, zero_set, trials);
criterion_main!(benches);
