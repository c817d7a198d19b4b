use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use stereo_sdr::bench::{default_rig, generate_scene, synthetic_arm, CameraPlacement, ConfigSampler};
use stereo_sdr::objective::{ObjectiveConfig, StereoProblem};
use stereo_sdr::par;
use stereo_sdr::pose::PoseParam;
use stereo_sdr::swarm::{cso_initialize, SwarmConfig};

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn objective(c: &mut Criterion) {
    let arm = synthetic_arm();
    let rig = default_rig();
    let gt = CameraPlacement::default().pose().unwrap();
    let scene = generate_scene(&arm, &rig, &gt, 12, &ConfigSampler::default(), 1).unwrap();
    let prob = StereoProblem::new(&arm, &scene.configs, &scene.masks, &rig, &ObjectiveConfig::default()).unwrap();
    let pose = PoseParam::from_isometry(&gt);
    let mut group = c.benchmark_group("objective_value_and_grad");
    group.sample_size(10);
    for (name, sequential) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(sequential);
            b.iter(|| black_box(prob.value_and_grad(black_box(&pose)).unwrap()));
        });
    }
    group.finish();
    par::set_sequential(false);
}

fn swarm(c: &mut Criterion) {
    let arm = synthetic_arm();
    let rig = default_rig();
    let gt = CameraPlacement::default().pose().unwrap();
    let scene = generate_scene(&arm, &rig, &gt, 6, &ConfigSampler::default(), 1).unwrap();
    let cfg = SwarmConfig {
        n_particles: 400,
        iterations: 3,
        ..Default::default()
    };
    let mut group = c.benchmark_group("swarm_400x3");
    group.sample_size(10);
    for (name, sequential) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_sequential(sequential);
            b.iter(|| black_box(cso_initialize(&arm, &scene.configs, &scene.masks, &rig, &cfg, 0).unwrap()));
        });
    }
    group.finish();
    par::set_sequential(false);
}

criterion_group!(benches, objective, swarm);
criterion_main!(benches);
