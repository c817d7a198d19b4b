//! Alone in its binary: the render counters are process-wide.

use stereo_sdr::bench::{default_rig, generate_scene, synthetic_arm, CameraPlacement, ConfigSampler};
use stereo_sdr::render::{configured_mesh, render_counters};
use stereo_sdr::swarm::{cso_initialize, SwarmConfig};

#[test]
fn swarm_renders_only_simplified_meshes() {
    let arm = synthetic_arm();
    let rig = default_rig().resized(320, 180);
    let gt = CameraPlacement::default().pose().unwrap();
    let scene = generate_scene(&arm, &rig, &gt, 3, &ConfigSampler::default(), 2).unwrap();
    let full: Vec<usize> = scene.configs.iter().map(|q| configured_mesh(&arm, q).unwrap().face_count()).collect();
    let cfg = SwarmConfig {
        n_particles: 50,
        iterations: 4,
        resolution: (80, 45),
        ..Default::default()
    };
    let (renders0, tris0) = render_counters();
    let out = cso_initialize(&arm, &scene.configs, &scene.masks, &rig, &cfg, 1).unwrap();
    let (renders1, tris1) = render_counters();
    let renders = renders1 - renders0;
    let tris = tris1 - tris0;
    // every render rasterised one decimated configuration mesh
    let per_particle: u64 = out.fitness_triangles.iter().map(|&t| 2 * t as u64).sum();
    let evaluations = (cfg.n_particles * (cfg.iterations + 1)) as u64;
    assert!(renders > 0);
    assert!(tris <= per_particle * evaluations, "{tris} triangles for {renders} renders");
    for (simple, full) in out.fitness_triangles.iter().zip(&full) {
        assert!(simple * 10 < *full, "{simple} of {full} triangles");
    }
    let max_simple = *out.fitness_triangles.iter().max().unwrap() as u64;
    assert!(tris <= renders * max_simple);
}
