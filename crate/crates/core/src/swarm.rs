//! Camera swarm optimisation: a particle swarm over virtual camera
//! placements (eye + look-at centre) used to initialise the pose refinement.
//!
//! Each particle is a camera looking from its eye at its centre with roll
//! fixed by an up hint. Fitness is the stereo objective evaluated with hard
//! renders of decimated meshes at a reduced resolution; lower is better.

use std::io::Write;
use std::path::Path;

use nalgebra::{Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, UnitBall, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::camera::StereoRig;
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};
use crate::mesh::simplify_mesh;
use crate::objective::{LossConfig, LossKind, ObjectiveConfig, StereoMasks, StereoProblem};
use crate::par;
use crate::pose::{look_at, PoseParam};
use crate::render::configured_mesh;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwarmConfig {
    pub n_particles: usize,
    /// Inner and outer radius of the hollow sphere of eyes about the robot base, metres.
    pub eye_shell: (f64, f64),
    /// Radius of the ball of look-at centres about the robot base, metres.
    pub centre_sphere: f64,
    pub inertia: f64,
    pub cognitive: f64,
    pub social: f64,
    pub iterations: usize,
    /// Face fraction kept when decimating the meshes for fitness renders.
    pub mesh_fraction: f64,
    /// Fitness render resolution (both views).
    pub resolution: (usize, usize),
    pub top_k: usize,
    /// Gravity-up hint in the robot base frame; fixes the camera roll.
    pub up: [f64; 3],
}

impl Default for SwarmConfig {
    fn default() -> Self {
        SwarmConfig {
            n_particles: 2000,
            eye_shell: (0.5, 4.0),
            centre_sphere: 0.8,
            inertia: 0.72,
            cognitive: 1.49,
            social: 1.49,
            iterations: 60,
            mesh_fraction: 0.05,
            resolution: (160, 90),
            top_k: 5,
            up: [0.0, 0.0, 1.0],
        }
    }
}

impl SwarmConfig {
    pub fn validate(&self) -> Result<()> {
        let (ri, ro) = self.eye_shell;
        if !(ri > 0.0 && ri < ro && ro.is_finite()) {
            return Err(Error::InvalidConfig(format!("eye shell needs 0 < r_inner < r_outer, got ({ri}, {ro})")));
        }
        if !(self.centre_sphere >= 0.0 && self.centre_sphere.is_finite()) {
            return Err(Error::InvalidConfig("centre sphere radius must be >= 0".into()));
        }
        if [self.inertia, self.cognitive, self.social].iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::InvalidConfig("swarm coefficients must be >= 0".into()));
        }
        if self.n_particles < 2 {
            return Err(Error::InvalidConfig(format!("a swarm needs at least 2 particles, got {}", self.n_particles)));
        }
        if !(self.mesh_fraction > 0.0 && self.mesh_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!("mesh_fraction must lie in (0, 1], got {}", self.mesh_fraction)));
        }
        if self.resolution.0 == 0 || self.resolution.1 == 0 || self.top_k == 0 {
            return Err(Error::InvalidConfig("resolution and top_k must be non-zero".into()));
        }
        if Vector3::from(self.up).norm() == 0.0 {
            return Err(Error::InvalidConfig("up hint must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub eye: Point3<f64>,
    pub centre: Point3<f64>,
    pub up: Vector3<f64>,
    /// Velocity over (eye, centre).
    pub velocity: [f64; 6],
    pub best: [f64; 6],
    pub best_score: f64,
}

impl Particle {
    fn state(&self) -> [f64; 6] {
        [self.eye.x, self.eye.y, self.eye.z, self.centre.x, self.centre.y, self.centre.z]
    }

    fn set_state(&mut self, x: &[f64; 6]) {
        self.eye = Point3::new(x[0], x[1], x[2]);
        self.centre = Point3::new(x[3], x[4], x[5]);
    }
}

pub fn sample_particles(cfg: &SwarmConfig, seed: u64) -> Result<Vec<Particle>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ri, ro) = cfg.eye_shell;
    let up = Vector3::from(cfg.up).normalize();
    let particles = (0..cfg.n_particles)
        .map(|_| {
            // radius uniform in volume
            let u: f64 = rng.random();
            let r = (ri.powi(3) + u * (ro.powi(3) - ri.powi(3))).cbrt().clamp(ri, ro);
            let dir: [f64; 3] = UnitSphere.sample(&mut rng);
            let ball: [f64; 3] = UnitBall.sample(&mut rng);
            let eye = Point3::from(Vector3::from(dir) * r);
            let centre = Point3::from(Vector3::from(ball) * cfg.centre_sphere);
            let mut p = Particle {
                eye,
                centre,
                up,
                velocity: [0.0; 6],
                best: [0.0; 6],
                best_score: f64::INFINITY,
            };
            p.best = p.state();
            p
        })
        .collect();
    Ok(particles)
}

/// Robot-base-in-camera pose of a particle's virtual camera.
pub fn particle_to_pose(p: &Particle) -> Result<PoseParam> {
    Ok(PoseParam::from_isometry(&particle_isometry(&p.eye, &p.centre, &p.up)?))
}

fn particle_isometry(eye: &Point3<f64>, centre: &Point3<f64>, up: &Vector3<f64>) -> Result<Isometry3<f64>> {
    look_at(eye, centre, up)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwarmCandidate {
    pub pose: PoseParam,
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwarmOutcome {
    /// Best `top_k` personal bests, ascending by score.
    pub candidates: Vec<SwarmCandidate>,
    /// Global-best fitness after initial evaluation (entry 0) and after each iteration.
    pub trace: Vec<f64>,
    /// Loss of rendering nothing at all; no particle beat it means the search failed.
    pub empty_loss: f64,
    /// Triangle count of each decimated configuration mesh used for fitness.
    pub fitness_triangles: Vec<usize>,
}

/// The fitness problem: decimated meshes, hard renders, observations resampled to the fitness resolution.
pub fn fitness_problem(
    model: &RobotModel,
    q_set: &[JointConfig],
    observations: &[StereoMasks],
    rig: &StereoRig,
    cfg: &SwarmConfig,
) -> Result<StereoProblem> {
    let coarse = model.map_meshes(|m| Ok(simplify_mesh(m, cfg.mesh_fraction)?.mesh))?;
    let meshes = q_set.iter().map(|q| configured_mesh(&coarse, q)).collect::<Result<Vec<_>>>()?;
    let (w, h) = cfg.resolution;
    let small: Vec<StereoMasks> = observations
        .iter()
        .map(|o| StereoMasks {
            left: o.left.resampled_binary(w, h),
            right: o.right.resampled_binary(w, h),
        })
        .collect();
    let ocfg = ObjectiveConfig {
        loss: LossConfig::of_kind(LossKind::Mse),
        softness: 0.0,
        ..ObjectiveConfig::default()
    };
    StereoProblem::from_meshes(meshes, &small, &rig.resized(w, h), &ocfg)
}

pub fn cso_initialize(
    model: &RobotModel,
    q_set: &[JointConfig],
    observations: &[StereoMasks],
    rig: &StereoRig,
    cfg: &SwarmConfig,
    seed: u64,
) -> Result<SwarmOutcome> {
    cfg.validate()?;
    if observations.is_empty() {
        return Err(Error::Precondition("swarm initialisation needs at least one observation".into()));
    }
    let problem = fitness_problem(model, q_set, observations, rig, cfg)?;
    let empty_loss = problem.empty_value();
    let fitness_triangles = problem.triangle_counts();

    let mut particles = sample_particles(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let score = |x: &[f64; 6], up: &Vector3<f64>| -> Result<f64> {
        let eye = Point3::new(x[0], x[1], x[2]);
        let centre = Point3::new(x[3], x[4], x[5]);
        match particle_isometry(&eye, &centre, up) {
            Ok(iso) => problem.value_at(&iso),
            Err(Error::DegenerateGeometry(_)) => Ok(f64::INFINITY),
            Err(e) => Err(e),
        }
    };
    let evaluate = |ps: &mut Vec<Particle>| -> Result<()> {
        let scores = par::map_slice(ps, |p| score(&p.state(), &p.up));
        for (p, s) in ps.iter_mut().zip(scores) {
            let s = s?;
            if s < p.best_score {
                p.best_score = s;
                p.best = p.state();
            }
        }
        Ok(())
    };
    let global_best = |ps: &[Particle]| -> usize {
        let mut best = 0;
        for (i, p) in ps.iter().enumerate() {
            if p.best_score < ps[best].best_score {
                best = i;
            }
        }
        best
    };

    evaluate(&mut particles)?;
    let mut g = global_best(&particles);
    let mut trace = vec![particles[g].best_score];
    for _ in 0..cfg.iterations {
        let gbest = particles[g].best;
        for p in particles.iter_mut() {
            let x = p.state();
            let mut nx = [0.0; 6];
            for k in 0..6 {
                let (r1, r2): (f64, f64) = (rng.random(), rng.random());
                p.velocity[k] = cfg.inertia * p.velocity[k] + cfg.cognitive * r1 * (p.best[k] - x[k]) + cfg.social * r2 * (gbest[k] - x[k]);
                nx[k] = x[k] + p.velocity[k];
            }
            p.set_state(&nx);
        }
        evaluate(&mut particles)?;
        g = global_best(&particles);
        trace.push(particles[g].best_score);
    }

    if !(particles[g].best_score < empty_loss) {
        return Err(Error::InitializationFailure(format!(
            "no particle out of {} scored below the empty-render loss {empty_loss:.6}",
            cfg.n_particles
        )));
    }
    let mut order: Vec<usize> = (0..particles.len()).collect();
    order.sort_by(|&a, &b| particles[a].best_score.total_cmp(&particles[b].best_score).then(a.cmp(&b)));
    let candidates = order
        .iter()
        .take(cfg.top_k)
        .map(|&i| {
            let p = &particles[i];
            let b = &p.best;
            let pose = particle_isometry(&Point3::new(b[0], b[1], b[2]), &Point3::new(b[3], b[4], b[5]), &p.up)
                .map(|iso| PoseParam::from_isometry(&iso))
                .unwrap_or_else(|_| PoseParam::identity());
            SwarmCandidate { pose, score: p.best_score }
        })
        .collect();
    Ok(SwarmOutcome {
        candidates,
        trace,
        empty_loss,
        fitness_triangles,
    })
}

pub fn write_swarm_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let emit = || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iteration,best_fitness")?;
        for (i, f) in trace.iter().enumerate() {
            writeln!(w, "{i},{f:e}")?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::View;

    #[test]
    fn eyes_stay_in_shell_and_centres_in_ball() {
        let cfg = SwarmConfig {
            n_particles: 1000,
            eye_shell: (1.0, 3.0),
            ..Default::default()
        };
        let ps = sample_particles(&cfg, 3).unwrap();
        let radii: Vec<f64> = ps.iter().map(|p| p.eye.coords.norm()).collect();
        assert!(radii.iter().all(|&r| (1.0..=3.0).contains(&r)));
        assert!(ps.iter().all(|p| p.centre.coords.norm() <= cfg.centre_sphere));
        let lo = radii.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = radii.iter().cloned().fold(0.0, f64::max);
        assert!(lo < 1.2 && hi > 2.8, "radial span {lo}..{hi}");
        assert_eq!(ps, sample_particles(&cfg, 3).unwrap());
    }

    #[test]
    fn particle_pose_looks_at_centre() {
        let p = Particle {
            eye: Point3::new(0.0, 0.0, 2.0),
            centre: Point3::origin(),
            up: Vector3::y(),
            velocity: [0.0; 6],
            best: [0.0; 6],
            best_score: 0.0,
        };
        let iso = particle_to_pose(&p).unwrap().to_isometry(Default::default());
        let z_cam = iso.rotation * Vector3::z();
        assert!((z_cam - Vector3::new(0.0, 0.0, -1.0)).norm() < 1e-12);
        let o = iso * Point3::origin();
        assert!(o.x.abs() < 1e-9 && o.y.abs() < 1e-9 && (o.z - 2.0).abs() < 1e-9);

        // random placements: the centre lands on the principal ray
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let eye = Point3::new(rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0);
            let centre = Point3::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let iso = particle_isometry(&eye, &centre, &Vector3::z()).unwrap();
            let c = iso * centre;
            assert!(c.x.abs() < 1e-6 && c.y.abs() < 1e-6 && c.z > 0.0);
        }

        let bad = Particle { centre: p.eye, ..p };
        assert!(matches!(particle_to_pose(&bad), Err(Error::DegenerateGeometry(_))));
    }

    #[test]
    fn empty_observations_fail() {
        let arm = crate::bench::synthetic_arm();
        let rig = crate::bench::default_rig();
        let q = vec![JointConfig::zeros(7)];
        let k = rig.intrinsics(View::Left);
        let empty = crate::mask::MaskImage::zeros(k.width, k.height);
        let obs = vec![StereoMasks {
            left: empty.clone(),
            right: empty,
        }];
        let cfg = SwarmConfig {
            n_particles: 20,
            iterations: 2,
            ..Default::default()
        };
        let r = cso_initialize(&arm, &q, &obs, &rig, &cfg, 1);
        assert!(matches!(r, Err(Error::InitializationFailure(_))), "{r:?}");
    }
}
