//! Synthetic stereo scenes with exact ground truth.

use nalgebra::{Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{ClipParams, Intrinsics, StereoRig, View};
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};
use crate::objective::StereoMasks;
use crate::par;
use crate::pose::look_at;
use crate::render::{configured_mesh, render_mesh, RenderConfig};

pub const MIN_VISIBILITY: f64 = 0.3;
pub const MIN_CONFIG_DISTANCE: f64 = 0.1;
pub const MAX_ATTEMPTS: usize = 1000;

/// Down-scaled HD stereo camera (12 cm baseline) used by the synthetic benchmark.
pub fn default_rig() -> StereoRig {
    let k = Intrinsics::new(265.0, 265.0, 320.0, 180.0, 640, 360).expect("valid intrinsics");
    StereoRig::rectified(k, 0.12, ClipParams::default()).expect("valid rig")
}

/// Where the (left) camera sits relative to the robot base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraPlacement {
    /// Distance from the eye to the look-at point, metres.
    pub distance: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Look-at point in the robot base frame.
    pub target: [f64; 3],
}

impl Default for CameraPlacement {
    fn default() -> Self {
        CameraPlacement {
            distance: 1.5,
            azimuth_deg: 25.0,
            elevation_deg: 15.0,
            target: [0.0, 0.0, 0.45],
        }
    }
}

impl CameraPlacement {
    pub fn eye(&self) -> Point3<f64> {
        let (az, el) = (self.azimuth_deg.to_radians(), self.elevation_deg.to_radians());
        Point3::from(Vector3::from(self.target) + self.distance * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()))
    }

    /// Robot-base-in-left-camera pose.
    pub fn pose(&self) -> Result<Isometry3<f64>> {
        look_at(&self.eye(), &Point3::from(Vector3::from(self.target)), &Vector3::z())
    }
}

/// Uniform joint sampling inside a shrunken fraction of each joint's range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigSampler {
    pub range_fraction: f64,
}

impl Default for ConfigSampler {
    fn default() -> Self {
        ConfigSampler { range_fraction: 0.6 }
    }
}

impl ConfigSampler {
    pub fn sample(&self, model: &RobotModel, rng: &mut impl Rng) -> JointConfig {
        JointConfig(
            model
                .revolute_joints()
                .map(|j| {
                    let mid = 0.5 * (j.lower + j.upper);
                    let half = 0.5 * (j.upper - j.lower) * self.range_fraction.clamp(0.0, 1.0);
                    if half > 0.0 {
                        rng.random_range(mid - half..=mid + half)
                    } else {
                        mid
                    }
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub gt_pose: Isometry3<f64>,
    pub rig: StereoRig,
    pub model: RobotModel,
    pub configs: Vec<JointConfig>,
    pub masks: Vec<StereoMasks>,
    pub seed: u64,
}

/// Fraction of the configured vertices that land inside the image and the depth range.
pub fn visibility(model: &RobotModel, q: &JointConfig, cam_from_base: &Isometry3<f64>, k: &Intrinsics, clip: &ClipParams) -> Result<f64> {
    let sets = model.configured_vertices(q)?;
    let (mut inside, mut total) = (0usize, 0usize);
    for v in sets.iter().flatten() {
        total += 1;
        let p = cam_from_base * v;
        if p.z >= clip.z_min && p.z <= clip.z_max && k.contains(&k.project(&p)) {
            inside += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { inside as f64 / total as f64 })
}

/// Whether the camera centre lies inside any link's bounding box.
pub fn camera_inside_robot(model: &RobotModel, q: &JointConfig, cam_from_base: &Isometry3<f64>) -> Result<bool> {
    let frames = model.forward_kinematics(q)?;
    let eye_base = cam_from_base.inverse() * Point3::origin();
    for (link, frame) in model.links.iter().zip(&frames) {
        if let Some((lo, hi)) = link.mesh.bounding_box() {
            let e = frame.inverse() * eye_base;
            if (0..3).all(|i| e[i] >= lo[i] && e[i] <= hi[i]) {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

pub fn render_masks(model: &RobotModel, q: &JointConfig, gt_pose: &Isometry3<f64>, rig: &StereoRig) -> Result<StereoMasks> {
    let mesh = configured_mesh(model, q)?;
    let mut out = Vec::with_capacity(2);
    for v in View::BOTH {
        let k = rig.intrinsics(v);
        let pose = if v == View::Left { *gt_pose } else { rig.right_pose(gt_pose) };
        out.push(render_mesh(&mesh, &pose, k, &RenderConfig::hard(k.width, k.height, rig.clip))?);
    }
    let right = out.pop().unwrap();
    Ok(StereoMasks { left: out.pop().unwrap(), right })
}

/// Sample `n_configs` distinct, visible configurations and render their exact masks.
pub fn generate_scene(
    model: &RobotModel,
    rig: &StereoRig,
    gt_pose: &Isometry3<f64>,
    n_configs: usize,
    sampler: &ConfigSampler,
    seed: u64,
) -> Result<SyntheticScene> {
    if n_configs < 2 {
        return Err(Error::Precondition(format!("a scene needs at least 2 configurations, got {n_configs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let right_pose = rig.right_pose(gt_pose);
    let mut configs: Vec<JointConfig> = Vec::with_capacity(n_configs);
    while configs.len() < n_configs {
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let q = sampler.sample(model, &mut rng);
            if configs.iter().any(|c| c.distance(&q) <= MIN_CONFIG_DISTANCE) {
                continue;
            }
            if camera_inside_robot(model, &q, gt_pose)? || camera_inside_robot(model, &q, &right_pose)? {
                continue;
            }
            let vl = visibility(model, &q, gt_pose, &rig.left, &rig.clip)?;
            let vr = visibility(model, &q, &right_pose, &rig.right, &rig.clip)?;
            if vl >= MIN_VISIBILITY && vr >= MIN_VISIBILITY {
                found = Some(q);
                break;
            }
        }
        match found {
            Some(q) => configs.push(q),
            None => {
                return Err(Error::VisibilityUnreachable(format!(
                    "no configuration reached {:.0}% visibility in both views after {MAX_ATTEMPTS} attempts (have {} of {n_configs})",
                    MIN_VISIBILITY * 100.0,
                    configs.len()
                )))
            }
        }
    }
    let masks = par::map_slice(&configs, |q| render_masks(model, q, gt_pose, rig))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        gt_pose: *gt_pose,
        rig: *rig,
        model: model.clone(),
        configs,
        masks,
        seed,
    })
}

impl SyntheticScene {
    pub fn subset(&self, indices: &[usize]) -> (Vec<JointConfig>, Vec<StereoMasks>) {
        (
            indices.iter().map(|&i| self.configs[i].clone()).collect(),
            indices.iter().map(|&i| self.masks[i].clone()).collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synthetic_arm;

    #[test]
    fn scene_is_reproducible_and_visible() {
        let arm = synthetic_arm();
        let rig = default_rig();
        let pose = CameraPlacement::default().pose().unwrap();
        let a = generate_scene(&arm, &rig, &pose, 4, &ConfigSampler::default(), 11).unwrap();
        let b = generate_scene(&arm, &rig, &pose, 4, &ConfigSampler::default(), 11).unwrap();
        assert_eq!(a.configs, b.configs);
        assert_eq!(a.masks, b.masks);
        for (i, q) in a.configs.iter().enumerate() {
            for p in &a.configs[i + 1..] {
                assert!(q.distance(p) > MIN_CONFIG_DISTANCE);
            }
            assert!(visibility(&arm, q, &pose, &rig.left, &rig.clip).unwrap() >= MIN_VISIBILITY);
        }
    }

    #[test]
    fn camera_inside_hull_fails() {
        let arm = synthetic_arm();
        let rig = default_rig();
        let pose = look_at(&Point3::new(0.0, 0.0, 0.06), &Point3::new(1.0, 0.0, 0.06), &Vector3::z()).unwrap();
        let r = generate_scene(&arm, &rig, &pose, 3, &ConfigSampler::default(), 1);
        assert!(matches!(r, Err(Error::VisibilityUnreachable(_))));
    }
}
