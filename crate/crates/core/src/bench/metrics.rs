//! Error metrics: tool-centre deviation, reprojection, per-link deviation and quantiles.

use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::camera::Intrinsics;
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};

/// Quantile by linear interpolation between order statistics (position
/// p·(n−1) in the sorted sample). NaNs are ignored; empty input gives NaN.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Mean distance (metres) between the tool centres predicted by two
/// base-in-camera poses over the configurations.
pub fn tool_centre_deviation(model: &RobotModel, q_set: &[JointConfig], est: &Isometry3<f64>, truth: &Isometry3<f64>) -> Result<f64> {
    if q_set.is_empty() {
        return Err(Error::Precondition("no configurations to evaluate".into()));
    }
    let mut sum = 0.0;
    for q in q_set {
        let tc = model.tool_centre(q)?;
        sum += (est * tc - truth * tc).norm();
    }
    Ok(sum / q_set.len() as f64)
}

/// Mean pixel distance between the projected tool centres in one view.
pub fn tool_centre_reprojection(
    model: &RobotModel,
    q_set: &[JointConfig],
    est: &Isometry3<f64>,
    truth: &Isometry3<f64>,
    k: &Intrinsics,
) -> Result<f64> {
    if q_set.is_empty() {
        return Err(Error::Precondition("no configurations to evaluate".into()));
    }
    let mut sum = 0.0;
    for q in q_set {
        let tc = model.tool_centre(q)?;
        sum += (k.project(&(est * tc)) - k.project(&(truth * tc))).norm();
    }
    Ok(sum / q_set.len() as f64)
}

/// Per link (base L0 to end effector), the mean over `q_set` of the distance
/// between the link origins placed by `pose_a` and by `pose_b`, metres.
pub fn kinematic_chain_deviation(
    pose_a: &Isometry3<f64>,
    pose_b: &Isometry3<f64>,
    model: &RobotModel,
    q_set: &[JointConfig],
) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; model.link_count()];
    for q in q_set {
        for (a, f) in acc.iter_mut().zip(model.forward_kinematics(q)?) {
            let o = Point3::from(f.translation.vector);
            *a += (pose_a * o - pose_b * o).norm();
        }
    }
    let n = q_set.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Offset a base-in-camera pose by a translation of exactly `translation`
/// metres and a rotation of exactly `rotation_deg` about the base origin,
/// both in uniformly random directions.
pub fn perturb_pose(truth: &Isometry3<f64>, translation: f64, rotation_deg: f64, rng: &mut impl Rng) -> Isometry3<f64> {
    let dir: [f64; 3] = UnitSphere.sample(rng);
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let rot = UnitQuaternion::from_scaled_axis(Vector3::from(axis) * rotation_deg.to_radians());
    Isometry3::from_parts(
        Translation3::from(truth.translation.vector + Vector3::from(dir) * translation),
        rot * truth.rotation,
    )
}
