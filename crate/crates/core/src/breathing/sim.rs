//! Closed-loop drilling on a kinematic arm against breathing anatomy.
//!
//! The plant integrates commanded joint velocities (optionally through a
//! first-order lag). Bone contact is a spring along the planned trajectory
//! whose surface recedes while the drill pushes hard enough. Breathing is
//! observed as noisy displacement samples, fitted over a sliding window, and
//! fed forward while drilling; drill stop and retraction run uncompensated.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DVector, Point3, UnitQuaternion, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::control::{build_velocity_bound, solve_drill_qp, ControlInputs};
use super::{fit_breathing, BreathingModel, FitConfig};
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    PreContact,
    PostContact,
    DrillStop,
    Retraction,
}

impl PhaseKind {
    pub fn name(self) -> &'static str {
        match self {
            PhaseKind::PreContact => "pre-contact",
            PhaseKind::PostContact => "post-contact",
            PhaseKind::DrillStop => "drill-stop",
            PhaseKind::Retraction => "retraction",
        }
    }

    /// Breathing is fed forward only while drilling.
    pub fn compensated(self) -> bool {
        matches!(self, PhaseKind::PreContact | PhaseKind::PostContact)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub kind: PhaseKind,
    pub start: f64,
    pub end: f64,
}

/// Spring contact with material removal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContactModel {
    /// N/m.
    pub stiffness: f64,
    /// Surface recession while drilling above the threshold force, m/s.
    pub removal_rate: f64,
    pub removal_threshold: f64,
}

impl Default for ContactModel {
    fn default() -> Self {
        ContactModel {
            stiffness: 2000.0,
            removal_rate: 2e-4,
            removal_threshold: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlGains {
    /// Entry-point following gain, 1/s.
    pub k: f64,
    /// Force compliance, m/(s·N).
    pub c: f64,
    /// Desired force, N.
    pub f_d: f64,
    /// Drill/trajectory alignment gain, 1/s.
    pub align_gain: f64,
    /// Feed-forward velocity along the tip z axis while drilling, m/s.
    pub z_dot_tip: f64,
    /// Back-out speed during retraction, m/s.
    pub retract_speed: f64,
}

impl Default for ControlGains {
    fn default() -> Self {
        ControlGains {
            k: 2.0,
            c: 5e-4,
            f_d: 15.0,
            align_gain: 2.0,
            z_dot_tip: 0.0,
            retract_speed: 0.01,
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<()> {
        let v = [self.k, self.c, self.f_d, self.align_gain, self.retract_speed];
        if v.iter().any(|g| !(*g >= 0.0 && g.is_finite())) || !self.z_dot_tip.is_finite() {
            return Err(Error::InvalidConfig(format!("gains must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Estimator {
    /// No breathing feed-forward.
    Off,
    /// Inject the true breathing model.
    Oracle,
    /// Sliding-window fit of the noisy samples.
    Fitted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// True anatomy displacement per base axis (x, y, z), mm.
    pub breathing: [BreathingModel; 3],
    /// Axes whose breathing is fed forward; z is anterior-posterior.
    pub compensate: [bool; 3],
    pub estimator: Estimator,
    pub contact: ContactModel,
    /// Standard deviation of the displacement samples, mm.
    pub breathing_noise: f64,
    /// Standard deviation of the force measurement, N.
    pub force_noise: f64,
    pub control_rate: f64,
    /// Rate of the breathing samples, Hz.
    pub sample_rate: f64,
    /// Seconds between refits of the breathing model.
    pub refit_interval: f64,
    pub log_rate: f64,
    /// First-order joint velocity lag, s (0 = ideal velocity tracking).
    pub velocity_lag: f64,
    /// Initial distance from the drill tip to the entry point, m.
    pub standoff: f64,
    pub q0: Vec<f64>,
    /// Drill tip in the terminal link frame, m; the drill points along that frame's +z.
    pub tool_tip: [f64; 3],
    pub phases: Vec<Phase>,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let phase = |kind, start, end| Phase { kind, start, end };
        ScenarioConfig {
            breathing: [
                BreathingModel::default(),
                BreathingModel::default(),
                BreathingModel::sinusoid(4.0, 1.3),
            ],
            compensate: [false, false, true],
            estimator: Estimator::Fitted,
            contact: ContactModel::default(),
            breathing_noise: 0.05,
            force_noise: 0.0,
            control_rate: 1000.0,
            sample_rate: 20.0,
            refit_interval: 0.5,
            log_rate: 100.0,
            velocity_lag: 0.0,
            standoff: 0.02,
            q0: vec![0.2, 0.5, 0.1, -1.2, 0.15, 1.0, 0.0],
            tool_tip: [0.05, 0.0, 0.2],
            phases: vec![
                phase(PhaseKind::PreContact, 0.0, 5.0),
                phase(PhaseKind::PostContact, 5.0, 35.0),
                phase(PhaseKind::DrillStop, 35.0, 40.0),
                phase(PhaseKind::Retraction, 40.0, 45.0),
            ],
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self, model: &RobotModel) -> Result<()> {
        for m in &self.breathing {
            m.validate()?;
        }
        let positive = [self.control_rate, self.refit_interval, self.log_rate];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig("rates and intervals must be positive".into()));
        }
        if !(self.sample_rate >= 10.0) {
            return Err(Error::InvalidConfig(format!(
                "breathing sample rate {} Hz is below 10 Hz",
                self.sample_rate
            )));
        }
        if !(self.breathing_noise >= 0.0 && self.force_noise >= 0.0 && self.velocity_lag >= 0.0 && self.standoff >= 0.0) {
            return Err(Error::InvalidConfig("noise levels, lag and standoff must be non-negative".into()));
        }
        if self.q0.len() != model.dof() {
            return Err(Error::DimensionMismatch {
                expected: model.dof(),
                got: self.q0.len(),
            });
        }
        let Some(first) = self.phases.first() else {
            return Err(Error::InvalidConfig("scenario has no phases".into()));
        };
        if first.start != 0.0 {
            return Err(Error::InvalidConfig("first phase must start at t = 0".into()));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if !(p.end > p.start) {
                return Err(Error::InvalidConfig(format!("phase {i} ({}) is empty", p.kind.name())));
            }
            if i > 0 && (p.start - self.phases[i - 1].end).abs() > 1e-12 {
                return Err(Error::InvalidConfig(format!(
                    "phase {i} ({}) must start where phase {} ends",
                    p.kind.name(),
                    i - 1
                )));
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.phases.last().map_or(0.0, |p| p.end)
    }

    fn phase_at(&self, t: f64) -> PhaseKind {
        self.phases
            .iter()
            .find(|p| t < p.end)
            .unwrap_or_else(|| self.phases.last().expect("validated"))
            .kind
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: f64,
    pub phase: PhaseKind,
    /// Anterior-posterior (base z) displacement, true and as currently estimated, mm.
    pub z_true: f64,
    pub z_est: f64,
    pub z_dot_true: f64,
    pub z_dot_est: f64,
    pub force: f64,
    pub force_measured: f64,
    pub tip: [f64; 3],
    /// Tip position with the anatomy displacement removed, m.
    pub relative: [f64; 3],
    /// Distance from the tip to the planned trajectory line, m.
    pub lateral_error: f64,
    /// Tip depth past the entry point along the trajectory, m.
    pub depth: f64,
    pub qp_residual: f64,
    pub fallback: bool,
    pub q_dot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrillingLog {
    pub rows: Vec<LogRow>,
    /// Number of breathing fits performed.
    pub fits: usize,
    pub dof: usize,
}

fn displacement(models: &[BreathingModel; 3], t: f64) -> Vector3<f64> {
    Vector3::from_fn(|i, _| (models[i].eval(t) - models[i].eval(0.0)) * 1e-3)
}

pub fn simulate_drilling(
    model: &RobotModel,
    scenario: &ScenarioConfig,
    fit_cfg: &FitConfig,
    gains: &ControlGains,
) -> Result<DrillingLog> {
    scenario.validate(model)?;
    fit_cfg.validate()?;
    gains.validate()?;
    let dt = 1.0 / scenario.control_rate;
    let steps = (scenario.duration() * scenario.control_rate).round() as usize;
    let log_every = ((scenario.control_rate / scenario.log_rate).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let breath_noise = Normal::new(0.0, scenario.breathing_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let force_noise = Normal::new(0.0, scenario.force_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let tip_local = Point3::from(scenario.tool_tip);
    // tip frame: terminal frame flipped about x so that its z points back along the drill
    let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    let mut q = DVector::from_column_slice(&scenario.q0);
    let mut q_dot_actual = DVector::zeros(model.dof());

    let frames = model.forward_kinematics(&JointConfig(scenario.q0.clone()))?;
    let last = frames.last().expect("model has links");
    let drill_dir = last.rotation * Vector3::z();
    let entry = last * tip_local + drill_dir * scenario.standoff;

    // breathing observations, including one horizon of history before t = 0
    let mut next_sample = -(fit_cfg.horizon * scenario.sample_rate).ceil() as i64;
    let mut samples: [Vec<(f64, f64)>; 3] = Default::default();
    let mut estimate: [Option<BreathingModel>; 3] = [None; 3];
    let mut last_fit = f64::NEG_INFINITY;
    let mut fits = 0;
    let mut surface = 0.0;
    let mut rows = Vec::new();

    for step in 0..steps {
        let t = step as f64 * dt;
        while next_sample as f64 / scenario.sample_rate <= t + 1e-12 {
            let ts = next_sample as f64 / scenario.sample_rate;
            for (axis, buf) in samples.iter_mut().enumerate() {
                let noise = breath_noise.sample(&mut rng);
                buf.push((ts, scenario.breathing[axis].eval(ts) + noise));
            }
            next_sample += 1;
        }
        if scenario.estimator == Estimator::Fitted && t - last_fit >= scenario.refit_interval - 1e-12 {
            for axis in 0..3 {
                if !scenario.compensate[axis] {
                    continue;
                }
                let buf = &mut samples[axis];
                let keep = buf.partition_point(|&(ts, _)| ts < t - fit_cfg.horizon - 1.0);
                buf.drain(..keep);
                if let Ok(f) = fit_breathing(buf, fit_cfg) {
                    estimate[axis] = Some(f.model);
                }
            }
            fits += 1;
            last_fit = t;
        }

        let frames = model.forward_kinematics(&JointConfig(q.as_slice().to_vec()))?;
        let last = frames.last().expect("model has links");
        let r_tip = (last.rotation * flip).to_rotation_matrix().into_inner();
        let tip = last * tip_local;
        let current_dir = last.rotation * Vector3::z();
        let disp = displacement(&scenario.breathing, t);
        let rel = tip - disp;
        let along = (rel - entry).dot(&drill_dir);
        let lateral = ((rel - entry) - drill_dir * along).norm();
        let force = scenario.contact.stiffness * (along - surface).max(0.0);
        let force_measured = force + force_noise.sample(&mut rng);
        let phase = scenario.phase_at(t);

        let t_mid = t + 0.5 * dt;
        let mut feed = Vector3::zeros();
        if phase.compensated() {
            for axis in 0..3 {
                if !scenario.compensate[axis] {
                    continue;
                }
                feed[axis] = match scenario.estimator {
                    Estimator::Off => 0.0,
                    Estimator::Oracle => scenario.breathing[axis].velocity(t_mid),
                    Estimator::Fitted => estimate[axis].map_or(0.0, |m| m.velocity(t_mid)),
                } * 1e-3;
            }
        }
        let entry_tip = r_tip.transpose() * (entry + disp - tip);
        let omega_align = current_dir.cross(&drill_dir) * gains.align_gain;
        let inputs = match phase {
            PhaseKind::PreContact | PhaseKind::PostContact => Some(ControlInputs {
                r: r_tip,
                x_ep: entry_tip.x,
                y_ep: entry_tip.y,
                k: gains.k,
                c: gains.c,
                f_d: gains.f_d,
                f_m: force_measured,
                z_dot_tip: gains.z_dot_tip,
                breathing_velocity: feed,
                omega_align,
            }),
            PhaseKind::DrillStop => None,
            PhaseKind::Retraction => Some(ControlInputs {
                r: r_tip,
                x_ep: entry_tip.x,
                y_ep: entry_tip.y,
                k: gains.k,
                c: 0.0,
                f_d: 0.0,
                f_m: 0.0,
                z_dot_tip: gains.retract_speed,
                breathing_velocity: Vector3::zeros(),
                omega_align,
            }),
        };
        let (q_dot, residual, fallback) = match inputs {
            Some(u) => {
                let bound: Vector6<f64> = build_velocity_bound(&u);
                let j = model.jacobian(&JointConfig(q.as_slice().to_vec()), &tip_local)?;
                let s = solve_drill_qp(&j, &bound)?;
                (DVector::from_vec(s.q_dot), s.residual, s.fallback)
            }
            None => (DVector::zeros(model.dof()), 0.0, false),
        };

        if step % log_every == 0 {
            let est = estimate[2].filter(|_| scenario.estimator == Estimator::Fitted);
            let truth = &scenario.breathing[2];
            let (z_est, z_dot_est) = match scenario.estimator {
                Estimator::Oracle => (truth.eval(t), truth.velocity(t)),
                _ => est.map_or((f64::NAN, f64::NAN), |m| (m.eval(t), m.velocity(t))),
            };
            rows.push(LogRow {
                t,
                phase,
                z_true: truth.eval(t),
                z_est,
                z_dot_true: truth.velocity(t),
                z_dot_est,
                force,
                force_measured,
                tip: tip.coords.into(),
                relative: rel.coords.into(),
                lateral_error: lateral,
                depth: along,
                qp_residual: residual,
                fallback,
                q_dot: q_dot.as_slice().to_vec(),
            });
        }

        if scenario.velocity_lag > 0.0 {
            let a = (dt / scenario.velocity_lag).min(1.0);
            q_dot_actual += (q_dot - &q_dot_actual) * a;
        } else {
            q_dot_actual = q_dot;
        }
        q += &q_dot_actual * dt;
        if phase.compensated() && force > scenario.contact.removal_threshold {
            surface += scenario.contact.removal_rate * dt;
        }
    }
    Ok(DrillingLog {
        rows,
        fits,
        dof: model.dof(),
    })
}

/// Largest distance between the anatomy-relative tip positions of two runs
/// over the compensated phases; the runs must share their time base.
pub fn relative_motion_deviation(run: &DrillingLog, reference: &DrillingLog) -> Result<f64> {
    if run.rows.len() != reference.rows.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.rows.len(),
            got: run.rows.len(),
        });
    }
    let mut worst: f64 = 0.0;
    for (a, b) in run.rows.iter().zip(&reference.rows) {
        if a.t != b.t || a.phase != b.phase {
            return Err(Error::Precondition("logs do not share a time base".into()));
        }
        if a.phase.compensated() {
            worst = worst.max((Vector3::from(a.relative) - Vector3::from(b.relative)).norm());
        }
    }
    Ok(worst)
}

pub fn write_drilling_log(path: &Path, log: &DrillingLog) -> Result<()> {
    let mut out = String::from(
        "t,phase,z_true_mm,z_est_mm,z_dot_true_mm_s,z_dot_est_mm_s,force_n,force_measured_n,\
         tip_x,tip_y,tip_z,rel_x,rel_y,rel_z,lateral_error_m,depth_m,qp_residual,fallback",
    );
    for i in 0..log.dof {
        out.push_str(&format!(",q_dot_{i}"));
    }
    out.push('\n');
    for r in &log.rows {
        let mut fields = vec![format!("{:.6}", r.t), r.phase.name().to_string()];
        fields.extend(
            [r.z_true, r.z_est, r.z_dot_true, r.z_dot_est, r.force, r.force_measured]
                .iter()
                .chain(&r.tip)
                .chain(&r.relative)
                .chain([r.lateral_error, r.depth, r.qp_residual].iter())
                .map(|v| format!("{v:.9e}")),
        );
        fields.push((r.fallback as u8).to_string());
        fields.extend(r.q_dot.iter().map(|v| format!("{v:.9e}")));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::synthetic_arm;

    #[test]
    fn phases_validated() {
        let arm = synthetic_arm();
        let mut s = ScenarioConfig::default();
        s.validate(&arm).unwrap();
        s.phases[2].start = 34.0;
        assert!(s.validate(&arm).is_err());
        let mut s = ScenarioConfig::default();
        s.phases.clear();
        assert!(s.validate(&arm).is_err());
        let mut s = ScenarioConfig::default();
        s.q0.pop();
        assert!(s.validate(&arm).is_err());
        let s = ScenarioConfig {
            sample_rate: 5.0,
            ..Default::default()
        };
        assert!(s.validate(&arm).is_err());
    }

    #[test]
    fn phase_lookup() {
        let s = ScenarioConfig::default();
        assert_eq!(s.phase_at(0.0), PhaseKind::PreContact);
        assert_eq!(s.phase_at(5.0), PhaseKind::PostContact);
        assert_eq!(s.phase_at(39.999), PhaseKind::DrillStop);
        assert_eq!(s.phase_at(45.0), PhaseKind::Retraction);
    }

    #[test]
    fn initial_jacobian_full_rank() {
        let arm = synthetic_arm();
        let s = ScenarioConfig::default();
        let j = arm.jacobian(&JointConfig(s.q0.clone()), &Point3::from(s.tool_tip)).unwrap();
        let sv = j.singular_values();
        assert!(sv.min() > 1e-3 * sv.max(), "{sv}");
    }
}
