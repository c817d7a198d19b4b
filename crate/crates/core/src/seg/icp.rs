//! Alternating segmentation and refinement: the current estimate is rendered
//! as a prior channel, the segmentor is queried again, and refinement
//! continues on the fresh masks.

use serde::{Deserialize, Serialize};

use super::source::SegmentationSource;
use crate::camera::{StereoRig, View};
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};
use crate::objective::{ObjectiveConfig, StereoMasks, StereoProblem};
use crate::pose::{OptimConfig, PoseParam, Refiner, TraceRow};
use crate::render::{render_prior_channel, RenderConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IcpSchedule {
    pub total_iters: usize,
    pub refresh_every: usize,
}

impl Default for IcpSchedule {
    fn default() -> Self {
        IcpSchedule {
            total_iters: 200,
            refresh_every: 50,
        }
    }
}

impl IcpSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.refresh_every == 0 || self.refresh_every > self.total_iters {
            return Err(Error::InvalidConfig(format!(
                "schedule needs 0 < refresh_every <= total_iters, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.total_iters.div_ceil(self.refresh_every)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcpPhase {
    pub start_pose: PoseParam,
    pub end_pose: PoseParam,
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct IcpOutcome {
    pub pose: PoseParam,
    /// Objective of `pose` against the last segmentation.
    pub loss: f64,
    pub phases: Vec<IcpPhase>,
    /// Segmentations requested at each refresh.
    pub masks: Vec<Vec<StereoMasks>>,
}

/// Hard renders of `pose` for every configuration, used as the prior channel.
pub fn prior_renders(model: &RobotModel, q_set: &[JointConfig], pose: &PoseParam, rig: &StereoRig, cfg: &ObjectiveConfig) -> Result<Vec<StereoMasks>> {
    let left = pose.to_isometry(cfg.rotation);
    let right = rig.right_pose(&left);
    q_set
        .iter()
        .map(|q| {
            let r = |v: View, iso| {
                let k = rig.intrinsics(v);
                render_prior_channel(model, q, Some(iso), k, &RenderConfig::hard(k.width, k.height, rig.clip))
            };
            Ok(StereoMasks {
                left: r(View::Left, &left)?,
                right: r(View::Right, &right)?,
            })
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn sdr_icp(
    init: &PoseParam,
    model: &RobotModel,
    q_set: &[JointConfig],
    rig: &StereoRig,
    source: &SegmentationSource,
    schedule: &IcpSchedule,
    obj_cfg: &ObjectiveConfig,
    opt_cfg: &OptimConfig,
) -> Result<IcpOutcome> {
    schedule.validate()?;
    let cfg = OptimConfig {
        max_iters: schedule.total_iters,
        ..*opt_cfg
    };
    let mut refiner = Refiner::new(init, &cfg)?;
    let mut phases = Vec::new();
    let mut all_masks = Vec::new();
    let mut last_problem = None;
    for phase in 0..schedule.phases() {
        let current = refiner.pose();
        let priors = prior_renders(model, q_set, &current, rig, obj_cfg)?;
        let masks = source.segment_all(q_set.len(), Some(&priors)).map_err(|e| Error::Segmentation {
            phase,
            message: e.to_string(),
        })?;
        let problem = StereoProblem::new(model, q_set, &masks, rig, obj_cfg)?;
        let iters = schedule.refresh_every.min(schedule.total_iters - phase * schedule.refresh_every);
        let before = refiner.trace_len();
        refiner.run(&problem, iters)?;
        phases.push(IcpPhase {
            start_pose: current,
            end_pose: refiner.pose(),
            trace: refiner.trace()[before..].to_vec(),
        });
        all_masks.push(masks);
        last_problem = Some(problem);
    }
    // phase losses are against different masks; rank the phase end poses on the final ones
    let problem = last_problem.expect("at least one phase");
    let mut best = (refiner.pose(), problem.value(&refiner.pose())?);
    for p in phases.iter().rev().skip(1) {
        let l = problem.value(&p.end_pose)?;
        if l < best.1 {
            best = (p.end_pose, l);
        }
    }
    Ok(IcpOutcome {
        pose: best.0,
        loss: best.1,
        phases,
        masks: all_masks,
    })
}
