//! Monte-Carlo cross-validation: fit the pose on random configuration subsets,
//! score it on the held-out complement.

use std::path::Path;

use nalgebra::Isometry3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{kinematic_chain_deviation, median, perturb_pose, quantile, tool_centre_deviation, tool_centre_reprojection};
use super::scene::SyntheticScene;
use crate::camera::View;
use crate::error::{Error, Result};
use crate::objective::{ObjectiveConfig, StereoProblem};
use crate::par;
use crate::pose::{sdr_refine, OptimConfig, PoseParam};
use crate::seg::{sdr_icp, IcpSchedule, SegmentationSource};
use crate::swarm::{cso_initialize, SwarmConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct McvProtocol {
    pub configs_per_fit: Vec<usize>,
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for McvProtocol {
    fn default() -> Self {
        McvProtocol {
            configs_per_fit: vec![3, 6, 9, 12],
            n_repeats: 5,
            seed: 0,
        }
    }
}

impl McvProtocol {
    pub fn validate(&self, scene_size: usize) -> Result<()> {
        if self.configs_per_fit.is_empty() || self.n_repeats == 0 {
            return Err(Error::InvalidConfig("protocol needs fit sizes and at least one repeat".into()));
        }
        for &k in &self.configs_per_fit {
            if k == 0 || k + 1 > scene_size {
                return Err(Error::Precondition(format!(
                    "fit size {k} leaves no held-out configuration in a scene of {scene_size}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sdr,
    SdrIcp,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sdr => "sdr",
            Method::SdrIcp => "sdr_icp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InitStrategy {
    /// Ground truth offset by an exact translation and rotation in random directions.
    PerturbedTruth { translation: f64, rotation_deg: f64 },
    /// Camera swarm on the fit subset; refinement starts from the best candidate.
    Cso { swarm: SwarmConfig },
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::PerturbedTruth {
            translation: 0.05,
            rotation_deg: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct McvSettings {
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
    pub icp: IcpSchedule,
}

/// One fit subset, shared by every method run under the same protocol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialDraw {
    pub fit_size: usize,
    pub repeat: usize,
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// The fit subsets of a protocol; depends only on the protocol and the scene size.
pub fn draw_subsets(protocol: &McvProtocol, scene_size: usize) -> Result<Vec<TrialDraw>> {
    protocol.validate(scene_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
    let mut out = Vec::new();
    for &k in &protocol.configs_per_fit {
        for repeat in 0..protocol.n_repeats {
            let mut indices = sample(&mut rng, scene_size, k).into_vec();
            indices.sort_unstable();
            let seed = rand::Rng::random(&mut rng);
            out.push(TrialDraw {
                fit_size: k,
                repeat,
                indices,
                seed,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub fit_size: usize,
    pub repeat: usize,
    pub indices: Vec<usize>,
    /// Mean tool-centre deviation over the held-out configurations, mm (NaN if the trial failed).
    pub error_mm: f64,
    /// Mean tool-centre reprojection error in the left view, px.
    pub reprojection_px: f64,
    /// Per-link deviation L0..EE over the held-out configurations, cm.
    pub chain_cm: Vec<f64>,
    pub initial_error_mm: f64,
    pub loss: f64,
    pub converged: bool,
    pub failure: Option<String>,
    pub pose: Option<PoseParam>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSizeSummary {
    pub fit_size: usize,
    pub trials: usize,
    pub failed: usize,
    pub median_mm: f64,
    pub q1_mm: f64,
    pub q3_mm: f64,
    pub median_px: f64,
    pub q1_px: f64,
    pub q3_px: f64,
    /// Median per-link deviation L0..EE, cm.
    pub chain_median_cm: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub method: String,
    pub quantile_method: String,
    pub trials: Vec<TrialResult>,
    pub summary: Vec<FitSizeSummary>,
}

impl ErrorReport {
    pub fn summary_for(&self, fit_size: usize) -> Option<&FitSizeSummary> {
        self.summary.iter().find(|s| s.fit_size == fit_size)
    }

    pub fn errors_mm(&self, fit_size: usize) -> Vec<f64> {
        self.trials.iter().filter(|t| t.fit_size == fit_size).map(|t| t.error_mm).collect()
    }
}

pub const QUANTILE_METHOD: &str = "linear interpolation between order statistics at p*(n-1)";

fn summarise(method: Method, trials: Vec<TrialResult>) -> ErrorReport {
    let mut sizes: Vec<usize> = Vec::new();
    for t in &trials {
        if !sizes.contains(&t.fit_size) {
            sizes.push(t.fit_size);
        }
    }
    let summary = sizes
        .iter()
        .map(|&k| {
            let ts: Vec<&TrialResult> = trials.iter().filter(|t| t.fit_size == k).collect();
            let mm: Vec<f64> = ts.iter().map(|t| t.error_mm).collect();
            let px: Vec<f64> = ts.iter().map(|t| t.reprojection_px).collect();
            let links = ts.iter().map(|t| t.chain_cm.len()).max().unwrap_or(0);
            FitSizeSummary {
                fit_size: k,
                trials: ts.len(),
                failed: ts.iter().filter(|t| t.failure.is_some()).count(),
                median_mm: median(&mm),
                q1_mm: quantile(&mm, 0.25),
                q3_mm: quantile(&mm, 0.75),
                median_px: median(&px),
                q1_px: quantile(&px, 0.25),
                q3_px: quantile(&px, 0.75),
                chain_median_cm: (0..links)
                    .map(|l| median(&ts.iter().filter_map(|t| t.chain_cm.get(l).copied()).collect::<Vec<_>>()))
                    .collect(),
            }
        })
        .collect();
    ErrorReport {
        method: method.name().to_string(),
        quantile_method: QUANTILE_METHOD.to_string(),
        trials,
        summary,
    }
}

struct Fitted {
    pose: PoseParam,
    loss: f64,
    converged: bool,
}

fn fit_trial(
    scene: &SyntheticScene,
    draw: &TrialDraw,
    method: Method,
    source: &SegmentationSource,
    init: &InitStrategy,
    settings: &McvSettings,
) -> Result<(PoseParam, Fitted)> {
    let (q_fit, _) = scene.subset(&draw.indices);
    let src = source.subset(&draw.indices);
    let repr = settings.objective.rotation;
    let start = match init {
        InitStrategy::PerturbedTruth {
            translation,
            rotation_deg,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(draw.seed);
            PoseParam::from_isometry(&perturb_pose(&scene.gt_pose, *translation, *rotation_deg, &mut rng))
        }
        InitStrategy::Cso { swarm } => {
            let obs = src.segment_all(q_fit.len(), None)?;
            let out = cso_initialize(&scene.model, &q_fit, &obs, &scene.rig, swarm, draw.seed)?;
            out.candidates[0].pose.normalized(repr)
        }
    };
    let fitted = match method {
        Method::Sdr => {
            let masks = src.segment_all(q_fit.len(), None)?;
            let problem = StereoProblem::new(&scene.model, &q_fit, &masks, &scene.rig, &settings.objective)?;
            let o = sdr_refine(&start, &problem, &settings.optim)?;
            Fitted {
                pose: o.pose,
                loss: o.loss,
                converged: o.converged,
            }
        }
        Method::SdrIcp => {
            let o = sdr_icp(&start, &scene.model, &q_fit, &scene.rig, &src, &settings.icp, &settings.objective, &settings.optim)?;
            Fitted {
                pose: o.pose,
                loss: o.loss,
                converged: true,
            }
        }
    };
    Ok((start, fitted))
}

fn evaluate(scene: &SyntheticScene, draw: &TrialDraw, est: &Isometry3<f64>) -> Result<(f64, f64, Vec<f64>)> {
    let held_out: Vec<usize> = (0..scene.configs.len()).filter(|i| !draw.indices.contains(i)).collect();
    let (q_eval, _) = scene.subset(&held_out);
    let mm = tool_centre_deviation(&scene.model, &q_eval, est, &scene.gt_pose)? * 1e3;
    let px = tool_centre_reprojection(&scene.model, &q_eval, est, &scene.gt_pose, scene.rig.intrinsics(View::Left))?;
    let chain = kinematic_chain_deviation(est, &scene.gt_pose, &scene.model, &q_eval)?
        .into_iter()
        .map(|d| d * 1e2)
        .collect();
    Ok((mm, px, chain))
}

/// Run one method over every draw of the protocol. Pipeline failures inside a
/// trial are recorded on that trial; only invalid input is an error.
pub fn run_mcv(
    scene: &SyntheticScene,
    protocol: &McvProtocol,
    method: Method,
    source: &SegmentationSource,
    init: &InitStrategy,
    settings: &McvSettings,
) -> Result<ErrorReport> {
    let draws = draw_subsets(protocol, scene.configs.len())?;
    settings.optim.validate()?;
    settings.icp.validate()?;
    let repr = settings.objective.rotation;
    let trials = par::map_slice(&draws, |draw| {
        let mut t = TrialResult {
            fit_size: draw.fit_size,
            repeat: draw.repeat,
            indices: draw.indices.clone(),
            error_mm: f64::NAN,
            reprojection_px: f64::NAN,
            chain_cm: Vec::new(),
            initial_error_mm: f64::NAN,
            loss: f64::NAN,
            converged: false,
            failure: None,
            pose: None,
        };
        let outcome = fit_trial(scene, draw, method, source, init, settings).and_then(|(start, fitted)| {
            let (mm, px, chain) = evaluate(scene, draw, &fitted.pose.to_isometry(repr))?;
            let (mm0, _, _) = evaluate(scene, draw, &start.to_isometry(repr))?;
            Ok((fitted, mm, px, chain, mm0))
        });
        match outcome {
            Ok((fitted, mm, px, chain, mm0)) => {
                t.error_mm = mm;
                t.reprojection_px = px;
                t.chain_cm = chain;
                t.initial_error_mm = mm0;
                t.loss = fitted.loss;
                t.converged = fitted.converged;
                t.pose = Some(fitted.pose);
            }
            Err(e) => {
                log::warn!("trial k={} repeat={} failed: {e}", draw.fit_size, draw.repeat);
                t.failure = Some(format!("{}: {e}", e.kind()));
            }
        }
        t
    });
    Ok(summarise(method, trials))
}

/// Pool trials of the same method run on several scenes (e.g. one per camera
/// placement) into a single report.
pub fn merge_reports(reports: &[ErrorReport]) -> Result<ErrorReport> {
    let Some(first) = reports.first() else {
        return Err(Error::Precondition("no reports to merge".into()));
    };
    if reports.iter().any(|r| r.method != first.method) {
        return Err(Error::Precondition("cannot merge reports of different methods".into()));
    }
    let method = if first.method == Method::Sdr.name() { Method::Sdr } else { Method::SdrIcp };
    let mut trials: Vec<TrialResult> = reports.iter().flat_map(|r| r.trials.iter().cloned()).collect();
    trials.sort_by_key(|t| t.fit_size);
    let mut merged = summarise(method, trials);
    merged.summary.sort_by_key(|s| s.fit_size);
    Ok(merged)
}

/// Per-trial CSV, one row per trial.
pub fn write_trials_csv(path: &Path, report: &ErrorReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let links = report.trials.iter().map(|t| t.chain_cm.len()).max().unwrap_or(0);
    let mut header = vec!["method", "fit_size", "repeat", "indices", "error_mm", "reprojection_px", "initial_error_mm", "loss", "converged", "failure"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(chain_columns(links));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in &report.trials {
        let mut row = vec![
            report.method.clone(),
            t.fit_size.to_string(),
            t.repeat.to_string(),
            t.indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "),
            t.error_mm.to_string(),
            t.reprojection_px.to_string(),
            t.initial_error_mm.to_string(),
            t.loss.to_string(),
            t.converged.to_string(),
            t.failure.clone().unwrap_or_default(),
        ];
        row.extend((0..links).map(|l| t.chain_cm.get(l).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary CSV, one row per fit size.
pub fn write_summary_csv(path: &Path, report: &ErrorReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    let links = report.summary.iter().map(|s| s.chain_median_cm.len()).max().unwrap_or(0);
    let mut header = vec!["method", "fit_size", "trials", "failed", "median_mm", "q1_mm", "q3_mm", "median_px", "q1_px", "q3_px"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(chain_columns(links));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for s in &report.summary {
        let mut row = vec![report.method.clone(), s.fit_size.to_string(), s.trials.to_string(), s.failed.to_string()];
        row.extend([s.median_mm, s.q1_mm, s.q3_mm, s.median_px, s.q1_px, s.q3_px].iter().map(|v| v.to_string()));
        row.extend((0..links).map(|l| s.chain_median_cm.get(l).map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// JSON summary: method, quantile method and per-fit-size statistics.
pub fn summary_json(report: &ErrorReport) -> serde_json::Value {
    serde_json::json!({
        "method": report.method,
        "quantile_method": report.quantile_method,
        "fit_sizes": report.summary,
    })
}

fn chain_columns(links: usize) -> Vec<String> {
    (0..links)
        .map(|l| if l + 1 == links { "chain_ee_cm".to_string() } else { format!("chain_l{l}_cm") })
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
