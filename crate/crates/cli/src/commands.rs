use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use nalgebra::{Isometry3, Point2};
use serde_json::{json, Value};
use stereo_sdr::bench::{
    merge_reports, run_mcv, summary_json, synthetic_arm, tool_centre_deviation, write_summary_csv, write_trials_csv,
    ErrorReport, InitStrategy, McvSettings, CameraPlacement,
};
use stereo_sdr::breathing::{relative_motion_deviation, simulate_drilling, write_drilling_log, BreathingModel, Estimator};
use stereo_sdr::camera::{triangulate_dlt, View};
use stereo_sdr::kinematics::{load_robot, JointConfig};
use stereo_sdr::mask::MaskImage;
use stereo_sdr::objective::{StereoMasks, StereoProblem};
use stereo_sdr::pose::{multi_start_refine, sdr_refine, write_loss_trace, PoseParam, RefineOutcome};
use stereo_sdr::render::{render_silhouette, RenderConfig};
use stereo_sdr::seg::{cmm_compose, sdr_icp, write_cmm_batch};
use stereo_sdr::swarm::{cso_initialize, write_swarm_trace, SwarmOutcome};
use stereo_sdr::{Error, Result};

use crate::config::{
    input_dir, matrix_to_isometry, read_toml, BreatheConfig, CmmFileConfig, InitConfig, Loaded, PipelineConfig, ProtocolConfig,
};

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::parse("summary", e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes `summary.json` into `out` and returns the same value for stdout.
fn finish(out: &Path, v: Value) -> Result<Value> {
    write_json(&out.join("summary.json"), &v)?;
    Ok(v)
}

fn matrix_json(iso: &Isometry3<f64>) -> Value {
    let m = iso.to_homogeneous();
    json!((0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>())
}

fn write_masks(dir: &Path, masks: &[StereoMasks]) -> Result<()> {
    create_dir(dir)?;
    for (i, m) in masks.iter().enumerate() {
        m.left.write_png(&dir.join(format!("{i}_left.png")))?;
        m.right.write_png(&dir.join(format!("{i}_right.png")))?;
    }
    Ok(())
}

fn run_swarm(cfg: &PipelineConfig, scene: &Loaded, observations: &[StereoMasks], seed: u64) -> Result<SwarmOutcome> {
    cso_initialize(&scene.model, &scene.configs, observations, &scene.rig, &cfg.swarm, seed)
}

/// Starting poses: one fixed pose, or the swarm's candidates.
fn starts(cfg: &PipelineConfig, scene: &Loaded, observations: &[StereoMasks], out: &Path) -> Result<Vec<PoseParam>> {
    let repr = cfg.objective.rotation;
    match cfg.init {
        InitConfig::Cso { seed } => {
            let sw = run_swarm(cfg, scene, observations, seed)?;
            write_swarm_trace(&out.join("swarm_trace.csv"), &sw.trace)?;
            Ok(sw.candidates.iter().map(|c| c.pose.normalized(repr)).collect())
        }
        init => Ok(vec![PoseParam::from_isometry(&init.fixed_pose(scene.gt_pose())?.expect("fixed init"))]),
    }
}

fn pose_report(cfg: &PipelineConfig, scene: &Loaded, pose: &PoseParam) -> Result<Value> {
    let iso = pose.to_isometry(cfg.objective.rotation);
    let mut v = json!({ "pose": pose, "matrix": matrix_json(&iso) });
    if let Some(gt) = scene.gt_pose() {
        v["tool_centre_error_mm"] = json!(tool_centre_deviation(&scene.model, &scene.configs, &iso, &gt)? * 1e3);
    }
    Ok(v)
}

pub fn localize(config: &Path, out: &Path, masks: bool) -> Result<Value> {
    let cfg: PipelineConfig = read_toml(config)?;
    let scene = cfg.scene.load(&base_dir(config))?;
    create_dir(out)?;
    let observations = scene.source.segment_all(scene.configs.len(), None)?;
    let inits = starts(&cfg, &scene, &observations, out)?;
    let problem = StereoProblem::new(&scene.model, &scene.configs, &observations, &scene.rig, &cfg.objective)?;
    let outcome: RefineOutcome = if inits.len() == 1 {
        sdr_refine(&inits[0], &problem, &cfg.optim)?
    } else {
        multi_start_refine(&inits, &problem, &cfg.optim)?
    };
    write_loss_trace(&out.join("loss_trace.csv"), &outcome.trace)?;
    if masks {
        write_masks(&out.join("observed"), &observations)?;
        write_masks(&out.join("fitted"), &problem.renders(&outcome.pose.to_isometry(cfg.objective.rotation))?.into_iter().map(|[left, right]| StereoMasks { left, right }).collect::<Vec<_>>())?;
    }
    let mut v = pose_report(&cfg, &scene, &outcome.pose)?;
    v["command"] = json!("localize");
    v["configs"] = json!(scene.configs.len());
    v["starts"] = json!(inits.len());
    v["loss"] = json!(outcome.loss);
    v["initial_loss"] = json!(outcome.initial_loss);
    v["iterations"] = json!(outcome.iterations);
    v["converged"] = json!(outcome.converged);
    finish(out, v)
}

pub fn init_swarm(config: &Path, out: &Path) -> Result<Value> {
    let cfg: PipelineConfig = read_toml(config)?;
    let seed = match cfg.init {
        InitConfig::Cso { seed } => seed,
        _ => 0,
    };
    let scene = cfg.scene.load(&base_dir(config))?;
    create_dir(out)?;
    let observations = scene.source.segment_all(scene.configs.len(), None)?;
    let sw = run_swarm(&cfg, &scene, &observations, seed)?;
    write_swarm_trace(&out.join("swarm_trace.csv"), &sw.trace)?;

    let path = out.join("candidates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let mut header = vec!["rank".to_string(), "score".to_string()];
    header.extend((0..9).map(|i| format!("r{i}")));
    header.extend(["tx", "ty", "tz"].map(String::from));
    w.write_record(&header).map_err(|e| Error::parse(path.display().to_string(), e))?;
    let repr = cfg.objective.rotation;
    let mut best = Vec::new();
    for (rank, c) in sw.candidates.iter().enumerate() {
        let mut row = vec![rank.to_string(), c.score.to_string()];
        row.extend(c.pose.as_array().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(|e| Error::parse(path.display().to_string(), e))?;
        if let Some(gt) = scene.gt_pose() {
            best.push(tool_centre_deviation(&scene.model, &scene.configs, &c.pose.normalized(repr).to_isometry(repr), &gt)? * 1e3);
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut v = json!({
        "command": "init-swarm",
        "particles": cfg.swarm.n_particles,
        "iterations": cfg.swarm.iterations,
        "best_score": sw.trace.last(),
        "empty_loss": sw.empty_loss,
        "candidates": sw.candidates.len(),
    });
    if !best.is_empty() {
        v["candidate_error_mm"] = json!(best);
    }
    finish(out, v)
}

pub fn icp(config: &Path, out: &Path, masks: bool) -> Result<Value> {
    let cfg: PipelineConfig = read_toml(config)?;
    let scene = cfg.scene.load(&base_dir(config))?;
    create_dir(out)?;
    let init = match cfg.init {
        InitConfig::Cso { .. } => {
            let observations = scene.source.segment_all(scene.configs.len(), None)?;
            starts(&cfg, &scene, &observations, out)?[0]
        }
        _ => starts(&cfg, &scene, &[], out)?[0],
    };
    let o = sdr_icp(&init, &scene.model, &scene.configs, &scene.rig, &scene.source, &cfg.icp, &cfg.objective, &cfg.optim)?;
    let trace: Vec<_> = o.phases.iter().flat_map(|p| p.trace.iter().copied()).collect();
    write_loss_trace(&out.join("loss_trace.csv"), &trace)?;
    if masks {
        for (i, m) in o.masks.iter().enumerate() {
            write_masks(&out.join(format!("phase_{i}")), m)?;
        }
    }
    let mut v = pose_report(&cfg, &scene, &o.pose)?;
    v["command"] = json!("icp");
    v["loss"] = json!(o.loss);
    v["phases"] = json!(o.phases.len());
    if let Some(gt) = scene.gt_pose() {
        let repr = cfg.objective.rotation;
        let per_phase = o
            .phases
            .iter()
            .map(|p| tool_centre_deviation(&scene.model, &scene.configs, &p.end_pose.to_isometry(repr), &gt).map(|d| d * 1e3))
            .collect::<Result<Vec<_>>>()?;
        v["phase_error_mm"] = json!(per_phase);
    }
    finish(out, v)
}

/// Externally computed baseline summary: rows of `method,fit_size,median_mm,q1_mm,q3_mm`.
#[derive(Debug, serde::Deserialize)]
struct BaselineRow {
    method: String,
    fit_size: usize,
    median_mm: f64,
    q1_mm: f64,
    q3_mm: f64,
}

fn read_baseline(path: &Path) -> Result<Vec<BaselineRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<BaselineRow>, _>>()
        .map_err(|e| Error::parse(path.display().to_string(), e))
}

pub fn bench(config: &Path, protocol: &Path, out: &Path, baselines: &[PathBuf]) -> Result<Value> {
    let cfg: PipelineConfig = read_toml(config)?;
    let proto: ProtocolConfig = read_toml(protocol)?;
    let scene = cfg.scene.load(&base_dir(config))?;
    let synthetic = scene
        .scene
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("bench needs a synthetic scene (no masks_dir)".into()))?;
    let init = match cfg.init {
        InitConfig::PerturbedTruth {
            translation, rotation_deg, ..
        } => InitStrategy::PerturbedTruth { translation, rotation_deg },
        InitConfig::Cso { .. } => InitStrategy::Cso { swarm: cfg.swarm },
        InitConfig::Matrix { .. } => return Err(Error::InvalidConfig("bench supports perturbed_truth or cso init".into())),
    };
    let settings = McvSettings {
        objective: cfg.objective,
        optim: cfg.optim,
        icp: cfg.icp,
    };
    let baseline_rows = baselines.iter().map(|p| read_baseline(p)).collect::<Result<Vec<_>>>()?;
    create_dir(out)?;
    let mut reports: Vec<ErrorReport> = Vec::new();
    for &method in &proto.methods {
        let report = run_mcv(synthetic, &proto.protocol(), method, &scene.source, &init, &settings)?;
        write_summary_csv(&out.join(format!("{}_summary.csv", method.name())), &report)?;
        write_trials_csv(&out.join(format!("{}_trials.csv", method.name())), &report)?;
        reports.push(merge_reports(std::slice::from_ref(&report))?);
    }

    // side-by-side table of our methods and any external baselines
    let path = out.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::parse(path.display().to_string(), e))?;
    w.write_record(["method", "fit_size", "median_mm", "q1_mm", "q3_mm"]).map_err(|e| Error::parse(path.display().to_string(), e))?;
    for r in &reports {
        for s in &r.summary {
            w.write_record([r.method.clone(), s.fit_size.to_string(), s.median_mm.to_string(), s.q1_mm.to_string(), s.q3_mm.to_string()])
                .map_err(|e| Error::parse(path.display().to_string(), e))?;
        }
    }
    for b in baseline_rows.iter().flatten() {
        w.write_record([b.method.clone(), b.fit_size.to_string(), b.median_mm.to_string(), b.q1_mm.to_string(), b.q3_mm.to_string()])
            .map_err(|e| Error::parse(path.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let v = json!({
        "command": "bench",
        "scene_configs": synthetic.configs.len(),
        "methods": reports.iter().map(summary_json).collect::<Vec<_>>(),
    });
    finish(out, v)
}

pub fn breathe(config: &Path, out: &Path) -> Result<Value> {
    let cfg: BreatheConfig = read_toml(config)?;
    let model = cfg.model(&base_dir(config))?;
    create_dir(out)?;
    let log = simulate_drilling(&model, &cfg.scenario, &cfg.fit, &cfg.gains)?;
    write_drilling_log(&out.join("log.csv"), &log)?;

    // references on the same time base: a motionless patient, and no compensation
    let mut still = cfg.scenario.clone();
    still.breathing = [BreathingModel::default(); 3];
    let still = simulate_drilling(&model, &still, &cfg.fit, &cfg.gains)?;
    let mut off = cfg.scenario.clone();
    off.estimator = Estimator::Off;
    let off = simulate_drilling(&model, &off, &cfg.fit, &cfg.gains)?;

    let compensated = log.rows.iter().filter(|r| r.phase.compensated());
    let max_lateral = compensated.clone().map(|r| r.lateral_error).fold(0.0, f64::max);
    let last = log.rows.last();
    let v = json!({
        "command": "breathe",
        "estimator": cfg.scenario.estimator,
        "rows": log.rows.len(),
        "fits": log.fits,
        "deviation_m": relative_motion_deviation(&log, &still)?,
        "uncompensated_deviation_m": relative_motion_deviation(&off, &still)?,
        "max_lateral_error_m": max_lateral,
        "fallback_steps": log.rows.iter().filter(|r| r.fallback).count(),
        "final_depth_m": last.map(|r| r.depth),
    });
    finish(out, v)
}

/// Stand-in RGB frame for a mask: a per-item background gradient with the robot painted in grey.
fn synthetic_frame(mask: &MaskImage, index: usize) -> RgbImage {
    let tint = [(index * 53 % 200) as u8, (index * 97 % 200) as u8, (index * 29 % 200) as u8];
    RgbImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        if mask.get(x as usize, y as usize) > 0.5 {
            let shade = 120 + ((x + y) % 64) as u8;
            Rgb([shade, shade, shade.saturating_add(10)])
        } else {
            Rgb([tint[0].wrapping_add((x / 8) as u8), tint[1].wrapping_add((y / 8) as u8), tint[2]])
        }
    })
}

pub fn cmm(config: &Path, out: &Path) -> Result<Value> {
    let cfg: CmmFileConfig = read_toml(config)?;
    let base = base_dir(config);
    let (images, masks) = match &cfg.input_dir {
        Some(dir) => {
            let dir = input_dir(&base, dir);
            let (mut images, mut masks) = (Vec::new(), Vec::new());
            for i in 0.. {
                let img = dir.join(format!("{i}_image.png"));
                if !img.exists() {
                    break;
                }
                images.push(image::open(&img).map_err(|e| Error::parse(img.display().to_string(), e))?.to_rgb8());
                masks.push(MaskImage::read_png(&dir.join(format!("{i}_mask.png")))?);
            }
            (images, masks)
        }
        None => {
            let scene = cfg.scene.load(&base)?;
            let left = scene.source.segment_all(scene.configs.len(), None)?.into_iter().map(|m| m.left).collect::<Vec<_>>();
            (left.iter().enumerate().map(|(i, m)| synthetic_frame(m, i)).collect(), left)
        }
    };
    let visibility = if cfg.visibility.is_empty() { vec![true; images.len()] } else { cfg.visibility.clone() };
    let items = cmm_compose(&images, &masks, &visibility, &cfg.cmm)?;
    write_cmm_batch(out, &items)?;
    let v = json!({
        "command": "cmm",
        "inputs": images.len(),
        "items": items.len(),
        "donor_visible": items.iter().filter(|i| i.record.donor_visible).count(),
    });
    finish(out, v)
}

pub struct RenderArgs<'a> {
    pub robot: Option<&'a Path>,
    pub calibration: Option<&'a Path>,
    pub pose: &'a str,
    pub q: Option<&'a str>,
    pub view: View,
    pub softness: f64,
    pub out: &'a Path,
}

fn parse_pose(spec: &str) -> Result<Isometry3<f64>> {
    match spec {
        "identity" => Ok(Isometry3::identity()),
        "default" => CameraPlacement::default().pose(),
        path => {
            #[derive(serde::Deserialize)]
            struct PoseFile {
                matrix: [[f64; 4]; 4],
            }
            let f: PoseFile = read_toml(Path::new(path))?;
            matrix_to_isometry(&f.matrix)
        }
    }
}

fn parse_q(text: &str) -> Result<JointConfig> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::parse("--q", e)))
        .collect::<Result<Vec<_>>>()
        .map(JointConfig)
}

pub fn render(a: &RenderArgs) -> Result<Value> {
    let model = match a.robot {
        Some(p) => load_robot(p)?,
        None => synthetic_arm(),
    };
    let rig = match a.calibration {
        Some(p) => stereo_sdr::camera::StereoRig::load(p)?,
        None => stereo_sdr::bench::default_rig(),
    };
    let q = match a.q {
        Some(t) => parse_q(t)?,
        None => JointConfig::zeros(model.dof()),
    };
    let left = parse_pose(a.pose)?;
    let pose = match a.view {
        View::Left => left,
        View::Right => rig.right_pose(&left),
    };
    let k = rig.intrinsics(a.view);
    let cfg = RenderConfig::hard(k.width, k.height, rig.clip).with_softness(a.softness);
    let mask = render_silhouette(&model, &q, &pose, k, &cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    mask.write_png(a.out)?;
    Ok(json!({
        "command": "render",
        "output": a.out,
        "width": mask.width(),
        "height": mask.height(),
        "area_px": mask.area(),
    }))
}

#[derive(Debug, serde::Deserialize)]
struct PixelPair {
    u_left: f64,
    v_left: f64,
    u_right: f64,
    v_right: f64,
}

pub fn triangulate(points: &Path, calibration: Option<&Path>, out: &Path) -> Result<Value> {
    let rig = match calibration {
        Some(p) => stereo_sdr::camera::StereoRig::load(p)?,
        None => stereo_sdr::bench::default_rig(),
    };
    let ctx = points.display().to_string();
    let mut r = csv::Reader::from_path(points).map_err(|e| Error::parse(&ctx, e))?;
    let pairs = r
        .deserialize()
        .collect::<std::result::Result<Vec<PixelPair>, _>>()
        .map_err(|e| Error::parse(&ctx, e))?;
    let mut w = csv::Writer::from_path(out).map_err(|e| Error::parse(out.display().to_string(), e))?;
    w.write_record(["x", "y", "z", "reprojection_left_px", "reprojection_right_px", "condition", "error"])
        .map_err(|e| Error::parse(out.display().to_string(), e))?;
    let mut failed = 0;
    for p in &pairs {
        let row = match triangulate_dlt(&rig, Point2::new(p.u_left, p.v_left), Point2::new(p.u_right, p.v_right)) {
            Ok(t) => vec![
                t.point.x.to_string(),
                t.point.y.to_string(),
                t.point.z.to_string(),
                t.reprojection_left.to_string(),
                t.reprojection_right.to_string(),
                t.condition.to_string(),
                String::new(),
            ],
            Err(e) => {
                failed += 1;
                let mut row = vec![String::new(); 6];
                row.push(e.kind().to_string());
                row
            }
        };
        w.write_record(&row).map_err(|e| Error::parse(out.display().to_string(), e))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(json!({
        "command": "triangulate",
        "points": pairs.len(),
        "failed": failed,
        "output": out,
    }))
}
