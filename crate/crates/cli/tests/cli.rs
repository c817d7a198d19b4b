use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stereo_sdr::bench::CameraPlacement;
use stereo_sdr::camera::StereoRig;
use stereo_sdr::kinematics::{load_robot, JointConfig};
use stereo_sdr::mask::MaskImage;
use stereo_sdr::render::{render_silhouette, RenderConfig};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stereo-sdr")).args(args).output().expect("binary runs")
}

fn fx(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("stderr has an error line");
    serde_json::from_str(line).expect("error is JSON")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

#[test]
fn no_arguments_prints_usage() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    let text = format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    assert!(text.contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_json_usage_error() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");
}

#[test]
fn malformed_config_reports_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[scene]\nn_configs = \"many\"\n").unwrap();
    let out = run(&["localize", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "parse");

    let out = run(&["localize", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(error_json(&out)["error"]["kind"], "io");
}

#[test]
fn render_identity_matches_golden() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("r.png");
    let out = run(&[
        "render",
        "--pose",
        "identity",
        "--robot",
        &fx("arm/arm.urdf"),
        "--calibration",
        &fx("calibration.toml"),
        "--out",
        png.to_str().unwrap(),
    ]);
    stdout_json(&out);
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(fixtures().join("golden/render_identity.png")).unwrap());
}

#[test]
fn render_default_placement_matches_golden_and_library() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("r.png");
    let q = "0.2,0.5,0.1,-1.2,0.15,1.0,0.0";
    stdout_json(&run(&["render", "--robot", &fx("arm/arm.urdf"), "--q", q, "--out", png.to_str().unwrap()]));
    assert_eq!(std::fs::read(&png).unwrap(), std::fs::read(fixtures().join("golden/render_default.png")).unwrap());

    let model = load_robot(&fixtures().join("arm/arm.urdf")).unwrap();
    let rig = stereo_sdr::bench::default_rig();
    let pose = CameraPlacement::default().pose().unwrap();
    let direct = render_silhouette(
        &model,
        &JointConfig(vec![0.2, 0.5, 0.1, -1.2, 0.15, 1.0, 0.0]),
        &pose,
        &rig.left,
        &RenderConfig::hard(640, 360, rig.clip),
    )
    .unwrap();
    assert_eq!(MaskImage::read_png(&png).unwrap(), direct);
}

#[test]
fn right_view_render_differs_from_left() {
    let dir = tempfile::tempdir().unwrap();
    let (l, r) = (dir.path().join("l.png"), dir.path().join("r.png"));
    stdout_json(&run(&["render", "--view", "left", "--out", l.to_str().unwrap()]));
    stdout_json(&run(&["render", "--view", "right", "--out", r.to_str().unwrap()]));
    assert_ne!(MaskImage::read_png(&l).unwrap(), MaskImage::read_png(&r).unwrap());
}

#[test]
fn bench_writes_one_row_per_fit_size() {
    let dir = tempfile::tempdir().unwrap();
    let baseline = dir.path().join("baseline.csv");
    std::fs::write(&baseline, "method,fit_size,median_mm,q1_mm,q3_mm\nmarker,3,4.0,3.0,5.0\n").unwrap();
    let out = run(&[
        "bench",
        "--config",
        &fx("scene.toml"),
        "--protocol",
        &fx("mcv.toml"),
        "--out",
        dir.path().to_str().unwrap(),
        "--baseline",
        baseline.to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["methods"].as_array().unwrap().len(), 2);

    for method in ["sdr", "sdr_icp"] {
        let mut r = csv::Reader::from_path(dir.path().join(format!("{method}_summary.csv"))).unwrap();
        let headers = r.headers().unwrap().clone();
        let col = headers.iter().position(|h| h == "fit_size").unwrap();
        let sizes: Vec<usize> = r.records().map(|rec| rec.unwrap()[col].parse().unwrap()).collect();
        assert_eq!(sizes, vec![3, 6, 9, 12]);
        let median = headers.iter().position(|h| h == "median_mm").unwrap();
        let mut r = csv::Reader::from_path(dir.path().join(format!("{method}_summary.csv"))).unwrap();
        for rec in r.records() {
            assert!(rec.unwrap()[median].parse::<f64>().unwrap().is_finite());
        }
    }
    // both methods fitted the same subsets
    let indices = |m: &str| -> Vec<String> {
        let mut r = csv::Reader::from_path(dir.path().join(format!("{m}_trials.csv"))).unwrap();
        r.records().map(|rec| rec.unwrap()[3].to_string()).collect()
    };
    assert_eq!(indices("sdr"), indices("sdr_icp"));

    let cmp = std::fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
    assert!(cmp.lines().any(|l| l.starts_with("marker,3,")));
    assert_eq!(cmp.lines().count(), 1 + 4 + 4 + 1);
    assert!(dir.path().join("summary.json").exists());
}

#[test]
fn localize_and_icp_improve_on_the_start() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["localize", "--config", &fx("scene.toml"), "--out", dir.path().to_str().unwrap(), "--write-masks"]));
    assert!(v["loss"].as_f64().unwrap() < v["initial_loss"].as_f64().unwrap());
    assert!(v["tool_centre_error_mm"].as_f64().unwrap().is_finite());
    assert!(dir.path().join("loss_trace.csv").exists());
    assert!(dir.path().join("observed/0_left.png").exists());
    assert!(dir.path().join("fitted/12_right.png").exists());

    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["icp", "--config", &fx("scene.toml"), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(v["phases"], 2);
    assert_eq!(v["phase_error_mm"].as_array().unwrap().len(), 2);
}

#[test]
fn swarm_writes_candidates() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["init-swarm", "--config", &fx("swarm.toml"), "--out", dir.path().to_str().unwrap()]));
    assert!(v["best_score"].as_f64().unwrap() < v["empty_loss"].as_f64().unwrap());
    let trace = std::fs::read_to_string(dir.path().join("swarm_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 1 + 10);
    let cands = std::fs::read_to_string(dir.path().join("candidates.csv")).unwrap();
    assert_eq!(cands.lines().count(), 1 + 3);
}

#[test]
fn breathe_compensates() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["breathe", "--config", &fx("breathe.toml"), "--out", dir.path().to_str().unwrap()]));
    assert!(v["deviation_m"].as_f64().unwrap() < 0.1 * v["uncompensated_deviation_m"].as_f64().unwrap());
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(log.starts_with("t,phase,"));
    assert_eq!(log.lines().count(), 1 + 500);
}

#[test]
fn cmm_writes_batch_with_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let v = stdout_json(&run(&["cmm", "--config", &fx("cmm.toml"), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(v["items"], 4);
    let manifest = std::fs::read_to_string(dir.path().join("provenance.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    for line in manifest.lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        let donor = rec["donor"].as_u64().unwrap() as usize;
        assert_eq!(rec["donor_visible"], donor != 2);
    }
    assert!(dir.path().join("3_image.png").exists());
}

#[test]
fn triangulate_recovers_points_and_flags_degenerate_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let out_csv = dir.path().join("tri.csv");
    let rig = StereoRig::load(&fixtures().join("calibration.toml")).unwrap();
    let v = stdout_json(&run(&[
        "triangulate",
        "--points",
        &fx("points.csv"),
        "--calibration",
        &fx("calibration.toml"),
        "--out",
        out_csv.to_str().unwrap(),
    ]));
    assert_eq!(v["points"], 3);
    assert_eq!(v["failed"], 1);
    let mut r = csv::Reader::from_path(&out_csv).unwrap();
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    // first pair: principal point with disparity f·b/z at z = 1.5 m
    let z: f64 = rows[0][2].parse().unwrap();
    assert!((z - rig.left.fx * rig.baseline() / (80.0 - 74.7)).abs() < 1e-9);
    assert_eq!(&rows[2][6], "degenerate_geometry");
}
