use nalgebra::{Isometry3, Point3, Translation3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stereo_sdr::bench::{synthetic_arm, CameraPlacement, ConfigSampler};
use stereo_sdr::camera::{ClipParams, Intrinsics};
use stereo_sdr::kinematics::JointConfig;
use stereo_sdr::mask::{iou, MaskImage};
use stereo_sdr::render::{render_silhouette, RenderConfig};

fn square_camera(size: usize) -> Intrinsics {
    // same field of view at every resolution
    let f = 0.8 * size as f64;
    Intrinsics::new(f, f, 0.5 * size as f64, 0.5 * size as f64, size, size).unwrap()
}

fn configs() -> Vec<JointConfig> {
    [
        [0.2, 0.5, 0.1, -1.2, 0.15, 1.0, 0.0],
        [-0.6, 0.2, 0.4, -0.8, -0.3, 0.6, 0.5],
        [0.9, 0.8, -0.2, -1.6, 0.4, 1.2, -0.4],
        [0.0, 0.0, 0.0, -0.3, 0.0, 0.3, 0.0],
    ]
    .iter()
    .map(|q| JointConfig(q.to_vec()))
    .collect()
}

fn hard(model: &stereo_sdr::kinematics::RobotModel, q: &JointConfig, pose: &Isometry3<f64>, size: usize) -> MaskImage {
    let k = square_camera(size);
    render_silhouette(model, q, pose, &k, &RenderConfig::hard(size, size, ClipParams::default())).unwrap()
}

#[test]
fn silhouette_area_converges_with_resolution() {
    // Hard edges snap to pixel centres, so a single scene's area wobbles by a
    // perimeter's worth of half pixels; the shrinking shows up in the mean.
    let arm = synthetic_arm();
    let pose = CameraPlacement::default().pose().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut qs = configs();
    qs.extend((0..12).map(|_| ConfigSampler::default().sample(&arm, &mut rng)));
    let mut mean = [0.0; 2];
    for q in &qs {
        let frac: Vec<f64> = [128, 256, 512]
            .iter()
            .map(|&n| hard(&arm, q, &pose, n).area() / (n * n) as f64)
            .collect();
        assert!(frac[0] > 0.0, "arm out of view for {q:?}");
        let diffs: Vec<f64> = frac.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        assert!(diffs[1] < 2e-3, "area fractions {frac:?}");
        mean[0] += diffs[0] / qs.len() as f64;
        mean[1] += diffs[1] / qs.len() as f64;
    }
    assert!(mean[1] < mean[0], "mean successive differences {mean:?}");
}

fn shifted(m: &MaskImage, k: i64) -> MaskImage {
    MaskImage::from_fn(m.width(), m.height(), |x, y| {
        let sx = x as i64 - k;
        if sx >= 0 && (sx as usize) < m.width() {
            m.get(sx as usize, y)
        } else {
            0.0
        }
    })
}

#[test]
fn lateral_translation_shifts_the_silhouette() {
    // A lateral move is a pure image shift only up to parallax between near and far
    // links; at 1.5 m the arm's depth extent costs a few percent IoU by 10 px. Viewing
    // the same image footprint from 12 m (focal length scaled to match) leaves the
    // rasterisation itself as the only source of disagreement.
    let arm = synthetic_arm();
    let size = 512;
    let near = CameraPlacement::default();
    let placement = CameraPlacement { distance: 12.0, ..near };
    let f = 0.8 * size as f64 * placement.distance / near.distance;
    let k = Intrinsics::new(f, f, 0.5 * size as f64, 0.5 * size as f64, size, size).unwrap();
    let clip = ClipParams { z_max: 100.0, ..Default::default() };
    let pose = placement.pose().unwrap();
    let depth = (pose * Point3::from(placement.target)).z;
    let render = |q: &JointConfig, p: &Isometry3<f64>| {
        render_silhouette(&arm, q, p, &k, &RenderConfig::hard(size, size, clip)).unwrap()
    };
    for q in configs() {
        let base = render(&q, &pose);
        assert!(base.area() > 1000.0);
        for px in [1i64, 3, 5, 10] {
            let dx = px as f64 * depth / k.fx;
            let m = render(&q, &(Translation3::new(dx, 0.0, 0.0) * pose));
            let score = iou(&m, &shifted(&base, px)).unwrap();
            assert!(score > 0.98, "shift {px} px: IoU {score}");
        }
    }
}

#[test]
fn one_pixel_shift_holds_at_working_distance() {
    let arm = synthetic_arm();
    let size = 512;
    let k = square_camera(size);
    let placement = CameraPlacement::default();
    let pose = placement.pose().unwrap();
    let depth = (pose * Point3::from(placement.target)).z;
    for q in configs() {
        let base = hard(&arm, &q, &pose, size);
        let moved = Translation3::new(depth / k.fx, 0.0, 0.0) * pose;
        let score = iou(&hard(&arm, &q, &moved, size), &shifted(&base, 1)).unwrap();
        assert!(score > 0.98, "IoU {score}");
    }
}
