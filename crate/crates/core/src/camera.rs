//! Pinhole intrinsics, the stereo rig, clip-space projection and DLT
//! triangulation.
//!
//! Conventions: camera frames are x right, y down, z forward. Pixel
//! coordinates have their origin at the top-left image corner with pixel
//! centres at half-integers. Normalised device coordinates follow the
//! projection matrix below, so `u = (x_ndc + 1) w / 2` and
//! `v = (y_ndc + 1) h / 2`; NDC y therefore grows with the image row.

use std::path::Path;

use nalgebra::{Isometry3, Matrix3, Matrix4, Matrix4x3, Point2, Point3, Rotation3, Translation3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Triangulations whose 4x3 system has a larger condition number are rejected.
pub const DLT_CONDITION_LIMIT: f64 = 1e8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && (0.0..=self.width as f64).contains(&self.cx)
            && (0.0..=self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid intrinsics {self:?}")))
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project(&self, p: &Point3<f64>) -> Point2<f64> {
        Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn contains(&self, uv: &Point2<f64>) -> bool {
        uv.x >= 0.0 && uv.y >= 0.0 && uv.x <= self.width as f64 && uv.y <= self.height as f64
    }

    /// Intrinsics for the same camera resampled to `width x height`.
    pub fn resized(&self, width: usize, height: usize) -> Intrinsics {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Intrinsics {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Move the principal point by `-t` without any bounds check.
    pub fn shifted(&self, tx: f64, ty: f64) -> Intrinsics {
        Intrinsics {
            cx: self.cx - tx,
            cy: self.cy - ty,
            ..*self
        }
    }
}

/// Intrinsics of a `(w', h')` crop whose top-left corner sits at `offset`.
pub fn adjust_intrinsics_for_crop(k: &Intrinsics, offset: (f64, f64), size: (usize, usize)) -> Result<Intrinsics> {
    let (tx, ty) = offset;
    let (w, h) = size;
    if tx < 0.0 || ty < 0.0 || tx + w as f64 > k.width as f64 || ty + h as f64 > k.height as f64 || w == 0 || h == 0 {
        return Err(Error::CropOutOfBounds);
    }
    Ok(Intrinsics {
        width: w,
        height: h,
        ..k.shifted(tx, ty)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipParams {
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for ClipParams {
    fn default() -> Self {
        ClipParams { z_min: 0.1, z_max: 10.0 }
    }
}

impl ClipParams {
    pub fn validate(&self) -> Result<()> {
        if 0.0 < self.z_min && self.z_min < self.z_max {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid clip range {self:?}")))
        }
    }
}

/// OpenGL-style projection matrix built from pinhole intrinsics.
pub fn perspective_projection(k: &Intrinsics, clip: &ClipParams) -> Matrix4<f64> {
    let (w, h) = (k.width as f64, k.height as f64);
    let (n, f) = (clip.z_min, clip.z_max);
    Matrix4::new(
        2.0 * k.fx / w, 0.0, 2.0 * k.cx / w - 1.0, 0.0,
        0.0, 2.0 * k.fy / h, 2.0 * k.cy / h - 1.0, 0.0,
        0.0, 0.0, (f + n) / (f - n), 2.0 * f * n / (n - f),
        0.0, 0.0, 1.0, 0.0,
    )
}

/// Clip-space vertices `P * pose * v` for every vertex set.
pub fn project_to_clip(
    proj: &Matrix4<f64>,
    pose: &Isometry3<f64>,
    vertex_sets: &[Vec<Point3<f64>>],
) -> Vec<Vec<Vector4<f64>>> {
    let m = proj * pose.to_homogeneous();
    vertex_sets
        .iter()
        .map(|set| set.iter().map(|v| m * v.to_homogeneous()).collect())
        .collect()
}

/// Pixel coordinates of a clip-space vertex (after perspective division).
pub fn clip_to_pixel(c: &Vector4<f64>, width: usize, height: usize) -> Point2<f64> {
    Point2::new(
        (c.x / c.w + 1.0) * 0.5 * width as f64,
        (c.y / c.w + 1.0) * 0.5 * height as f64,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoRig {
    pub left: Intrinsics,
    pub right: Intrinsics,
    /// Maps left-camera coordinates into right-camera coordinates.
    pub left_to_right: Isometry3<f64>,
    pub clip: ClipParams,
}

impl StereoRig {
    pub fn new(left: Intrinsics, right: Intrinsics, left_to_right: Isometry3<f64>, clip: ClipParams) -> Result<Self> {
        left.validate()?;
        right.validate()?;
        clip.validate()?;
        if left_to_right.translation.vector.norm() <= 0.0 {
            return Err(Error::InvalidConfig("stereo baseline must be non-zero".into()));
        }
        Ok(StereoRig { left, right, left_to_right, clip })
    }

    /// Horizontal rig: right camera displaced by `baseline` along +x of the left camera.
    pub fn rectified(k: Intrinsics, baseline: f64, clip: ClipParams) -> Result<Self> {
        StereoRig::new(k, k, Isometry3::translation(-baseline, 0.0, 0.0), clip)
    }

    pub fn baseline(&self) -> f64 {
        self.left_to_right.translation.vector.norm()
    }

    /// Right-camera pose of the robot given its left-camera pose.
    pub fn right_pose(&self, left_pose: &Isometry3<f64>) -> Isometry3<f64> {
        self.left_to_right * left_pose
    }

    pub fn intrinsics(&self, view: View) -> &Intrinsics {
        match view {
            View::Left => &self.left,
            View::Right => &self.right,
        }
    }

    /// Same rig with both eyes resampled to the given resolution.
    pub fn resized(&self, width: usize, height: usize) -> StereoRig {
        StereoRig {
            left: self.left.resized(width, height),
            right: self.right.resized(width, height),
            ..*self
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CalibrationFile = toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        file.into_rig()
    }

    pub fn to_file(&self) -> CalibrationFile {
        let m = self.left_to_right.to_homogeneous();
        let mut flat = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                flat[4 * r + c] = m[(r, c)];
            }
        }
        CalibrationFile {
            left: self.left,
            right: self.right,
            left_to_right: flat.to_vec(),
            clip: self.clip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Left,
    Right,
}

impl View {
    pub const BOTH: [View; 2] = [View::Left, View::Right];

    pub fn name(self) -> &'static str {
        match self {
            View::Left => "left",
            View::Right => "right",
        }
    }
}

/// On-disk stereo calibration (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub left: Intrinsics,
    pub right: Intrinsics,
    /// Row-major 4x4 homogeneous transform from left to right camera coordinates.
    pub left_to_right: Vec<f64>,
    #[serde(default)]
    pub clip: ClipParams,
}

impl CalibrationFile {
    pub fn into_rig(self) -> Result<StereoRig> {
        if self.left_to_right.len() != 16 {
            return Err(Error::InvalidConfig(format!(
                "left_to_right needs 16 values, got {}",
                self.left_to_right.len()
            )));
        }
        let m = Matrix4::from_row_slice(&self.left_to_right);
        let iso = isometry_from_matrix(&m)?;
        StereoRig::new(self.left, self.right, iso, self.clip)
    }
}

/// Convert a 4x4 rigid transform, rejecting anything that is not one.
pub fn isometry_from_matrix(m: &Matrix4<f64>) -> Result<Isometry3<f64>> {
    let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
    let ortho = (r.transpose() * r - Matrix3::identity()).norm();
    let bottom_ok = (m[(3, 0)].abs() + m[(3, 1)].abs() + m[(3, 2)].abs() + (m[(3, 3)] - 1.0).abs()) < 1e-9;
    if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 || !bottom_ok {
        return Err(Error::InvalidConfig("matrix is not a rigid transform".into()));
    }
    let rot = Rotation3::from_matrix_unchecked(r);
    Ok(Isometry3::from_parts(
        Translation3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]),
        rot.into(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    /// Point in the left camera frame, metres.
    pub point: Point3<f64>,
    pub reprojection_left: f64,
    pub reprojection_right: f64,
    pub condition: f64,
}

/// Linear (DLT) triangulation of a left/right pixel correspondence.
pub fn triangulate_dlt(rig: &StereoRig, uv_left: Point2<f64>, uv_right: Point2<f64>) -> Result<Triangulation> {
    if !rig.left.contains(&uv_left) || !rig.right.contains(&uv_right) {
        return Err(Error::Precondition("pixel outside image".into()));
    }
    let p_left = rig.left.matrix() * Matrix4::identity().fixed_view::<3, 4>(0, 0);
    let p_right = rig.right.matrix() * rig.left_to_right.to_homogeneous().fixed_view::<3, 4>(0, 0);
    let mut a = Matrix4::zeros();
    for (k, (p, uv)) in [(p_left, uv_left), (p_right, uv_right)].iter().enumerate() {
        a.set_row(2 * k, &(p.row(2) * uv.x - p.row(0)));
        a.set_row(2 * k + 1, &(p.row(2) * uv.y - p.row(1)));
    }
    let lhs: Matrix4x3<f64> = a.fixed_view::<4, 3>(0, 0).into_owned();
    let rhs: Vector4<f64> = -a.column(3);
    // Householder QR; the singular values of A are those of the 3×3 factor R
    let qr = lhs.qr();
    let r = qr.r();
    let sv = r.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(condition <= DLT_CONDITION_LIMIT) {
        return Err(Error::DegenerateGeometry(format!(
            "near-parallel rays (condition number {condition:.3e})"
        )));
    }
    let x = r
        .solve_upper_triangular(&(qr.q().transpose() * rhs))
        .ok_or_else(|| Error::DegenerateGeometry("singular triangulation system".into()))?;
    let point = Point3::new(x[0], x[1], x[2]);
    let reprojection_left = (rig.left.project(&point) - uv_left).norm();
    let reprojection_right = (rig.right.project(&(rig.left_to_right * point)) - uv_right).norm();
    Ok(Triangulation {
        point,
        reprojection_left,
        reprojection_right,
        condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn hd() -> Intrinsics {
        Intrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    #[test]
    fn crop_shifts_principal_point() {
        let k = adjust_intrinsics_for_crop(&hd(), (400.0, 200.0), (800, 600)).unwrap();
        assert_eq!((k.cx, k.cy, k.fx, k.fy), (560.0, 340.0, 1000.0, 1000.0));
        assert_eq!((k.width, k.height), (800, 600));
        assert_eq!(adjust_intrinsics_for_crop(&hd(), (0.0, 0.0), (1920, 1080)).unwrap(), hd());
        let back = k.shifted(-400.0, -200.0);
        assert_eq!((back.cx, back.cy), (960.0, 540.0));
    }

    #[test]
    fn crop_outside_image() {
        assert!(matches!(
            adjust_intrinsics_for_crop(&hd(), (1800.0, 0.0), (200, 100)),
            Err(Error::CropOutOfBounds)
        ));
    }

    #[test]
    fn crops_compose_additively() {
        let a = adjust_intrinsics_for_crop(&hd(), (100.0, 50.0), (1000, 800)).unwrap();
        let b = adjust_intrinsics_for_crop(&a, (30.0, 20.0), (500, 400)).unwrap();
        let c = adjust_intrinsics_for_crop(&hd(), (130.0, 70.0), (500, 400)).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn depth_maps_to_ndc_range() {
        let clip = ClipParams { z_min: 0.1, z_max: 10.0 };
        let p = perspective_projection(&hd(), &clip);
        let near = p * Vector4::new(0.0, 0.0, 0.1, 1.0);
        let far = p * Vector4::new(0.0, 0.0, 10.0, 1.0);
        assert_relative_eq!(near.z / near.w, -1.0, epsilon = 1e-12);
        assert_relative_eq!(far.z / far.w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ndc_pixels_match_pinhole() {
        let k = hd();
        let p = perspective_projection(&k, &ClipParams::default());
        let x = Point3::new(0.3, -0.2, 1.7);
        let c = p * x.to_homogeneous();
        let uv = clip_to_pixel(&c, k.width, k.height);
        assert_relative_eq!(uv, k.project(&x), epsilon = 1e-9);
        assert_relative_eq!(c.w, 1.7, epsilon = 1e-15);
    }

    #[test]
    fn behind_camera_has_negative_w() {
        let p = perspective_projection(&hd(), &ClipParams::default());
        let c = project_to_clip(&p, &Isometry3::identity(), &[vec![Point3::new(0.0, 0.0, -1.0)]]);
        assert!(c[0][0].w < 0.0);
    }

    #[test]
    fn rectified_disparity_depth() {
        let k = hd();
        let rig = StereoRig::rectified(k, 0.12, ClipParams::default()).unwrap();
        let d = 40.0;
        let t = triangulate_dlt(&rig, Point2::new(1000.0, 500.0), Point2::new(1000.0 - d, 500.0)).unwrap();
        assert_relative_eq!(t.point.z, 1000.0 * 0.12 / d, epsilon = 1e-9);
    }

    #[test]
    fn zero_baseline_is_degenerate() {
        let k = hd();
        let rig = StereoRig {
            left: k,
            right: k,
            left_to_right: Isometry3::identity(),
            clip: ClipParams::default(),
        };
        let uv = Point2::new(700.0, 400.0);
        assert!(matches!(triangulate_dlt(&rig, uv, uv), Err(Error::DegenerateGeometry(_))));
        assert!(StereoRig::new(k, k, Isometry3::identity(), ClipParams::default()).is_err());
    }

    #[test]
    fn calibration_file_round_trip() {
        let rig = StereoRig::rectified(hd(), 0.12, ClipParams::default()).unwrap();
        let text = toml::to_string(&rig.to_file()).unwrap();
        let back: CalibrationFile = toml::from_str(&text).unwrap();
        let back = back.into_rig().unwrap();
        assert_relative_eq!(back.left_to_right.translation.vector, rig.left_to_right.translation.vector);
        assert_eq!(back.left, rig.left);
    }
}
