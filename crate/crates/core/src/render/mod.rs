//! Silhouette rendering of posed meshes, with pose gradients.

mod raster;

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{Isometry3, Matrix3, Matrix4, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{perspective_projection, ClipParams, Intrinsics};
use crate::dual::{Dual, Grad, NPARAM};
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};
use crate::mask::MaskImage;
use crate::mesh::TriangleMesh;
use crate::pose::{DecodedPose, PoseParam, RotationRepr};

pub use raster::PixelRun;
use raster::{Poly, Projected, Raster};

pub const DEFAULT_SOFTNESS: f64 = 1.5;

static RENDER_COUNT: AtomicU64 = AtomicU64::new(0);
static TRIANGLES_RENDERED: AtomicU64 = AtomicU64::new(0);

/// Process-wide counters: number of renders and of triangles fed to them.
pub fn render_counters() -> (u64, u64) {
    (RENDER_COUNT.load(Ordering::Relaxed), TRIANGLES_RENDERED.load(Ordering::Relaxed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Edge transition width in pixels; 0 renders hard binary masks.
    #[serde(default = "default_softness")]
    pub softness: f64,
    #[serde(default)]
    pub clip: ClipParams,
    /// Sample lines per pixel row in soft mode.
    #[serde(default = "default_row_samples")]
    pub row_samples: usize,
}

fn default_softness() -> f64 {
    DEFAULT_SOFTNESS
}

fn default_row_samples() -> usize {
    4
}

impl RenderConfig {
    pub fn soft(width: usize, height: usize, clip: ClipParams) -> Self {
        RenderConfig {
            width,
            height,
            softness: DEFAULT_SOFTNESS,
            clip,
            row_samples: default_row_samples(),
        }
    }

    pub fn hard(width: usize, height: usize, clip: ClipParams) -> Self {
        RenderConfig {
            softness: 0.0,
            ..RenderConfig::soft(width, height, clip)
        }
    }

    pub fn for_intrinsics(k: &Intrinsics, clip: ClipParams) -> Self {
        RenderConfig::soft(k.width, k.height, clip)
    }

    pub fn is_hard(&self) -> bool {
        self.softness == 0.0
    }

    pub fn with_softness(mut self, softness: f64) -> Self {
        self.softness = softness;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("render resolution must be non-zero".into()));
        }
        if !(self.softness >= 0.0 && self.softness.is_finite()) {
            return Err(Error::InvalidConfig(format!("softness must be >= 0, got {}", self.softness)));
        }
        self.clip.validate()
    }

    /// Intrinsics matching this resolution (rescaled if `k` was given for another size).
    fn intrinsics(&self, k: &Intrinsics) -> Intrinsics {
        if k.width == self.width && k.height == self.height {
            *k
        } else {
            k.resized(self.width, self.height)
        }
    }
}

/// All link meshes of one configuration merged in the robot base frame.
pub fn configured_mesh(model: &RobotModel, q: &JointConfig) -> Result<TriangleMesh> {
    let frames = model.forward_kinematics(q)?;
    let mut out = TriangleMesh::default();
    for (link, frame) in model.links.iter().zip(&frames) {
        if !link.mesh.is_empty() {
            out.merge(&link.mesh.transformed(frame));
        }
    }
    Ok(out)
}

fn count(mesh: &TriangleMesh) {
    RENDER_COUNT.fetch_add(1, Ordering::Relaxed);
    TRIANGLES_RENDERED.fetch_add(mesh.faces.len() as u64, Ordering::Relaxed);
}

fn project_mesh(mesh: &TriangleMesh, cam_from_base: &Isometry3<f64>, k: &Intrinsics, cfg: &RenderConfig) -> Result<Projected<f64>> {
    cfg.validate()?;
    count(mesh);
    let k = cfg.intrinsics(k);
    let m = perspective_projection(&k, &cfg.clip) * cam_from_base.to_homogeneous();
    let clip: Vec<[f64; 4]> = mesh
        .vertices
        .iter()
        .map(|v| {
            let c = m * v.to_homogeneous();
            [c.x, c.y, c.z, c.w]
        })
        .collect();
    Ok(raster::project(&clip, &mesh.faces, cfg.width, cfg.height))
}

/// Render a mesh given in the robot base frame, `cam_from_base` mapping it into the camera.
pub fn render_mesh(mesh: &TriangleMesh, cam_from_base: &Isometry3<f64>, k: &Intrinsics, cfg: &RenderConfig) -> Result<MaskImage> {
    let Projected { px, polys } = project_mesh(mesh, cam_from_base, k, cfg)?;
    let r = raster::rasterize(&px, &polys, cfg.width, cfg.height, cfg.softness, &raster::row_nodes(cfg.row_samples), false);
    Ok(MaskImage::from_coverage(cfg.width, cfg.height, r.coverage))
}

/// Hard render as runs of covered pixels; the softness in `cfg` is ignored.
pub fn render_mesh_runs(mesh: &TriangleMesh, cam_from_base: &Isometry3<f64>, k: &Intrinsics, cfg: &RenderConfig) -> Result<Vec<PixelRun>> {
    let Projected { px, polys } = project_mesh(mesh, cam_from_base, k, cfg)?;
    Ok(raster::hard_runs(&px, &polys, cfg.width, cfg.height))
}

/// A soft render that can propagate pixel sensitivities back to the 12 pose parameters.
pub struct SoftRender {
    pub mask: MaskImage,
    raster: Raster,
    px: Vec<[Dual; 2]>,
    polys: Vec<Poly>,
    softness: f64,
}

impl SoftRender {
    /// Gradient of a scalar loss whose derivative with respect to each mask pixel is `dl_dmask`.
    pub fn backprop(&self, dl_dmask: &[f64]) -> Result<Grad> {
        if dl_dmask.len() != self.mask.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mask.len(),
                got: dl_dmask.len(),
            });
        }
        Ok(raster::backprop(&self.raster, &self.px, &self.polys, self.mask.width(), self.softness, dl_dmask))
    }
}

/// Soft render under `view_from_left * decode(pose)`, differentiable in the pose parameters.
pub fn render_mesh_with_grad(
    mesh: &TriangleMesh,
    pose: &DecodedPose,
    view_from_left: &Isometry3<f64>,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<SoftRender> {
    cfg.validate()?;
    if cfg.is_hard() {
        return Err(Error::NonDifferentiable);
    }
    count(mesh);
    let k = cfg.intrinsics(k);
    let proj = perspective_projection(&k, &cfg.clip);
    let e_rot: Matrix3<f64> = view_from_left.rotation.to_rotation_matrix().into_inner();
    let e_t = view_from_left.translation.vector;
    let rot = e_rot * pose.rotation;
    let trans = e_rot * pose.iso.translation.vector + e_t;
    let d_rot: Vec<Matrix3<f64>> = pose.d_rotation.iter().map(|d| e_rot * d).collect();
    let clip: Vec<[Dual; 4]> = mesh
        .vertices
        .iter()
        .map(|v| camera_dual(v, &rot, &trans, &d_rot, &e_rot, &proj))
        .collect();
    let Projected { px, polys } = raster::project(&clip, &mesh.faces, cfg.width, cfg.height);
    let px_val: Vec<[f64; 2]> = px.iter().map(|p| [p[0].v, p[1].v]).collect();
    let mut r = raster::rasterize(&px_val, &polys, cfg.width, cfg.height, cfg.softness, &raster::row_nodes(cfg.row_samples), true);
    let coverage = std::mem::take(&mut r.coverage);
    Ok(SoftRender {
        mask: MaskImage::from_coverage(cfg.width, cfg.height, coverage),
        raster: r,
        px,
        polys,
        softness: cfg.softness,
    })
}

fn camera_dual(
    v: &Point3<f64>,
    rot: &Matrix3<f64>,
    trans: &Vector3<f64>,
    d_rot: &[Matrix3<f64>],
    e_rot: &Matrix3<f64>,
    proj: &Matrix4<f64>,
) -> [Dual; 4] {
    let p = rot * v.coords + trans;
    let mut cam = [Dual::constant(p.x), Dual::constant(p.y), Dual::constant(p.z)];
    for (k, d) in d_rot.iter().enumerate() {
        let dp = d * v.coords;
        for i in 0..3 {
            cam[i].g[k] = dp[i];
        }
    }
    for j in 0..3 {
        for i in 0..3 {
            cam[i].g[9 + j] = e_rot[(i, j)];
        }
    }
    debug_assert_eq!(NPARAM, 12);
    let one = Dual::constant(1.0);
    let row = |r: usize| cam[0] * proj[(r, 0)] + cam[1] * proj[(r, 1)] + cam[2] * proj[(r, 2)] + one * proj[(r, 3)];
    [row(0), row(1), row(2), row(3)]
}

pub fn render_silhouette(
    model: &RobotModel,
    q: &JointConfig,
    pose: &Isometry3<f64>,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<MaskImage> {
    render_mesh(&configured_mesh(model, q)?, pose, k, cfg)
}

pub fn render_silhouette_with_grad(
    model: &RobotModel,
    q: &JointConfig,
    pose: &PoseParam,
    repr: RotationRepr,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<SoftRender> {
    let mesh = configured_mesh(model, q)?;
    render_mesh_with_grad(&mesh, &pose.decode(repr), &Isometry3::identity(), k, cfg)
}

/// Hard render used as an extra segmentation input; all zeros without an estimate.
pub fn render_prior_channel(
    model: &RobotModel,
    q: &JointConfig,
    estimate: Option<&Isometry3<f64>>,
    k: &Intrinsics,
    cfg: &RenderConfig,
) -> Result<MaskImage> {
    let hard = cfg.with_softness(0.0);
    match estimate {
        None => {
            hard.validate()?;
            Ok(MaskImage::zeros(hard.width, hard.height))
        }
        Some(pose) => render_silhouette(model, q, pose, k, &hard),
    }
}
