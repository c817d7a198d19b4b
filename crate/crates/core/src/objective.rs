//! Render-versus-segmentation losses and the superimposed stereo objective.

use nalgebra::{Isometry3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{StereoRig, View};
use crate::dual::{Grad, NPARAM};
use crate::error::{Error, Result};
use crate::kinematics::{JointConfig, RobotModel};
use crate::mask::MaskImage;
use crate::mesh::TriangleMesh;
use crate::par;
use crate::pose::{PoseParam, RotationRepr};
use crate::render::{configured_mesh, render_mesh, render_mesh_runs, render_mesh_with_grad, PixelRun, RenderConfig, DEFAULT_SOFTNESS};

/// Per-pixel Euclidean distance (in pixels) to the nearest boundary pixel of a mask; zero outside it.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DistanceField {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// A mask pixel is on the boundary when a 4-neighbour is background or it touches the image border.
pub fn boundary_pixels(s: &MaskImage) -> Vec<bool> {
    let (w, h) = (s.width(), s.height());
    let on = |x: usize, y: usize| s.get(x, y) == 1.0;
    let mut out = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            if !on(x, y) {
                continue;
            }
            out[y * w + x] = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !on(x - 1, y)
                || !on(x + 1, y)
                || !on(x, y - 1)
                || !on(x, y + 1);
        }
    }
    out
}

/// Squared distance to the lower envelope of parabolas rooted at `f` (Felzenszwalb & Huttenlocher).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first = 0usize;
    // skip leading sites at infinity
    while first < n && f[first].is_infinite() {
        first += 1;
    }
    if first == n {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    v[0] = first;
    for q in first + 1..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance from every pixel to the nearest `true` site (infinite when there is none).
pub fn distance_to_sites(sites: &[bool], w: usize, h: usize) -> Vec<f64> {
    assert_eq!(sites.len(), w * h);
    let mut grid: Vec<f64> = sites.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let n = w.max(h);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid.iter_mut().for_each(|d| *d = d.sqrt());
    grid
}

/// Exact Euclidean distance transform with boundary pixels as sites.
pub fn distance_transform(s: &MaskImage) -> Result<DistanceField> {
    s.require_binary()?;
    let (w, h) = (s.width(), s.height());
    let d = distance_to_sites(&boundary_pixels(s), w, h);
    let data = d
        .iter()
        .zip(s.data())
        .map(|(&d, &m)| if m == 1.0 && d.is_finite() { d } else { 0.0 })
        .collect();
    Ok(DistanceField { width: w, height: h, data })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean squared difference between the render and the distance transform of the segmentation.
    DtMse,
    /// Dice variant against an exponentially decaying band around the segmentation.
    SoftDice,
    /// Plain mean squared difference between render and segmentation.
    #[default]
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub sigma: f64,
    pub epsilon: f64,
    /// Scale the distance transform to [0, 1] before the DT-MSE comparison.
    pub normalize_distance: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::default(),
            sigma: 2.0,
            epsilon: 1e-6,
            normalize_distance: false,
        }
    }
}

impl LossConfig {
    pub fn of_kind(kind: LossKind) -> Self {
        LossConfig { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma > 0.0 && self.epsilon > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss sigma and epsilon must be positive".into()))
        }
    }
}

/// Segmentation preprocessed for one loss kind, so repeated evaluations skip the distance transform.
#[derive(Debug, Clone)]
pub struct Target {
    width: usize,
    height: usize,
    kind: LossKind,
    epsilon: f64,
    values: Vec<f64>,
    sq_sum: f64,
}

impl Target {
    pub fn new(s: &MaskImage, cfg: &LossConfig) -> Result<Target> {
        cfg.validate()?;
        s.require_binary()?;
        let values = match cfg.kind {
            LossKind::Mse => s.data().to_vec(),
            LossKind::DtMse => {
                let d = distance_transform(s)?;
                let scale = if cfg.normalize_distance && d.max() > 0.0 { 1.0 / d.max() } else { 1.0 };
                d.data.iter().map(|v| v * scale).collect()
            }
            LossKind::SoftDice => {
                let d = distance_transform(&s.inverted())?;
                d.data.iter().map(|v| (-v / cfg.sigma).exp()).collect()
            }
        };
        let sq_sum = values.iter().map(|v| v * v).sum();
        Ok(Target {
            width: s.width(),
            height: s.height(),
            kind: cfg.kind,
            epsilon: cfg.epsilon,
            values,
            sq_sum,
        })
    }

    fn check(&self, m: &MaskImage) -> Result<()> {
        if m.width() != self.width || m.height() != self.height {
            return Err(Error::SizeMismatch(m.width(), m.height(), self.width, self.height));
        }
        Ok(())
    }

    pub fn loss(&self, m: &MaskImage) -> Result<f64> {
        self.check(m)?;
        let md = m.data();
        Ok(match self.kind {
            LossKind::Mse | LossKind::DtMse => {
                md.iter().zip(&self.values).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / md.len() as f64
            }
            LossKind::SoftDice => {
                let (num, m2) = self.dice_terms(md);
                1.0 - 2.0 * num / (m2 + self.sq_sum + self.epsilon)
            }
        })
    }

    /// Loss of a hard render given as covered pixel runs, without materialising the image.
    /// Uses (1 - v)² - v² = 1 - 2v on covered pixels.
    pub fn loss_of_runs(&self, runs: &[PixelRun]) -> f64 {
        let (mut on, mut dot) = (0usize, 0.0);
        for r in runs {
            let row = r.row as usize * self.width;
            on += (r.end - r.start) as usize;
            dot += self.values[row + r.start as usize..row + r.end as usize].iter().sum::<f64>();
        }
        match self.kind {
            LossKind::Mse | LossKind::DtMse => (self.sq_sum + on as f64 - 2.0 * dot) / self.values.len() as f64,
            LossKind::SoftDice => 1.0 - 2.0 * dot / (on as f64 + self.sq_sum + self.epsilon),
        }
    }

    /// Loss of an all-zero render.
    pub fn empty_loss(&self) -> f64 {
        match self.kind {
            LossKind::Mse | LossKind::DtMse => self.sq_sum / self.values.len() as f64,
            LossKind::SoftDice => 1.0 - 0.0 / (self.sq_sum + self.epsilon),
        }
    }

    fn dice_terms(&self, md: &[f64]) -> (f64, f64) {
        let mut num = 0.0;
        let mut m2 = 0.0;
        for (a, e) in md.iter().zip(&self.values) {
            num += (a * e).abs();
            m2 += a * a;
        }
        (num, m2)
    }

    /// Loss value and its derivative with respect to every mask pixel.
    pub fn loss_and_grad(&self, m: &MaskImage) -> Result<(f64, Vec<f64>)> {
        self.check(m)?;
        let md = m.data();
        let n = md.len() as f64;
        Ok(match self.kind {
            LossKind::Mse | LossKind::DtMse => {
                let mut loss = 0.0;
                let grad = md
                    .iter()
                    .zip(&self.values)
                    .map(|(a, b)| {
                        loss += (a - b) * (a - b);
                        2.0 * (a - b) / n
                    })
                    .collect();
                (loss / n, grad)
            }
            LossKind::SoftDice => {
                let (num, m2) = self.dice_terms(md);
                let den = m2 + self.sq_sum + self.epsilon;
                let grad = md
                    .iter()
                    .zip(&self.values)
                    .map(|(a, e)| -2.0 * (e * den - num * 2.0 * a) / (den * den))
                    .collect();
                (1.0 - 2.0 * num / den, grad)
            }
        })
    }
}

pub fn dt_mse_loss(m: &MaskImage, s: &MaskImage) -> Result<f64> {
    m.same_size(s)?;
    Target::new(s, &LossConfig::of_kind(LossKind::DtMse))?.loss(m)
}

pub fn soft_dice_loss(m: &MaskImage, s: &MaskImage, cfg: &LossConfig) -> Result<f64> {
    m.same_size(s)?;
    let cfg = LossConfig { kind: LossKind::SoftDice, ..*cfg };
    Target::new(s, &cfg)?.loss(m)
}

pub fn mse_loss(m: &MaskImage, s: &MaskImage) -> Result<f64> {
    m.same_size(s)?;
    Target::new(s, &LossConfig::of_kind(LossKind::Mse))?.loss(m)
}

pub use crate::mask::iou;

/// Observed segmentations of one robot configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoMasks {
    pub left: MaskImage,
    pub right: MaskImage,
}

impl StereoMasks {
    pub fn view(&self, v: View) -> &MaskImage {
        match v {
            View::Left => &self.left,
            View::Right => &self.right,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub loss: LossConfig,
    /// Render edge width in pixels; 0 means hard renders (value only).
    pub softness: f64,
    pub row_samples: usize,
    pub rotation: RotationRepr,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            loss: LossConfig::default(),
            softness: DEFAULT_SOFTNESS,
            row_samples: 4,
            rotation: RotationRepr::Svd9,
        }
    }
}

/// The superimposed stereo objective over a fixed set of configurations, ready for repeated evaluation.
pub struct StereoProblem {
    meshes: Vec<TriangleMesh>,
    targets: Vec<[Target; 2]>,
    rig: StereoRig,
    cfg: ObjectiveConfig,
}

impl StereoProblem {
    pub fn new(
        model: &RobotModel,
        q_set: &[JointConfig],
        observations: &[StereoMasks],
        rig: &StereoRig,
        cfg: &ObjectiveConfig,
    ) -> Result<StereoProblem> {
        let meshes = q_set.iter().map(|q| configured_mesh(model, q)).collect::<Result<Vec<_>>>()?;
        StereoProblem::from_meshes(meshes, observations, rig, cfg)
    }

    pub fn from_meshes(
        meshes: Vec<TriangleMesh>,
        observations: &[StereoMasks],
        rig: &StereoRig,
        cfg: &ObjectiveConfig,
    ) -> Result<StereoProblem> {
        if observations.len() != meshes.len() {
            return Err(Error::DimensionMismatch {
                expected: meshes.len(),
                got: observations.len(),
            });
        }
        let mut targets = Vec::with_capacity(observations.len());
        for obs in observations {
            let mut pair = Vec::with_capacity(2);
            for v in View::BOTH {
                let k = rig.intrinsics(v);
                let m = obs.view(v);
                if m.width() != k.width || m.height() != k.height {
                    return Err(Error::SizeMismatch(m.width(), m.height(), k.width, k.height));
                }
                pair.push(Target::new(m, &cfg.loss)?);
            }
            let right = pair.pop().unwrap();
            let left = pair.pop().unwrap();
            targets.push([left, right]);
        }
        Ok(StereoProblem {
            meshes,
            targets,
            rig: *rig,
            cfg: *cfg,
        })
    }

    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    pub fn config(&self) -> &ObjectiveConfig {
        &self.cfg
    }

    pub fn rig(&self) -> &StereoRig {
        &self.rig
    }

    fn render_cfg(&self, v: View) -> RenderConfig {
        let k = self.rig.intrinsics(v);
        RenderConfig {
            width: k.width,
            height: k.height,
            softness: self.cfg.softness,
            clip: self.rig.clip,
            row_samples: self.cfg.row_samples,
        }
    }

    fn view_from_left(&self, v: View) -> Isometry3<f64> {
        match v {
            View::Left => Isometry3::identity(),
            View::Right => self.rig.left_to_right,
        }
    }

    /// Objective value when nothing is rendered in any view.
    pub fn empty_value(&self) -> f64 {
        self.targets.iter().flatten().map(Target::empty_loss).sum()
    }

    /// Triangle count of each configured mesh.
    pub fn triangle_counts(&self) -> Vec<usize> {
        self.meshes.iter().map(|m| m.face_count()).collect()
    }

    /// Mean vertex over all configurations, base frame.
    pub fn centroid(&self) -> Point3<f64> {
        let (sum, n) = self
            .meshes
            .iter()
            .flat_map(|m| &m.vertices)
            .fold((Vector3::zeros(), 0usize), |(s, n), v| (s + v.coords, n + 1));
        Point3::from(if n == 0 { sum } else { sum / n as f64 })
    }

    /// Render every (configuration, view) pair under the left-camera pose.
    pub fn renders(&self, pose: &Isometry3<f64>) -> Result<Vec<[MaskImage; 2]>> {
        par::map_range(self.len(), |i| {
            let l = render_mesh(&self.meshes[i], pose, &self.rig.left, &self.render_cfg(View::Left))?;
            let r = render_mesh(&self.meshes[i], &self.rig.right_pose(pose), &self.rig.right, &self.render_cfg(View::Right))?;
            Ok([l, r])
        })
        .into_iter()
        .collect()
    }

    pub fn value_at(&self, pose: &Isometry3<f64>) -> Result<f64> {
        let terms = par::map_range(self.len() * 2, |j| {
            let (i, v) = (j / 2, View::BOTH[j % 2]);
            let view_pose = self.view_from_left(v) * pose;
            if self.cfg.softness == 0.0 {
                let runs = render_mesh_runs(&self.meshes[i], &view_pose, self.rig.intrinsics(v), &self.render_cfg(v))?;
                return Ok(self.targets[i][j % 2].loss_of_runs(&runs));
            }
            let m = render_mesh(&self.meshes[i], &view_pose, self.rig.intrinsics(v), &self.render_cfg(v))?;
            self.targets[i][j % 2].loss(&m)
        });
        let mut terms = terms.into_iter().collect::<Result<Vec<f64>>>()?;
        // summing in value order makes the total independent of the configuration order
        terms.sort_by(f64::total_cmp);
        Ok(terms.iter().sum())
    }

    pub fn value(&self, pose: &PoseParam) -> Result<f64> {
        self.value_at(&pose.to_isometry(self.cfg.rotation))
    }

    pub fn value_and_grad(&self, pose: &PoseParam) -> Result<(f64, Grad)> {
        let decoded = pose.decode(self.cfg.rotation);
        let terms = par::map_range(self.len() * 2, |j| -> Result<(f64, Grad)> {
            let (i, v) = (j / 2, View::BOTH[j % 2]);
            let r = render_mesh_with_grad(
                &self.meshes[i],
                &decoded,
                &self.view_from_left(v),
                self.rig.intrinsics(v),
                &self.render_cfg(v),
            )?;
            let (loss, dl) = self.targets[i][j % 2].loss_and_grad(&r.mask)?;
            Ok((loss, r.backprop(&dl)?))
        });
        let mut terms = terms.into_iter().collect::<Result<Vec<_>>>()?;
        terms.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then_with(|| a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
        });
        let mut total = 0.0;
        let mut grad = [0.0; NPARAM];
        for (l, g) in terms {
            total += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((total, grad))
    }

    /// Whether any configuration renders at least one pixel in both views.
    pub fn visible(&self, pose: &Isometry3<f64>) -> Result<bool> {
        let hard = |v: View| self.render_cfg(v).with_softness(0.0);
        for mesh in &self.meshes {
            let l = render_mesh(mesh, pose, &self.rig.left, &hard(View::Left))?;
            if l.area() == 0.0 {
                continue;
            }
            let r = render_mesh(mesh, &self.rig.right_pose(pose), &self.rig.right, &hard(View::Right))?;
            if r.area() > 0.0 {
                return Ok(true);
            }
        }
        Ok(false)
    }
}

/// Sum over configurations and both views of the chosen loss.
pub fn stereo_objective(
    pose: &PoseParam,
    model: &RobotModel,
    q_set: &[JointConfig],
    observations: &[StereoMasks],
    rig: &StereoRig,
    cfg: &ObjectiveConfig,
) -> Result<f64> {
    StereoProblem::new(model, q_set, observations, rig, cfg)?.value(pose)
}
