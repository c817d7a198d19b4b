//! Robot-base-in-camera pose parametrisation.
//!
//! The rotation block is nine unconstrained reals. `Svd9` maps them to the
//! closest rotation (special orthogonal Procrustes); `GramSchmidt6` uses the
//! first two columns only and rebuilds the third by a cross product.

mod refine;

pub use refine::{
    multi_start_refine, sdr_refine, write_loss_trace, OptimConfig, RefineOutcome, Refiner, TraceRow,
};

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::dual::{Dual, NPARAM};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationRepr {
    #[default]
    Svd9,
    GramSchmidt6,
}

/// Rotation block (row-major 3×3, unnormalised) plus translation in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseParam {
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl PoseParam {
    pub fn identity() -> Self {
        PoseParam::from_isometry(&Isometry3::identity())
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        let m = iso.rotation.to_rotation_matrix().into_inner();
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = m[(i, j)];
            }
        }
        let t = iso.translation.vector;
        PoseParam { r, t: [t.x, t.y, t.z] }
    }

    pub fn as_array(&self) -> [f64; NPARAM] {
        let mut out = [0.0; NPARAM];
        out[..9].copy_from_slice(&self.r);
        out[9..].copy_from_slice(&self.t);
        out
    }

    pub fn from_array(a: &[f64; NPARAM]) -> Self {
        let mut r = [0.0; 9];
        r.copy_from_slice(&a[..9]);
        PoseParam { r, t: [a[9], a[10], a[11]] }
    }

    pub fn rotation_block(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.r)
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }

    pub fn decode(&self, repr: RotationRepr) -> DecodedPose {
        decode_pose(self, repr)
    }

    pub fn to_isometry(&self, repr: RotationRepr) -> Isometry3<f64> {
        self.decode(repr).iso
    }

    /// Re-encode the decoded rotation so the block is exactly orthonormal.
    pub fn normalized(&self, repr: RotationRepr) -> Self {
        PoseParam::from_isometry(&self.to_isometry(repr))
    }
}

/// Decoded rigid transform together with dR/dr_k for the nine rotation parameters.
#[derive(Debug, Clone)]
pub struct DecodedPose {
    pub iso: Isometry3<f64>,
    pub rotation: Matrix3<f64>,
    pub d_rotation: [Matrix3<f64>; 9],
    /// Set when the rotation block was (numerically) zero and identity was substituted.
    pub degenerate: bool,
}

pub fn decode_pose(p: &PoseParam, repr: RotationRepr) -> DecodedPose {
    let m = p.rotation_block();
    let t = Vector3::from(p.t);
    let scale = m.norm();
    let (rotation, d_rotation, degenerate) = if !(scale > 1e-12) {
        (Matrix3::identity(), [Matrix3::zeros(); 9], true)
    } else {
        match repr {
            RotationRepr::Svd9 => svd_project(&m),
            RotationRepr::GramSchmidt6 => gram_schmidt(&m),
        }
    };
    let rot = Rotation3::from_matrix_unchecked(rotation);
    DecodedPose {
        iso: Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_rotation_matrix(&rot)),
        rotation,
        d_rotation,
        degenerate,
    }
}

fn unit(i: usize, j: usize) -> Matrix3<f64> {
    let mut e = Matrix3::zeros();
    e[(i, j)] = 1.0;
    e
}

/// R = U diag(1, 1, det(UVᵀ)) Vᵀ and its derivative with respect to each entry of M.
fn svd_project(m: &Matrix3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 9], bool) {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    // nalgebra sorts singular values descending; the sign fix goes on the smallest.
    let s = (u * vt).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, s));
    let r = u * d * vt;
    let v = vt.transpose();
    let sv = svd.singular_values;
    let sp = [sv[0], sv[1], s * sv[2]];
    let mut dr = [Matrix3::zeros(); 9];
    for (k, slot) in dr.iter_mut().enumerate() {
        let dm = unit(k / 3, k % 3);
        let x = r.transpose() * dm;
        let a = v.transpose() * (x - x.transpose()) * v;
        let mut omega = Matrix3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                let den = sp[i] + sp[j];
                if i != j && den.abs() > 1e-12 {
                    omega[(i, j)] = a[(i, j)] / den;
                }
            }
        }
        *slot = r * v * omega * v.transpose();
    }
    (r, dr, false)
}

fn gram_schmidt(m: &Matrix3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 9], bool) {
    let x: Vec<Dual> = (0..9).map(|k| Dual::variable(m[(k / 3, k % 3)], k)).collect();
    let col = |j: usize| [x[j], x[3 + j], x[6 + j]];
    let dot = |a: &[Dual; 3], b: &[Dual; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let normalize = |a: [Dual; 3]| {
        let n = dot(&a, &a).sqrt();
        a.map(|c| c / n)
    };
    let c1 = col(0);
    let c2 = col(1);
    if c1.iter().all(|c| c.v == 0.0) {
        return (Matrix3::identity(), [Matrix3::zeros(); 9], true);
    }
    let b1 = normalize(c1);
    let proj = dot(&b1, &c2);
    let mut w = [c2[0] - b1[0] * proj, c2[1] - b1[1] * proj, c2[2] - b1[2] * proj];
    if dot(&w, &w).v < 1e-24 {
        // second column parallel to the first: pick any perpendicular direction
        let helper = if b1[0].v.abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let h = helper.map(Dual::constant);
        let p = dot(&b1, &h);
        w = [h[0] - b1[0] * p, h[1] - b1[1] * p, h[2] - b1[2] * p];
    }
    let b2 = normalize(w);
    let b3 = [
        b1[1] * b2[2] - b1[2] * b2[1],
        b1[2] * b2[0] - b1[0] * b2[2],
        b1[0] * b2[1] - b1[1] * b2[0],
    ];
    let cols = [b1, b2, b3];
    let mut r = Matrix3::zeros();
    let mut dr = [Matrix3::zeros(); 9];
    for j in 0..3 {
        for i in 0..3 {
            r[(i, j)] = cols[j][i].v;
            for (k, d) in dr.iter_mut().enumerate() {
                d[(i, j)] = cols[j][i].g[k];
            }
        }
    }
    (r, dr, false)
}

/// Robot-in-camera transform for a camera at `eye` looking at `centre` (both in the robot base frame).
///
/// Camera axes: x right, y down, z forward. Roll is fixed by `up`, which maps to image-up;
/// if `up` is parallel to the view direction another world axis is substituted.
pub fn look_at(eye: &Point3<f64>, centre: &Point3<f64>, up: &Vector3<f64>) -> Result<Isometry3<f64>> {
    let z = (centre - eye)
        .try_normalize(1e-12)
        .ok_or_else(|| Error::DegenerateGeometry("camera eye coincides with look-at centre".into()))?;
    let x = [*up, Vector3::x(), Vector3::y(), Vector3::z()]
        .iter()
        .find_map(|u| z.cross(u).try_normalize(1e-9))
        .expect("some axis is not parallel to z");
    let y = z.cross(&x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let cam_in_world = Isometry3::from_parts(Translation3::from(eye.coords), UnitQuaternion::from_rotation_matrix(&rot));
    Ok(cam_in_world.inverse())
}
