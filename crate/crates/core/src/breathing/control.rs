use nalgebra::{DVector, Matrix3, Matrix6, Matrix6xX, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Everything the drill controller sees at one instant. Lengths in metres,
/// velocities in m/s, forces in newtons.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlInputs {
    /// Rotation tip frame → base frame. The tip z axis points back along the
    /// drill, so advancing is motion along −z.
    pub r: Matrix3<f64>,
    /// Entry point in the tip frame (lateral coordinates).
    pub x_ep: f64,
    pub y_ep: f64,
    pub k: f64,
    pub c: f64,
    pub f_d: f64,
    pub f_m: f64,
    /// Feed-forward tip velocity along the tip z axis.
    pub z_dot_tip: f64,
    /// Breathing velocity in the base frame; the anterior-posterior model only fills z.
    pub breathing_velocity: Vector3<f64>,
    /// Angular velocity aligning the drill with the planned trajectory, rad/s.
    pub omega_align: Vector3<f64>,
}

impl Default for ControlInputs {
    fn default() -> Self {
        ControlInputs {
            r: Matrix3::identity(),
            x_ep: 0.0,
            y_ep: 0.0,
            k: 0.0,
            c: 0.0,
            f_d: 15.0,
            f_m: 15.0,
            z_dot_tip: 0.0,
            breathing_velocity: Vector3::zeros(),
            omega_align: Vector3::zeros(),
        }
    }
}

/// Equality bound [v; ω] on the tip twist:
/// v = R [k x_ep; k y_ep; ż_tip − c (f_d − f_m)] + ż_breathing.
pub fn build_velocity_bound(u: &ControlInputs) -> Vector6<f64> {
    let local = Vector3::new(u.k * u.x_ep, u.k * u.y_ep, u.z_dot_tip - u.c * (u.f_d - u.f_m));
    let v = u.r * local + u.breathing_velocity;
    Vector6::new(v.x, v.y, v.z, u.omega_align.x, u.omega_align.y, u.omega_align.z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    pub q_dot: Vec<f64>,
    /// ‖J q̇ − bound‖.
    pub residual: f64,
    pub rank: usize,
    /// True when J lacked full row rank and the damped least-squares fallback was used.
    pub fallback: bool,
}

const RANK_TOL: f64 = 1e-10;

/// min ½ q̇ᵀq̇ subject to J q̇ = bound.
///
/// With full row rank the minimiser is q̇ = Jᵀ(JJᵀ)⁻¹ bound, computed from a QR
/// factorisation of Jᵀ. Otherwise a damped least-squares step is returned and
/// flagged; its residual is generally non-zero.
pub fn solve_drill_qp(j: &Matrix6xX<f64>, bound: &Vector6<f64>) -> Result<QpSolution> {
    if j.iter().chain(bound.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Precondition("non-finite Jacobian or bound".into()));
    }
    let dof = j.ncols();
    let scale = j.amax();
    if dof >= 6 && scale > 0.0 {
        let qr = j.transpose().qr();
        let r: Matrix6<f64> = qr.r().fixed_view::<6, 6>(0, 0).into_owned();
        let diag_max = r.diagonal().amax();
        if r.diagonal().iter().all(|d| d.abs() > RANK_TOL * diag_max.max(scale)) {
            // J = Rᵀ Qᵀ, so q̇ = Q y with Rᵀ y = bound
            let y = r
                .transpose()
                .solve_lower_triangular(bound)
                .ok_or_else(|| Error::DegenerateGeometry("singular triangular factor".into()))?;
            let q_dot = qr.q() * DVector::from_column_slice(y.as_slice());
            let residual = (j * &q_dot - bound).norm();
            return Ok(QpSolution {
                q_dot: q_dot.as_slice().to_vec(),
                residual,
                rank: 6,
                fallback: false,
            });
        }
    }
    let sv = j.singular_values();
    let smax = sv.amax();
    let rank = sv.iter().filter(|&&s| s > RANK_TOL * smax.max(f64::MIN_POSITIVE)).count();
    let lambda = 1e-6 * smax.max(1e-12);
    let jjt = j * j.transpose() + Matrix6::identity() * lambda * lambda;
    let q_dot: DVector<f64> = match jjt.cholesky() {
        Some(ch) => j.transpose() * ch.solve(bound),
        None => DVector::zeros(dof),
    };
    let residual = (j * &q_dot - bound).norm();
    Ok(QpSolution {
        q_dot: q_dot.as_slice().to_vec(),
        residual,
        rank,
        fallback: true,
    })
}
