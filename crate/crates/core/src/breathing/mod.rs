//! Respiratory motion: a three-harmonic Fourier model fitted over a sliding
//! horizon, and drill velocity control that feeds the estimate forward.

mod control;
mod sim;

use std::f64::consts::TAU;

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use control::{build_velocity_bound, solve_drill_qp, ControlInputs, QpSolution};
pub use sim::{
    relative_motion_deviation, simulate_drilling, write_drilling_log, ContactModel, ControlGains, DrillingLog,
    Estimator, LogRow, Phase, PhaseKind, ScenarioConfig,
};

pub const HARMONICS: usize = 3;

/// z(t) = a0 + Σ a_n cos(nω0t) + b_n sin(nω0t), displacement in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreathingModel {
    pub a0: f64,
    pub a: [f64; HARMONICS],
    pub b: [f64; HARMONICS],
    /// Fundamental frequency, rad/s.
    pub omega0: f64,
}

impl Default for BreathingModel {
    /// Motionless anatomy.
    fn default() -> Self {
        BreathingModel {
            a0: 0.0,
            a: [0.0; HARMONICS],
            b: [0.0; HARMONICS],
            omega0: 1.0,
        }
    }
}

impl BreathingModel {
    /// Single cosine of the given amplitude (mm) and frequency (rad/s).
    pub fn sinusoid(amplitude: f64, omega0: f64) -> Self {
        let mut m = BreathingModel {
            omega0,
            ..Default::default()
        };
        m.a[0] = amplitude;
        m
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.a0.is_finite() && self.a.iter().chain(&self.b).all(|v| v.is_finite());
        if !(self.omega0 > 0.0 && self.omega0.is_finite()) || !finite {
            return Err(Error::InvalidConfig(format!("invalid breathing model {self:?}")));
        }
        Ok(())
    }

    /// Displacement (mm) at time `t` (s).
    pub fn eval(&self, t: f64) -> f64 {
        let mut z = self.a0;
        for n in 0..HARMONICS {
            let (s, c) = ((n + 1) as f64 * self.omega0 * t).sin_cos();
            z += self.a[n] * c + self.b[n] * s;
        }
        z
    }

    /// Analytic time derivative of [`eval`](Self::eval), mm/s.
    pub fn velocity(&self, t: f64) -> f64 {
        let mut v = 0.0;
        for n in 0..HARMONICS {
            let w = (n + 1) as f64 * self.omega0;
            let (s, c) = (w * t).sin_cos();
            v += w * (self.b[n] * c - self.a[n] * s);
        }
        v
    }

    /// Peak amplitude of harmonic `n` (1-based).
    pub fn harmonic_amplitude(&self, n: usize) -> f64 {
        self.a[n - 1].hypot(self.b[n - 1])
    }

    fn from_coefficients(c: &[f64], omega0: f64) -> Self {
        BreathingModel {
            a0: c[0],
            a: [c[1], c[3], c[5]],
            b: [c[2], c[4], c[6]],
            omega0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Optimisation horizon T0, s.
    pub horizon: f64,
    /// Search range for ω0, rad/s.
    pub omega_range: (f64, f64),
    pub grid_points: usize,
    /// Fits whose RMS residual (mm) exceeds this are flagged.
    pub max_rms: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            horizon: 15.0,
            omega_range: (TAU * 0.1, TAU * 2.0),
            grid_points: 200,
            max_rms: None,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.omega_range;
        if !(self.horizon > 0.0) || !(lo > 0.0 && hi > lo && hi.is_finite()) || self.grid_points < 3 {
            return Err(Error::InvalidConfig(format!("invalid breathing fit settings {self:?}")));
        }
        Ok(())
    }
}

pub const MIN_SAMPLES: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreathingFit {
    pub model: BreathingModel,
    /// RMS residual over the window, mm.
    pub rms: f64,
    pub samples: usize,
    /// No harmonic content: ω0 is arbitrary.
    pub degenerate: bool,
    /// RMS above `FitConfig::max_rms`.
    pub poor_fit: bool,
}

struct Window<'a> {
    t: Vec<f64>,
    z: &'a [f64],
}

fn design(t: &[f64], omega: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t.len(), 1 + 2 * HARMONICS, |i, j| {
        if j == 0 {
            return 1.0;
        }
        let n = j.div_ceil(2) as f64;
        let (s, c) = (n * omega * t[i]).sin_cos();
        if j % 2 == 1 {
            c
        } else {
            s
        }
    })
}

impl Window<'_> {
    /// Exact linear least squares for fixed ω; returns coefficients and residual sum of squares.
    fn solve(&self, omega: f64) -> (DVector<f64>, f64) {
        let a = design(&self.t, omega);
        let z = DVector::from_column_slice(self.z);
        // Householder QR: backward stable, and the design has full column rank
        // whenever the window spans a period (checked by the caller)
        let qr = a.clone().qr();
        let coef = qr
            .r()
            .solve_upper_triangular(&(qr.q().transpose() * &z))
            .unwrap_or_else(|| DVector::zeros(1 + 2 * HARMONICS));
        let ssr = (&a * &coef - &z).norm_squared();
        (coef, ssr)
    }

    /// Residual via the normal equations; only used to scan the grid.
    fn quick_ssr(&self, omega: f64) -> f64 {
        const P: usize = 1 + 2 * HARMONICS;
        let mut ata = SMatrix::<f64, P, P>::zeros();
        let mut atz = SVector::<f64, P>::zeros();
        let mut zz = 0.0;
        for (&t, &z) in self.t.iter().zip(self.z) {
            let mut row = SVector::<f64, P>::zeros();
            row[0] = 1.0;
            for n in 0..HARMONICS {
                let (s, c) = ((n + 1) as f64 * omega * t).sin_cos();
                row[1 + 2 * n] = c;
                row[2 + 2 * n] = s;
            }
            ata += row * row.transpose();
            atz += row * z;
            zz += z * z;
        }
        match ata.cholesky() {
            Some(ch) => (zz - atz.dot(&ch.solve(&atz))).max(0.0),
            None => f64::INFINITY,
        }
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc <= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Fit the model to the samples `(t, z̃)` in the last `horizon` seconds.
///
/// Coefficients are exact least squares for each candidate ω0; ω0 is chosen by
/// a grid scan (uniform in frequency) and golden-section refinement of the
/// best local minima. Among equally good minima the highest frequency wins,
/// so a pure sinusoid is not explained by one of its subharmonics.
pub fn fit_breathing(samples: &[(f64, f64)], cfg: &FitConfig) -> Result<BreathingFit> {
    cfg.validate()?;
    let Some(&(t_end, _)) = samples.last() else {
        return Err(Error::Precondition("empty breathing window".into()));
    };
    if samples.iter().any(|(t, z)| !t.is_finite() || !z.is_finite()) || samples.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Precondition("breathing samples must be finite and time-ordered".into()));
    }
    let first = samples.partition_point(|&(t, _)| t < t_end - cfg.horizon);
    let win = &samples[first..];
    if win.len() < MIN_SAMPLES {
        return Err(Error::Precondition(format!(
            "breathing window holds {} samples, need at least {MIN_SAMPLES}",
            win.len()
        )));
    }
    let (lo, hi) = cfg.omega_range;
    let span = t_end - win[0].0;
    if span < TAU / lo {
        return Err(Error::Precondition(format!(
            "breathing window spans {span:.3} s, shorter than the longest period {:.3} s in the search range",
            TAU / lo
        )));
    }
    let z: Vec<f64> = win.iter().map(|s| s.1).collect();
    let window = Window {
        // centring time keeps the design columns well conditioned; the model is shifted back below
        t: win.iter().map(|s| s.0 - t_end).collect(),
        z: &z,
    };

    let step = (hi - lo) / (cfg.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..cfg.grid_points).map(|i| lo + step * i as f64).collect();
    let ssr: Vec<f64> = grid.iter().map(|&w| window.quick_ssr(w)).collect();
    let mut minima: Vec<usize> = (0..grid.len())
        .filter(|&i| (i == 0 || ssr[i] <= ssr[i - 1]) && (i + 1 == grid.len() || ssr[i] <= ssr[i + 1]))
        .collect();
    minima.sort_by(|&a, &b| ssr[a].total_cmp(&ssr[b]).then(b.cmp(&a)));
    minima.truncate(3);

    let mut best: Option<(f64, f64)> = None;
    for &i in &minima {
        let a = grid[i.saturating_sub(1)];
        let b = grid[(i + 1).min(grid.len() - 1)];
        let (w, s) = golden_section(|w| window.solve(w).1, a, b, 1e-12 * hi);
        best = match best {
            Some((bw, bs)) => {
                let tie = (s - bs).abs() <= 1e-6 * bs.max(s) + 1e-20 * (z.len() as f64);
                if (tie && w > bw) || (!tie && s < bs) {
                    Some((w, s))
                } else {
                    Some((bw, bs))
                }
            }
            None => Some((w, s)),
        };
    }
    let (omega, _) = best.expect("grid has at least one minimum");
    let (coef, ssr) = window.solve(omega);
    let shifted = BreathingModel::from_coefficients(coef.as_slice(), omega);
    let model = shift_time(&shifted, t_end);
    let rms = (ssr / z.len() as f64).sqrt();
    let scale = z.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let degenerate = (1..=HARMONICS).all(|n| model.harmonic_amplitude(n) <= 1e-9 * scale);
    Ok(BreathingFit {
        model,
        rms,
        samples: z.len(),
        degenerate,
        poor_fit: cfg.max_rms.is_some_and(|m| rms > m),
    })
}

/// Re-express a model fitted in local time τ = t − t0 in absolute time t.
fn shift_time(m: &BreathingModel, t0: f64) -> BreathingModel {
    let mut out = *m;
    for n in 0..HARMONICS {
        // a cos(w(t - t0)) + b sin(w(t - t0)) expanded in cos(wt), sin(wt)
        let (s, c) = ((n + 1) as f64 * m.omega0 * t0).sin_cos();
        out.a[n] = m.a[n] * c - m.b[n] * s;
        out.b[n] = m.a[n] * s + m.b[n] * c;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sampled(m: &BreathingModel, t0: f64, t1: f64, rate: f64) -> Vec<(f64, f64)> {
        let n = ((t1 - t0) * rate).round() as usize;
        (0..=n).map(|i| t0 + i as f64 / rate).map(|t| (t, m.eval(t))).collect()
    }

    fn three_harmonic() -> BreathingModel {
        BreathingModel {
            a0: 1.5,
            a: [2.0, -0.6, 0.25],
            b: [-1.1, 0.4, -0.15],
            omega0: 1.3,
        }
    }

    #[test]
    fn constant_and_single_harmonic() {
        let m = BreathingModel {
            a0: 3.0,
            ..Default::default()
        };
        assert_eq!(m.eval(12.3), 3.0);
        assert_eq!(m.velocity(12.3), 0.0);
        let mut m = BreathingModel::sinusoid(1.0, 2.0);
        m.a0 = 0.5;
        for t in [0.0, 0.3, 7.1] {
            assert_relative_eq!(m.eval(t), 0.5 + (2.0 * t).cos(), epsilon = 1e-15);
            assert_relative_eq!(m.velocity(t), -2.0 * (2.0 * t).sin(), epsilon = 1e-15);
        }
    }

    #[test]
    fn velocity_matches_finite_differences() {
        let m = three_harmonic();
        let h = 1e-6;
        for i in 0..100 {
            let t = 0.37 * i as f64;
            let fd = (m.eval(t + h) - m.eval(t - h)) / (2.0 * h);
            let v = m.velocity(t);
            assert!((fd - v).abs() <= 1e-6 * v.abs().max(1.0), "t={t}: {fd} vs {v}");
        }
    }

    #[test]
    fn time_shift_preserves_signal() {
        let m = three_harmonic();
        let s = shift_time(&m, 4.2);
        for t in [0.0, 1.0, 5.5] {
            assert_relative_eq!(s.eval(t + 4.2), m.eval(t), epsilon = 1e-12);
        }
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let m = three_harmonic();
        let fit = fit_breathing(&sampled(&m, 30.0, 45.0, 20.0), &FitConfig::default()).unwrap();
        assert!((fit.model.omega0 / m.omega0 - 1.0).abs() < 1e-9);
        assert!(fit.rms < 1e-9);
        assert!((fit.model.a0 - m.a0).abs() < 1e-8);
        for n in 0..HARMONICS {
            assert!((fit.model.a[n] - m.a[n]).abs() < 1e-8);
            assert!((fit.model.b[n] - m.b[n]).abs() < 1e-8);
        }
        assert!(!fit.degenerate);
    }

    #[test]
    fn constant_signal_is_degenerate() {
        let samples: Vec<(f64, f64)> = (0..300).map(|i| (i as f64 * 0.05, 2.5)).collect();
        let fit = fit_breathing(&samples, &FitConfig::default()).unwrap();
        assert!(fit.degenerate);
        assert!((fit.model.a0 - 2.5).abs() < 1e-9);
        assert!(fit.model.a.iter().chain(&fit.model.b).all(|c| c.abs() < 1e-9));
    }

    #[test]
    fn pure_sinusoid_prefers_fundamental() {
        let m = BreathingModel::sinusoid(4.0, 1.3);
        let fit = fit_breathing(&sampled(&m, 0.0, 15.0, 20.0), &FitConfig::default()).unwrap();
        assert!((fit.model.omega0 - 1.3).abs() < 1e-6, "{}", fit.model.omega0);
    }

    #[test]
    fn window_is_causal() {
        let m = three_harmonic();
        let mut samples = sampled(&m, 0.0, 15.0, 20.0);
        // anything older than the horizon must not matter
        let mut with_history: Vec<(f64, f64)> = (0..100).map(|i| (-30.0 + 0.1 * i as f64, 1e3)).collect();
        with_history.append(&mut samples.clone());
        let a = fit_breathing(&samples, &FitConfig::default()).unwrap();
        let b = fit_breathing(&with_history, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
        samples.truncate(10);
        assert!(fit_breathing(&samples, &FitConfig::default()).is_err());
        assert!(fit_breathing(&[], &FitConfig::default()).is_err());
    }

    #[test]
    fn short_window_rejected() {
        let m = three_harmonic();
        let samples = sampled(&m, 0.0, 5.0, 20.0);
        assert!(matches!(fit_breathing(&samples, &FitConfig::default()), Err(Error::Precondition(_))));
    }

    #[test]
    fn out_of_range_frequency_flagged() {
        let m = BreathingModel::sinusoid(4.0, 40.0);
        let cfg = FitConfig {
            max_rms: Some(0.1),
            ..Default::default()
        };
        let fit = fit_breathing(&sampled(&m, 0.0, 15.0, 200.0), &cfg).unwrap();
        assert!(fit.poor_fit);
    }
}
