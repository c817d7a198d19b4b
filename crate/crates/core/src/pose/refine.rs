//! First-order pose refinement of the stereo objective.
//!
//! Directions come from bias-corrected first/second moment estimates
//! (Adam-style, per parameter). A proposal is accepted only if it does not
//! raise the loss; otherwise the trust factor is halved and the step is
//! retried from the same point. The step ceiling decays geometrically over
//! the iteration budget.
//!
//! The parameters are a camera-frame correction applied to the initial pose,
//! rotating about the robot's centroid: x ↦ C·Δ(x)·C⁻¹·T₀. The steps then do
//! not depend on how the robot base frame happens to be chosen.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::{decode_pose, PoseParam, RotationRepr};
use crate::dual::{Grad, NPARAM};
use crate::error::{Error, Result};
use crate::objective::StereoProblem;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub max_iters: usize,
    /// Initial step on the nine rotation parameters.
    pub step_size: f64,
    /// Initial step on the translation, metres.
    pub translation_step: f64,
    /// Fraction of the initial step left at the end of the budget.
    pub final_step_fraction: f64,
    /// Relative loss change over `window` iterations below which refinement stops.
    pub convergence_tol: f64,
    pub window: usize,
    pub grad_tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Re-orthonormalise the rotation block after every accepted step.
    pub renormalize: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            max_iters: 300,
            step_size: 1e-2,
            translation_step: 1e-2,
            final_step_fraction: 1e-2,
            convergence_tol: 1e-6,
            window: 10,
            grad_tol: 1e-12,
            beta1: 0.9,
            beta2: 0.999,
            renormalize: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.step_size, self.translation_step, self.final_step_fraction, self.convergence_tol, self.grad_tol];
        if self.max_iters == 0 || self.window == 0 || positive.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig(format!("optimizer settings must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("moment decay rates must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub pose: PoseParam,
    pub loss: f64,
    pub initial_loss: f64,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<TraceRow>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone)]
struct Anchor {
    r0: Matrix3<f64>,
    t0: Vector3<f64>,
    pivot: Vector3<f64>,
    repr: RotationRepr,
}

impl Anchor {
    fn new(init: &PoseParam, problem: &StereoProblem) -> Anchor {
        let repr = problem.config().rotation;
        let d = decode_pose(init, repr);
        Anchor {
            r0: d.rotation,
            t0: Vector3::from(init.t),
            pivot: (d.iso * problem.centroid()).coords,
            repr,
        }
    }

    /// Pose for correction `x`, plus the map from pose gradients to `x` gradients.
    fn apply(&self, x: &[f64; NPARAM]) -> (PoseParam, impl Fn(&Grad) -> Grad) {
        let d = decode_pose(&PoseParam::from_array(x), self.repr);
        let arm = self.t0 - self.pivot;
        let r = d.rotation * self.r0;
        let t = d.rotation * arm + self.pivot + Vector3::new(x[9], x[10], x[11]);
        let mut rr = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rr[3 * i + j] = r[(i, j)];
            }
        }
        let pose = PoseParam { r: rr, t: [t.x, t.y, t.z] };
        // rotation perturbations stay tangent to SO(3) at r, where the pose gradient is exact
        let dr: Vec<(Matrix3<f64>, Vector3<f64>)> = d.d_rotation.iter().map(|m| (m * self.r0, m * arm)).collect();
        let chain = move |g: &Grad| {
            let gr = Matrix3::from_row_slice(&g[..9]);
            let gt = Vector3::new(g[9], g[10], g[11]);
            let mut out = [0.0; NPARAM];
            for (k, (dm, dt)) in dr.iter().enumerate() {
                out[k] = gr.component_mul(dm).sum() + gt.dot(dt);
            }
            out[9..].copy_from_slice(&g[9..]);
            out
        };
        (pose, chain)
    }
}

/// Optimiser state that survives changes of the objective (used by the alternating scheme).
pub struct Refiner {
    cfg: OptimConfig,
    init: PoseParam,
    anchor: Option<Anchor>,
    x: [f64; NPARAM],
    loss: f64,
    grad: Grad,
    m: [f64; NPARAM],
    v: [f64; NPARAM],
    t: i32,
    trust: f64,
    iter: usize,
    initial_loss: Option<f64>,
    converged: bool,
    trace: Vec<TraceRow>,
}

impl Refiner {
    pub fn new(init: &PoseParam, cfg: &OptimConfig) -> Result<Refiner> {
        cfg.validate()?;
        if !init.is_finite() {
            return Err(Error::Precondition("initial pose is not finite".into()));
        }
        Ok(Refiner {
            cfg: *cfg,
            init: *init,
            anchor: None,
            x: PoseParam::identity().as_array(),
            loss: f64::INFINITY,
            grad: [0.0; NPARAM],
            m: [0.0; NPARAM],
            v: [0.0; NPARAM],
            t: 0,
            trust: 1.0,
            iter: 0,
            initial_loss: None,
            converged: false,
            trace: Vec::new(),
        })
    }

    pub fn pose(&self) -> PoseParam {
        match &self.anchor {
            Some(a) => a.apply(&self.x).0,
            None => self.init,
        }
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn iterations(&self) -> usize {
        self.iter
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    fn ceiling(&self) -> f64 {
        let frac = (self.iter as f64 / self.cfg.max_iters as f64).min(1.0);
        self.cfg.final_step_fraction.powf(frac)
    }

    /// Run up to `iters` iterations on `problem`, starting by re-evaluating the current pose on it.
    /// Returns whether the convergence test fired.
    pub fn run(&mut self, problem: &StereoProblem, iters: usize) -> Result<bool> {
        let anchor = self.anchor.get_or_insert_with(|| Anchor::new(&self.init, problem)).clone();
        let (pose, chain) = anchor.apply(&self.x);
        let (l, g) = problem.value_and_grad(&pose)?;
        self.loss = l;
        self.grad = chain(&g);
        self.initial_loss.get_or_insert(l);
        let mut window: VecDeque<f64> = VecDeque::from([l]);
        self.converged = false;
        for _ in 0..iters {
            let gnorm = norm(&self.grad);
            if gnorm < self.cfg.grad_tol {
                self.converged = true;
                break;
            }
            self.t += 1;
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for k in 0..NPARAM {
                self.m[k] = b1 * self.m[k] + (1.0 - b1) * self.grad[k];
                self.v[k] = b2 * self.v[k] + (1.0 - b2) * self.grad[k] * self.grad[k];
            }
            let c1 = 1.0 - b1.powi(self.t);
            let c2 = 1.0 - b2.powi(self.t);
            let scale = self.trust * self.ceiling();
            let mut cand = self.x;
            let mut step = [0.0; NPARAM];
            for k in 0..NPARAM {
                let lr = if k < 9 { self.cfg.step_size } else { self.cfg.translation_step };
                let mhat = self.m[k] / c1;
                let vhat = self.v[k] / c2;
                step[k] = -scale * lr * mhat / (vhat.sqrt() + 1e-12);
                cand[k] += step[k];
            }
            if self.cfg.renormalize {
                cand = PoseParam::from_array(&cand).normalized(anchor.repr).as_array();
            }
            let (pose, chain) = anchor.apply(&cand);
            let (cl, cg) = problem.value_and_grad(&pose)?;
            let accepted = cl <= self.loss;
            if accepted {
                self.x = cand;
                self.loss = cl;
                self.grad = chain(&cg);
                self.trust = (self.trust * 1.5).min(1.0);
            } else {
                self.trust *= 0.5;
            }
            self.iter += 1;
            self.trace.push(TraceRow {
                iteration: self.iter,
                loss: self.loss,
                grad_norm: gnorm,
                step_norm: if accepted { norm(&step) } else { 0.0 },
            });
            window.push_back(self.loss);
            if window.len() > self.cfg.window {
                let old = window.pop_front().unwrap();
                let rel = (old - self.loss).abs() / old.abs().max(1e-300);
                if rel < self.cfg.convergence_tol {
                    self.converged = true;
                    break;
                }
            }
        }
        Ok(self.converged)
    }

    pub fn outcome(self) -> RefineOutcome {
        RefineOutcome {
            pose: self.pose(),
            loss: self.loss,
            initial_loss: self.initial_loss.unwrap_or(self.loss),
            converged: self.converged,
            iterations: self.iter,
            trace: self.trace,
        }
    }
}

/// Gradient refinement of the robot-in-left-camera pose.
pub fn sdr_refine(init: &PoseParam, problem: &StereoProblem, cfg: &OptimConfig) -> Result<RefineOutcome> {
    let iso = init.to_isometry(problem.config().rotation);
    if !problem.is_empty() && !problem.visible(&iso)? {
        return Err(Error::NonConvergence(format!(
            "robot renders no pixels in both views for any of {} configurations at the initial pose (t = {:?})",
            problem.len(),
            init.t
        )));
    }
    let mut r = Refiner::new(init, cfg)?;
    r.run(problem, cfg.max_iters)?;
    Ok(r.outcome())
}

/// Refine each start and keep the lowest final loss; failures are skipped unless all fail.
pub fn multi_start_refine(inits: &[PoseParam], problem: &StereoProblem, cfg: &OptimConfig) -> Result<RefineOutcome> {
    let mut best: Option<RefineOutcome> = None;
    let mut last_err = None;
    for init in inits {
        match sdr_refine(init, problem, cfg) {
            Ok(o) => {
                if best.as_ref().is_none_or(|b| o.loss < b.loss) {
                    best = Some(o);
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| last_err.unwrap_or_else(|| Error::Precondition("no initial poses given".into())))
}

pub fn write_loss_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let emit = || -> std::io::Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "iteration,loss,grad_norm,step_norm")?;
        for r in trace {
            writeln!(w, "{},{:e},{:e},{:e}", r.iteration, r.loss, r.grad_norm, r.step_norm)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}
