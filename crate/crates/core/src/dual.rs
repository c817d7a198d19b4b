//! Forward-mode dual numbers over the 12 pose parameters.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

pub const NPARAM: usize = 12;

pub type Grad = [f64; NPARAM];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub g: Grad,
}

impl Dual {
    pub const fn constant(v: f64) -> Self {
        Dual { v, g: [0.0; NPARAM] }
    }

    pub fn variable(v: f64, index: usize) -> Self {
        let mut g = [0.0; NPARAM];
        g[index] = 1.0;
        Dual { v, g }
    }

    pub fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        let k = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.chain(s, k)
    }

    fn chain(self, v: f64, dv: f64) -> Self {
        let mut g = self.g;
        for x in &mut g {
            *x *= dv;
        }
        Dual { v, g }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(mut self, o: Dual) -> Dual {
        self.v += o.v;
        for (a, b) in self.g.iter_mut().zip(o.g) {
            *a += b;
        }
        self
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(mut self, o: Dual) -> Dual {
        self.v -= o.v;
        for (a, b) in self.g.iter_mut().zip(o.g) {
            *a -= b;
        }
        self
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.chain(-self.v, -1.0)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut g = [0.0; NPARAM];
        for (k, x) in g.iter_mut().enumerate() {
            *x = self.g[k] * o.v + self.v * o.g[k];
        }
        Dual { v: self.v * o.v, g }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, s: f64) -> Dual {
        self.chain(self.v * s, s)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut g = [0.0; NPARAM];
        for (k, x) in g.iter_mut().enumerate() {
            *x = (self.g[k] - v * o.g[k]) * inv;
        }
        Dual { v, g }
    }
}

/// Arithmetic shared by plain floats and duals, so geometry code is written once.
pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Mul<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(&self) -> f64;
}

impl Scalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
}

impl Scalar for Dual {
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }
    fn value(&self) -> f64 {
        self.v
    }
}
