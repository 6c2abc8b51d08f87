//! Acrobot with uniform rods and viscous joint friction. State
//! `[theta1, theta2, theta1_dot, theta2_dot]`: `theta1` absolute from
//! upright, `theta2` relative to the first link. Torque acts on the second
//! joint only.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcrobotParams {
    pub mass1: f64,
    pub mass2: f64,
    pub length1: f64,
    pub length2: f64,
    pub friction1: f64,
    pub friction2: f64,
    pub gravity: f64,
}

impl Default for AcrobotParams {
    fn default() -> Self {
        Self {
            mass1: 1.0,
            mass2: 1.0,
            length1: 0.5,
            length2: 0.5,
            friction1: 0.05,
            friction2: 0.05,
            gravity: 9.81,
        }
    }
}

impl AcrobotParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.mass1, self.mass2, self.length1, self.length2, self.gravity];
        let ok = positive.iter().all(|v| v.is_finite() && *v > 0.0)
            && self.friction1 >= 0.0
            && self.friction2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid acrobot parameters: {self:?}")))
        }
    }

    fn inertia(&self) -> (f64, f64, f64, f64) {
        let lc1 = 0.5 * self.length1;
        let lc2 = 0.5 * self.length2;
        let i1 = self.mass1 * self.length1 * self.length1 / 12.0;
        let i2 = self.mass2 * self.length2 * self.length2 / 12.0;
        (lc1, lc2, i1, i2)
    }

    fn mass_matrix(&self, th2: f64) -> (f64, f64, f64) {
        let (m1, m2, l1) = (self.mass1, self.mass2, self.length1);
        let (lc1, lc2, i1, i2) = self.inertia();
        let c2 = th2.cos();
        let d11 = m1 * lc1 * lc1 + m2 * (l1 * l1 + lc2 * lc2 + 2.0 * l1 * lc2 * c2) + i1 + i2;
        let d12 = m2 * (lc2 * lc2 + l1 * lc2 * c2) + i2;
        let d22 = m2 * lc2 * lc2 + i2;
        (d11, d12, d22)
    }

    pub fn derivative(&self, x: &[f64; 4], torque: f64) -> [f64; 4] {
        let (m1, m2, l1, g) = (self.mass1, self.mass2, self.length1, self.gravity);
        let (lc1, lc2, _, _) = self.inertia();
        let (th1, th2, w1, w2) = (x[0], x[1], x[2], x[3]);
        let (d11, d12, d22) = self.mass_matrix(th2);
        let s2 = th2.sin();
        let s1 = th1.sin();
        let s12 = (th1 + th2).sin();
        let hk = m2 * l1 * lc2 * s2;
        // Coriolis/centrifugal and gravity generalized forces (moved to the rhs).
        let bias1 = -hk * (2.0 * w1 * w2 + w2 * w2) - (m1 * lc1 + m2 * l1) * g * s1 - m2 * lc2 * g * s12;
        let bias2 = hk * w1 * w1 - m2 * lc2 * g * s12;
        let r1 = -self.friction1 * w1 - bias1;
        let r2 = torque - self.friction2 * w2 - bias2;
        let det = d11 * d22 - d12 * d12;
        let a1 = (d22 * r1 - d12 * r2) / det;
        let a2 = (d11 * r2 - d12 * r1) / det;
        [w1, w2, a1, a2]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let (m1, m2, l1, g) = (self.mass1, self.mass2, self.length1, self.gravity);
        let (lc1, lc2, _, _) = self.inertia();
        let (d11, d12, d22) = self.mass_matrix(x[1]);
        let (w1, w2) = (x[2], x[3]);
        let kinetic = 0.5 * (d11 * w1 * w1 + 2.0 * d12 * w1 * w2 + d22 * w2 * w2);
        let potential = m1 * g * lc1 * x[0].cos() + m2 * g * (l1 * x[0].cos() + lc2 * (x[0] + x[1]).cos());
        kinetic + potential
    }
}

/// Continuous-time derivative `dx/dt` for an acrobot state.
pub fn acrobot_step(params: &AcrobotParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let state: [f64; 4] = x
        .try_into()
        .map_err(|_| Error::Dimension(format!("acrobot state has length {}, expected 4", x.len())))?;
    let d = params.derivative(&state, u[0]);
    if d.iter().all(|v| v.is_finite()) {
        Ok(d.to_vec())
    } else {
        Err(Error::Numerical("acrobot derivative is not finite".into()))
    }
}
