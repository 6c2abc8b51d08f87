//! Cart with a double inverted pendulum (point masses). State
//! `[x, theta1, theta2, x_dot, theta1_dot, theta2_dot]`, both angles absolute
//! and measured from upright.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartTwoPoleParams {
    pub cart_mass: f64,
    pub mass1: f64,
    pub mass2: f64,
    pub length1: f64,
    pub length2: f64,
    pub gravity: f64,
}

impl Default for CartTwoPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 0.15,
            mass1: 0.6,
            mass2: 0.5,
            length1: 0.6,
            length2: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartTwoPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.cart_mass,
            self.mass1,
            self.mass2,
            self.length1,
            self.length2,
            self.gravity,
        ];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "cart-two-pole parameters must be positive: {self:?}"
            )))
        }
    }

    fn mass_matrix(&self, th1: f64, th2: f64) -> Matrix3<f64> {
        let (m0, m1, m2, l1, l2) = (self.cart_mass, self.mass1, self.mass2, self.length1, self.length2);
        let c1 = th1.cos();
        let c2 = th2.cos();
        let c12 = (th1 - th2).cos();
        let a = (m1 + m2) * l1 * c1;
        let b = m2 * l2 * c2;
        let d = m2 * l1 * l2 * c12;
        Matrix3::new(
            m0 + m1 + m2, a, b, //
            a, (m1 + m2) * l1 * l1, d, //
            b, d, m2 * l2 * l2,
        )
    }

    pub fn derivative(&self, x: &[f64; 6], force: f64) -> [f64; 6] {
        let (m1, m2, l1, l2, g) = (self.mass1, self.mass2, self.length1, self.length2, self.gravity);
        let (th1, th2) = (x[1], x[2]);
        let (w1, w2) = (x[4], x[5]);
        let s1 = th1.sin();
        let s2 = th2.sin();
        let s12 = (th1 - th2).sin();
        let rhs = Vector3::new(
            force + (m1 + m2) * l1 * s1 * w1 * w1 + m2 * l2 * s2 * w2 * w2,
            (m1 + m2) * g * l1 * s1 - m2 * l1 * l2 * s12 * w2 * w2,
            m2 * g * l2 * s2 + m2 * l1 * l2 * s12 * w1 * w1,
        );
        let acc = self
            .mass_matrix(th1, th2)
            .lu()
            .solve(&rhs)
            .unwrap_or_else(|| Vector3::repeat(f64::NAN));
        [x[3], x[4], x[5], acc[0], acc[1], acc[2]]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let (m1, m2, l1, l2, g) = (self.mass1, self.mass2, self.length1, self.length2, self.gravity);
        let qd = Vector3::new(x[3], x[4], x[5]);
        let kinetic = 0.5 * (qd.transpose() * self.mass_matrix(x[1], x[2]) * qd)[0];
        kinetic + (m1 + m2) * g * l1 * x[1].cos() + m2 * g * l2 * x[2].cos()
    }
}

/// Continuous-time derivative `dx/dt` for a cart-two-pole state.
pub fn cart2pole_step(params: &CartTwoPoleParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let state: [f64; 6] = x.try_into().map_err(|_| {
        Error::Dimension(format!("cart-two-pole state has length {}, expected 6", x.len()))
    })?;
    let d = params.derivative(&state, u[0]);
    if d.iter().all(|v| v.is_finite()) {
        Ok(d.to_vec())
    } else {
        Err(Error::Numerical("cart-two-pole derivative is not finite".into()))
    }
}
