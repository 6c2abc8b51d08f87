//! Cart-pole with a point-mass bob. State `[x, theta, x_dot, theta_dot]`,
//! `theta = 0` upright, control is the horizontal force on the cart.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartPoleParams {
    pub cart_mass: f64,
    pub pole_mass: f64,
    pub pole_length: f64,
    pub gravity: f64,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pole_mass: 0.1,
            pole_length: 0.5,
            gravity: 9.81,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pole_mass, self.pole_length, self.gravity];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("cart-pole parameters must be positive: {self:?}")))
        }
    }

    pub fn derivative(&self, x: &[f64; 4], force: f64) -> [f64; 4] {
        let (mc, mp, l, g) = (self.cart_mass, self.pole_mass, self.pole_length, self.gravity);
        let (s, c) = x[1].sin_cos();
        let thdot = x[3];
        let xacc = (force + mp * s * (l * thdot * thdot - g * c)) / (mc + mp * s * s);
        let thacc = (g * s - xacc * c) / l;
        [x[2], x[3], xacc, thacc]
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        let (mc, mp, l, g) = (self.cart_mass, self.pole_mass, self.pole_length, self.gravity);
        let c = x[1].cos();
        let (xd, td) = (x[2], x[3]);
        0.5 * (mc + mp) * xd * xd + mp * l * xd * td * c + 0.5 * mp * l * l * td * td + mp * g * l * c
    }
}

/// Continuous-time derivative `dx/dt` for a cart-pole state.
pub fn cartpole_step(params: &CartPoleParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let state: [f64; 4] = x
        .try_into()
        .map_err(|_| Error::Dimension(format!("cart-pole state has length {}, expected 4", x.len())))?;
    let d = params.derivative(&state, u[0]);
    if d.iter().all(|v| v.is_finite()) {
        Ok(d.to_vec())
    } else {
        Err(Error::Numerical("cart-pole derivative is not finite".into()))
    }
}
