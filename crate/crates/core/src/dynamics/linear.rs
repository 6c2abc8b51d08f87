use crate::dynamics::SimModel;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

/// Discrete linear plant `x_{k+1} = A_k x_k + B_k u_k`. A single matrix pair
/// is time-invariant; longer sequences are indexed by step and the last pair
/// is reused past the end.
#[derive(Debug, Clone)]
pub struct LinearModel {
    name: String,
    a: Vec<Matrix>,
    b: Vec<Matrix>,
    dt: f64,
    noise_scale: f64,
}

impl LinearModel {
    pub fn time_invariant(a: Matrix, b: Matrix, dt: f64) -> Result<Self> {
        Self::time_varying(vec![a], vec![b], dt)
    }

    pub fn time_varying(a: Vec<Matrix>, b: Vec<Matrix>, dt: f64) -> Result<Self> {
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::Dimension(format!(
                "linear model needs equally many A and B matrices, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        for (k, (ak, bk)) in a.iter().zip(&b).enumerate() {
            if ak.shape() != (n, n) || bk.shape() != (n, m) {
                return Err(Error::Dimension(format!(
                    "linear model step {k}: A is {:?}, B is {:?}, expected ({n}, {n}) and ({n}, {m})",
                    ak.shape(),
                    bk.shape()
                )));
            }
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {dt}")));
        }
        Ok(Self {
            name: "linear".into(),
            a,
            b,
            dt,
            noise_scale: 0.0,
        })
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_noise_scale(mut self, eps: f64) -> Self {
        self.noise_scale = eps;
        self
    }

    pub fn a(&self, k: usize) -> &Matrix {
        &self.a[k.min(self.a.len() - 1)]
    }

    pub fn b(&self, k: usize) -> &Matrix {
        &self.b[k.min(self.b.len() - 1)]
    }
}

impl SimModel for LinearModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    fn control_dim(&self) -> usize {
        self.b[0].ncols()
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    fn transition(&self, k: usize, x: &Vector, u: &Vector) -> Result<Vector> {
        Ok(self.a(k) * x + self.b(k) * u)
    }
}
