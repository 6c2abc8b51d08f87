//! Black-box simulation models.
//!
//! Every benchmark is exposed through [`SimModel`]: a discrete transition
//! map plus dimensions. Process noise enters through the control channel,
//! `step(x, u, w) = F(x, u + eps * w)`, where `F` is one RK4 step of the
//! continuous equations of motion with the input held over the step.

mod acrobot;
mod cart_two_pole;
mod cartpole;
mod linear;

use std::fmt;
use std::str::FromStr;

pub use acrobot::{acrobot_step, AcrobotParams};
pub use cart_two_pole::{cart2pole_step, CartTwoPoleParams};
pub use cartpole::{cartpole_step, CartPoleParams};
pub use linear::LinearModel;

use crate::error::{Error, Result};
use crate::numerics::{rk4_array, Matrix, Vector};

pub trait SimModel: Send + Sync {
    fn name(&self) -> &str;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn dt(&self) -> f64;
    /// Scale `eps` applied to noise samples passed to [`SimModel::step`].
    fn noise_scale(&self) -> f64;

    /// Noise-free transition `x_{k+1} = F_k(x_k, u_k)`.
    fn transition(&self, k: usize, x: &Vector, u: &Vector) -> Result<Vector>;

    fn step(&self, k: usize, x: &Vector, u: &Vector, w: Option<&Vector>) -> Result<Vector> {
        match w {
            Some(w) if self.noise_scale() != 0.0 => {
                self.transition(k, x, &(u + w * self.noise_scale()))
            }
            _ => self.transition(k, x, u),
        }
    }
}

impl<T: SimModel + ?Sized> SimModel for Box<T> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn control_dim(&self) -> usize {
        (**self).control_dim()
    }
    fn dt(&self) -> f64 {
        (**self).dt()
    }
    fn noise_scale(&self) -> f64 {
        (**self).noise_scale()
    }
    fn transition(&self, k: usize, x: &Vector, u: &Vector) -> Result<Vector> {
        (**self).transition(k, x, u)
    }
}

/// Benchmark identifiers understood by [`make_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Benchmark {
    CartPole,
    CartTwoPole,
    Acrobot,
    /// `x+ = 0.9 x + u`, the scalar linear validation system.
    Scalar,
    /// Discretized double integrator, a small quadratic test problem.
    DoubleIntegrator,
}

impl Benchmark {
    pub const ALL: [Benchmark; 5] = [
        Benchmark::CartPole,
        Benchmark::CartTwoPole,
        Benchmark::Acrobot,
        Benchmark::Scalar,
        Benchmark::DoubleIntegrator,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Benchmark::CartPole => "cartpole",
            Benchmark::CartTwoPole => "cart2pole",
            Benchmark::Acrobot => "acrobot",
            Benchmark::Scalar => "scalar",
            Benchmark::DoubleIntegrator => "double_integrator",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Benchmark::CartPole | Benchmark::Acrobot => 4,
            Benchmark::CartTwoPole => 6,
            Benchmark::Scalar => 1,
            Benchmark::DoubleIntegrator => 2,
        }
    }

    pub fn control_dim(self) -> usize {
        1
    }

    pub fn initial_state(self) -> Vector {
        use std::f64::consts::FRAC_PI_4 as Q;
        use std::f64::consts::FRAC_PI_2 as H;
        match self {
            Benchmark::CartPole => Vector::from_vec(vec![0.0, Q, 0.0, 0.0]),
            Benchmark::CartTwoPole => Vector::from_vec(vec![0.0, Q, Q, 0.0, 0.0, 0.0]),
            Benchmark::Acrobot => Vector::from_vec(vec![H, H, 0.0, 0.0]),
            Benchmark::Scalar => Vector::from_element(1, 1.0),
            Benchmark::DoubleIntegrator => Vector::from_vec(vec![1.0, 0.0]),
        }
    }

    pub fn target_state(self) -> Vector {
        Vector::zeros(self.state_dim())
    }

    /// Task horizon in seconds.
    pub fn horizon_seconds(self) -> f64 {
        match self {
            Benchmark::CartPole => 3.5,
            Benchmark::CartTwoPole => 3.0,
            Benchmark::Acrobot => 5.0,
            Benchmark::Scalar => 0.3,
            Benchmark::DoubleIntegrator => 1.0,
        }
    }
}

impl fmt::Display for Benchmark {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Benchmark {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Benchmark::ALL
            .iter()
            .copied()
            .find(|b| b.id() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Benchmark::ALL.iter().map(|b| b.id()).collect();
                Error::Config(format!("unknown benchmark '{s}' (known: {})", known.join(", ")))
            })
    }
}

/// Number of discrete steps covering `seconds` at step `dt`.
pub fn horizon_steps(seconds: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(seconds > 0.0) {
        return Err(Error::Config(format!(
            "horizon {seconds} s and dt {dt} s must both be positive"
        )));
    }
    let n = (seconds / dt).round();
    if n < 1.0 {
        return Err(Error::Config(format!("horizon {seconds} s is shorter than one step of {dt} s")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MechanicalPlant {
    CartPole(CartPoleParams),
    CartTwoPole(CartTwoPoleParams),
    Acrobot(AcrobotParams),
}

impl MechanicalPlant {
    pub fn state_dim(&self) -> usize {
        match self {
            MechanicalPlant::CartPole(_) | MechanicalPlant::Acrobot(_) => 4,
            MechanicalPlant::CartTwoPole(_) => 6,
        }
    }

    /// Total mechanical energy (for conservation checks).
    pub fn energy(&self, x: &[f64]) -> f64 {
        match self {
            MechanicalPlant::CartPole(p) => p.energy(x),
            MechanicalPlant::CartTwoPole(p) => p.energy(x),
            MechanicalPlant::Acrobot(p) => p.energy(x),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            MechanicalPlant::CartPole(p) => p.validate(),
            MechanicalPlant::CartTwoPole(p) => p.validate(),
            MechanicalPlant::Acrobot(p) => p.validate(),
        }
    }
}

/// A mechanical benchmark discretized with RK4 under zero-order-hold input.
#[derive(Debug, Clone)]
pub struct BenchmarkModel {
    name: String,
    plant: MechanicalPlant,
    dt: f64,
    noise_scale: f64,
    noise_cov: Matrix,
}

impl BenchmarkModel {
    pub fn new(plant: MechanicalPlant, dt: f64) -> Result<Self> {
        plant.validate()?;
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0, got {dt}")));
        }
        let name = match plant {
            MechanicalPlant::CartPole(_) => "cartpole",
            MechanicalPlant::CartTwoPole(_) => "cart2pole",
            MechanicalPlant::Acrobot(_) => "acrobot",
        };
        Ok(Self {
            name: name.into(),
            plant,
            dt,
            noise_scale: 0.0,
            noise_cov: Matrix::identity(1, 1),
        })
    }

    pub fn with_noise(mut self, eps: f64, cov: Matrix) -> Result<Self> {
        if cov.shape() != (1, 1) {
            return Err(Error::Dimension(format!(
                "noise covariance must be 1x1 for a single-input benchmark, got {:?}",
                cov.shape()
            )));
        }
        self.noise_scale = eps;
        self.noise_cov = cov;
        Ok(self)
    }

    pub fn plant(&self) -> &MechanicalPlant {
        &self.plant
    }

    pub fn noise_cov(&self) -> &Matrix {
        &self.noise_cov
    }
}

fn finite_vector(values: &[f64], what: &str) -> Result<Vector> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(Vector::from_column_slice(values))
    } else {
        Err(Error::Numerical(format!("{what} produced a non-finite state")))
    }
}

impl SimModel for BenchmarkModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn state_dim(&self) -> usize {
        self.plant.state_dim()
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn dt(&self) -> f64 {
        self.dt
    }

    fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    fn transition(&self, _k: usize, x: &Vector, u: &Vector) -> Result<Vector> {
        if x.len() != self.state_dim() || u.len() != 1 {
            return Err(Error::Dimension(format!(
                "{}: state length {} / control length {}, expected {} / 1",
                self.name,
                x.len(),
                u.len(),
                self.state_dim()
            )));
        }
        let force = u[0];
        match &self.plant {
            MechanicalPlant::CartPole(p) => {
                let s: [f64; 4] = x.as_slice().try_into().expect("checked length");
                let next = rk4_array(|s| p.derivative(s, force), &s, self.dt);
                finite_vector(&next, &self.name)
            }
            MechanicalPlant::CartTwoPole(p) => {
                let s: [f64; 6] = x.as_slice().try_into().expect("checked length");
                let next = rk4_array(|s| p.derivative(s, force), &s, self.dt);
                finite_vector(&next, &self.name)
            }
            MechanicalPlant::Acrobot(p) => {
                let s: [f64; 4] = x.as_slice().try_into().expect("checked length");
                let next = rk4_array(|s| p.derivative(s, force), &s, self.dt);
                finite_vector(&next, &self.name)
            }
        }
    }
}

/// Builds a benchmark model with default physical parameters.
pub fn make_model(name: &str, dt: f64, noise_scale: f64, noise_cov: &Matrix) -> Result<Box<dyn SimModel>> {
    let bench: Benchmark = name.parse()?;
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be > 0, got {dt}")));
    }
    if noise_cov.shape() != (1, 1) || noise_cov[(0, 0)] < 0.0 {
        return Err(Error::Config(format!(
            "noise covariance must be a non-negative 1x1 matrix, got {noise_cov}"
        )));
    }
    let mechanical = |plant| -> Result<Box<dyn SimModel>> {
        Ok(Box::new(
            BenchmarkModel::new(plant, dt)?.with_noise(noise_scale, noise_cov.clone())?,
        ))
    };
    match bench {
        Benchmark::CartPole => mechanical(MechanicalPlant::CartPole(CartPoleParams::default())),
        Benchmark::CartTwoPole => mechanical(MechanicalPlant::CartTwoPole(CartTwoPoleParams::default())),
        Benchmark::Acrobot => mechanical(MechanicalPlant::Acrobot(AcrobotParams::default())),
        Benchmark::Scalar => Ok(Box::new(
            LinearModel::time_invariant(Matrix::from_element(1, 1, 0.9), Matrix::from_element(1, 1, 1.0), dt)?
                .named("scalar")
                .with_noise_scale(noise_scale),
        )),
        Benchmark::DoubleIntegrator => Ok(Box::new(
            LinearModel::time_invariant(
                Matrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
                Matrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
                dt,
            )?
            .named("double_integrator")
            .with_noise_scale(noise_scale),
        )),
    }
}

/// State and control sequences over a horizon of `N` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
}

impl Trajectory {
    pub fn new(states: Vec<Vector>, controls: Vec<Vector>) -> Result<Self> {
        if controls.is_empty() || states.len() != controls.len() + 1 {
            return Err(Error::Dimension(format!(
                "trajectory needs N >= 1 controls and N + 1 states, got {} and {}",
                controls.len(),
                states.len()
            )));
        }
        Ok(Self { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn control_dim(&self) -> usize {
        self.controls[0].len()
    }

    pub fn terminal(&self) -> &Vector {
        self.states.last().expect("trajectory has at least one state")
    }
}

/// Simulates `model` from `x0` under `controls`, optionally with one noise
/// sample per step.
pub fn rollout<M: SimModel + ?Sized>(
    model: &M,
    x0: &Vector,
    controls: &[Vector],
    noise: Option<&[Vector]>,
) -> Result<Trajectory> {
    if controls.is_empty() {
        return Err(Error::Config("rollout needs at least one control".into()));
    }
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension(format!(
            "initial state has length {}, model expects {}",
            x0.len(),
            model.state_dim()
        )));
    }
    if let Some(w) = noise {
        if w.len() != controls.len() {
            return Err(Error::Dimension(format!(
                "{} noise samples for {} controls",
                w.len(),
                controls.len()
            )));
        }
    }
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let w = noise.map(|w| &w[k]);
        let next = model
            .step(k, &states[k], u, w)
            .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        controls: controls.to_vec(),
    })
}
