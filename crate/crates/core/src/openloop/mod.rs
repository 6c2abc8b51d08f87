//! Model-free open-loop trajectory optimization.
//!
//! The cost is only ever observed through noise-free rollouts of the black
//! box. Gradients are forward differences over every control coordinate, so
//! one gradient costs `N * n_u + 1` rollouts; [`CostEvaluator`] counts them.

use std::sync::atomic::{AtomicU64, Ordering};

use log::debug;
use rayon::prelude::*;

use crate::dynamics::{SimModel, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, symmetrize, Matrix, Vector};

/// Quadratic tracking cost
/// `J = sum_k (x_k - t)' Q (x_k - t) + 1/2 u_k' R u_k + (x_N - t)' Q_N (x_N - t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q_inc: Matrix,
    pub r: Matrix,
    pub q_terminal: Matrix,
    pub target: Vector,
}

impl CostSpec {
    pub fn new(q_inc: Matrix, r: Matrix, q_terminal: Matrix, target: Vector) -> Result<Self> {
        let spec = Self {
            q_inc,
            r,
            q_terminal,
            target,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Diagonal weights, the common case for configs.
    pub fn diagonal(q_inc: &[f64], r: &[f64], q_terminal: &[f64], target: Vector) -> Result<Self> {
        Self::new(
            Matrix::from_diagonal(&Vector::from_column_slice(q_inc)),
            Matrix::from_diagonal(&Vector::from_column_slice(r)),
            Matrix::from_diagonal(&Vector::from_column_slice(q_terminal)),
            target,
        )
    }

    pub fn state_dim(&self) -> usize {
        self.target.len()
    }

    pub fn control_dim(&self) -> usize {
        self.r.nrows()
    }

    fn validate(&self) -> Result<()> {
        let n = self.target.len();
        let m = self.r.nrows();
        if self.q_inc.shape() != (n, n) || self.q_terminal.shape() != (n, n) || self.r.shape() != (m, m) {
            return Err(Error::Dimension(format!(
                "cost weights Q {:?}, Q_N {:?}, R {:?} do not match state dim {n}",
                self.q_inc.shape(),
                self.q_terminal.shape(),
                self.r.shape()
            )));
        }
        let sym_tol = 1e-12;
        for (name, w) in [("Q", &self.q_inc), ("Q_N", &self.q_terminal), ("R", &self.r)] {
            if (w - w.transpose()).amax() > sym_tol * w.amax().max(1.0) {
                return Err(Error::Config(format!("{name} must be symmetric")));
            }
            if !w.iter().all(|v| v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if min_eigenvalue(&self.q_inc) < -1e-12 || min_eigenvalue(&self.q_terminal) < -1e-12 {
            return Err(Error::Config("Q and Q_N must be positive semi-definite".into()));
        }
        if m > 0 && min_eigenvalue(&self.r) <= 0.0 {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(())
    }

    pub fn stage(&self, x: &Vector, u: &Vector) -> f64 {
        let dx = x - &self.target;
        dx.dot(&(&self.q_inc * &dx)) + 0.5 * u.dot(&(&self.r * u))
    }

    pub fn terminal(&self, x: &Vector) -> f64 {
        let dx = x - &self.target;
        dx.dot(&(&self.q_terminal * &dx))
    }

    pub fn trajectory_cost(&self, traj: &Trajectory) -> f64 {
        let mut total = 0.0;
        for (x, u) in traj.states.iter().zip(&traj.controls) {
            total += self.stage(x, u);
        }
        total + self.terminal(traj.terminal())
    }

    /// Gradient of the state part of the stage cost, as a row vector.
    pub fn stage_state_gradient(&self, x: &Vector) -> Matrix {
        row(&(&self.q_inc * (x - &self.target) * 2.0))
    }

    pub fn terminal_gradient(&self, x: &Vector) -> Matrix {
        row(&(&self.q_terminal * (x - &self.target) * 2.0))
    }
}

fn row(v: &Vector) -> Matrix {
    Matrix::from_row_slice(1, v.len(), v.as_slice())
}

/// Counts every simulated rollout so the caller can report learning trials.
pub struct CostEvaluator<'a, M: SimModel + ?Sized> {
    model: &'a M,
    cost: &'a CostSpec,
    x0: Vector,
    rollouts: AtomicU64,
}

impl<'a, M: SimModel + ?Sized> CostEvaluator<'a, M> {
    pub fn new(model: &'a M, cost: &'a CostSpec, x0: Vector) -> Result<Self> {
        if x0.len() != model.state_dim() || cost.state_dim() != model.state_dim() {
            return Err(Error::Dimension(format!(
                "x0 length {} and cost dim {} must equal model state dim {}",
                x0.len(),
                cost.state_dim(),
                model.state_dim()
            )));
        }
        if cost.control_dim() != model.control_dim() {
            return Err(Error::Dimension(format!(
                "cost has control dim {}, model has {}",
                cost.control_dim(),
                model.control_dim()
            )));
        }
        Ok(Self {
            model,
            cost,
            x0,
            rollouts: AtomicU64::new(0),
        })
    }

    pub fn rollouts(&self) -> u64 {
        self.rollouts.load(Ordering::Relaxed)
    }

    pub fn model(&self) -> &M {
        self.model
    }

    pub fn cost_spec(&self) -> &CostSpec {
        self.cost
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    /// Noise-free cost of a control sequence.
    pub fn cost(&self, controls: &[Vector]) -> Result<f64> {
        self.rollouts.fetch_add(1, Ordering::Relaxed);
        let mut x = self.x0.clone();
        let mut total = 0.0;
        for (k, u) in controls.iter().enumerate() {
            total += self.cost.stage(&x, u);
            x = self
                .model
                .transition(k, &x, u)
                .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
        }
        Ok(total + self.cost.terminal(&x))
    }

    pub fn trajectory(&self, controls: &[Vector]) -> Result<Trajectory> {
        crate::dynamics::rollout(self.model, &self.x0, controls, None)
    }
}

/// Cost `J(U)` plus its forward-difference gradient.
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub cost: f64,
    pub gradient: Vec<Vector>,
}

impl FdGradient {
    pub fn norm(&self) -> f64 {
        self.gradient.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Forward-difference gradient `(J(U + h e_i) - J(U)) / h` for every control
/// coordinate. Uses exactly `N * n_u + 1` rollouts; the perturbed rollouts run
/// in parallel.
///
/// Perturbing `u_i` leaves the trajectory before step `i` untouched, so each
/// perturbed rollout resumes from the cached base state and partial cost. The
/// floating-point operations are the same as a full re-simulation.
pub fn fd_gradient<M: SimModel + ?Sized>(
    eval: &CostEvaluator<'_, M>,
    controls: &[Vector],
    h: f64,
) -> Result<FdGradient> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let n = controls.len();
    if n == 0 {
        return Err(Error::Config("empty control sequence".into()));
    }
    let m = eval.model.control_dim();
    let spec = eval.cost;

    eval.rollouts.fetch_add(1, Ordering::Relaxed);
    let mut states = Vec::with_capacity(n + 1);
    let mut partial = Vec::with_capacity(n + 1);
    states.push(eval.x0.clone());
    partial.push(0.0);
    for (k, u) in controls.iter().enumerate() {
        partial.push(partial[k] + spec.stage(&states[k], u));
        let next = eval
            .model
            .transition(k, &states[k], u)
            .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
        states.push(next);
    }
    let base = partial[n] + spec.terminal(&states[n]);

    let perturbed: Vec<f64> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (step, comp) = (idx / m, idx % m);
            eval.rollouts.fetch_add(1, Ordering::Relaxed);
            let mut u = controls[step].clone();
            u[comp] += h;
            let mut total = partial[step] + spec.stage(&states[step], &u);
            let mut x = eval
                .model
                .transition(step, &states[step], &u)
                .map_err(|e| Error::Rollout { step, source: Box::new(e) })?;
            for (k, uk) in controls.iter().enumerate().skip(step + 1) {
                total += spec.stage(&x, uk);
                x = eval
                    .model
                    .transition(k, &x, uk)
                    .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
            }
            Ok(total + spec.terminal(&x))
        })
        .collect::<Result<_>>()?;

    let gradient = (0..n)
        .map(|k| Vector::from_fn(m, |c, _| (perturbed[k * m + c] - base) / h))
        .collect();
    Ok(FdGradient { cost: base, gradient })
}

/// Central-difference gradient, the reference used to check [`fd_gradient`].
pub fn central_gradient<M: SimModel + ?Sized>(
    eval: &CostEvaluator<'_, M>,
    controls: &[Vector],
    h: f64,
) -> Result<Vec<Vector>> {
    let m = eval.model.control_dim();
    let n = controls.len();
    let values: Vec<f64> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (step, comp) = (idx / m, idx % m);
            let mut plus = controls.to_vec();
            plus[step][comp] += h;
            let mut minus = controls.to_vec();
            minus[step][comp] -= h;
            Ok((eval.cost(&plus)? - eval.cost(&minus)?) / (2.0 * h))
        })
        .collect::<Result<_>>()?;
    Ok((0..n)
        .map(|k| Vector::from_fn(m, |c, _| values[k * m + c]))
        .collect())
}

/// Square-root factors of the cost weights, so that `J(U) = |r(U)|^2` with
/// `r = [S_Q dx_0; S_R u_0; ...; S_Q dx_{N-1}; S_R u_{N-1}; S_N dx_N]`.
/// The state rows are dropped when `Q` is zero.
#[derive(Debug, Clone)]
struct ResidualMap {
    sq: Option<Matrix>,
    sr: Matrix,
    sn: Matrix,
    target: Vector,
}

fn sqrt_factor(w: &Matrix) -> Matrix {
    let eig = symmetrize(w).symmetric_eigen();
    let scale = Vector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Matrix::from_diagonal(&scale) * eig.eigenvectors.transpose()
}

impl ResidualMap {
    fn new(spec: &CostSpec) -> Self {
        Self {
            sq: (spec.q_inc.amax() > 0.0).then(|| sqrt_factor(&spec.q_inc)),
            sr: sqrt_factor(&(&spec.r * 0.5)),
            sn: sqrt_factor(&spec.q_terminal),
            target: spec.target.clone(),
        }
    }

    fn state_rows(&self) -> usize {
        self.sq.as_ref().map_or(0, |s| s.nrows())
    }

    fn block(&self) -> usize {
        self.state_rows() + self.sr.nrows()
    }

    fn len(&self, n: usize) -> usize {
        n * self.block() + self.sn.nrows()
    }

    /// Row offset of the state residual for `x_k`.
    fn state_offset(&self, k: usize, n: usize) -> usize {
        if k == n {
            n * self.block()
        } else {
            k * self.block()
        }
    }

    fn write_state(&self, k: usize, n: usize, x: &Vector, out: &mut [f64]) {
        let dx = x - &self.target;
        let s = if k == n { Some(&self.sn) } else { self.sq.as_ref() };
        if let Some(s) = s {
            let off = self.state_offset(k, n);
            let v = s * dx;
            out[off..off + v.len()].copy_from_slice(v.as_slice());
        }
    }

    fn residual(&self, states: &[Vector], controls: &[Vector]) -> Vector {
        let n = controls.len();
        let mut r = vec![0.0; self.len(n)];
        for (k, u) in controls.iter().enumerate() {
            self.write_state(k, n, &states[k], &mut r);
            let off = k * self.block() + self.state_rows();
            let v = &self.sr * u;
            r[off..off + v.len()].copy_from_slice(v.as_slice());
        }
        self.write_state(n, n, &states[n], &mut r);
        Vector::from_vec(r)
    }
}

/// Forward-difference Jacobian of the residual `r(U)` with `J = |r|^2`,
/// from the same `N * n_u + 1` rollouts as [`fd_gradient`].
struct FdJacobian {
    cost: f64,
    residual: Vector,
    jacobian: Matrix,
}

fn fd_jacobian<M: SimModel + ?Sized>(
    eval: &CostEvaluator<'_, M>,
    map: &ResidualMap,
    controls: &[Vector],
    h: f64,
) -> Result<FdJacobian> {
    let n = controls.len();
    let m = eval.model.control_dim();
    eval.rollouts.fetch_add(1, Ordering::Relaxed);
    let mut states = Vec::with_capacity(n + 1);
    states.push(eval.x0.clone());
    for (k, u) in controls.iter().enumerate() {
        let next = eval
            .model
            .transition(k, &states[k], u)
            .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
        states.push(next);
    }
    let residual = map.residual(&states, controls);
    let rows = residual.len();

    let columns: Vec<Vec<f64>> = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (step, comp) = (idx / m, idx % m);
            eval.rollouts.fetch_add(1, Ordering::Relaxed);
            let mut perturbed = residual.as_slice().to_vec();
            let mut u = controls[step].clone();
            u[comp] += h;
            let off = step * map.block() + map.state_rows();
            let v = &map.sr * &u;
            perturbed[off..off + v.len()].copy_from_slice(v.as_slice());
            let mut x = eval
                .model
                .transition(step, &states[step], &u)
                .map_err(|e| Error::Rollout { step, source: Box::new(e) })?;
            for k in step + 1..=n {
                map.write_state(k, n, &x, &mut perturbed);
                if k < n {
                    x = eval
                        .model
                        .transition(k, &x, &controls[k])
                        .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
                }
            }
            Ok(perturbed
                .iter()
                .zip(residual.iter())
                .map(|(p, r)| (p - r) / h)
                .collect())
        })
        .collect::<Result<_>>()?;

    let jacobian = Matrix::from_fn(rows, n * m, |i, j| columns[j][i]);
    Ok(FdJacobian {
        cost: residual.norm_squared(),
        residual,
        jacobian,
    })
}

/// Runs [`gradient_descent`] through the terminal-weight continuation of
/// `config`, warm-starting each stage from the previous result. Rollouts and
/// history accumulate across stages; the reported cost is that of `cost`.
pub fn optimize<M: SimModel + ?Sized>(
    model: &M,
    cost: &CostSpec,
    x0: &Vector,
    initial: &[Vector],
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    config.validate()?;
    let factors: Vec<f64> = config.terminal_continuation.iter().copied().chain([1.0]).collect();
    let mut controls = initial.to_vec();
    let mut history = Vec::new();
    let mut rollouts = 0;
    let mut iterations = 0;
    let mut last = None;
    for (stage, factor) in factors.iter().enumerate() {
        let mut staged = cost.clone();
        staged.q_terminal *= *factor;
        let eval = CostEvaluator::new(model, &staged, x0.clone())?;
        let result = gradient_descent(&eval, &controls, config)
            .map_err(|e| e.context(format!("continuation stage {stage} (Q_N x {factor})")))?;
        history.extend(result.history.iter().map(|r| IterationRecord {
            stage,
            rollouts: r.rollouts + rollouts,
            ..*r
        }));
        rollouts += result.rollouts;
        iterations += result.iterations;
        controls = result.nominal.controls.clone();
        last = Some(result);
    }
    let last = last.expect("at least one stage");
    Ok(OptimizeResult {
        nominal: last.nominal,
        cost: last.cost,
        history,
        stop: last.stop,
        iterations,
        rollouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DescentDirection {
    /// Steepest descent, as in the plain gradient method.
    Gradient,
    /// Limited-memory BFGS direction built from the same finite-difference
    /// gradients; still cost evaluations only.
    Lbfgs { memory: usize },
    /// Levenberg-Marquardt on the residual form `J = |r|^2`, with the
    /// residual Jacobian taken from the same perturbed rollouts.
    LevenbergMarquardt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub step_size: f64,
    pub fd_step: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub backtracking: bool,
    pub direction: DescentDirection,
    /// Factors applied to `Q_N` in warm-started stages before the final,
    /// unscaled solve. Empty runs a single stage.
    pub terminal_continuation: Vec<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            fd_step: 1e-4,
            tolerance: 1e-3,
            max_iterations: 1000,
            backtracking: true,
            direction: DescentDirection::Gradient,
            terminal_continuation: Vec::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.fd_step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config(format!(
                "step size, fd step and tolerance must be positive: {self:?}"
            )));
        }
        if self.terminal_continuation.iter().any(|f| !(*f > 0.0 && f.is_finite())) {
            return Err(Error::Config("terminal continuation factors must be positive".into()));
        }
        if let DescentDirection::Lbfgs { memory } = self.direction {
            if memory == 0 {
                return Err(Error::Config("L-BFGS memory must be >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    /// Continuation stage; the last stage optimizes the configured cost.
    pub stage: usize,
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub rollouts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// The line search could not decrease the cost any further.
    Stalled,
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub nominal: Trajectory,
    pub cost: f64,
    pub history: Vec<IterationRecord>,
    pub stop: StopReason,
    pub iterations: usize,
    pub rollouts: u64,
}

impl OptimizeResult {
    pub fn converged(&self) -> bool {
        self.stop == StopReason::Converged
    }

    pub fn cost_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.cost).collect()
    }

    pub fn grad_norm_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.grad_norm).collect()
    }
}

fn flatten(v: &[Vector]) -> Vector {
    Vector::from_iterator(v.iter().map(|x| x.len()).sum(), v.iter().flat_map(|x| x.iter().copied()))
}

fn unflatten(flat: &Vector, m: usize) -> Vec<Vector> {
    flat.as_slice().chunks(m).map(Vector::from_column_slice).collect()
}

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

struct Lbfgs {
    memory: usize,
    pairs: Vec<(Vector, Vector, f64)>,
}

impl Lbfgs {
    fn direction(&self, grad: &Vector) -> Vector {
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, rho) in self.pairs.iter().rev() {
            let a = rho * s.dot(&q);
            q.axpy(-a, y, 1.0);
            alphas.push(a);
        }
        if let Some((s, y, _)) = self.pairs.last() {
            q *= s.dot(y) / y.dot(y);
        }
        for ((s, y, rho), a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * y.dot(&q);
            q.axpy(a - b, s, 1.0);
        }
        -q
    }

    fn push(&mut self, s: Vector, y: Vector) {
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if self.pairs.len() == self.memory {
                self.pairs.remove(0);
            }
            self.pairs.push((s, y, 1.0 / sy));
        }
    }
}

/// Gradient descent on the black-box cost `J(U)`.
///
/// Each iteration computes the forward-difference gradient, stops when its
/// norm is below `tolerance`, and otherwise updates `U <- U + alpha d`. With
/// backtracking enabled the step is halved until the Armijo condition holds,
/// so the recorded cost is strictly decreasing; the best iterate is always
/// the one returned.
pub fn gradient_descent<M: SimModel + ?Sized>(
    eval: &CostEvaluator<'_, M>,
    initial: &[Vector],
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    config.validate()?;
    if initial.is_empty() {
        return Err(Error::Config("initial control sequence is empty".into()));
    }
    let m = eval.model.control_dim();
    if initial.iter().any(|u| u.len() != m) {
        return Err(Error::Dimension(format!("controls must have length {m}")));
    }

    if config.direction == DescentDirection::LevenbergMarquardt {
        return levenberg_marquardt(eval, initial, config);
    }

    let mut u = flatten(initial);
    let mut history = Vec::new();
    let mut lbfgs = match config.direction {
        DescentDirection::Lbfgs { memory } => Some(Lbfgs {
            memory,
            pairs: Vec::new(),
        }),
        DescentDirection::Gradient | DescentDirection::LevenbergMarquardt => None,
    };
    let mut alpha = config.step_size;
    let mut prev: Option<(Vector, Vector)> = None;
    let mut iteration = 0;
    let mut best: Option<(f64, Vector)> = None;
    let stop;

    loop {
        let fd = match fd_gradient(eval, &unflatten(&u, m), config.fd_step) {
            Ok(fd) if fd.cost.is_finite() => fd,
            Ok(_) | Err(Error::Rollout { .. }) if best.is_some() => {
                let (cost, last) = best.expect("checked");
                return Err(Error::Diverged {
                    iterations: iteration,
                    last_cost: cost,
                    last_finite: unflatten(&last, m),
                });
            }
            Ok(_) => return Err(Error::Numerical("initial cost is not finite".into())),
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(c, _)| fd.cost < *c) {
            best = Some((fd.cost, u.clone()));
        }
        let g = flatten(&fd.gradient);
        let gnorm = g.norm();
        history.push(IterationRecord {
            stage: 0,
            iteration,
            cost: fd.cost,
            grad_norm: gnorm,
            rollouts: eval.rollouts(),
        });
        debug!("iter {iteration}: cost {:.6e} |grad| {gnorm:.3e}", fd.cost);
        if gnorm < config.tolerance {
            stop = StopReason::Converged;
            break;
        }
        if iteration >= config.max_iterations {
            stop = StopReason::MaxIterations;
            break;
        }

        if let (Some(mem), Some((u_prev, g_prev))) = (lbfgs.as_mut(), prev.as_ref()) {
            mem.push(&u - u_prev, &g - g_prev);
        }
        let mut dir = match &lbfgs {
            Some(mem) if !mem.pairs.is_empty() => mem.direction(&g),
            _ => -&g,
        };
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            // Curvature pairs produced an ascent direction; fall back to -g.
            if let Some(mem) = lbfgs.as_mut() {
                mem.pairs.clear();
            }
            dir = -&g;
            slope = -gnorm * gnorm;
        }
        let uses_unit_step = matches!(&lbfgs, Some(mem) if !mem.pairs.is_empty());

        let next = if config.backtracking {
            let search = |dir: &Vector, slope: f64, mut step: f64| {
                for _ in 0..MAX_HALVINGS {
                    let trial = &u + dir * step;
                    match eval.cost(&unflatten(&trial, m)) {
                        Ok(j) if j.is_finite()
                            && j < fd.cost
                            && j <= fd.cost + ARMIJO * step * slope =>
                        {
                            return Some((trial, step));
                        }
                        _ => step *= 0.5,
                    }
                }
                None
            };
            let mut accepted = search(&dir, slope, if uses_unit_step { 1.0 } else { alpha });
            if accepted.is_none() && uses_unit_step {
                // Quasi-Newton direction failed; restart from steepest descent.
                if let Some(mem) = lbfgs.as_mut() {
                    mem.pairs.clear();
                }
                accepted = search(&-&g, -gnorm * gnorm, alpha);
                if let Some((_, step)) = &accepted {
                    alpha = step * 2.0;
                }
            }
            match accepted {
                Some((trial, step)) => {
                    if !uses_unit_step {
                        // Let the steepest-descent step grow back after easy iterations.
                        alpha = step * 2.0;
                    }
                    trial
                }
                None => {
                    stop = StopReason::Stalled;
                    break;
                }
            }
        } else {
            &u + &dir * config.step_size
        };

        prev = Some((u, g));
        u = next;
        iteration += 1;
    }

    let (cost, best_u) = best.expect("at least one gradient evaluation");
    let controls = unflatten(&best_u, m);
    let nominal = eval.trajectory(&controls)?;
    Ok(OptimizeResult {
        nominal,
        cost,
        iterations: iteration,
        history,
        stop,
        rollouts: eval.rollouts(),
    })
}

fn levenberg_marquardt<M: SimModel + ?Sized>(
    eval: &CostEvaluator<'_, M>,
    initial: &[Vector],
    config: &OptimizerConfig,
) -> Result<OptimizeResult> {
    const MAX_DAMPING_TRIES: usize = 40;

    let m = eval.model.control_dim();
    let map = ResidualMap::new(eval.cost);
    let mut u = flatten(initial);
    let mut damping = 1e-3;
    let mut history = Vec::new();
    let mut iteration = 0;
    let mut best: Option<(f64, Vector)> = None;
    let stop;

    loop {
        let fj = match fd_jacobian(eval, &map, &unflatten(&u, m), config.fd_step) {
            Ok(fj) if fj.cost.is_finite() => fj,
            Ok(_) | Err(Error::Rollout { .. }) if best.is_some() => {
                let (cost, last) = best.expect("checked");
                return Err(Error::Diverged {
                    iterations: iteration,
                    last_cost: cost,
                    last_finite: unflatten(&last, m),
                });
            }
            Ok(_) => return Err(Error::Numerical("initial cost is not finite".into())),
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|(c, _)| fj.cost < *c) {
            best = Some((fj.cost, u.clone()));
        }
        let jt = fj.jacobian.transpose();
        let g = &jt * &fj.residual * 2.0;
        let gnorm = g.norm();
        history.push(IterationRecord {
            stage: 0,
            iteration,
            cost: fj.cost,
            grad_norm: gnorm,
            rollouts: eval.rollouts(),
        });
        debug!("iter {iteration}: cost {:.6e} |grad| {gnorm:.3e} damping {damping:.1e}", fj.cost);
        if gnorm < config.tolerance {
            stop = StopReason::Converged;
            break;
        }
        if iteration >= config.max_iterations {
            stop = StopReason::MaxIterations;
            break;
        }

        // Column-equilibrated SVD instead of normal equations: the columns of
        // the Jacobian span many orders of magnitude on unstable plants.
        let scale = Vector::from_iterator(
            fj.jacobian.ncols(),
            fj.jacobian.column_iter().map(|c| c.norm().max(f64::MIN_POSITIVE)),
        );
        let mut scaled = fj.jacobian.clone();
        for (mut col, s) in scaled.column_iter_mut().zip(scale.iter()) {
            col /= *s;
        }
        let svd = scaled.svd(true, true);
        let (left, right) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
        let utr = left.transpose() * &fj.residual;
        let mut accepted = None;
        for _ in 0..MAX_DAMPING_TRIES {
            let coeff = Vector::from_iterator(
                utr.len(),
                svd.singular_values
                    .iter()
                    .zip(utr.iter())
                    .map(|(s, c)| -s * c / (s * s + damping)),
            );
            let d = (right.transpose() * coeff).component_div(&scale);
            let trial = &u + &d;
            if let Ok(j) = eval.cost(&unflatten(&trial, m)) {
                if j.is_finite() && j < fj.cost && j <= fj.cost + ARMIJO * g.dot(&d) {
                    accepted = Some(trial);
                    break;
                }
            }
            damping *= 4.0;
        }
        match accepted {
            Some(trial) => {
                damping = (damping / 3.0).max(1e-12);
                u = trial;
            }
            None => {
                stop = StopReason::Stalled;
                break;
            }
        }
        iteration += 1;
    }

    let (cost, best_u) = best.expect("at least one Jacobian evaluation");
    let controls = unflatten(&best_u, m);
    let nominal = eval.trajectory(&controls)?;
    Ok(OptimizeResult {
        nominal,
        cost,
        iterations: iteration,
        history,
        stop,
        rollouts: eval.rollouts(),
    })
}
