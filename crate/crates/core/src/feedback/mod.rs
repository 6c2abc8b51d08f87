//! Feedback design around a nominal trajectory.
//!
//! The shipped path is [`build_policy`]: time-varying LQR and a Kalman filter
//! on the identified reduced-order model. The costate and second-order
//! Riccati recursions ([`costate_recursion`], [`riccati_theorem1`]) need model
//! Jacobians and Hessians and serve to check the decoupling result: at an
//! optimal nominal the costate term drops out of the gain, and with the
//! Hessian term removed the recursion reduces to plain LQR.

use rayon::prelude::*;

use crate::dynamics::{SimModel, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{min_eigenvalue, rms, symmetrize, Matrix, Vector};
use crate::openloop::CostSpec;
use crate::sysid::LtvRom;

/// Largest tolerated negative eigenvalue of a value matrix, relative to its
/// scale.
const PSD_FLOOR: f64 = 1e-10;

/// Costates `G_k` (row vectors) for `k = 0..=N`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateSequence {
    pub g: Vec<Matrix>,
}

/// Backward recursion `G_k = L_k + G_{k+1} A_k` from `G_N`.
pub fn costate_recursion(l: &[Matrix], a: &[Matrix], g_terminal: &Matrix) -> Result<CostateSequence> {
    if l.len() != a.len() {
        return Err(Error::Dimension(format!(
            "{} cost gradients for {} transition matrices",
            l.len(),
            a.len()
        )));
    }
    let n_x = g_terminal.ncols();
    if g_terminal.nrows() != 1 {
        return Err(Error::Dimension("terminal costate must be a row vector".into()));
    }
    let mut g = vec![Matrix::zeros(1, n_x); l.len() + 1];
    g[l.len()] = g_terminal.clone();
    for k in (0..l.len()).rev() {
        if l[k].shape() != (1, n_x) || a[k].shape() != (n_x, n_x) {
            return Err(Error::Dimension(format!(
                "step {k}: L is {:?}, A is {:?}, expected (1, {n_x}) and ({n_x}, {n_x})",
                l[k].shape(),
                a[k].shape()
            )));
        }
        g[k] = &l[k] + &g[k + 1] * &a[k];
    }
    Ok(CostateSequence { g })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stationarity {
    /// `|R u_k + (G_{k+1} B_k)'|` per step.
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// `max_k |R u_k|`, the natural scale of the residual.
    pub control_scale: f64,
    pub costate: CostateSequence,
}

/// First-order optimality residual of `nominal` for `cost`, given the
/// transition Jacobians `(A_k, B_k)` along it.
pub fn check_stationarity(nominal: &Trajectory, cost: &CostSpec, jacobians: &[(Matrix, Matrix)]) -> Result<Stationarity> {
    let n = nominal.horizon();
    if jacobians.len() != n {
        return Err(Error::Dimension(format!("{} Jacobians for horizon {n}", jacobians.len())));
    }
    let l: Vec<Matrix> = nominal.states[..n]
        .iter()
        .map(|x| cost.stage_state_gradient(x))
        .collect();
    let a: Vec<Matrix> = jacobians.iter().map(|(a, _)| a.clone()).collect();
    let costate = costate_recursion(&l, &a, &cost.terminal_gradient(nominal.terminal()))?;
    let mut residuals = Vec::with_capacity(n);
    let mut control_scale: f64 = 0.0;
    for (k, (_, b)) in jacobians.iter().enumerate() {
        let ru = &cost.r * &nominal.controls[k];
        control_scale = control_scale.max(ru.norm());
        residuals.push((ru + (&costate.g[k + 1] * b).transpose()).norm());
    }
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(Stationarity {
        residuals,
        max_residual,
        control_scale,
        costate,
    })
}

/// Which gain the second-order recursion uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GainForm {
    /// `K = -S^{-1} B'PA`, the minimizer of the quadratic Q-function.
    #[default]
    Derived,
    /// `K = -S^{-1} (2 B'PA)`.
    Verbatim,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    /// `P_k`, `k = 0..=N`.
    pub p: Vec<Matrix>,
    /// `K_k` with `du = K_k dx`, `k = 0..N`.
    pub k: Vec<Matrix>,
    /// `S_k = R_k / 2 + B_k' P_{k+1} B_k`.
    pub s: Vec<Matrix>,
}

/// Second-order terms for [`riccati_theorem1`]: the costates and the
/// Hessians `d^2 F_i / dx^2` of each state component of the transition.
pub struct SecondOrder<'a> {
    pub costate: &'a CostateSequence,
    pub hessians: &'a [Vec<Matrix>],
}

/// `sum_i G_i H_i`.
pub fn contract_hessians(g: &Matrix, hessians: &[Matrix]) -> Matrix {
    let n = hessians.first().map_or(0, |h| h.nrows());
    hessians
        .iter()
        .zip(g.iter())
        .fold(Matrix::zeros(n, n), |acc, (h, gi)| acc + h * *gi)
}

/// Backward recursion of the value Hessian for the cost expansion
/// `dx' L_xx dx + 1/2 du' R du` (value `dx' P dx`), with gain from `form`.
/// `P_k` is the Q-function evaluated at `du = K_k dx`:
/// `L_xx + 1/2 K'RK + A'PA + K'B'PBK + K'B'PA + A'PBK + G_{k+1} R~_k`.
pub fn riccati_theorem1(
    a: &[Matrix],
    b: &[Matrix],
    l_xx: &[Matrix],
    r: &[Matrix],
    second_order: Option<SecondOrder<'_>>,
    p_terminal: &Matrix,
    form: GainForm,
) -> Result<RiccatiSolution> {
    let n = a.len();
    if b.len() != n || l_xx.len() != n || r.len() != n {
        return Err(Error::Dimension("Riccati sequences must share the horizon".into()));
    }
    if let Some(so) = &second_order {
        if so.costate.g.len() != n + 1 || so.hessians.len() != n {
            return Err(Error::Dimension("second-order terms must cover the horizon".into()));
        }
    }
    let mut p = vec![Matrix::zeros(0, 0); n + 1];
    let mut gains = vec![Matrix::zeros(0, 0); n];
    let mut s_seq = vec![Matrix::zeros(0, 0); n];
    p[n] = symmetrize(p_terminal);
    for k in (0..n).rev() {
        let pn = &p[k + 1];
        let bp = b[k].transpose() * pn;
        let s = symmetrize(&(&r[k] * 0.5 + &bp * &b[k]));
        let chol = s.clone().cholesky().ok_or_else(|| Error::Design {
            k,
            reason: "S_k is not positive definite".into(),
        })?;
        let bpa = &bp * &a[k];
        let mut gain = -chol.solve(&bpa);
        if form == GainForm::Verbatim {
            gain *= 2.0;
        }
        let apa = a[k].transpose() * pn * &a[k];
        let cross = gain.transpose() * &bpa;
        let mut pk = &l_xx[k]
            + (gain.transpose() * &r[k] * &gain) * 0.5
            + apa
            + gain.transpose() * &bp * &b[k] * &gain
            + &cross
            + cross.transpose();
        if let Some(so) = &second_order {
            pk += contract_hessians(&so.costate.g[k + 1], &so.hessians[k]);
        }
        p[k] = symmetrize(&pk);
        gains[k] = gain;
        s_seq[k] = s;
    }
    Ok(RiccatiSolution {
        p,
        k: gains,
        s: s_seq,
    })
}

/// Central second differences of every state component of the transition
/// with respect to the state, along the nominal.
pub fn transition_hessians<M: SimModel + ?Sized>(model: &M, nominal: &Trajectory, h: f64) -> Result<Vec<Vec<Matrix>>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let n_x = model.state_dim();
    (0..nominal.horizon())
        .into_par_iter()
        .map(|k| {
            let x = &nominal.states[k];
            let u = &nominal.controls[k];
            let eval = |da: usize, sa: f64, db: usize, sb: f64| {
                let mut xp = x.clone();
                xp[da] += sa * h;
                xp[db] += sb * h;
                model.transition(k, &xp, u)
            };
            let mut out = vec![Matrix::zeros(n_x, n_x); n_x];
            for i in 0..n_x {
                for j in i..n_x {
                    let d = (eval(i, 1.0, j, 1.0)? - eval(i, 1.0, j, -1.0)? - eval(i, -1.0, j, 1.0)?
                        + eval(i, -1.0, j, -1.0)?)
                        / (4.0 * h * h);
                    for (c, hc) in out.iter_mut().enumerate() {
                        hc[(i, j)] = d[c];
                        hc[(j, i)] = d[c];
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

fn at(seq: &[Matrix], k: usize) -> &Matrix {
    &seq[k.min(seq.len() - 1)]
}

#[derive(Debug, Clone, PartialEq)]
pub struct LqrSolution {
    /// `L_k` with `du = -L_k dx`, `k = 0..N`.
    pub gains: Vec<Matrix>,
    /// `P_k`, `k = 0..=N`.
    pub p: Vec<Matrix>,
}

/// Discrete time-varying LQR for `sum dx'Q dx + du'R du + dx_N' Q_N dx_N`.
/// `q` and `r` hold one matrix per step or a single matrix for all steps.
pub fn lqr_tv(a: &[Matrix], b: &[Matrix], q: &[Matrix], r: &[Matrix], q_terminal: &Matrix) -> Result<LqrSolution> {
    let n = a.len();
    if n == 0 || b.len() != n || q.is_empty() || r.is_empty() {
        return Err(Error::Dimension("LQR needs non-empty, aligned sequences".into()));
    }
    let mut p = vec![Matrix::zeros(0, 0); n + 1];
    let mut gains = vec![Matrix::zeros(0, 0); n];
    p[n] = symmetrize(q_terminal);
    for k in (0..n).rev() {
        let pn = &p[k + 1];
        let bp = b[k].transpose() * pn;
        let inner = symmetrize(&(at(r, k) + &bp * &b[k]));
        let chol = inner.cholesky().ok_or_else(|| Error::Design {
            k,
            reason: "R + B'PB is not positive definite".into(),
        })?;
        let gain = chol.solve(&(&bp * &a[k]));
        let pk = symmetrize(&(at(q, k) + a[k].transpose() * pn * (&a[k] - &b[k] * &gain)));
        let floor = min_eigenvalue(&pk);
        if floor < -PSD_FLOOR * pk.amax().max(1.0) {
            return Err(Error::Design {
                k,
                reason: format!("value matrix lost positive semi-definiteness (eigenvalue {floor:e})"),
            });
        }
        p[k] = pk;
        gains[k] = gain;
    }
    Ok(LqrSolution { gains, p })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanSolution {
    /// `K_k`, `k = 0..=N`; `K_0 = 0` because no measurement is processed
    /// at the initial step.
    pub gains: Vec<Matrix>,
    /// `P_{k|k-1}`, with `predicted[0] = P0`.
    pub predicted: Vec<Matrix>,
    /// `P_{k|k}`, with `filtered[0] = P0`.
    pub filtered: Vec<Matrix>,
}

/// Time-varying Kalman filter for `da_{k+1} = A_k da_k + B_k (du_k + w_k)`,
/// `dy_k = C_k da_k + v_k`, `w ~ N(0, W)`, `v ~ N(0, V)`. `a` and `b` hold
/// `N` steps, `c` holds `N + 1`. Covariance updates use the Joseph form.
pub fn kalman_gains(a: &[Matrix], b: &[Matrix], c: &[Matrix], w: &Matrix, v: &Matrix, p0: &Matrix) -> Result<KalmanSolution> {
    let n = a.len();
    if b.len() != n || c.len() != n + 1 {
        return Err(Error::Dimension(format!(
            "Kalman filter needs N A/B and N + 1 C matrices, got {}, {}, {}",
            a.len(),
            b.len(),
            c.len()
        )));
    }
    let n_r = p0.nrows();
    let n_y = c[0].nrows();
    let mut gains = vec![Matrix::zeros(n_r, n_y)];
    let mut predicted = vec![p0.clone()];
    let mut filtered = vec![p0.clone()];
    let identity = Matrix::identity(n_r, n_r);
    for k in 0..n {
        let pf = &filtered[k];
        let pp = symmetrize(&(&a[k] * pf * a[k].transpose() + &b[k] * w * b[k].transpose()));
        let ck = &c[k + 1];
        let innovation = symmetrize(&(ck * &pp * ck.transpose() + v));
        let chol = innovation.cholesky().ok_or_else(|| Error::Filter {
            k: k + 1,
            reason: "innovation covariance is singular".into(),
        })?;
        let gain = chol.solve(&(ck * &pp)).transpose();
        let ikc = &identity - &gain * ck;
        let pu = symmetrize(&(&ikc * &pp * ikc.transpose() + &gain * v * gain.transpose()));
        gains.push(gain);
        predicted.push(pp);
        filtered.push(pu);
    }
    Ok(KalmanSolution {
        gains,
        predicted,
        filtered,
    })
}

/// Weights and noise levels for the feedback design.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackConfig {
    /// State weight, mapped to the model as `C_k' Q C_k`.
    pub q: Matrix,
    pub r: Matrix,
    pub q_terminal: Matrix,
    /// Process noise standard deviation on the control channel, as a
    /// fraction of the nominal control RMS.
    pub design_nsr: f64,
    /// Measurement noise standard deviation.
    pub meas_std: f64,
    /// Initial estimate covariance scale.
    pub p0: f64,
}

impl FeedbackConfig {
    pub fn new(n_x: usize, n_u: usize) -> Self {
        Self {
            q: Matrix::identity(n_x, n_x),
            r: Matrix::identity(n_u, n_u),
            q_terminal: Matrix::identity(n_x, n_x),
            design_nsr: 0.1,
            meas_std: 1e-4,
            p0: 1e-2,
        }
    }
}

/// Nominal controls plus LQG feedback on the reduced-order model:
/// `u_k = u_bar_k - L_k da_hat_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackPolicy {
    pub nominal: Trajectory,
    pub rom: LtvRom,
    /// `L_k`, `k = 0..N`.
    pub lqr_gains: Vec<Matrix>,
    pub kalman: KalmanSolution,
}

impl FeedbackPolicy {
    pub fn horizon(&self) -> usize {
        self.nominal.horizon()
    }

    pub fn control(&self, k: usize, estimate: &Vector) -> Vector {
        &self.nominal.controls[k] - &self.lqr_gains[k] * estimate
    }
}

/// Model sequences over the full horizon with nearest-neighbour extension.
pub fn rom_sequences(rom: &LtvRom, horizon: usize) -> (Vec<Matrix>, Vec<Matrix>, Vec<Matrix>) {
    let a = (0..horizon).map(|k| rom.a(k).clone()).collect();
    let b = (0..horizon).map(|k| rom.b(k).clone()).collect();
    let c = (0..=horizon).map(|k| rom.c(k).clone()).collect();
    (a, b, c)
}

pub fn build_policy(nominal: &Trajectory, rom: &LtvRom, config: &FeedbackConfig) -> Result<FeedbackPolicy> {
    let n = nominal.horizon();
    let (n_x, n_u) = (nominal.state_dim(), nominal.control_dim());
    if rom.horizon != n || rom.output_dim != n_x || rom.input_dim != n_u {
        return Err(Error::Dimension(format!(
            "model (N={}, n_y={}, n_u={}) does not match nominal (N={n}, n_x={n_x}, n_u={n_u})",
            rom.horizon, rom.output_dim, rom.input_dim
        )));
    }
    if config.q.shape() != (n_x, n_x) || config.q_terminal.shape() != (n_x, n_x) || config.r.shape() != (n_u, n_u) {
        return Err(Error::Dimension("feedback weights do not match the nominal".into()));
    }
    if !(config.meas_std > 0.0 && config.p0 >= 0.0 && config.design_nsr >= 0.0) {
        return Err(Error::Config("need meas_std > 0, p0 >= 0 and design_nsr >= 0".into()));
    }
    let (a, b, c) = rom_sequences(rom, n);
    let q: Vec<Matrix> = c[..n].iter().map(|ck| ck.transpose() * &config.q * ck).collect();
    let q_terminal = c[n].transpose() * &config.q_terminal * &c[n];
    let lqr = lqr_tv(&a, &b, &q, std::slice::from_ref(&config.r), &q_terminal)?;

    let u_scale = rms(nominal.controls.iter().flat_map(|u| u.iter().copied()));
    let w = Matrix::identity(n_u, n_u) * (config.design_nsr * u_scale).powi(2);
    let v = Matrix::identity(n_x, n_x) * config.meas_std.powi(2);
    let p0 = Matrix::identity(rom.order, rom.order) * config.p0;
    let kalman = kalman_gains(&a, &b, &c, &w, &v, &p0)?;
    Ok(FeedbackPolicy {
        nominal: nominal.clone(),
        rom: rom.clone(),
        lqr_gains: lqr.gains,
        kalman,
    })
}

#[cfg(test)]
mod tests;
