//! Time-varying eigensystem realization of the perturbation dynamics.
//!
//! Random input perturbations around a nominal give input/output deviation
//! data. Least squares over all experiments recovers the generalized Markov
//! parameters `h_{k,j}` (response at step `k` to an input at step `j`), whose
//! shifted Hankel matrices are factored step by step into a reduced-order
//! LTV model `da_{k+1} = A_k da_k + B_k du_k`, `dy_k = C_k da_k`.

use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynamics::{SimModel, Trajectory};
use crate::error::{Error, Result};
use crate::numerics::{pinv, rms, svd, Matrix, Vector, DEFAULT_PINV_TOL};

/// Singular values at or below this fraction of the largest are treated as
/// exact zeros when factoring a Hankel matrix.
pub const RANK_TOL: f64 = 1e-10;

/// Fraction of squared singular-value mass kept by automatic order selection.
pub const AUTO_ORDER_ENERGY: f64 = 0.9999;

/// Generalized Markov parameters `h_{k,j}` for `0 <= j < k <= N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovParamSet {
    horizon: usize,
    n_y: usize,
    n_u: usize,
    /// `blocks[k][j]`, so `blocks[k]` has length `k`.
    blocks: Vec<Vec<Matrix>>,
    /// Norm of the estimated coefficient of `du_k` in `dy_k`, zero by
    /// causality. Empty when the set was not estimated from data.
    pub causal_residual: Vec<f64>,
}

impl MarkovParamSet {
    pub fn from_fn(
        horizon: usize,
        n_y: usize,
        n_u: usize,
        mut f: impl FnMut(usize, usize) -> Matrix,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(horizon + 1);
        for k in 0..=horizon {
            let mut row = Vec::with_capacity(k);
            for j in 0..k {
                let h = f(k, j);
                if h.shape() != (n_y, n_u) {
                    return Err(Error::Dimension(format!(
                        "h[{k}][{j}] is {:?}, expected ({n_y}, {n_u})",
                        h.shape()
                    )));
                }
                row.push(h);
            }
            blocks.push(row);
        }
        Ok(Self {
            horizon,
            n_y,
            n_u,
            blocks,
            causal_residual: Vec::new(),
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn output_dim(&self) -> usize {
        self.n_y
    }

    pub fn input_dim(&self) -> usize {
        self.n_u
    }

    /// `h_{k,j}`; `None` outside `0 <= j < k <= N`.
    pub fn get(&self, k: usize, j: i64) -> Option<&Matrix> {
        if j < 0 || k > self.horizon {
            return None;
        }
        self.blocks[k].get(j as usize)
    }

    pub fn max_norm(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .map(|h| h.norm())
            .fold(0.0, f64::max)
    }

    /// Largest Frobenius-norm difference over all shared entries.
    pub fn max_difference(&self, other: &MarkovParamSet) -> f64 {
        let n = self.horizon.min(other.horizon);
        (0..=n)
            .flat_map(|k| (0..k).map(move |j| (k, j)))
            .map(|(k, j)| (&self.blocks[k][j] - &other.blocks[k][j]).norm())
            .fold(0.0, f64::max)
    }
}

/// Input and output deviations of `M` perturbed rollouts about a nominal.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutDataset {
    /// `inputs[k]` is `n_u x M`, column `i` is `du_{k,(i)}`, for `k < N`.
    pub inputs: Vec<Matrix>,
    /// `outputs[k]` is `n_y x M` for `k <= N`; `outputs[0]` is zero.
    pub outputs: Vec<Matrix>,
    pub sigma_pert: f64,
}

impl RolloutDataset {
    pub fn new(inputs: Vec<Matrix>, outputs: Vec<Matrix>, sigma_pert: f64) -> Result<Self> {
        let n = inputs.len();
        if n == 0 || outputs.len() != n + 1 {
            return Err(Error::Dimension(format!(
                "dataset needs N >= 1 input and N + 1 output blocks, got {} and {}",
                n,
                outputs.len()
            )));
        }
        let m = inputs[0].ncols();
        let (n_u, n_y) = (inputs[0].nrows(), outputs[0].nrows());
        if inputs.iter().any(|u| u.shape() != (n_u, m)) || outputs.iter().any(|y| y.shape() != (n_y, m)) {
            return Err(Error::Dimension("dataset blocks have inconsistent shapes".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            sigma_pert,
        })
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }

    pub fn experiments(&self) -> usize {
        self.inputs[0].ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.outputs[0].nrows()
    }
}

/// `0.01 * RMS(u)`, floored at `1e-3`.
pub fn default_sigma_pert(controls: &[Vector]) -> f64 {
    (0.01 * rms(controls.iter().flat_map(|u| u.iter().copied()))).max(1e-3)
}

/// `N * n_u + 50`.
pub fn default_experiments(horizon: usize, n_u: usize) -> usize {
    horizon * n_u + 50
}

/// Hankel block sizes `p = max(ceil(2 n_x / n_y), 2)` and
/// `q = max(ceil(2 n_x / n_u), 2)`.
pub fn default_block_sizes(n_x: usize, n_y: usize, n_u: usize) -> (usize, usize) {
    ((2 * n_x).div_ceil(n_y).max(2), (2 * n_x).div_ceil(n_u).max(2))
}

/// Runs `experiments` noise-free rollouts with i.i.d. `N(0, sigma_pert^2)`
/// input deviations and records full-state deviations from the nominal
/// states. Experiment `i` draws from its own stream of the seeded generator,
/// so the dataset does not depend on thread scheduling.
pub fn collect_rollouts<M: SimModel + ?Sized>(
    model: &M,
    nominal: &Trajectory,
    experiments: usize,
    sigma_pert: f64,
    seed: u64,
) -> Result<RolloutDataset> {
    if !(sigma_pert > 0.0 && sigma_pert.is_finite()) {
        return Err(Error::Config(format!("sigma_pert must be > 0, got {sigma_pert}")));
    }
    let n = nominal.horizon();
    let n_u = model.control_dim();
    let n_x = model.state_dim();
    if nominal.control_dim() != n_u || nominal.state_dim() != n_x {
        return Err(Error::Dimension("nominal does not match model dimensions".into()));
    }
    if experiments < n * n_u {
        return Err(Error::Config(format!(
            "need at least N * n_u = {} experiments, got {experiments}",
            n * n_u
        )));
    }

    let runs: Vec<(Vec<Vector>, Vec<Vector>)> = (0..experiments)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let du: Vec<Vector> = (0..n)
                .map(|_| Vector::from_fn(n_u, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    sigma_pert * z
                }))
                .collect();
            let mut dy = Vec::with_capacity(n + 1);
            let mut x = nominal.states[0].clone();
            dy.push(Vector::zeros(n_x));
            for k in 0..n {
                x = model
                    .transition(k, &x, &(&nominal.controls[k] + &du[k]))
                    .map_err(|e| Error::Rollout { step: k, source: Box::new(e) })?;
                dy.push(&x - &nominal.states[k + 1]);
            }
            Ok((du, dy))
        })
        .collect::<Result<_>>()?;

    let inputs = (0..n)
        .map(|k| Matrix::from_fn(n_u, experiments, |r, i| runs[i].0[k][r]))
        .collect();
    let outputs = (0..=n)
        .map(|k| Matrix::from_fn(n_x, experiments, |r, i| runs[i].1[k][r]))
        .collect();
    RolloutDataset::new(inputs, outputs, sigma_pert)
}

/// Least-squares Markov parameters. For each output step `k` the regression
/// `dY_k = [h_{k,0} ... h_{k,k-1}, h_{k,k}] [dU_0; ...; dU_k]` shares the
/// leading rows of one input stack, so a single QR factorization of the full
/// stack serves every `k`. The estimate of `h_{k,k}` is kept only as the
/// causality residual.
pub fn estimate_markov(data: &RolloutDataset) -> Result<MarkovParamSet> {
    let n = data.horizon();
    let (n_u, n_y, m) = (data.input_dim(), data.output_dim(), data.experiments());
    let cols = n * n_u;
    if m < cols {
        return Err(Error::Config(format!(
            "{m} experiments cannot determine {cols} input coefficients"
        )));
    }

    // Z' is M x (N n_u) with the inputs in time order.
    let mut zt = Matrix::zeros(m, cols);
    for (k, u) in data.inputs.iter().enumerate() {
        zt.view_mut((0, k * n_u), (m, n_u)).copy_from(&u.transpose());
    }
    let qr = zt.qr();
    let r = qr.r();
    let q = qr.q();

    let rmax = r.diagonal().amax();
    if let Some(i) = (0..cols).find(|&i| r[(i, i)].abs() <= DEFAULT_PINV_TOL * rmax) {
        return Err(Error::Identification {
            k: i / n_u,
            reason: "input stack is rank deficient; increase experiments or sigma_pert".into(),
        });
    }

    let mut yt = Matrix::zeros(m, n * n_y);
    for k in 1..=n {
        yt.view_mut((0, (k - 1) * n_y), (m, n_y))
            .copy_from(&data.outputs[k].transpose());
    }
    let qty = q.transpose() * yt;

    let solved: Vec<Matrix> = (1..=n)
        .into_par_iter()
        .map(|k| {
            let rk = (k + 1).min(n) * n_u;
            let rhs = qty.view((0, (k - 1) * n_y), (rk, n_y)).into_owned();
            r.view((0, 0), (rk, rk))
                .into_owned()
                .solve_upper_triangular(&rhs)
                .ok_or_else(|| Error::Identification {
                    k,
                    reason: "singular triangular factor".into(),
                })
        })
        .collect::<Result<_>>()?;

    let mut blocks = vec![Vec::new()];
    let mut causal_residual = vec![0.0];
    for (idx, theta) in solved.iter().enumerate() {
        let k = idx + 1;
        blocks.push(
            (0..k)
                .map(|j| theta.view((j * n_u, 0), (n_u, n_y)).transpose())
                .collect(),
        );
        causal_residual.push(if k < n {
            theta.view((k * n_u, 0), (n_u, n_y)).norm()
        } else {
            0.0
        });
    }
    Ok(MarkovParamSet {
        horizon: n,
        n_y,
        n_u,
        blocks,
        causal_residual,
    })
}

/// Generalized Hankel matrix at step `k`: block `(i, l)` is
/// `h_{k+i, k-1-l}`, zero when `k - 1 - l < 0`.
pub fn build_hankel(h: &MarkovParamSet, k: usize, p: usize, q: usize) -> Result<Matrix> {
    if k == 0 || p == 0 || q == 0 {
        return Err(Error::Window(format!("need k, p, q >= 1, got k={k}, p={p}, q={q}")));
    }
    if k + p - 1 > h.horizon {
        return Err(Error::Window(format!(
            "k + p - 1 = {} exceeds horizon {}",
            k + p - 1,
            h.horizon
        )));
    }
    let (n_y, n_u) = (h.n_y, h.n_u);
    let mut out = Matrix::zeros(p * n_y, q * n_u);
    for i in 0..p {
        for l in 0..q {
            if let Some(block) = h.get(k + i, k as i64 - 1 - l as i64) {
                out.view_mut((i * n_y, l * n_u), (n_y, n_u)).copy_from(block);
            }
        }
    }
    Ok(out)
}

/// Balanced rank-`n_r` factors `H = O R` with `O = U S^1/2`, `R = S^1/2 V'`.
#[derive(Debug, Clone)]
struct HankelFactor {
    obs: Matrix,
    ctrb: Matrix,
    deficient: bool,
}

fn factor_hankel(h: &Matrix, n_r: usize) -> Result<(HankelFactor, Vec<f64>)> {
    let f = svd(h)?;
    let rank = f.rank(RANK_TOL);
    if rank == 0 {
        return Err(Error::Numerical("Hankel matrix has rank 0".into()));
    }
    let mut obs = Matrix::zeros(h.nrows(), n_r);
    let mut ctrb = Matrix::zeros(n_r, h.ncols());
    for j in 0..n_r.min(rank) {
        let s = f.singular_values[j].sqrt();
        obs.set_column(j, &(f.left.column(j) * s));
        ctrb.set_row(j, &(f.right.column(j).transpose() * s));
    }
    Ok((
        HankelFactor {
            obs,
            ctrb,
            deficient: rank < n_r,
        },
        f.singular_values,
    ))
}

/// One step of time-varying ERA.
#[derive(Debug, Clone)]
pub struct EraStep {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Matrix,
    /// Full singular spectrum of `H_k`.
    pub singular_values: Vec<f64>,
    /// Set when `H_k` or `H_{k+1}` has fewer than `n_r` singular values
    /// above tolerance.
    pub warning: Option<String>,
}

fn era_from_factors(fk: &HankelFactor, fk1: &HankelFactor, n_y: usize, n_u: usize) -> Result<(Matrix, Matrix, Matrix)> {
    let rows = fk.obs.nrows() - n_y;
    let shifted_down = fk1.obs.rows(0, rows).into_owned();
    let shifted_up = fk.obs.rows(n_y, rows).into_owned();
    let a = pinv(&shifted_down, DEFAULT_PINV_TOL)? * shifted_up;
    let b = fk1.ctrb.columns(0, n_u).into_owned();
    let c = fk.obs.rows(0, n_y).into_owned();
    Ok((a, b, c))
}

/// Realizes `(A_k, B_k, C_k)` from consecutive Hankel matrices. `H_k` gives
/// `O_k` (hence `C_k`), `H_{k+1}` gives `O_{k+1}` and `R_k` (hence `B_k`),
/// and `A_k` maps the shifted observability blocks onto each other.
pub fn era_step(hk: &Matrix, hk1: &Matrix, n_r: usize, n_y: usize, n_u: usize) -> Result<EraStep> {
    if hk.shape() != hk1.shape() {
        return Err(Error::Dimension(format!(
            "Hankel pair shapes differ: {:?} vs {:?}",
            hk.shape(),
            hk1.shape()
        )));
    }
    if n_y == 0 || n_u == 0 || !hk.nrows().is_multiple_of(n_y) || !hk.ncols().is_multiple_of(n_u) {
        return Err(Error::Dimension(format!(
            "Hankel shape {:?} is not a block matrix of {n_y} x {n_u} blocks",
            hk.shape()
        )));
    }
    check_order(n_r, hk.nrows() / n_y, hk.ncols() / n_u, n_y, n_u)?;
    let (fk, spectrum) = factor_hankel(hk, n_r)?;
    let (fk1, _) = factor_hankel(hk1, n_r)?;
    let warning = (fk.deficient || fk1.deficient).then(|| {
        format!(
            "fewer than {n_r} singular values above tolerance; spectrum {:?}",
            spectrum
        )
    });
    let (a, b, c) = era_from_factors(&fk, &fk1, n_y, n_u)?;
    Ok(EraStep {
        a,
        b,
        c,
        singular_values: spectrum,
        warning,
    })
}

fn check_order(n_r: usize, p: usize, q: usize, n_y: usize, n_u: usize) -> Result<()> {
    let max = ((p - 1) * n_y).min(q * n_u);
    if n_r == 0 || n_r > max {
        return Err(Error::Config(format!(
            "model order {n_r} must be in 1..={max} for p={p}, q={q}"
        )));
    }
    Ok(())
}

/// Model order selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelOrder {
    Fixed(usize),
    /// Smallest order holding [`AUTO_ORDER_ENERGY`] of the squared singular
    /// values of the first Hankel matrix with no zero-padded columns.
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SysidConfig {
    pub experiments: usize,
    pub sigma_pert: f64,
    pub p: usize,
    pub q: usize,
    pub order: ModelOrder,
}

impl SysidConfig {
    /// Defaults for identifying full-state deviations around `nominal`.
    pub fn defaults_for(nominal: &Trajectory) -> Self {
        let (n_x, n_u) = (nominal.state_dim(), nominal.control_dim());
        let (p, q) = default_block_sizes(n_x, n_x, n_u);
        Self {
            experiments: default_experiments(nominal.horizon(), n_u),
            sigma_pert: default_sigma_pert(&nominal.controls),
            p,
            q,
            order: ModelOrder::Auto,
        }
    }
}

/// Identified reduced-order LTV model over the window `[k_lo, k_hi]`.
///
/// `A_k` is identified for `k in [k_lo, k_hi]`, `B_k` for `k in [0, k_hi]`
/// and `C_k` for `k in [k_lo, k_hi + 1]`; the accessors extend each sequence
/// by its nearest identified neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvRom {
    pub order: usize,
    pub output_dim: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub k_lo: usize,
    pub k_hi: usize,
    pub a: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub c: Vec<Matrix>,
    /// Spectrum of `H_k` for `k in [k_lo, k_hi + 1]`.
    pub singular_values: Vec<Vec<f64>>,
    /// Steps whose Hankel pair had fewer than `order` significant values.
    pub deficient_steps: Vec<usize>,
}

impl LtvRom {
    pub fn a(&self, k: usize) -> &Matrix {
        &self.a[k.clamp(self.k_lo, self.k_hi) - self.k_lo]
    }

    pub fn b(&self, k: usize) -> &Matrix {
        &self.b[k.min(self.k_hi)]
    }

    pub fn c(&self, k: usize) -> &Matrix {
        &self.c[k.clamp(self.k_lo, self.k_hi + 1) - self.k_lo]
    }

    /// `C_k A_{k-1} ... A_{j+1} B_j` for `j < k`.
    pub fn markov(&self, k: usize, j: usize) -> Matrix {
        assert!(j < k, "markov({k}, {j}) needs j < k");
        let mut m = self.b(j).clone();
        for i in j + 1..k {
            m = self.a(i) * m;
        }
        self.c(k) * m
    }

    /// Markov parameters of the model for all `0 <= j < k <= horizon`.
    pub fn markov_set(&self, horizon: usize) -> MarkovParamSet {
        MarkovParamSet::from_fn(horizon, self.output_dim, self.input_dim, |k, j| self.markov(k, j))
            .expect("model matrices have consistent shapes")
    }

    /// Output deviations `dy_0..dy_n` for inputs `du_0..du_{n-1}` from a zero
    /// initial deviation.
    pub fn predict(&self, inputs: &[Vector]) -> Vec<Vector> {
        let mut a = Vector::zeros(self.order);
        let mut out = Vec::with_capacity(inputs.len() + 1);
        out.push(Vector::zeros(self.output_dim));
        for (k, du) in inputs.iter().enumerate() {
            a = self.a(k) * &a + self.b(k) * du;
            out.push(self.c(k + 1) * &a);
        }
        out
    }

    /// Retained singular values of `H_k`.
    pub fn retained(&self, k: usize) -> &[f64] {
        let s = &self.singular_values[k.clamp(self.k_lo, self.k_hi + 1) - self.k_lo];
        &s[..self.order.min(s.len())]
    }
}

/// Estimates Markov parameters from `data` and realizes them.
pub fn identify_ltv(data: &RolloutDataset, p: usize, q: usize, order: ModelOrder) -> Result<LtvRom> {
    let markov = estimate_markov(data)?;
    debug!(
        "markov estimate: max |h| {:.3e}, max causal residual {:.3e}",
        markov.max_norm(),
        markov.causal_residual.iter().copied().fold(0.0, f64::max)
    );
    realize(&markov, p, q, order)
}

/// Time-varying ERA over the window `k in [1, N - p]`.
pub fn realize(markov: &MarkovParamSet, p: usize, q: usize, order: ModelOrder) -> Result<LtvRom> {
    let n = markov.horizon;
    let (n_y, n_u) = (markov.n_y, markov.n_u);
    if p < 2 || q < 1 {
        return Err(Error::Config(format!("need p >= 2 and q >= 1, got p={p}, q={q}")));
    }
    if n < p + 1 {
        return Err(Error::Window(format!(
            "identification window [1, N - p] is empty for N={n}, p={p}"
        )));
    }
    let k_lo = 1;
    let k_hi = n - p;

    let spectra: Vec<(Matrix, Vec<f64>)> = (k_lo..=k_hi + 1)
        .into_par_iter()
        .map(|k| {
            let h = build_hankel(markov, k, p, q)?;
            let s = svd(&h).map_err(|e| e.context(format!("Hankel at k={k}")))?;
            Ok((h, s.singular_values))
        })
        .collect::<Result<_>>()?;

    let n_r = match order {
        ModelOrder::Fixed(n_r) => n_r,
        ModelOrder::Auto => {
            let reference = q.min(k_hi + 1);
            let s = &spectra[reference - k_lo].1;
            let max = ((p - 1) * n_y).min(q * n_u);
            energy_order(s).min(max)
        }
    };
    check_order(n_r, p, q, n_y, n_u)?;
    debug!("ERA order {n_r} over window [{k_lo}, {k_hi}]");

    let factors: Vec<HankelFactor> = spectra
        .par_iter()
        .enumerate()
        .map(|(i, (h, _))| {
            factor_hankel(h, n_r)
                .map(|(f, _)| f)
                .map_err(|e| Error::Identification {
                    k: k_lo + i,
                    reason: e.to_string(),
                })
        })
        .collect::<Result<_>>()?;

    let steps: Vec<(Matrix, Matrix, Matrix)> = (k_lo..=k_hi)
        .into_par_iter()
        .map(|k| {
            era_from_factors(&factors[k - k_lo], &factors[k + 1 - k_lo], n_y, n_u).map_err(|e| {
                Error::Identification {
                    k,
                    reason: e.to_string(),
                }
            })
        })
        .collect::<Result<_>>()?;

    let deficient_steps: Vec<usize> = factors
        .iter()
        .enumerate()
        .filter(|(_, f)| f.deficient)
        .map(|(i, _)| k_lo + i)
        .collect();
    if deficient_steps.iter().any(|&k| k >= q) {
        warn!(
            "Hankel rank below order {n_r} at steps {:?}",
            deficient_steps.iter().filter(|&&k| k >= q).collect::<Vec<_>>()
        );
    }

    let mut a = Vec::with_capacity(steps.len());
    let mut b = vec![factors[0].ctrb.columns(0, n_u).into_owned()];
    let mut c = Vec::with_capacity(steps.len() + 1);
    for (ak, bk, ck) in steps {
        a.push(ak);
        b.push(bk);
        c.push(ck);
    }
    c.push(factors[k_hi + 1 - k_lo].obs.rows(0, n_y).into_owned());

    let rom = LtvRom {
        order: n_r,
        output_dim: n_y,
        input_dim: n_u,
        horizon: n,
        k_lo,
        k_hi,
        a,
        b,
        c,
        singular_values: spectra.into_iter().map(|(_, s)| s).collect(),
        deficient_steps,
    };
    if rom.a.iter().chain(&rom.b).chain(&rom.c).any(|m| !m.iter().all(|v| v.is_finite())) {
        return Err(Error::Numerical("identified model has non-finite entries".into()));
    }
    Ok(rom)
}

/// Smallest `r` with `sum_{i<r} s_i^2 >= AUTO_ORDER_ENERGY * sum s_i^2`.
pub fn energy_order(singular_values: &[f64]) -> usize {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return 0;
    }
    let mut acc = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        acc += s * s;
        if acc >= AUTO_ORDER_ENERGY * total {
            return i + 1;
        }
    }
    singular_values.len()
}

/// Central-difference Jacobians `(A_k, B_k)` of the noise-free transition
/// along the nominal, `k = 0..N-1`.
pub fn linearize_fd<M: SimModel + ?Sized>(
    model: &M,
    nominal: &Trajectory,
    h: f64,
) -> Result<Vec<(Matrix, Matrix)>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let (n_x, n_u) = (model.state_dim(), model.control_dim());
    (0..nominal.horizon())
        .into_par_iter()
        .map(|k| {
            let x = &nominal.states[k];
            let u = &nominal.controls[k];
            let mut a = Matrix::zeros(n_x, n_x);
            let mut b = Matrix::zeros(n_x, n_u);
            for j in 0..n_x {
                let mut xp = x.clone();
                xp[j] += h;
                let mut xm = x.clone();
                xm[j] -= h;
                let d = (model.transition(k, &xp, u)? - model.transition(k, &xm, u)?) / (2.0 * h);
                a.set_column(j, &d);
            }
            for j in 0..n_u {
                let mut up = u.clone();
                up[j] += h;
                let mut um = u.clone();
                um[j] -= h;
                let d = (model.transition(k, x, &up)? - model.transition(k, x, &um)?) / (2.0 * h);
                b.set_column(j, &d);
            }
            Ok((a, b))
        })
        .collect::<Result<_>>()
}

#[cfg(test)]
mod tests;
