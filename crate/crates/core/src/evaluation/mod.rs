//! Closed-loop execution and Monte Carlo statistics.
//!
//! Process noise enters through the control channel: the plant receives
//! `u_k + std * z_k`, `z_k ~ N(0, I)`, while the cost is charged on the
//! commanded `u_k`. Every run draws from its own ChaCha stream selected by
//! `(seed, stream)`, so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::dynamics::{SimModel, Trajectory};
use crate::error::{Error, Result};
use crate::feedback::FeedbackPolicy;
use crate::numerics::{rms, Matrix, Vector};
use crate::openloop::CostSpec;

/// Control-channel noise for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSetting {
    pub nsr: f64,
    /// Per-step standard deviation of each control noise component.
    pub std: f64,
    pub seed: u64,
    pub stream: u64,
}

impl NoiseSetting {
    /// Noise with an absolute standard deviation.
    pub fn absolute(std: f64, seed: u64) -> Self {
        Self {
            nsr: f64::NAN,
            std,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(self, stream: u64) -> Self {
        Self { stream, ..self }
    }

    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Noise standard deviation `nsr * RMS(u_bar)`.
pub fn nsr_to_noise(nsr: f64, controls: &[Vector], seed: u64) -> Result<NoiseSetting> {
    if !(nsr >= 0.0 && nsr.is_finite()) {
        return Err(Error::Config(format!("nsr must be finite and >= 0, got {nsr}")));
    }
    let scale = rms(controls.iter().flat_map(|u| u.iter().copied()));
    Ok(NoiseSetting {
        nsr,
        std: nsr * scale,
        seed,
        stream: 0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopRun {
    pub trajectory: Trajectory,
    pub cost: f64,
    /// `max_k |x_k - x_bar_k|` over `k = 0..=N`.
    pub max_deviation: f64,
    /// `|x_N - target|`.
    pub terminal_error: f64,
}

fn simulate<M: SimModel + ?Sized>(
    model: &M,
    nominal: &Trajectory,
    policy: Option<&FeedbackPolicy>,
    cost: &CostSpec,
    noise: &NoiseSetting,
) -> Result<ClosedLoopRun> {
    let n = nominal.horizon();
    let n_u = nominal.control_dim();
    if model.state_dim() != nominal.state_dim() || model.control_dim() != n_u {
        return Err(Error::Dimension(format!(
            "model dims ({}, {}) do not match nominal ({}, {n_u})",
            model.state_dim(),
            model.control_dim(),
            nominal.state_dim()
        )));
    }
    if !(noise.std >= 0.0) {
        return Err(Error::Config(format!("noise std must be >= 0, got {}", noise.std)));
    }
    let mut rng = noise.rng();
    let order = policy.map_or(0, |p| p.rom.order);
    let mut predicted = Vector::zeros(order);
    let mut x = nominal.states[0].clone();
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut max_deviation: f64 = 0.0;
    for k in 0..n {
        let dy = &x - &nominal.states[k];
        max_deviation = max_deviation.max(dy.norm());
        let u = match policy {
            Some(p) => {
                let estimate = if k == 0 {
                    predicted.clone()
                } else {
                    let innovation = &dy - p.rom.c(k) * &predicted;
                    &predicted + &p.kalman.gains[k] * innovation
                };
                let u = p.control(k, &estimate);
                predicted = p.rom.a(k) * &estimate + p.rom.b(k) * (&u - &nominal.controls[k]);
                u
            }
            None => nominal.controls[k].clone(),
        };
        let applied = if noise.std > 0.0 {
            let z = Vector::from_fn(n_u, |_, _| StandardNormal.sample(&mut rng));
            &u + z * noise.std
        } else {
            u.clone()
        };
        let next = model.transition(k, &x, &applied).map_err(|e| Error::Rollout {
            step: k,
            source: Box::new(e),
        })?;
        states.push(std::mem::replace(&mut x, next));
        controls.push(u);
    }
    max_deviation = max_deviation.max((&x - nominal.terminal()).norm());
    let terminal_error = (&x - &cost.target).norm();
    states.push(x);
    let trajectory = Trajectory::new(states, controls)?;
    let cost = cost.trajectory_cost(&trajectory);
    Ok(ClosedLoopRun {
        trajectory,
        cost,
        max_deviation,
        terminal_error,
    })
}

/// One run of `u_k = u_bar_k - L_k da_hat_k` with the Kalman estimate
/// updated from `dy_k = x_k - x_bar_k` for `k >= 1`.
pub fn run_closed_loop<M: SimModel + ?Sized>(
    model: &M,
    policy: &FeedbackPolicy,
    cost: &CostSpec,
    noise: &NoiseSetting,
) -> Result<ClosedLoopRun> {
    simulate(model, &policy.nominal, Some(policy), cost, noise)
}

/// One run of the nominal controls without feedback.
pub fn run_open_loop_only<M: SimModel + ?Sized>(
    model: &M,
    nominal: &Trajectory,
    cost: &CostSpec,
    noise: &NoiseSetting,
) -> Result<ClosedLoopRun> {
    simulate(model, nominal, None, cost, noise)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloConfig {
    pub n_runs: usize,
    pub seed: u64,
    /// Stream index of the first run; lets batches be split and pooled.
    pub first_run: u64,
    /// Terminal error below which a run counts as a success.
    pub success_threshold: f64,
    /// Run the nominal controls without feedback.
    pub open_loop: bool,
    pub keep_runs: bool,
}

impl MonteCarloConfig {
    pub fn new(n_runs: usize, seed: u64) -> Self {
        Self {
            n_runs,
            seed,
            first_run: 0,
            success_threshold: 0.1,
            open_loop: false,
            keep_runs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloPoint {
    pub nsr: f64,
    pub noise_std: f64,
    pub n_runs: usize,
    /// Costs of the runs that completed, in run order.
    pub costs: Vec<f64>,
    pub mean_cost: f64,
    /// Sample standard deviation of the completed runs.
    pub std_cost: f64,
    pub success_rate: f64,
    /// Runs whose simulation failed, by index.
    pub failures: Vec<u64>,
    pub runs: Option<Vec<ClosedLoopRun>>,
}

impl MonteCarloPoint {
    pub fn std_error(&self) -> f64 {
        if self.costs.is_empty() {
            f64::NAN
        } else {
            self.std_cost / (self.costs.len() as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloReport {
    pub points: Vec<MonteCarloPoint>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Independent runs per NSR value. Run `i` uses stream `first_run + i` at
/// every grid point, so neighbouring points share noise directions.
pub fn monte_carlo<M: SimModel + ?Sized>(
    model: &M,
    policy: &FeedbackPolicy,
    cost: &CostSpec,
    nsr_grid: &[f64],
    config: &MonteCarloConfig,
) -> Result<MonteCarloReport> {
    if config.n_runs == 0 {
        return Err(Error::Config("n_runs must be >= 1".into()));
    }
    let mut points = Vec::with_capacity(nsr_grid.len());
    for &nsr in nsr_grid {
        let base = nsr_to_noise(nsr, &policy.nominal.controls, config.seed)?;
        let results: Vec<Result<ClosedLoopRun>> = (0..config.n_runs as u64)
            .into_par_iter()
            .map(|i| {
                let noise = base.with_stream(config.first_run + i);
                if config.open_loop {
                    run_open_loop_only(model, &policy.nominal, cost, &noise)
                } else {
                    run_closed_loop(model, policy, cost, &noise)
                }
            })
            .collect();
        let mut costs = Vec::with_capacity(config.n_runs);
        let mut failures = Vec::new();
        let mut successes = 0usize;
        let mut runs = Vec::new();
        for (i, result) in results.into_iter().enumerate() {
            match result {
                Ok(run) => {
                    costs.push(run.cost);
                    if run.terminal_error < config.success_threshold {
                        successes += 1;
                    }
                    if config.keep_runs {
                        runs.push(run);
                    }
                }
                Err(e) => {
                    log::debug!("nsr {nsr}: run {} failed: {e}", config.first_run + i as u64);
                    failures.push(config.first_run + i as u64);
                }
            }
        }
        let (mean_cost, std_cost) = mean_std(&costs);
        points.push(MonteCarloPoint {
            nsr,
            noise_std: base.std,
            n_runs: config.n_runs,
            costs,
            mean_cost,
            std_cost,
            success_rate: successes as f64 / config.n_runs as f64,
            failures,
            runs: config.keep_runs.then_some(runs),
        });
    }
    Ok(MonteCarloReport { points })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailEstimate {
    pub eps: Vec<f64>,
    pub threshold: f64,
    pub n_runs: usize,
    pub exceedances: Vec<usize>,
    pub probabilities: Vec<f64>,
    /// Points with no exceedance; their probability is only bounded by
    /// `1 / n_runs` and they are left out of the fit.
    pub censored: Vec<bool>,
    /// `beta` in `log p = log alpha - beta / eps^2`.
    pub beta: f64,
    pub log_alpha: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y = a + b x`, returning `(a, b, R^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (intercept, slope, r2)
}

/// Empirical `P(max_k |dx_k| > threshold)` under absolute noise levels
/// `eps_grid`, with a fit of `log p` against `1 / eps^2`.
pub fn deviation_tail<M: SimModel + ?Sized>(
    model: &M,
    policy: &FeedbackPolicy,
    cost: &CostSpec,
    eps_grid: &[f64],
    threshold: f64,
    n_runs: usize,
    seed: u64,
) -> Result<TailEstimate> {
    if eps_grid.is_empty() || eps_grid[0] < 0.0 || eps_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("eps grid must be non-negative and strictly increasing".into()));
    }
    if n_runs == 0 || !(threshold > 0.0) {
        return Err(Error::Config("need n_runs >= 1 and a positive threshold".into()));
    }
    let mut exceedances = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let base = NoiseSetting::absolute(eps, seed);
        let count = (0..n_runs as u64)
            .into_par_iter()
            .map(|i| {
                // A run that blows up has certainly left the threshold.
                run_closed_loop(model, policy, cost, &base.with_stream(i))
                    .map_or(true, |run| run.max_deviation > threshold)
            })
            .filter(|&hit| hit)
            .count();
        exceedances.push(count);
    }
    let probabilities: Vec<f64> = exceedances.iter().map(|&c| c as f64 / n_runs as f64).collect();
    let censored: Vec<bool> = exceedances.iter().map(|&c| c == 0).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = eps_grid
        .iter()
        .zip(&probabilities)
        .filter(|(_, &p)| p > 0.0)
        .map(|(e, p)| (1.0 / (e * e), p.ln()))
        .unzip();
    let (log_alpha, beta, r_squared) = if x.len() >= 2 {
        let (a, b, r2) = linear_fit(&x, &y);
        (a, -b, r2)
    } else {
        (f64::NAN, f64::NAN, f64::NAN)
    };
    Ok(TailEstimate {
        eps: eps_grid.to_vec(),
        threshold,
        n_runs,
        exceedances,
        probabilities,
        censored,
        beta,
        log_alpha,
        r_squared,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingReport {
    pub nominal_costs: (f64, f64),
    pub eps: Vec<f64>,
    /// Fraction of paired runs with policy 1 cheaper than policy 2; ties
    /// count one half.
    pub preserved: Vec<f64>,
    pub n_runs: usize,
}

/// Paired closed-loop comparison of two policies under shared noise.
pub fn ranking_check<M: SimModel + ?Sized>(
    model: &M,
    cost: &CostSpec,
    policies: (&FeedbackPolicy, &FeedbackPolicy),
    eps_grid: &[f64],
    n_runs: usize,
    seed: u64,
) -> Result<RankingReport> {
    if n_runs == 0 {
        return Err(Error::Config("n_runs must be >= 1".into()));
    }
    let (p1, p2) = policies;
    let nominal_costs = (cost.trajectory_cost(&p1.nominal), cost.trajectory_cost(&p2.nominal));
    let mut preserved = Vec::with_capacity(eps_grid.len());
    for &eps in eps_grid {
        let base = NoiseSetting::absolute(eps, seed);
        let scores: Vec<f64> = (0..n_runs as u64)
            .into_par_iter()
            .map(|i| {
                let noise = base.with_stream(i);
                let c1 = run_closed_loop(model, p1, cost, &noise).map_or(f64::INFINITY, |r| r.cost);
                let c2 = run_closed_loop(model, p2, cost, &noise).map_or(f64::INFINITY, |r| r.cost);
                if c1 < c2 {
                    1.0
                } else if c1 == c2 {
                    0.5
                } else {
                    0.0
                }
            })
            .collect();
        preserved.push(scores.iter().sum::<f64>() / n_runs as f64);
    }
    Ok(RankingReport {
        nominal_costs,
        eps: eps_grid.to_vec(),
        preserved,
        n_runs,
    })
}

/// Policy that applies the nominal controls only, for open-loop baselines
/// that need a [`FeedbackPolicy`].
pub fn zero_gain(policy: &FeedbackPolicy) -> FeedbackPolicy {
    let mut out = policy.clone();
    for g in out.lqr_gains.iter_mut() {
        *g = Matrix::zeros(g.nrows(), g.ncols());
    }
    out
}
