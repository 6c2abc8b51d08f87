//! Pipeline configuration file.
//!
//! Every section is optional; omitted keys fall back to per-benchmark
//! defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use d2c::dynamics::{horizon_steps, Benchmark};
use d2c::feedback::FeedbackConfig;
use d2c::openloop::{CostSpec, DescentDirection, OptimizerConfig};
use d2c::sysid::ModelOrder;
use d2c::{Error, Matrix, Result, Vector};
use serde::Deserialize;
use sha2::{Digest, Sha256};

/// A diagonal weight given either as one value for every entry or per entry.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Weight {
    fn diagonal(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            Weight::Scalar(v) => Ok(vec![*v; n]),
            Weight::Diagonal(d) if d.len() == n => Ok(d.clone()),
            Weight::Diagonal(d) => Err(Error::Config(format!("{what} has {} entries, expected {n}", d.len()))),
        }
    }

    fn matrix(&self, n: usize, what: &str) -> Result<Matrix> {
        Ok(Matrix::from_diagonal(&Vector::from_vec(self.diagonal(n, what)?)))
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum OrderSpec {
    Fixed(usize),
    Named(String),
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub dt: Option<f64>,
    pub horizon_seconds: Option<f64>,
    pub x0: Option<Vec<f64>>,
    pub target: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    pub q: Option<Weight>,
    pub r: Option<Weight>,
    pub q_terminal: Option<Weight>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    /// `gradient`, `lbfgs` or `lm`.
    pub direction: Option<String>,
    pub lbfgs_memory: Option<usize>,
    pub step_size: Option<f64>,
    pub fd_step: Option<f64>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub backtracking: Option<bool>,
    pub terminal_continuation: Option<Vec<f64>>,
    /// Constant initial control.
    pub initial_control: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidSection {
    pub experiments: Option<usize>,
    pub sigma_pert: Option<f64>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub order: Option<OrderSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackSection {
    pub q: Option<Weight>,
    pub r: Option<Weight>,
    pub q_terminal: Option<Weight>,
    pub design_nsr: Option<f64>,
    pub meas_std: Option<f64>,
    pub p0: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub nsr: Option<Vec<f64>>,
    pub n_runs: Option<usize>,
    pub success_threshold: Option<f64>,
    pub open_loop_baseline: Option<bool>,
    pub tail_eps: Option<Vec<f64>>,
    pub tail_threshold: Option<f64>,
    pub tail_runs: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub benchmark: String,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub sysid: SysidSection,
    #[serde(default)]
    pub feedback: FeedbackSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

/// Sysid settings; unset values are derived from the nominal at run time.
#[derive(Debug, Clone, PartialEq)]
pub struct SysidSettings {
    pub experiments: Option<usize>,
    pub sigma_pert: Option<f64>,
    pub p: Option<usize>,
    pub q: Option<usize>,
    pub order: ModelOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationSettings {
    pub nsr: Vec<f64>,
    pub n_runs: usize,
    pub success_threshold: f64,
    pub open_loop_baseline: bool,
    pub tail: Option<TailSettings>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TailSettings {
    pub eps: Vec<f64>,
    pub threshold: f64,
    pub n_runs: usize,
}

/// Fully resolved and validated configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub benchmark: Benchmark,
    pub seed: u64,
    pub out: PathBuf,
    pub dt: f64,
    pub horizon: usize,
    pub x0: Vector,
    pub cost: CostSpec,
    pub optimizer: OptimizerConfig,
    pub initial_control: f64,
    pub sysid: SysidSettings,
    pub feedback: FeedbackConfig,
    pub evaluation: EvaluationSettings,
    /// SHA-256 of the config text and effective seed.
    pub config_hash: String,
}

impl Settings {
    pub fn initial_controls(&self) -> Vec<Vector> {
        vec![Vector::from_element(self.benchmark.control_dim(), self.initial_control); self.horizon]
    }

    pub fn sysid_seed(&self) -> u64 {
        self.seed
    }

    pub fn evaluation_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }
}

/// Tuned defaults per benchmark.
struct Defaults {
    dt: f64,
    q: Vec<f64>,
    r: f64,
    q_terminal: f64,
    optimizer: OptimizerConfig,
}

fn defaults(bench: Benchmark) -> Defaults {
    let n = bench.state_dim();
    let lm = |max_iterations, continuation: &[f64]| OptimizerConfig {
        fd_step: 1e-9,
        max_iterations,
        direction: DescentDirection::LevenbergMarquardt,
        terminal_continuation: continuation.to_vec(),
        ..OptimizerConfig::default()
    };
    match bench {
        Benchmark::CartPole => Defaults {
            dt: 0.05,
            q: vec![0.0; n],
            r: 0.1,
            q_terminal: 1e3,
            optimizer: lm(1500, &[]),
        },
        Benchmark::CartTwoPole => Defaults {
            dt: 0.05,
            q: vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
            r: 0.1,
            q_terminal: 1e4,
            optimizer: lm(800, &[1e-3, 1e-2, 1e-1]),
        },
        Benchmark::Acrobot => Defaults {
            dt: 0.05,
            q: vec![0.0; n],
            r: 0.1,
            q_terminal: 1e4,
            optimizer: lm(1000, &[1e-3, 1e-2, 1e-1]),
        },
        Benchmark::Scalar | Benchmark::DoubleIntegrator => Defaults {
            dt: 0.1,
            q: vec![1.0; n],
            r: 1.0,
            q_terminal: 1.0,
            optimizer: OptimizerConfig::default(),
        },
    }
}

fn positive(v: f64, what: &str) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("{what} must be > 0, got {v}")))
    }
}

fn vector(values: &[f64], n: usize, what: &str) -> Result<Vector> {
    if values.len() != n {
        return Err(Error::Config(format!("{what} has {} entries, expected {n}", values.len())));
    }
    Ok(Vector::from_column_slice(values))
}

pub fn config_hash(text: &str, seed: u64) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(format!("\nseed={seed}\n").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies defaults and validates every stage's parameters.
    pub fn resolve(&self, text: &str, seed_override: Option<u64>, out_override: Option<&Path>) -> Result<Settings> {
        let benchmark: Benchmark = self.benchmark.parse()?;
        let d = defaults(benchmark);
        let (n, m) = (benchmark.state_dim(), benchmark.control_dim());
        let seed = seed_override.or(self.seed).unwrap_or(0);
        let out = out_override
            .map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("out").join(benchmark.id()));

        let dt = positive(self.model.dt.unwrap_or(d.dt), "model.dt")?;
        let seconds = self.model.horizon_seconds.unwrap_or(benchmark.horizon_seconds());
        let horizon = horizon_steps(seconds, dt)?;
        let x0 = match &self.model.x0 {
            Some(v) => vector(v, n, "model.x0")?,
            None => benchmark.initial_state(),
        };
        let target = match &self.model.target {
            Some(v) => vector(v, n, "model.target")?,
            None => benchmark.target_state(),
        };

        let c = &self.cost;
        let cost = CostSpec::new(
            c.q.clone().unwrap_or(Weight::Diagonal(d.q)).matrix(n, "cost.q")?,
            c.r.clone().unwrap_or(Weight::Scalar(d.r)).matrix(m, "cost.r")?,
            c.q_terminal.clone().unwrap_or(Weight::Scalar(d.q_terminal)).matrix(n, "cost.q_terminal")?,
            target,
        )?;

        let o = &self.optimizer;
        let mut optimizer = d.optimizer;
        if let Some(dir) = &o.direction {
            optimizer.direction = match dir.as_str() {
                "gradient" => DescentDirection::Gradient,
                "lbfgs" => DescentDirection::Lbfgs {
                    memory: o.lbfgs_memory.unwrap_or(10),
                },
                "lm" => DescentDirection::LevenbergMarquardt,
                other => {
                    return Err(Error::Config(format!(
                        "optimizer.direction must be gradient, lbfgs or lm, got '{other}'"
                    )))
                }
            };
        }
        if o.lbfgs_memory.is_some() && !matches!(optimizer.direction, DescentDirection::Lbfgs { .. }) {
            return Err(Error::Config("optimizer.lbfgs_memory needs direction = \"lbfgs\"".into()));
        }
        optimizer.step_size = o.step_size.unwrap_or(optimizer.step_size);
        optimizer.fd_step = o.fd_step.unwrap_or(optimizer.fd_step);
        optimizer.tolerance = o.tolerance.unwrap_or(optimizer.tolerance);
        optimizer.max_iterations = o.max_iterations.unwrap_or(optimizer.max_iterations);
        optimizer.backtracking = o.backtracking.unwrap_or(optimizer.backtracking);
        if let Some(tc) = &o.terminal_continuation {
            optimizer.terminal_continuation = tc.clone();
        }
        optimizer.validate()?;
        let initial_control = o.initial_control.unwrap_or(0.0);
        if !initial_control.is_finite() {
            return Err(Error::Config("optimizer.initial_control must be finite".into()));
        }

        let s = &self.sysid;
        let order = match &s.order {
            None => ModelOrder::Auto,
            Some(OrderSpec::Named(name)) if name == "auto" => ModelOrder::Auto,
            Some(OrderSpec::Named(name)) => {
                return Err(Error::Config(format!("sysid.order must be \"auto\" or a positive integer, got '{name}'")))
            }
            Some(OrderSpec::Fixed(0)) => return Err(Error::Config("sysid.order must be >= 1".into())),
            Some(OrderSpec::Fixed(k)) => ModelOrder::Fixed(*k),
        };
        if let Some(sigma) = s.sigma_pert {
            positive(sigma, "sysid.sigma_pert")?;
        }
        if s.experiments.is_some_and(|e| e < horizon * m) {
            return Err(Error::Config(format!("sysid.experiments must be >= N * n_u = {}", horizon * m)));
        }
        if s.p.is_some_and(|p| p < 2) || s.q.is_some_and(|q| q < 1) {
            return Err(Error::Config("sysid needs p >= 2 and q >= 1".into()));
        }
        if s.p.is_some_and(|p| horizon < p + 1) {
            return Err(Error::Config(format!("sysid.p leaves no identification window for N = {horizon}")));
        }
        let sysid = SysidSettings {
            experiments: s.experiments,
            sigma_pert: s.sigma_pert,
            p: s.p,
            q: s.q,
            order,
        };

        let f = &self.feedback;
        let mut feedback = FeedbackConfig::new(n, m);
        feedback.r = cost.r.clone();
        if let Some(w) = &f.q {
            feedback.q = w.matrix(n, "feedback.q")?;
        }
        if let Some(w) = &f.r {
            feedback.r = w.matrix(m, "feedback.r")?;
        }
        if let Some(w) = &f.q_terminal {
            feedback.q_terminal = w.matrix(n, "feedback.q_terminal")?;
        }
        feedback.design_nsr = f.design_nsr.unwrap_or(feedback.design_nsr);
        feedback.meas_std = positive(f.meas_std.unwrap_or(feedback.meas_std), "feedback.meas_std")?;
        feedback.p0 = f.p0.unwrap_or(feedback.p0);
        if !(feedback.design_nsr >= 0.0 && feedback.p0 >= 0.0) {
            return Err(Error::Config("feedback.design_nsr and feedback.p0 must be >= 0".into()));
        }
        for (w, what) in [(&feedback.q, "feedback.q"), (&feedback.q_terminal, "feedback.q_terminal")] {
            if w.diagonal().iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("{what} must be >= 0")));
            }
        }
        if feedback.r.diagonal().iter().any(|v| !(*v > 0.0)) {
            return Err(Error::Config("feedback.r must be > 0".into()));
        }

        let e = &self.evaluation;
        let nsr = e.nsr.clone().unwrap_or_else(|| vec![0.0, 0.05, 0.1, 0.2]);
        if nsr.is_empty() || nsr.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("evaluation.nsr must be a non-empty list of values >= 0".into()));
        }
        let n_runs = e.n_runs.unwrap_or(100);
        if n_runs == 0 {
            return Err(Error::Config("evaluation.n_runs must be >= 1".into()));
        }
        let success_threshold = positive(e.success_threshold.unwrap_or(0.1), "evaluation.success_threshold")?;
        let tail = match &e.tail_eps {
            None => {
                if e.tail_threshold.is_some() || e.tail_runs.is_some() {
                    return Err(Error::Config("evaluation.tail_threshold/tail_runs need tail_eps".into()));
                }
                None
            }
            Some(eps) => {
                if eps.is_empty() || eps[0] < 0.0 || eps.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Config("evaluation.tail_eps must be non-negative and increasing".into()));
                }
                let runs = e.tail_runs.unwrap_or(1000);
                if runs == 0 {
                    return Err(Error::Config("evaluation.tail_runs must be >= 1".into()));
                }
                Some(TailSettings {
                    eps: eps.clone(),
                    threshold: positive(e.tail_threshold.unwrap_or(1.0), "evaluation.tail_threshold")?,
                    n_runs: runs,
                })
            }
        };

        Ok(Settings {
            benchmark,
            seed,
            out,
            dt,
            horizon,
            x0,
            cost,
            optimizer,
            initial_control,
            sysid,
            feedback,
            evaluation: EvaluationSettings {
                nsr,
                n_runs,
                success_threshold,
                open_loop_baseline: e.open_loop_baseline.unwrap_or(true),
                tail,
            },
            config_hash: config_hash(text, seed),
        })
    }
}

/// Reads, parses and resolves a config file.
pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Settings> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    PipelineConfig::parse(&text)
        .and_then(|c| c.resolve(&text, seed, out))
        .map_err(|e| e.context(path.display().to_string()))
}
