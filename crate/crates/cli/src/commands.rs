use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use d2c::artifact::{
    gains_csv, history_csv, nominal_from_artifact, nominal_to_artifact, policy_from_artifact, policy_to_artifact,
    rom_from_artifact, rom_to_artifact, write_atomic, Artifact,
};
use d2c::dynamics::{make_model, SimModel, Trajectory};
use d2c::evaluation::{deviation_tail, monte_carlo, run_closed_loop, MonteCarloConfig, MonteCarloReport, NoiseSetting};
use d2c::feedback::{build_policy, FeedbackPolicy};
use d2c::openloop::optimize;
use d2c::sysid::{collect_rollouts, default_block_sizes, default_experiments, default_sigma_pert, identify_ltv, LtvRom};
use d2c::{Error, Matrix, Result};
use log::{info, warn};

use crate::config::Settings;

/// Outcome of a command that did not fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// Finished and wrote its artifacts, but with a warning such as an
    /// unconverged optimization.
    Warning,
}

impl Status {
    fn and(self, other: Status) -> Status {
        if self == Status::Ok && other == Status::Ok {
            Status::Ok
        } else {
            Status::Warning
        }
    }
}

pub const NOMINAL_FILE: &str = "nominal.d2c";
pub const ROM_FILE: &str = "rom.d2c";
pub const POLICY_FILE: &str = "policy.d2c";
pub const SUMMARY_FILE: &str = "summary.d2c";

pub fn default_path(s: &Settings, file: &str) -> PathBuf {
    s.out.join(file)
}

fn model(s: &Settings) -> Result<Box<dyn SimModel>> {
    make_model(s.benchmark.id(), s.dt, 0.0, &Matrix::identity(1, 1))
}

fn provenance(s: &Settings, art: Artifact) -> Artifact {
    art.field("benchmark", s.benchmark.id())
        .field("dt", format!("{:e}", s.dt))
        .field("config_hash", &s.config_hash)
        .field("seed", s.seed)
}

/// Loads an artifact and checks that it was produced for this benchmark and
/// step size.
fn load(s: &Settings, path: &Path) -> Result<Artifact> {
    let art = Artifact::read(path)?;
    let bench = art.get("benchmark")?;
    if bench != s.benchmark.id() {
        return Err(Error::Config(format!(
            "{}: benchmark is '{bench}', config says '{}'",
            path.display(),
            s.benchmark
        )));
    }
    let dt: f64 = art.get_parsed("dt")?;
    if dt != s.dt {
        return Err(Error::Config(format!("{}: dt is {dt}, config says {}", path.display(), s.dt)));
    }
    Ok(art)
}

fn write(s: &Settings, file: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(&s.out).map_err(|source| Error::Io {
        path: s.out.display().to_string(),
        source,
    })?;
    let path = s.out.join(file);
    write_atomic(&path, contents.as_bytes())?;
    Ok(path)
}

fn check_nominal(s: &Settings, nominal: &Trajectory) -> Result<()> {
    let expected = [
        ("horizon", s.horizon),
        ("state_dim", s.benchmark.state_dim()),
        ("control_dim", s.benchmark.control_dim()),
    ];
    let actual = [nominal.horizon(), nominal.state_dim(), nominal.control_dim()];
    for ((field, want), got) in expected.into_iter().zip(actual) {
        if want != got {
            return Err(Error::Dimension(format!("nominal {field}: expected {want}, found {got}")));
        }
    }
    Ok(())
}

pub fn cmd_optimize(s: &Settings) -> Result<Status> {
    let started = Instant::now();
    let model = model(s)?;
    let result = optimize(&model, &s.cost, &s.x0, &s.initial_controls(), &s.optimizer)?;
    let terminal_error = (result.nominal.terminal() - &s.cost.target).norm();
    info!(
        "optimize: {:?} after {} iterations, cost {:.6e}, terminal error {:.3e}, {} rollouts, {:.2?}",
        result.stop,
        result.iterations,
        result.cost,
        terminal_error,
        result.rollouts,
        started.elapsed()
    );
    let art = provenance(s, nominal_to_artifact(&result.nominal))
        .field("cost", format!("{:e}", result.cost))
        .field("terminal_error", format!("{terminal_error:e}"))
        .field("stop", format!("{:?}", result.stop))
        .field("iterations", result.iterations)
        .field("rollouts", result.rollouts);
    write(s, NOMINAL_FILE, &art.to_text())?;
    write(s, "convergence.csv", &history_csv(&result.history))?;
    if result.converged() {
        Ok(Status::Ok)
    } else {
        warn!("optimize: stopped without meeting the gradient tolerance ({:?})", result.stop);
        Ok(Status::Warning)
    }
}

fn singular_values_csv(rom: &LtvRom) -> String {
    let width = rom.singular_values.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = String::from("k");
    for i in 1..=width {
        write!(out, ",sigma_{i}").unwrap();
    }
    out.push('\n');
    for (i, sv) in rom.singular_values.iter().enumerate() {
        write!(out, "{}", rom.k_lo + i).unwrap();
        for v in sv {
            write!(out, ",{v:e}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_sysid(s: &Settings, nominal_path: &Path) -> Result<Status> {
    let started = Instant::now();
    let nominal = nominal_from_artifact(&load(s, nominal_path)?)?;
    check_nominal(s, &nominal)?;
    let model = model(s)?;
    let (n_x, n_u) = (nominal.state_dim(), nominal.control_dim());
    let (dp, dq) = default_block_sizes(n_x, n_x, n_u);
    let experiments = s.sysid.experiments.unwrap_or(default_experiments(nominal.horizon(), n_u));
    let sigma = s.sysid.sigma_pert.unwrap_or_else(|| default_sigma_pert(&nominal.controls));
    let (p, q) = (s.sysid.p.unwrap_or(dp), s.sysid.q.unwrap_or(dq));
    let data = collect_rollouts(&model, &nominal, experiments, sigma, s.sysid_seed())?;
    let rom = identify_ltv(&data, p, q, s.sysid.order)?;
    info!("sysid rollouts: {experiments}");
    info!(
        "sysid: order {} over [{}, {}], sigma_pert {sigma:.3e}, p={p}, q={q}, {:.2?}",
        rom.order,
        rom.k_lo,
        rom.k_hi,
        started.elapsed()
    );
    let art = provenance(s, rom_to_artifact(&rom))
        .field("rollouts", experiments)
        .field("sigma_pert", format!("{sigma:e}"))
        .field("p", p)
        .field("q", q);
    write(s, ROM_FILE, &art.to_text())?;
    write(s, "singular_values.csv", &singular_values_csv(&rom))?;
    // Steps before q see zero-padded Hankel columns and are expected to be
    // rank deficient.
    if rom.deficient_steps.iter().all(|&k| k < q) {
        Ok(Status::Ok)
    } else {
        warn!("sysid: rank-deficient Hankel pairs at steps {:?}", rom.deficient_steps);
        Ok(Status::Warning)
    }
}

pub fn cmd_design(s: &Settings, nominal_path: &Path, rom_path: &Path) -> Result<Status> {
    let started = Instant::now();
    let nominal = nominal_from_artifact(&load(s, nominal_path)?)?;
    check_nominal(s, &nominal)?;
    let rom = rom_from_artifact(&load(s, rom_path)?)?;
    for (field, n, r) in [
        ("horizon", nominal.horizon(), rom.horizon),
        ("output_dim", nominal.state_dim(), rom.output_dim),
        ("input_dim", nominal.control_dim(), rom.input_dim),
    ] {
        if n != r {
            return Err(Error::Dimension(format!("{field}: nominal has {n}, model has {r}")));
        }
    }
    let policy = build_policy(&nominal, &rom, &s.feedback)?;
    info!("design: {} LQR and {} Kalman gains, {:.2?}", policy.lqr_gains.len(), policy.kalman.gains.len(), started.elapsed());
    write(s, POLICY_FILE, &provenance(s, policy_to_artifact(&policy)).to_text())?;
    write(s, "gains.csv", &gains_csv(&policy.lqr_gains))?;
    Ok(Status::Ok)
}

fn report_rows(out: &mut String, mode: &str, report: &MonteCarloReport) {
    for p in &report.points {
        writeln!(
            out,
            "{mode},{},{:e},{},{},{:e},{:e},{:e},{}",
            p.nsr,
            p.noise_std,
            p.n_runs,
            p.costs.len(),
            p.mean_cost,
            p.std_cost,
            p.std_error(),
            p.success_rate
        )
        .unwrap();
    }
}

/// Monte Carlo evaluation of `policy`; returns the evaluation summary.
fn evaluate_policy(s: &Settings, policy: &FeedbackPolicy) -> Result<Artifact> {
    let started = Instant::now();
    let model = model(s)?;
    let e = &s.evaluation;
    let mut config = MonteCarloConfig::new(e.n_runs, s.evaluation_seed());
    config.success_threshold = e.success_threshold;
    let closed = monte_carlo(&model, policy, &s.cost, &e.nsr, &config)?;
    let mut csv = String::from("mode,nsr,noise_std,n_runs,completed,mean_cost,std_cost,std_error,success_rate\n");
    report_rows(&mut csv, "closed", &closed);
    if e.open_loop_baseline {
        config.open_loop = true;
        report_rows(&mut csv, "open", &monte_carlo(&model, policy, &s.cost, &e.nsr, &config)?);
    }
    write(s, "evaluation.csv", &csv)?;

    let noiseless = run_closed_loop(&model, policy, &s.cost, &NoiseSetting::absolute(0.0, 0))?;
    let mut summary = Artifact::new("evaluation")
        .field("closed_loop_cost", format!("{:e}", noiseless.cost))
        .field("closed_loop_terminal_error", format!("{:e}", noiseless.terminal_error));
    for p in &closed.points {
        summary.set(&format!("mean_cost@{}", p.nsr), format!("{:e}", p.mean_cost));
        summary.set(&format!("success_rate@{}", p.nsr), p.success_rate);
    }
    if let Some(t) = &e.tail {
        let tail = deviation_tail(&model, policy, &s.cost, &t.eps, t.threshold, t.n_runs, s.evaluation_seed())?;
        let mut csv = String::from("eps,exceedances,probability,censored\n");
        for i in 0..tail.eps.len() {
            writeln!(csv, "{},{},{:e},{}", tail.eps[i], tail.exceedances[i], tail.probabilities[i], tail.censored[i]).unwrap();
        }
        write(s, "tail.csv", &csv)?;
        summary.set("tail_beta", format!("{:e}", tail.beta));
        summary.set("tail_r_squared", format!("{:e}", tail.r_squared));
    }
    info!("evaluate: {} NSR values x {} runs, {:.2?}", e.nsr.len(), e.n_runs, started.elapsed());
    Ok(summary)
}

pub fn cmd_evaluate(s: &Settings, policy_path: &Path) -> Result<Status> {
    let policy = policy_from_artifact(&load(s, policy_path)?)?;
    check_nominal(s, &policy.nominal)?;
    let summary = provenance(s, evaluate_policy(s, &policy)?);
    write(s, "evaluation.d2c", &summary.to_text())?;
    Ok(Status::Ok)
}

/// Runs all stages in order; each stage reads the previous stage's file so
/// the artifacts on disk are exactly what the pipeline used.
pub fn cmd_pipeline(s: &Settings) -> Result<Status> {
    let started = Instant::now();
    let nominal_path = default_path(s, NOMINAL_FILE);
    let rom_path = default_path(s, ROM_FILE);
    let policy_path = default_path(s, POLICY_FILE);

    let t = Instant::now();
    let mut status = cmd_optimize(s).map_err(|e| e.context("optimize"))?;
    info!("stage open-loop: {:.2?}", t.elapsed());
    let t = Instant::now();
    status = status.and(cmd_sysid(s, &nominal_path).map_err(|e| e.context("sysid"))?);
    info!("stage identification: {:.2?}", t.elapsed());
    let t = Instant::now();
    status = status.and(cmd_design(s, &nominal_path, &rom_path).map_err(|e| e.context("design"))?);
    info!("stage feedback design: {:.2?}", t.elapsed());
    let t = Instant::now();
    let nominal_art = load(s, &nominal_path)?;
    let rom_art = load(s, &rom_path)?;
    let policy = policy_from_artifact(&load(s, &policy_path)?)?;
    let evaluation = evaluate_policy(s, &policy).map_err(|e| e.context("evaluate"))?;
    info!("stage evaluation: {:.2?}", t.elapsed());

    let opt_rollouts: u64 = nominal_art.get_parsed("rollouts")?;
    let sysid_rollouts: u64 = rom_art.get_parsed("rollouts")?;
    let mut summary = provenance(s, Artifact::new("summary"))
        .field("horizon", s.horizon)
        .field("optimizer_stop", nominal_art.get("stop")?)
        .field("optimizer_iterations", nominal_art.get("iterations")?)
        .field("nominal_cost", nominal_art.get("cost")?)
        .field("nominal_terminal_error", nominal_art.get("terminal_error")?)
        .field("optimization_rollouts", opt_rollouts)
        .field("sysid_rollouts", sysid_rollouts)
        .field("learning_trials", opt_rollouts + sysid_rollouts)
        .field("rom_order", rom_art.get("order")?)
        .field("deficient_steps", rom_art.get("deficient_steps")?);
    for (k, v) in evaluation.fields {
        summary.set(&k, v);
    }
    write(s, SUMMARY_FILE, &summary.to_text())?;
    info!(
        "pipeline: {} learning trials ({opt_rollouts} optimization + {sysid_rollouts} identification), {:.2?}",
        opt_rollouts + sysid_rollouts,
        started.elapsed()
    );
    Ok(status)
}
