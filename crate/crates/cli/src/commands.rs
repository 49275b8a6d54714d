//! The workflows behind each subcommand. Every artifact depends only on the
//! config and the seed.

use std::path::Path;

use pile_core::constraint::{bound_smooth, ConstraintSystem};
use pile_core::control::optimize_control;
use pile_core::dynamics::{mosco_beta, sample_feasible, solve_discrete_qvi, solve_vi_frozen, QviSolution};
use pile_core::optimality::{active_set, default_act_tol, kkt_residuals, licq_check, recover_certificate, CheckMode};
use pile_core::Field;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, ExperimentConfig};
use crate::io::{write_csv, write_json, write_node_values};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Simulate,
    Optimize,
    Check,
    GammaSweep,
    MoscoTest,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Optimize => "optimize",
            Command::Check => "check",
            Command::GammaSweep => "gamma-sweep",
            Command::MoscoTest => "mosco-test",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("solver failed: {0}")]
    Solver(#[from] pile_core::Error),
    #[error("{failed} condition(s) above tolerance: {ids}")]
    CheckFailed { failed: usize, ids: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) => 2,
            RunError::Solver(_) => 3,
            RunError::CheckFailed { .. } => 4,
            RunError::Io(_) => 1,
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    command: &'a str,
    kind: &'a str,
    message: String,
}

/// Runs `cmd`, writing artifacts into `out`. Solver failures additionally
/// leave an `errors.json` behind.
pub fn run(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    std::fs::create_dir_all(out)?;
    let result = match cmd {
        Command::Simulate => simulate(cfg, out),
        Command::Optimize => optimize(cfg, out),
        Command::Check => check(cfg, out),
        Command::GammaSweep => gamma_sweep(cfg, out),
        Command::MoscoTest => mosco_test(cfg, out),
    };
    if let Err(e @ RunError::Solver(_)) = &result {
        let report = ErrorReport {
            command: cmd.name(),
            kind: "solver",
            message: e.to_string(),
        };
        write_json(&out.join("errors.json"), &report)?;
    }
    result
}

fn simulate_qvi(cfg: &ExperimentConfig) -> Result<(Field, QviSolution), RunError> {
    let grid = cfg.grid();
    let y0 = cfg.support()?;
    let sol = solve_discrete_qvi(
        &grid,
        &y0,
        &cfg.rates(),
        &cfg.time_grid(),
        &cfg.bound_params(),
        &cfg.solve_options(),
    )?;
    Ok((y0, sol))
}

#[derive(Serialize)]
struct StepFeasibility {
    step: usize,
    t: f64,
    violation: f64,
    picard_iterations: usize,
    fixed_point_residual: f64,
}

#[derive(Serialize)]
struct Feasibility {
    inner_tol: f64,
    max_violation: f64,
    /// `max_i (|Dy_M|_i - M~(y_M, y0)_i)`, negative when strictly feasible.
    final_slope_excess: f64,
    mass: f64,
    steps: Vec<StepFeasibility>,
}

fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let (y0, sol) = simulate_qvi(cfg)?;
    let grid = cfg.grid();
    let tg = cfg.time_grid();
    let states = &sol.trajectory.states;
    let n = grid.n();
    write_csv(
        &out.join("trajectory.csv"),
        &["t", "node", "height"],
        (0..n).flat_map(|i| (0..states.len()).map(move |j| (tg.t(j), i, states[j][i]))),
    )?;
    let bp = cfg.bound_params();
    let y = sol.trajectory.final_state();
    let m = bound_smooth(&grid, y, &y0, &bp)?;
    let (d1, d2) = grid.gradient(y)?;
    let final_slope_excess = (0..n)
        .map(|i| bp.norm.eval(d1[i], d2[i]) - m[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let steps: Vec<StepFeasibility> = sol
        .steps
        .iter()
        .enumerate()
        .map(|(k, s)| StepFeasibility {
            step: k + 1,
            t: tg.t(k + 1),
            violation: s.violation,
            picard_iterations: s.picard_iterations,
            fixed_point_residual: s.fixed_point_residual,
        })
        .collect();
    let report = Feasibility {
        inner_tol: cfg.solver.inner_tol,
        max_violation: steps.iter().map(|s| s.violation).fold(0.0, f64::max),
        final_slope_excess,
        mass: y.sum() * grid.cell_measure(),
        steps,
    };
    write_json(&out.join("feasibility.json"), &report)?;
    Ok(())
}

fn optimize(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let cp = cfg.control_problem()?;
    let report = optimize_control(&cp.y0_ref.clone(), &cp, &cfg.step_rule())?;
    write_json(&out.join("report.json"), &report)?;
    write_node_values(&out.join("y0_final.csv"), ["node", "y0"], &report.final_y0)?;
    Ok(())
}

#[derive(Serialize)]
struct StepLicq {
    step: usize,
    active: usize,
    ok: bool,
    rank: usize,
    condition_number: f64,
}

#[derive(Serialize)]
struct CheckReport {
    mode: CheckMode,
    lambda: f64,
    all_pass: bool,
    conditions: pile_core::optimality::ResidualReport,
    licq: Vec<StepLicq>,
}

fn check(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let (y0, sol) = simulate_qvi(cfg)?;
    let cp = cfg.control_problem()?;
    let cs = ConstraintSystem::new(cfg.grid(), cfg.bound_params())?;
    let opts = cfg.certificate_options();
    let cert = recover_certificate(&sol.trajectory, &y0, &cp, &cs, &opts)?;
    let conditions = kkt_residuals(&sol.trajectory, &y0, &cert, &cp, &cs, &opts)?;
    let mut licq = Vec::new();
    for (k, y) in sol.trajectory.states[1..].iter().enumerate() {
        let g = cs.eval(y, &y0)?;
        let tol = opts.act_tol.unwrap_or_else(|| default_act_tol(&g));
        let aset = active_set(y, &y0, &cs, tol)?;
        let l = licq_check(y, &y0, &cs, &aset)?;
        licq.push(StepLicq {
            step: k + 1,
            active: aset.len(),
            ok: l.ok,
            rank: l.rank,
            condition_number: l.condition_number,
        });
    }
    let failed: Vec<&str> = conditions
        .iter()
        .filter(|(_, e)| !e.pass)
        .map(|(id, _)| id.as_str())
        .collect();
    let report = CheckReport {
        mode: opts.mode,
        lambda: cert.lambda,
        all_pass: failed.is_empty(),
        conditions: conditions.clone(),
        licq,
    };
    write_json(&out.join("residuals.json"), &report)?;
    write_json(&out.join("certificate.json"), &cert)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(RunError::CheckFailed {
            failed: failed.len(),
            ids: failed.join(", "),
        })
    }
}

/// Frozen-bound solves on a random instance, one row per penalty weight.
fn gamma_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let grid = cfg.grid();
    let alpha = cfg.material.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let target = Field::from_fn(grid.n(), |_, _| rng.gen_range(-1.0..1.0));
    let bound = Field::from_fn(grid.n(), |_, _| rng.gen_range(0.5 * alpha..2.0 * alpha));
    let opts = cfg.solve_options();
    let sol = solve_vi_frozen(&grid, &target, &bound, cfg.norm()?, &opts)?;
    write_csv(
        &out.join("violations.csv"),
        &["gamma", "violation"],
        opts.gamma_schedule.iter().copied().zip(sol.violations.iter().copied()),
    )?;
    Ok(())
}

/// Scaling factors mapping slopes bounded by `M*` under the bound `Mn`:
/// 100 random triples, then a sequence with `Mn -> M*`.
fn mosco_test(cfg: &ExperimentConfig, out: &Path) -> Result<(), RunError> {
    let grid = cfg.grid();
    let norm = cfg.norm()?;
    let alpha = cfg.material.alpha;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = grid.n();
    let mut rows: Vec<(&str, usize, f64, f64, f64)> = Vec::new();
    let scaled_violation = |w: &Field, beta: f64, mn: &Field| -> Result<f64, RunError> {
        let (d1, d2) = grid.gradient(&(w * beta))?;
        Ok((0..n).map(|i| (norm.eval(d1[i], d2[i]) - mn[i]).max(0.0)).fold(0.0, f64::max))
    };
    for trial in 0..100 {
        let mstar = Field::from_fn(n, |_, _| alpha * rng.gen_range(1.0..3.0));
        let mn = Field::from_fn(n, |_, _| alpha * rng.gen_range(1.0..3.0));
        let anchor = Field::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let w = sample_feasible(&grid, &mstar, norm, &(anchor * 10.0), 1, &mut rng)?.remove(0);
        let beta = mosco_beta(&mn, &mstar, alpha)?;
        rows.push(("random", trial, (&mn - &mstar).amax(), beta, scaled_violation(&w, beta, &mn)?));
    }
    let mstar = Field::from_fn(n, |_, _| alpha * rng.gen_range(1.0..3.0));
    let offset = Field::from_fn(n, |_, _| alpha * rng.gen_range(-1.0..1.0));
    let anchor = Field::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
    let w = sample_feasible(&grid, &mstar, norm, &(anchor * 10.0), 1, &mut rng)?.remove(0);
    for k in 0..20 {
        let mn = (&mstar + &offset * 0.5f64.powi(k as i32)).map(|v| v.max(alpha));
        let beta = mosco_beta(&mn, &mstar, alpha)?;
        rows.push(("sequence", k, (&mn - &mstar).amax(), beta, scaled_violation(&w, beta, &mn)?));
    }
    write_csv(&out.join("beta.csv"), &["kind", "index", "distance", "beta", "violation"], rows)?;
    Ok(())
}
