//! Optimal control of the support `y0` through the smoothed forward model.
//!
//! The reduced objective `y0 -> J(y(y0), y0)` is differentiated with the
//! discrete adjoint of the chosen time-stepping scheme, so its gradient is
//! exact for the computed trajectory.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constraint::BoundParams;
use crate::dynamics::{forward_smoothed, Origin, Scheme, SmoothedPenalty, TimeGrid, Trajectory};
use crate::error::{check_len, Error, Result};
use crate::grid::Grid;
use crate::Field;

#[derive(Clone, Debug)]
pub struct ControlProblem {
    pub grid: Grid,
    /// Running-cost weights, usually from [`Grid::region_weights`].
    pub a: Field,
    pub sigma: f64,
    pub y0_ref: Field,
    pub lambda0: Field,
    pub lambda1: Field,
    pub tg: TimeGrid,
    /// Interval rates `f_1..f_M`.
    pub f: Vec<Field>,
    pub bp: BoundParams,
    /// Penalty weight of the smoothed dynamics.
    pub gamma: f64,
    pub scheme: Scheme,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        g.check("a", &self.a)?;
        g.check("y0_ref", &self.y0_ref)?;
        g.check("lambda0", &self.lambda0)?;
        g.check("lambda1", &self.lambda1)?;
        check_len("rates", self.tg.steps(), self.f.len())?;
        for f in &self.f {
            g.check("f", f)?;
        }
        self.bp.validate()?;
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "sigma",
                reason: format!("must be positive, got {}", self.sigma),
            });
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "gamma",
                reason: format!("must be positive, got {}", self.gamma),
            });
        }
        for i in 0..g.n() {
            let (l0, l1) = (self.lambda0[i], self.lambda1[i]);
            if !(l0 >= 0.0) || !(l1 >= l0) {
                return Err(Error::InvalidParameter {
                    name: "lambda0",
                    reason: format!("need 0 <= lambda0 <= lambda1, node {i} has {l0} and {l1}"),
                });
            }
        }
        Ok(())
    }

    pub fn lower(&self) -> Field {
        &self.y0_ref + &self.lambda0
    }

    pub fn upper(&self) -> Field {
        &self.y0_ref + &self.lambda1
    }

    pub fn penalty(&self) -> Result<SmoothedPenalty> {
        SmoothedPenalty::new(self.grid.clone(), self.bp)
    }

    pub fn forward(&self, y0: &Field) -> Result<Trajectory> {
        forward_smoothed(&self.penalty()?, y0, &self.f, &self.tg, self.gamma, self.scheme)
    }
}

/// `J = sum_j tau <a, y_j - y0> + sigma/2 |y0 - y0_ref|^2`.
pub fn objective(traj: &Trajectory, y0: &Field, cp: &ControlProblem) -> Result<f64> {
    check_len("states", cp.tg.steps() + 1, traj.states.len())?;
    cp.grid.check("y0", y0)?;
    let tau = traj.timegrid.tau();
    let running: f64 = traj.states[1..].iter().map(|y| tau * cp.a.dot(&(y - y0))).sum();
    Ok(running + 0.5 * cp.sigma * (y0 - &cp.y0_ref).norm_squared())
}

fn check_origin(traj: &Trajectory, cp: &ControlProblem) -> Result<()> {
    match traj.origin {
        Origin::Smoothed { scheme, gamma } if scheme == cp.scheme && gamma == cp.gamma => Ok(()),
        other => Err(Error::ModelMismatch(format!(
            "expected smoothed model ({:?}, gamma {}), got {other:?}",
            cp.scheme, cp.gamma
        ))),
    }
}

/// Per-step linearizations of the forward map along a trajectory.
struct Linearization {
    /// `dG/dy` at the state that enters step `j` (index `j - 1`).
    gy: Vec<DMatrix<f64>>,
    gz: Vec<DMatrix<f64>>,
}

fn linearize(traj: &Trajectory, y0: &Field, cp: &ControlProblem) -> Result<Linearization> {
    let pen = cp.penalty()?;
    let m = cp.tg.steps();
    let mut gy = Vec::with_capacity(m);
    let mut gz = Vec::with_capacity(m);
    for j in 1..=m {
        // explicit steps differentiate at the old state, implicit at the new
        let at = match cp.scheme {
            Scheme::Explicit => &traj.states[j - 1],
            Scheme::SemiImplicit => &traj.states[j],
        };
        let (a, b) = pen.jacobians(at, y0)?;
        gy.push(a);
        gz.push(b);
    }
    Ok(Linearization { gy, gz })
}

fn step_matrix(lin: &Linearization, cp: &ControlProblem, j: usize) -> DMatrix<f64> {
    let n = cp.grid.n();
    let k = cp.tg.tau() * cp.gamma;
    match cp.scheme {
        Scheme::Explicit => DMatrix::identity(n, n) - &lin.gy[j - 1] * k,
        Scheme::SemiImplicit => DMatrix::identity(n, n) + &lin.gy[j - 1] * k,
    }
}

/// Tangent of step `j` in the state: `dy_j = L_j dy_{j-1}`.
pub fn step_tangent(traj: &Trajectory, y0: &Field, cp: &ControlProblem, j: usize, dy: &Field) -> Result<Field> {
    let lin = single_step(traj, y0, cp, j)?;
    let m = step_matrix(&lin, cp, 1);
    match cp.scheme {
        Scheme::Explicit => Ok(m * dy),
        Scheme::SemiImplicit => solve(m, dy),
    }
}

/// Transpose of [`step_tangent`].
pub fn step_adjoint(traj: &Trajectory, y0: &Field, cp: &ControlProblem, j: usize, p: &Field) -> Result<Field> {
    let lin = single_step(traj, y0, cp, j)?;
    let m = step_matrix(&lin, cp, 1);
    match cp.scheme {
        Scheme::Explicit => Ok(m.transpose() * p),
        Scheme::SemiImplicit => solve(m.transpose(), p),
    }
}

fn single_step(traj: &Trajectory, y0: &Field, cp: &ControlProblem, j: usize) -> Result<Linearization> {
    check_origin(traj, cp)?;
    if j == 0 || j > cp.tg.steps() {
        return Err(Error::IndexOutOfRange {
            what: "step",
            index: j,
            bound: cp.tg.steps() + 1,
        });
    }
    let pen = cp.penalty()?;
    let at = match cp.scheme {
        Scheme::Explicit => &traj.states[j - 1],
        Scheme::SemiImplicit => &traj.states[j],
    };
    let (a, b) = pen.jacobians(at, y0)?;
    Ok(Linearization { gy: vec![a], gz: vec![b] })
}

fn solve(m: DMatrix<f64>, rhs: &Field) -> Result<Field> {
    m.lu()
        .solve(rhs)
        .ok_or_else(|| Error::ModelMismatch("singular step matrix".into()))
}

/// Adjoint states `p_0..p_M` with `p_M = 0`.
///
/// `p_j` is the sensitivity of the running cost after `t_j` to `y_j`, so with
/// an inactive constraint `p_j = a (T - t_j)`.
pub fn adjoint_solve(traj: &Trajectory, y0: &Field, cp: &ControlProblem) -> Result<Vec<Field>> {
    check_origin(traj, cp)?;
    let lin = linearize(traj, y0, cp)?;
    adjoint_from(&lin, cp)
}

fn adjoint_from(lin: &Linearization, cp: &ControlProblem) -> Result<Vec<Field>> {
    let m = cp.tg.steps();
    let tau = cp.tg.tau();
    let mut p = vec![cp.grid.zeros(); m + 1];
    for j in (0..m).rev() {
        let rhs = &cp.a * tau + &p[j + 1];
        let b = step_matrix(lin, cp, j + 1);
        p[j] = match cp.scheme {
            Scheme::Explicit => b.transpose() * rhs,
            Scheme::SemiImplicit => solve(b.transpose(), &rhs)?,
        };
    }
    Ok(p)
}

/// Objective, trajectory, adjoint and both forms of the reduced gradient at
/// one control.
#[derive(Clone, Debug)]
pub struct GradientEval {
    pub objective: f64,
    pub trajectory: Trajectory,
    pub adjoint: Vec<Field>,
    /// Exact gradient of the reduced objective.
    pub gradient: Field,
    /// Only the regularization and `G_{y0}` coupling terms, as in the
    /// continuous control inequality.
    pub literal: Field,
}

pub fn evaluate(y0: &Field, cp: &ControlProblem) -> Result<GradientEval> {
    cp.grid.check("y0", y0)?;
    let traj = cp.forward(y0)?;
    let lin = linearize(&traj, y0, cp)?;
    let p = adjoint_from(&lin, cp)?;
    let m = cp.tg.steps();
    let tau = cp.tg.tau();
    let k = tau * cp.gamma;
    let mut coupling = cp.grid.zeros();
    for j in 1..=m {
        let mu = match cp.scheme {
            Scheme::Explicit => &cp.a * tau + &p[j],
            Scheme::SemiImplicit => p[j - 1].clone(),
        };
        coupling -= lin.gz[j - 1].transpose() * mu * k;
    }
    let reg = (y0 - &cp.y0_ref) * cp.sigma;
    let literal = &reg + &coupling;
    let gradient = &literal + &p[0] - &cp.a * cp.tg.horizon();
    Ok(GradientEval {
        objective: objective(&traj, y0, cp)?,
        trajectory: traj,
        adjoint: p,
        gradient,
        literal,
    })
}

pub fn reduced_gradient(y0: &Field, cp: &ControlProblem) -> Result<Field> {
    Ok(evaluate(y0, cp)?.gradient)
}

/// Componentwise clamp onto `[y0_ref + lambda0, y0_ref + lambda1]`.
pub fn project_box(z: &Field, cp: &ControlProblem) -> Field {
    let lo = cp.lower();
    let hi = cp.upper();
    Field::from_fn(z.len(), |i, _| z[i].clamp(lo[i], hi[i]))
}

/// `min over the box of <g, yhat - y0>`, attained at a vertex.
pub fn box_vi_residual(g: &Field, y0: &Field, cp: &ControlProblem) -> f64 {
    let lo = cp.lower();
    let hi = cp.upper();
    (0..g.len())
        .map(|i| (g[i] * (lo[i] - y0[i])).min(g[i] * (hi[i] - y0[i])))
        .sum()
}

/// `min <g, yhat - y0>` over `count` uniform samples of the box.
pub fn sampled_vi_residual<R: Rng>(g: &Field, y0: &Field, cp: &ControlProblem, count: usize, rng: &mut R) -> f64 {
    let lo = cp.lower();
    let hi = cp.upper();
    (0..count)
        .map(|_| {
            let yhat = Field::from_fn(g.len(), |i, _| {
                if hi[i] > lo[i] {
                    rng.gen_range(lo[i]..=hi[i])
                } else {
                    lo[i]
                }
            });
            g.dot(&(yhat - y0))
        })
        .fold(f64::INFINITY, f64::min)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct StepRule {
    pub initial_step: f64,
    pub shrink: f64,
    pub sufficient_decrease: f64,
    pub max_backtracks: usize,
    /// Stop when `|y0 - P(y0 - grad)|_inf <= tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Number of random box points for the sampled residuals.
    pub samples: usize,
    pub seed: u64,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule {
            initial_step: 1.0,
            shrink: 0.5,
            sufficient_decrease: 1e-4,
            max_backtracks: 40,
            tol: 1e-8,
            max_iter: 200,
            samples: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
}

/// Control-inequality residuals, `min <g, yhat - y0>` over the box.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ViResidual {
    /// Minimum over random samples.
    pub sampled: f64,
    /// Exact minimum over the box.
    pub exact: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizeReport {
    pub status: OptimizeStatus,
    pub iterations: usize,
    /// Objective at the initial point and after every accepted step.
    pub objective_history: Vec<f64>,
    /// `|y0 - P(y0 - grad)|_inf` at every visited point.
    pub grad_norm_history: Vec<f64>,
    #[serde(serialize_with = "ser_field")]
    pub final_y0: Field,
    pub vi_residual_literal: ViResidual,
    pub vi_residual_complete: ViResidual,
}

fn ser_field<S: serde::Serializer>(f: &Field, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_seq(f.iter())
}

/// Projected gradient with Armijo backtracking along the projection arc.
pub fn optimize_control(y0_init: &Field, cp: &ControlProblem, rule: &StepRule) -> Result<OptimizeReport> {
    cp.validate()?;
    cp.grid.check("y0", y0_init)?;
    let mut y = project_box(y0_init, cp);
    let mut ev = evaluate(&y, cp)?;
    let mut objective_history = vec![ev.objective];
    let mut grad_norm_history = Vec::new();
    let mut status = OptimizeStatus::MaxIterations;
    let mut iterations = 0;
    loop {
        let pg = (&y - project_box(&(&y - &ev.gradient), cp)).amax();
        grad_norm_history.push(pg);
        if pg <= rule.tol {
            status = OptimizeStatus::Converged;
            break;
        }
        if iterations >= rule.max_iter {
            break;
        }
        let mut s = rule.initial_step;
        let mut accepted = None;
        for _ in 0..=rule.max_backtracks {
            let cand = project_box(&(&y - &ev.gradient * s), cp);
            let decrease = ev.gradient.dot(&(&cand - &y));
            let next = evaluate(&cand, cp)?;
            if next.objective < ev.objective
                && next.objective <= ev.objective + rule.sufficient_decrease * decrease
            {
                accepted = Some((cand, next));
                break;
            }
            s *= rule.shrink;
        }
        let Some((cand, next)) = accepted else {
            status = OptimizeStatus::LineSearchFailed;
            break;
        };
        iterations += 1;
        y = cand;
        ev = next;
        objective_history.push(ev.objective);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rule.seed);
    let vi_residual_literal = ViResidual {
        sampled: sampled_vi_residual(&ev.literal, &y, cp, rule.samples, &mut rng),
        exact: box_vi_residual(&ev.literal, &y, cp),
    };
    let vi_residual_complete = ViResidual {
        sampled: sampled_vi_residual(&ev.gradient, &y, cp, rule.samples, &mut rng),
        exact: box_vi_residual(&ev.gradient, &y, cp),
    };
    Ok(OptimizeReport {
        status,
        iterations,
        objective_history,
        grad_norm_history,
        final_y0: y,
        vi_residual_literal,
        vi_residual_complete,
    })
}
