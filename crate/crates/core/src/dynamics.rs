//! Forward solvers for the pile height.
//!
//! * [`solve_vi_frozen`]: one implicit step against a fixed bound, by penalty
//!   continuation in `gamma`.
//! * [`qvi_step`] / [`solve_discrete_qvi`]: the quasi-variational step, where
//!   the bound is re-evaluated at the unknown state by damped Picard iteration.
//! * [`forward_smoothed`]: the penalized ODE `y' = f - gamma G(y, y0)`, the
//!   differentiable model used for control.

use nalgebra::{Cholesky, DMatrix};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{
    add_node_outer, add_node_quadratic, bound_smooth, bound_smooth_jet, node_adjoint, norm_terms,
    penalty_hessian, penalty_value_grad, smooth_max_derivs, violation, BoundParams, Norm,
};
use crate::error::{check_len, Error, Result};
use crate::grid::{Axis, Grid};
use crate::Field;

/// Uniform partition of `[0, T]` into `M` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    tau: f64,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "T",
                reason: format!("horizon must be positive, got {horizon}"),
            });
        }
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "M",
                reason: "need at least one time step".into(),
            });
        }
        Ok(TimeGrid {
            horizon,
            steps,
            tau: horizon / steps as f64,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Mesh point `t_j = j tau`; `t_M` is exactly `T`.
    pub fn t(&self, j: usize) -> f64 {
        if j == self.steps {
            self.horizon
        } else {
            j as f64 * self.tau
        }
    }
}

/// Time discretization of the smoothed forward model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// `y_j = y_{j-1} + tau (f_j - gamma G(y_{j-1}))`.
    Explicit,
    /// `y_j = y_{j-1} + tau (f_j - gamma G(y_j))`, solved by Newton.
    SemiImplicit,
}

/// Which forward model produced a trajectory.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Origin {
    Sweeping,
    Smoothed { scheme: Scheme, gamma: f64 },
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `y_0, ..., y_M`; entry 0 is the support.
    pub states: Vec<Field>,
    pub timegrid: TimeGrid,
    pub origin: Origin,
}

impl Trajectory {
    pub fn final_state(&self) -> &Field {
        self.states.last().expect("trajectory has M + 1 >= 2 states")
    }
}

/// Knobs for the penalty continuation and the Picard loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub gamma_schedule: Vec<f64>,
    /// Feasibility tolerance on `max_i (|Dy_i| - M_i)^+`.
    pub inner_tol: f64,
    pub picard_tol: f64,
    pub picard_max: usize,
    /// Initial Picard relaxation in `(0, 1]`; halved when the increment grows.
    pub damping: f64,
    pub newton_max: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            gamma_schedule: (0..=6).map(|k| 10f64.powi(k)).collect(),
            inner_tol: 1e-6,
            picard_tol: 1e-8,
            picard_max: 50,
            damping: 1.0,
            newton_max: 100,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidParameter { name, reason });
        if self.gamma_schedule.is_empty() {
            return bad("gamma_schedule", "must not be empty".into());
        }
        if self.gamma_schedule.iter().any(|&g| !(g > 0.0 && g.is_finite())) {
            return bad("gamma_schedule", "entries must be positive and finite".into());
        }
        if self.gamma_schedule.windows(2).any(|w| w[1] <= w[0]) {
            return bad("gamma_schedule", "must be strictly increasing".into());
        }
        for (name, v) in [("inner_tol", self.inner_tol), ("picard_tol", self.picard_tol)] {
            if !(v > 0.0) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if self.picard_max == 0 || self.newton_max == 0 {
            return bad("picard_max", "iteration caps must be positive".into());
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping", format!("must lie in (0, 1], got {}", self.damping));
        }
        Ok(())
    }
}

/// Result of one frozen-bound solve.
#[derive(Clone, Debug)]
pub struct ViSolution {
    pub y: Field,
    /// Constraint violation after each `gamma` in the schedule.
    pub violations: Vec<f64>,
    /// Penalized objective after each accepted Newton iterate, per `gamma`.
    pub energies: Vec<Vec<f64>>,
}

/// Minimizes `1/2 |y - target|^2 + gamma Phi(y)` for every `gamma` in the
/// schedule, warm-starting each stage from the previous one.
pub fn solve_vi_frozen(
    grid: &Grid,
    target: &Field,
    bound: &Field,
    norm: Norm,
    opts: &SolveOptions,
) -> Result<ViSolution> {
    solve_vi_frozen_from(grid, target, target, bound, norm, opts)
}

/// [`solve_vi_frozen`] started from an arbitrary iterate.
pub fn solve_vi_frozen_from(
    grid: &Grid,
    init: &Field,
    target: &Field,
    bound: &Field,
    norm: Norm,
    opts: &SolveOptions,
) -> Result<ViSolution> {
    opts.validate()?;
    grid.check("init", init)?;
    grid.check("target", target)?;
    // rejects negative bounds
    penalty_value_grad(grid, target, bound, norm)?;

    let mut y = init.clone();
    let mut violations = Vec::with_capacity(opts.gamma_schedule.len());
    let mut energies = Vec::with_capacity(opts.gamma_schedule.len());
    for &gamma in &opts.gamma_schedule {
        energies.push(newton_stage(grid, target, bound, norm, gamma, opts.newton_max, &mut y)?);
        violations.push(violation(grid, &y, bound, norm)?);
    }
    let last = *violations.last().expect("schedule is non-empty");
    if last > opts.inner_tol {
        return Err(Error::PenaltyNotConverged {
            violation: last,
            history: violations,
        });
    }
    Ok(ViSolution {
        y,
        violations,
        energies,
    })
}

fn energy(grid: &Grid, y: &Field, target: &Field, bound: &Field, norm: Norm, gamma: f64) -> Result<(f64, Field)> {
    let (phi, g) = penalty_value_grad(grid, y, bound, norm)?;
    let d = y - target;
    Ok((0.5 * d.norm_squared() + gamma * phi, d + g * gamma))
}

/// Damped Newton on the strongly convex penalized objective. Returns the
/// objective after each accepted iterate.
fn newton_stage(
    grid: &Grid,
    target: &Field,
    bound: &Field,
    norm: Norm,
    gamma: f64,
    max_iter: usize,
    y: &mut Field,
) -> Result<Vec<f64>> {
    let (mut e, mut grad) = energy(grid, y, target, bound, norm, gamma)?;
    let mut history = vec![e];
    let scale = 1.0 + target.amax();
    for _ in 0..max_iter {
        if grad.amax() <= 1e-14 * scale {
            break;
        }
        let mut h = penalty_hessian(grid, y, bound, norm)? * gamma;
        for i in 0..grid.n() {
            h[(i, i)] += 1.0;
        }
        let dir = match Cholesky::new(h) {
            Some(c) => -c.solve(&grad),
            None => -grad.clone(),
        };
        let slope = grad.dot(&dir);
        if slope >= 0.0 {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let cand = &*y + &dir * t;
            let (ec, gc) = energy(grid, &cand, target, bound, norm, gamma)?;
            if ec <= e + 1e-4 * t * slope {
                accepted = Some((cand, ec, gc));
                break;
            }
            t *= 0.5;
        }
        // No representable decrease left: the iterate sits at the rounding floor.
        let Some((cand, ec, gc)) = accepted else {
            break;
        };
        let step = (&cand - &*y).amax();
        *y = cand;
        e = ec;
        grad = gc;
        history.push(e);
        if step <= 1e-14 * (1.0 + y.amax()) {
            break;
        }
    }
    Ok(history)
}

/// Certificate for one accepted quasi-variational step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub y: Field,
    pub picard_iterations: usize,
    /// `|S(z) - z|_inf` at the returned fixed point.
    pub fixed_point_residual: f64,
    /// `max_i (|Dy_i| - M~(y, y0)_i)^+`.
    pub violation: f64,
    /// Penalty violations along the schedule for the final frozen solve.
    pub penalty_history: Vec<f64>,
}

/// One implicit step of the sweeping process with the bound taken at the new
/// state: finds `y = S(y)` where `S(z)` is the frozen-bound solve with bound
/// `M~(z, y0)`.
pub fn qvi_step(
    grid: &Grid,
    y_prev: &Field,
    y0: &Field,
    f_j: &Field,
    tau: f64,
    bp: &BoundParams,
    opts: &SolveOptions,
) -> Result<StepReport> {
    opts.validate()?;
    bp.validate()?;
    grid.check("y_prev", y_prev)?;
    grid.check("y0", y0)?;
    grid.check("f", f_j)?;
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter {
            name: "tau",
            reason: format!("must be positive, got {tau}"),
        });
    }
    let target = y_prev + f_j * tau;
    let mut z = y_prev.clone();
    let mut theta = opts.damping;
    let mut prev_incr = f64::INFINITY;
    let mut best: Option<(f64, Field)> = None;
    for it in 1..=opts.picard_max {
        let bound = bound_smooth(grid, &z, y0, bp)?;
        let sol = solve_vi_frozen(grid, &target, &bound, bp.norm, opts)?;
        let incr = (&sol.y - &z).amax();
        if incr <= opts.picard_tol {
            let m = bound_smooth(grid, &sol.y, y0, bp)?;
            return Ok(StepReport {
                violation: violation(grid, &sol.y, &m, bp.norm)?,
                y: sol.y,
                picard_iterations: it,
                fixed_point_residual: incr,
                penalty_history: sol.violations,
            });
        }
        if best.as_ref().is_none_or(|b| incr < b.0) {
            best = Some((incr, sol.y.clone()));
        }
        if incr > prev_incr {
            theta = (theta * 0.5).max(1.0 / 64.0);
        }
        prev_incr = incr;
        z = &z * (1.0 - theta) + &sol.y * theta;
    }
    let (residual, best) = best.expect("at least one Picard iteration ran");
    Err(Error::FixedPointNotConverged {
        iterations: opts.picard_max,
        residual,
        best,
    })
}

/// Trajectory of the discrete sweeping process plus per-step certificates.
#[derive(Clone, Debug)]
pub struct QviSolution {
    pub trajectory: Trajectory,
    /// Entry `j - 1` certifies step `j`.
    pub steps: Vec<StepReport>,
}

/// Runs [`qvi_step`] for `j = 1..=M` with rates `f[j - 1]`.
pub fn solve_discrete_qvi(
    grid: &Grid,
    y0: &Field,
    f: &[Field],
    tg: &TimeGrid,
    bp: &BoundParams,
    opts: &SolveOptions,
) -> Result<QviSolution> {
    check_len("rates", tg.steps(), f.len())?;
    grid.check("y0", y0)?;
    let mut states = Vec::with_capacity(tg.steps() + 1);
    states.push(y0.clone());
    let mut steps = Vec::with_capacity(tg.steps());
    for (j, fj) in f.iter().enumerate() {
        let rep = qvi_step(grid, &states[j], y0, fj, tg.tau(), bp, opts).map_err(|e| {
            Error::StepFailed {
                step: j + 1,
                source: Box::new(e),
            }
        })?;
        states.push(rep.y.clone());
        steps.push(rep);
    }
    Ok(QviSolution {
        trajectory: Trajectory {
            states,
            timegrid: *tg,
            origin: Origin::Sweeping,
        },
        steps,
    })
}

/// A pouring rate given as a function of time that can be integrated exactly
/// over subintervals.
pub trait RateSource {
    /// `int_a^b f(t) dt`.
    fn integrate(&self, a: f64, b: f64) -> Field;
}

/// A fixed spatial rate switched on over `[start, stop)`.
#[derive(Clone, Debug)]
pub struct PulseSource {
    pub rate: Field,
    pub start: f64,
    pub stop: f64,
}

impl RateSource for PulseSource {
    fn integrate(&self, a: f64, b: f64) -> Field {
        let overlap = (b.min(self.stop) - a.max(self.start)).max(0.0);
        &self.rate * overlap
    }
}

/// Interval averages `f_j = (1/tau) int_{t_{j-1}}^{t_j} f dt`, `j = 1..=M`.
pub fn discretize_rate(source: &dyn RateSource, tg: &TimeGrid) -> Vec<Field> {
    (1..=tg.steps())
        .map(|j| source.integrate(tg.t(j - 1), tg.t(j)) / tg.tau())
        .collect()
}

/// The smoothed penalty map `G(y, y0)` of the regularized dynamics,
/// `G = D^T max_eps(0, |Dy|^2 - M~(y, y0)^2) Dy` for the Euclidean norm.
#[derive(Clone, Debug)]
pub struct SmoothedPenalty {
    grid: Grid,
    bp: BoundParams,
}

impl SmoothedPenalty {
    pub fn new(grid: Grid, bp: BoundParams) -> Result<Self> {
        bp.validate()?;
        Ok(SmoothedPenalty { grid, bp })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn params(&self) -> &BoundParams {
        &self.bp
    }

    pub fn value(&self, y: &Field, y0: &Field) -> Result<Field> {
        let grid = &self.grid;
        let m = bound_smooth(grid, y, y0, &self.bp)?;
        let mut out = grid.zeros();
        for i in 0..grid.n() {
            let (a, b) = (grid.diff_at(y, i, Axis::X), grid.diff_at(y, i, Axis::Y));
            let (terms, nt) = norm_terms(self.bp.norm, a, b);
            for t in &terms[..nt] {
                let (sg, _, _) = smooth_max_derivs(t.psi - m[i] * m[i], self.bp.eps_smooth);
                for (c, v) in node_adjoint(grid, i, [0.5 * sg * t.grad[0], 0.5 * sg * t.grad[1]]) {
                    out[c] += v;
                }
            }
        }
        Ok(out)
    }

    /// Dense `(dG/dy, dG/dy0)`.
    pub fn jacobians(&self, y: &Field, y0: &Field) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let grid = &self.grid;
        let n = grid.n();
        let jet = bound_smooth_jet(grid, y, y0, &self.bp)?;
        let mut gy = DMatrix::zeros(n, n);
        let mut gz = DMatrix::zeros(n, n);
        for i in 0..n {
            let (a, b) = (grid.diff_at(y, i, Axis::X), grid.diff_at(y, i, Axis::Y));
            let mi = jet.value[i];
            let (terms, nt) = norm_terms(self.bp.norm, a, b);
            for t in &terms[..nt] {
                let (sg, sg1, _) = smooth_max_derivs(t.psi - mi * mi, self.bp.eps_smooth);
                add_node_outer(&mut gy, grid, i, t.grad, t.grad, 0.5 * sg1);
                add_node_quadratic(&mut gy, grid, i, t.hess, 0.5 * sg);
                // bound dependence: ds = grad_psi . D_i dy - 2 M dM
                let col = node_adjoint(grid, i, t.grad);
                for &(r, v) in &col {
                    gy[(r, i)] -= 0.5 * sg1 * v * 2.0 * mi * jet.dw[i];
                    for &(c, dz) in &jet.dz[i] {
                        gz[(r, c)] -= 0.5 * sg1 * v * 2.0 * mi * dz;
                    }
                }
            }
        }
        Ok((gy, gz))
    }
}

/// Integrates `y' = f - gamma G(y, y0)`, `y(0) = y0`, with rates `f[j - 1]` on
/// step `j`.
pub fn forward_smoothed(
    pen: &SmoothedPenalty,
    y0: &Field,
    f: &[Field],
    tg: &TimeGrid,
    gamma: f64,
    scheme: Scheme,
) -> Result<Trajectory> {
    let grid = pen.grid();
    grid.check("y0", y0)?;
    check_len("rates", tg.steps(), f.len())?;
    for fj in f {
        grid.check("f", fj)?;
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "gamma",
            reason: format!("must be positive, got {gamma}"),
        });
    }
    let tau = tg.tau();
    let budget = 1.0 + y0.amax() + tau * f.iter().map(|v| v.amax()).sum::<f64>();
    let mut states = Vec::with_capacity(tg.steps() + 1);
    states.push(y0.clone());
    for (j, fj) in f.iter().enumerate() {
        let prev = &states[j];
        let next = match scheme {
            Scheme::Explicit => prev + (fj - pen.value(prev, y0)? * gamma) * tau,
            Scheme::SemiImplicit => implicit_step(pen, prev, y0, fj, tau, gamma, j + 1)?,
        };
        let size = next.amax();
        if !size.is_finite() || size > 1e6 * budget {
            return Err(Error::Unstable { step: j + 1, norm: size });
        }
        states.push(next);
    }
    Ok(Trajectory {
        states,
        timegrid: *tg,
        origin: Origin::Smoothed { scheme, gamma },
    })
}

fn implicit_step(
    pen: &SmoothedPenalty,
    prev: &Field,
    y0: &Field,
    fj: &Field,
    tau: f64,
    gamma: f64,
    step: usize,
) -> Result<Field> {
    let rhs = prev + fj * tau;
    let k = tau * gamma;
    // The bound drops where material leaves a steep support, which can fold
    // the residual map; try other starting points, then walk the penalty
    // weight up from zero.
    let predictor = &rhs - pen.value(prev, y0)? * k;
    for start in [rhs.clone(), prev.clone(), predictor] {
        if let Ok(y) = newton_solve(pen, &rhs, y0, k, start) {
            return Ok(y);
        }
    }
    let mut y = rhs.clone();
    let mut s: f64 = 0.0;
    let mut ds = 0.125;
    while s < 1.0 {
        let next = (s + ds).min(1.0);
        match newton_solve(pen, &rhs, y0, k * next, y.clone()) {
            Ok(v) => {
                y = v;
                s = next;
                ds *= 2.0;
            }
            Err(rn) if ds < 1e-6 => return Err(Error::NewtonFailed { step, residual: rn }),
            Err(_) => ds *= 0.5,
        }
    }
    Ok(y)
}

/// Damped Newton for `y + k G(y, y0) = rhs`; on failure returns the final
/// residual norm.
fn newton_solve(pen: &SmoothedPenalty, rhs: &Field, y0: &Field, k: f64, start: Field) -> std::result::Result<Field, f64> {
    let resid = |y: &Field| -> std::result::Result<Field, f64> {
        pen.value(y, y0).map(|g| y - rhs + g * k).map_err(|_| f64::INFINITY)
    };
    let mut y = start;
    let mut r = resid(&y)?;
    let n = y.len();
    for _ in 0..100 {
        if r.amax() <= 1e-14 * (1.0 + y.amax()) {
            return Ok(y);
        }
        let (gy, _) = pen.jacobians(&y, y0).map_err(|_| f64::INFINITY)?;
        let a = DMatrix::identity(n, n) + gy * k;
        let Some(d) = a.lu().solve(&r) else {
            break;
        };
        let merit = r.norm();
        let mut t = 1.0;
        let mut improved = false;
        while t > 1e-10 {
            let cand = &y - &d * t;
            let rc = resid(&cand)?;
            if rc.norm() < merit {
                y = cand;
                r = rc;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    let rn = r.amax();
    // Rounding floor of the residual evaluation.
    if rn <= 1e-11 * (1.0 + y.amax()) {
        Ok(y)
    } else {
        Err(rn)
    }
}

/// Piecewise-linear interpolation of the states at time `t`.
pub fn broken_line(traj: &Trajectory, t: f64) -> Result<Field> {
    let (j, s) = locate(traj, t)?;
    if s == 0.0 {
        return Ok(traj.states[j].clone());
    }
    Ok(&traj.states[j] * (1.0 - s) + &traj.states[j + 1] * s)
}

/// Piecewise-constant extension `y(t) = y_j` on `[t_{j-1}, t_j)`, `y(T) = y_M`.
pub fn broken_line_constant(traj: &Trajectory, t: f64) -> Result<Field> {
    let (j, _) = locate(traj, t)?;
    let m = traj.timegrid.steps();
    Ok(traj.states[(j + 1).min(m)].clone())
}

/// Interval index `j` with `t in [t_j, t_{j+1})` and the local coordinate.
fn locate(traj: &Trajectory, t: f64) -> Result<(usize, f64)> {
    let tg = &traj.timegrid;
    if !(0.0..=tg.horizon()).contains(&t) {
        return Err(Error::InvalidParameter {
            name: "t",
            reason: format!("{t} outside [0, {}]", tg.horizon()),
        });
    }
    let m = tg.steps();
    if t >= tg.horizon() {
        return Ok((m, 0.0));
    }
    let j = ((t / tg.tau()).floor() as usize).min(m - 1);
    Ok((j, (t - tg.t(j)) / tg.tau()))
}

/// Scaling factor `1 / (1 + |Mn - M*|_inf / alpha)` that maps slopes bounded
/// by `M*` into slopes bounded by `Mn` whenever `Mn >= alpha`.
pub fn mosco_beta(mn: &Field, mstar: &Field, alpha: f64) -> Result<f64> {
    check_len("M*", mn.len(), mstar.len())?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter {
            name: "alpha",
            reason: format!("must be positive, got {alpha}"),
        });
    }
    Ok(1.0 / (1.0 + (mn - mstar).amax() / alpha))
}

/// `min_v <(y - y_prev)/tau - f, v - y>` over the supplied test vectors.
pub fn step_vi_residual(y_prev: &Field, y: &Field, f_j: &Field, tau: f64, tests: &[Field]) -> f64 {
    let vel = (y - y_prev) / tau - f_j;
    tests
        .iter()
        .map(|v| vel.dot(&(v - y)))
        .fold(f64::INFINITY, f64::min)
}

/// Random points of `{v : |Dv_i| <= M_i}`: convex combinations of a shrunk
/// copy of `anchor` and a scaled random field.
pub fn sample_feasible<R: Rng>(
    grid: &Grid,
    bound: &Field,
    norm: Norm,
    anchor: &Field,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Field>> {
    grid.check("anchor", anchor)?;
    check_len("M", grid.n(), bound.len())?;
    let shrink = |v: &Field| -> Result<Field> {
        let (d1, d2) = grid.gradient(v)?;
        let ratio = (0..grid.n())
            .map(|i| norm.eval(d1[i], d2[i]) / bound[i])
            .fold(0.0, f64::max);
        Ok(if ratio > 1.0 { v / ratio } else { v.clone() })
    };
    let base = shrink(anchor)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u = Field::from_fn(grid.n(), |_, _| rng.gen_range(-1.0..1.0));
        u = shrink(&(u * 10.0))? * rng.gen_range(0.0..1.0);
        let t: f64 = rng.gen_range(0.0..1.0);
        out.push(&base * t + u * (1.0 - t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn opts() -> SolveOptions {
        SolveOptions::default()
    }

    #[test]
    fn timegrid_basics() {
        let tg = TimeGrid::new(1.0, 3).unwrap();
        assert!((tg.tau() * 3.0 - 1.0).abs() < 1e-15);
        assert_eq!(tg.t(3), 1.0);
        assert!(TimeGrid::new(1.0, 0).is_err());
        assert!(TimeGrid::new(-1.0, 2).is_err());
    }

    #[test]
    fn options_validation() {
        let mut o = opts();
        o.gamma_schedule = vec![1.0, 1.0];
        assert!(o.validate().is_err());
        let mut o = opts();
        o.damping = 0.0;
        assert!(o.validate().is_err());
        assert!(opts().validate().is_ok());
    }

    #[test]
    fn feasible_target_is_returned() {
        let g = Grid::new(3, 3).unwrap();
        let r = Field::from_fn(9, |i, _| 0.01 * i as f64);
        let sol = solve_vi_frozen(&g, &r, &Field::from_element(9, 1.0), Norm::L2, &opts()).unwrap();
        assert_eq!(sol.y, r);
    }

    #[test]
    fn single_node_projection() {
        let g = Grid::line(1).unwrap();
        let sol = solve_vi_frozen(&g, &Field::from_element(1, 2.0), &Field::from_element(1, 1.0), Norm::L2, &opts()).unwrap();
        assert!((sol.y[0] - 0.5).abs() <= 1e-6, "{}", sol.y[0]);
        assert!(sol.violations.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn negative_bound_rejected() {
        let g = Grid::line(2).unwrap();
        let r = g.zeros();
        assert!(solve_vi_frozen(&g, &r, &Field::from_element(2, -1.0), Norm::L2, &opts()).is_err());
    }

    #[test]
    fn newton_energy_decreases() {
        let g = Grid::new(4, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = Field::from_fn(16, |_, _| rng.gen_range(-1.0..1.0));
        let m = Field::from_element(16, 0.5);
        let sol = solve_vi_frozen(&g, &r, &m, Norm::L2, &opts()).unwrap();
        for stage in &sol.energies {
            assert!(stage.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn stationary_step() {
        let g = Grid::new(3, 3).unwrap();
        let bp = BoundParams::new(1.0, 0.1, 0.01, Norm::L2).unwrap();
        let y = Field::from_fn(9, |i, _| 0.02 * (i % 3) as f64);
        let rep = qvi_step(&g, &y, &g.zeros(), &g.zeros(), 0.1, &bp, &opts()).unwrap();
        assert_eq!(rep.picard_iterations, 1);
        assert_eq!(rep.y, y);
    }

    #[test]
    fn above_band_matches_frozen_alpha() {
        let g = Grid::new(3, 3).unwrap();
        let bp = BoundParams::new(1.0, 0.05, 0.01, Norm::L2).unwrap();
        let y0 = g.zeros();
        let y_prev = Field::from_element(9, 1.0);
        let f = Field::from_fn(9, |i, _| if i == 4 { 20.0 } else { 0.0 });
        let rep = qvi_step(&g, &y_prev, &y0, &f, 0.1, &bp, &opts()).unwrap();
        let frozen = solve_vi_frozen(&g, &(&y_prev + &f * 0.1), &Field::from_element(9, 1.0), Norm::L2, &opts()).unwrap();
        assert!((rep.y - frozen.y).amax() < 1e-10);
    }

    #[test]
    fn rate_averages() {
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let src = PulseSource {
            rate: Field::from_element(2, 2.0),
            start: 0.0,
            stop: 0.375,
        };
        let f = discretize_rate(&src, &tg);
        assert!((f[0][0] - 2.0).abs() < 1e-14);
        assert!((f[1][0] - 1.0).abs() < 1e-14);
        assert_eq!(f[2][0], 0.0);
    }

    fn line_model() -> SmoothedPenalty {
        SmoothedPenalty::new(Grid::new(3, 3).unwrap(), BoundParams::new(1.0, 0.1, 0.01, Norm::L2).unwrap()).unwrap()
    }

    #[test]
    fn smoothed_equilibrium() {
        let pen = line_model();
        let tg = TimeGrid::new(1.0, 5).unwrap();
        let y0 = pen.grid().zeros();
        let f = vec![pen.grid().zeros(); 5];
        for scheme in [Scheme::Explicit, Scheme::SemiImplicit] {
            let tr = forward_smoothed(&pen, &y0, &f, &tg, 10.0, scheme).unwrap();
            assert!(tr.states.iter().all(|s| s.amax() == 0.0));
        }
    }

    #[test]
    fn smoothed_linear_integration() {
        let pen = SmoothedPenalty::new(Grid::line(1).unwrap(), BoundParams::new(1.0, 0.1, 1e-3, Norm::L2).unwrap()).unwrap();
        let tg = TimeGrid::new(1.0, 4).unwrap();
        let f: Vec<Field> = (0..4).map(|j| Field::from_element(1, 0.01 * (j + 1) as f64)).collect();
        let tr = forward_smoothed(&pen, &Field::zeros(1), &f, &tg, 1.0, Scheme::Explicit).unwrap();
        let expect = 0.25 * (0.01 + 0.02 + 0.03 + 0.04);
        // the smoothed max leaves an O(eps^2) drift on the inactive constraint
        assert!((tr.final_state()[0] - expect).abs() < 1e-6);
    }

    #[test]
    fn smoothed_jacobians_match_differences() {
        let g = Grid::new(3, 3).unwrap();
        let bp = BoundParams::new(0.7, 0.3, 0.05, Norm::L2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for norm in [Norm::L2, Norm::Inf, Norm::P(3.0)] {
            let pen = SmoothedPenalty::new(g.clone(), bp.with_norm(norm)).unwrap();
            let y0 = Field::from_fn(9, |_, _| rng.gen_range(-0.3..0.3));
            let y = Field::from_fn(9, |i, _| y0[i] + rng.gen_range(0.0..0.4));
            let (gy, gz) = pen.jacobians(&y, &y0).unwrap();
            let h = 1e-6;
            for c in 0..9 {
                let mut e = g.zeros();
                e[c] = h;
                let fy = (pen.value(&(&y + &e), &y0).unwrap() - pen.value(&(&y - &e), &y0).unwrap()) / (2.0 * h);
                let fz = (pen.value(&y, &(&y0 + &e)).unwrap() - pen.value(&y, &(&y0 - &e)).unwrap()) / (2.0 * h);
                for r in 0..9 {
                    assert!((fy[r] - gy[(r, c)]).abs() <= 1e-5 * (1.0 + fy[r].abs()), "{norm:?} gy");
                    assert!((fz[r] - gz[(r, c)]).abs() <= 1e-5 * (1.0 + fz[r].abs()), "{norm:?} gz");
                }
            }
        }
    }

    #[test]
    fn explicit_blow_up_detected() {
        let pen = line_model();
        let tg = TimeGrid::new(1.0, 10).unwrap();
        let y0 = pen.grid().zeros();
        let f = vec![Field::from_fn(9, |i, _| if i == 4 { 10.0 } else { 0.0 }); 10];
        let err = forward_smoothed(&pen, &y0, &f, &tg, 1e4, Scheme::Explicit).unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
        assert!(forward_smoothed(&pen, &y0, &f, &tg, 1e4, Scheme::SemiImplicit).is_ok());
    }

    fn ramp_traj() -> Trajectory {
        Trajectory {
            states: (0..=4).map(|j| Field::from_element(2, j as f64)).collect(),
            timegrid: TimeGrid::new(2.0, 4).unwrap(),
            origin: Origin::Sweeping,
        }
    }

    #[test]
    fn broken_line_samplers() {
        let tr = ramp_traj();
        assert_eq!(broken_line(&tr, 1.0).unwrap()[0], 2.0);
        assert_eq!(broken_line(&tr, 0.25).unwrap()[0], 0.5);
        assert_eq!(broken_line(&tr, 2.0).unwrap()[0], 4.0);
        assert!(broken_line(&tr, 2.1).is_err());
        assert_eq!(broken_line_constant(&tr, 0.0).unwrap()[0], 1.0);
        assert_eq!(broken_line_constant(&tr, 0.6).unwrap()[0], 2.0);
        assert_eq!(broken_line_constant(&tr, 2.0).unwrap()[0], 4.0);
    }

    #[test]
    fn beta_examples() {
        let a = Field::from_element(3, 1.5);
        assert_eq!(mosco_beta(&a, &a, 1.0).unwrap(), 1.0);
        let b = a.add_scalar(2.0);
        assert_eq!(mosco_beta(&b, &a, 2.0).unwrap(), 0.5);
        assert!(mosco_beta(&a, &a, 0.0).is_err());
    }

    #[test]
    fn feasible_samples_are_feasible() {
        let g = Grid::new(4, 4).unwrap();
        let m = Field::from_element(16, 0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let anchor = Field::from_fn(16, |i, _| i as f64);
        for v in sample_feasible(&g, &m, Norm::L2, &anchor, 50, &mut rng).unwrap() {
            assert!(violation(&g, &v, &m, Norm::L2).unwrap() <= 1e-12);
        }
    }
}
