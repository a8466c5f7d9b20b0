//! Picard iteration for the nonlinear system over time windows.
//!
//! A window of `N` implicit steps is solved as a fixed point of the map `S`: given a
//! guessed trajectory, evaluate the right-hand sides along it and march the linear
//! system. The Lagrangian labels are those of the initial instant for the whole run,
//! so one [`FlowHistory`] is carried across windows. In local mode the coefficients are
//! re-frozen at the data of each window start; in global mode they stay at the
//! constant state.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closure::ClosureParams;
use crate::diagnostics::{closure_monitor, eulerian_mass, xnorm, ClosureMonitor, Trajectory};
use crate::error::{Error, Result};
use crate::grid::{integrate, DiffOps, Location, ScalarField, VectorField};
use crate::lagrangian::{rhs_global, rhs_local, FlowHistory, RhsBundle, SimState, DEFAULT_DELTA};
use crate::linear_core::{eliminate_density, linear_step, EllipticOperator, LinState, LinearCoeffs, DEFAULT_LAMBDA0, MIN_TOTAL_DENSITY};

/// Ratio below which a window's last two contraction ratios must fall.
pub const ACCEPT_RATIO: f64 = 0.9;
/// Consecutive non-contracting iterations tolerated before giving up.
pub const MAX_NON_CONTRACTING: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub window_t: f64,
    pub dt: f64,
    pub max_iter: usize,
    /// fixed-point tolerance on the discrete solution norm of successive differences
    pub tol: f64,
    pub ball_m: f64,
    pub delta: f64,
    pub p: f64,
    pub q: f64,
    pub lambda0: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self { window_t: 0.1, dt: 1e-2, max_iter: 50, tol: 1e-10, ball_m: 1.0, delta: DEFAULT_DELTA, p: 2.0, q: 2.0, lambda0: DEFAULT_LAMBDA0 }
    }
}

impl PicardConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("window_T", self.window_t), ("dt", self.dt), ("tol", self.tol), ("ball_M", self.ball_m), ("delta", self.delta), ("lambda0", self.lambda0)];
        for (name, v) in pos {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be positive".into()));
        }
        if self.tol >= self.ball_m {
            return Err(Error::Parameter(format!("tol = {} must be below ball_M = {}", self.tol, self.ball_m)));
        }
        if self.dt > self.window_t * (1.0 + 1e-12) {
            return Err(Error::Parameter(format!("dt = {} exceeds window_T = {}", self.dt, self.window_t)));
        }
        for (name, v) in [("p", self.p), ("q", self.q)] {
            if !(v > 1.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must lie in (1, inf), got {v}")));
            }
        }
        Ok(())
    }

    /// Whether `(p, q)` also satisfy the exponent condition of the existence theory.
    pub fn exponents_admissible(&self) -> bool {
        2.0 / self.p + 3.0 / self.q < 1.0
    }

    fn steps_per_window(&self) -> usize {
        ((self.window_t / self.dt).round() as usize).max(1)
    }
}

/// Per-window record of the fixed-point iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub window: usize,
    pub t_start: f64,
    /// `|V_{k+1} - V_k|` for `k = 0, 1, ...`
    pub diffs: Vec<f64>,
    /// `diffs[k] / diffs[k-1]`, present from the second difference on
    pub ratios: Vec<f64>,
    /// per-iteration flag: ratio below [`ACCEPT_RATIO`] (always true for the first)
    pub accepted: Vec<bool>,
    pub converged: bool,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.diffs.len()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for (k, d) in self.diffs.iter().enumerate() {
            let ratio = if k == 0 { String::new() } else { format!("{:.16e}", self.ratios[k - 1]) };
            s.push_str(&format!("{},{:.16e},{},{:.16e},{},{}\n", self.window, self.t_start, k + 1, d, ratio, self.accepted[k]));
        }
        s
    }

    pub const CSV_HEADER: &'static str = "window,t_start,iteration,diff,ratio,accepted\n";
}

/// Which linearization drives the iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Linearization {
    /// coefficients frozen at each window's initial data
    Local,
    /// coefficients of the constant state `(r*, q*)`
    Global { r_star: f64, q_star: f64 },
}

/// Everything needed to resume a run at a window boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub window: usize,
    pub time: f64,
    pub state: SimState,
    pub history: FlowHistory,
    /// linearized energy of the initial perturbation (global mode)
    pub energy0: f64,
}

fn check_positive(state: &SimState) -> Result<()> {
    for (c, (r, q)) in state.r.values.iter().zip(&state.q.values).enumerate() {
        if !(*r >= 0.0 && *q >= 0.0 && r + q >= MIN_TOTAL_DENSITY) {
            return Err(Error::Invariant(format!("density positivity lost at cell {c}: r = {r}, q = {q}")));
        }
    }
    Ok(())
}

fn lin_to_abs(coeffs: &LinearCoeffs, s: &LinState) -> SimState {
    let add = |a: &[f64], b: &[f64]| ScalarField::new(Location::Cells, a.iter().zip(b).map(|(x, y)| x + y).collect());
    SimState { r: add(&coeffs.r0, &s.sigma.values), q: add(&coeffs.q0, &s.eta.values), v: s.v.clone() }
}

fn diff_traj(times: &[f64], a: &[LinState], b: &[LinState]) -> Trajectory {
    let sub = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p - q).collect() };
    let states = a
        .iter()
        .zip(b)
        .map(|(x, y)| LinState {
            sigma: ScalarField::new(Location::Cells, sub(&x.sigma.values, &y.sigma.values)),
            eta: ScalarField::new(Location::Cells, sub(&x.eta.values, &y.eta.values)),
            v: VectorField { dim: x.v.dim, values: sub(&x.v.values, &y.v.values), dirichlet: x.v.dirichlet },
        })
        .collect();
    Trajectory { times: times.to_vec(), states }
}

/// Fixed data of one window.
pub struct Window<'a> {
    pub ops: &'a DiffOps,
    pub params: &'a ClosureParams,
    pub cfg: &'a PicardConfig,
    pub coeffs: LinearCoeffs,
    pub op: EllipticOperator,
    pub base: FlowHistory,
    pub times: Vec<f64>,
    pub mode: Linearization,
}

impl<'a> Window<'a> {
    pub fn new(ops: &'a DiffOps, params: &'a ClosureParams, cfg: &'a PicardConfig, mode: Linearization, start: &Checkpoint, steps: usize) -> Result<Self> {
        cfg.validate()?;
        check_positive(&start.state)?;
        let coeffs = match mode {
            Linearization::Local => LinearCoeffs::around_initial(ops, &start.state.r, &start.state.q, params)?,
            Linearization::Global { r_star, q_star } => LinearCoeffs::around_constant(ops, r_star, q_star, params)?,
        };
        let op = eliminate_density(ops, &coeffs, params, cfg.dt, cfg.lambda0)?;
        let times = (0..=steps).map(|n| start.time + n as f64 * cfg.dt).collect();
        Ok(Self { ops, params, cfg, coeffs, op, base: start.history.clone(), times, mode })
    }

    /// Perturbation at the window start.
    pub fn initial(&self, start: &SimState) -> LinState {
        let sub = |a: &[f64], b: &[f64]| ScalarField::new(Location::Cells, a.iter().zip(b).map(|(x, y)| x - y).collect());
        LinState { sigma: sub(&start.r.values, &self.coeffs.r0), eta: sub(&start.q.values, &self.coeffs.q0), v: start.v.clone() }
    }

    /// Flow histories at every level of a trajectory.
    pub fn histories(&self, traj: &[LinState]) -> Result<Vec<FlowHistory>> {
        let mut out = Vec::with_capacity(traj.len());
        let mut h = self.base.clone();
        out.push(h.clone());
        for s in &traj[1..] {
            h.advance(self.ops, &s.v, self.cfg.dt)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Right-hand sides for the steps into levels `1..=N`, evaluated along `prev`.
    pub fn rhs_along(&self, prev: &[LinState]) -> Result<Vec<RhsBundle>> {
        let hist = self.histories(prev)?;
        let dt = self.cfg.dt;
        (1..prev.len())
            .into_par_iter()
            .map(|n| {
                let state = lin_to_abs(&self.coeffs, &prev[n]);
                check_positive(&state)?;
                let dtv = VectorField {
                    dim: prev[n].v.dim,
                    values: prev[n].v.values.iter().zip(&prev[n - 1].v.values).map(|(a, b)| (a - b) / dt).collect(),
                    dirichlet: false,
                };
                match self.mode {
                    Linearization::Local => rhs_local(self.ops, &state, &dtv, &hist[n], &self.coeffs, self.params),
                    Linearization::Global { .. } => rhs_global(self.ops, &state, &dtv, &hist[n], &self.coeffs, self.params),
                }
            })
            .collect()
    }

    /// The map `S`: march the linear system with right-hand sides taken from `prev`.
    /// Level 0 of the output is level 0 of `prev`.
    pub fn apply_s(&self, prev: &[LinState]) -> Result<Vec<LinState>> {
        if prev.len() != self.times.len() {
            return Err(Error::Shape(format!("trajectory has {} levels, window has {}", prev.len(), self.times.len())));
        }
        let rhs = self.rhs_along(prev)?;
        let mut out = Vec::with_capacity(prev.len());
        out.push(prev[0].clone());
        for f in &rhs {
            let next = linear_step(self.ops, &self.op, &self.coeffs, out.last().unwrap(), f)?;
            out.push(next);
        }
        Ok(out)
    }

    /// Discrete solution norm of the difference of two trajectories on this window.
    pub fn distance(&self, a: &[LinState], b: &[LinState]) -> Result<f64> {
        Ok(xnorm(self.ops, &diff_traj(&self.times, a, b), self.cfg.p, self.cfg.q)?.total)
    }

    /// Iterates `S` from the constant extension of the initial perturbation.
    pub fn iterate(&self, init: &LinState, index: usize) -> Result<(Vec<LinState>, IterationTrace)> {
        let mut cur = vec![init.clone(); self.times.len()];
        let mut trace = IterationTrace { window: index, t_start: self.times[0], diffs: vec![], ratios: vec![], accepted: vec![], converged: false };
        let mut bad = 0;
        for _ in 0..self.cfg.max_iter {
            let next = self.apply_s(&cur)?;
            let d = self.distance(&next, &cur)?;
            if let Some(&prev_d) = trace.diffs.last() {
                let ratio = if prev_d > 0.0 { d / prev_d } else { 0.0 };
                trace.ratios.push(ratio);
                trace.accepted.push(ratio < ACCEPT_RATIO);
                bad = if ratio >= 1.0 { bad + 1 } else { 0 };
            } else {
                trace.accepted.push(true);
            }
            trace.diffs.push(d);
            cur = next;
            if !d.is_finite() || bad >= MAX_NON_CONTRACTING {
                break;
            }
            if d <= self.cfg.tol {
                let n = trace.ratios.len();
                let tail_ok = n < 2 || trace.ratios[n - 2..].iter().all(|r| *r < ACCEPT_RATIO);
                if tail_ok {
                    trace.converged = true;
                    return Ok((cur, trace));
                }
                break;
            }
        }
        Err(Error::NonContraction { ratios: trace.ratios.clone(), suggested_window: 0.5 * self.cfg.window_t })
    }
}

/// Linearized energy of a perturbation around `(r*, q*)`: kinetic energy, the acoustic
/// part carried by `w1 sigma + w2 eta`, and the conserved mass-fraction part.
pub fn linear_energy(ops: &DiffOps, coeffs: &LinearCoeffs, s: &LinState) -> Result<f64> {
    let g = &ops.grid;
    let (rs, qs) = (coeffs.r0[0], coeffs.q0[0]);
    let (w1, w2) = (coeffs.w1[0], coeffs.w2[0]);
    let k = w1 * rs + w2 * qs;
    let rho = rs + qs;
    let acoustic = ScalarField::new(
        Location::Cells,
        s.sigma.values.iter().zip(&s.eta.values).map(|(a, b)| 0.5 * (w1 * a + w2 * b).powi(2) / k + 0.5 * (qs * a - rs * b).powi(2)).collect(),
    );
    let d = g.dim();
    let kin = ScalarField::new(Location::Nodes, (0..g.n_nodes()).map(|n| 0.5 * rho * (0..d).map(|j| s.v.values[n * d + j].powi(2)).sum::<f64>()).collect());
    Ok(integrate(g, &acoustic, None)? + integrate(g, &kin, None)?)
}

/// Output of a multi-window run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub times: Vec<f64>,
    pub states: Vec<SimState>,
    pub traces: Vec<IterationTrace>,
    /// `int_0^t |grad v|_inf` at every level
    pub budget: Vec<f64>,
    /// Eulerian masses `(int r J, int q J)` at every level
    pub masses: Vec<[f64; 2]>,
    pub closure: Option<ClosureMonitor>,
    /// time at which the perturbation energy exceeded four times its initial value
    pub blow_up: Option<f64>,
}

impl RunOutput {
    fn empty() -> Self {
        Self { times: vec![], states: vec![], traces: vec![], budget: vec![], masses: vec![], closure: None, blow_up: None }
    }

    /// Perturbation trajectory relative to cell densities `(r_ref, q_ref)`.
    pub fn trajectory(&self, r_ref: &[f64], q_ref: &[f64]) -> Trajectory {
        let sub = |a: &[f64], b: &[f64]| ScalarField::new(Location::Cells, a.iter().zip(b).map(|(x, y)| x - y).collect());
        Trajectory {
            times: self.times.clone(),
            states: self.states.iter().map(|s| LinState { sigma: sub(&s.r.values, r_ref), eta: sub(&s.q.values, q_ref), v: s.v.clone() }).collect(),
        }
    }

    pub fn max_mass_drift(&self) -> [f64; 2] {
        let m0 = self.masses[0];
        let mut out = [0.0f64; 2];
        for m in &self.masses {
            for c in 0..2 {
                let scale = m0[c].abs().max(f64::MIN_POSITIVE);
                out[c] = out[c].max((m[c] - m0[c]).abs() / scale);
            }
        }
        out
    }
}

/// Window-by-window driver.
pub struct Run<'a> {
    pub ops: &'a DiffOps,
    pub params: &'a ClosureParams,
    pub cfg: PicardConfig,
    pub mode: Linearization,
    pub horizon: f64,
    pub checkpoint: Checkpoint,
    pub output: RunOutput,
}

impl<'a> Run<'a> {
    pub fn new(ops: &'a DiffOps, params: &'a ClosureParams, cfg: PicardConfig, mode: Linearization, initial: SimState, horizon: f64) -> Result<Self> {
        cfg.validate()?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Parameter(format!("horizon must be positive, got {horizon}")));
        }
        initial.r.check(&ops.grid)?;
        initial.q.check(&ops.grid)?;
        initial.v.check(&ops.grid)?;
        let mut v = initial.v.clone();
        v.dirichlet = true;
        v.apply_dirichlet(&ops.grid);
        if v.values != initial.v.values {
            return Err(Error::Parameter("initial velocity must vanish on the boundary".into()));
        }
        let initial = SimState { v, ..initial };
        check_positive(&initial)?;
        let history = FlowHistory::new(ops, &initial.v, cfg.delta)?;
        let mut ck = Checkpoint { window: 0, time: 0.0, state: initial, history, energy0: 0.0 };
        if let Linearization::Global { r_star, q_star } = mode {
            let coeffs = LinearCoeffs::around_constant(ops, r_star, q_star, params)?;
            let w = Window { ops, params, cfg: &cfg, op: eliminate_density(ops, &coeffs, params, cfg.dt, cfg.lambda0)?, coeffs, base: ck.history.clone(), times: vec![0.0], mode };
            ck.energy0 = linear_energy(ops, &w.coeffs, &w.initial(&ck.state))?;
        }
        Self::resume(ops, params, cfg, mode, ck, horizon)
    }

    /// Continues from a checkpoint. The output starts with the checkpointed level.
    pub fn resume(ops: &'a DiffOps, params: &'a ClosureParams, cfg: PicardConfig, mode: Linearization, checkpoint: Checkpoint, horizon: f64) -> Result<Self> {
        cfg.validate()?;
        let mut run = Self { ops, params, cfg, mode, horizon, checkpoint, output: RunOutput::empty() };
        let ck = run.checkpoint.clone();
        run.record(&ck.state, ck.time, &ck.history)?;
        Ok(run)
    }

    fn record(&mut self, s: &SimState, t: f64, h: &FlowHistory) -> Result<()> {
        let g = &self.ops.grid;
        let jdet = h.jacobian_det_cells(g.dim());
        let m = closure_monitor(&s.r, &s.q, self.params)?;
        if !m.healthy() {
            return Err(Error::Invariant(format!("closure invariants violated at t = {t}: {m:?}")));
        }
        self.output.closure = Some(match self.output.closure {
            Some(prev) => prev.merge(&m),
            None => m,
        });
        self.output.masses.push([eulerian_mass(g, &s.r, &jdet)?, eulerian_mass(g, &s.q, &jdet)?]);
        self.output.budget.push(h.grad_budget);
        self.output.times.push(t);
        self.output.states.push(s.clone());
        Ok(())
    }

    pub fn done(&self) -> bool {
        self.checkpoint.time >= self.horizon - 1e-9 * self.cfg.dt || self.output.blow_up.is_some()
    }

    /// Solves the next window. Returns `false` once the horizon is reached.
    pub fn step_window(&mut self) -> Result<bool> {
        if self.done() {
            return Ok(false);
        }
        let remaining = self.horizon - self.checkpoint.time;
        let steps = self.cfg.steps_per_window().min(((remaining / self.cfg.dt).round() as usize).max(1));
        let cfg = self.cfg;
        let w = Window::new(self.ops, self.params, &cfg, self.mode, &self.checkpoint, steps)?;
        let init = w.initial(&self.checkpoint.state);
        let (traj, trace) = w.iterate(&init, self.checkpoint.window)?;
        let hist = w.histories(&traj)?;
        for n in 1..traj.len() {
            let s = lin_to_abs(&w.coeffs, &traj[n]);
            check_positive(&s)?;
            self.record(&s, w.times[n], &hist[n])?;
            if matches!(self.mode, Linearization::Global { .. }) {
                let e = linear_energy(self.ops, &w.coeffs, &traj[n])?;
                let e0 = self.checkpoint.energy0;
                if e > 4.0 * e0 && e.sqrt() > 1e-14 && self.output.blow_up.is_none() {
                    self.output.blow_up = Some(w.times[n]);
                }
            }
        }
        self.output.traces.push(trace);
        self.checkpoint = Checkpoint {
            window: self.checkpoint.window + 1,
            time: *w.times.last().unwrap(),
            state: lin_to_abs(&w.coeffs, traj.last().unwrap()),
            history: hist.last().unwrap().clone(),
            energy0: self.checkpoint.energy0,
        };
        Ok(!self.done())
    }

    pub fn run_to_end(mut self) -> Result<RunOutput> {
        while self.step_window()? {}
        Ok(self.output)
    }
}

/// Local solution on `[0, horizon]` with coefficients re-frozen per window.
pub fn solve_local(ops: &DiffOps, params: &ClosureParams, cfg: PicardConfig, initial: SimState, horizon: f64) -> Result<RunOutput> {
    Run::new(ops, params, cfg, Linearization::Local, initial, horizon)?.run_to_end()
}

/// Long-time continuation around the constant state `(r*, q*)`.
pub fn continue_global(ops: &DiffOps, params: &ClosureParams, cfg: PicardConfig, initial: SimState, r_star: f64, q_star: f64, horizon: f64) -> Result<RunOutput> {
    Run::new(ops, params, cfg, Linearization::Global { r_star, q_star }, initial, horizon)?.run_to_end()
}

/// Roots of `x^2 - x/C + eps = 0`, if real.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dichotomy {
    pub c: f64,
    pub eps: f64,
    pub x1: f64,
    pub x2: f64,
}

pub fn quadratic_roots(c: f64, eps: f64) -> Option<Dichotomy> {
    if !(c > 0.0) || !(eps >= 0.0) {
        return None;
    }
    let h = 0.5 / c;
    let disc = h * h - eps;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // the small root without cancellation
    let x1 = if eps == 0.0 { 0.0 } else { eps / (h + s) };
    Some(Dichotomy { c, eps, x1, x2: h + s })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use std::f64::consts::PI;

    fn params() -> ClosureParams {
        ClosureParams::new(3.0, 1.5, 1.0, 0.0).unwrap()
    }

    fn state(g: &Grid, r: impl Fn(f64) -> f64, q: impl Fn(f64) -> f64, v: impl Fn(f64) -> f64) -> SimState {
        SimState { r: g.sample(Location::Cells, |c| r(c[0])), q: g.sample(Location::Cells, |c| q(c[0])), v: g.sample_vector(true, |c| [v(c[0]), 0.0]) }
    }

    fn cfg(window: f64, dt: f64) -> PicardConfig {
        PicardConfig { window_t: window, dt, ..PicardConfig::default() }
    }

    #[test]
    fn config_validation() {
        assert!(PicardConfig::default().validate().is_ok());
        assert!(PicardConfig { tol: 2.0, ..PicardConfig::default() }.validate().is_err());
        assert!(PicardConfig { dt: 1.0, ..PicardConfig::default() }.validate().is_err());
        assert!(PicardConfig { p: 1.0, ..PicardConfig::default() }.validate().is_err());
        assert!(!PicardConfig::default().exponents_admissible());
        assert!(PicardConfig { p: 4.0, q: 8.0, ..PicardConfig::default() }.exponents_admissible());
    }

    #[test]
    fn constants_are_steady_in_one_iteration() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params();
        let out = solve_local(&ops, &p, cfg(0.1, 0.02), state(&g, |_| 1.0, |_| 1.0, |_| 0.0), 0.2).unwrap();
        assert_eq!(out.traces.len(), 2);
        for t in &out.traces {
            assert_eq!(t.iterations(), 1);
            assert_eq!(t.diffs[0], 0.0);
        }
        for s in &out.states {
            assert!(s.r.values.iter().all(|r| *r == 1.0));
            assert!(s.v.max_abs() == 0.0);
        }
        let gl = continue_global(&ops, &p, cfg(0.1, 0.02), state(&g, |_| 1.0, |_| 1.0, |_| 0.0), 1.0, 1.0, 0.5).unwrap();
        assert!(gl.blow_up.is_none());
        assert!(gl.states.iter().all(|s| s.v.max_abs() == 0.0));
    }

    #[test]
    fn zero_guess_with_density_gradient_matches_forced_linear_solve() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params();
        let c = cfg(0.04, 0.01);
        let init = state(&g, |x| 1.0 + 0.1 * x, |_| 1.0, |_| 0.0);
        let start = Checkpoint { window: 0, time: 0.0, history: FlowHistory::new(&ops, &init.v, c.delta).unwrap(), state: init, energy0: 0.0 };
        let w = Window::new(&ops, &p, &c, Linearization::Local, &start, 4).unwrap();
        let zero = vec![LinState::zeros(&ops); 5];
        let s = w.apply_s(&zero).unwrap();
        assert!(s.last().unwrap().v.max_abs() > 1e-4);
        // oracle: the only forcing is -(w1 grad r0 + w2 grad q0)
        let mut f3 = VectorField::zeros(&g, true);
        for node in g.interior_nodes() {
            f3.values[node] = -(w.coeffs.w1[node] * w.coeffs.grad_r0.values[node] + w.coeffs.w2[node] * w.coeffs.grad_q0.values[node]);
        }
        let rhs = RhsBundle { f3, ..RhsBundle::zeros(&ops, crate::lagrangian::RhsMode::AroundInitial) };
        let mut st = LinState::zeros(&ops);
        for n in 1..5 {
            st = linear_step(&ops, &w.op, &w.coeffs, &st, &rhs).unwrap();
            let diff = st.v.values.iter().zip(&s[n].v.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-13, "level {n}: {diff}");
        }
    }

    #[test]
    fn small_data_contracts_and_is_a_fixed_point() {
        let g = Grid::unit_interval(32).unwrap();
        let ops = DiffOps::new(&g);
        let p = params();
        let c = cfg(0.1, 0.01);
        let init = state(&g, |x| 1.0 + 0.01 * (PI * x).cos(), |_| 1.0, |x| 0.01 * (PI * x).sin());
        let start = Checkpoint { window: 0, time: 0.0, history: FlowHistory::new(&ops, &init.v, c.delta).unwrap(), state: init, energy0: 0.0 };
        let w = Window::new(&ops, &p, &c, Linearization::Local, &start, 10).unwrap();
        let v0 = w.initial(&start.state);
        let (traj, trace) = w.iterate(&v0, 0).unwrap();
        assert!(trace.converged);
        assert!(trace.ratios.iter().all(|r| *r < 0.5), "{:?}", trace.ratios);
        for s in &traj[..1] {
            assert_eq!(s, &v0);
        }
        let again = w.apply_s(&traj).unwrap();
        assert!(w.distance(&again, &traj).unwrap() <= 2.0 * c.tol);
    }

    #[test]
    fn budget_violation_aborts() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params();
        let c = PicardConfig { delta: 0.05, ..cfg(0.1, 0.01) };
        let err = solve_local(&ops, &p, c, state(&g, |_| 1.0, |_| 1.0, |x| 0.2 * (PI * x).sin()), 0.5).unwrap_err();
        assert!(matches!(err, Error::Smallness { .. }), "{err:?}");
        assert!(err.is_invariant_violation());
    }

    #[test]
    fn checkpoint_restart_matches() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params();
        let c = cfg(0.05, 0.01);
        let init = state(&g, |x| 1.0 + 0.01 * (PI * x).cos(), |_| 1.0, |_| 0.0);
        let full = solve_local(&ops, &p, c, init.clone(), 0.15).unwrap();
        let mut run = Run::new(&ops, &p, c, Linearization::Local, init, 0.15).unwrap();
        run.step_window().unwrap();
        let ck = run.checkpoint.clone();
        let resumed = Run::resume(&ops, &p, c, Linearization::Local, ck, 0.15).unwrap().run_to_end().unwrap();
        let a = full.states.last().unwrap();
        let b = resumed.states.last().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dichotomy_roots() {
        let d = quadratic_roots(2.0, 0.01).unwrap();
        for x in [d.x1, d.x2] {
            assert!((x * x - x / 2.0 + 0.01).abs() < 1e-15);
        }
        assert!(d.x1 < d.x2);
        assert!(quadratic_roots(2.0, 0.1).is_none());
        assert_eq!(quadratic_roots(1.0, 0.0).unwrap().x1, 0.0);
    }
}
