//! Discrete solution norms, monitors and decay fitting.
//!
//! Spatial norms use the grid quadrature (trapezoid on nodes, midpoint on cells) applied
//! to difference quotients. Time integrals use the trapezoid rule over the stored
//! snapshots and time derivatives are second-order finite differences (one-sided at the
//! ends). Norm components are combined in `l^p`, so for `p = 2` the squared norm is the
//! sum of the squared components.

use serde::{Deserialize, Serialize};

use crate::closure::{recover_phases, solve_z, ClosureParams};
use crate::error::{Error, Result};
use crate::grid::{DiffOps, Grid, Location, ScalarField, VectorField};
use crate::linear_core::LinState;

/// Time series of perturbation states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<LinState>,
}

impl Trajectory {
    pub fn new(t0: f64, s0: LinState) -> Self {
        Self { times: vec![t0], states: vec![s0] }
    }

    pub fn push(&mut self, t: f64, s: LinState) {
        self.times.push(t);
        self.states.push(s);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> &LinState {
        self.states.last().expect("trajectory is never empty")
    }
}

fn check_exponent(name: &str, p: f64) -> Result<()> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Parameter(format!("{name} must lie in (1, inf), got {p}")));
    }
    Ok(())
}

fn lq_sum(w: &[f64], vals: impl Fn(usize) -> f64, per_point: usize, q: f64) -> f64 {
    let mut s = 0.0;
    for (i, wi) in w.iter().enumerate() {
        let mut acc = 0.0;
        for c in 0..per_point {
            acc += vals(i * per_point + c).abs().powf(q);
        }
        s += wi * acc;
    }
    s
}

/// `|v|_q^q + |grad v|_q^q + |grad^2 v|_q^q` (the q-th power of the W^{2,q} norm).
fn w2q_pow(ops: &DiffOps, v: &VectorField, q: f64) -> Result<f64> {
    let g = &ops.grid;
    let d = g.dim();
    let w = g.weights(Location::Nodes);
    let jac = ops.jacobian_nodes(v)?;
    let hess = ops.hessian_nodes(v)?;
    let s0 = lq_sum(&w, |i| v.values[i], d, q);
    let s1 = lq_sum(&w, |i| jac[i / (d * d)][((i % (d * d)) / d, i % d)], d * d, q);
    let s2 = lq_sum(&w, |i| {
        let node = i / (d * d * d);
        let r = i % (d * d * d);
        hess[node][r / (d * d)][((r % (d * d)) / d, r % d)]
    }, d * d * d, q);
    Ok(s0 + s1 + s2)
}

fn lq_pow_vec(grid: &Grid, v: &VectorField, q: f64) -> f64 {
    lq_sum(&grid.weights(Location::Nodes), |i| v.values[i], grid.dim(), q)
}

/// `|grad s|_q^q` for a cell field, gradient at nodes.
fn grad_pow_cells(ops: &DiffOps, s: &ScalarField, q: f64) -> Result<f64> {
    let gs = ops.grad(s)?;
    Ok(lq_pow_vec(&ops.grid, &gs, q))
}

fn lq_pow_cells(grid: &Grid, s: &ScalarField, q: f64) -> f64 {
    lq_sum(&grid.weights(Location::Cells), |i| s.values[i], 1, q)
}

/// W^{1,q} norm of a velocity field.
pub fn w1q_velocity(ops: &DiffOps, v: &VectorField, q: f64) -> Result<f64> {
    let g = &ops.grid;
    let d = g.dim();
    let w = g.weights(Location::Nodes);
    let jac = ops.jacobian_nodes(v)?;
    let s0 = lq_sum(&w, |i| v.values[i], d, q);
    let s1 = lq_sum(&w, |i| jac[i / (d * d)][((i % (d * d)) / d, i % d)], d * d, q);
    Ok((s0 + s1).powf(1.0 / q))
}

/// W^{2,q} norm of a velocity field.
pub fn w2q_velocity(ops: &DiffOps, v: &VectorField, q: f64) -> Result<f64> {
    Ok(w2q_pow(ops, v, q)?.powf(1.0 / q))
}

/// Finite-difference time derivative of the snapshot at index `i`: central for
/// interior indices, three-point one-sided at the ends, two-point with two snapshots.
fn time_derivative_weights(times: &[f64], i: usize) -> Vec<(usize, f64)> {
    let n = times.len();
    if n == 2 {
        let h = times[1] - times[0];
        return vec![(0, -1.0 / h), (1, 1.0 / h)];
    }
    let idx = if i == 0 { [0, 1, 2] } else if i == n - 1 { [n - 3, n - 2, n - 1] } else { [i - 1, i, i + 1] };
    let t = times[i];
    let x: Vec<f64> = idx.iter().map(|&k| times[k]).collect();
    // derivative of the Lagrange basis at t
    (0..3)
        .map(|a| {
            let mut s = 0.0;
            for b in 0..3 {
                if b == a {
                    continue;
                }
                let mut prod = 1.0 / (x[a] - x[b]);
                for c in 0..3 {
                    if c != a && c != b {
                        prod *= (t - x[c]) / (x[a] - x[c]);
                    }
                }
                s += prod;
            }
            (idx[a], s)
        })
        .collect()
}

fn combine<T>(w: &[(usize, f64)], f: impl Fn(usize) -> T, zero: T, axpy: impl Fn(&mut T, f64, &T)) -> T {
    let mut out = zero;
    for &(k, c) in w {
        axpy(&mut out, c, &f(k));
    }
    out
}

fn axpy_vec(out: &mut Vec<f64>, c: f64, x: &Vec<f64>) {
    for (o, xi) in out.iter_mut().zip(x) {
        *o += c * xi;
    }
}

/// Time derivatives of `(sigma, eta, v)` at snapshot `i`.
pub fn state_time_derivative(traj: &Trajectory, i: usize) -> LinState {
    let w = time_derivative_weights(&traj.times, i);
    let s0 = &traj.states[0];
    let sig = combine(&w, |k| traj.states[k].sigma.values.clone(), vec![0.0; s0.sigma.values.len()], axpy_vec);
    let eta = combine(&w, |k| traj.states[k].eta.values.clone(), vec![0.0; s0.eta.values.len()], axpy_vec);
    let v = combine(&w, |k| traj.states[k].v.values.clone(), vec![0.0; s0.v.values.len()], axpy_vec);
    LinState {
        sigma: ScalarField::new(Location::Cells, sig),
        eta: ScalarField::new(Location::Cells, eta),
        v: VectorField { dim: s0.v.dim, values: v, dirichlet: s0.v.dirichlet },
    }
}

fn time_lp(times: &[f64], vals: &[f64], p: f64) -> f64 {
    let mut s = 0.0;
    for i in 1..times.len() {
        s += 0.5 * (times[i] - times[i - 1]) * (vals[i - 1].powf(p) + vals[i].powf(p));
    }
    s.powf(1.0 / p)
}

/// Components of the solution norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XNorm {
    pub v_lp_w2q: f64,
    pub vt_lp_lq: f64,
    pub dens_w1p_w1q: f64,
    pub total: f64,
}

/// Components of the seminorm used for decay statements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XDotNorm {
    pub v_lp_w2q: f64,
    pub vt_lp_lq: f64,
    pub grad_dens_lp_lq: f64,
    pub dt_dens_lp_w1q: f64,
    pub total: f64,
}

/// Per-snapshot spatial quantities from which both norms are built.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotNorms {
    pub v_w2q: Vec<f64>,
    pub vt_lq: Vec<f64>,
    pub dens_w1q: Vec<f64>,
    pub dt_dens_w1q: Vec<f64>,
    pub grad_dens_lq: Vec<f64>,
}

pub fn snapshot_norms(ops: &DiffOps, traj: &Trajectory, q: f64) -> Result<SnapshotNorms> {
    check_exponent("q", q)?;
    if traj.len() < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 snapshots, got {}", traj.len())));
    }
    let g = &ops.grid;
    let n = traj.len();
    let mut out = SnapshotNorms {
        v_w2q: Vec::with_capacity(n),
        vt_lq: Vec::with_capacity(n),
        dens_w1q: Vec::with_capacity(n),
        dt_dens_w1q: Vec::with_capacity(n),
        grad_dens_lq: Vec::with_capacity(n),
    };
    for i in 0..n {
        let s = &traj.states[i];
        let ds = state_time_derivative(traj, i);
        out.v_w2q.push(w2q_pow(ops, &s.v, q)?.powf(1.0 / q));
        out.vt_lq.push(lq_pow_vec(g, &ds.v, q).powf(1.0 / q));
        let grad = grad_pow_cells(ops, &s.sigma, q)? + grad_pow_cells(ops, &s.eta, q)?;
        let lqd = lq_pow_cells(g, &s.sigma, q) + lq_pow_cells(g, &s.eta, q);
        out.grad_dens_lq.push(grad.powf(1.0 / q));
        out.dens_w1q.push((grad + lqd).powf(1.0 / q));
        let dgrad = grad_pow_cells(ops, &ds.sigma, q)? + grad_pow_cells(ops, &ds.eta, q)?;
        let dlq = lq_pow_cells(g, &ds.sigma, q) + lq_pow_cells(g, &ds.eta, q);
        out.dt_dens_w1q.push((dgrad + dlq).powf(1.0 / q));
    }
    Ok(out)
}

/// Discrete solution norm over the whole trajectory.
pub fn xnorm(ops: &DiffOps, traj: &Trajectory, p: f64, q: f64) -> Result<XNorm> {
    check_exponent("p", p)?;
    let s = snapshot_norms(ops, traj, q)?;
    let t = &traj.times;
    let v_lp_w2q = time_lp(t, &s.v_w2q, p);
    let vt_lp_lq = time_lp(t, &s.vt_lq, p);
    // W^{1,p} in time: the function and its time derivative, both in W^{1,q}
    let dens = (time_lp(t, &s.dens_w1q, p).powf(p) + time_lp(t, &s.dt_dens_w1q, p).powf(p)).powf(1.0 / p);
    let total = (v_lp_w2q.powf(p) + vt_lp_lq.powf(p) + dens.powf(p)).powf(1.0 / p);
    Ok(XNorm { v_lp_w2q, vt_lp_lq, dens_w1p_w1q: dens, total })
}

/// Seminorm over the trajectory, optionally weighted by `exp(beta t)`.
pub fn xdot_norm(ops: &DiffOps, traj: &Trajectory, p: f64, q: f64, beta: f64) -> Result<XDotNorm> {
    check_exponent("p", p)?;
    let s = snapshot_norms(ops, traj, q)?;
    let t = &traj.times;
    let wgt = |v: &[f64]| -> Vec<f64> { v.iter().zip(t).map(|(x, ti)| x * (beta * ti).exp()).collect() };
    let v_lp_w2q = time_lp(t, &wgt(&s.v_w2q), p);
    let vt_lp_lq = time_lp(t, &wgt(&s.vt_lq), p);
    let grad_dens_lp_lq = time_lp(t, &wgt(&s.grad_dens_lq), p);
    let dt_dens_lp_w1q = time_lp(t, &wgt(&s.dt_dens_w1q), p);
    let total = (v_lp_w2q.powf(p) + vt_lp_lq.powf(p) + grad_dens_lp_lq.powf(p) + dt_dens_lp_w1q.powf(p)).powf(1.0 / p);
    Ok(XDotNorm { v_lp_w2q, vt_lp_lq, grad_dens_lp_lq, dt_dens_lp_w1q, total })
}

/// Instantaneous seminorm density at every snapshot.
pub fn xdot_density(ops: &DiffOps, traj: &Trajectory, p: f64, q: f64) -> Result<Vec<f64>> {
    let s = snapshot_norms(ops, traj, q)?;
    Ok((0..traj.len())
        .map(|i| (s.v_w2q[i].powf(p) + s.vt_lq[i].powf(p) + s.grad_dens_lq[i].powf(p) + s.dt_dens_w1q[i].powf(p)).powf(1.0 / p))
        .collect())
}

/// Interpolation-style stand-in for the initial-velocity trace norm:
/// `max(|v|_{W1q}, |v|_{W1q}^{2/p} |v|_{W2q}^{1-2/p})`.
pub fn besov_proxy(ops: &DiffOps, v: &VectorField, p: f64, q: f64) -> Result<f64> {
    check_exponent("p", p)?;
    check_exponent("q", q)?;
    let a = w1q_velocity(ops, v, q)?;
    let b = w2q_velocity(ops, v, q)?;
    let theta = (2.0 / p).min(1.0);
    Ok(a.max(a.powf(theta) * b.powf(1.0 - theta)))
}

/// `T^{1/p'} |v|_{L_p W2q}`: the Hölder factor that makes short windows small.
pub fn e_t_proxy(x: &XNorm, horizon: f64, p: f64) -> f64 {
    let p_conj = p / (p - 1.0);
    horizon.powf(1.0 / p_conj) * x.v_lp_w2q
}

/// Result of a log-linear decay fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub beta: f64,
    /// RMS deviation of `log y` from the fitted line
    pub residual: f64,
    pub reliable: bool,
    pub points: usize,
}

/// Relative rise tolerated between consecutive tail samples before the fit is flagged.
pub const TAIL_RISE_TOL: f64 = 0.05;
/// RMS log residual above which the fit is flagged.
pub const FIT_RESIDUAL_TOL: f64 = 0.1;

/// Least-squares slope of `log y` against `t` over the last half of the horizon,
/// `beta = -slope`.
pub fn fit_decay(times: &[f64], y: &[f64]) -> Result<DecayFit> {
    if times.len() != y.len() || times.len() < 2 {
        return Err(Error::InsufficientData(format!("need matching series with at least 2 points, got {} and {}", times.len(), y.len())));
    }
    let t0 = times[0];
    let t_mid = t0 + 0.5 * (times[times.len() - 1] - t0);
    let tail: Vec<(f64, f64)> = times.iter().zip(y).filter(|(t, _)| **t >= t_mid).map(|(t, v)| (*t, *v)).collect();
    if tail.iter().all(|(_, v)| *v == 0.0) {
        return Ok(DecayFit { beta: 0.0, residual: 0.0, reliable: true, points: tail.len() });
    }
    if tail.len() < 2 || tail.iter().any(|(_, v)| !(*v > 0.0)) {
        return Err(Error::InsufficientData("decay fit needs positive samples in the tail".into()));
    }
    let m = tail.len() as f64;
    let (st, sl) = tail.iter().fold((0.0, 0.0), |(a, b), (t, v)| (a + t, b + v.ln()));
    let (tm, lm) = (st / m, sl / m);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, v) in &tail {
        sxy += (t - tm) * (v.ln() - lm);
        sxx += (t - tm) * (t - tm);
    }
    let slope = sxy / sxx;
    let residual = (tail.iter().map(|(t, v)| (v.ln() - lm - slope * (t - tm)).powi(2)).sum::<f64>() / m).sqrt();
    let monotone = tail.windows(2).all(|w| w[1].1 <= w[0].1 * (1.0 + TAIL_RISE_TOL));
    Ok(DecayFit { beta: -slope, residual, reliable: monotone && residual <= FIT_RESIDUAL_TOL, points: tail.len() })
}

/// Range of the volume fraction and the largest violation of `R <= Z` over cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureMonitor {
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// `max (R - Z)`, non-positive on healthy states
    pub max_r_minus_z: f64,
}

impl ClosureMonitor {
    pub fn healthy(&self) -> bool {
        self.alpha_min >= 0.0 && self.alpha_max <= 1.0 && self.max_r_minus_z <= 0.0
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            alpha_min: self.alpha_min.min(other.alpha_min),
            alpha_max: self.alpha_max.max(other.alpha_max),
            max_r_minus_z: self.max_r_minus_z.max(other.max_r_minus_z),
        }
    }
}

pub fn closure_monitor(r: &ScalarField, q: &ScalarField, params: &ClosureParams) -> Result<ClosureMonitor> {
    let mut m = ClosureMonitor { alpha_min: f64::INFINITY, alpha_max: f64::NEG_INFINITY, max_r_minus_z: f64::NEG_INFINITY };
    for (&ri, &qi) in r.values.iter().zip(&q.values) {
        let z = solve_z(ri, qi, params)?;
        let pp = recover_phases(ri, qi, z, params)?;
        m.alpha_min = m.alpha_min.min(pp.alpha);
        m.alpha_max = m.alpha_max.max(pp.alpha);
        m.max_r_minus_z = m.max_r_minus_z.max(ri - z);
    }
    Ok(m)
}

/// Eulerian mass `int r det(I + k) dy` of a cell density.
pub fn eulerian_mass(grid: &Grid, density: &ScalarField, jdet: &[f64]) -> Result<f64> {
    density.check(grid)?;
    let w = grid.weights(Location::Cells);
    Ok(density.values.iter().zip(jdet).zip(&w).map(|((r, j), w)| r * j * w).sum())
}

/// Everything reported about one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub p: f64,
    pub q: f64,
    pub horizon: f64,
    pub x_norm: XNorm,
    pub xdot: XDotNorm,
    pub grad_budget: f64,
    pub delta: f64,
    pub masses_initial: [f64; 2],
    pub masses_final: [f64; 2],
    pub mass_drift: [f64; 2],
    pub alpha_range: [f64; 2],
    pub max_r_minus_z: f64,
    pub beta_fit: Option<DecayFit>,
    pub e_t_proxy: f64,
    pub besov_v0: f64,
}
