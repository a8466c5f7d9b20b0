//! Lagrangian reformulation: flow-map history, the correction tensors and the nonlinear
//! right-hand sides of the linearized systems.
//!
//! Index conventions. For a velocity `v`, `J[(a, b)] = d v_b / d y_a` and the history is
//! `k = int_0^t J ds`. The flow map `x = y + int v` has `dx_b/dy_a = (I + k)_ab`, so
//! `d/dx_i = sum_j (delta_ij + V_ij) d/dy_j` with `V = (I + k)^{-1} - I`. The history of
//! second derivatives is `k2[l][(a, b)] = int_0^t d_l d_a v_b ds`.
//!
//! The A-tensors below are obtained by redoing the chain rule in these conventions. One
//! consequence is that the leading term of the Laplacian correction reads
//! `2 sum_{l,m} V_lm d_l d_m v`.

use nalgebra::Matrix2;

use crate::closure::{omega_coefficients, solve_z, ClosureParams};
use crate::error::{Error, Result};
use crate::grid::{DiffOps, Location, ScalarField, VectorField};
use crate::linear_core::LinearCoeffs;

/// Default smallness budget for `int_0^t |grad v|_inf`.
pub const DEFAULT_DELTA: f64 = 0.1;

/// Max row-sum norm, the operator norm induced by the sup norm.
pub fn matrix_norm(m: &Matrix2<f64>) -> f64 {
    (m[(0, 0)].abs() + m[(0, 1)].abs()).max(m[(1, 0)].abs() + m[(1, 1)].abs())
}

/// `(I + k)^{-1} - I`, refused once `|k| >= delta`.
pub fn v0_matrix(k: &Matrix2<f64>, delta: f64) -> Result<Matrix2<f64>> {
    let nk = matrix_norm(k);
    if !(nk < delta) {
        return Err(Error::Smallness { quantity: "|k|".into(), value: nk, delta });
    }
    let m = (Matrix2::identity() + k)
        .try_inverse()
        .ok_or_else(|| Error::Smallness { quantity: "|k| (I + k singular)".into(), value: nk, delta })?;
    Ok(m - Matrix2::identity())
}

/// `d_l V = -(M k2[l] M)` with `M = (I + k)^{-1}`, for each direction `l`.
fn v0_gradient(m: &Matrix2<f64>, k2: &[Matrix2<f64>; 2]) -> [Matrix2<f64>; 2] {
    [-(m * k2[0] * m), -(m * k2[1] * m)]
}

/// Absolute state: partial densities on cells, velocity on nodes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimState {
    pub r: ScalarField,
    pub q: ScalarField,
    pub v: VectorField,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
struct GradSnapshot {
    j_nodes: Vec<Matrix2<f64>>,
    j_cells: Vec<Matrix2<f64>>,
    h_nodes: Vec<[Matrix2<f64>; 2]>,
    sup: f64,
}

impl GradSnapshot {
    fn of(ops: &DiffOps, v: &VectorField) -> Result<Self> {
        let j_nodes = ops.jacobian_nodes(v)?;
        let j_cells = ops.jacobian_cells(v)?;
        let h_nodes = ops.hessian_nodes(v)?;
        let sup = j_nodes.iter().chain(&j_cells).map(matrix_norm).fold(0.0, f64::max);
        Ok(Self { j_nodes, j_cells, h_nodes, sup })
    }
}

/// Accumulated velocity gradients along the flow, trapezoid rule in time.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowHistory {
    pub delta: f64,
    pub k_nodes: Vec<Matrix2<f64>>,
    pub k_cells: Vec<Matrix2<f64>>,
    pub k2_nodes: Vec<[Matrix2<f64>; 2]>,
    /// `int_0^t |grad v|_inf ds`
    pub grad_budget: f64,
    pub time: f64,
    last: GradSnapshot,
}

impl FlowHistory {
    /// Zero history at the instant where the velocity is `v0`.
    pub fn new(ops: &DiffOps, v0: &VectorField, delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Parameter(format!("delta must be positive, got {delta}")));
        }
        let g = &ops.grid;
        Ok(Self {
            delta,
            k_nodes: vec![Matrix2::zeros(); g.n_nodes()],
            k_cells: vec![Matrix2::zeros(); g.n_cells()],
            k2_nodes: vec![[Matrix2::zeros(); 2]; g.n_nodes()],
            grad_budget: 0.0,
            time: 0.0,
            last: GradSnapshot::of(ops, v0)?,
        })
    }

    /// History of a velocity held fixed for a time `t`.
    pub fn frozen_velocity(ops: &DiffOps, v: &VectorField, t: f64, delta: f64) -> Result<Self> {
        let mut h = Self::new(ops, v, delta)?;
        h.advance(ops, v, t)?;
        Ok(h)
    }

    /// Adds `int_t^{t+dt} grad v` with the trapezoid rule. The history is left untouched
    /// when the budget would be exceeded.
    pub fn advance(&mut self, ops: &DiffOps, v_next: &VectorField, dt: f64) -> Result<()> {
        let next = GradSnapshot::of(ops, v_next)?;
        let budget = self.grad_budget + 0.5 * dt * (self.last.sup + next.sup);
        if budget > self.delta {
            return Err(Error::Smallness { quantity: "int_0^t |grad v|_inf".into(), value: budget, delta: self.delta });
        }
        let w = 0.5 * dt;
        for (k, (a, b)) in self.k_nodes.iter_mut().zip(self.last.j_nodes.iter().zip(&next.j_nodes)) {
            *k += (a + b) * w;
        }
        for (k, (a, b)) in self.k_cells.iter_mut().zip(self.last.j_cells.iter().zip(&next.j_cells)) {
            *k += (a + b) * w;
        }
        for (k, (a, b)) in self.k2_nodes.iter_mut().zip(self.last.h_nodes.iter().zip(&next.h_nodes)) {
            for l in 0..2 {
                k[l] += (a[l] + b[l]) * w;
            }
        }
        self.grad_budget = budget;
        self.time += dt;
        self.last = next;
        Ok(())
    }

    /// `sup |k|` over nodes and cells.
    pub fn k_inf_norm(&self) -> f64 {
        self.k_nodes.iter().chain(&self.k_cells).map(matrix_norm).fold(0.0, f64::max)
    }

    /// `det(I + k)` on cells: the volume ratio of the flow map, with the unused axis padded.
    pub fn jacobian_det_cells(&self, dim: usize) -> Vec<f64> {
        self.k_cells
            .iter()
            .map(|k| if dim == 1 { 1.0 + k[(0, 0)] } else { (Matrix2::identity() + k).determinant() })
            .collect()
    }
}

/// `O1 = -r sum_ij V_ij d v_i / d y_j` and the same with `q`, on cells.
pub fn transport_rhs(ops: &DiffOps, state: &SimState, history: &FlowHistory) -> Result<(ScalarField, ScalarField)> {
    state.r.check(&ops.grid)?;
    state.q.check(&ops.grid)?;
    let jac = ops.jacobian_cells(&state.v)?;
    let n = ops.grid.n_cells();
    let mut o1 = vec![0.0; n];
    let mut o2 = vec![0.0; n];
    for c in 0..n {
        let v0 = v0_matrix(&history.k_cells[c], history.delta)?;
        // sum_ij V_ij J_ji
        let s = (v0 * jac[c]).trace();
        o1[c] = -state.r.values[c] * s;
        o2[c] = -state.q.values[c] * s;
    }
    Ok((ScalarField::new(Location::Cells, o1), ScalarField::new(Location::Cells, o2)))
}

/// Pressure weights `Z^{gamma+-1} dZ/dR`, `Z^{gamma+-1} dZ/dQ` and `Z` at interior nodes for
/// cell densities averaged to the nodes. Boundary entries stay zero.
pub fn node_closure(ops: &DiffOps, r: &ScalarField, q: &ScalarField, params: &ClosureParams) -> Result<NodeClosure> {
    let rn = ops.node_average(&r.values);
    let qn = ops.node_average(&q.values);
    let n = ops.grid.n_nodes();
    let mut out = NodeClosure { r: rn, q: qn, z: vec![0.0; n], w1: vec![0.0; n], w2: vec![0.0; n] };
    for node in ops.grid.interior_nodes() {
        let z = solve_z(out.r[node], out.q[node], params)?;
        let (w1, w2) = omega_coefficients(z, out.r[node].min(z), params)?;
        out.z[node] = z;
        out.w1[node] = w1;
        out.w2[node] = w2;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeClosure {
    pub r: Vec<f64>,
    pub q: Vec<f64>,
    pub z: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
}

/// `O3`: viscous corrections from the change of variables and the pressure correction
/// `-W1 V grad r - W2 V grad q`, on nodes (zero on the boundary).
pub fn momentum_correction(
    ops: &DiffOps,
    state: &SimState,
    history: &FlowHistory,
    params: &ClosureParams,
) -> Result<VectorField> {
    let nc = node_closure(ops, &state.r, &state.q, params)?;
    momentum_correction_with(ops, state, history, params, &nc)
}

fn momentum_correction_with(
    ops: &DiffOps,
    state: &SimState,
    history: &FlowHistory,
    params: &ClosureParams,
    nc: &NodeClosure,
) -> Result<VectorField> {
    let g = &ops.grid;
    let d = g.dim();
    let jac = ops.jacobian_nodes(&state.v)?;
    let hess = ops.hessian_nodes(&state.v)?;
    let grad_r = ops.grad(&state.r)?;
    let grad_q = ops.grad(&state.q)?;
    let (mu, nu) = (params.mu, params.nu);
    let mut out = VectorField::zeros(g, true);
    for node in g.interior_nodes() {
        let v = v0_matrix(&history.k_nodes[node], history.delta)?;
        let m = v + Matrix2::identity();
        let dv = v0_gradient(&m, &history.k2_nodes[node]);
        let jn = &jac[node];
        let h = &hess[node];
        let c2 = v * 2.0 + v.transpose() * v;
        let div_grad: [f64; 2] = std::array::from_fn(|k| (0..d).map(|a| h[k][(a, a)]).sum());
        // sum_lm dV[k]_lm J_ml
        let contract: [f64; 2] = std::array::from_fn(|k| if k < d { (dv[k] * jn).trace() } else { 0.0 });
        let gr = grad_r.at(node);
        let gq = grad_q.at(node);
        for j in 0..d {
            let mut a2_lap = 0.0;
            let mut a1_lap = 0.0;
            let mut a2_div = 0.0;
            let mut a1_div = contract[j];
            for l in 0..d {
                for mm in 0..d {
                    a2_lap += c2[(l, mm)] * h[l][(mm, j)];
                    a2_div += v[(l, mm)] * h[j][(mm, l)];
                    for k in 0..d {
                        a1_lap += m[(k, l)] * dv[l][(k, mm)] * jn[(mm, j)];
                        a2_div += v[(j, k)] * v[(l, mm)] * h[k][(mm, l)];
                    }
                }
            }
            for k in 0..d {
                a2_div += v[(j, k)] * div_grad[k];
                a1_div += v[(j, k)] * contract[k];
            }
            let vgr: f64 = (0..d).map(|k| v[(j, k)] * gr[k]).sum();
            let vgq: f64 = (0..d).map(|k| v[(j, k)] * gq[k]).sum();
            out.values[node * d + j] =
                mu * (a2_lap + a1_lap) + nu * (a2_div + a1_div) - nc.w1[node] * vgr - nc.w2[node] * vgq;
        }
    }
    Ok(out)
}

/// Which linearization the right-hand side belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RhsMode {
    AroundInitial,
    AroundConstant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhsBundle {
    pub f1: ScalarField,
    pub f2: ScalarField,
    pub f3: VectorField,
    pub mode: RhsMode,
}

impl RhsBundle {
    pub fn zeros(ops: &DiffOps, mode: RhsMode) -> Self {
        Self {
            f1: ScalarField::zeros(&ops.grid, Location::Cells),
            f2: ScalarField::zeros(&ops.grid, Location::Cells),
            f3: VectorField::zeros(&ops.grid, true),
            mode,
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.f1.max_abs().max(self.f2.max_abs()).max(self.f3.max_abs())
    }
}

/// The three coefficient differences multiplying `grad sigma` and `grad eta` in the
/// momentum right-hand side, each assembled as numerator over product of denominators.
/// The reference point `(r0, z0)` is either the initial data or the constant state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PressureDefects {
    pub i1: f64,
    pub i2: f64,
    pub i3: f64,
}

pub fn pressure_defects(r: f64, z: f64, r0: f64, z0: f64, params: &ClosureParams) -> Result<PressureDefects> {
    let g = params.gamma;
    let gp = params.gamma_plus;
    let zp = z.powf(gp);
    let z0p = z0.powf(gp);
    let zg = z.powf(g);
    let z0g = z0.powf(g);
    let zg1 = z.powf(g - 1.0);
    let z0g1 = z0.powf(g - 1.0);
    let den1 = g * z - (g - 1.0) * r;
    let den1_0 = g * z0 - (g - 1.0) * r0;
    let den2 = g * zg - (g - 1.0) * r * zg1;
    let den2_0 = g * z0g - (g - 1.0) * r0 * z0g1;
    // lower bounds valid whenever R <= Z
    let slack = 1.0 - 1e-12;
    for (den, bound, what) in [(den1, z, "gamma Z - (gamma-1) r"), (den1_0, z0, "gamma Z0 - (gamma-1) r0"), (den2, zg, "gamma Z^gamma - (gamma-1) r Z^(gamma-1)"), (den2_0, z0g, "gamma Z0^gamma - (gamma-1) r0 Z0^(gamma-1)")] {
        if !(den >= bound * slack) || !(bound > 0.0) {
            return Err(Error::Invariant(format!("{what} = {den} below its lower bound {bound}")));
        }
    }
    let num1 = g * (z0 * (zp - z0p) + z0p * (z0 - z)) + (g - 1.0) * (z0p * (r - r0) + r0 * (z0p - zp));
    let num2 = g * (z0p * (z0g - zg) + z0g * (zp - z0p));
    let num3 = (g - 1.0) * (r * z0p * (zg1 - z0g1) + z0p * z0g1 * (r - r0) + r0 * z0g1 * (z0p - zp));
    Ok(PressureDefects { i1: num1 / (den1_0 * den1), i2: num2 / (den2 * den2_0), i3: num3 / (den2 * den2_0) })
}

/// Right-hand side of the system linearized around `coeffs` (initial data or constants).
///
/// `dtv` approximates the time derivative of the velocity.
pub fn rhs_local(
    ops: &DiffOps,
    state: &SimState,
    dtv: &VectorField,
    history: &FlowHistory,
    coeffs: &LinearCoeffs,
    params: &ClosureParams,
) -> Result<RhsBundle> {
    rhs_impl(ops, state, dtv, history, coeffs, params, RhsMode::AroundInitial)
}

/// Right-hand side of the system linearized around a constant state. Same as
/// [`rhs_local`] without the terms carrying gradients of the reference densities.
pub fn rhs_global(
    ops: &DiffOps,
    state: &SimState,
    dtv: &VectorField,
    history: &FlowHistory,
    coeffs: &LinearCoeffs,
    params: &ClosureParams,
) -> Result<RhsBundle> {
    rhs_impl(ops, state, dtv, history, coeffs, params, RhsMode::AroundConstant)
}

fn rhs_impl(
    ops: &DiffOps,
    state: &SimState,
    dtv: &VectorField,
    history: &FlowHistory,
    coeffs: &LinearCoeffs,
    params: &ClosureParams,
    mode: RhsMode,
) -> Result<RhsBundle> {
    let g = &ops.grid;
    let d = g.dim();
    dtv.check(g)?;
    let (o1, o2) = transport_rhs(ops, state, history)?;
    let sigma: Vec<f64> = state.r.values.iter().zip(&coeffs.r0).map(|(a, b)| a - b).collect();
    let eta: Vec<f64> = state.q.values.iter().zip(&coeffs.q0).map(|(a, b)| a - b).collect();
    let div = ops.div(&state.v)?;
    let f1: Vec<f64> = (0..g.n_cells()).map(|c| o1.values[c] - sigma[c] * div.values[c]).collect();
    let f2: Vec<f64> = (0..g.n_cells()).map(|c| o2.values[c] - eta[c] * div.values[c]).collect();

    let nc = node_closure(ops, &state.r, &state.q, params)?;
    let mut f3 = momentum_correction_with(ops, state, history, params, &nc)?;
    let sigma_f = ScalarField::new(Location::Cells, sigma);
    let eta_f = ScalarField::new(Location::Cells, eta);
    let grad_sigma = ops.grad(&sigma_f)?;
    let grad_eta = ops.grad(&eta_f)?;
    let sum_n = ops.node_average(&sigma_f.values.iter().zip(&eta_f.values).map(|(a, b)| a + b).collect::<Vec<_>>());
    for node in g.interior_nodes() {
        let def = pressure_defects(nc.r[node].min(nc.z[node]), nc.z[node], coeffs.r0_nodes[node].min(coeffs.z0_nodes[node]), coeffs.z0_nodes[node], params)?;
        let gs = grad_sigma.at(node);
        let ge = grad_eta.at(node);
        let dt = dtv.at(node);
        for j in 0..d {
            let mut val = -sum_n[node] * dt[j] - def.i1 * gs[j] - (def.i2 + def.i3) * ge[j];
            if mode == RhsMode::AroundInitial {
                val -= nc.w1[node] * coeffs.grad_r0.at(node)[j] + nc.w2[node] * coeffs.grad_q0.at(node)[j];
            }
            f3.values[node * d + j] += val;
        }
    }
    let bundle = RhsBundle {
        f1: ScalarField::new(Location::Cells, f1),
        f2: ScalarField::new(Location::Cells, f2),
        f3,
        mode,
    };
    if !bundle.max_abs().is_finite() {
        return Err(Error::Invariant("non-finite right-hand side".into()));
    }
    Ok(bundle)
}
