//! Implicit Euler step of the linearized system.
//!
//! With `lambda = 1/dt` the step for `(sigma, eta, v)` reads
//!
//! ```text
//! lambda sigma + r0 div v = lambda sigma_n + f1
//! lambda eta   + q0 div v = lambda eta_n   + f2
//! lambda rho0 v - mu lap v - nu grad div v + w1 grad sigma + w2 grad eta = lambda rho0 v_n + f3
//! ```
//!
//! Substituting the first two lines into the third leaves one elliptic problem for `v`:
//!
//! ```text
//! [lambda rho0 - mu lap - nu grad div - lambda^{-1} (w1 grad r0 div + w2 grad q0 div)] v
//!     = f3 + lambda rho0 v_n - w1 grad(sigma_n + f1/lambda) - w2 grad(eta_n + f2/lambda)
//! ```
//!
//! after which the densities are updated explicitly. The term `grad(r0 div v)` is kept
//! whole inside the operator, so variable reference densities need no extra right-hand side.

use sprs::{CsMat, TriMat};

use crate::closure::{omega_coefficients, solve_z, ClosureParams};
use crate::error::{Error, Result};
use crate::grid::{spmv, DiffOps, Location, ScalarField, VectorField};
use crate::lagrangian::{node_closure, RhsBundle, RhsMode};
use crate::solvers::{bicgstab, relative_residual, BandedLu, Ilu0, DEFAULT_RTOL};

/// Smallest admissible `1/dt`.
pub const DEFAULT_LAMBDA0: f64 = 1.0;
/// Lower bound on `r0 + q0`.
pub const MIN_TOTAL_DENSITY: f64 = 1e-6;

/// Frozen coefficients of the linear system.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoeffs {
    pub mode: RhsMode,
    /// reference densities on cells
    pub r0: Vec<f64>,
    pub q0: Vec<f64>,
    /// node values (interior nodes; boundary entries are unused)
    pub r0_nodes: Vec<f64>,
    pub q0_nodes: Vec<f64>,
    pub z0_nodes: Vec<f64>,
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub rho_nodes: Vec<f64>,
    pub grad_r0: VectorField,
    pub grad_q0: VectorField,
}

impl LinearCoeffs {
    /// Coefficients frozen at (possibly variable) initial densities given on cells.
    pub fn around_initial(ops: &DiffOps, r0: &ScalarField, q0: &ScalarField, params: &ClosureParams) -> Result<Self> {
        let g = &ops.grid;
        for f in [r0, q0] {
            f.check(g)?;
            if f.loc != Location::Cells {
                return Err(Error::Shape("reference densities live on cells".into()));
            }
        }
        for (c, (a, b)) in r0.values.iter().zip(&q0.values).enumerate() {
            if !(*a >= 0.0 && *b >= 0.0 && a + b >= MIN_TOTAL_DENSITY) {
                return Err(Error::Coefficient(format!("r0 = {a}, q0 = {b} at cell {c}: need r0, q0 >= 0 and r0 + q0 >= {MIN_TOTAL_DENSITY}")));
            }
        }
        let nc = node_closure(ops, r0, q0, params)?;
        let rho_nodes = nc.r.iter().zip(&nc.q).map(|(a, b)| a + b).collect();
        Ok(Self {
            mode: RhsMode::AroundInitial,
            r0: r0.values.clone(),
            q0: q0.values.clone(),
            r0_nodes: nc.r,
            q0_nodes: nc.q,
            z0_nodes: nc.z,
            w1: nc.w1,
            w2: nc.w2,
            rho_nodes,
            grad_r0: ops.grad(r0)?,
            grad_q0: ops.grad(q0)?,
        })
    }

    /// Coefficients of the constant state `(r*, q*)`.
    pub fn around_constant(ops: &DiffOps, r_star: f64, q_star: f64, params: &ClosureParams) -> Result<Self> {
        if !(r_star >= 0.0 && q_star >= 0.0 && r_star + q_star >= MIN_TOTAL_DENSITY) {
            return Err(Error::Coefficient(format!("invalid constant state r* = {r_star}, q* = {q_star}")));
        }
        let g = &ops.grid;
        let z = solve_z(r_star, q_star, params)?;
        let (w1, w2) = omega_coefficients(z, r_star.min(z), params)?;
        let (nn, nc) = (g.n_nodes(), g.n_cells());
        Ok(Self {
            mode: RhsMode::AroundConstant,
            r0: vec![r_star; nc],
            q0: vec![q_star; nc],
            r0_nodes: vec![r_star; nn],
            q0_nodes: vec![q_star; nn],
            z0_nodes: vec![z; nn],
            w1: vec![w1; nn],
            w2: vec![w2; nn],
            rho_nodes: vec![r_star + q_star; nn],
            grad_r0: VectorField::zeros(g, false),
            grad_q0: VectorField::zeros(g, false),
        })
    }

    /// Pressure force `w1 grad sigma + w2 grad eta` at interior nodes.
    pub fn pressure_force(&self, ops: &DiffOps, sigma: &ScalarField, eta: &ScalarField) -> Result<VectorField> {
        let g = &ops.grid;
        let d = g.dim();
        let gs = ops.grad(sigma)?;
        let ge = ops.grad(eta)?;
        let mut out = VectorField::zeros(g, true);
        for node in g.interior_nodes() {
            for j in 0..d {
                let i = node * d + j;
                out.values[i] = self.w1[node] * gs.values[i] + self.w2[node] * ge.values[i];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Banded(BandedLu),
    Iterative(Ilu0),
}

/// Velocity operator of one implicit step, with identity rows on the boundary.
#[derive(Debug, Clone)]
pub struct EllipticOperator {
    pub lambda: f64,
    pub matrix: CsMat<f64>,
    factor: Factor,
}

/// Viscosities, kept apart from the closure exponents so tests can vary them.
fn viscosities(params: &ClosureParams) -> (f64, f64) {
    (params.mu, params.nu)
}

/// Assembles the velocity operator for `lambda = 1/dt`. Refuses `lambda < lambda0`.
pub fn eliminate_density(ops: &DiffOps, coeffs: &LinearCoeffs, params: &ClosureParams, dt: f64, lambda0: f64) -> Result<EllipticOperator> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Parameter(format!("dt must be positive, got {dt}")));
    }
    let lambda = 1.0 / dt;
    if lambda < lambda0 {
        return Err(Error::Parameter(format!("1/dt = {lambda} is below lambda0 = {lambda0}")));
    }
    let matrix = assemble(ops, coeffs, params, lambda)?;
    let factor = if ops.grid.dim() == 1 {
        Factor::Banded(BandedLu::factor(&matrix)?)
    } else {
        Factor::Iterative(Ilu0::new(&matrix)?)
    };
    Ok(EllipticOperator { lambda, matrix, factor })
}

fn scale_rows(m: &CsMat<f64>, s: impl Fn(usize) -> f64) -> CsMat<f64> {
    let mut t = TriMat::new(m.shape());
    for (r, row) in m.outer_iterator().enumerate() {
        let f = s(r);
        for (c, &v) in row.iter() {
            t.add_triplet(r, c, f * v);
        }
    }
    t.to_csr()
}

fn assemble(ops: &DiffOps, co: &LinearCoeffs, params: &ClosureParams, lambda: f64) -> Result<CsMat<f64>> {
    let g = &ops.grid;
    let d = g.dim();
    let n = g.n_nodes() * d;
    let (mu, nu) = viscosities(params);
    for node in g.interior_nodes() {
        if !(co.rho_nodes[node] >= MIN_TOTAL_DENSITY) || !(co.w1[node] > 0.0) || !(co.w2[node] > 0.0) {
            return Err(Error::Coefficient(format!(
                "node {node}: rho0 = {}, w1 = {}, w2 = {}",
                co.rho_nodes[node], co.w1[node], co.w2[node]
            )));
        }
    }
    let div = ops.div_matrix();
    let grad = ops.grad_cells_matrix();
    let w1g = scale_rows(grad, |r| co.w1[r / d]);
    let w2g = scale_rows(grad, |r| co.w2[r / d]);
    let r0d = scale_rows(div, |c| co.r0[c]);
    let q0d = scale_rows(div, |c| co.q0[c]);
    let p1 = &w1g * &r0d;
    let p2 = &w2g * &q0d;
    let boundary: Vec<bool> = (0..n).map(|i| g.is_boundary_node(i / d)).collect();
    let mut t = TriMat::new((n, n));
    let mut add = |m: &CsMat<f64>, s: f64| {
        for (r, row) in m.outer_iterator().enumerate() {
            if boundary[r] {
                continue;
            }
            for (c, &v) in row.iter() {
                if !boundary[c] && v != 0.0 {
                    t.add_triplet(r, c, s * v);
                }
            }
        }
    };
    add(ops.vector_laplacian_matrix(), -mu);
    if nu != 0.0 {
        add(ops.grad_div_matrix(), -nu);
    }
    add(&p1, -1.0 / lambda);
    add(&p2, -1.0 / lambda);
    for i in 0..n {
        if boundary[i] {
            t.add_triplet(i, i, 1.0);
        } else {
            t.add_triplet(i, i, lambda * co.rho_nodes[i / d]);
        }
    }
    Ok(t.to_csr())
}

impl EllipticOperator {
    /// Solves `A v = f` with the boundary entries of `f` replaced by zero.
    pub fn resolvent_apply(&self, f: &VectorField, ops: &DiffOps) -> Result<VectorField> {
        f.check(&ops.grid)?;
        let mut b = f.values.clone();
        let d = ops.grid.dim();
        for node in ops.grid.boundary_nodes() {
            for j in 0..d {
                b[node * d + j] = 0.0;
            }
        }
        let x = self.solve(&b, None)?;
        let mut v = VectorField { dim: d, values: x, dirichlet: true };
        v.apply_dirichlet(&ops.grid);
        Ok(v)
    }

    /// Raw solve with the assembled matrix.
    pub fn solve(&self, b: &[f64], guess: Option<&[f64]>) -> Result<Vec<f64>> {
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver { message: "non-finite right-hand side".into(), residual: f64::NAN });
        }
        match &self.factor {
            Factor::Banded(lu) => {
                let x = lu.solve(b);
                let res = relative_residual(&self.matrix, &x, b);
                if !(res <= 1e-8) {
                    return Err(Error::Solver { message: "banded solve lost accuracy".into(), residual: res });
                }
                Ok(x)
            }
            Factor::Iterative(pre) => bicgstab(&self.matrix, pre, b, guess, DEFAULT_RTOL, 5000).map(|(x, _)| x),
        }
    }

    /// Coordinate-format dump: a header line `rows cols nnz` followed by `i j value`
    /// triplets with 1-based indices.
    pub fn to_coordinate_text(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "%%MatrixMarket matrix coordinate real general");
        let _ = writeln!(out, "{} {} {}", self.matrix.rows(), self.matrix.cols(), self.matrix.nnz());
        for (r, row) in self.matrix.outer_iterator().enumerate() {
            for (c, &v) in row.iter() {
                let _ = writeln!(out, "{} {} {:.16e}", r + 1, c + 1, v);
            }
        }
        out
    }
}

/// Perturbation unknowns `(sigma, eta, v)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LinState {
    pub sigma: ScalarField,
    pub eta: ScalarField,
    pub v: VectorField,
}

impl LinState {
    pub fn zeros(ops: &DiffOps) -> Self {
        Self {
            sigma: ScalarField::zeros(&ops.grid, Location::Cells),
            eta: ScalarField::zeros(&ops.grid, Location::Cells),
            v: VectorField::zeros(&ops.grid, true),
        }
    }
}

/// One implicit Euler step of length `1/op.lambda`.
pub fn linear_step(ops: &DiffOps, op: &EllipticOperator, coeffs: &LinearCoeffs, state: &LinState, rhs: &RhsBundle) -> Result<LinState> {
    let g = &ops.grid;
    let d = g.dim();
    state.sigma.check(g)?;
    state.eta.check(g)?;
    state.v.check(g)?;
    rhs.f1.check(g)?;
    rhs.f2.check(g)?;
    rhs.f3.check(g)?;
    let dt = 1.0 / op.lambda;
    let s_hat = ScalarField::new(Location::Cells, state.sigma.values.iter().zip(&rhs.f1.values).map(|(s, f)| s + dt * f).collect());
    let e_hat = ScalarField::new(Location::Cells, state.eta.values.iter().zip(&rhs.f2.values).map(|(s, f)| s + dt * f).collect());
    let press = coeffs.pressure_force(ops, &s_hat, &e_hat)?;
    let mut b = vec![0.0; g.n_nodes() * d];
    for node in g.interior_nodes() {
        for j in 0..d {
            let i = node * d + j;
            b[i] = rhs.f3.values[i] + op.lambda * coeffs.rho_nodes[node] * state.v.values[i] - press.values[i];
        }
    }
    let x = op.solve(&b, Some(&state.v.values))?;
    let mut v = VectorField { dim: d, values: x, dirichlet: true };
    v.apply_dirichlet(g);
    let div = spmv(ops.div_matrix(), &v.values);
    let sigma = (0..g.n_cells()).map(|c| s_hat.values[c] - dt * coeffs.r0[c] * div[c]).collect();
    let eta = (0..g.n_cells()).map(|c| e_hat.values[c] - dt * coeffs.q0[c] * div[c]).collect();
    Ok(LinState { sigma: ScalarField::new(Location::Cells, sigma), eta: ScalarField::new(Location::Cells, eta), v })
}
