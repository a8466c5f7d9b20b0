//! Manufactured solutions for the one-dimensional linear system with variable
//! reference densities.
//!
//! The exact solution is `v = phi(t) sin(pi y)`, `sigma = a phi(t) cos(pi y)`,
//! `eta = b phi(t) cos(pi y)` on `[0, 1]`. The residual of the continuous system is
//! supplied as forcing; the discrete error at the final time is measured in the
//! maximum norm over velocity nodes and density cells.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::closure::{omega_coefficients, solve_z, ClosureParams};
use crate::error::{Error, Result};
use crate::grid::{DiffOps, Grid, Location, ScalarField, VectorField};
use crate::lagrangian::{RhsBundle, RhsMode};
use crate::linear_core::{eliminate_density, linear_step, LinState, LinearCoeffs, DEFAULT_LAMBDA0};

/// Time profile of the manufactured solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeProfile {
    /// `phi = 1 + t`: the implicit Euler step is exact in time
    Linear,
    /// `phi = exp(-t)`
    Exponential,
}

impl TimeProfile {
    fn phi(self, t: f64) -> (f64, f64) {
        match self {
            Self::Linear => (1.0 + t, 1.0),
            Self::Exponential => ((-t).exp(), -(-t).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmsCase {
    pub params: ClosureParams,
    /// reference densities `r0 = r_mean (1 + amp y (1 - y))`, same shape for `q0`
    pub r_mean: f64,
    pub q_mean: f64,
    pub amp: f64,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub profile: TimeProfile,
}

impl MmsCase {
    pub fn standard(params: ClosureParams, profile: TimeProfile) -> Self {
        Self { params, r_mean: 1.0, q_mean: 1.0, amp: 0.5, a: 0.3, b: -0.2, horizon: 0.5, profile }
    }

    fn shape(&self, y: f64) -> f64 {
        1.0 + self.amp * y * (1.0 - y)
    }

    fn r0(&self, y: f64) -> f64 {
        self.r_mean * self.shape(y)
    }

    fn q0(&self, y: f64) -> f64 {
        self.q_mean * self.shape(y)
    }

    fn exact(&self, t: f64, y: f64) -> [f64; 3] {
        let (ph, _) = self.profile.phi(t);
        [self.a * ph * (PI * y).cos(), self.b * ph * (PI * y).cos(), ph * (PI * y).sin()]
    }

    fn forcing(&self, t: f64, y: f64) -> Result<[f64; 3]> {
        let (ph, dph) = self.profile.phi(t);
        let (r0, q0) = (self.r0(y), self.q0(y));
        let div = PI * ph * (PI * y).cos();
        let f1 = self.a * dph * (PI * y).cos() + r0 * div;
        let f2 = self.b * dph * (PI * y).cos() + q0 * div;
        let z = solve_z(r0, q0, &self.params)?;
        let (w1, w2) = omega_coefficients(z, r0.min(z), &self.params)?;
        let p = &self.params;
        let f3 = (r0 + q0) * dph * (PI * y).sin() + (p.mu + p.nu) * PI * PI * ph * (PI * y).sin() - (w1 * self.a + w2 * self.b) * PI * ph * (PI * y).sin();
        Ok([f1, f2, f3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmsError {
    pub cells: usize,
    pub dt: f64,
    pub err_v: f64,
    pub err_density: f64,
}

impl MmsError {
    pub fn max(&self) -> f64 {
        self.err_v.max(self.err_density)
    }
}

/// Runs the manufactured problem on `cells` cells with step `dt`.
pub fn run(case: &MmsCase, cells: usize, dt: f64) -> Result<MmsError> {
    let g = Grid::unit_interval(cells)?;
    let ops = DiffOps::new(&g);
    let r0 = g.sample(Location::Cells, |c| case.r0(c[0]));
    let q0 = g.sample(Location::Cells, |c| case.q0(c[0]));
    let coeffs = LinearCoeffs::around_initial(&ops, &r0, &q0, &case.params)?;
    let op = eliminate_density(&ops, &coeffs, &case.params, dt, DEFAULT_LAMBDA0)?;
    let steps = (case.horizon / dt).round() as usize;
    if steps == 0 || ((steps as f64) * dt - case.horizon).abs() > 1e-9 * case.horizon {
        return Err(Error::Parameter(format!("dt = {dt} does not divide the horizon {}", case.horizon)));
    }
    let sample = |t: f64| LinState {
        sigma: g.sample(Location::Cells, |c| case.exact(t, c[0])[0]),
        eta: g.sample(Location::Cells, |c| case.exact(t, c[0])[1]),
        v: g.sample_vector(true, |c| [case.exact(t, c[0])[2], 0.0]),
    };
    let mut state = sample(0.0);
    for n in 1..=steps {
        let t = n as f64 * dt;
        let mut f1 = vec![0.0; g.n_cells()];
        let mut f2 = vec![0.0; g.n_cells()];
        for (c, (a, b)) in f1.iter_mut().zip(f2.iter_mut()).enumerate() {
            let f = case.forcing(t, g.cell_coord(c)[0])?;
            *a = f[0];
            *b = f[1];
        }
        let mut f3 = VectorField::zeros(&g, true);
        for node in g.interior_nodes() {
            f3.values[node] = case.forcing(t, g.node_coord(node)[0])?[2];
        }
        let rhs = RhsBundle { f1: ScalarField::new(Location::Cells, f1), f2: ScalarField::new(Location::Cells, f2), f3, mode: RhsMode::AroundInitial };
        state = linear_step(&ops, &op, &coeffs, &state, &rhs)?;
    }
    let exact = sample(case.horizon);
    let maxdiff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(MmsError {
        cells,
        dt,
        err_v: maxdiff(&state.v.values, &exact.v.values),
        err_density: maxdiff(&state.sigma.values, &exact.sigma.values).max(maxdiff(&state.eta.values, &exact.eta.values)),
    })
}

/// Observed orders `log(e_k / e_{k+1}) / log(s_k / s_{k+1})` between successive rows,
/// where `s` is the refined quantity (`h` or `dt`).
pub fn observed_orders(steps: &[f64], errors: &[f64]) -> Vec<f64> {
    steps.windows(2).zip(errors.windows(2)).map(|(s, e)| (e[0] / e[1]).ln() / (s[0] / s[1]).ln()).collect()
}

/// Spatial study with a time-linear solution: `dt` is irrelevant to the error.
pub fn spatial_study(params: ClosureParams, cells: &[usize]) -> Result<(Vec<MmsError>, Vec<f64>)> {
    let case = MmsCase::standard(params, TimeProfile::Linear);
    let rows: Vec<MmsError> = cells.iter().map(|&n| run(&case, n, 0.05)).collect::<Result<_>>()?;
    let h: Vec<f64> = cells.iter().map(|&n| 1.0 / n as f64).collect();
    let orders = observed_orders(&h, &rows.iter().map(MmsError::max).collect::<Vec<_>>());
    Ok((rows, orders))
}

/// Temporal study with an exponential solution on a fine grid.
pub fn temporal_study(params: ClosureParams, cells: usize, dts: &[f64]) -> Result<(Vec<MmsError>, Vec<f64>)> {
    let case = MmsCase::standard(params, TimeProfile::Exponential);
    let rows: Vec<MmsError> = dts.iter().map(|&dt| run(&case, cells, dt)).collect::<Result<_>>()?;
    let orders = observed_orders(dts, &rows.iter().map(MmsError::max).collect::<Vec<_>>());
    Ok((rows, orders))
}
