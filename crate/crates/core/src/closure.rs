//! Algebraic pressure closure.
//!
//! Both phases share one pressure, `p = (rho+)^{gamma+} = (rho-)^{gamma-}`. Writing
//! `R = alpha rho+` and `Q = (1 - alpha) rho-` for the partial densities and `Z = rho+`,
//! the shared pressure is `p = Z^{gamma+}` where `Z` solves
//!
//! ```text
//! Q = (1 - R / Z) Z^gamma,   gamma = gamma+ / gamma-,   R <= Z.
//! ```
//!
//! The left-hand side `G(Z) = Z^gamma - R Z^(gamma-1) - Q` is strictly increasing on
//! `[R, inf)`, so the root is unique and can be bracketed a priori.

use serde::{Deserialize, Serialize};

use crate::error::{ClosureError, Error, Result};

/// Default residual tolerance for [`solve_z`].
pub const DEFAULT_TOL: f64 = 1e-12;
/// Default iteration budget for [`solve_z`].
pub const DEFAULT_MAX_ITER: usize = 100;

/// Pressure exponents and viscosities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosureParams {
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    /// `gamma_plus / gamma_minus`, always `>= 1`.
    pub gamma: f64,
    pub mu: f64,
    pub nu: f64,
}

impl ClosureParams {
    /// Validates `gamma_plus >= gamma_minus > 1`, `mu > 0` and `mu + nu > 0`.
    pub fn new(gamma_plus: f64, gamma_minus: f64, mu: f64, nu: f64) -> Result<Self> {
        if !(gamma_minus > 1.0) || !gamma_plus.is_finite() {
            return Err(Error::Parameter(format!(
                "need gamma_minus > 1, got gamma_plus = {gamma_plus}, gamma_minus = {gamma_minus}"
            )));
        }
        if gamma_plus < gamma_minus {
            return Err(Error::Parameter(format!(
                "need gamma_plus >= gamma_minus, got {gamma_plus} < {gamma_minus}"
            )));
        }
        if !(mu > 0.0) || !(mu + nu > 0.0) {
            return Err(Error::Parameter(format!("need mu > 0 and mu + nu > 0, got mu = {mu}, nu = {nu}")));
        }
        Ok(Self { gamma_plus, gamma_minus, gamma: gamma_plus / gamma_minus, mu, nu })
    }

    /// Exponents only, with unit shear viscosity and zero bulk viscosity.
    pub fn exponents(gamma_plus: f64, gamma_minus: f64) -> Result<Self> {
        Self::new(gamma_plus, gamma_minus, 1.0, 0.0)
    }
}

/// One `(R, Q)` pair with its closure solution and the recovered phase variables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub r: f64,
    pub q: f64,
    pub z: f64,
    pub alpha: f64,
    pub rho_plus: f64,
    /// `None` when the minus phase is absent (`alpha == 1`).
    pub rho_minus: Option<f64>,
    pub p: f64,
}

impl PhasePoint {
    pub fn minus_phase_vacuum(&self) -> bool {
        self.rho_minus.is_none()
    }
}

/// A priori bracket `[lo, hi]` for the closure root.
///
/// Lower end: `Z >= R` and `Z^gamma >= Q`, and one of `R`, `Q` is at least `kappa / 2`
/// with `kappa = R + Q`, so `Z >= min(kappa/2, (kappa/2)^(1/gamma))`.
/// Upper end: either `R >= Z/2`, or `Q >= Z^gamma / 2`.
pub fn bracket(r: f64, q: f64, params: &ClosureParams) -> (f64, f64) {
    let g = params.gamma;
    let half = 0.5 * (r + q);
    let lo = r.max(half.min(half.powf(1.0 / g)));
    let hi = (2.0 * q).powf(1.0 / g).max(2.0 * r);
    (lo, hi)
}

#[inline]
fn residual(z: f64, r: f64, q: f64, g: f64) -> f64 {
    // (1 - R/Z) Z^g - Q written without the division
    z.powf(g - 1.0) * (z - r) - q
}

#[inline]
fn residual_slope(z: f64, r: f64, g: f64) -> f64 {
    z.powf(g - 2.0) * (g * z - (g - 1.0) * r)
}

/// Solves the closure with the default tolerance and iteration budget.
pub fn solve_z(r: f64, q: f64, params: &ClosureParams) -> Result<f64, ClosureError> {
    solve_z_with(r, q, params, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

/// Safeguarded Newton iteration on `G(Z)` inside the a priori bracket, falling back to
/// bisection whenever the Newton iterate leaves the current bracket.
///
/// The residual test is relative to `max(1, Z^gamma)`.
pub fn solve_z_with(
    r: f64,
    q: f64,
    params: &ClosureParams,
    tol: f64,
    max_iter: usize,
) -> Result<f64, ClosureError> {
    if !(r >= 0.0) || !(q >= 0.0) || !(r + q > 0.0) || !r.is_finite() || !q.is_finite() {
        return Err(ClosureError::Domain { r, q });
    }
    if q == 0.0 {
        return Ok(r);
    }
    let g = params.gamma;
    if r == 0.0 {
        return Ok(q.powf(1.0 / g));
    }
    let (mut lo, mut hi) = bracket(r, q, params);
    let mut z = 0.5 * (lo + hi);
    for _ in 0..max_iter {
        let gz = residual(z, r, q, g);
        let scale = z.powf(g).max(1.0);
        if gz.abs() <= tol * scale {
            // one polishing step keeps the result at round-off level
            let step = gz / residual_slope(z, r, g);
            let polished = z - step;
            return Ok(if polished >= lo && polished <= hi { polished } else { z });
        }
        if gz < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let newton = z - gz / residual_slope(z, r, g);
        z = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    let gz = residual(z, r, q, g);
    if gz.abs() <= tol * z.powf(g).max(1.0) {
        return Ok(z);
    }
    Err(ClosureError::SolverFailure { iterations: max_iter, lo, hi })
}

/// `(dZ/dR, dZ/dQ)` by implicit differentiation of the closure.
pub fn closure_derivatives(z: f64, r: f64, params: &ClosureParams) -> Result<(f64, f64), ClosureError> {
    if !(z > 0.0) {
        return Err(ClosureError::Singularity { z });
    }
    let g = params.gamma;
    let denom = g * z.powf(g - 1.0) - r * (g - 1.0) * z.powf(g - 2.0);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(ClosureError::Singularity { z });
    }
    let dz_dq = 1.0 / denom;
    Ok((z.powf(g - 1.0) * dz_dq, dz_dq))
}

/// `omega1 = Z^{gamma+} / (gamma Z - (gamma-1) R)` and
/// `omega2 = Z^{gamma+} / (gamma Z^gamma - (gamma-1) R Z^(gamma-1))`,
/// i.e. `Z^{gamma+ - 1} dZ/dR` and `Z^{gamma+ - 1} dZ/dQ`.
pub fn omega_coefficients(z: f64, r: f64, params: &ClosureParams) -> Result<(f64, f64), ClosureError> {
    if !(z > 0.0) {
        return Err(ClosureError::Singularity { z });
    }
    let g = params.gamma;
    let zp = z.powf(params.gamma_plus);
    let d1 = g * z - (g - 1.0) * r;
    let d2 = g * z.powf(g) - (g - 1.0) * r * z.powf(g - 1.0);
    if !(d1 > 0.0) || !(d2 > 0.0) {
        return Err(ClosureError::Singularity { z });
    }
    Ok((zp / d1, zp / d2))
}

/// Tolerance used to decide `alpha > 1` and the minus-phase vacuum.
const PHASE_TOL: f64 = 1e-12;

/// Recovers volume fraction, phase densities and pressure from `(R, Q, Z)`.
pub fn recover_phases(r: f64, q: f64, z: f64, params: &ClosureParams) -> Result<PhasePoint, ClosureError> {
    if !(z > 0.0) {
        return Err(ClosureError::Singularity { z });
    }
    let alpha = r / z;
    if alpha > 1.0 + PHASE_TOL {
        return Err(ClosureError::Invariant(format!("alpha = R/Z = {alpha} > 1")));
    }
    if alpha < 0.0 {
        return Err(ClosureError::Invariant(format!("alpha = R/Z = {alpha} < 0")));
    }
    let alpha = alpha.min(1.0);
    let rho_minus = if 1.0 - alpha > PHASE_TOL { Some(q / (1.0 - alpha)) } else { None };
    Ok(PhasePoint { r, q, z, alpha, rho_plus: z, rho_minus, p: z.powf(params.gamma_plus) })
}

/// Convenience: solve and recover in one call.
pub fn phase_point(r: f64, q: f64, params: &ClosureParams) -> Result<PhasePoint, ClosureError> {
    let z = solve_z(r, q, params)?;
    recover_phases(r, q, z, params)
}
