//! Resolvent sweeps and the spectrum of the linearized generator at a constant state.
//!
//! After the densities are eliminated, the resolvent problem at a constant state reads
//! `[lambda rho - mu lap - nu grad div - (K / lambda) G D] v = f` with
//! `K = w1 r* + w2 q*`, `G` the staggered gradient and `D` the staggered divergence.
//! The operators are small enough on desk-scale grids to be handled as dense complex
//! matrices.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::CsMat;

use crate::closure::ClosureParams;
use crate::error::{Error, Result};
use crate::grid::DiffOps;
use crate::linear_core::LinearCoeffs;

pub const POWER_MAX_ITER: usize = 50;
pub const POWER_RTOL: f64 = 1e-6;
/// Seed of the start vector, so sweeps are reproducible.
pub const POWER_SEED: u64 = 0x5eed;

/// Sample of the sector `{|arg lambda| <= pi - epsilon, |lambda| >= lambda0}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorSpec {
    pub epsilon: f64,
    pub lambda0: f64,
    pub samples: Vec<Complex64>,
}

impl SectorSpec {
    /// `n_radii` log-spaced radii in `[lambda0, radius_max]` times `n_rays` equally
    /// spaced rays in `[-(pi - eps), pi - eps]`.
    pub fn grid(epsilon: f64, lambda0: f64, radius_max: f64, n_radii: usize, n_rays: usize) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < std::f64::consts::FRAC_PI_2) {
            return Err(Error::Parameter(format!("sector angle must lie in (0, pi/2), got {epsilon}")));
        }
        if !(lambda0 > 0.0) || !(radius_max >= lambda0) || n_radii < 2 || n_rays < 2 {
            return Err(Error::Parameter(format!("bad sector sampling: lambda0 = {lambda0}, radius_max = {radius_max}, {n_radii} radii, {n_rays} rays")));
        }
        let amax = std::f64::consts::PI - epsilon;
        let mut samples = Vec::with_capacity(n_radii * n_rays);
        for i in 0..n_radii {
            let r = lambda0 * (radius_max / lambda0).powf(i as f64 / (n_radii - 1) as f64);
            for k in 0..n_rays {
                let th = -amax + 2.0 * amax * k as f64 / (n_rays - 1) as f64;
                samples.push(Complex64::from_polar(r, th));
            }
        }
        let spec = Self { epsilon, lambda0, samples };
        spec.check()?;
        Ok(spec)
    }

    /// Default sampling: 16 radii over four decades and 9 rays.
    pub fn default_for(epsilon: f64, lambda0: f64) -> Result<Self> {
        Self::grid(epsilon, lambda0, lambda0 * 1e4, 16, 9)
    }

    pub fn contains(&self, l: Complex64) -> bool {
        let slack = 1e-12;
        l.norm() >= self.lambda0 * (1.0 - slack) && l.arg().abs() <= (std::f64::consts::PI - self.epsilon) * (1.0 + slack)
    }

    pub fn check(&self) -> Result<()> {
        for l in &self.samples {
            if !self.contains(*l) {
                return Err(Error::Parameter(format!("sample {l} lies outside the sector")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolventSample {
    pub lambda_re: f64,
    pub lambda_im: f64,
    /// `|lambda B(lambda)|`
    pub norm_j0: f64,
    /// `|lambda^{1/2} grad B(lambda)|`
    pub norm_j1: f64,
    /// `|grad^2 B(lambda)|`
    pub norm_j2: f64,
    /// set when the solve at this lambda failed; the norms are then NaN
    pub failed: bool,
}

impl ResolventSample {
    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.lambda_re, self.lambda_im)
    }
}

/// Suprema of the three norm proxies over the non-failed samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub sup_j0: f64,
    pub sup_j1: f64,
    pub sup_j2: f64,
    pub failed: usize,
    pub samples: usize,
}

pub fn summarize(samples: &[ResolventSample]) -> SweepSummary {
    let ok = samples.iter().filter(|s| !s.failed);
    let mut out = SweepSummary { sup_j0: 0.0, sup_j1: 0.0, sup_j2: 0.0, failed: samples.iter().filter(|s| s.failed).count(), samples: samples.len() };
    for s in ok {
        out.sup_j0 = out.sup_j0.max(s.norm_j0);
        out.sup_j1 = out.sup_j1.max(s.norm_j1);
        out.sup_j2 = out.sup_j2.max(s.norm_j2);
    }
    out
}

fn dense(m: &CsMat<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.rows(), m.cols());
    for (r, row) in m.outer_iterator().enumerate() {
        for (c, &v) in row.iter() {
            out[(r, c)] += v;
        }
    }
    out
}

fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Largest singular value of `m`: Lanczos iteration on `A = m^H m` with full
/// reorthogonalization, started from a seeded random vector. Stops after
/// [`POWER_MAX_ITER`] steps or once the largest Ritz value moves by less than
/// [`POWER_RTOL`] relative.
pub fn operator_norm(m: &DMatrix<Complex64>) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_SEED);
    let mut x = DVector::from_fn(n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    x /= Complex64::new(x.norm(), 0.0);
    let mh = m.adjoint();
    let mut basis: Vec<DVector<Complex64>> = vec![x];
    let mut alpha: Vec<f64> = vec![];
    let mut beta: Vec<f64> = vec![];
    let mut est = 0.0;
    for k in 0..POWER_MAX_ITER.min(n) {
        let mut w = &mh * (m * &basis[k]);
        alpha.push(basis[k].dotc(&w).re);
        for _ in 0..2 {
            for b in &basis {
                let c = b.dotc(&w);
                w -= b * c;
            }
        }
        let t = DMatrix::from_fn(k + 1, k + 1, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let ritz = t.symmetric_eigenvalues().max().max(0.0).sqrt();
        let bn = w.norm();
        if (ritz - est).abs() <= POWER_RTOL * ritz || bn <= 1e-14 * ritz * ritz {
            return ritz;
        }
        est = ritz;
        beta.push(bn);
        basis.push(w / Complex64::new(bn, 0.0));
    }
    est
}

/// Real pieces of the resolvent problem on a fixed discretization.
#[derive(Debug, Clone)]
pub struct ResolventParts {
    /// velocity unknowns
    pub n: usize,
    pub rho: f64,
    pub mu: f64,
    pub nu: f64,
    pub k: f64,
    pub lap: DMatrix<f64>,
    pub grad_div: DMatrix<f64>,
    pub pressure: DMatrix<f64>,
    /// stacked first derivatives of the velocity (with boundary values filled in)
    pub d1: DMatrix<f64>,
    /// stacked second derivatives
    pub d2: DMatrix<f64>,
}

fn constant_of(coeffs: &LinearCoeffs) -> Result<(f64, f64, f64, f64)> {
    let (r, q) = (coeffs.r0[0], coeffs.q0[0]);
    let uniform = |v: &[f64]| v.iter().all(|x| (x - v[0]).abs() <= 1e-14 * v[0].abs().max(1.0));
    if !uniform(&coeffs.r0) || !uniform(&coeffs.q0) || !uniform(&coeffs.w1) || !uniform(&coeffs.w2) {
        return Err(Error::Coefficient("spectral analysis needs constant coefficients".into()));
    }
    Ok((r, q, coeffs.w1[0], coeffs.w2[0]))
}

impl ResolventParts {
    /// Dirichlet problem on the grid of `ops`; unknowns are the interior velocity values.
    pub fn dirichlet(ops: &DiffOps, coeffs: &LinearCoeffs, params: &ClosureParams) -> Result<Self> {
        let (r, q, w1, w2) = constant_of(coeffs)?;
        let g = &ops.grid;
        let d = g.dim();
        let interior: Vec<usize> = g.interior_nodes().iter().flat_map(|&n| (0..d).map(move |j| n * d + j)).collect();
        let n = interior.len();
        let restrict = |m: &DMatrix<f64>| DMatrix::from_fn(n, n, |a, b| m[(interior[a], interior[b])]);
        let lap = restrict(&dense(ops.vector_laplacian_matrix()));
        let grad_div = restrict(&dense(ops.grad_div_matrix()));
        let gd = dense(ops.grad_cells_matrix()) * dense(ops.div_matrix());
        let pressure = restrict(&gd);
        // embedding of interior unknowns into full node vectors
        let mut emb = DMatrix::zeros(g.n_nodes() * d, n);
        for (a, &i) in interior.iter().enumerate() {
            emb[(i, a)] = 1.0;
        }
        let nn = g.n_nodes();
        let mut d1 = DMatrix::zeros(nn * d * d, nn * d);
        for a in 0..d {
            let da = dense(&ops.d_n[a]);
            for c in 0..d {
                for i in 0..nn {
                    for k in 0..nn {
                        d1[((a * d + c) * nn + i, k * d + c)] = da[(i, k)];
                    }
                }
            }
        }
        let mut d2 = DMatrix::zeros(nn * d * d * d, nn * d);
        for a in 0..d {
            for b in 0..d {
                let dab = dense(ops.d2(a, b));
                for c in 0..d {
                    for i in 0..nn {
                        for k in 0..nn {
                            d2[(((a * d + b) * d + c) * nn + i, k * d + c)] = dab[(i, k)];
                        }
                    }
                }
            }
        }
        Ok(Self { n, rho: r + q, mu: params.mu, nu: params.nu, k: w1 * r + w2 * q, lap, grad_div, pressure, d1: d1 * &emb, d2: d2 * &emb })
    }

    /// One-dimensional periodic problem on `n` points of spacing `h`. All operators are
    /// circulant: the Laplacian is the three-point stencil, the staggered pair is a
    /// forward difference followed by a backward one.
    pub fn periodic_1d(n: usize, h: f64, coeffs: &LinearCoeffs, params: &ClosureParams) -> Result<Self> {
        let (r, q, w1, w2) = constant_of(coeffs)?;
        if n < 3 || !(h > 0.0) {
            return Err(Error::Parameter(format!("periodic grid needs n >= 3 and h > 0, got n = {n}, h = {h}")));
        }
        let fwd = DMatrix::from_fn(n, n, |i, k| if k == (i + 1) % n { 1.0 / h } else if k == i { -1.0 / h } else { 0.0 });
        let bwd = DMatrix::from_fn(n, n, |i, k| if k == i { 1.0 / h } else if k == (i + n - 1) % n { -1.0 / h } else { 0.0 });
        let lap = &bwd * &fwd;
        Ok(Self { n, rho: r + q, mu: params.mu, nu: params.nu, k: w1 * r + w2 * q, grad_div: lap.clone(), pressure: lap.clone(), d1: fwd, d2: lap.clone(), lap })
    }

    /// `A(lambda) = lambda rho - mu lap - nu grad div - (K / lambda) G D`.
    pub fn matrix(&self, lambda: Complex64) -> DMatrix<Complex64> {
        let mut a = to_complex(&self.lap) * Complex64::new(-self.mu, 0.0) + to_complex(&self.grad_div) * Complex64::new(-self.nu, 0.0) - to_complex(&self.pressure) * (Complex64::new(self.k, 0.0) / lambda);
        for i in 0..self.n {
            a[(i, i)] += lambda * self.rho;
        }
        a
    }

    pub fn sample(&self, lambda: Complex64) -> ResolventSample {
        let fail = ResolventSample { lambda_re: lambda.re, lambda_im: lambda.im, norm_j0: f64::NAN, norm_j1: f64::NAN, norm_j2: f64::NAN, failed: true };
        let Some(b) = self.matrix(lambda).lu().try_inverse() else {
            return fail;
        };
        if b.iter().any(|x| !x.is_finite()) {
            return fail;
        }
        let j0 = &b * lambda;
        let j1 = to_complex(&self.d1) * &b * lambda.sqrt();
        let j2 = to_complex(&self.d2) * &b;
        ResolventSample { lambda_re: lambda.re, lambda_im: lambda.im, norm_j0: operator_norm(&j0), norm_j1: operator_norm(&j1), norm_j2: operator_norm(&j2), failed: false }
    }

    /// Evaluates every sample of the sector; order follows `spec.samples`.
    pub fn sweep(&self, spec: &SectorSpec) -> Result<Vec<ResolventSample>> {
        spec.check()?;
        Ok(spec.samples.par_iter().map(|l| self.sample(*l)).collect())
    }
}

/// Resolvent sweep for the Dirichlet problem at a constant state.
pub fn sweep_sector(ops: &DiffOps, coeffs: &LinearCoeffs, params: &ClosureParams, spec: &SectorSpec) -> Result<Vec<ResolventSample>> {
    ResolventParts::dirichlet(ops, coeffs, params)?.sweep(spec)
}

/// Generator of the linearized system at a constant state, acting on
/// `(sigma, eta, v_interior)`.
pub fn generator(ops: &DiffOps, coeffs: &LinearCoeffs, params: &ClosureParams) -> Result<DMatrix<f64>> {
    let (r, q, w1, w2) = constant_of(coeffs)?;
    let parts = ResolventParts::dirichlet(ops, coeffs, params)?;
    let g = &ops.grid;
    let d = g.dim();
    let nc = g.n_cells();
    let interior: Vec<usize> = g.interior_nodes().iter().flat_map(|&n| (0..d).map(move |j| n * d + j)).collect();
    let nv = interior.len();
    let div = dense(ops.div_matrix());
    let grad = dense(ops.grad_cells_matrix());
    let rho = r + q;
    let mut a = DMatrix::zeros(2 * nc + nv, 2 * nc + nv);
    for c in 0..nc {
        for (k, &i) in interior.iter().enumerate() {
            a[(c, 2 * nc + k)] = -r * div[(c, i)];
            a[(nc + c, 2 * nc + k)] = -q * div[(c, i)];
        }
    }
    for (k, &i) in interior.iter().enumerate() {
        for c in 0..nc {
            a[(2 * nc + k, c)] = -w1 * grad[(i, c)] / rho;
            a[(2 * nc + k, nc + c)] = -w2 * grad[(i, c)] / rho;
        }
        for l in 0..nv {
            a[(2 * nc + k, 2 * nc + l)] = (params.mu * parts.lap[(k, l)] + params.nu * parts.grad_div[(k, l)]) / rho;
        }
    }
    Ok(a)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecaySpectrum {
    /// eigenvalues sorted by decreasing real part, kernel included
    pub eigenvalues: Vec<Complex64>,
    /// number of eigenvalues treated as the kernel
    pub kernel: usize,
    /// `-max Re` over the eigenvalues outside the kernel
    pub beta_hat: f64,
    /// set when the Schur iteration did not converge; `eigenvalues` is then empty
    pub warning: Option<String>,
}

/// Relative size below which an eigenvalue counts as part of the kernel.
pub const KERNEL_TOL: f64 = 1e-9;

/// Spectrum of the generator. The kernel (conserved mass fraction and total mass) is
/// excluded from `beta_hat`.
pub fn decay_spectrum(ops: &DiffOps, coeffs: &LinearCoeffs, params: &ClosureParams) -> Result<DecaySpectrum> {
    let a = generator(ops, coeffs, params)?;
    let scale = a.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1.0);
    let Some(schur) = nalgebra::linalg::Schur::try_new(a, 1e-14 * scale, 100_000) else {
        return Ok(DecaySpectrum { eigenvalues: vec![], kernel: 0, beta_hat: f64::NAN, warning: Some("Schur iteration did not converge".into()) });
    };
    let mut ev: Vec<Complex64> = schur.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|x, y| y.re.total_cmp(&x.re).then(y.im.total_cmp(&x.im)));
    let is_kernel = |z: &Complex64| z.norm() <= KERNEL_TOL * scale;
    let kernel = ev.iter().filter(|z| is_kernel(z)).count();
    let beta_hat = -ev.iter().filter(|z| !is_kernel(z)).map(|z| z.re).fold(f64::NEG_INFINITY, f64::max);
    Ok(DecaySpectrum { eigenvalues: ev, kernel, beta_hat, warning: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::linear_core::eliminate_density;
    use std::f64::consts::PI;

    fn params(mu: f64, nu: f64) -> ClosureParams {
        ClosureParams::new(3.0, 1.5, mu, nu).unwrap()
    }

    #[test]
    fn sector_membership() {
        let s = SectorSpec::default_for(PI / 4.0, 1.0).unwrap();
        assert_eq!(s.samples.len(), 144);
        assert!(s.samples.iter().all(|l| s.contains(*l)));
        assert!(!s.contains(Complex64::new(-1.0, 0.0)));
        assert!(!s.contains(Complex64::new(0.5, 0.0)));
        let bad = SectorSpec { samples: vec![Complex64::new(-2.0, 0.1)], ..s };
        assert!(bad.check().is_err());
        assert!(SectorSpec::grid(2.0, 1.0, 10.0, 4, 4).is_err());
    }

    #[test]
    fn power_iteration_on_known_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 4.0, 5.0]).map(|x| Complex64::new(x, 0.0));
        // singular values of [[3,0],[4,5]] are sqrt(45) and sqrt(5)
        assert!((operator_norm(&m) - 45f64.sqrt()).abs() < 1e-5);
    }

    #[test]
    fn real_lambda_matches_elimination_operator() {
        let g = Grid::unit_interval(12).unwrap();
        let ops = DiffOps::new(&g);
        let p = params(1.0, 0.3);
        let co = LinearCoeffs::around_constant(&ops, 1.0, 0.5, &p).unwrap();
        let parts = ResolventParts::dirichlet(&ops, &co, &p).unwrap();
        let lam = 7.0;
        let a = parts.matrix(Complex64::new(lam, 0.0));
        let op = eliminate_density(&ops, &co, &p, 1.0 / lam, 1.0).unwrap();
        let full = dense(&op.matrix);
        let interior = g.interior_nodes();
        for (x, &i) in interior.iter().enumerate() {
            for (y, &k) in interior.iter().enumerate() {
                assert!((a[(x, y)].re - full[(i, k)]).abs() < 1e-9 * full[(i, i)].abs(), "{x} {y}");
                assert_eq!(a[(x, y)].im, 0.0);
            }
        }
    }

    #[test]
    fn large_real_lambda_trend() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params(1.0, 0.0);
        let co = LinearCoeffs::around_constant(&ops, 1.0, 1.0, &p).unwrap();
        let parts = ResolventParts::dirichlet(&ops, &co, &p).unwrap();
        let s = parts.sample(Complex64::new(1e6, 0.0));
        assert!((s.norm_j0 - 0.5).abs() < 1e-3, "{s:?}");
    }

    #[test]
    fn spectrum_kernel_and_positivity() {
        let g = Grid::unit_interval(16).unwrap();
        let ops = DiffOps::new(&g);
        let p = params(1.0, 0.0);
        let co = LinearCoeffs::around_constant(&ops, 1.0, 1.0, &p).unwrap();
        let sp = decay_spectrum(&ops, &co, &p).unwrap();
        assert_eq!(sp.eigenvalues.len(), 2 * 16 + 15);
        // one mass-fraction mode per cell plus the total mass
        assert_eq!(sp.kernel, 17);
        assert!(sp.beta_hat > 0.0);
        assert!(sp.eigenvalues.iter().all(|z| z.re <= 1e-9));
    }

    #[test]
    fn spectrum_1d_matches_mode_analysis() {
        // a Dirichlet sine mode couples to a cosine density mode; with the compact
        // discrete symbols the pair solves rho s^2 + mu a s + K b = 0
        let n = 32;
        let g = Grid::unit_interval(n).unwrap();
        let ops = DiffOps::new(&g);
        let p = params(1.0, 0.0);
        let co = LinearCoeffs::around_constant(&ops, 1.0, 1.0, &p).unwrap();
        let sp = decay_spectrum(&ops, &co, &p).unwrap();
        let h = 1.0 / n as f64;
        let k = co.w1[0] + co.w2[0];
        let mut expected = vec![];
        for m in 1..n {
            let b = (2.0 / h * (m as f64 * PI * h / 2.0).sin()).powi(2);
            let disc = Complex64::new(p.mu * p.mu * b * b - 8.0 * k * b, 0.0).sqrt();
            for sgn in [1.0, -1.0] {
                expected.push((Complex64::new(-p.mu * b, 0.0) + disc * sgn) / 4.0);
            }
        }
        for e in expected {
            let best = sp.eigenvalues.iter().map(|z| (z - e).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-6 * e.norm().max(1.0), "{e} missing, closest {best}");
        }
    }
}
