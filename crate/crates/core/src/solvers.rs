//! Linear solvers for the implicit velocity system.
//!
//! 1D systems are banded and are factored directly. 2D systems go through BiCGSTAB with
//! an ILU(0) preconditioner. Neither solver pivots: the velocity operator is a positive
//! mass term plus dissipative blocks, and a vanishing pivot is reported as a failure.

use sprs::CsMat;

use crate::error::{Error, Result};
use crate::grid::spmv;

/// Relative residual target for iterative solves.
pub const DEFAULT_RTOL: f64 = 1e-10;

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// LU factors of a banded matrix, stored row-wise over the band `[i - kl, i + ku]`.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    /// row i, column j at `i * width + (j + kl - i)`
    band: Vec<f64>,
}

impl BandedLu {
    pub fn factor(a: &CsMat<f64>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::Shape(format!("banded solve needs a square matrix, got {:?}", a.shape())));
        }
        let (mut kl, mut ku) = (0usize, 0usize);
        for (i, row) in a.outer_iterator().enumerate() {
            for (j, _) in row.iter() {
                if j < i {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        let width = kl + ku + 1;
        let mut band = vec![0.0; n * width];
        for (i, row) in a.outer_iterator().enumerate() {
            for (j, &v) in row.iter() {
                band[i * width + (j + kl - i)] += v;
            }
        }
        let scale = band.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let pivot = band[k * width + kl];
            if !(pivot.abs() > 1e-14 * scale) {
                return Err(Error::Solver { message: format!("zero pivot at row {k}"), residual: f64::NAN });
            }
            for i in k + 1..(k + kl + 1).min(n) {
                let lik = band[i * width + (k + kl - i)] / pivot;
                if lik == 0.0 {
                    continue;
                }
                band[i * width + (k + kl - i)] = lik;
                for j in k + 1..(k + ku + 1).min(n) {
                    band[i * width + (j + kl - i)] -= lik * band[k * width + (j + kl - k)];
                }
            }
        }
        Ok(Self { n, kl, ku, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, kl, ku) = (self.n, self.kl, self.ku);
        let width = kl + ku + 1;
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for j in i.saturating_sub(kl)..i {
                s -= self.band[i * width + (j + kl - i)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..(i + ku + 1).min(n) {
                s -= self.band[i * width + (j + kl - i)] * x[j];
            }
            x[i] = s / self.band[i * width + kl];
        }
        x
    }
}

/// Incomplete LU factorization with the sparsity pattern of the matrix.
#[derive(Debug, Clone)]
pub struct Ilu0 {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
    diag: Vec<usize>,
}

impl Ilu0 {
    pub fn new(a: &CsMat<f64>) -> Result<Self> {
        let a = if a.is_csr() { a.clone() } else { a.to_csr() };
        let n = a.rows();
        let indptr: Vec<usize> = a.indptr().raw_storage().to_vec();
        let mut indices = Vec::with_capacity(a.nnz());
        let mut data = Vec::with_capacity(a.nnz());
        // sorted column indices per row
        for row in a.outer_iterator() {
            let mut entries: Vec<(usize, f64)> = row.iter().map(|(j, &v)| (j, v)).collect();
            entries.sort_by_key(|e| e.0);
            for (j, v) in entries {
                indices.push(j);
                data.push(v);
            }
        }
        let mut diag = vec![usize::MAX; n];
        for i in 0..n {
            for p in indptr[i]..indptr[i + 1] {
                if indices[p] == i {
                    diag[i] = p;
                }
            }
            if diag[i] == usize::MAX {
                return Err(Error::Solver { message: format!("ILU(0): missing diagonal in row {i}"), residual: f64::NAN });
            }
        }
        let mut pos = vec![usize::MAX; n];
        for i in 0..n {
            for p in indptr[i]..indptr[i + 1] {
                pos[indices[p]] = p;
            }
            for p in indptr[i]..indptr[i + 1] {
                let k = indices[p];
                if k >= i {
                    break;
                }
                let pivot = data[diag[k]];
                if pivot == 0.0 {
                    return Err(Error::Solver { message: format!("ILU(0): zero pivot in row {k}"), residual: f64::NAN });
                }
                let lik = data[p] / pivot;
                data[p] = lik;
                for pk in diag[k] + 1..indptr[k + 1] {
                    let j = indices[pk];
                    let target = pos[j];
                    if target != usize::MAX {
                        data[target] -= lik * data[pk];
                    }
                }
            }
            for p in indptr[i]..indptr[i + 1] {
                pos[indices[p]] = usize::MAX;
            }
            if data[diag[i]] == 0.0 {
                return Err(Error::Solver { message: format!("ILU(0): zero pivot in row {i}"), residual: f64::NAN });
            }
        }
        Ok(Self { indptr, indices, data, diag })
    }

    pub fn apply(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut x = b.to_vec();
        for i in 0..n {
            let mut s = x[i];
            for p in self.indptr[i]..self.diag[i] {
                s -= self.data[p] * x[self.indices[p]];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for p in self.diag[i] + 1..self.indptr[i + 1] {
                s -= self.data[p] * x[self.indices[p]];
            }
            x[i] = s / self.data[self.diag[i]];
        }
        x
    }
}

/// Right-preconditioned BiCGSTAB. Returns the solution and the final relative residual.
pub fn bicgstab(a: &CsMat<f64>, pre: &Ilu0, b: &[f64], x0: Option<&[f64]>, rtol: f64, max_iter: usize) -> Result<(Vec<f64>, f64)> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0.0));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let ax = spmv(a, &x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut res = norm(&r) / bnorm;
    for _ in 0..max_iter {
        if res <= rtol {
            return Ok((x, res));
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let p_hat = pre.apply(&p);
        v = spmv(a, &p_hat);
        let rv = dot(&r_hat, &v);
        if rv == 0.0 {
            break;
        }
        alpha = rho / rv;
        let s: Vec<f64> = r.iter().zip(&v).map(|(r, v)| r - alpha * v).collect();
        if norm(&s) / bnorm <= rtol {
            for i in 0..n {
                x[i] += alpha * p_hat[i];
            }
            let ax = spmv(a, &x);
            res = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
            if res <= rtol {
                return Ok((x, res));
            }
            r = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            continue;
        }
        let s_hat = pre.apply(&s);
        let t = spmv(a, &s_hat);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * p_hat[i] + omega * s_hat[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / bnorm;
    }
    // confirm with the true residual before giving up
    let ax = spmv(a, &x);
    let true_res = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>()) / bnorm;
    if true_res <= rtol {
        return Ok((x, true_res));
    }
    Err(Error::Solver { message: "BiCGSTAB did not reach the residual target".into(), residual: true_res })
}

/// Relative residual `|b - A x| / |b|` (zero when `b = 0` and `x = 0`).
pub fn relative_residual(a: &CsMat<f64>, x: &[f64], b: &[f64]) -> f64 {
    let ax = spmv(a, x);
    let r = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>());
    let bn = norm(b);
    if bn == 0.0 {
        r
    } else {
        r / bn
    }
}
