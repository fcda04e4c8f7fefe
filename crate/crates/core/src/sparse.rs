//! Minimal sparse linear algebra: CSR matrices, conjugate gradients with
//! Jacobi preconditioning, and BiCGStab for the nonsymmetric Newton systems.
//!
//! Solvers are single-threaded and deterministic; iteration caps and
//! tolerances are supplied by the callers.

use crate::{EpsteinLabError, Result};

/// Coordinate-format accumulator used during assembly.
#[derive(Debug, Clone, Default)]
pub struct Triplets {
    pub n: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl Triplets {
    pub fn new(n: usize) -> Self {
        Triplets { n, entries: Vec::new() }
    }

    pub fn push(&mut self, i: usize, j: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((i, j, v));
        }
    }

    pub fn to_csr(&self) -> Csr {
        let mut sorted = self.entries.clone();
        sorted.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0usize; self.n + 1];
        let mut cols = Vec::with_capacity(sorted.len());
        let mut vals: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in sorted {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
            } else {
                row_ptr[i + 1] += 1;
                cols.push(j);
                vals.push(v);
                last = Some((i, j));
            }
        }
        for i in 0..self.n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { n: self.n, row_ptr, cols, vals }
    }
}

/// Square sparse matrix in compressed-sparse-row format.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            y[i] = acc;
        }
    }

    pub fn apply_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.apply(x, &mut y);
        y
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.cols[k] == i {
                    d[i] = self.vals[k];
                }
            }
        }
        d
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            if self.cols[k] == j {
                return self.vals[k];
            }
        }
        0.0
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.cols[k];
                worst = worst.max((self.vals[k] - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn scaled(&self, s: f64) -> Csr {
        let mut out = self.clone();
        for v in &mut out.vals {
            *v *= s;
        }
        out
    }

    /// self + diag(d) entrywise.
    pub fn add_diagonal(&self, d: &[f64]) -> Csr {
        let mut t = Triplets::new(self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                t.push(i, self.cols[k], self.vals[k]);
            }
            t.push(i, i, d[i]);
        }
        t.to_csr()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
}

/// Preconditioned conjugate gradients for symmetric positive definite systems.
/// Jacobi preconditioner; relative tolerance on the residual.
pub fn conjugate_gradient(
    a: &Csr,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.n;
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut r = vec![0.0; n];
    a.apply(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let bnorm = norm(b).max(1e-300);
    let diag = a.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 })
        .collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rnorm = norm(&r);
        if rnorm <= tol * bnorm {
            return Ok((x, SolveReport { iterations: it, residual: rnorm / bnorm }));
        }
        a.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(EpsteinLabError::Solver(format!(
                "CG hit a non-positive curvature direction (p^T A p = {pap:.3e}); matrix is not positive definite"
            )));
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rnorm = norm(&r) / bnorm;
    Err(EpsteinLabError::Solver(format!(
        "CG did not converge in {max_iter} iterations (relative residual {rnorm:.3e})"
    )))
}

/// BiCGStab with Jacobi preconditioning for mildly nonsymmetric systems.
pub fn bicgstab(
    a: &Csr,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = a.n;
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|d| if d.abs() > 1e-300 { 1.0 / d } else { 1.0 })
        .collect();
    let precond = |v: &[f64]| -> Vec<f64> { v.iter().zip(&inv_diag).map(|(x, d)| x * d).collect() };

    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; n]);
    let mut r = vec![0.0; n];
    a.apply(&x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let bnorm = norm(b).max(1e-300);
    let r_hat = r.clone();
    let mut rho = 1.0f64;
    let mut alpha = 1.0f64;
    let mut omega = 1.0f64;
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 0..max_iter {
        let rnorm = norm(&r);
        if rnorm <= tol * bnorm {
            return Ok((x, SolveReport { iterations: it, residual: rnorm / bnorm }));
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new.abs() < 1e-300 {
            return Err(EpsteinLabError::Solver("BiCGStab breakdown (rho = 0)".into()));
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = precond(&p);
        a.apply(&ph, &mut v);
        alpha = rho / dot(&r_hat, &v);
        let s: Vec<f64> = (0..n).map(|i| r[i] - alpha * v[i]).collect();
        if norm(&s) <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok((x, SolveReport { iterations: it + 1, residual: norm(&s) / bnorm }));
        }
        let sh = precond(&s);
        let mut t = vec![0.0; n];
        a.apply(&sh, &mut t);
        let tt = dot(&t, &t);
        if tt.abs() < 1e-300 {
            return Err(EpsteinLabError::Solver("BiCGStab breakdown (t = 0)".into()));
        }
        omega = dot(&t, &s) / tt;
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if omega.abs() < 1e-300 {
            return Err(EpsteinLabError::Solver("BiCGStab breakdown (omega = 0)".into()));
        }
    }
    let rnorm = norm(&r) / bnorm;
    Err(EpsteinLabError::Solver(format!(
        "BiCGStab did not converge in {max_iter} iterations (relative residual {rnorm:.3e})"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplace_1d(n: usize) -> Csr {
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(i, i, 2.0 + 0.1 * (i as f64 % 3.0));
            if i > 0 {
                t.push(i, i - 1, -1.0);
            }
            if i + 1 < n {
                t.push(i, i + 1, -1.0);
            }
        }
        t.to_csr()
    }

    #[test]
    fn cg_solves_spd_system() {
        let n = 200;
        let a = laplace_1d(n);
        let xstar: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.37).sin()).collect();
        let b = a.apply_vec(&xstar);
        let (x, rep) = conjugate_gradient(&a, &b, None, 1e-13, 10 * n).unwrap();
        let err: f64 = x.iter().zip(&xstar).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "err {err}, iters {}", rep.iterations);
    }

    #[test]
    fn bicgstab_solves_nonsymmetric_system() {
        let n = 150;
        let mut t = Triplets::new(n);
        for i in 0..n {
            t.push(i, i, 3.0);
            if i > 0 {
                t.push(i, i - 1, -1.2);
            }
            if i + 1 < n {
                t.push(i, i + 1, -0.8);
            }
        }
        let a = t.to_csr();
        let xstar: Vec<f64> = (0..n).map(|i| ((i as f64) * 0.11).cos()).collect();
        let b = a.apply_vec(&xstar);
        let (x, _) = bicgstab(&a, &b, None, 1e-13, 20 * n).unwrap();
        let err: f64 = x.iter().zip(&xstar).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "err {err}");
    }

    #[test]
    fn triplets_accumulate_duplicates() {
        let mut t = Triplets::new(2);
        t.push(0, 0, 1.0);
        t.push(0, 0, 2.0);
        t.push(1, 0, -1.0);
        let a = t.to_csr();
        assert_eq!(a.get(0, 0), 3.0);
        assert_eq!(a.get(1, 0), -1.0);
        assert_eq!(a.get(1, 1), 0.0);
    }
}
