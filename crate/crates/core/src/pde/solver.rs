//! Sparse storage and the two linear solvers behind Crank–Nicolson: a
//! Thomas factorisation for tridiagonal systems and Jacobi-preconditioned
//! BiCGSTAB for everything else.

use crate::error::{Error, Result};

/// Compressed sparse rows, columns sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(col, value)` lists; duplicates are summed.
    pub fn from_rows(n: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let start = cols.len();
            for (c, v) in row {
                if cols.len() > start && cols[cols.len() - 1] == c {
                    *vals.last_mut().unwrap() += v;
                } else {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map(|p| v[p]).unwrap_or(0.0)
    }

    /// `out = self * x`.
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let (c, v) = self.row(i);
            *o = c.iter().zip(v).map(|(&j, a)| a * x[j]).sum();
        }
    }

    /// `I + scale * self`.
    pub fn shifted_identity(&self, scale: f64) -> Csr {
        let rows = (0..self.n)
            .map(|i| {
                let (c, v) = self.row(i);
                let mut r: Vec<(usize, f64)> = c.iter().zip(v).map(|(&j, a)| (j, scale * a)).collect();
                r.push((i, 1.0));
                r
            })
            .collect();
        Csr::from_rows(self.n, rows)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// Column sums over the given rows.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n];
        for i in 0..self.n {
            let (c, v) = self.row(i);
            for (&j, a) in c.iter().zip(v) {
                s[j] += a;
            }
        }
        s
    }

    pub fn is_tridiagonal(&self) -> bool {
        (0..self.n).all(|i| self.row(i).0.iter().all(|&j| j + 1 >= i && j <= i + 1))
    }
}

/// LU factors of a tridiagonal matrix (no pivoting).
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    lower: Vec<f64>,
    inv_pivot: Vec<f64>,
    upper: Vec<f64>,
}

impl Tridiagonal {
    pub fn factor(m: &Csr) -> Result<Self> {
        let n = m.size();
        let mut lower = vec![0.0; n];
        let mut upper = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_upper = 0.0;
        let mut prev_inv = 0.0;
        for i in 0..n {
            let sub = if i > 0 { m.get(i, i - 1) } else { 0.0 };
            let l = sub * prev_inv;
            let pivot = m.get(i, i) - l * prev_upper;
            if pivot == 0.0 || !pivot.is_finite() {
                return Err(Error::SingularSystem { row: i });
            }
            let up = if i + 1 < n { m.get(i, i + 1) } else { 0.0 };
            lower[i] = l;
            upper[i] = up;
            inv_pivot[i] = 1.0 / pivot;
            prev_upper = up;
            prev_inv = inv_pivot[i];
        }
        Ok(Self {
            lower,
            inv_pivot,
            upper,
        })
    }

    /// Solves in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        for i in 1..n {
            b[i] -= self.lower[i] * b[i - 1];
        }
        b[n - 1] *= self.inv_pivot[n - 1];
        for i in (0..n - 1).rev() {
            b[i] = (b[i] - self.upper[i] * b[i + 1]) * self.inv_pivot[i];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Jacobi-preconditioned BiCGSTAB. `x` holds the initial guess on entry.
/// Returns the iteration count.
pub fn bicgstab(
    a: &Csr,
    inv_diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    rel_tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = b.len();
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok(0);
    }
    let mut r = vec![0.0; n];
    a.mul_into(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    if norm(&r) <= rel_tol * b_norm {
        return Ok(0);
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut res = f64::INFINITY;
    for it in 1..=max_iter {
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || !rho_new.is_finite() {
            return Err(Error::SolverFailed {
                iterations: it,
                residual: res,
            });
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = inv_diag[i] * p[i];
        }
        a.mul_into(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm(&s) <= rel_tol * b_norm {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(it);
        }
        for i in 0..n {
            z[i] = inv_diag[i] * s[i];
        }
        a.mul_into(&z, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
        res = norm(&r) / b_norm;
        if res <= rel_tol {
            return Ok(it);
        }
        if !res.is_finite() || omega == 0.0 {
            return Err(Error::SolverFailed {
                iterations: it,
                residual: res,
            });
        }
    }
    Err(Error::SolverFailed {
        iterations: max_iter,
        residual: res,
    })
}
