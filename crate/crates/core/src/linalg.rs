//! Small dense/sparse linear algebra kernels: Cholesky for preconditioners,
//! LU for implicit-function adjoints, and CG for the SPD FEM systems.

use crate::error::{Error, Result};

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Dense lower-triangular Cholesky factor of a symmetric matrix (row-major n*n).
/// Fails if a pivot is not strictly positive.
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(Error::Singular(format!(
                            "cholesky pivot {s:.3e} at row {i}"
                        )));
                    }
                    l[i * n + i] = s.sqrt();
                } else {
                    l[i * n + j] = s / l[j * n + j];
                }
            }
        }
        Ok(Cholesky { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// y = L x
    pub fn mul_l(&self, x: &[f64], y: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = 0.0;
            for k in 0..=i {
                s += self.l[i * n + k] * x[k];
            }
            y[i] = s;
        }
    }

    /// Solve L z = b in place.
    pub fn solve_l(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// Solve (L L^T) x = b in place.
    pub fn solve(&self, b: &mut [f64]) {
        let n = self.n;
        self.solve_l(b);
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// v^T (L L^T)^{-1} v without destroying v: equals |L^{-1} v|^2.
    pub fn quad_form_inv(&self, v: &[f64]) -> f64 {
        let mut z = v.to_vec();
        self.solve_l(&mut z);
        dot(&z, &z)
    }
}

/// Dense LU with partial pivoting. Used for the Newton oracle and the
/// nonsymmetric adjoint systems of the implicit FEM gradient.
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    piv: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &[f64], n: usize) -> Result<Self> {
        debug_assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut p = col;
            let mut best = lu[col * n + col].abs();
            for r in (col + 1)..n {
                let v = lu[r * n + col].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return Err(Error::Singular(format!("LU pivot at column {col}")));
            }
            if p != col {
                for k in 0..n {
                    lu.swap(col * n + k, p * n + k);
                }
                piv.swap(col, p);
            }
            let d = lu[col * n + col];
            for r in (col + 1)..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                for k in (col + 1)..n {
                    lu[r * n + k] -= f * lu[col * n + k];
                }
            }
        }
        Ok(Lu { n, lu, piv })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = vec![0.0; n];
        for i in 0..n {
            x[i] = b[self.piv[i]];
        }
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Build from triplets, summing duplicates. Triplets must be within [0, n).
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Csr {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in per_row.iter_mut() {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = 0.0;
                while i < row.len() && row[i].0 == c {
                    v += row[i].1;
                    i += 1;
                }
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Csr {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n);
        for r in 0..self.n {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.values[k] * x[self.col_idx[k]];
            }
            y[r] = s;
        }
    }

    /// y = A^T x (same as mul_vec for symmetric A).
    pub fn mul_transpose_vec(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.values[k] * x[r];
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.col_idx[k] == r {
                    d[r] = self.values[k];
                }
            }
        }
        d
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut a = vec![0.0; self.n * self.n];
        for r in 0..self.n {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                a[r * self.n + self.col_idx[k]] = self.values[k];
            }
        }
        a
    }

    pub fn max_asymmetry(&self) -> f64 {
        let a = self.to_dense();
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((a[i * self.n + j] - a[j * self.n + i]).abs());
            }
        }
        worst
    }
}

/// Jacobi-preconditioned conjugate gradients for SPD systems.
pub fn cg_solve(a: &Csr, b: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let n = a.n;
    let diag = a.diagonal();
    let inv_d: Vec<f64> = diag
        .iter()
        .map(|&d| if d.abs() > 0.0 { 1.0 / d } else { 0.0 })
        .collect();

    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let b_norm = norm2(b).max(f64::MIN_POSITIVE);
    let mut z: Vec<f64> = r.iter().zip(&inv_d).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];

    for _ in 0..max_iter {
        if norm2(&r) <= tol * b_norm {
            return Ok(x);
        }
        a.mul_vec(&p, &mut ap);
        let denom = dot(&p, &ap);
        if denom <= 0.0 || !denom.is_finite() {
            return Err(Error::Singular(format!(
                "CG curvature {denom:.3e}; matrix not SPD"
            )));
        }
        let alpha = rz / denom;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        for i in 0..n {
            z[i] = r[i] * inv_d[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if norm2(&r) <= tol * b_norm {
        Ok(x)
    } else {
        Err(Error::Singular(format!(
            "CG stalled: residual {:.3e} after {max_iter} iterations",
            norm2(&r)
        )))
    }
}

/// Smallest eigenvalue of an SPD CSR matrix via inverse power iteration on
/// dense LU. Test-support quality: fine for the mesh sizes used in checks.
pub fn smallest_eigenvalue(a: &Csr, iters: usize) -> Result<f64> {
    let dense = a.to_dense();
    let lu = Lu::factor(&dense, a.n)?;
    let mut v = vec![1.0; a.n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = lu.solve(&v);
        let nw = norm2(&w);
        if nw == 0.0 {
            return Err(Error::Singular("power iteration collapsed".into()));
        }
        for i in 0..a.n {
            v[i] = w[i] / nw;
        }
        let mut av = vec![0.0; a.n];
        a.mul_vec(&v, &mut av);
        lambda = dot(&v, &av);
    }
    Ok(lambda)
}
