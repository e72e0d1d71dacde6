//! Small dense matrices and symmetric eigenvalue routines.

use std::ops::{Index, IndexMut};

/// Square row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Matrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Row-major construction; panics if `data.len() != n * n`.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * n, "matrix data length");
        Matrix { n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            assert_eq!(r.len(), n, "matrix must be square");
            data.extend_from_slice(r);
        }
        Matrix { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self[(i, j)] * v[j]).sum())
            .collect()
    }

    /// Quadratic form `v^T M v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                s += self[(i, j)] * v[i] * v[j];
            }
        }
        s
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    /// Largest `|m_ij - m_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// `P M P^T` for the permutation sending axis `k` to `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                out[(perm[i], perm[j])] = self[(i, j)];
            }
        }
        out
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

/// Smallest eigenvalue and unit eigenvector of the symmetric 2x2 matrix
/// `[[a, b], [b, c]]`.
pub fn min_eigenpair_2x2(a: f64, b: f64, c: f64) -> (f64, [f64; 2]) {
    let half_tr = 0.5 * (a + c);
    let radius = (half_tr - a).hypot(b);
    let lambda = half_tr - radius;
    // Two candidate null vectors of M - lambda I; keep the better conditioned.
    let u = [b, lambda - a];
    let w = [lambda - c, b];
    let nu = u[0].hypot(u[1]);
    let nw = w[0].hypot(w[1]);
    let v = if nu == 0.0 && nw == 0.0 {
        if a <= c {
            [1.0, 0.0]
        } else {
            [0.0, 1.0]
        }
    } else if nu >= nw {
        [u[0] / nu, u[1] / nu]
    } else {
        [w[0] / nw, w[1] / nw]
    };
    (lambda, v)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` (stored as `vectors[k]`) pairs with `values[k]`.
    pub vectors: Vec<Vec<f64>>,
    pub sweeps: usize,
}

pub fn jacobi_eigen(m: &Matrix) -> SymmetricEigen {
    let n = m.dim();
    let mut a = m.clone();
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = s;
            a[(j, i)] = s;
        }
    }
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_sq().sqrt().max(f64::MIN_POSITIVE);
    let off = |a: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while sweeps < 100 && off(&a) > 1e-12 * scale.max(1.0) {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    SymmetricEigen {
        values: order.iter().map(|&k| a[(k, k)]).collect(),
        vectors: order
            .iter()
            .map(|&k| (0..n).map(|r| v[(r, k)]).collect())
            .collect(),
        sweeps,
    }
}

/// Smallest eigenvalue and unit eigenvector: closed form for `n <= 2`,
/// Jacobi otherwise.
pub fn min_eigenpair(m: &Matrix) -> (f64, Vec<f64>) {
    match m.dim() {
        1 => (m[(0, 0)], vec![1.0]),
        2 => {
            let (l, v) = min_eigenpair_2x2(m[(0, 0)], m[(0, 1)], m[(1, 1)]);
            (l, v.to_vec())
        }
        _ => {
            let e = jacobi_eigen(m);
            (e.values[0], e.vectors[0].clone())
        }
    }
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    min_eigenpair(m).0
}
