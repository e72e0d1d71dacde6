//! Dissipation tensors and smallest-eigenvalue scans.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, Expr};
use crate::grid::{Grid, GridError, GridSpec, MatrixField, ScalarField};
use crate::linalg::{min_eigenvalue, Matrix};
use crate::model::{Jet, Problem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("at cell {cell} (x = {point:?}): {source}")]
    Eval {
        cell: usize,
        point: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Sign attached to the correction matrix `A`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    /// `-hess log pi + A`, the version that closes the dissipation identity.
    #[default]
    Corrected,
    /// `-hess log pi - A` as literally written in the definition. Kept for
    /// comparison only; it fails the identity battery for skew drifts.
    Definition,
}

/// The correction matrix `A` from `grad log pi = -grad U` and `gamma`.
pub fn a_matrix(grad_u: &[f64], gamma: &[f64]) -> Matrix {
    let d = gamma.len();
    let df = d as f64;
    let gsq: f64 = gamma.iter().map(|g| g * g).sum();
    let w = (3.0 - 2.0 * df) / 8.0;
    let mut a = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            a[(i, j)] = if i == j {
                w * gamma[i] * gamma[i] - gsq / 8.0 - gamma[i] * grad_u[i]
            } else {
                w * gamma[i] * gamma[j] - 0.5 * (gamma[i] * grad_u[j] + gamma[j] * grad_u[i])
            };
        }
    }
    a
}

/// The tensor at a point, from precomputed derivative data.
pub fn r_from_jet(jet: &Jet, convention: Convention) -> Matrix {
    let d = jet.gamma.len();
    let a = a_matrix(&jet.grad_u, &jet.gamma);
    let sign = match convention {
        Convention::Corrected => 1.0,
        Convention::Definition => -1.0,
    };
    let mut r = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            r[(i, j)] = jet.hess_u[(i, j)] + sign * a[(i, j)];
        }
    }
    r
}

/// Arnold-Carlen tensor `hess U - sym(grad gamma)` at a point.
pub fn r_ac_from_jet(jet: &Jet) -> Matrix {
    let d = jet.gamma.len();
    let mut r = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            r[(i, j)] = jet.hess_u[(i, j)]
                - 0.5 * (jet.gamma_jacobian[(i, j)] + jet.gamma_jacobian[(j, i)]);
        }
    }
    r
}

pub fn r_at(p: &Problem, x: &[f64], convention: Convention) -> Result<Matrix, EvalError> {
    Ok(r_from_jet(&p.jet(x)?, convention))
}

pub fn r_ac_at(p: &Problem, x: &[f64]) -> Result<Matrix, EvalError> {
    Ok(r_ac_from_jet(&p.jet(x)?))
}

fn scan<F>(grid: &Grid, f: F) -> Result<MatrixField, TensorError>
where
    F: Fn(&[f64]) -> Result<Matrix, EvalError> + Sync,
{
    let mats = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let x = grid.center(c);
            f(&x).map_err(|source| TensorError::Eval {
                cell: c,
                point: x,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(MatrixField::from_matrices(grid, true, &mats)?)
}

fn check_dim(p: &Problem, g: &Grid) -> Result<(), TensorError> {
    if p.dim() != g.dim() {
        return Err(TensorError::DimensionMismatch {
            expected: p.dim(),
            found: g.dim(),
        });
    }
    Ok(())
}

/// The dissipation tensor sampled on `g`.
pub fn r_tensor(p: &Problem, g: &Grid) -> Result<MatrixField, TensorError> {
    r_tensor_with(p, g, Convention::Corrected)
}

pub fn r_tensor_with(p: &Problem, g: &Grid, convention: Convention) -> Result<MatrixField, TensorError> {
    check_dim(p, g)?;
    scan(g, |x| r_at(p, x, convention))
}

/// Two-dimensional skew case written out entrywise in terms of `U` and `c`.
pub fn r_closed_form_2d_at(cf: &ClosedForm2d, x: &[f64]) -> Result<Matrix, EvalError> {
    let c = cf.c;
    let u1 = cf.progs[0].evaluate(x)?;
    let u2 = cf.progs[1].evaluate(x)?;
    let u11 = cf.progs[2].evaluate(x)?;
    let u12 = cf.progs[3].evaluate(x)?;
    let u22 = cf.progs[4].evaluate(x)?;
    let c2 = c * c;
    let m11 = u11 - c2 / 8.0 * u1 * u1 - c2 / 4.0 * u2 * u2 - c * u1 * u2;
    let m12 = u12 + c2 / 8.0 * u1 * u2 - c / 2.0 * (u2 * u2 - u1 * u1);
    let m22 = u22 - c2 / 4.0 * u1 * u1 - c2 / 8.0 * u2 * u2 + c * u1 * u2;
    Ok(Matrix::from_rows(&[vec![m11, m12], vec![m12, m22]]))
}

/// Compiled derivatives of `U` for [`r_closed_form_2d_at`].
pub struct ClosedForm2d {
    c: f64,
    progs: Vec<crate::expr::Compiled>,
}

impl ClosedForm2d {
    pub fn new(u: &Expr, c: f64) -> Self {
        let g = u.gradient(2);
        let h = u.hessian(2);
        let progs = [&g[0], &g[1], &h[0], &h[1], &h[3]]
            .iter()
            .map(|e| e.compile())
            .collect();
        ClosedForm2d { c, progs }
    }
}

pub fn r_closed_form_2d(u: &Expr, c: f64, g: &Grid) -> Result<MatrixField, TensorError> {
    if g.dim() != 2 {
        return Err(TensorError::DimensionMismatch {
            expected: 2,
            found: g.dim(),
        });
    }
    if let Some(k) = u.max_var() {
        if k >= 2 {
            return Err(TensorError::DimensionMismatch {
                expected: 2,
                found: k + 1,
            });
        }
    }
    let cf = ClosedForm2d::new(u, c);
    scan(g, |x| r_closed_form_2d_at(&cf, x))
}

pub fn r_ac(p: &Problem, g: &Grid) -> Result<MatrixField, TensorError> {
    check_dim(p, g)?;
    scan(g, |x| r_ac_at(p, x))
}

/// Smallest eigenvalue per cell.
pub fn lambda_min_field(m: &MatrixField) -> ScalarField {
    let g = m.grid();
    let values = (0..g.len())
        .into_par_iter()
        .map(|c| min_eigenvalue(&m.matrix(c)))
        .collect();
    ScalarField::new(g.clone(), values).expect("one value per cell")
}

/// Global rate: the minimum of a smallest-eigenvalue field.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub field: ScalarField,
    pub lambda: f64,
    pub argmin: usize,
    pub positive: bool,
}

/// Serializable view of a [`RateReport`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateSummary {
    pub lambda: f64,
    pub argmin: Vec<f64>,
    pub positive: bool,
    pub grid: GridSpec,
}

pub fn global_rate(f: &ScalarField) -> RateReport {
    let argmin = f.argmin();
    let lambda = f.values()[argmin];
    RateReport {
        field: f.clone(),
        lambda,
        argmin,
        positive: lambda > 0.0,
    }
}

impl RateReport {
    pub fn argmin_point(&self) -> Vec<f64> {
        self.field.grid().center(self.argmin)
    }

    pub fn summary(&self) -> RateSummary {
        RateSummary {
            lambda: self.lambda,
            argmin: self.argmin_point(),
            positive: self.positive,
            grid: self.field.grid().spec(),
        }
    }
}

/// Scans the tensor on `g` and returns its rate.
pub fn scan_rate(p: &Problem, g: &Grid) -> Result<RateReport, TensorError> {
    Ok(global_rate(&lambda_min_field(&r_tensor(p, g)?)))
}

/// Gamma-shifted Hessian from point values of `grad f`, `hess f` and `gamma`.
pub fn modified_hessian_from(grad_f: &[f64], hess_f: &Matrix, gamma: &[f64]) -> Matrix {
    let d = gamma.len();
    let s: f64 = grad_f.iter().zip(gamma).map(|(a, b)| a * b).sum();
    let mut m = Matrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = if i == j {
                hess_f[(i, i)] + 0.5 * s - 0.5 * grad_f[i] * gamma[i]
            } else {
                hess_f[(i, j)] - 0.25 * (gamma[i] * grad_f[j] + gamma[j] * grad_f[i])
            };
        }
    }
    m
}

pub fn modified_hessian(f: &Expr, p: &Problem, x: &[f64]) -> Result<Matrix, EvalError> {
    let d = p.dim();
    let grad: Vec<f64> = f
        .gradient(d)
        .iter()
        .map(|e| e.evaluate(x))
        .collect::<Result<_, _>>()?;
    let hess: Vec<f64> = f
        .hessian(d)
        .iter()
        .map(|e| e.evaluate(x))
        .collect::<Result<_, _>>()?;
    let gamma = p.gamma_at(x)?;
    Ok(modified_hessian_from(
        &grad,
        &Matrix::from_row_major(d, hess),
        &gamma,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::model::{build_problem, DriftSpec, ProblemSpec};

    fn skew(u: &str, c: f64) -> Problem {
        build_problem(&ProblemSpec::on_cube(
            2,
            -1.0,
            1.0,
            u,
            DriftSpec::Skew {
                c: Some(c),
                j: None,
            },
        ))
        .unwrap()
    }

    fn close(m: &Matrix, want: [[f64; 2]; 2], tol: f64) {
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (m[(i, j)] - want[i][j]).abs() <= tol,
                    "({i},{j}): {} vs {}",
                    m[(i, j)],
                    want[i][j]
                );
            }
        }
    }

    #[test]
    fn hand_evaluated_entries() {
        let p = skew("(x1^2 + x2^2)/2", 0.1);
        close(&r_at(&p, &[0.0, 0.0], Convention::Corrected).unwrap(), [[1.0, 0.0], [0.0, 1.0]], 0.0);
        close(
            &r_at(&p, &[1.0, 1.0], Convention::Corrected).unwrap(),
            [[0.89625, 0.00125], [0.00125, 1.09625]],
            1e-15,
        );
        close(
            &r_at(&p, &[1.0, 0.0], Convention::Corrected).unwrap(),
            [[0.99875, 0.05], [0.05, 0.9975]],
            1e-15,
        );
        let q = skew("(x1^2 + 3*x2^2)/2", 0.1);
        let m = r_at(&q, &[1.0, -1.0], Convention::Corrected).unwrap();
        close(&m, [[1.27625, -0.40375], [-0.40375, 2.68625]], 1e-14);
        assert!((min_eigenvalue(&m) - 1.16882).abs() < 1e-5);
    }

    #[test]
    fn closed_form_examples() {
        let u = parse("(x1^2 + 3*x2^2)/2", 2).unwrap();
        let cf = ClosedForm2d::new(&u, 0.1);
        close(
            &r_closed_form_2d_at(&cf, &[1.0, -1.0]).unwrap(),
            [[1.27625, -0.40375], [-0.40375, 2.68625]],
            1e-14,
        );
        let cf0 = ClosedForm2d::new(&u, 0.0);
        close(&r_closed_form_2d_at(&cf0, &[0.3, 0.9]).unwrap(), [[1.0, 0.0], [0.0, 3.0]], 0.0);
        let g = Grid::uniform(3, -1.0, 1.0, 4).unwrap();
        assert!(matches!(
            r_closed_form_2d(&u, 0.1, &g),
            Err(TensorError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn arnold_carlen_examples() {
        let p = skew("(x1^2 + x2^2)/2", 0.1);
        close(&r_ac_at(&p, &[0.7, -0.2]).unwrap(), [[1.0, 0.0], [0.0, 1.0]], 0.0);
        let q = skew("(x1^2 + 3*x2^2)/2", 0.1);
        let m = r_ac_at(&q, &[0.5, 0.5]).unwrap();
        close(&m, [[1.0, -0.1], [-0.1, 3.0]], 1e-15);
        assert!((min_eigenvalue(&m) - (2.0 - 1.01f64.sqrt())).abs() < 1e-14);
    }

    #[test]
    fn modified_hessian_example() {
        let p = skew("(x1^2 + x2^2)/2", 0.1);
        let f = parse("x1 + x2", 2).unwrap();
        close(
            &modified_hessian(&f, &p, &[1.0, 0.0]).unwrap(),
            [[-0.05, 0.025], [0.025, 0.0]],
            1e-16,
        );
        let k = parse("3", 2).unwrap();
        close(&modified_hessian(&k, &p, &[0.2, 0.4]).unwrap(), [[0.0; 2]; 2], 0.0);
    }

    #[test]
    fn lambda_field_examples() {
        let g = Grid::uniform(2, -1.0, 1.0, 4).unwrap();
        let ident = MatrixField::from_matrices(&g, true, &vec![Matrix::identity(2); g.len()]).unwrap();
        assert!(lambda_min_field(&ident).values().iter().all(|&v| v == 1.0));
        let m = Matrix::from_rows(&[vec![0.89625, 0.00125], vec![0.00125, 1.09625]]);
        assert!((min_eigenvalue(&m) - 0.8962422).abs() < 1e-6);
        let r = global_rate(&ScalarField::constant(&g, 1.0));
        assert_eq!(r.lambda, 1.0);
        assert!(r.positive);
    }
}
