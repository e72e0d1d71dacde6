//! The model: invariant density `pi = exp(-U) / Z` on a box, the drift `b`
//! and its non-gradient part `gamma = grad log pi - b`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, parse, Compiled, EvalError, Expr, ParseError};
use crate::grid::{Grid, GridError, SampleError, ScalarField};
use crate::linalg::Matrix;

/// Default invariance threshold above which a problem is flagged invalid.
pub const DEFAULT_INVARIANCE_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// How the drift is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DriftSpec {
    /// `b = -grad U`.
    #[default]
    Gradient,
    /// `b = -(I + J) grad U` with constant antisymmetric `J`. In two
    /// dimensions `c` stands for `J = [[0, c], [-c, 0]]`.
    Skew {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        j: Option<Vec<Vec<f64>>>,
    },
    /// Explicit non-gradient part; `b = -grad U - gamma`.
    Gamma { exprs: Vec<String> },
    /// Explicit drift; `gamma = -grad U - b`.
    B { exprs: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(rename = "U")]
    pub potential: String,
    #[serde(default)]
    pub drift: DriftSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ValidationSpec {
    /// Cells per axis of the normalization grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub domain: DomainSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
}

impl ProblemSpec {
    /// Convenience constructor for a cube `[lo, hi]^d`.
    pub fn on_cube(dim: usize, lo: f64, hi: f64, potential: &str, drift: DriftSpec) -> Self {
        ProblemSpec {
            domain: DomainSpec {
                lower: vec![lo; dim],
                upper: vec![hi; dim],
            },
            model: ModelSpec {
                potential: potential.to_string(),
                drift,
            },
            validation: ValidationSpec::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.lower.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("cannot parse {field}: {source}")]
    Parse {
        field: String,
        #[source]
        source: ParseError,
    },
    #[error("{what}: expected {expected} entries, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("skew matrix is not antisymmetric at ({i}, {j})")]
    NotAntisymmetric { i: usize, j: usize },
    #[error("skew drift needs `c` (two dimensions only) or `j`, not both or neither")]
    SkewUnderspecified,
    #[error("bad domain: {0}")]
    Domain(#[from] GridError),
    #[error("exp(-U) is not normalizable on the domain (integral = {integral})")]
    NonNormalizable { integral: f64 },
    #[error("evaluation failed {0}")]
    Eval(#[from] SampleError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftKind {
    Gradient,
    Skew(Matrix),
    Gamma,
    B,
}

/// Invariance diagnostics sampled on a grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    /// max |div(pi gamma)| / pi.
    pub invariance: f64,
    /// max |L* pi| / pi for the forward operator built from `b`.
    pub stationarity: f64,
    /// |integral of pi - 1| on the grid.
    pub normalization: f64,
    pub threshold: f64,
    pub valid: bool,
}

/// Point values of the derivatives the tensors are built from.
#[derive(Debug, Clone)]
pub struct Jet {
    pub grad_u: Vec<f64>,
    pub hess_u: Matrix,
    pub gamma: Vec<f64>,
    /// Entry `(i, j)` is `d gamma_i / d x_j`.
    pub gamma_jacobian: Matrix,
}

#[derive(Debug, Clone)]
struct Programs {
    potential: Compiled,
    grad_u: Vec<Compiled>,
    hess_u: Vec<Compiled>,
    gamma: Vec<Compiled>,
    gamma_jacobian: Vec<Compiled>,
    drift: Vec<Compiled>,
}

/// A validated model. Immutable after [`build_problem`].
#[derive(Debug, Clone)]
pub struct Problem {
    spec: ProblemSpec,
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    kind: DriftKind,
    potential: Expr,
    grad_u: Vec<Expr>,
    hess_u: Vec<Expr>,
    gamma: Vec<Expr>,
    gamma_jacobian: Vec<Expr>,
    drift: Vec<Expr>,
    invariance: Expr,
    stationarity: Expr,
    log_z: f64,
    validation_grid: Grid,
    validation: ValidationReport,
    progs: Programs,
}

fn parse_field(src: &str, dim: usize, field: &str) -> Result<Expr, ModelError> {
    parse(src, dim).map_err(|source| ModelError::Parse {
        field: field.to_string(),
        source,
    })
}

fn parse_list(srcs: &[String], dim: usize, what: &str) -> Result<Vec<Expr>, ModelError> {
    if srcs.len() != dim {
        return Err(ModelError::DimensionMismatch {
            what: what.to_string(),
            expected: dim,
            found: srcs.len(),
        });
    }
    srcs.iter()
        .enumerate()
        .map(|(i, s)| parse_field(s, dim, &format!("{what}[{}]", i + 1)))
        .collect()
}

fn skew_matrix(dim: usize, c: Option<f64>, j: &Option<Vec<Vec<f64>>>) -> Result<Matrix, ModelError> {
    match (c, j) {
        (Some(c), None) => {
            if dim != 2 {
                return Err(ModelError::DimensionMismatch {
                    what: "skew constant c (two dimensions only)".into(),
                    expected: 2,
                    found: dim,
                });
            }
            Ok(Matrix::from_rows(&[vec![0.0, c], vec![-c, 0.0]]))
        }
        (None, Some(rows)) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(ModelError::DimensionMismatch {
                    what: "skew matrix rows".into(),
                    expected: dim,
                    found: rows.len(),
                });
            }
            let m = Matrix::from_rows(rows);
            for i in 0..dim {
                for k in 0..dim {
                    if m[(i, k)] + m[(k, i)] != 0.0 {
                        return Err(ModelError::NotAntisymmetric { i, j: k });
                    }
                }
            }
            Ok(m)
        }
        _ => Err(ModelError::SkewUnderspecified),
    }
}

/// Default normalization resolution per axis.
pub fn default_validation_cells(dim: usize) -> usize {
    match dim {
        1 => 4096,
        2 => 256,
        3 => 64,
        _ => 16,
    }
}

/// Parses, differentiates and normalizes a model.
pub fn build_problem(spec: &ProblemSpec) -> Result<Problem, ModelError> {
    let dim = spec.domain.lower.len();
    if spec.domain.upper.len() != dim {
        return Err(ModelError::DimensionMismatch {
            what: "domain upper bounds".into(),
            expected: dim,
            found: spec.domain.upper.len(),
        });
    }
    let cells = spec
        .validation
        .cells
        .unwrap_or_else(|| default_validation_cells(dim));
    let validation_grid = Grid::new(&spec.domain.lower, &spec.domain.upper, &vec![cells; dim])?;

    let potential = parse_field(&spec.model.potential, dim, "U")?;
    let grad_u = potential.gradient(dim);
    let hess_u = potential.hessian(dim);

    let (kind, gamma, drift) = match &spec.model.drift {
        DriftSpec::Gradient => {
            let gamma = vec![Expr::zero(); dim];
            let drift = grad_u.iter().map(|g| -g.clone()).collect();
            (DriftKind::Gradient, gamma, drift)
        }
        DriftSpec::Skew { c, j } => {
            let m = skew_matrix(dim, *c, j)?;
            let gamma: Vec<Expr> = (0..dim)
                .map(|i| {
                    expr::sum((0..dim).map(|k| Expr::constant(m[(i, k)]) * grad_u[k].clone()))
                })
                .collect();
            let drift = (0..dim)
                .map(|i| -grad_u[i].clone() - gamma[i].clone())
                .collect();
            (DriftKind::Skew(m), gamma, drift)
        }
        DriftSpec::Gamma { exprs } => {
            let gamma = parse_list(exprs, dim, "gamma")?;
            let drift = (0..dim)
                .map(|i| -grad_u[i].clone() - gamma[i].clone())
                .collect();
            (DriftKind::Gamma, gamma, drift)
        }
        DriftSpec::B { exprs } => {
            let drift = parse_list(exprs, dim, "b")?;
            let gamma = (0..dim)
                .map(|i| -grad_u[i].clone() - drift[i].clone())
                .collect();
            (DriftKind::B, gamma, drift)
        }
    };

    let mut gamma_jacobian = Vec::with_capacity(dim * dim);
    for g in &gamma {
        for k in 0..dim {
            gamma_jacobian.push(g.differentiate(k));
        }
    }

    // div(pi gamma) / pi = div gamma - (grad U, gamma)
    let invariance = expr::sum((0..dim).map(|i| gamma_jacobian[i * dim + i].clone()))
        - expr::sum((0..dim).map(|i| grad_u[i].clone() * gamma[i].clone()));
    // (-div(pi b) + lap pi) / pi = -div b + (grad U, b) - lap U + |grad U|^2
    let stationarity = -expr::sum((0..dim).map(|i| drift[i].differentiate(i)))
        + expr::sum((0..dim).map(|i| grad_u[i].clone() * drift[i].clone()))
        - expr::sum((0..dim).map(|i| hess_u[i * dim + i].clone()))
        + expr::sum((0..dim).map(|i| grad_u[i].clone().powi(2)));

    let progs = Programs {
        potential: potential.compile(),
        grad_u: grad_u.iter().map(Expr::compile).collect(),
        hess_u: hess_u.iter().map(Expr::compile).collect(),
        gamma: gamma.iter().map(Expr::compile).collect(),
        gamma_jacobian: gamma_jacobian.iter().map(Expr::compile).collect(),
        drift: drift.iter().map(Expr::compile).collect(),
    };

    let u_field = ScalarField::sample_compiled(&progs.potential, &validation_grid)?;
    let log_z = log_partition(&u_field)?;

    let mut problem = Problem {
        spec: spec.clone(),
        dim,
        lower: spec.domain.lower.clone(),
        upper: spec.domain.upper.clone(),
        kind,
        potential,
        grad_u,
        hess_u,
        gamma,
        gamma_jacobian,
        drift,
        invariance,
        stationarity,
        log_z,
        validation: ValidationReport {
            invariance: 0.0,
            stationarity: 0.0,
            normalization: 0.0,
            threshold: 0.0,
            valid: true,
        },
        validation_grid: validation_grid.clone(),
        progs,
    };
    problem.validation = invariance_residual(&problem, &validation_grid)?;
    Ok(problem)
}

/// `log Z` by midpoint quadrature of `exp(-U)`, shifted to avoid overflow.
fn log_partition(u: &ScalarField) -> Result<f64, ModelError> {
    let vol = u.grid().cell_volume();
    let shift = u.values().iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
    if !shift.is_finite() {
        return Err(ModelError::NonNormalizable { integral: f64::NAN });
    }
    let s: f64 = u.values().iter().map(|v| (-v - shift).exp()).sum::<f64>() * vol;
    let log_z = shift + s.ln();
    if !(s > 0.0) || !log_z.is_finite() {
        return Err(ModelError::NonNormalizable {
            integral: log_z.exp(),
        });
    }
    Ok(log_z)
}

/// Samples the invariance and stationarity residuals and the normalization
/// defect of `pi` on `grid`.
pub fn invariance_residual(p: &Problem, grid: &Grid) -> Result<ValidationReport, SampleError> {
    let r = ScalarField::sample(&p.invariance, grid)?;
    let s = ScalarField::sample(&p.stationarity, grid)?;
    let pi = p.density_field(grid)?;
    let invariance = r.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let stationarity = s.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let normalization = (pi.integrate() - 1.0).abs();
    let threshold = p
        .spec
        .validation
        .threshold
        .unwrap_or(DEFAULT_INVARIANCE_THRESHOLD);
    Ok(ValidationReport {
        invariance,
        stationarity,
        normalization,
        threshold,
        valid: invariance <= threshold && stationarity <= threshold,
    })
}

impl Problem {
    pub fn spec(&self) -> &ProblemSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    pub fn potential(&self) -> &Expr {
        &self.potential
    }

    pub fn grad_potential(&self) -> &[Expr] {
        &self.grad_u
    }

    /// Row-major `d x d`.
    pub fn hessian_potential(&self) -> &[Expr] {
        &self.hess_u
    }

    pub fn gamma(&self) -> &[Expr] {
        &self.gamma
    }

    /// Row-major, entry `i * d + j` is `d gamma_i / d x_j`.
    pub fn gamma_jacobian(&self) -> &[Expr] {
        &self.gamma_jacobian
    }

    pub fn drift(&self) -> &[Expr] {
        &self.drift
    }

    /// Residual expression `div gamma - (grad U, gamma)`.
    pub fn invariance_expr(&self) -> &Expr {
        &self.invariance
    }

    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }

    pub fn log_z(&self) -> f64 {
        self.log_z
    }

    pub fn validation_grid(&self) -> &Grid {
        &self.validation_grid
    }

    pub fn validation(&self) -> &ValidationReport {
        &self.validation
    }

    pub fn is_valid(&self) -> bool {
        self.validation.valid
    }

    /// True when `gamma` is identically zero as a tree.
    pub fn is_reversible(&self) -> bool {
        self.gamma.iter().all(Expr::is_zero)
    }

    /// The skew constant `c` of a two-dimensional skew problem.
    pub fn skew_constant(&self) -> Option<f64> {
        match &self.kind {
            DriftKind::Skew(m) if self.dim == 2 => Some(m[(0, 1)]),
            _ => None,
        }
    }

    /// Grid on the problem's box with `cells` per axis.
    pub fn grid(&self, cells: usize) -> Result<Grid, GridError> {
        Grid::new(&self.lower, &self.upper, &vec![cells; self.dim])
    }

    pub fn potential_at(&self, x: &[f64]) -> Result<f64, EvalError> {
        self.progs.potential.evaluate(x)
    }

    /// `log pi(x) = -U(x) - log Z`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(-self.potential_at(x)? - self.log_z)
    }

    pub fn density(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.log_density(x)?.exp())
    }

    /// `U` sampled at cell centers.
    pub fn potential_field(&self, grid: &Grid) -> Result<ScalarField, SampleError> {
        ScalarField::sample_compiled(&self.progs.potential, grid)
    }

    /// `pi` sampled at cell centers with the quadrature constant `Z`.
    pub fn density_field(&self, grid: &Grid) -> Result<ScalarField, SampleError> {
        let u = ScalarField::sample_compiled(&self.progs.potential, grid)?;
        let lz = self.log_z;
        Ok(u.map(|v| (-v - lz).exp()))
    }

    pub fn drift_at(&self, x: &[f64], out: &mut [f64]) -> Result<(), EvalError> {
        for (o, p) in out.iter_mut().zip(&self.progs.drift) {
            *o = p.evaluate(x)?;
        }
        Ok(())
    }

    pub fn drift_component_at(&self, axis: usize, x: &[f64]) -> Result<f64, EvalError> {
        self.progs.drift[axis].evaluate(x)
    }

    pub fn gamma_at(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.progs.gamma.iter().map(|p| p.evaluate(x)).collect()
    }

    pub fn grad_potential_at(&self, x: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.progs.grad_u.iter().map(|p| p.evaluate(x)).collect()
    }

    /// All first and second derivative data at `x`.
    pub fn jet(&self, x: &[f64]) -> Result<Jet, EvalError> {
        let d = self.dim;
        let eval_all = |ps: &[Compiled]| -> Result<Vec<f64>, EvalError> {
            ps.iter().map(|p| p.evaluate(x)).collect()
        };
        Ok(Jet {
            grad_u: eval_all(&self.progs.grad_u)?,
            hess_u: Matrix::from_row_major(d, eval_all(&self.progs.hess_u)?),
            gamma: eval_all(&self.progs.gamma)?,
            gamma_jacobian: Matrix::from_row_major(d, eval_all(&self.progs.gamma_jacobian)?),
        })
    }
}
