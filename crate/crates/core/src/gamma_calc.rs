//! Pointwise Gamma operators, the completing-the-square identity and its
//! integrated forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{self, Compiled, EvalError, Expr};
use crate::grid::{Grid, SampleError, ScalarField};
use crate::linalg::Matrix;
use crate::model::{build_problem, DriftSpec, ModelError, Problem, ProblemSpec};
use crate::tensor::{modified_hessian_from, r_ac_from_jet, r_from_jet, Convention};

/// Agreement required between operator and reduced forms, relative to
/// `max(1, |value|)`.
pub const FORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GammaError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{quantity}: operator form {operator} and reduced form {reduced} disagree at {point:?}")]
    InternalInconsistency {
        quantity: &'static str,
        operator: f64,
        reduced: f64,
        point: Vec<f64>,
    },
    #[error("density is not positive at cell {cell} (value {value})")]
    NonPositiveDensity { cell: usize, value: f64 },
    #[error("density integrates to {mass}, not 1")]
    NotNormalized { mass: f64 },
    #[error("dimension mismatch: problem has {expected}, grid has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// The six operator values at one point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaPointValues {
    pub gamma1: f64,
    pub gamma2_tilde: f64,
    pub gamma_info: f64,
    pub generator: f64,
    pub modified_hessian_sq: f64,
    pub r_form: f64,
}

impl GammaPointValues {
    /// `|Gamma2 + Gamma_I - |hess_mod|^2 - R(grad f, grad f)|`.
    pub fn identity_residual(&self) -> f64 {
        (self.gamma2_tilde + self.gamma_info - self.modified_hessian_sq - self.r_form).abs()
    }
}

/// `L h = (grad log pi, grad h) + lap h` as an expression.
pub fn generator_expr(h: &Expr, p: &Problem) -> Expr {
    let d = p.dim();
    let gu = p.grad_potential();
    expr::sum((0..d).map(|i| -(gu[i].clone() * h.differentiate(i))))
        + expr::sum((0..d).map(|i| h.differentiate(i).differentiate(i)))
}

fn compile_all(es: &[Expr]) -> Vec<Compiled> {
    es.iter().map(Expr::compile).collect()
}

fn eval_all(ps: &[Compiled], x: &[f64]) -> Result<Vec<f64>, EvalError> {
    ps.iter().map(|p| p.evaluate(x)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symbolic derivatives of one test function against one problem, compiled
/// for repeated evaluation.
#[derive(Debug, Clone)]
pub struct GammaOperators {
    dim: usize,
    grad_f: Vec<Compiled>,
    hess_f: Vec<Compiled>,
    generator: Compiled,
    half_l_gamma1: Compiled,
    gamma1_of_generator: Compiled,
    gamma_dot_grad_gamma1: Compiled,
}

/// Raw derivative data at a point.
#[derive(Debug, Clone)]
pub struct PointData {
    pub grad_f: Vec<f64>,
    pub hess_f: Matrix,
    pub generator: f64,
    pub jet: crate::model::Jet,
}

impl PointData {
    pub fn gamma1(&self) -> f64 {
        dot(&self.grad_f, &self.grad_f)
    }

    /// `(grad f, gamma)`.
    pub fn drift_pairing(&self) -> f64 {
        dot(&self.grad_f, &self.jet.gamma)
    }

    /// `|hess f|^2 - hess log pi (grad f, grad f)`.
    pub fn gamma2_reduced(&self) -> f64 {
        self.hess_f.frobenius_sq() + self.jet.hess_u.quadratic_form(&self.grad_f)
    }

    /// `-(hess f grad f, gamma) + L f (grad f, gamma)`.
    pub fn gamma_info_reduced(&self) -> f64 {
        let hg = self.hess_f.mul_vec(&self.grad_f);
        -dot(&hg, &self.jet.gamma) + self.generator * self.drift_pairing()
    }
}

impl GammaOperators {
    pub fn new(f: &Expr, p: &Problem) -> Self {
        let d = p.dim();
        let grad = f.gradient(d);
        let hess = f.hessian(d);
        let lf = generator_expr(f, p);
        let gamma1 = expr::sum(grad.iter().map(|g| g.clone().powi(2)));
        let half_l_gamma1 = Expr::constant(0.5) * generator_expr(&gamma1, p);
        let gamma1_of_generator =
            expr::sum((0..d).map(|i| lf.differentiate(i) * grad[i].clone()));
        let gamma_dot_grad_gamma1 = expr::sum(
            (0..d).map(|i| p.gamma()[i].clone() * gamma1.differentiate(i)),
        );
        GammaOperators {
            dim: d,
            grad_f: compile_all(&grad),
            hess_f: compile_all(&hess),
            generator: lf.compile(),
            half_l_gamma1: half_l_gamma1.compile(),
            gamma1_of_generator: gamma1_of_generator.compile(),
            gamma_dot_grad_gamma1: gamma_dot_grad_gamma1.compile(),
        }
    }

    pub fn point_data(&self, p: &Problem, x: &[f64]) -> Result<PointData, EvalError> {
        Ok(PointData {
            grad_f: eval_all(&self.grad_f, x)?,
            hess_f: Matrix::from_row_major(self.dim, eval_all(&self.hess_f, x)?),
            generator: self.generator.evaluate(x)?,
            jet: p.jet(x)?,
        })
    }

    /// `1/2 L Gamma1 - Gamma1(L f, f)` evaluated from its symbolic pieces.
    pub fn gamma2_operator(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(self.half_l_gamma1.evaluate(x)? - self.gamma1_of_generator.evaluate(x)?)
    }

    /// `-1/2 (gamma, grad Gamma1) + L f (grad f, gamma)` from symbolic pieces.
    pub fn gamma_info_operator(&self, data: &PointData, x: &[f64]) -> Result<f64, EvalError> {
        Ok(-0.5 * self.gamma_dot_grad_gamma1.evaluate(x)? + data.generator * data.drift_pairing())
    }

    /// All operator values at `x`, with both forms of the two Gamma
    /// operators cross-checked.
    pub fn at(&self, p: &Problem, x: &[f64], convention: Convention) -> Result<GammaPointValues, GammaError> {
        let data = self.point_data(p, x)?;
        let g2 = data.gamma2_reduced();
        let g2_op = self.gamma2_operator(x)?;
        agree("gamma2_tilde", g2_op, g2, x)?;
        let gi = data.gamma_info_reduced();
        let gi_op = self.gamma_info_operator(&data, x)?;
        agree("gamma_info", gi_op, gi, x)?;
        let hm = modified_hessian_from(&data.grad_f, &data.hess_f, &data.jet.gamma);
        let r = r_from_jet(&data.jet, convention);
        Ok(GammaPointValues {
            gamma1: data.gamma1(),
            gamma2_tilde: g2,
            gamma_info: gi,
            generator: data.generator,
            modified_hessian_sq: hm.frobenius_sq(),
            r_form: r.quadratic_form(&data.grad_f),
        })
    }
}

fn agree(quantity: &'static str, operator: f64, reduced: f64, x: &[f64]) -> Result<(), GammaError> {
    if (operator - reduced).abs() <= FORM_TOLERANCE * reduced.abs().max(1.0) {
        Ok(())
    } else {
        Err(GammaError::InternalInconsistency {
            quantity,
            operator,
            reduced,
            point: x.to_vec(),
        })
    }
}

pub fn generator_l(f: &Expr, p: &Problem, x: &[f64]) -> Result<f64, EvalError> {
    generator_expr(f, p).evaluate(x)
}

pub fn gamma1(f: &Expr, x: &[f64]) -> Result<f64, EvalError> {
    let d = x.len();
    let mut s = 0.0;
    for g in f.gradient(d) {
        let v = g.evaluate(x)?;
        s += v * v;
    }
    Ok(s)
}

pub fn gamma2_tilde(f: &Expr, p: &Problem, x: &[f64]) -> Result<f64, GammaError> {
    Ok(GammaOperators::new(f, p).at(p, x, Convention::Corrected)?.gamma2_tilde)
}

pub fn gamma_info(f: &Expr, p: &Problem, x: &[f64]) -> Result<f64, GammaError> {
    Ok(GammaOperators::new(f, p).at(p, x, Convention::Corrected)?.gamma_info)
}

pub fn gamma_values(f: &Expr, p: &Problem, x: &[f64]) -> Result<GammaPointValues, GammaError> {
    GammaOperators::new(f, p).at(p, x, Convention::Corrected)
}

pub fn identity_residual(f: &Expr, p: &Problem, x: &[f64]) -> Result<f64, GammaError> {
    Ok(gamma_values(f, p, x)?.identity_residual())
}

/// A named entry of the identity battery.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub name: String,
    pub spec: ProblemSpec,
}

fn skew2(c: f64) -> DriftSpec {
    DriftSpec::Skew {
        c: Some(c),
        j: None,
    }
}

/// Quadratic and quartic potentials with a spread of skew strengths, in two
/// and three dimensions.
pub fn default_catalog() -> Vec<CatalogEntry> {
    let iso = "(x1^2 + x2^2)/2";
    let aniso = "(x1^2 + 3*x2^2)/2";
    let quartic = "(x1^4 + x2^4)/4 + (x1^2 + x2^2)/2 + x1*x2/4";
    let mut out = Vec::new();
    let mut push = |name: String, spec: ProblemSpec| out.push(CatalogEntry { name, spec });
    for c in [0.0, 0.1, -0.1] {
        push(format!("isotropic c={c}"), ProblemSpec::on_cube(2, -1.0, 1.0, iso, skew2(c)));
    }
    for c in [0.1, -0.5, 1.0] {
        push(format!("anisotropic c={c}"), ProblemSpec::on_cube(2, -1.0, 1.0, aniso, skew2(c)));
    }
    for c in [0.5, -0.1, 1.0] {
        push(format!("quartic c={c}"), ProblemSpec::on_cube(2, -1.0, 1.0, quartic, skew2(c)));
    }
    let j3 = vec![
        vec![0.0, 0.4, -0.7],
        vec![-0.4, 0.0, 0.2],
        vec![0.7, -0.2, 0.0],
    ];
    push(
        "3d quadratic skew".into(),
        ProblemSpec::on_cube(
            3,
            -1.0,
            1.0,
            "(x1^2 + 2*x2^2 + 3*x3^2)/2 + x1*x3/4",
            DriftSpec::Skew {
                c: None,
                j: Some(j3.clone()),
            },
        ),
    );
    push(
        "3d quartic skew".into(),
        ProblemSpec::on_cube(
            3,
            -1.0,
            1.0,
            "(x1^4 + x2^4 + x3^4)/4 + (x1^2 + x2^2 + x3^2)/2",
            DriftSpec::Skew {
                c: None,
                j: Some(j3),
            },
        ),
    );
    out
}

/// Random polynomial of degree at most three with coefficients in [-1, 1].
pub fn random_cubic<R: Rng>(dim: usize, rng: &mut R) -> Expr {
    let mut terms = Vec::new();
    terms.push(Expr::constant(rng.random_range(-1.0..1.0)));
    for i in 0..dim {
        terms.push(Expr::constant(rng.random_range(-1.0..1.0)) * Expr::var(i));
        for j in i..dim {
            terms.push(Expr::constant(rng.random_range(-1.0..1.0)) * Expr::var(i) * Expr::var(j));
            for k in j..dim {
                terms.push(
                    Expr::constant(rng.random_range(-1.0..1.0))
                        * Expr::var(i)
                        * Expr::var(j)
                        * Expr::var(k),
                );
            }
        }
    }
    expr::sum(terms)
}

#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub functions: usize,
    pub points_per_function: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub convention: Convention,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig {
            functions: 10,
            points_per_function: 100,
            seed: 20240601,
            tolerance: 1e-9,
            convention: Convention::Corrected,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryEntry {
    pub problem: String,
    pub max_residual: f64,
    pub worst_point: Vec<f64>,
    pub samples: usize,
    pub tolerance: f64,
    pub pass: bool,
}

/// Random points in the problem's box for one battery problem.
fn random_point<R: Rng>(p: &Problem, rng: &mut R) -> Vec<f64> {
    (0..p.dim())
        .map(|k| rng.random_range(p.lower()[k]..p.upper()[k]))
        .collect()
}

/// Runs the completing-the-square identity on random cubic test functions
/// and random points for one problem.
pub fn identity_battery_problem(
    name: &str,
    p: &Problem,
    cfg: &BatteryConfig,
    stream: u64,
) -> Result<BatteryEntry, GammaError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let mut worst = 0.0f64;
    let mut worst_point = vec![0.0; p.dim()];
    let mut samples = 0;
    for _ in 0..cfg.functions {
        let f = random_cubic(p.dim(), &mut rng);
        let ops = GammaOperators::new(&f, p);
        for _ in 0..cfg.points_per_function {
            let x = random_point(p, &mut rng);
            let r = ops.at(p, &x, cfg.convention)?.identity_residual();
            samples += 1;
            if !(r <= worst) {
                worst = r;
                worst_point = x;
            }
        }
    }
    Ok(BatteryEntry {
        problem: name.to_string(),
        max_residual: worst,
        worst_point,
        samples,
        tolerance: cfg.tolerance,
        pass: worst <= cfg.tolerance,
    })
}

/// Runs the battery over a catalog.
pub fn identity_battery(catalog: &[CatalogEntry], cfg: &BatteryConfig) -> Result<Vec<BatteryEntry>, GammaError> {
    catalog
        .iter()
        .enumerate()
        .map(|(k, entry)| {
            let p = build_problem(&entry.spec)?;
            identity_battery_problem(&entry.name, &p, cfg, k as u64)
        })
        .collect()
}

/// Both sides of the integrated identity with `f = log(p / pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WeakFormReport {
    /// Integral of `(Gamma2 + Gamma_I)(f, f) p`.
    pub lhs: f64,
    /// Integral of `(|hess f|^2 + R_AC(grad f, grad f)) p`.
    pub rhs: f64,
    /// `|lhs - rhs| / max(|lhs|, 1)`.
    pub residual: f64,
}

/// Integrated identity for a sampled density, with finite-difference
/// derivatives of `log(p / pi)` and midpoint quadrature.
pub fn weak_form_residual(density: &ScalarField, p: &Problem) -> Result<WeakFormReport, GammaError> {
    let g = density.grid();
    if g.dim() != p.dim() {
        return Err(GammaError::DimensionMismatch {
            expected: p.dim(),
            found: g.dim(),
        });
    }
    for (c, &v) in density.values().iter().enumerate() {
        if !(v > 0.0) {
            return Err(GammaError::NonPositiveDensity { cell: c, value: v });
        }
    }
    let mass = density.integrate();
    if (mass - 1.0).abs() > 1e-6 {
        return Err(GammaError::NotNormalized { mass });
    }
    let d = g.dim();
    let mut logratio = Vec::with_capacity(g.len());
    for (c, &v) in density.values().iter().enumerate() {
        logratio.push(v.ln() - p.log_density(&g.center(c))?);
    }
    let f = ScalarField::new(g.clone(), logratio).expect("grid sized");
    let grad = f.fd_gradient();
    let second: Vec<_> = (0..d).map(|k| grad.component(k).fd_gradient()).collect();

    let vol = g.cell_volume();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut x = vec![0.0; d];
    for c in 0..g.len() {
        g.center_into(c, &mut x);
        let gf = grad.get(c).to_vec();
        let mut hess = Matrix::zeros(d);
        for i in 0..d {
            for j in 0..d {
                hess[(i, j)] = 0.5 * (second[i].get(c)[j] + second[j].get(c)[i]);
            }
        }
        let jet = p.jet(&x)?;
        let generator = -dot(&jet.grad_u, &gf) + hess.trace();
        let data = PointData {
            grad_f: gf,
            hess_f: hess,
            generator,
            jet,
        };
        let w = density.values()[c] * vol;
        lhs += (data.gamma2_reduced() + data.gamma_info_reduced()) * w;
        rhs += (data.hess_f.frobenius_sq() + r_ac_from_jet(&data.jet).quadratic_form(&data.grad_f)) * w;
    }
    Ok(WeakFormReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / lhs.abs().max(1.0),
    })
}

/// Both sides of the integrated dissipation equality for a smooth `phi`,
/// with the boundary term that integration by parts produces on a box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct YanoReport {
    /// Integral of `(Gamma2 + Gamma_I)(phi, phi) pi`.
    pub lhs: f64,
    /// Integral of `L phi (L phi + (grad phi, gamma)) pi`.
    pub rhs: f64,
    /// `|lhs - rhs| / max(|lhs|, 1)`.
    pub residual: f64,
    /// Surface integral of `pi (d_n Gamma1 / 2 - L phi d_n phi - Gamma1 gamma.n / 2)`.
    pub boundary: f64,
    /// `|lhs - rhs - boundary| / max(|lhs|, 1)`.
    pub corrected: f64,
}

pub fn yano_residual(phi: &Expr, p: &Problem, g: &Grid) -> Result<YanoReport, GammaError> {
    if g.dim() != p.dim() {
        return Err(GammaError::DimensionMismatch {
            expected: p.dim(),
            found: g.dim(),
        });
    }
    let ops = GammaOperators::new(phi, p);
    let vol = g.cell_volume();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut x = vec![0.0; g.dim()];
    for c in 0..g.len() {
        g.center_into(c, &mut x);
        let data = ops.point_data(p, &x)?;
        let pi = p.density(&x)?;
        lhs += (data.gamma2_reduced() + data.gamma_info_reduced()) * pi * vol;
        rhs += data.generator * (data.generator + data.drift_pairing()) * pi * vol;
    }
    let mut failure = None;
    let boundary = g.boundary_integral(|x, axis, sign| {
        let data = match ops.point_data(p, x) {
            Ok(d) => d,
            Err(e) => {
                failure.get_or_insert(e);
                return 0.0;
            }
        };
        let pi = match p.density(x) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                return 0.0;
            }
        };
        let hg = data.hess_f.mul_vec(&data.grad_f);
        let dn_gamma1 = sign * 2.0 * hg[axis];
        let dn_phi = sign * data.grad_f[axis];
        let gamma_n = sign * data.jet.gamma[axis];
        pi * (0.5 * dn_gamma1 - data.generator * dn_phi - 0.5 * data.gamma1() * gamma_n)
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    let scale = lhs.abs().max(1.0);
    Ok(YanoReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / scale,
        boundary,
        corrected: (lhs - rhs - boundary).abs() / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn iso(c: f64) -> Problem {
        build_problem(&ProblemSpec::on_cube(2, -1.0, 1.0, "(x1^2 + x2^2)/2", skew2(c))).unwrap()
    }

    fn f(src: &str) -> Expr {
        parse(src, 2).unwrap()
    }

    #[test]
    fn generator_examples() {
        let p = iso(0.0);
        assert_eq!(generator_l(&f("x1"), &p, &[1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(generator_l(&f("2.5"), &p, &[0.3, 0.1]).unwrap(), 0.0);
        assert_eq!(generator_l(&f("(x1^2 + x2^2)/2"), &p, &[0.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn gamma1_examples() {
        assert_eq!(gamma1(&f("x1"), &[0.4, 0.2]).unwrap(), 1.0);
        assert_eq!(gamma1(&f("x1 + x2"), &[0.4, 0.2]).unwrap(), 2.0);
        assert_eq!(gamma1(&f("(x1^2 + 3*x2^2)/2"), &[1.0, -1.0]).unwrap(), 10.0);
    }

    #[test]
    fn gamma2_examples() {
        let p = iso(0.1);
        assert!((gamma2_tilde(&f("x1 + x2"), &p, &[0.3, -0.6]).unwrap() - 2.0).abs() < 1e-14);
        assert_eq!(gamma2_tilde(&f("7"), &p, &[0.3, -0.6]).unwrap(), 0.0);
        let q = build_problem(&ProblemSpec::on_cube(2, -1.0, 1.0, "(x1^2 + 3*x2^2)/2", skew2(0.1))).unwrap();
        assert!((gamma2_tilde(&f("x1"), &q, &[0.5, 0.5]).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gamma_info_examples() {
        let p = iso(0.1);
        assert!((gamma_info(&f("x1 + x2"), &p, &[1.0, 0.0]).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(gamma_info(&f("x1*x2 + x1^3"), &iso(0.0), &[0.2, 0.9]).unwrap(), 0.0);
        // grad f vanishes at the origin
        assert_eq!(gamma_info(&f("x1^2 + x2^2"), &p, &[0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn identity_hand_example() {
        let p = iso(0.1);
        let v = gamma_values(&f("x1 + x2"), &p, &[1.0, 0.0]).unwrap();
        assert!((v.gamma2_tilde + v.gamma_info - 2.1).abs() < 1e-14);
        assert!((v.modified_hessian_sq - 0.00375).abs() < 1e-15);
        assert!((v.r_form - 2.09625).abs() < 1e-14);
        assert!(v.identity_residual() < 1e-14);
    }

    #[test]
    fn definition_convention_breaks_identity() {
        let p = iso(1.0);
        let ops = GammaOperators::new(&f("x1 + 2*x2"), &p);
        let v = ops.at(&p, &[0.8, -0.3], Convention::Definition).unwrap();
        assert!(v.identity_residual() > 1e-2);
    }

    #[test]
    fn stationary_density_has_zero_weak_form() {
        let p = iso(0.1);
        let g = p.grid(32).unwrap();
        let mut pi = p.density_field(&g).unwrap();
        let mass = pi.integrate();
        pi.values_mut().iter_mut().for_each(|v| *v /= mass);
        let r = weak_form_residual(&pi, &p).unwrap();
        assert!(r.lhs.abs() < 1e-10 && r.rhs.abs() < 1e-10);
    }

    #[test]
    fn weak_form_rejects_bad_density() {
        let p = iso(0.1);
        let g = p.grid(8).unwrap();
        let z = ScalarField::constant(&g, 0.0);
        assert!(matches!(
            weak_form_residual(&z, &p),
            Err(GammaError::NonPositiveDensity { .. })
        ));
        let two = ScalarField::constant(&g, 0.5);
        assert!(matches!(
            weak_form_residual(&two, &p),
            Err(GammaError::NotNormalized { .. })
        ));
    }

    #[test]
    fn yano_constant_phi_is_zero() {
        let p = iso(0.1);
        let r = yano_residual(&f("3"), &p, &p.grid(16).unwrap()).unwrap();
        assert_eq!((r.lhs, r.rhs, r.boundary), (0.0, 0.0, 0.0));
    }
}
