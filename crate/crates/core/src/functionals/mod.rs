//! Divergences between grid densities and the invariant density, decay-rate
//! fits, and the inequality checks built on them.

mod transport;

use std::io::{self, Write};

use serde::Serialize;
use thiserror::Error;

use crate::dynamics::DensityTrajectory;
use crate::expr::{EvalError, Expr};
use crate::grid::{Grid, GridError, SampleError, ScalarField};
use crate::model::Problem;

pub use transport::{aggregate, debiased_w2, entropic_cost, w2_between, TransportConfig, W2Estimate, MAX_COARSE};

/// Cells below this fraction of the peak density are left out of the
/// log-gradient stencil.
pub const FISHER_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FunctionalError {
    #[error("need at least {needed} samples, got {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("non-positive value {value} where a logarithm is needed")]
    NonPositiveValue { value: f64 },
    #[error("transport iterations did not converge after {iterations} steps (marginal error {error:e})")]
    NonConvergence { iterations: usize, error: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("evaluation failed at {point:?}: {source}")]
    Eval {
        point: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Grid(GridError),
}

/// `pi` sampled on a grid and normalized there, so that `pi` itself has
/// exactly zero divergence from the reference.
#[derive(Debug, Clone)]
pub struct ReferenceDensity {
    density: ScalarField,
    log_density: Vec<f64>,
}

impl ReferenceDensity {
    pub fn new(p: &Problem, grid: &Grid) -> Result<Self, FunctionalError> {
        if p.dim() != grid.dim() {
            return Err(FunctionalError::InvalidArgument(format!(
                "problem has dimension {}, grid has {}",
                p.dim(),
                grid.dim()
            )));
        }
        let u = p.potential_field(grid)?;
        let u_min = u.min();
        let log_mass = (u
            .values()
            .iter()
            .map(|v| (u_min - v).exp())
            .sum::<f64>()
            * grid.cell_volume())
        .ln()
            - u_min;
        let log_density: Vec<f64> = u.values().iter().map(|v| -v - log_mass).collect();
        let density = ScalarField::new(grid.clone(), log_density.iter().map(|v| v.exp()).collect())
            .map_err(FunctionalError::Grid)?;
        Ok(ReferenceDensity {
            density,
            log_density,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.density.grid()
    }

    pub fn density(&self) -> &ScalarField {
        &self.density
    }

    pub fn log_density(&self) -> &[f64] {
        &self.log_density
    }

    fn check(&self, f: &ScalarField) -> Result<(), FunctionalError> {
        if f.grid() != self.grid() {
            return Err(FunctionalError::InvalidArgument(
                "density and reference live on different grids".into(),
            ));
        }
        Ok(())
    }

    /// `int |grad log(p / pi)|^2 p`, skipping cells below the density floor.
    pub fn fisher_information(&self, f: &ScalarField) -> Result<f64, FunctionalError> {
        self.check(f)?;
        let cut = FISHER_FLOOR * f.max();
        let mask: Vec<bool> = f.values().iter().map(|&v| v > 0.0 && v >= cut).collect();
        let ratio: Vec<f64> = f
            .values()
            .iter()
            .zip(&self.log_density)
            .zip(&mask)
            .map(|((&v, &lp), &m)| if m { v.ln() - lp } else { 0.0 })
            .collect();
        let ratio = ScalarField::new(self.grid().clone(), ratio).map_err(FunctionalError::Grid)?;
        let grad = ratio.fd_gradient_masked(&mask);
        let d = self.grid().dim();
        let sum: f64 = grad
            .values()
            .chunks(d)
            .zip(f.values())
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((g, &v), _)| v * g.iter().map(|x| x * x).sum::<f64>())
            .sum();
        Ok(sum * self.grid().cell_volume())
    }

    /// `int p log(p / pi)` with `0 log 0 = 0`.
    pub fn kl_divergence(&self, f: &ScalarField) -> Result<f64, FunctionalError> {
        self.check(f)?;
        let sum: f64 = f
            .values()
            .iter()
            .zip(&self.log_density)
            .filter(|(v, _)| **v > 0.0)
            .map(|(&v, &lp)| v * (v.ln() - lp))
            .sum();
        Ok(sum * self.grid().cell_volume())
    }

    pub fn l1_distance(&self, f: &ScalarField) -> Result<f64, FunctionalError> {
        self.check(f)?;
        let sum: f64 = f
            .values()
            .iter()
            .zip(self.density.values())
            .map(|(a, b)| (a - b).abs())
            .sum();
        Ok(sum * self.grid().cell_volume())
    }

    pub fn wasserstein2(&self, f: &ScalarField, cfg: &TransportConfig) -> Result<W2Estimate, FunctionalError> {
        self.check(f)?;
        w2_between(f, &self.density, cfg)
    }
}

pub fn fisher_information(field: &ScalarField, p: &Problem) -> Result<f64, FunctionalError> {
    ReferenceDensity::new(p, field.grid())?.fisher_information(field)
}

pub fn kl_divergence(field: &ScalarField, p: &Problem) -> Result<f64, FunctionalError> {
    ReferenceDensity::new(p, field.grid())?.kl_divergence(field)
}

pub fn l1_distance(field: &ScalarField, p: &Problem) -> Result<f64, FunctionalError> {
    ReferenceDensity::new(p, field.grid())?.l1_distance(field)
}

/// Debiased entropic W2 against `pi` on a `coarse`-per-axis aggregation.
pub fn wasserstein2(field: &ScalarField, p: &Problem, eps: f64, coarse: usize) -> Result<W2Estimate, FunctionalError> {
    let cfg = TransportConfig {
        coarse,
        eps: Some(eps),
        ..TransportConfig::default()
    };
    ReferenceDensity::new(p, field.grid())?.wasserstein2(field, &cfg)
}

/// Functionals of `p_t` against `pi` at saved times.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DecayTrace {
    pub times: Vec<f64>,
    pub mass: Vec<f64>,
    pub fisher: Vec<f64>,
    pub kl: Vec<f64>,
    pub l1: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w2: Option<Vec<W2Estimate>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Functional {
    Fisher,
    Kl,
}

impl DecayTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Appends the functionals of one saved field.
    pub fn record(&mut self, t: f64, field: &ScalarField, reference: &ReferenceDensity) -> Result<(), FunctionalError> {
        self.times.push(t);
        self.mass.push(field.integrate());
        self.fisher.push(reference.fisher_information(field)?);
        self.kl.push(reference.kl_divergence(field)?);
        self.l1.push(reference.l1_distance(field)?);
        Ok(())
    }

    pub fn from_trajectory(traj: &DensityTrajectory, p: &Problem) -> Result<Self, FunctionalError> {
        let mut trace = DecayTrace::default();
        let Some(first) = traj.fields.first() else {
            return Ok(trace);
        };
        let reference = ReferenceDensity::new(p, first.grid())?;
        for (t, f) in traj.times.iter().zip(&traj.fields) {
            trace.record(*t, f, &reference)?;
        }
        Ok(trace)
    }

    pub fn values(&self, which: Functional) -> &[f64] {
        match which {
            Functional::Fisher => &self.fisher,
            Functional::Kl => &self.kl,
        }
    }

    /// CSV with header `t,mass,fisher,kl,l1` (plus `w2` when present).
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let w2 = self.w2.as_ref();
        writeln!(w, "t,mass,fisher,kl,l1{}", if w2.is_some() { ",w2" } else { "" })?;
        for i in 0..self.len() {
            write!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                self.times[i], self.mass[i], self.fisher[i], self.kl[i], self.l1[i]
            )?;
            if let Some(v) = w2 {
                write!(w, ",{:.16e}", v[i].value)?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Least-squares decay rate `-slope` of `log value` against `t` over the
/// samples with `t` in `window`.
pub fn decay_rate(trace: &DecayTrace, which: Functional, window: (f64, f64)) -> Result<f64, FunctionalError> {
    let vals = trace.values(which);
    let pts: Vec<(f64, f64)> = trace
        .times
        .iter()
        .zip(vals)
        .filter(|(t, _)| **t >= window.0 && **t <= window.1)
        .map(|(&t, &v)| (t, v))
        .collect();
    if pts.len() < 5 {
        return Err(FunctionalError::InsufficientData {
            needed: 5,
            found: pts.len(),
        });
    }
    if let Some(&(_, v)) = pts.iter().find(|(_, v)| !(*v > 0.0)) {
        return Err(FunctionalError::NonPositiveValue { value: v });
    }
    let n = pts.len() as f64;
    let tm = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let ym = pts.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(t, v) in &pts {
        sxy += (t - tm) * (v.ln() - ym);
        sxx += (t - tm) * (t - tm);
    }
    Ok(-sxy / sxx)
}

/// Outcome of one inequality check. `margin` is the smallest
/// right-hand-side minus left-hand-side seen.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub lambda: Option<f64>,
    pub margin: f64,
    pub worst_time: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_point: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckReport {
    pub fn new(name: impl Into<String>, lambda: Option<f64>, margin: f64, tolerance: f64) -> Self {
        CheckReport {
            name: name.into(),
            lambda,
            margin,
            worst_time: None,
            worst_point: None,
            detail: None,
            tolerance,
            pass: margin >= -tolerance,
        }
    }
}

/// `log I(p_t) <= log I(p_0) - 2 lambda t` at every saved time.
pub fn check_theorem1(trace: &DecayTrace, lambda: f64, tol: f64) -> Result<CheckReport, FunctionalError> {
    if trace.is_empty() {
        return Err(FunctionalError::InsufficientData { needed: 1, found: 0 });
    }
    let i0 = trace.fisher[0];
    let mut report = CheckReport::new("fisher-decay", Some(lambda), 0.0, tol);
    if !(i0 > 0.0) {
        report.detail = Some("initial Fisher information is zero".into());
        return Ok(report);
    }
    let mut worst = (f64::INFINITY, 0.0);
    for (&t, &i) in trace.times.iter().zip(&trace.fisher) {
        if !(i > 0.0) {
            continue;
        }
        let margin = i0.ln() - 2.0 * lambda * t - i.ln();
        if margin < worst.0 {
            worst = (margin, t);
        }
    }
    let mut r = CheckReport::new("fisher-decay", Some(lambda), worst.0, tol);
    r.worst_time = Some(worst.1);
    Ok(r)
}

/// `D_KL(p||pi) <= I(p||pi) / (2 lambda)` for one density.
pub fn check_lsi(field: &ScalarField, p: &Problem, lambda: f64) -> Result<CheckReport, FunctionalError> {
    let r = ReferenceDensity::new(p, field.grid())?;
    check_lsi_with(field, &r, lambda, 0.0)
}

pub fn check_lsi_with(field: &ScalarField, reference: &ReferenceDensity, lambda: f64, tol: f64) -> Result<CheckReport, FunctionalError> {
    if !(lambda > 0.0) {
        return Err(FunctionalError::InvalidArgument(format!(
            "rate must be positive, got {lambda}"
        )));
    }
    let i = reference.fisher_information(field)?;
    let kl = reference.kl_divergence(field)?;
    Ok(CheckReport::new("log-sobolev", Some(lambda), i / (2.0 * lambda) - kl, tol))
}

/// LSI along a trace.
pub fn check_lsi_trace(trace: &DecayTrace, lambda: f64, tol: f64) -> CheckReport {
    let mut worst = (f64::INFINITY, 0.0);
    for ((&t, &i), &kl) in trace.times.iter().zip(&trace.fisher).zip(&trace.kl) {
        let m = i / (2.0 * lambda) - kl;
        if m < worst.0 {
            worst = (m, t);
        }
    }
    let mut r = CheckReport::new("log-sobolev", Some(lambda), worst.0, tol);
    r.worst_time = Some(worst.1);
    r
}

/// Relative errors `|dD/dt + I| / I` at interior saved times, using a
/// three-point difference on possibly uneven time steps.
pub fn entropy_production_errors(trace: &DecayTrace) -> Result<Vec<(f64, f64)>, FunctionalError> {
    let n = trace.len();
    if n < 3 {
        return Err(FunctionalError::InsufficientData { needed: 3, found: n });
    }
    let (t, d) = (&trace.times, &trace.kl);
    Ok((1..n - 1)
        .map(|i| {
            let h1 = t[i] - t[i - 1];
            let h2 = t[i + 1] - t[i];
            let rate = -h2 / (h1 * (h1 + h2)) * d[i - 1]
                + (h2 - h1) / (h1 * h2) * d[i]
                + h1 / (h2 * (h1 + h2)) * d[i + 1];
            let i_t = trace.fisher[i];
            (t[i], (rate + i_t).abs() / i_t.max(1e-10))
        })
        .collect())
}

pub fn check_entropy_production(trace: &DecayTrace, tol: f64) -> Result<CheckReport, FunctionalError> {
    let errs = entropy_production_errors(trace)?;
    let (t, e) = errs
        .iter()
        .copied()
        .fold((0.0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    let mut r = CheckReport::new("entropy-production", None, -e, tol);
    r.worst_time = Some(t);
    Ok(r)
}

/// `Var_pi(h) <= (1/lambda) int (|grad h|^2 - h (grad h, gamma)) pi`, all
/// integrands symbolic, `pi` normalized on `g`.
pub fn check_poincare(h: &Expr, p: &Problem, lambda: f64, g: &Grid) -> Result<CheckReport, FunctionalError> {
    let (lhs, rhs) = poincare_sides(h, p, lambda, g)?;
    let mut r = CheckReport::new("poincare", Some(lambda), rhs - lhs, 1e-6);
    r.detail = Some(format!("h = {h}, variance = {lhs:.10e}, bound = {rhs:.10e}"));
    Ok(r)
}

/// Variance and right-hand side of the non-reversible Poincare inequality.
pub fn poincare_sides(h: &Expr, p: &Problem, lambda: f64, g: &Grid) -> Result<(f64, f64), FunctionalError> {
    if !(lambda > 0.0) {
        return Err(FunctionalError::InvalidArgument(format!(
            "rate must be positive, got {lambda}"
        )));
    }
    let d = p.dim();
    if h.max_var().is_some_and(|m| m >= d) {
        return Err(FunctionalError::InvalidArgument(format!(
            "test function uses a variable beyond dimension {d}"
        )));
    }
    let reference = ReferenceDensity::new(p, g)?;
    let pi = reference.density().values();
    let grad = h.gradient(d);
    let gamma = p.gamma();
    let energy = crate::expr::sum((0..d).map(|k| {
        grad[k].clone() * grad[k].clone() - h.clone() * grad[k].clone() * gamma[k].clone()
    }));
    let hv = ScalarField::sample(h, g)?;
    let ev = ScalarField::sample(&energy, g)?;
    let vol = g.cell_volume();
    let mean: f64 = hv.values().iter().zip(pi).map(|(a, w)| a * w).sum::<f64>() * vol;
    let var: f64 = hv
        .values()
        .iter()
        .zip(pi)
        .map(|(a, w)| (a - mean) * (a - mean) * w)
        .sum::<f64>()
        * vol;
    let rhs = ev.values().iter().zip(pi).map(|(a, w)| a * w).sum::<f64>() * vol / lambda;
    Ok((var, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corollary3Tolerance {
    pub kl: f64,
    pub l1: f64,
    /// Added to the resolution error bar of each W2 estimate.
    pub w2: f64,
}

impl Default for Corollary3Tolerance {
    fn default() -> Self {
        Corollary3Tolerance {
            kl: 1e-6,
            l1: 1e-4,
            w2: 0.0,
        }
    }
}

/// KL, L1 and (when present) W2 decay bounds from the initial divergence.
pub fn check_corollary3(trace: &DecayTrace, lambda: f64, d0: f64, tol: Corollary3Tolerance) -> Vec<CheckReport> {
    let worst = |name: &str, tol: f64, margin: &dyn Fn(usize) -> f64| {
        let mut best = (f64::INFINITY, 0.0);
        for i in 0..trace.len() {
            let m = margin(i);
            if m < best.0 {
                best = (m, trace.times[i]);
            }
        }
        let mut r = CheckReport::new(name, Some(lambda), best.0, tol);
        r.worst_time = Some(best.1);
        r
    };
    let t = &trace.times;
    let mut out = vec![
        worst("kl-decay", tol.kl, &|i| d0 * (-2.0 * lambda * t[i]).exp() - trace.kl[i]),
        worst("l1-decay", tol.l1, &|i| {
            (2.0 * d0).sqrt() * (-lambda * t[i]).exp() - trace.l1[i]
        }),
    ];
    if let Some(w2) = &trace.w2 {
        let bar = w2.iter().map(|e| e.error_bar).fold(0.0, f64::max);
        out.push(worst("w2-decay", tol.w2 + bar, &|i| {
            (2.0 * d0 / lambda).sqrt() * (-lambda * t[i]).exp() - w2[i].value
        }));
    }
    out
}
