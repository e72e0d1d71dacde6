use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::grid::{Grid, ScalarField};
use crate::model::Problem;

/// Face flux discretization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Bernoulli-weighted two-point flux.
    #[default]
    ExponentialFitting,
    /// Upwinded drift plus central diffusion.
    CentralUpwind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t_final: f64,
    /// Save every `stride` steps (plus the initial and final states).
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_safety")]
    pub safety: f64,
    /// Clamp applied before taking logarithms of densities.
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_stride() -> usize {
    10
}

fn default_safety() -> f64 {
    0.4
}

fn default_floor() -> f64 {
    1e-300
}

impl SolverConfig {
    pub fn new(t_final: f64, stride: usize) -> Self {
        SolverConfig {
            t_final,
            stride,
            safety: default_safety(),
            floor: default_floor(),
            scheme: Scheme::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(SolverError::InvalidConfig(format!(
                "final time must be positive, got {}",
                self.t_final
            )));
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(SolverError::InvalidConfig(format!(
                "safety factor must lie in (0, 1), got {}",
                self.safety
            )));
        }
        if self.stride == 0 {
            return Err(SolverError::InvalidConfig("stride must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),
    #[error("time step {dt} underflows (final time {t_final})")]
    CflViolation { dt: f64, t_final: f64 },
    #[error("density went negative at step {step}, cell {cell}: {value}")]
    NegativeDensity { step: usize, cell: usize, value: f64 },
    #[error("initial density is invalid: {0}")]
    InitialCondition(String),
    #[error("drift evaluation failed at {point:?}: {source}")]
    Eval {
        point: Vec<f64>,
        #[source]
        source: EvalError,
    },
    #[error("problem has dimension {expected}, grid has {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// Bernoulli function `w / (e^w - 1)`.
pub fn bernoulli(w: f64) -> f64 {
    if w == 0.0 {
        1.0
    } else {
        w / w.exp_m1()
    }
}

/// Saved states of a run.
#[derive(Debug, Clone)]
pub struct DensityTrajectory {
    pub times: Vec<f64>,
    pub fields: Vec<ScalarField>,
    pub mass: Vec<f64>,
}

/// Conservative explicit finite-volume stepper with no-flux walls.
///
/// Across each interior face the flux is `F = a p_left - c p_right` with
/// `a, c >= 0` fixed at construction, so a step is a linear map with
/// non-negative off-diagonal weights.
#[derive(Debug, Clone)]
pub struct FpeSolver {
    grid: Grid,
    // per axis, indexed by the left cell of the face
    left: Vec<Vec<f64>>,
    right: Vec<Vec<f64>>,
    max_rate: f64,
    max_drift: f64,
    dt: f64,
    steps: usize,
    stride: usize,
    t_final: f64,
}

impl FpeSolver {
    pub fn new(p: &Problem, grid: &Grid, cfg: &SolverConfig) -> Result<Self, SolverError> {
        cfg.validate()?;
        if p.dim() != grid.dim() {
            return Err(SolverError::DimensionMismatch {
                expected: p.dim(),
                found: grid.dim(),
            });
        }
        let d = grid.dim();
        let len = grid.len();
        let mut left = vec![vec![0.0; len]; d];
        let mut right = vec![vec![0.0; len]; d];
        let mut max_drift = 0.0f64;
        let mut x = vec![0.0; d];
        for k in 0..d {
            let h = grid.spacing()[k];
            for c in 0..len {
                let i = grid.axis_index(c, k);
                if i + 1 == grid.cells()[k] {
                    continue;
                }
                grid.center_into(c, &mut x);
                x[k] = grid.face(k, i + 1);
                let b = p
                    .drift_component_at(k, &x)
                    .map_err(|source| SolverError::Eval {
                        point: x.clone(),
                        source,
                    })?;
                max_drift = max_drift.max(b.abs());
                let (a, r) = match cfg.scheme {
                    Scheme::ExponentialFitting => {
                        let w = h * b;
                        (bernoulli(-w) / h, bernoulli(w) / h)
                    }
                    Scheme::CentralUpwind => (b.max(0.0) + 1.0 / h, -b.min(0.0) + 1.0 / h),
                };
                left[k][c] = a;
                right[k][c] = r;
            }
        }
        let mut max_rate = 0.0f64;
        for c in 0..len {
            let mut rate = 0.0;
            for k in 0..d {
                let h = grid.spacing()[k];
                let i = grid.axis_index(c, k);
                if i + 1 < grid.cells()[k] {
                    rate += left[k][c] / h;
                }
                if i > 0 {
                    rate += right[k][c - grid.stride(k)] / h;
                }
            }
            max_rate = max_rate.max(rate);
        }
        let h_min = grid.spacing().iter().copied().fold(f64::INFINITY, f64::min);
        let mut dt_max = 1.0 / max_rate;
        if max_drift > 0.0 {
            dt_max = dt_max.min(h_min / max_drift);
        }
        dt_max *= cfg.safety;
        let steps_f = (cfg.t_final / dt_max).ceil();
        if !(dt_max > 0.0) || !steps_f.is_finite() || steps_f > 1e12 {
            return Err(SolverError::CflViolation {
                dt: dt_max,
                t_final: cfg.t_final,
            });
        }
        let steps = (steps_f as usize).max(1);
        Ok(FpeSolver {
            grid: grid.clone(),
            left,
            right,
            max_rate,
            max_drift,
            dt: cfg.t_final / steps as f64,
            steps,
            stride: cfg.stride,
            t_final: cfg.t_final,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Largest per-cell outflow rate; `dt * max_rate <= safety` keeps every
    /// update a convex combination.
    pub fn max_rate(&self) -> f64 {
        self.max_rate
    }

    pub fn max_drift(&self) -> f64 {
        self.max_drift
    }

    /// Discrete right-hand side: the flux divergence of `p`.
    pub fn rhs(&self, p: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.accumulate(p, out, 1.0);
    }

    fn accumulate(&self, p: &[f64], out: &mut [f64], scale: f64) {
        let g = &self.grid;
        let len = g.len();
        for k in 0..g.dim() {
            let s = g.stride(k);
            let n = g.cells()[k];
            let f = scale / g.spacing()[k];
            let a = &self.left[k];
            let c = &self.right[k];
            for block in (0..len).step_by(s * n) {
                for i in 0..n - 1 {
                    let base = block + i * s;
                    for l in base..base + s {
                        let r = l + s;
                        let flux = a[l] * p[l] - c[l] * p[r];
                        out[l] -= f * flux;
                        out[r] += f * flux;
                    }
                }
            }
        }
    }

    /// One explicit Euler step from `p` into `next`.
    pub fn step(&self, p: &[f64], next: &mut [f64]) {
        next.copy_from_slice(p);
        self.accumulate(p, next, self.dt);
    }

    /// Runs to the final time, handing saved states to `observe`.
    pub fn run<F>(&self, p0: &ScalarField, mut observe: F) -> Result<ScalarField, SolverError>
    where
        F: FnMut(usize, f64, &ScalarField),
    {
        check_initial(&self.grid, p0)?;
        let mut cur = p0.clone();
        let mut next = vec![0.0; self.grid.len()];
        observe(0, 0.0, &cur);
        for step in 1..=self.steps {
            self.step(cur.values(), &mut next);
            if let Some((cell, &value)) = next.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
                return Err(SolverError::NegativeDensity { step, cell, value });
            }
            cur.values_mut().copy_from_slice(&next);
            if step % self.stride == 0 || step == self.steps {
                let t = if step == self.steps {
                    self.t_final
                } else {
                    step as f64 * self.dt
                };
                observe(step, t, &cur);
            }
        }
        Ok(cur)
    }
}

fn check_initial(grid: &Grid, p0: &ScalarField) -> Result<(), SolverError> {
    if p0.grid() != grid {
        return Err(SolverError::InitialCondition(
            "initial density lives on a different grid".into(),
        ));
    }
    if let Some((c, v)) = p0.values().iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(SolverError::InitialCondition(format!(
            "negative or NaN value {v} at cell {c}"
        )));
    }
    let mass = p0.integrate();
    if (mass - 1.0).abs() > 1e-8 {
        return Err(SolverError::InitialCondition(format!(
            "mass {mass} differs from 1"
        )));
    }
    Ok(())
}

/// Evolves `p0` and keeps every saved field.
pub fn evolve_fpe(p: &Problem, p0: &ScalarField, cfg: &SolverConfig) -> Result<DensityTrajectory, SolverError> {
    let solver = FpeSolver::new(p, p0.grid(), cfg)?;
    let mut traj = DensityTrajectory {
        times: Vec::new(),
        fields: Vec::new(),
        mass: Vec::new(),
    };
    solver.run(p0, |_, t, field| {
        traj.times.push(t);
        traj.mass.push(field.integrate());
        traj.fields.push(field.clone());
    })?;
    Ok(traj)
}

/// Truncated Gaussian `exp(-|x - center|^2 / (2 variance))` normalized on
/// the grid.
pub fn gaussian_density(grid: &Grid, center: &[f64], variance: f64) -> ScalarField {
    normalized(ScalarField::from_fn(grid, |x| {
        let r2: f64 = x.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
        (-0.5 * r2 / variance).exp()
    }))
}

/// Rescales a non-negative field to unit mass.
pub fn normalized(mut f: ScalarField) -> ScalarField {
    let m = f.integrate();
    f.values_mut().iter_mut().for_each(|v| *v /= m);
    f
}
