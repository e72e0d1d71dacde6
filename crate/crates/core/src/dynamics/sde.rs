use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::EvalError;
use crate::grid::{Grid, ScalarField};
use crate::model::Problem;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("drift evaluation failed for particle {particle}: {source}")]
    Eval {
        particle: usize,
        #[source]
        source: EvalError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeConfig {
    pub particles: usize,
    pub t_final: f64,
    pub dt: f64,
    pub seed: u64,
    /// Record positions every this many steps (and at the end).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<usize>,
    /// Common starting point; uniform in the box when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
}

/// Particle positions at one time, `dim` coordinates per particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub dim: usize,
    pub time: f64,
    pub seed: u64,
    pub positions: Vec<f64>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.positions.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    /// Sample mean and standard error of `f` over particles.
    pub fn moment<F: Fn(&[f64]) -> f64>(&self, f: F) -> (f64, f64) {
        let n = self.len() as f64;
        let vals: Vec<f64> = (0..self.len()).map(|i| f(self.particle(i))).collect();
        let mean = vals.iter().sum::<f64>() / n;
        let var = if n > 1.0 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, (var / n).sqrt())
    }
}

#[derive(Debug, Clone)]
pub struct SdeRun {
    pub snapshots: Vec<Ensemble>,
}

impl SdeRun {
    pub fn last(&self) -> &Ensemble {
        self.snapshots.last().expect("at least the final ensemble")
    }
}

/// Mirror reflection of `x` into `[lo, hi]`, folding repeatedly for long
/// excursions.
pub fn reflect(x: f64, lo: f64, hi: f64) -> f64 {
    if x >= lo && x <= hi {
        return x;
    }
    let width = hi - lo;
    let mut y = (x - lo).rem_euclid(2.0 * width);
    if y > width {
        y = 2.0 * width - y;
    }
    lo + y
}

/// Euler-Maruyama for `dX = b(X) dt + sqrt(2) dB` with reflection at the
/// walls. Particle `i` draws from its own ChaCha stream `i` of `seed`, so
/// results do not depend on thread count.
pub fn simulate_sde_with(p: &Problem, cfg: &SdeConfig) -> Result<SdeRun, SdeError> {
    if cfg.particles == 0 {
        return Err(SdeError::InvalidConfig("need at least one particle".into()));
    }
    if !(cfg.dt > 0.0) || !(cfg.t_final >= 0.0) {
        return Err(SdeError::InvalidConfig(format!(
            "dt = {} and t_final = {} must be positive",
            cfg.dt, cfg.t_final
        )));
    }
    let d = p.dim();
    if let Some(s) = &cfg.start {
        if s.len() != d {
            return Err(SdeError::InvalidConfig(format!(
                "start point has {} coordinates, problem has {d}",
                s.len()
            )));
        }
    }
    let steps = (cfg.t_final / cfg.dt).ceil() as usize;
    let every = cfg.snapshot_every.unwrap_or(usize::MAX).max(1);
    let mut times = Vec::new();
    let mut record_steps = Vec::new();
    for s in 0..=steps {
        if s == steps || (s % every == 0 && cfg.snapshot_every.is_some()) {
            record_steps.push(s);
            times.push(if s == steps {
                cfg.t_final
            } else {
                s as f64 * cfg.dt
            });
        }
    }

    let (lo, hi) = (p.lower(), p.upper());
    let paths: Vec<Vec<f64>> = (0..cfg.particles)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let mut x: Vec<f64> = match &cfg.start {
                Some(s) => s.clone(),
                None => (0..d).map(|k| rng.random_range(lo[k]..hi[k])).collect(),
            };
            let mut b = vec![0.0; d];
            let mut out = Vec::with_capacity(record_steps.len() * d);
            let mut next_record = 0;
            for s in 0..=steps {
                if next_record < record_steps.len() && record_steps[next_record] == s {
                    out.extend_from_slice(&x);
                    next_record += 1;
                }
                if s == steps {
                    break;
                }
                let h = if s + 1 == steps {
                    cfg.t_final - s as f64 * cfg.dt
                } else {
                    cfg.dt
                };
                p.drift_at(&x, &mut b)
                    .map_err(|source| SdeError::Eval { particle: i, source })?;
                let noise = (2.0 * h).sqrt();
                for k in 0..d {
                    let z: f64 = rng.sample(StandardNormal);
                    x[k] = reflect(x[k] + b[k] * h + noise * z, lo[k], hi[k]);
                }
            }
            Ok(out)
        })
        .collect::<Result<_, SdeError>>()?;

    let snapshots = times
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let mut positions = Vec::with_capacity(cfg.particles * d);
            for path in &paths {
                positions.extend_from_slice(&path[r * d..(r + 1) * d]);
            }
            Ensemble {
                dim: d,
                time: t,
                seed: cfg.seed,
                positions,
            }
        })
        .collect();
    Ok(SdeRun { snapshots })
}

/// Final ensemble of an Euler-Maruyama run started uniformly in the box.
pub fn simulate_sde(p: &Problem, particles: usize, t_final: f64, dt: f64, seed: u64) -> Result<Ensemble, SdeError> {
    let run = simulate_sde_with(
        p,
        &SdeConfig {
            particles,
            t_final,
            dt,
            seed,
            snapshot_every: None,
            start: None,
        },
    )?;
    Ok(run.last().clone())
}

/// Histogram density: counts per cell divided by `N * cell volume`.
/// Particles outside the grid are dropped.
pub fn empirical_density(e: &Ensemble, g: &Grid) -> ScalarField {
    let mut counts = vec![0.0; g.len()];
    for i in 0..e.len() {
        if let Some(c) = g.locate(e.particle(i)) {
            counts[c] += 1.0;
        }
    }
    let w = 1.0 / (e.len() as f64 * g.cell_volume());
    counts.iter_mut().for_each(|v| *v *= w);
    ScalarField::new(g.clone(), counts).expect("grid sized")
}
