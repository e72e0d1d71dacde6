//! Debiased entropic optimal transport on a coarse tensor grid.

use serde::Serialize;

use crate::grid::{Grid, GridError, ScalarField};

use super::FunctionalError;

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    /// Cells per axis of the aggregation grid.
    pub coarse: usize,
    /// Entropic blur; `None` picks the squared coarse spacing.
    pub eps: Option<f64>,
    /// Target column-marginal L1 error.
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            coarse: 32,
            eps: None,
            tolerance: 1e-9,
            max_iter: 20_000,
        }
    }
}

pub const MAX_COARSE: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W2Estimate {
    pub value: f64,
    /// Resolution limit of the aggregation: one coarse cell diagonal.
    pub error_bar: f64,
    pub eps: f64,
    pub iterations: usize,
}

/// Sums cell masses of `field` into `coarse` cells per axis over the same
/// box and rescales them to total 1.
pub fn aggregate(field: &ScalarField, coarse: usize) -> Result<(Grid, Vec<f64>), FunctionalError> {
    let fine = field.grid();
    let g = fine
        .with_cells(&vec![coarse; fine.dim()])
        .map_err(FunctionalError::Grid)?;
    let mut mass = vec![0.0; g.len()];
    let mut x = vec![0.0; fine.dim()];
    for (c, &v) in field.values().iter().enumerate() {
        fine.center_into(c, &mut x);
        let j = g.locate(&x).ok_or(FunctionalError::Grid(GridError::Overflow))?;
        mass[j] += v.max(0.0);
    }
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return Err(FunctionalError::NonPositiveValue { value: total });
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok((g, mass))
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

struct Kernel {
    grid: Grid,
    // per axis, row-major n x n squared distances
    costs: Vec<Vec<f64>>,
}

impl Kernel {
    fn new(grid: &Grid) -> Self {
        let costs = (0..grid.dim())
            .map(|k| {
                let n = grid.cells()[k];
                let mut c = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        let d = grid.coord(k, i) - grid.coord(k, j);
                        c[i * n + j] = d * d;
                    }
                }
                c
            })
            .collect();
        Kernel {
            grid: grid.clone(),
            costs,
        }
    }

    /// `out_i = log sum_j exp(w_j - |x_i - x_j|^2 / eps)`, one axis at a time.
    fn soft_min(&self, w: &[f64], eps: f64) -> Vec<f64> {
        let g = &self.grid;
        let len = g.len();
        let mut cur = w.to_vec();
        let mut next = vec![0.0; len];
        let mut line = Vec::new();
        for k in 0..g.dim() {
            let n = g.cells()[k];
            let s = g.stride(k);
            let cost = &self.costs[k];
            for block in (0..len).step_by(s * n) {
                for off in 0..s {
                    let base = block + off;
                    line.clear();
                    line.extend((0..n).map(|j| cur[base + j * s]));
                    for i in 0..n {
                        let row = &cost[i * n..(i + 1) * n];
                        next[base + i * s] =
                            log_sum_exp(line.iter().zip(row).map(|(v, c)| v - c / eps));
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

fn logs(m: &[f64]) -> Vec<f64> {
    m.iter()
        .map(|&v| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY })
        .collect()
}

fn potential_update(k: &Kernel, log_mass: &[f64], other: &[f64], eps: f64) -> Vec<f64> {
    let w: Vec<f64> = log_mass.iter().zip(other).map(|(l, o)| l + o / eps).collect();
    k.soft_min(&w, eps).into_iter().map(|v| -eps * v).collect()
}

fn dual_value(a: &[f64], f: &[f64], b: &[f64], g: &[f64]) -> f64 {
    let side = |m: &[f64], p: &[f64]| -> f64 {
        m.iter()
            .zip(p)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, v)| w * v)
            .sum()
    };
    side(a, f) + side(b, g)
}

fn schedule(diameter_sq: f64, eps: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut e = diameter_sq.max(eps);
    while e > eps {
        out.push(e);
        e *= 0.5;
    }
    out.push(eps);
    out
}

/// Entropic transport cost between two mass vectors on `grid`.
/// Returns the dual value and the number of iterations at the final blur.
pub fn entropic_cost(grid: &Grid, a: &[f64], b: &[f64], eps: f64, tolerance: f64, max_iter: usize) -> Result<(f64, usize), FunctionalError> {
    let k = Kernel::new(grid);
    let (la, lb) = (logs(a), logs(b));
    let mut f = vec![0.0; a.len()];
    let mut g = vec![0.0; b.len()];
    let diam: f64 = (0..grid.dim())
        .map(|k| (grid.upper()[k] - grid.lower()[k]).powi(2))
        .sum();
    let stages = schedule(diam, eps);
    let last = stages.len() - 1;
    for (s, &e) in stages.iter().enumerate() {
        let (tol, cap) = if s == last {
            (tolerance, max_iter)
        } else {
            (1e-3, 200)
        };
        let mut converged = false;
        let mut err = f64::INFINITY;
        let mut it = 0;
        while it < cap {
            it += 1;
            f = potential_update(&k, &lb, &g, e);
            let g_next = potential_update(&k, &la, &f, e);
            err = b
                .iter()
                .zip(g.iter().zip(&g_next))
                .filter(|(w, _)| **w > 0.0)
                .map(|(w, (old, new))| w * ((old - new) / e).exp_m1().abs())
                .sum();
            g = g_next;
            if err <= tol {
                converged = true;
                break;
            }
        }
        if s == last {
            if !converged {
                return Err(FunctionalError::NonConvergence {
                    iterations: it,
                    error: err,
                });
            }
            return Ok((dual_value(a, &f, b, &g), it));
        }
    }
    unreachable!("schedule is never empty")
}

/// Self-transport cost via the averaged symmetric update.
fn self_cost(k: &Kernel, a: &[f64], eps: f64, tolerance: f64, max_iter: usize) -> Result<f64, FunctionalError> {
    let la = logs(a);
    let mut f = vec![0.0; a.len()];
    let mut err = f64::INFINITY;
    for _ in 0..max_iter {
        let t = potential_update(k, &la, &f, eps);
        err = a
            .iter()
            .zip(f.iter().zip(&t))
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, (old, new))| w * ((old - new) / eps).exp_m1().abs())
            .sum();
        for (fi, ti) in f.iter_mut().zip(&t) {
            *fi = 0.5 * (*fi + ti);
        }
        if err <= tolerance {
            let f_fin = potential_update(k, &la, &f, eps);
            return Ok(dual_value(a, &f_fin, a, &f_fin));
        }
    }
    Err(FunctionalError::NonConvergence {
        iterations: max_iter,
        error: err,
    })
}

/// Debiased entropic W2 between two mass vectors on the same coarse grid.
pub fn debiased_w2(grid: &Grid, a: &[f64], b: &[f64], cfg: &TransportConfig) -> Result<W2Estimate, FunctionalError> {
    let h = grid.spacing();
    let eps = cfg.eps.unwrap_or_else(|| h.iter().map(|v| v * v).fold(0.0, f64::max));
    let k = Kernel::new(grid);
    let (ab, iterations) = entropic_cost(grid, a, b, eps, cfg.tolerance, cfg.max_iter)?;
    let aa = self_cost(&k, a, eps, cfg.tolerance, cfg.max_iter)?;
    let bb = self_cost(&k, b, eps, cfg.tolerance, cfg.max_iter)?;
    let s = ab - 0.5 * aa - 0.5 * bb;
    Ok(W2Estimate {
        value: s.max(0.0).sqrt(),
        error_bar: h.iter().map(|v| v * v).sum::<f64>().sqrt(),
        eps,
        iterations,
    })
}

/// Aggregates both fields onto the coarse grid, then runs [`debiased_w2`].
pub fn w2_between(p: &ScalarField, q: &ScalarField, cfg: &TransportConfig) -> Result<W2Estimate, FunctionalError> {
    if cfg.coarse > MAX_COARSE || cfg.coarse < 4 {
        return Err(FunctionalError::InvalidArgument(format!(
            "coarse grid must have 4..={MAX_COARSE} cells per axis, got {}",
            cfg.coarse
        )));
    }
    if p.grid() != q.grid() {
        return Err(FunctionalError::InvalidArgument(
            "fields live on different grids".into(),
        ));
    }
    let (g, a) = aggregate(p, cfg.coarse)?;
    let (_, b) = aggregate(q, cfg.coarse)?;
    debiased_w2(&g, &a, &b, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_min_matches_brute_force() {
        let g = Grid::new(&[0.0, -1.0], &[1.0, 2.0], &[5, 4]).unwrap();
        let k = Kernel::new(&g);
        let w: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).sin()).collect();
        let eps = 0.3;
        let fast = k.soft_min(&w, eps);
        for i in 0..g.len() {
            let xi = g.center(i);
            let brute = log_sum_exp((0..g.len()).map(|j| {
                let xj = g.center(j);
                let c: f64 = xi.iter().zip(&xj).map(|(a, b)| (a - b) * (a - b)).sum();
                w[j] - c / eps
            }));
            assert!((fast[i] - brute).abs() < 1e-12, "{i}: {} vs {brute}", fast[i]);
        }
    }

    #[test]
    fn atoms_transport_exactly() {
        let g = Grid::uniform(2, 0.0, 1.0, 8).unwrap();
        let mut a = vec![0.0; g.len()];
        let mut b = vec![0.0; g.len()];
        a[g.flat_index(&[1, 2])] = 1.0;
        b[g.flat_index(&[6, 5])] = 1.0;
        let est = debiased_w2(&g, &a, &b, &TransportConfig::default()).unwrap();
        let exact = ((5.0f64 / 8.0).powi(2) + (3.0f64 / 8.0).powi(2)).sqrt();
        assert!((est.value - exact).abs() < 1e-6, "{} vs {exact}", est.value);
    }
}
