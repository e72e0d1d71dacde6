//! Density evolution on a grid and particle sampling.

mod fpe;
mod sde;

pub use fpe::{
    bernoulli, evolve_fpe, gaussian_density, normalized, DensityTrajectory, FpeSolver, Scheme,
    SolverConfig, SolverError,
};
pub use sde::{
    empirical_density, reflect, simulate_sde, simulate_sde_with, Ensemble, SdeConfig, SdeError,
    SdeRun,
};
