//! Information Gamma calculus for non-reversible diffusions on a box.
//!
//! The crate builds a [`model::Problem`] from a potential `U` and a drift
//! decomposition, assembles the dissipation tensors, scans their smallest
//! eigenvalue, evolves the Fokker-Planck equation and checks the resulting
//! dissipation identities and inequalities numerically.

pub mod dynamics;
pub mod expr;
pub mod functionals;
pub mod gamma_calc;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod tensor;

pub use expr::{parse, EvalError, Expr, ParseError};
pub use grid::{Grid, GridSpec, MatrixField, ScalarField, VectorField};
pub use linalg::Matrix;
pub use model::{build_problem, Problem, ProblemSpec};
