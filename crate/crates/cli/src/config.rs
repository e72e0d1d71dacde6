use std::path::Path;

use infogamma::dynamics::Scheme;
use infogamma::model::{DomainSpec, ModelSpec, ProblemSpec, ValidationSpec};
use infogamma::tensor::Convention;
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub domain: DomainSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub validation: ValidationSpec,
    #[serde(default)]
    pub scan: ScanSection,
    pub solver: Option<SolverSection>,
    pub initial: Option<InitialSection>,
    #[serde(default)]
    pub checks: ChecksSection,
    #[serde(default)]
    pub verify: VerifySection,
    pub sample: Option<SampleSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Where scan points sit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Cell centers.
    #[default]
    Cells,
    /// Equispaced nodes including the box faces.
    Nodes,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    #[serde(default = "default_scan_cells")]
    pub cells: usize,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub convention: Convention,
}

fn default_scan_cells() -> usize {
    200
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            cells: default_scan_cells(),
            sampling: Sampling::default(),
            convention: Convention::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub cells: usize,
    pub t_final: f64,
    /// Time between saved states; rounded to whole steps.
    pub save_interval: Option<f64>,
    pub stride: Option<usize>,
    #[serde(default = "default_safety")]
    pub safety: f64,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_safety() -> f64 {
    0.4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub center: Option<Vec<f64>>,
    pub variance: Option<f64>,
    /// Start from the sampled invariant density instead of a Gaussian.
    #[serde(default)]
    pub stationary: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    FisherDecay,
    EntropyProduction,
    LogSobolev,
    Corollary3,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    #[serde(default = "all_checks")]
    pub enabled: Vec<CheckKind>,
    pub lambda: Option<f64>,
    #[serde(default = "default_fisher_tol")]
    pub fisher_tolerance: f64,
    #[serde(default = "default_entropy_tol")]
    pub entropy_tolerance: f64,
    #[serde(default = "default_kl_tol")]
    pub kl_tolerance: f64,
    #[serde(default = "default_l1_tol")]
    pub l1_tolerance: f64,
    /// Coarse cells per axis for W2; absent disables it.
    pub w2_coarse: Option<usize>,
    /// Time between W2 evaluations.
    #[serde(default = "default_w2_interval")]
    pub w2_interval: f64,
}

fn all_checks() -> Vec<CheckKind> {
    vec![
        CheckKind::FisherDecay,
        CheckKind::EntropyProduction,
        CheckKind::LogSobolev,
        CheckKind::Corollary3,
    ]
}

fn default_fisher_tol() -> f64 {
    0.05
}

fn default_entropy_tol() -> f64 {
    0.03
}

fn default_kl_tol() -> f64 {
    1e-6
}

fn default_l1_tol() -> f64 {
    1e-4
}

fn default_w2_interval() -> f64 {
    0.25
}

impl Default for ChecksSection {
    fn default() -> Self {
        ChecksSection {
            enabled: all_checks(),
            lambda: None,
            fisher_tolerance: default_fisher_tol(),
            entropy_tolerance: default_entropy_tol(),
            kl_tolerance: default_kl_tol(),
            l1_tolerance: default_l1_tol(),
            w2_coarse: None,
            w2_interval: default_w2_interval(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    #[serde(default = "default_functions")]
    pub functions: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_identity_tol")]
    pub tolerance: f64,
    #[serde(default)]
    pub convention: Convention,
    /// Also run the built-in catalog of problems.
    #[serde(default = "yes")]
    pub catalog: bool,
    #[serde(default = "default_weak_cells")]
    pub cells: usize,
    /// Log-tilt applied to `pi` for the integrated identity.
    #[serde(default = "default_tilt")]
    pub tilt: String,
    #[serde(default = "default_phi")]
    pub phi: String,
    #[serde(default = "default_integrated_tol")]
    pub integrated_tolerance: f64,
}

fn default_functions() -> usize {
    10
}

fn default_points() -> usize {
    100
}

fn default_identity_tol() -> f64 {
    1e-9
}

fn yes() -> bool {
    true
}

fn default_weak_cells() -> usize {
    128
}

fn default_tilt() -> String {
    "0.3*x1 - 0.2*x2 + 0.4*sin(x1)*cos(x2) + 0.25*x1*x2".into()
}

fn default_phi() -> String {
    "sin(x1) + x1*x2/2 + x2^2/4".into()
}

fn default_integrated_tol() -> f64 {
    2e-2
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            functions: default_functions(),
            points: default_points(),
            tolerance: default_identity_tol(),
            convention: Convention::default(),
            catalog: true,
            cells: default_weak_cells(),
            tilt: default_tilt(),
            phi: default_phi(),
            integrated_tolerance: default_integrated_tol(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub particles: usize,
    pub t_final: f64,
    pub dt: f64,
    #[serde(default)]
    pub seed: u64,
    /// Cells per axis of the quadrature grid for the reference moments.
    #[serde(default = "default_moment_cells")]
    pub moment_cells: usize,
    #[serde(default = "default_sigmas")]
    pub max_standard_errors: f64,
    /// Write every particle's final position.
    #[serde(default)]
    pub dump: bool,
}

fn default_moment_cells() -> usize {
    400
}

fn default_sigmas() -> f64 {
    3.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Write a snapshot CSV every this many saved states; 0 disables.
    #[serde(default = "default_snapshot_every")]
    pub snapshot_every: usize,
}

fn default_snapshot_every() -> usize {
    1
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            snapshot_every: default_snapshot_every(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn problem_spec(&self) -> ProblemSpec {
        ProblemSpec {
            domain: self.domain.clone(),
            model: self.model.clone(),
            validation: self.validation.clone(),
        }
    }
}
