use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use infogamma::dynamics::{
    gaussian_density, simulate_sde_with, FpeSolver, SdeConfig, SolverConfig, SolverError,
};
use infogamma::functionals::{
    check_corollary3, check_entropy_production, check_lsi_trace, check_theorem1, CheckReport,
    Corollary3Tolerance, DecayTrace, FunctionalError, ReferenceDensity, TransportConfig,
};
use infogamma::gamma_calc::{
    default_catalog, identity_battery_problem, weak_form_residual, yano_residual, BatteryConfig,
    BatteryEntry, GammaError, WeakFormReport, YanoReport,
};
use infogamma::grid::{Grid, GridError, ScalarField};
use infogamma::model::{build_problem, ModelError, Problem};
use infogamma::parse;
use infogamma::tensor::{global_rate, lambda_min_field, r_ac, r_tensor_with, Convention, TensorError};
use serde::Serialize;

use crate::config::{CheckKind, RunConfig, Sampling};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EVAL: i32 = 3;
pub const EXIT_SOLVER: i32 = 4;
pub const EXIT_CHECK: i32 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    fn eval(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_EVAL,
            message: message.into(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonNormalizable { .. } | ModelError::Eval(_) => CliError::eval(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Grid(g) => g.into(),
            TensorError::DimensionMismatch { .. } => CliError::config(e.to_string()),
            TensorError::Eval { .. } => CliError::eval(e.to_string()),
        }
    }
}

impl From<GammaError> for CliError {
    fn from(e: GammaError) -> Self {
        match e {
            GammaError::Model(m) => m.into(),
            GammaError::DimensionMismatch { .. } => CliError::config(e.to_string()),
            _ => CliError::eval(e.to_string()),
        }
    }
}

impl From<FunctionalError> for CliError {
    fn from(e: FunctionalError) -> Self {
        match e {
            FunctionalError::InvalidArgument(_) | FunctionalError::Grid(_) => {
                CliError::config(e.to_string())
            }
            _ => CliError::eval(e.to_string()),
        }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        let code = match e {
            SolverError::InvalidConfig(_) | SolverError::DimensionMismatch { .. } => EXIT_CONFIG,
            SolverError::InitialCondition(_) => EXIT_CONFIG,
            SolverError::Eval { .. } => EXIT_EVAL,
            SolverError::CflViolation { .. } | SolverError::NegativeDensity { .. } => EXIT_SOLVER,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Flags shared by all commands.
#[derive(Debug, Clone)]
pub struct Overrides {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::config(format!("cannot write {}: {e}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_error(path, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<(), CliError>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(std::io::Error::other)?;
        writeln!(w)
    })
}

fn load_problem(cfg: &RunConfig) -> Result<Problem, CliError> {
    let p = build_problem(&cfg.problem_spec())?;
    if !p.is_valid() {
        let v = p.validation();
        eprintln!(
            "warning: pi may not be invariant (invariance residual {:.3e}, threshold {:.1e})",
            v.invariance, v.threshold
        );
    }
    Ok(p)
}

fn scan_grid(cfg: &RunConfig, p: &Problem) -> Result<Grid, CliError> {
    let cells = vec![cfg.scan.cells; p.dim()];
    let g = match cfg.scan.sampling {
        Sampling::Cells => Grid::new(p.lower(), p.upper(), &cells)?,
        Sampling::Nodes => Grid::nodes(p.lower(), p.upper(), &cells)?,
    };
    Ok(g)
}

fn scan_lambda(cfg: &RunConfig, p: &Problem) -> Result<f64, CliError> {
    let g = scan_grid(cfg, p)?;
    let field = lambda_min_field(&r_tensor_with(p, &g, cfg.scan.convention)?);
    Ok(global_rate(&field).lambda)
}

pub fn scan(cfg: &RunConfig, o: &Overrides) -> Result<bool, CliError> {
    let p = load_problem(cfg)?;
    let g = scan_grid(cfg, &p)?;
    let r = r_tensor_with(&p, &g, cfg.scan.convention)?;
    let rate = global_rate(&lambda_min_field(&r));
    let summary = rate.summary();
    write_with(&o.out.join("lambda_min.csv"), |w| rate.field.write_csv(w))?;
    write_json(&o.out.join("rate_report.json"), &summary)?;
    write_with(&o.out.join("r_tensor.csv"), |w| r.write_csv(w))?;
    let ac = r_ac(&p, &g)?;
    write_with(&o.out.join("r_ac.csv"), |w| ac.write_csv(w))?;
    println!(
        "lambda = {:.10} at {:?} (positive: {})",
        summary.lambda, summary.argmin, summary.positive
    );
    Ok(true)
}

fn initial_density(cfg: &RunConfig, p: &Problem, g: &Grid) -> Result<ScalarField, CliError> {
    let init = cfg.initial.clone().unwrap_or(crate::config::InitialSection {
        center: None,
        variance: None,
        stationary: false,
    });
    if init.stationary {
        return Ok(ReferenceDensity::new(p, g)?.density().clone());
    }
    let center = init.center.unwrap_or_else(|| vec![0.0; p.dim()]);
    if center.len() != p.dim() {
        return Err(CliError::config(format!(
            "initial center has {} coordinates, problem has {}",
            center.len(),
            p.dim()
        )));
    }
    let variance = init.variance.unwrap_or(0.5);
    if !(variance > 0.0) {
        return Err(CliError::config(format!("initial variance must be positive, got {variance}")));
    }
    Ok(gaussian_density(g, &center, variance))
}

pub fn evolve(cfg: &RunConfig, o: &Overrides) -> Result<bool, CliError> {
    let section = cfg
        .solver
        .as_ref()
        .ok_or_else(|| CliError::config("evolve needs a [solver] section"))?;
    let p = load_problem(cfg)?;
    let lambda = match o.lambda.or(cfg.checks.lambda) {
        Some(l) => l,
        None => scan_lambda(cfg, &p)?,
    };
    let g = p.grid(section.cells)?;
    let p0 = initial_density(cfg, &p, &g)?;

    let mut solver_cfg = SolverConfig::new(section.t_final, section.stride.unwrap_or(10));
    solver_cfg.safety = section.safety;
    solver_cfg.scheme = section.scheme;
    if let Some(interval) = section.save_interval {
        let probe = FpeSolver::new(&p, &g, &solver_cfg)?;
        solver_cfg.stride = ((interval / probe.dt()).round() as usize).max(1);
    }
    let solver = FpeSolver::new(&p, &g, &solver_cfg)?;

    let reference = ReferenceDensity::new(&p, &g)?;
    let transport = cfg.checks.w2_coarse.map(|coarse| TransportConfig {
        coarse,
        ..TransportConfig::default()
    });
    let mut trace = DecayTrace::default();
    let mut w2_trace = DecayTrace::default();
    let mut w2 = Vec::new();
    let mut next_w2 = 0.0;
    let mut saved = 0usize;
    let mut failure: Option<CliError> = None;
    let snapshot_dir = o.out.join("snapshots");
    solver.run(&p0, |_, t, field| {
        if failure.is_some() {
            return;
        }
        let mut step = || -> Result<(), CliError> {
            trace.record(t, field, &reference)?;
            let every = cfg.output.snapshot_every;
            if every > 0 && saved % every == 0 {
                let path = snapshot_dir.join(format!("p_{saved:05}.csv"));
                write_with(&path, |w| field.write_csv(w))?;
            }
            if let Some(tc) = &transport {
                if t >= next_w2 - 1e-12 {
                    w2_trace.record(t, field, &reference)?;
                    w2.push(reference.wasserstein2(field, tc)?);
                    next_w2 += cfg.checks.w2_interval;
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            failure = Some(e);
        }
        saved += 1;
    })?;
    if let Some(e) = failure {
        return Err(e);
    }

    let mut reports: Vec<CheckReport> = Vec::new();
    let checks = &cfg.checks;
    let d0 = trace.kl[0];
    for kind in &checks.enabled {
        match kind {
            CheckKind::FisherDecay => reports.push(check_theorem1(&trace, lambda, checks.fisher_tolerance)?),
            CheckKind::EntropyProduction => {
                reports.push(check_entropy_production(&trace, checks.entropy_tolerance)?)
            }
            CheckKind::LogSobolev | CheckKind::Corollary3 if !(lambda > 0.0) => {
                let mut r = CheckReport::new(
                    if *kind == CheckKind::LogSobolev { "log-sobolev" } else { "kl-decay" },
                    Some(lambda),
                    f64::NEG_INFINITY,
                    0.0,
                );
                r.detail = Some("rate is not positive".into());
                reports.push(r);
            }
            CheckKind::LogSobolev => reports.push(check_lsi_trace(&trace, lambda, checks.kl_tolerance)),
            CheckKind::Corollary3 => {
                let tol = Corollary3Tolerance {
                    kl: checks.kl_tolerance,
                    l1: checks.l1_tolerance,
                    w2: 0.0,
                };
                reports.extend(check_corollary3(&trace, lambda, d0, tol));
                if transport.is_some() {
                    w2_trace.w2 = Some(w2.clone());
                    reports.extend(
                        check_corollary3(&w2_trace, lambda, d0, tol)
                            .into_iter()
                            .filter(|r| r.name == "w2-decay"),
                    );
                }
            }
        }
    }

    if transport.is_some() {
        // W2 only exists at its own cadence; keep trace.csv rectangular
        write_with(&o.out.join("w2.csv"), |w| {
            writeln!(w, "t,w2,error_bar")?;
            for (t, e) in w2_trace.times.iter().zip(&w2) {
                writeln!(w, "{t:.16e},{:.16e},{:.16e}", e.value, e.error_bar)?;
            }
            Ok(())
        })?;
    }
    write_with(&o.out.join("trace.csv"), |w| trace.write_csv(w))?;
    write_json(&o.out.join("checks.json"), &reports)?;
    println!(
        "{} saved states, dt = {:.4e}, lambda = {lambda:.6}",
        trace.len(),
        solver.dt()
    );
    for r in &reports {
        println!(
            "{} {}: margin {:.4e} (tolerance {:.1e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.margin,
            r.tolerance
        );
    }
    Ok(reports.iter().all(|r| r.pass))
}

#[derive(Serialize)]
struct IntegratedCheck<T: Serialize> {
    #[serde(flatten)]
    report: T,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport {
    convention: Convention,
    battery: Vec<BatteryEntry>,
    weak_form: IntegratedCheck<WeakFormReport>,
    yano: IntegratedCheck<YanoReport>,
    pass: bool,
}

pub fn verify(cfg: &RunConfig, o: &Overrides) -> Result<bool, CliError> {
    let v = &cfg.verify;
    let p = load_problem(cfg)?;
    let battery_cfg = BatteryConfig {
        functions: v.functions,
        points_per_function: v.points,
        seed: o.seed.unwrap_or(BatteryConfig::default().seed),
        tolerance: v.tolerance,
        convention: v.convention,
    };
    let mut battery = vec![identity_battery_problem("configured model", &p, &battery_cfg, 0)?];
    if v.catalog {
        for (k, entry) in default_catalog().iter().enumerate() {
            let q = build_problem(&entry.spec)?;
            battery.push(identity_battery_problem(&entry.name, &q, &battery_cfg, k as u64 + 1)?);
        }
    }

    let g = p.grid(v.cells)?;
    let tilt = parse(&v.tilt, p.dim()).map_err(|e| CliError::config(format!("verify.tilt: {e}")))?;
    let phi = parse(&v.phi, p.dim()).map_err(|e| CliError::config(format!("verify.phi: {e}")))?;
    let pi = ReferenceDensity::new(&p, &g)?;
    let bump = ScalarField::sample(&tilt, &g).map_err(|e| CliError::eval(e.to_string()))?;
    let raw: Vec<f64> = pi
        .density()
        .values()
        .iter()
        .zip(bump.values())
        .map(|(a, b)| a * b.exp())
        .collect();
    let density = infogamma::dynamics::normalized(ScalarField::new(g.clone(), raw)?);
    let weak = weak_form_residual(&density, &p)?;
    let yano = yano_residual(&phi, &p, &g)?;
    let tol = v.integrated_tolerance;
    let report = VerifyReport {
        convention: v.convention,
        weak_form: IntegratedCheck {
            report: weak,
            tolerance: tol,
            pass: weak.residual <= tol,
        },
        // on a box the boundary flux is part of the identity
        yano: IntegratedCheck {
            report: yano,
            tolerance: tol,
            pass: yano.corrected <= tol,
        },
        pass: false,
        battery,
    };
    let pass = report.battery.iter().all(|b| b.pass) && report.weak_form.pass && report.yano.pass;
    let report = VerifyReport { pass, ..report };
    write_json(&o.out.join("verify.json"), &report)?;
    for b in &report.battery {
        println!(
            "{} identity on {}: max residual {:.3e} over {} points",
            if b.pass { "PASS" } else { "FAIL" },
            b.problem,
            b.max_residual,
            b.samples
        );
    }
    println!(
        "{} weak form: residual {:.3e}",
        if report.weak_form.pass { "PASS" } else { "FAIL" },
        weak.residual
    );
    println!(
        "{} yano: residual {:.3e}, {:.3e} with the boundary term",
        if report.yano.pass { "PASS" } else { "FAIL" },
        yano.residual,
        yano.corrected
    );
    Ok(pass)
}

#[derive(Serialize)]
struct MomentRow {
    quantity: String,
    sample: f64,
    standard_error: f64,
    reference: f64,
    /// Deviation in standard errors; absent with fewer than two particles.
    z: Option<f64>,
}

#[derive(Serialize)]
struct SampleReport {
    particles: usize,
    t_final: f64,
    dt: f64,
    seed: u64,
    max_standard_errors: f64,
    moments: Vec<MomentRow>,
    pass: bool,
}

pub fn sample(cfg: &RunConfig, o: &Overrides) -> Result<bool, CliError> {
    let s = cfg
        .sample
        .as_ref()
        .ok_or_else(|| CliError::config("sample needs a [sample] section"))?;
    let p = load_problem(cfg)?;
    let seed = o.seed.unwrap_or(s.seed);
    let run = simulate_sde_with(
        &p,
        &SdeConfig {
            particles: s.particles,
            t_final: s.t_final,
            dt: s.dt,
            seed,
            snapshot_every: None,
            start: None,
        },
    )
    .map_err(|e| match e {
        infogamma::dynamics::SdeError::InvalidConfig(m) => CliError::config(m),
        other => CliError::eval(other.to_string()),
    })?;
    let ens = run.last();
    let g = p.grid(s.moment_cells)?;
    let reference = ReferenceDensity::new(&p, &g)?;
    let pi = reference.density().values();
    let vol = g.cell_volume();
    let mut moments = Vec::new();
    let mut x = vec![0.0; p.dim()];
    for k in 0..p.dim() {
        for power in [1, 2] {
            let mut exact = 0.0;
            for (c, w) in pi.iter().enumerate() {
                g.center_into(c, &mut x);
                exact += x[k].powi(power) * w;
            }
            exact *= vol;
            let (mean, se) = ens.moment(|y| y[k].powi(power));
            let z = (ens.len() >= 2).then(|| {
                if se > 0.0 {
                    (mean - exact).abs() / se
                } else if mean == exact {
                    0.0
                } else {
                    f64::INFINITY
                }
            });
            moments.push(MomentRow {
                quantity: format!("E[x{}^{power}]", k + 1),
                sample: mean,
                standard_error: se,
                reference: exact,
                z,
            });
        }
    }
    let pass = moments
        .iter()
        .all(|m| m.z.is_none_or(|z| z <= s.max_standard_errors));
    if s.dump {
        write_with(&o.out.join("particles.csv"), |w| {
            let d = ens.dim;
            let head: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
            writeln!(w, "t,particle,{}", head.join(","))?;
            for i in 0..ens.len() {
                write!(w, "{:.16e},{i}", ens.time)?;
                for v in ens.particle(i) {
                    write!(w, ",{v:.16e}")?;
                }
                writeln!(w)?;
            }
            Ok(())
        })?;
    }
    for m in &moments {
        println!(
            "{}: sample {:.6} +- {:.2e}, reference {:.6}",
            m.quantity, m.sample, m.standard_error, m.reference
        );
    }
    let report = SampleReport {
        particles: s.particles,
        t_final: s.t_final,
        dt: s.dt,
        seed,
        max_standard_errors: s.max_standard_errors,
        moments,
        pass,
    };
    write_json(&o.out.join("moments.json"), &report)?;
    Ok(pass)
}
