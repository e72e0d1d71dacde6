use std::sync::OnceLock;

use infogamma::dynamics::{gaussian_density, normalized};
use infogamma::functionals::{
    check_corollary3, check_entropy_production, check_lsi, check_poincare, check_theorem1, decay_rate, fisher_information,
    kl_divergence, l1_distance, poincare_sides, w2_between, CheckReport, Corollary3Tolerance, DecayTrace, Functional,
    FunctionalError, ReferenceDensity, TransportConfig,
};
use infogamma::model::DriftSpec;
use infogamma::tensor::scan_rate;
use infogamma::{build_problem, parse, Grid, Problem, ProblemSpec, ScalarField};
use proptest::prelude::*;

const VARIANCE: f64 = 0.5;
const OFFSET: f64 = 0.3;

// 1-D Gaussian pi with variance 0.5 on a box wide enough to ignore truncation
fn wide_1d() -> (Problem, Grid) {
    let p = build_problem(&ProblemSpec::on_cube(1, -6.0, 6.0, "x1^2", DriftSpec::Gradient)).unwrap();
    let g = p.grid(4000).unwrap();
    (p, g)
}

fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let inner: f64 = (1..n)
        .map(|k| f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 })
        .sum();
    (f(a) + f(b) + inner) * h / 3.0
}

fn gauss(x: f64, m: f64) -> f64 {
    (-(x - m) * (x - m) / (2.0 * VARIANCE)).exp() / (2.0 * std::f64::consts::PI * VARIANCE).sqrt()
}

#[test]
fn gaussian_pair_divergences_match_closed_forms() {
    let (p, g) = wide_1d();
    let q = gaussian_density(&g, &[OFFSET], VARIANCE);
    let fisher = fisher_information(&q, &p).unwrap();
    let kl = kl_divergence(&q, &p).unwrap();
    let want_fisher = OFFSET * OFFSET / (VARIANCE * VARIANCE);
    let want_kl = 0.5 * OFFSET * OFFSET / VARIANCE;
    assert!(((fisher - want_fisher) / want_fisher).abs() < 1e-3, "{fisher} vs {want_fisher}");
    assert!(((kl - want_kl) / want_kl).abs() < 1e-3, "{kl} vs {want_kl}");

    // the densities cross once at OFFSET / 2; integrate each smooth side
    let diff = |x: f64| (gauss(x, OFFSET) - gauss(x, 0.0)).abs();
    let mid = OFFSET / 2.0;
    let oracle = simpson(diff, -6.0, mid, 20_000) + simpson(diff, mid, 6.0, 20_000);
    let l1 = l1_distance(&q, &p).unwrap();
    assert!(((l1 - oracle) / oracle).abs() < 1e-3, "{l1} vs {oracle}");
}

#[test]
fn invariant_density_has_zero_divergences() {
    let p = build_problem(&ProblemSpec::on_cube(
        2,
        -1.0,
        1.0,
        "(x1^2 + x2^2)/2",
        DriftSpec::Skew { c: Some(0.1), j: None },
    ))
    .unwrap();
    let g = p.grid(40).unwrap();
    let pi = normalized(p.density_field(&g).unwrap());
    assert!(fisher_information(&pi, &p).unwrap().abs() <= 1e-12);
    assert!(kl_divergence(&pi, &p).unwrap().abs() <= 1e-12);
    assert!(l1_distance(&pi, &p).unwrap() <= 1e-12);
    let lsi = check_lsi(&pi, &p, 0.9).unwrap();
    assert!(lsi.pass && lsi.margin.abs() <= 1e-12);
}

#[test]
fn disjoint_histograms_are_two_apart() {
    let g = Grid::uniform(2, 0.0, 1.0, 8).unwrap();
    let left = ScalarField::from_fn(&g, |x| if x[0] < 0.5 { 2.0 } else { 0.0 });
    let right = ScalarField::from_fn(&g, |x| if x[0] > 0.5 { 2.0 } else { 0.0 });
    let p = build_problem(&ProblemSpec::on_cube(2, 0.0, 1.0, "0", DriftSpec::Gradient)).unwrap();
    let r = ReferenceDensity::new(&p, &g).unwrap();
    let l1 = r.l1_distance(&left).unwrap() + r.l1_distance(&right).unwrap();
    // each half-box histogram is 1 away from uniform
    assert!((l1 - 2.0).abs() < 1e-12);
    let between: f64 = left
        .values()
        .iter()
        .zip(right.values())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        * g.cell_volume();
    assert!((between - 2.0).abs() < 1e-12);
}

#[test]
fn fisher_skips_empty_cells() {
    let (p, g) = wide_1d();
    let q = ScalarField::from_fn(&g, |x| if x[0].abs() < 1.0 { 0.5 } else { 0.0 });
    let i = fisher_information(&q, &p).unwrap();
    assert!(i.is_finite() && i > 0.0);
    // KL uses 0 log 0 = 0
    assert!(kl_divergence(&q, &p).unwrap().is_finite());
}

#[test]
fn transport_of_identical_fields_is_zero() {
    let g = Grid::uniform(2, -3.0, 3.0, 64).unwrap();
    let q = gaussian_density(&g, &[0.5, -0.3], 0.7);
    let w = w2_between(&q, &q, &TransportConfig::default()).unwrap();
    assert!(w.value <= 1e-6, "{w:?}");
    assert!((w.error_bar - (2.0f64).sqrt() * 6.0 / 32.0).abs() < 1e-12);
}

#[test]
fn transport_of_single_atoms_is_their_distance() {
    let g = Grid::uniform(2, 0.0, 4.0, 32).unwrap();
    let atom = |x: f64, y: f64| {
        let c = g.locate(&[x, y]).unwrap();
        let mut v = vec![0.0; g.len()];
        v[c] = 1.0 / g.cell_volume();
        ScalarField::new(g.clone(), v).unwrap()
    };
    let cfg = TransportConfig {
        coarse: 16,
        ..TransportConfig::default()
    };
    let w = w2_between(&atom(0.5, 0.6), &atom(3.1, 2.2), &cfg).unwrap();
    let dist = (2.6f64.powi(2) + 1.6f64.powi(2)).sqrt();
    assert!((w.value - dist).abs() <= w.error_bar, "{} vs {dist}", w.value);
}

#[test]
fn translated_gaussians_are_their_shift_apart() {
    let g = Grid::uniform(2, -4.0, 4.0, 96).unwrap();
    let delta = 0.6;
    let a = gaussian_density(&g, &[-delta / 2.0, 0.0], 0.5);
    let b = gaussian_density(&g, &[delta / 2.0, 0.0], 0.5);
    let mut errs = Vec::new();
    for eps in [0.08, 0.04, 0.02] {
        let cfg = TransportConfig {
            eps: Some(eps),
            ..TransportConfig::default()
        };
        let w = w2_between(&a, &b, &cfg).unwrap();
        errs.push((w.value - delta).abs() / delta);
    }
    assert!(*errs.last().unwrap() <= 0.1, "{errs:?}");
}

#[test]
fn transport_rejects_oversized_coarse_grids() {
    let g = Grid::uniform(2, 0.0, 1.0, 64).unwrap();
    let q = ScalarField::constant(&g, 1.0);
    let cfg = TransportConfig {
        coarse: 64,
        ..TransportConfig::default()
    };
    assert!(matches!(w2_between(&q, &q, &cfg), Err(FunctionalError::InvalidArgument(_))));
}

fn synthetic(times: &[f64], f: impl Fn(f64) -> f64) -> DecayTrace {
    DecayTrace {
        times: times.to_vec(),
        mass: vec![1.0; times.len()],
        fisher: times.iter().map(|&t| f(t)).collect(),
        kl: times.iter().map(|&t| 0.5 * f(t)).collect(),
        l1: times.iter().map(|&t| f(t).sqrt()).collect(),
        w2: None,
    }
}

#[test]
fn synthetic_traces_drive_the_checks() {
    let times: Vec<f64> = (0..41).map(|k| k as f64 * 0.05).collect();
    let lambda = 0.8;
    let exact = synthetic(&times, |t| 3.0 * (-2.0 * lambda * t).exp());
    let r = check_theorem1(&exact, lambda, 1e-9).unwrap();
    assert!(r.pass && r.margin.abs() < 1e-9);
    let slow = synthetic(&times, |t| 3.0 * (-lambda * t).exp());
    let r = check_theorem1(&slow, lambda, 1e-3).unwrap();
    assert!(!r.pass);
    assert_eq!(r.worst_time, Some(2.0));

    let flat = synthetic(&times, |_| 0.0);
    let reports = check_corollary3(&flat, lambda, 0.0, Corollary3Tolerance::default());
    assert!(reports.iter().all(|r| r.pass));
    let ep = check_entropy_production(&flat, 0.03).unwrap();
    assert!(ep.pass);

    let csv = {
        let mut buf = Vec::new();
        exact.write_csv(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    };
    assert_eq!(csv.lines().next(), Some("t,mass,fisher,kl,l1"));
    assert_eq!(csv.lines().count(), times.len() + 1);
}

#[test]
fn log_sobolev_fails_for_absurd_rates() {
    let (p, g) = wide_1d();
    let q = gaussian_density(&g, &[OFFSET], VARIANCE);
    // the Hessian of U is 2 and a shifted Gaussian is extremal, so 2 is tight
    let tight = check_lsi(&q, &p, 2.0).unwrap();
    assert!(tight.margin.abs() < 1e-4, "{tight:?}");
    assert!(check_lsi(&q, &p, 1.9).unwrap().pass);
    let r = check_lsi(&q, &p, 1e6).unwrap();
    assert!(!r.pass && r.margin < -0.08);
}

#[test]
fn poincare_constant_and_tight_cases() {
    let p = build_problem(&ProblemSpec::on_cube(
        2,
        -1.0,
        1.0,
        "(x1^2 + x2^2)/2",
        DriftSpec::Skew { c: Some(0.1), j: None },
    ))
    .unwrap();
    let g = p.grid(64).unwrap();
    let r = check_poincare(&parse("3", 2).unwrap(), &p, 0.9, &g).unwrap();
    assert!(r.pass && r.margin.abs() <= 1e-15);

    let wide = build_problem(&ProblemSpec::on_cube(2, -7.0, 7.0, "(x1^2 + x2^2)/2", DriftSpec::Gradient)).unwrap();
    let g = wide.grid(200).unwrap();
    let (var, rhs) = poincare_sides(&parse("x1", 2).unwrap(), &wide, 1.0, &g).unwrap();
    assert!((var - 1.0).abs() < 1e-3 && (rhs - 1.0).abs() < 1e-3);
    assert!((rhs - var).abs() < 1e-6);
}

#[test]
fn poincare_battery_holds_with_scanned_rate() {
    let p = build_problem(&ProblemSpec::on_cube(
        2,
        -1.0,
        1.0,
        "(x1^2 + 3*x2^2)/2",
        DriftSpec::Skew { c: Some(0.1), j: None },
    ))
    .unwrap();
    let lambda = scan_rate(&p, &p.grid(100).unwrap()).unwrap().lambda;
    let g = p.grid(128).unwrap();
    for h in ["x1", "x2", "x1*x2", "x1^2", "sin(x1)"] {
        let r = check_poincare(&parse(h, 2).unwrap(), &p, lambda, &g).unwrap();
        assert!(r.pass && r.margin >= -1e-6, "{h}: {}", r.margin);
    }
}

#[test]
fn decay_rate_needs_positive_well_sampled_traces() {
    let times: Vec<f64> = (0..4).map(|k| k as f64).collect();
    let short = synthetic(&times, |t| (-t).exp());
    assert!(matches!(
        decay_rate(&short, Functional::Fisher, (0.0, 3.0)),
        Err(FunctionalError::InsufficientData { .. })
    ));
    let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
    let zero = synthetic(&times, |t| if t > 4.0 { 0.0 } else { 1.0 });
    assert!(matches!(
        decay_rate(&zero, Functional::Kl, (0.0, 9.0)),
        Err(FunctionalError::NonPositiveValue { .. })
    ));
}

static PINSKER_PROBLEM: OnceLock<(Problem, Grid)> = OnceLock::new();

fn pinsker_setup() -> &'static (Problem, Grid) {
    PINSKER_PROBLEM.get_or_init(|| {
        let p = build_problem(&ProblemSpec::on_cube(
            2,
            -2.0,
            2.0,
            "(x1^2 + 3*x2^2)/2 + x1^4/4",
            DriftSpec::Skew { c: Some(0.5), j: None },
        ))
        .unwrap();
        let g = p.grid(32).unwrap();
        (p, g)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pinsker_and_positivity(cx in -1.5f64..1.5, cy in -1.5f64..1.5, var in 0.05f64..2.0) {
        let (p, g) = pinsker_setup();
        let q = gaussian_density(g, &[cx, cy], var);
        let r = ReferenceDensity::new(p, g).unwrap();
        let kl = r.kl_divergence(&q).unwrap();
        let l1 = r.l1_distance(&q).unwrap();
        let fi = r.fisher_information(&q).unwrap();
        prop_assert!(kl >= 0.0 && l1 >= 0.0 && fi >= 0.0);
        prop_assert!(kl >= 0.5 * l1 * l1 - 1e-12, "KL {kl} < L1^2/2 = {}", 0.5 * l1 * l1);
    }

    #[test]
    fn decay_rate_is_exact_and_scale_free(rate in 0.0f64..5.0, scale in 1e-6f64..1e6, shift in 0.0f64..2.0) {
        let times: Vec<f64> = (0..30).map(|k| shift + k as f64 * 0.1).collect();
        let a = synthetic(&times, |t| (-rate * t).exp());
        let b = synthetic(&times, |t| scale * (-rate * t).exp());
        let window = (shift, shift + 3.0);
        let ra = decay_rate(&a, Functional::Fisher, window).unwrap();
        let rb = decay_rate(&b, Functional::Fisher, window).unwrap();
        prop_assert!((ra - rate).abs() <= 1e-9);
        prop_assert!((ra - rb).abs() <= 1e-9);
        let rk = decay_rate(&b, Functional::Kl, window).unwrap();
        prop_assert!((rk - rate).abs() <= 1e-9);
    }

    #[test]
    fn report_passes_iff_margin_within_tolerance(margin in -1.0f64..1.0, tol in 0.0f64..0.5) {
        let r = CheckReport::new("probe", Some(1.0), margin, tol);
        prop_assert_eq!(r.pass, margin >= -tol);
    }

    #[test]
    fn self_transport_vanishes(cx in -1.0f64..1.0, var in 0.2f64..1.5) {
        let g = Grid::uniform(2, -3.0, 3.0, 48).unwrap();
        let q = gaussian_density(&g, &[cx, -cx / 2.0], var);
        let cfg = TransportConfig { coarse: 16, ..TransportConfig::default() };
        let w = w2_between(&q, &q, &cfg).unwrap();
        prop_assert!(w.value <= 1e-6);
    }
}
