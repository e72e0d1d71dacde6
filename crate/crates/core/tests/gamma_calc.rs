use std::sync::OnceLock;

use infogamma::dynamics::{gaussian_density, normalized};
use infogamma::gamma_calc::{
    gamma1, gamma_values, generator_l, identity_battery, identity_residual, random_cubic, weak_form_residual,
    yano_residual, BatteryConfig, CatalogEntry, GammaError, GammaOperators,
};
use infogamma::model::DriftSpec;
use infogamma::tensor::Convention;
use infogamma::{build_problem, parse, Expr, Grid, Problem, ProblemSpec, ScalarField};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn skew(c: f64) -> DriftSpec {
    DriftSpec::Skew { c: Some(c), j: None }
}

fn problem(u: &str, c: f64, half: f64) -> Problem {
    build_problem(&ProblemSpec::on_cube(2, -half, half, u, skew(c))).unwrap()
}

fn shared(slot: &'static OnceLock<Problem>, u: &str, c: f64) -> &'static Problem {
    slot.get_or_init(|| problem(u, c, 1.0))
}

static QUARTIC: OnceLock<Problem> = OnceLock::new();
static REVERSIBLE: OnceLock<Problem> = OnceLock::new();

fn cubic(seed: u64) -> Expr {
    random_cubic(2, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn hand_computed_identity_sides() {
    let p = problem("(x1^2 + x2^2)/2", 0.1, 1.0);
    let f = parse("x1 + x2", 2).unwrap();
    let v = gamma_values(&f, &p, &[1.0, 0.0]).unwrap();
    assert!((v.gamma2_tilde - 2.0).abs() < 1e-15);
    assert!((v.gamma_info - 0.1).abs() < 1e-15);
    assert!((v.modified_hessian_sq - 0.00375).abs() < 1e-15);
    assert!((v.r_form - 2.09625).abs() < 1e-14);
    assert!(v.identity_residual() < 1e-14);

    assert_eq!(generator_l(&parse("x1", 2).unwrap(), &p, &[1.0, 0.0]).unwrap(), -1.0);
    assert_eq!(generator_l(&parse("(x1^2 + x2^2)/2", 2).unwrap(), &p, &[0.0, 0.0]).unwrap(), 2.0);
    assert_eq!(gamma1(&parse("(x1^2 + 3*x2^2)/2", 2).unwrap(), &[1.0, -1.0]).unwrap(), 10.0);
}

#[test]
fn flat_gradient_kills_every_information_term() {
    let p = problem("(x1^2 + 3*x2^2)/2", 0.7, 1.0);
    // grad f vanishes at the origin
    let f = parse("x1^2 - x1*x2 + 2*x2^2", 2).unwrap();
    let v = gamma_values(&f, &p, &[0.0, 0.0]).unwrap();
    assert_eq!(v.gamma1, 0.0);
    assert_eq!(v.gamma_info, 0.0);
    assert_eq!(v.r_form, 0.0);
}

#[test]
fn definition_convention_fails_where_corrected_passes() {
    let p = problem("(x1^2 + 3*x2^2)/2", 0.5, 1.0);
    let f = cubic(11);
    let ops = GammaOperators::new(&f, &p);
    let x = [0.6, -0.4];
    let good = ops.at(&p, &x, Convention::Corrected).unwrap();
    let bad = ops.at(&p, &x, Convention::Definition).unwrap();
    assert!(good.identity_residual() < 1e-12);
    assert!(bad.identity_residual() > 1e-3);
}

#[test]
fn default_battery_passes_and_is_seed_deterministic() {
    let catalog = infogamma::gamma_calc::default_catalog();
    assert!(catalog.len() >= 10);
    let cfg = BatteryConfig {
        functions: 4,
        points_per_function: 50,
        ..BatteryConfig::default()
    };
    let a = identity_battery(&catalog, &cfg).unwrap();
    let b = identity_battery(&catalog, &cfg).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!(x.pass, "{}: {}", x.problem, x.max_residual);
        assert_eq!(x.samples, 200);
        assert_eq!(x.max_residual.to_bits(), y.max_residual.to_bits());
    }
}

#[test]
fn reversible_battery_is_bochner() {
    let catalog = vec![CatalogEntry {
        name: "reversible quartic".into(),
        spec: ProblemSpec::on_cube(2, -1.0, 1.0, "(x1^4 + x2^4)/4 + x1*x2", DriftSpec::Gradient),
    }];
    for convention in [Convention::Corrected, Convention::Definition] {
        let cfg = BatteryConfig {
            convention,
            tolerance: 1e-10,
            ..BatteryConfig::default()
        };
        let out = identity_battery(&catalog, &cfg).unwrap();
        assert!(out[0].pass);
    }
}

#[test]
fn weak_form_vanishes_at_the_invariant_density() {
    let p = problem("(x1^2 + x2^2)/2", 0.1, 1.0);
    let g = Grid::uniform(2, -1.0, 1.0, 64).unwrap();
    let pi = normalized(p.density_field(&g).unwrap());
    let r = weak_form_residual(&pi, &p).unwrap();
    assert!(r.lhs.abs() <= 1e-10 && r.rhs.abs() <= 1e-10, "{r:?}");
}

#[test]
fn weak_form_without_drift_is_identically_balanced() {
    let p = build_problem(&ProblemSpec::on_cube(2, -3.0, 3.0, "(x1^4 + x2^4)/4", DriftSpec::Gradient)).unwrap();
    let g = Grid::uniform(2, -3.0, 3.0, 64).unwrap();
    let q = gaussian_density(&g, &[0.4, -0.2], 0.8);
    let r = weak_form_residual(&q, &p).unwrap();
    assert!(r.lhs > 0.1);
    assert!(r.residual <= 1e-12, "{r:?}");
}

#[test]
fn weak_form_offset_gaussian_on_the_figure_problem() {
    let p = problem("(x1^2 + x2^2)/2", 0.1, 1.0);
    let g = Grid::uniform(2, -1.0, 1.0, 128).unwrap();
    let q = gaussian_density(&g, &[0.3, 0.0], 1.0);
    let r = weak_form_residual(&q, &p).unwrap();
    assert!(r.residual <= 2e-2, "{r:?}");
    assert!(r.lhs > 0.0);
}

#[test]
fn weak_form_rejects_unusable_densities() {
    let p = problem("(x1^2 + x2^2)/2", 0.1, 1.0);
    let g = Grid::uniform(2, -1.0, 1.0, 16).unwrap();
    let mut q = gaussian_density(&g, &[0.0, 0.0], 1.0);
    q.values_mut()[5] = 0.0;
    assert!(matches!(weak_form_residual(&q, &p), Err(GammaError::NonPositiveDensity { cell: 5, .. })));
    let q = ScalarField::constant(&g, 1.0);
    assert!(matches!(weak_form_residual(&q, &p), Err(GammaError::NotNormalized { .. })));
}

#[test]
fn yano_balances_when_the_boundary_is_negligible() {
    let reversible = build_problem(&ProblemSpec::on_cube(2, -6.0, 6.0, "(x1^2 + x2^2)/2", DriftSpec::Gradient)).unwrap();
    let g = Grid::uniform(2, -6.0, 6.0, 128).unwrap();
    let r = yano_residual(&parse("x1", 2).unwrap(), &reversible, &g).unwrap();
    assert!(r.residual <= 1e-4, "{r:?}");
    assert!((r.lhs - 1.0).abs() < 1e-3);

    let skewed = problem("(x1^2 + x2^2)/2", 0.1, 6.0);
    let r = yano_residual(&parse("x1*x2", 2).unwrap(), &skewed, &g).unwrap();
    assert!(r.residual <= 1e-3, "{r:?}");

    let r = yano_residual(&parse("2.5", 2).unwrap(), &skewed, &g).unwrap();
    assert_eq!((r.lhs, r.rhs), (0.0, 0.0));
}

#[test]
fn yano_boundary_term_accounts_for_small_boxes() {
    let p = problem("(x1^2 + 3*x2^2)/2", 0.5, 1.0);
    let phi = parse("sin(x1) + x1*x2/2 + x2^2/4", 2).unwrap();
    let g = Grid::uniform(2, -1.0, 1.0, 128).unwrap();
    let r = yano_residual(&phi, &p, &g).unwrap();
    assert!(r.residual > 1e-2);
    assert!(r.corrected < 1e-3 * r.residual, "{r:?}");
}

fn quadratic() -> impl Strategy<Value = String> {
    (0.2f64..3.0, -0.8f64..0.8, 0.2f64..3.0).prop_map(|(a, b, c)| format!("{a}*x1^2/2 + {b}*x1*x2 + {c}*x2^2/2"))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn identity_closes_for_random_cubics_and_quadratics(
        u in quadratic(),
        c in -1.0f64..1.0,
        seed in any::<u64>(),
        pts in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 20),
    ) {
        let p = problem(&u, c, 1.0);
        let f = cubic(seed);
        let ops = GammaOperators::new(&f, &p);
        for (a, b) in pts {
            let v = ops.at(&p, &[a, b], Convention::Corrected).unwrap();
            prop_assert!(v.identity_residual() <= 1e-9, "{} at ({a},{b})", v.identity_residual());
            prop_assert!(v.gamma1 >= 0.0 && v.modified_hessian_sq >= 0.0);
            let data = ops.point_data(&p, &[a, b]).unwrap();
            let g2 = ops.gamma2_operator(&[a, b]).unwrap();
            let gi = ops.gamma_info_operator(&data, &[a, b]).unwrap();
            prop_assert!((g2 - data.gamma2_reduced()).abs() <= 1e-9 * (1.0 + g2.abs()));
            prop_assert!((gi - data.gamma_info_reduced()).abs() <= 1e-9 * (1.0 + gi.abs()));
        }
    }

    #[test]
    fn operators_scale_quadratically(
        seed in any::<u64>(),
        scale in -3.0f64..3.0,
        a in -1.0f64..1.0,
        b in -1.0f64..1.0,
    ) {
        let p = shared(&QUARTIC, "(x1^4 + x2^4)/4 + (x1^2 + x2^2)/2", 0.5);
        let f = cubic(seed);
        let v = gamma_values(&f, p, &[a, b]).unwrap();
        let w = gamma_values(&(Expr::constant(scale) * f), p, &[a, b]).unwrap();
        let s2 = scale * scale;
        for (x, y) in [
            (v.gamma1, w.gamma1),
            (v.gamma2_tilde, w.gamma2_tilde),
            (v.gamma_info, w.gamma_info),
            (v.modified_hessian_sq, w.modified_hessian_sq),
            (v.r_form, w.r_form),
        ] {
            prop_assert!((s2 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn information_term_vanishes_without_drift(seed in any::<u64>(), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let p = shared(&REVERSIBLE, "(x1^2 + 3*x2^2)/2 + x1*x2/4", 0.0);
        let f = cubic(seed);
        let v = gamma_values(&f, p, &[a, b]).unwrap();
        prop_assert!(v.gamma_info.abs() <= 1e-12);
        prop_assert!(identity_residual(&f, p, &[a, b]).unwrap() <= 1e-10);
    }
}
