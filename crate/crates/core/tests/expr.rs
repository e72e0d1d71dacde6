use infogamma::expr::UnaryOp;
use infogamma::{parse, EvalError, Expr};
use proptest::prelude::*;

fn tree() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        (-3.0f64..3.0).prop_map(Expr::constant),
        (0usize..2).prop_map(Expr::var),
    ];
    leaf.prop_recursive(5, 40, 2, |inner| {
        prop_oneof![
            inner.clone().prop_map(|a| -a),
            inner.clone().prop_map(Expr::sin),
            inner.clone().prop_map(Expr::cos),
            inner.clone().prop_map(|a| Expr::apply(UnaryOp::Exp, a)),
            (inner.clone(), -3i32..4).prop_map(|(a, n)| a.powi(n)),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a + b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a - b),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| a * b),
            (inner.clone(), inner).prop_map(|(a, b)| a / b),
        ]
    })
}

fn bits(r: Result<f64, EvalError>) -> Option<u64> {
    r.ok().map(f64::to_bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn printed_trees_reparse_to_the_same_values(e in tree(), x in -2.0f64..2.0, y in -2.0f64..2.0) {
        let back = parse(&e.to_string(), 2).unwrap();
        prop_assert_eq!(bits(e.evaluate(&[x, y])), bits(back.evaluate(&[x, y])), "{}", e);
    }

    #[test]
    fn random_trees_differentiate_like_central_differences(
        e in tree(),
        x in -1.5f64..1.5,
        y in -1.5f64..1.5,
        axis in 0usize..2,
    ) {
        let d = e.differentiate(axis);
        let step = 1e-5;
        let mut lo = [x, y];
        let mut hi = [x, y];
        lo[axis] -= step;
        hi[axis] += step;
        let vals = (e.evaluate(&lo), e.evaluate(&hi), d.evaluate(&[x, y]), e.evaluate(&[x, y]));
        if let (Ok(a), Ok(b), Ok(exact), Ok(mid)) = vals {
            let fd = (b - a) / (2.0 * step);
            // skip points near poles and wildly curved spots where the stencil itself is unreliable
            let second = ((a - 2.0 * mid + b) / (step * step)).abs();
            prop_assume!(exact.abs() < 1e4 && second < 1e3 && mid.abs() < 1e4);
            prop_assert!((exact - fd).abs() <= 1e-6 * (1.0 + exact.abs()), "{} : {} vs {}", e, exact, fd);
        }
    }

    #[test]
    fn derivative_of_constant_is_literal_zero(v in -10.0f64..10.0, axis in 0usize..3) {
        prop_assert!(Expr::constant(v).differentiate(axis).is_zero());
    }
}

#[test]
fn expressions_evaluate_concurrently() {
    let e = parse("exp(-(x1^2 + x2^2)/2) * sin(3*x1) + x1*x2", 2).unwrap();
    let expect: Vec<u64> = (0..64)
        .map(|k| e.evaluate(&[k as f64 / 32.0 - 1.0, 0.25]).unwrap().to_bits())
        .collect();
    std::thread::scope(|s| {
        for _ in 0..4 {
            s.spawn(|| {
                for (k, want) in expect.iter().enumerate() {
                    let got = e.evaluate(&[k as f64 / 32.0 - 1.0, 0.25]).unwrap();
                    assert_eq!(got.to_bits(), *want);
                }
            });
        }
    });
}

#[test]
fn domain_errors_are_values_not_nan() {
    let e = parse("sqrt(x1) + log(x2)", 2).unwrap();
    assert!(matches!(e.evaluate(&[-1.0, 1.0]), Err(EvalError::SqrtDomain { .. })));
    assert!(matches!(e.evaluate(&[1.0, 0.0]), Err(EvalError::LogDomain { .. })));
    let q = parse("1/(x1 - x2)", 2).unwrap();
    assert!(matches!(q.evaluate(&[0.5, 0.5]), Err(EvalError::DivByZero { .. })));
}

#[test]
fn general_powers_go_through_exp_and_log() {
    assert!(parse("x1^0.5", 1).is_err());
    let e = parse("exp(0.5*log(x1))", 1).unwrap();
    assert!((e.evaluate(&[4.0]).unwrap() - 2.0).abs() < 1e-15);
    let d = e.differentiate(0).evaluate(&[4.0]).unwrap();
    assert!((d - 0.25).abs() < 1e-15);
}
