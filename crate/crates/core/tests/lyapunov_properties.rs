use kolmo::lyapunov::{
    admissible_heat_type, ball_points, check_supersolution, fit_rho, generator_apply, max_admissible_horizon,
};
use kolmo::{Expression, LyapunovSpec, RngStream, SdeCoefficients};
use proptest::prelude::*;

fn point(max_dim: usize, radius: f64) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_dim).prop_flat_map(move |d| {
        prop::collection::vec(-1.0f64..1.0, d).prop_map(move |v| v.into_iter().map(|c| c * radius / (d as f64).sqrt()).collect())
    })
}

fn heat_closed_form(alpha: f64, epsilon: f64, c: f64, t: f64, x: &[f64]) -> f64 {
    let d = x.len() as f64;
    let s = alpha * t + epsilon;
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let value = (2.0 * std::f64::consts::PI * s).powf(-d / 2.0) * (r2 / (2.0 * s)).exp();
    (c - alpha) * (d / (2.0 * s) + r2 / (2.0 * s * s)) * value
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn unit_diffusion_on_quadratic_polynomial_is_dimension() {
    let c = SdeCoefficients::scaled_brownian(3, 1.0, 1.0);
    let spec = LyapunovSpec::polynomial(2.0, 3.0);
    let pts = ball_points::<f64>(3, 10.0, 1.0, 200, &RngStream::new(2));
    for (t, x) in &pts {
        let gen = generator_apply(&spec, &c, *t, x).unwrap();
        assert!((gen - 3.0).abs() <= 1e-8, "{gen}");
    }
}

#[test]
fn geometric_brownian_supersolution_rate() {
    let c = SdeCoefficients::parse(1, 1, &["x1"], &[vec!["x1"]], 1.0).unwrap();
    let grid = ball_points::<f64>(1, 10.0, 1.0, 400, &RngStream::new(4));
    assert!(check_supersolution(&LyapunovSpec::polynomial(2.0, 3.0), &c, &grid, 1e-9).unwrap().pass);
    let tight = check_supersolution(&LyapunovSpec::polynomial(2.0, 2.5), &c, &grid, 1e-9).unwrap();
    assert!(!tight.pass);
    assert!(tight.max_violation > 0.0);
    let rho = fit_rho(&LyapunovSpec::polynomial(2.0, 0.0), &c, &grid).unwrap();
    assert!(rho < 3.0 && rho > 2.9, "{rho}");
}

#[test]
fn heat_type_horizon_boundary() {
    let (a, c) = (1.0, 0.5);
    assert_eq!(max_admissible_horizon(a, c), 1.0);
    assert!(!admissible_heat_type(a, c, 1.0));
    assert!(admissible_heat_type(a, c, 0.999));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn heat_kernel_generator_closed_form(
        alpha in 0.0f64..2.0,
        epsilon in 0.2f64..2.0,
        cbar in 0.0f64..2.0,
        t in 0.0f64..1.0,
        x in point(4, 5.0),
    ) {
        let c = SdeCoefficients::scaled_brownian(x.len(), cbar.sqrt(), 1.0);
        let spec = LyapunovSpec::heat_kernel(alpha, epsilon, 0.0);
        let gen = generator_apply(&spec, &c, t, &x).unwrap();
        let exact = heat_closed_form(alpha, epsilon, cbar, t, &x);
        prop_assert!((gen - exact).abs() <= 1e-10 * spec.value(t, &x).unwrap(), "{gen} vs {exact}");
        if cbar <= alpha {
            prop_assert!(gen <= 0.0);
        }
    }

    #[test]
    fn polynomial_generator_closed_form(q in 0.5f64..6.0, scale in 0.1f64..2.0, x in point(4, 10.0)) {
        let d = x.len() as f64;
        let c = SdeCoefficients::scaled_brownian(x.len(), scale, 1.0);
        let gen = generator_apply(&LyapunovSpec::polynomial(q, 0.0), &c, 0.3, &x).unwrap();
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let exact = scale * scale * q / 2.0 * (1.0 + r2).powf(q / 2.0 - 1.0) * (d + (q - 2.0) * r2 / (1.0 + r2));
        prop_assert!(close(gen, exact, 1e-10), "{gen} vs {exact}");
    }

    #[test]
    fn closed_form_derivatives_match_differences(q in 1.0f64..5.0, alpha in 0.0f64..1.0, t in 0.0f64..1.0, x in point(3, 3.0)) {
        for spec in [LyapunovSpec::polynomial(q, 0.0), LyapunovSpec::heat_kernel(alpha, 4.0, 0.0)] {
            let exact = spec.derivatives(t, &x).unwrap();
            let fd = spec.derivatives_fd(t, &x).unwrap();
            let tol = 1e-5 * exact.value;
            prop_assert!((exact.dt - fd.dt).abs() <= tol);
            for (a, b) in exact.grad.iter().zip(&fd.grad).chain(exact.hess.iter().zip(&fd.hess)) {
                prop_assert!((a - b).abs() <= tol, "{} {a} vs {b}", spec.family_name());
            }
        }
    }

    #[test]
    fn expression_family_agrees_with_polynomial(x in point(2, 4.0), drift in -1.0f64..1.0) {
        let c = SdeCoefficients::parse(2, 2, &[format!("{drift:?}*x1"), "0".to_string()], &[vec!["1".to_string(), "0.5".into()], vec!["0".into(), "x1".into()]], 1.0).unwrap();
        let x = if x.len() == 2 { x } else { vec![x[0], 0.5] };
        let expr = Expression::parse("(1 + x1^2 + x2^2)^2", 2, false).unwrap();
        let user = generator_apply(&LyapunovSpec::expression(expr, 0.0), &c, 0.0, &x).unwrap();
        let poly = generator_apply(&LyapunovSpec::polynomial(4.0, 0.0), &c, 0.0, &x).unwrap();
        let value = LyapunovSpec::polynomial(4.0, 0.0).value(0.0, &x).unwrap();
        prop_assert!((user - poly).abs() <= 1e-5 * value, "{user} vs {poly}");
    }

    #[test]
    fn built_in_families_are_positive(q in 0.1f64..8.0, alpha in 0.0f64..3.0, eps in 0.05f64..3.0, t in 0.0f64..2.0, x in point(5, 10.0)) {
        prop_assert!(LyapunovSpec::polynomial(q, 0.0).value(t, &x).unwrap() >= 1.0);
        prop_assert!(LyapunovSpec::heat_kernel(alpha, eps, 0.0).value(t, &x).unwrap() > 0.0);
    }

    #[test]
    fn heat_type_admissibility_is_monotone(a in 0.01f64..4.0, c in 0.0f64..4.0, horizon in 0.01f64..4.0, shrink in 0.0f64..1.0) {
        if admissible_heat_type(a, c, horizon) {
            prop_assert!(admissible_heat_type(a, c * shrink, horizon));
            prop_assert!(admissible_heat_type(a, c, horizon * shrink));
        }
        if c > 0.0 {
            let limit = max_admissible_horizon(a, c);
            prop_assert!(!admissible_heat_type(a, c, limit * (1.0 + 1e-12)));
            prop_assert!(admissible_heat_type(a, c, limit * (1.0 - 1e-12)));
        }
    }
}
