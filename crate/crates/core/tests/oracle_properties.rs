use kolmo::app::catalog::{deterministic_exp, heat_sin_1d};
use kolmo::oracle::{fd_compare, fd_solve, interior_probes, Boundary, FdGrid};
use kolmo::sfpe::picard_solve;
use kolmo::{Expression, GrowthClass, InitPolicy, LyapunovSpec, PicardConfig, ProblemSpec, SdeCoefficients, TimeRule};
use proptest::prelude::*;

fn problem(mu: f64, sigma: f64, f: &str, g: &str) -> ProblemSpec {
    let c = SdeCoefficients::parse(1, 1, &[format!("{mu:?}")], &[vec![format!("{sigma:?}")]], 1.0).unwrap();
    ProblemSpec::new(
        "oracle",
        c,
        Expression::parse(f, 1, true).unwrap(),
        Expression::parse(g, 1, false).unwrap(),
        1.0,
        1.0,
        LyapunovSpec::polynomial(2.0, 1.0),
        GrowthClass::Polynomial(2.0),
    )
    .unwrap()
}

#[test]
fn noiseless_problem_matches_exact_picard() {
    let entry = deterministic_exp();
    let grid = FdGrid::new(-4.0, 4.0, 400, 2000, Boundary::DirichletG).unwrap();
    let sol = fd_solve(&entry.problem, &grid).unwrap();
    let mut cfg = PicardConfig::new(8, 1, 1, 0);
    cfg.time_rule = TimeRule::GaussLegendre(4);
    cfg.init = InitPolicy::TerminalG;
    let mc: Vec<_> = interior_probes(-4.0, 4.0, 5)
        .into_iter()
        .map(|x| (0.0, x, picard_solve(&entry.problem, &cfg, 0.0, &[x]).unwrap().estimate))
        .collect();
    assert!(mc.iter().all(|(_, _, e)| e.se_or_zero() == 0.0));
    let report = fd_compare(&sol, &mc, 2e-2).unwrap();
    assert!(report.pass, "{report:?}");
    for row in &report.rows {
        assert!((row.fd - std::f64::consts::E).abs() <= 1e-3, "{row:?}");
    }
}

#[test]
fn reference_boundary_tracks_exact_solution() {
    let entry = heat_sin_1d();
    let reference = entry.reference_solution.clone().unwrap();
    let grid = FdGrid::with_cfl(&entry.problem, -2.0, 2.0, 160, Boundary::Reference(reference)).unwrap();
    let sol = fd_solve(&entry.problem, &grid).unwrap();
    for x in interior_probes(-2.0, 2.0, 9) {
        let exact = (-1.0f64).exp() * x.sin();
        assert!((sol.interpolate(0.0, x).unwrap() - exact).abs() <= 2e-3, "x = {x}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ordered_data_give_ordered_solutions(
        mu in -0.5f64..0.5,
        sigma in 0.5f64..1.5,
        bump in 0.0f64..1.0,
        lift in 0.0f64..0.5,
    ) {
        let lower = problem(mu, sigma, "-0.5*v", "cos(x1)");
        let upper = problem(mu, sigma, &format!("-0.5*v + {lift:?}"), &format!("cos(x1) + {bump:?}/(1 + x1^2)"));
        let grid = FdGrid::with_cfl(&lower, -3.0, 3.0, 60, Boundary::DirichletG).unwrap();
        let (a, b) = (fd_solve(&lower, &grid).unwrap(), fd_solve(&upper, &grid).unwrap());
        for (ra, rb) in a.values.iter().zip(&b.values) {
            for (ua, ub) in ra.iter().zip(rb) {
                prop_assert!(*ua <= ub + 1e-12);
            }
        }
    }

    #[test]
    fn terminal_row_reproduces_g(shift in -1.0f64..1.0, nx in 20usize..120) {
        let p = problem(0.0, 1.0, "0", &format!("tanh(x1 + {shift:?})"));
        let grid = FdGrid::with_cfl(&p, -3.0, 3.0, nx, Boundary::ExtrapolateLinear).unwrap();
        let sol = fd_solve(&p, &grid).unwrap();
        let terminal = &sol.values[0];
        prop_assert_eq!(sol.times[0], 1.0);
        for (x, u) in sol.x.iter().zip(terminal) {
            prop_assert_eq!(*u, (x + shift).tanh());
        }
    }
}
