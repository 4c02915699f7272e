use kolmo::app::catalog;
use kolmo::lyapunov::supermartingale_check;
use kolmo::sde::{simulate_path, stability_bound, sup_quadratic_form, PathPlan, PathSampler, Scheme};
use kolmo::stats::mean_and_se;
use kolmo::{LyapunovSpec, RngStream, SdeCoefficients};
use proptest::prelude::*;
use rayon::prelude::*;

fn ou(theta: f64, shift: f64, vol: f64) -> SdeCoefficients {
    SdeCoefficients::parse(1, 1, &[format!("{theta:?}*x1 + {shift:?}")], &[vec![format!("{vol:?}")]], 1.0).unwrap()
}

fn terminal_states(c: &SdeCoefficients, x0: &[f64], steps: usize, paths: usize, seed: u64) -> Vec<Vec<f64>> {
    let plan = PathPlan::euler(0.0, 1.0, steps);
    let rng = RngStream::new(seed);
    (0..paths)
        .into_par_iter()
        .map(|p| simulate_path(x0, &plan, c, &rng.child(p as u64)).unwrap().states.pop().unwrap())
        .collect()
}

#[test]
fn paths_do_not_depend_on_thread_count() {
    let c = SdeCoefficients::parse(2, 2, &["-x1", "0.3*x2"], &[vec!["1", "0.2*x1"], vec!["0", "0.5"]], 1.0).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| terminal_states(&c, &[0.5, -0.5], 40, 512, 11))
    };
    let one = run(1);
    let four = run(4);
    for (a, b) in one.iter().zip(&four) {
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn euler_mean_of_linear_drift_is_exact_in_expectation() {
    let (theta, x0, steps, paths) = (-0.7, 1.3, 20, 100_000);
    let c = ou(theta, 0.0, 0.8);
    let xs: Vec<f64> = terminal_states(&c, &[x0], steps, paths, 3).into_iter().map(|s| s[0]).collect();
    let (mean, se) = mean_and_se(&xs);
    let se = se.unwrap();
    let discrete = x0 * (1.0 + theta / steps as f64).powi(steps as i32);
    assert!((mean - discrete).abs() <= 3.0 * se, "{mean} vs {discrete} (se {se})");
    let continuous = x0 * theta.exp();
    assert!((mean - continuous).abs() <= 3.0 * se + (discrete - continuous).abs());
}

#[test]
fn exact_sampler_reproduces_brownian_second_moment() {
    let c = SdeCoefficients::scaled_brownian(3, 1.0, 1.0);
    let sampler = PathSampler::<f64>::new(&c, Scheme::ExactConstantDiffusion, 1).unwrap();
    let x0 = [0.3, -1.0, 2.0];
    let rng = RngStream::new(5);
    let mut out = [0.0; 3];
    let mut work = 0;
    let values: Vec<f64> = (0..100_000u64)
        .map(|p| {
            sampler.sample(0.25, &x0, 1.0, &[1.0], &rng.child(p), &mut out, &mut work).unwrap();
            out.iter().map(|v| v * v).sum()
        })
        .collect();
    let (mean, se) = mean_and_se(&values);
    let exact = x0.iter().map(|v| v * v).sum::<f64>() + 3.0 * 0.75;
    assert!((mean - exact).abs() <= 3.0 * se.unwrap(), "{mean} vs {exact}");
}

#[test]
fn sibling_streams_are_uncorrelated() {
    let rng = RngStream::new(99);
    let n = 100_000;
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    rng.child(0).fill_normals(0, &mut a);
    rng.child(1).fill_normals(0, &mut b);
    let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / n as f64;
    assert!(corr.abs() <= 4.0 / (n as f64).sqrt(), "correlation {corr}");
}

#[test]
fn admissible_catalog_entries_are_supermartingales() {
    for entry in catalog() {
        let p = &entry.problem;
        let x0 = vec![0.5 / (p.dim() as f64).sqrt(); p.dim()];
        let report = supermartingale_check(
            &p.lyapunov,
            &p.coeffs,
            &x0,
            &[0.25, 0.5, 1.0],
            40,
            4000,
            p.lyapunov.rho,
            None,
            &RngStream::new(17),
        )
        .unwrap();
        assert!(report.pass, "{}: {:?}", entry.id, report.rows);
    }
}

#[test]
fn stability_bound_vanishes_without_perturbation() {
    assert_eq!(stability_bound(1.0, 2.0, 0.0), 0.0);
    assert!(stability_bound(1.0, 0.5, 0.1) < stability_bound(1.0, 0.5, 0.2));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn zero_noise_is_forward_euler(theta in -2.0f64..2.0, shift in -1.0f64..1.0, x0 in -3.0f64..3.0, steps in 1usize..60) {
        let c = ou(theta, shift, 0.0);
        let plan = PathPlan::euler(0.0, 1.0, steps);
        let path = simulate_path(&[x0], &plan, &c, &RngStream::new(1)).unwrap();
        let dt = 1.0 / steps as f64;
        let mut x = x0;
        for state in path.states.iter().skip(1) {
            x += (theta * x + shift) * dt;
            prop_assert!((state[0] - x).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn higher_stop_levels_stop_later(level in 1.5f64..20.0, extra in 0.0f64..20.0, seed in 0u64..1000) {
        let c = SdeCoefficients::parse(1, 1, &["0.5*x1"], &[vec!["1 + 0.2*x1"]], 1.0).unwrap();
        let rng = RngStream::new(seed);
        let stop = |lvl: f64| {
            let plan = PathPlan::euler(0.0, 1.0, 50).with_stop(LyapunovSpec::polynomial(2.0, 1.0), lvl);
            simulate_path(&[0.2], &plan, &c, &rng).unwrap().stop_time
        };
        prop_assert!(stop(level) <= stop(level + extra));
    }

    #[test]
    fn quadratic_form_bounds(b in prop::collection::vec(-3.0f64..3.0, 6)) {
        let (d, m) = (3, 2);
        let lambda = sup_quadratic_form(&b, d, m);
        let diag: Vec<f64> = (0..d).map(|i| (0..m).map(|l| b[i * m + l].powi(2)).sum()).collect();
        let trace: f64 = diag.iter().sum();
        for a in &diag {
            prop_assert!(lambda >= a - 1e-9 * trace.max(1.0));
        }
        prop_assert!(lambda <= trace + 1e-9 * trace.max(1.0));
    }
}
