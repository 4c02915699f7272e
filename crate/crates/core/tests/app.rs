use kolmo::app::catalog::{allen_cahn_trunc, deterministic_exp, gbm_linear, heat_quadratic, heat_sin_1d, lambda_reaction};
use kolmo::app::{
    catalog, content_hash, exit, load_problem, parse_problem, paths_dump, run_oracle_compare, run_solve, run_study,
    run_verify, standard_probes, to_problem_file, with_threads, AppError, Check, Method, OracleGridConfig, Probe,
    SolveConfig, Sweep,
};
use kolmo::stats::linear_fit;
use kolmo::{Expression, TimeRule};

const HEAT_SIN: &str = r#"id = "heat_sin_file"
dimension_d = 1
noise_m = 1
horizon = 1.0
mu = ["0"]
sigma = [["sqrt(2)"]]
f = "0"
g = "sin(x1)"
lipschitz_L = 1.5

[growth]
kind = "polynomial"
param = 0.0

[lyapunov]
family = "polynomial"
q = 4.0
rho = 12.0
"#;

fn schema_error(text: &str) -> (String, String) {
    match parse_problem(text, "problem.toml") {
        Err(AppError::Schema { field, reason }) => (field, reason),
        other => panic!("expected a schema error, got {other:?}"),
    }
}

#[test]
fn problem_file_parses() {
    let entry = parse_problem(HEAT_SIN, "heat.toml").unwrap();
    assert_eq!(entry.id, "heat_sin_file");
    assert_eq!(entry.problem.dim(), 1);
    assert_eq!(entry.problem.f.source(), "0");
    assert_eq!(entry.admissibility_profile, vec![Check::Coercivity, Check::Lipschitz, Check::Supersolution, Check::GrowthRatio]);
    assert!(entry.reference_solution.is_none());
}

#[test]
fn schema_violations_name_the_field() {
    let (field, reason) = schema_error(&HEAT_SIN.replace("horizon = 1.0\n", ""));
    assert_eq!((field.as_str(), reason.as_str()), ("horizon", "required"));

    let two_d = HEAT_SIN.replace("dimension_d = 1", "dimension_d = 2").replace(r#"mu = ["0"]"#, r#"mu = ["0", "0"]"#);
    assert_eq!(schema_error(&two_d).0, "sigma");

    let (field, reason) = schema_error(&HEAT_SIN.replace("f = \"0\"", "f = \"0\"\ncolour = \"blue\""));
    assert_eq!((field.as_str(), reason.as_str()), ("colour", "unknown field"));

    assert_eq!(schema_error(&HEAT_SIN.replace("rho = 12.0\n", "")).0, "lyapunov.rho");
    assert_eq!(schema_error(&HEAT_SIN.replace("q = 4.0", "q = 4.0\nalpha = 1.0")).0, "lyapunov.alpha");
}

#[test]
fn expression_errors_carry_location() {
    match parse_problem(&HEAT_SIN.replace("sin(x1)", "sin(x1"), "heat.toml") {
        Err(AppError::Syntax { file, line, field, .. }) => {
            assert_eq!((file.as_str(), line, field.as_str()), ("heat.toml", 8, "g"));
        }
        other => panic!("{other:?}"),
    }
    match parse_problem(&HEAT_SIN.replace("f = \"0\"", "f = \"x2\""), "heat.toml") {
        Err(e @ AppError::Syntax { .. }) => assert_eq!(e.exit_code(), exit::CONFIG),
        other => panic!("{other:?}"),
    }
}

#[test]
fn exported_entries_round_trip() {
    for entry in catalog() {
        let text = to_problem_file(&entry);
        let back = parse_problem(&text, "export.toml").unwrap();
        assert_eq!(back, entry, "{}", entry.id);
        assert_eq!(to_problem_file(&back), text);
    }
}

#[test]
fn problem_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heat.toml");
    std::fs::write(&path, HEAT_SIN).unwrap();
    assert_eq!(load_problem(&path).unwrap(), parse_problem(HEAT_SIN, "heat.toml").unwrap());
    assert!(matches!(load_problem(&dir.path().join("missing.toml")), Err(AppError::Io(_))));
}

#[test]
fn content_hash_is_git_style_sha256() {
    assert_eq!(content_hash("hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
}

#[test]
fn catalog_entries_pass_verification() {
    for entry in catalog() {
        let report = run_verify(&entry, 1).unwrap();
        assert!(report.pass, "{}: {:?}", entry.id, report.checks);
    }
}

#[test]
fn verification_witnesses_failures() {
    let mut entry = allen_cahn_trunc();
    entry.problem.g = Expression::parse("exp(x1^2)", 1, false).unwrap();
    let report = run_verify(&entry, 1).unwrap();
    assert_eq!(report.failed, vec![Check::GrowthRatio]);

    let mut entry = gbm_linear();
    entry.problem.lipschitz_l = 0.05;
    entry.problem.coeffs.lipschitz_l = 0.05;
    let report = run_verify(&entry, 1).unwrap();
    assert!(report.failed.contains(&Check::Coercivity));
}

#[test]
fn heat_type_violation_blocks_solving() {
    let text = HEAT_SIN
        .replace("sqrt(2)", "sqrt(0.5)")
        .replace("kind = \"polynomial\"\nparam = 0.0", "kind = \"gaussian\"\nparam = 1.0");
    let entry = parse_problem(&text, "gaussian.toml").unwrap();
    assert!(entry.admissibility_profile.contains(&Check::HeatType));
    let cfg = SolveConfig::new(Method::Picard, 64, 1, 1, 1);
    let probes = [Probe::new(0.0, vec![0.0])];
    match run_solve(&entry, &cfg, &probes, None) {
        Err(e @ AppError::Admissibility { .. }) => {
            assert_eq!(e.exit_code(), exit::ADMISSIBILITY);
            let AppError::Admissibility { failed, note } = e else { unreachable!() };
            assert!(failed.contains(&Check::HeatType));
            let limit: f64 = note.unwrap().strip_prefix("horizon must stay below ").unwrap().parse().unwrap();
            assert!((limit - 1.0).abs() <= 1e-12, "{limit}");
        }
        other => panic!("{other:?}"),
    }
    let forced = SolveConfig { force: true, ..cfg };
    let (record, results) = run_solve(&entry, &forced, &probes, None).unwrap();
    assert!(record.forced);
    assert_eq!(results.len(), 1);
}

#[test]
fn solve_records_persist() {
    let dir = tempfile::tempdir().unwrap();
    let entry = heat_sin_1d();
    let cfg = SolveConfig::new(Method::Picard, 256, 3, 1, 4);
    let probes = standard_probes(&entry);
    let (record, results) = run_solve(&entry, &cfg, &probes, Some(dir.path())).unwrap();
    assert_eq!(results.len(), 5);
    assert!(results.iter().all(|r| r.iterates.len() == 3 && r.reference.is_some()));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(&record.run_id).join("record.json")).unwrap()).unwrap();
    for key in ["run_id", "timestamp", "problem_hash", "problem", "config", "admissibility", "results", "environment"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    assert_eq!(json["problem_hash"].as_str().unwrap(), content_hash(&to_problem_file(&entry)));
    let (again, _) = run_solve(&entry, &cfg, &probes, Some(dir.path())).unwrap();
    assert_ne!(again.run_id, record.run_id);
}

#[test]
fn solves_are_reproducible_across_thread_counts() {
    let entry = lambda_reaction(1, 1.0);
    let probes = standard_probes(&entry);
    for method in [Method::Picard, Method::Mlp] {
        let cfg = SolveConfig::new(method, 8, 3, 1, 9);
        let values = |threads| {
            with_threads(Some(threads), || run_solve(&entry, &cfg, &probes, None).unwrap().1)
                .unwrap()
                .iter()
                .map(|r| (r.value.to_bits(), r.std_error.map(f64::to_bits)))
                .collect::<Vec<_>>()
        };
        assert_eq!(values(1), values(4));
    }
}

#[test]
fn study_table_has_one_row_per_setting() {
    let entry = heat_quadratic(2);
    let base = SolveConfig::new(Method::Picard, 10, 1, 1, 3);
    let sweep = Sweep { samples: vec![10, 20], depth: vec![1, 2], sde_steps: vec![1] };
    let probes = standard_probes(&entry);
    let (_, csv) = run_study(&entry, &base, &sweep, &probes, None).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "method,M,K_or_n,sde_steps,probe_t,probe_x_repr,value,std_error,abs_error_vs_reference,work,wall_ms"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 2 * 5);
    assert!(rows.iter().all(|r| r.len() == 11 && !r[8].is_empty()));

    let empty = Sweep { samples: vec![], ..sweep };
    assert!(matches!(run_study(&entry, &base, &empty, &probes, None), Err(AppError::Config(_))));
}

#[test]
fn study_standard_error_scales_with_sample_count() {
    let entry = heat_sin_1d();
    let base = SolveConfig::new(Method::Picard, 1, 1, 1, 6);
    let sweep = Sweep { samples: vec![100, 1000, 10_000], depth: vec![1], sde_steps: vec![1] };
    let probes = [Probe::new(0.0, vec![0.7])];
    let (_, csv) = run_study(&entry, &base, &sweep, &probes, None).unwrap();
    let (ms, ses): (Vec<f64>, Vec<f64>) = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            ((c[1].parse::<f64>().unwrap()).ln(), c[7].parse::<f64>().unwrap().ln())
        })
        .unzip();
    let slope = linear_fit(&ms, &ses).0;
    assert!((-0.6..=-0.4).contains(&slope), "slope {slope}");
}

#[test]
fn study_errors_decay_with_iterations() {
    let entry = deterministic_exp();
    let base = SolveConfig { time_rule: TimeRule::GaussLegendre(4), ..SolveConfig::new(Method::Picard, 2, 1, 1, 12) };
    let sweep = Sweep { samples: vec![2], depth: vec![1, 2, 3, 4, 5], sde_steps: vec![1] };
    let (_, csv) = run_study(&entry, &base, &sweep, &[Probe::new(0.0, vec![0.0])], None).unwrap();
    let errors: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(8).unwrap().parse().unwrap()).collect();
    // Zero start: the K-th iterate is sum_{j < K} 1/j!.
    let mut tail = std::f64::consts::E;
    let mut fact = 1.0;
    for (k, err) in errors.iter().enumerate() {
        if k > 0 {
            fact *= k as f64;
        }
        tail -= 1.0 / fact;
        assert!((err - tail).abs() <= 1e-12, "K = {}: {err} vs {tail}", k + 1);
    }
    assert!(errors.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn oracle_comparison_of_heat_sin() {
    let dir = tempfile::tempdir().unwrap();
    let entry = heat_sin_1d();
    let pi = std::f64::consts::PI;
    let grid = OracleGridConfig { x_min: -pi, x_max: pi, nx: 200, nt: None };
    let cfg = SolveConfig::new(Method::Picard, 4000, 1, 1, 2);
    let (record, report) = run_oracle_compare(&entry, &grid, &cfg, None, 2e-2, Some(dir.path())).unwrap();
    assert!(report.pass, "{report:?}");
    assert_eq!(report.rows.len(), 5);
    let fd = std::fs::read_to_string(dir.path().join(&record.run_id).join("fd.csv")).unwrap();
    assert_eq!(fd.lines().next().unwrap(), "t,x,u");
}

#[test]
fn oracle_comparison_preconditions() {
    let cfg = SolveConfig::new(Method::Picard, 16, 1, 1, 2);
    let grid = OracleGridConfig::default();
    let e = run_oracle_compare(&heat_quadratic(2), &grid, &cfg, None, 2e-2, None).unwrap_err();
    assert!(matches!(e, AppError::Config(_)));
    assert_eq!(e.exit_code(), exit::CONFIG);
    let edge = [Probe::new(0.0, vec![3.5])];
    assert!(matches!(run_oracle_compare(&heat_sin_1d(), &grid, &cfg, Some(&edge), 2e-2, None), Err(AppError::Config(_))));
}

#[test]
fn path_dump_layout() {
    let csv = paths_dump(&gbm_linear(), 0.0, &[1.0], 3, 10, 5).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "path_id,step,t,x1");
    assert_eq!(lines.len(), 1 + 3 * 11);
    assert_eq!(lines[1], "0,0,0,1");
}

#[test]
fn exit_codes() {
    assert_eq!(AppError::Numerical("x".into()).exit_code(), exit::NUMERICAL);
    assert_eq!(AppError::Config("x".into()).exit_code(), exit::CONFIG);
    assert_eq!(AppError::Schema { field: "f".into(), reason: "required".into() }.exit_code(), exit::CONFIG);
    assert_eq!(AppError::Admissibility { failed: vec![], note: None }.exit_code(), exit::ADMISSIBILITY);
}
