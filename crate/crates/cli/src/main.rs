use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kolmo::app::{
    self, exit, with_threads, AppError, CatalogEntry, Method, OracleGridConfig, Probe, SolveConfig, SolveResult, Sweep,
};
use kolmo::oracle::DEFAULT_FD_TOL;
use kolmo::InitPolicy;

#[derive(Parser)]
#[command(name = "kolmo", version, about = "Monte-Carlo solvers for semilinear Kolmogorov equations")]
struct Cli {
    /// Root seed of all random streams.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory receiving one sub-directory per run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run even when required admissibility checks fail.
    #[arg(long, global = true)]
    force: bool,
    /// Machine-readable output instead of a table.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Zero,
    TerminalG,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the solution at probe points.
    Solve {
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        probes: ProbeArgs,
    },
    /// Sweep M, K (or n) and SDE steps and tabulate errors.
    Study {
        /// Catalog id or problem file.
        problem: String,
        #[arg(long, value_enum, default_value = "picard")]
        method: MethodArg,
        #[arg(long, value_delimiter = ',', required = true)]
        samples: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        depth: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        sde_steps: Vec<usize>,
        #[arg(long, value_enum, default_value = "zero")]
        init: Init,
        #[arg(long)]
        budget: Option<u64>,
        #[command(flatten)]
        probes: ProbeArgs,
    },
    /// Check the hypotheses of the existence theory.
    Verify {
        /// Catalog id or problem file.
        problem: String,
    },
    /// Compare a Monte-Carlo solve with the finite-difference oracle (d = 1).
    OracleCompare {
        #[command(flatten)]
        solver: SolverArgs,
        #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
        x_min: f64,
        #[arg(long, default_value_t = 4.0, allow_negative_numbers = true)]
        x_max: f64,
        #[arg(long, default_value_t = 200)]
        nx: usize,
        /// Time steps (defaults to the step limits, at least 1000).
        #[arg(long)]
        nt: Option<usize>,
        #[arg(long, default_value_t = DEFAULT_FD_TOL)]
        fd_tol: f64,
        #[command(flatten)]
        probes: ProbeArgs,
    },
    /// List or export the built-in problems.
    Catalog {
        #[command(subcommand)]
        action: CatalogAction,
    },
    /// Write simulated Euler paths as CSV.
    PathsDump {
        /// Catalog id or problem file.
        problem: String,
        #[arg(long, default_value_t = 10)]
        paths: usize,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        t0: f64,
        /// Initial state, comma separated (defaults to the origin).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        x0: Vec<f64>,
    },
}

#[derive(Subcommand)]
enum CatalogAction {
    List,
    /// Write every entry as a problem file into `--out` (or the current directory).
    Export,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Picard,
    Mlp,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Picard => Method::Picard,
            MethodArg::Mlp => Method::Mlp,
        }
    }
}

#[derive(Args)]
struct SolverArgs {
    /// Catalog id or problem file.
    problem: String,
    #[arg(long, value_enum, default_value = "picard")]
    method: MethodArg,
    /// Samples per application `M`.
    #[arg(short = 'M', long, default_value_t = 1000)]
    samples: usize,
    /// Picard iterations `K` or MLP levels `n`.
    #[arg(short = 'K', long, default_value_t = 1)]
    depth: usize,
    /// Euler steps per path when exact sampling is unavailable.
    #[arg(long, default_value_t = 50)]
    sde_steps: usize,
    #[arg(long, value_enum, default_value = "zero")]
    init: Init,
    /// Cap on estimated coefficient evaluations.
    #[arg(long)]
    budget: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Probe `t:x1,x2,...`; repeatable. Defaults depend on the command.
    #[arg(long = "probe", allow_hyphen_values = true)]
    probe: Vec<String>,
}

fn parse_probe(s: &str) -> Result<Probe, AppError> {
    let bad = || AppError::Config(format!("probe `{s}` is not of the form t:x1,x2,..."));
    let (t, x) = s.split_once(':').ok_or_else(bad)?;
    let t = t.trim().parse().map_err(|_| bad())?;
    let x = x.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<Vec<f64>, _>>()?;
    Ok(Probe::new(t, x))
}

fn probes_or(args: &ProbeArgs, default: impl FnOnce() -> Vec<Probe>) -> Result<Vec<Probe>, AppError> {
    if args.probe.is_empty() {
        Ok(default())
    } else {
        args.probe.iter().map(|s| parse_probe(s)).collect()
    }
}

fn resolve_problem(name: &str) -> Result<CatalogEntry, AppError> {
    let path = Path::new(name);
    if path.exists() || name.ends_with(".toml") {
        app::load_problem(path)
    } else {
        app::catalog_entry(name)
    }
}

fn init_policy(i: Init) -> InitPolicy {
    match i {
        Init::Zero => InitPolicy::Zero,
        Init::TerminalG => InitPolicy::TerminalG,
    }
}

fn solve_config(cli: &Cli, method: MethodArg, samples: usize, depth: usize, sde_steps: usize, init: Init, budget: Option<u64>) -> SolveConfig {
    let mut cfg = SolveConfig::new(method.into(), samples, depth, sde_steps, cli.seed);
    cfg.init = init_policy(init);
    cfg.force = cli.force;
    if let Some(b) = budget {
        cfg.work_budget = b;
    }
    cfg
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("outputs serialize")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "-".into())
}

fn results_table(results: &[SolveResult]) -> String {
    let mut out = format!("{:<10} {:<24} {:>14} {:>12} {:>12} {:>10}\n", "t", "x", "value", "SE", "work", "ms");
    for r in results {
        let probe = Probe::new(r.t, r.x.clone());
        out.push_str(&format!(
            "{:<10} {:<24} {:>14.8} {:>12} {:>12} {:>10.1}\n",
            r.t,
            probe.x_repr(),
            r.value,
            fmt_opt(r.std_error),
            r.work,
            r.wall_time_ms
        ));
    }
    out
}

fn results_csv(results: &[SolveResult]) -> String {
    let mut out = String::from("method,probe_t,probe_x_repr,value,std_error,work,wall_ms\n");
    for r in results {
        let probe = Probe::new(r.t, r.x.clone());
        let se = r.std_error.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{se},{},{:.3}\n", r.method, r.t, probe.x_repr(), r.value, r.work, r.wall_time_ms));
    }
    out
}

fn run(cli: &Cli) -> Result<i32, AppError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Solve { solver, probes } => {
            let entry = resolve_problem(&solver.problem)?;
            let cfg = solve_config(cli, solver.method, solver.samples, solver.depth, solver.sde_steps, solver.init, solver.budget);
            let probes = probes_or(probes, || vec![Probe::new(0.0, vec![0.0; entry.problem.dim()])])?;
            let (record, results) = app::run_solve(&entry, &cfg, &probes, out)?;
            match cli.format {
                Some(Format::Json) => println!("{}", json(&record)),
                Some(Format::Csv) => print!("{}", results_csv(&results)),
                None => print!("{}", results_table(&results)),
            }
            Ok(exit::PASS)
        }
        Command::Study { problem, method, samples, depth, sde_steps, init, budget, probes } => {
            let entry = resolve_problem(problem)?;
            let cfg = solve_config(cli, *method, 1, 1, 1, *init, *budget);
            let probes = probes_or(probes, || vec![Probe::new(0.0, vec![0.0; entry.problem.dim()])])?;
            let sweep = Sweep { samples: samples.clone(), depth: depth.clone(), sde_steps: sde_steps.clone() };
            let (record, csv) = app::run_study(&entry, &cfg, &sweep, &probes, out)?;
            match cli.format {
                Some(Format::Json) => println!("{}", json(&record)),
                _ => print!("{csv}"),
            }
            Ok(exit::PASS)
        }
        Command::Verify { problem } => {
            let entry = resolve_problem(problem)?;
            let report = app::run_verify(&entry, cli.seed)?;
            println!("{}", json(&report));
            if let Some(t) = report.max_admissible_horizon.filter(|_| report.failed.contains(&app::Check::HeatType)) {
                eprintln!("heat-type condition fails; the horizon must stay below {t}");
            }
            Ok(if report.pass { exit::PASS } else { exit::ADMISSIBILITY })
        }
        Command::OracleCompare { solver, x_min, x_max, nx, nt, fd_tol, probes } => {
            let entry = resolve_problem(&solver.problem)?;
            let cfg = solve_config(cli, solver.method, solver.samples, solver.depth, solver.sde_steps, solver.init, solver.budget);
            let grid = OracleGridConfig { x_min: *x_min, x_max: *x_max, nx: *nx, nt: *nt };
            let probes = if probes.probe.is_empty() { None } else { Some(probes_or(probes, Vec::new)?) };
            let (record, report) = app::run_oracle_compare(&entry, &grid, &cfg, probes.as_deref(), *fd_tol, out)?;
            match cli.format {
                Some(Format::Json) => println!("{}", json(&record)),
                Some(Format::Csv) => {
                    println!("t,x,fd,mc,std_error,abs_diff,pass");
                    for r in &report.rows {
                        println!("{},{},{},{},{},{},{}", r.t, r.x, r.fd, r.mc, r.std_error, r.abs_diff, r.pass);
                    }
                }
                None => {
                    println!("{:<8} {:<10} {:>12} {:>12} {:>10} {:>10} pass", "t", "x", "fd", "mc", "SE", "|diff|");
                    for r in &report.rows {
                        println!(
                            "{:<8} {:<10.4} {:>12.6} {:>12.6} {:>10.2e} {:>10.2e} {}",
                            r.t, r.x, r.fd, r.mc, r.std_error, r.abs_diff, r.pass
                        );
                    }
                }
            }
            Ok(if report.pass { exit::PASS } else { exit::NUMERICAL })
        }
        Command::Catalog { action: CatalogAction::List } => {
            for e in app::catalog() {
                let reference = e.reference_solution.as_ref().map(|r| r.source().to_string()).unwrap_or_else(|| "none".into());
                println!("{:<18} d={:<3} f = {:<24} g = {:<28} reference = {reference}", e.id, e.problem.dim(), e.problem.f.source(), e.problem.g.source());
            }
            Ok(exit::PASS)
        }
        Command::Catalog { action: CatalogAction::Export } => {
            let dir = out.unwrap_or(Path::new("."));
            std::fs::create_dir_all(dir).map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?;
            for e in app::catalog() {
                let path = dir.join(format!("{}.toml", e.id));
                std::fs::write(&path, app::to_problem_file(&e)).map_err(|err| AppError::Io(format!("{}: {err}", path.display())))?;
                println!("{}", path.display());
            }
            Ok(exit::PASS)
        }
        Command::PathsDump { problem, paths, steps, t0, x0 } => {
            let entry = resolve_problem(problem)?;
            let x0 = if x0.is_empty() { vec![0.0; entry.problem.dim()] } else { x0.clone() };
            let csv = app::paths_dump(&entry, *t0, &x0, *paths, *steps, cli.seed)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(|e| AppError::Io(format!("{}: {e}", dir.display())))?;
                    let path = dir.join(format!("{}_paths.csv", entry.id));
                    std::fs::write(&path, csv).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
                    println!("{}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(exit::PASS)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::PASS };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    let code = match with_threads(cli.threads, || run(&cli)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) | Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
