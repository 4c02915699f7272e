//! Solve, study and oracle-comparison drivers with their run records.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::catalog::{CatalogEntry, Check};
use super::schema::to_problem_file;
use super::verify::{run_verify, VerifyReport};
use super::AppError;
use crate::oracle::{fd_compare, fd_solve, interior_probes, Boundary, CompareReport, FdGrid, FdSolution};
use crate::rng::RngStream;
use crate::sde::{simulate_path, PathPlan};
use crate::sfpe::{
    mlp_estimate, picard_solve, InitPolicy, MlpConfig, PicardConfig, TimeRule, DEFAULT_WORK_BUDGET, MLP_REPLICATIONS,
};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Picard,
    Mlp,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Picard => "picard",
            Method::Mlp => "mlp",
        })
    }
}

impl FromStr for Method {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, AppError> {
        match s {
            "picard" => Ok(Method::Picard),
            "mlp" => Ok(Method::Mlp),
            other => Err(AppError::Config(format!("unknown method `{other}` (picard, mlp)"))),
        }
    }
}

/// Solver settings shared by every driver.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveConfig {
    pub method: Method,
    /// `M`.
    pub samples: usize,
    /// Picard iterations `K` or MLP levels `n`.
    pub depth: usize,
    pub sde_steps: usize,
    pub seed: u64,
    pub init: InitPolicy,
    pub time_rule: TimeRule,
    pub replications: usize,
    pub work_budget: u64,
    /// Run even when required admissibility checks fail.
    pub force: bool,
}

impl SolveConfig {
    pub fn new(method: Method, samples: usize, depth: usize, sde_steps: usize, seed: u64) -> Self {
        Self {
            method,
            samples,
            depth,
            sde_steps,
            seed,
            init: InitPolicy::Zero,
            time_rule: TimeRule::UniformSample,
            replications: MLP_REPLICATIONS,
            work_budget: DEFAULT_WORK_BUDGET,
            force: false,
        }
    }

    pub fn picard(&self) -> PicardConfig {
        PicardConfig {
            init: self.init,
            time_rule: self.time_rule,
            work_budget: self.work_budget,
            ..PicardConfig::new(self.depth, self.samples, self.sde_steps, self.seed)
        }
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            replications: self.replications,
            work_budget: self.work_budget,
            ..MlpConfig::new(self.depth, self.samples, self.sde_steps, self.seed)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub t: f64,
    pub x: Vec<f64>,
}

impl Probe {
    pub fn new(t: f64, x: Vec<f64>) -> Self {
        Self { t, x }
    }

    /// `[x1;x2;...]`, free of commas for CSV cells.
    pub fn x_repr(&self) -> String {
        format!("[{}]", self.x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"))
    }
}

/// Five probes `(j T / 5, s_j (1, ..., 1) / sqrt(d))` with
/// `s_j = -1, -0.5, 0, 0.5, 1`.
pub fn standard_probes(entry: &CatalogEntry) -> Vec<Probe> {
    let d = entry.problem.dim();
    let scale = 1.0 / (d as f64).sqrt();
    (0..5)
        .map(|j| Probe::new(entry.problem.horizon * j as f64 / 5.0, vec![(-1.0 + 0.5 * j as f64) * scale; d]))
        .collect()
}

/// One probe's result in the `record.json` format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveResult {
    pub problem_id: String,
    pub method: Method,
    pub config: SolveConfig,
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub std_error: Option<f64>,
    pub work: u64,
    pub wall_time_ms: f64,
    /// Picard iterates `v_1, ..., v_K`; empty for MLP.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub iterates: Vec<Estimate<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

/// Runs the configured estimator at one probe.
pub fn solve_probe(entry: &CatalogEntry, cfg: &SolveConfig, probe: &Probe) -> Result<SolveResult, AppError> {
    let start = Instant::now();
    let (estimate, iterates) = match cfg.method {
        Method::Picard => {
            let out = picard_solve(&entry.problem, &cfg.picard(), probe.t, &probe.x)?;
            (out.estimate, out.iterates)
        }
        Method::Mlp => {
            let rng = RngStream::new(cfg.seed);
            (mlp_estimate(&entry.problem, &cfg.mlp(), probe.t, &probe.x, &rng)?, Vec::new())
        }
    };
    Ok(SolveResult {
        problem_id: entry.id.clone(),
        method: cfg.method,
        config: cfg.clone(),
        t: probe.t,
        x: probe.x.clone(),
        value: estimate.value,
        std_error: estimate.std_error,
        work: estimate.work,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        iterates,
        reference: entry.reference_at(probe.t, &probe.x),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub run_id: String,
    pub timestamp: String,
    pub command: String,
    pub problem_id: String,
    /// Git-style blob hash (SHA-256) of the serialized problem file.
    pub problem_hash: String,
    pub problem: String,
    pub config: Value,
    /// Admissibility checks were bypassed with `--force`.
    pub forced: bool,
    pub admissibility: Option<VerifyReport>,
    pub results: Vec<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<Value>,
    pub environment: String,
}

/// `sha256("blob <len>\0" + text)` in hex.
pub fn content_hash(text: &str) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn environment_note() -> String {
    format!(
        "kolmo {} on {}-{}, {} worker thread(s)",
        env!("CARGO_PKG_VERSION"),
        std::env::consts::OS,
        std::env::consts::ARCH,
        rayon::current_num_threads()
    )
}

impl RunRecord {
    fn new(command: &str, entry: &CatalogEntry, config: Value) -> Self {
        let problem = to_problem_file(entry);
        let problem_hash = content_hash(&problem);
        let now = chrono::Utc::now();
        Self {
            run_id: format!("{}-{}-{}", now.format("%Y%m%dT%H%M%S"), entry.id, &problem_hash[..8]),
            timestamp: now.to_rfc3339(),
            command: command.into(),
            problem_id: entry.id.clone(),
            problem_hash,
            problem,
            config,
            forced: false,
            admissibility: None,
            results: Vec::new(),
            report: None,
            environment: environment_note(),
        }
    }

    /// Writes `record.json` and `files` into a fresh `<out>/<run_id>`
    /// directory; a numeric suffix keeps run ids unique.
    pub fn persist(&mut self, out: &Path, files: &[(&str, &str)]) -> Result<PathBuf, AppError> {
        let io = |e: std::io::Error| AppError::Io(format!("{}: {e}", out.display()));
        std::fs::create_dir_all(out).map_err(io)?;
        let base = self.run_id.clone();
        let mut dir = out.join(&base);
        let mut k = 1;
        while dir.exists() {
            self.run_id = format!("{base}-{k}");
            dir = out.join(&self.run_id);
            k += 1;
        }
        std::fs::create_dir(&dir).map_err(io)?;
        let json = serde_json::to_string_pretty(self).expect("records serialize");
        std::fs::write(dir.join("record.json"), json).map_err(io)?;
        for (name, contents) in files {
            std::fs::write(dir.join(name), contents).map_err(io)?;
        }
        Ok(dir)
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("results serialize")
}

/// Runs the admissibility report; failing required checks abort unless forced.
fn admissibility_gate(entry: &CatalogEntry, cfg: &SolveConfig, record: &mut RunRecord) -> Result<(), AppError> {
    let report = run_verify(entry, cfg.seed)?;
    if !report.pass {
        if !cfg.force {
            let note = report
                .failed
                .contains(&Check::HeatType)
                .then_some(report.max_admissible_horizon)
                .flatten()
                .map(|t| format!("horizon must stay below {t}"));
            return Err(AppError::Admissibility { failed: report.failed, note });
        }
        record.forced = true;
    }
    record.admissibility = Some(report);
    Ok(())
}

/// Admissibility gate, then the configured estimator at every probe.
pub fn run_solve(
    entry: &CatalogEntry,
    cfg: &SolveConfig,
    probes: &[Probe],
    out: Option<&Path>,
) -> Result<(RunRecord, Vec<SolveResult>), AppError> {
    if probes.is_empty() {
        return Err(AppError::Config("no probes".into()));
    }
    let mut record = RunRecord::new("solve", entry, to_value(cfg));
    admissibility_gate(entry, cfg, &mut record)?;
    let results = probes.iter().map(|p| solve_probe(entry, cfg, p)).collect::<Result<Vec<_>, _>>()?;
    record.results = results.iter().map(to_value).collect();
    if let Some(out) = out {
        record.persist(out, &[])?;
    }
    Ok((record, results))
}

/// Parameter grid of a convergence study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub samples: Vec<usize>,
    pub depth: Vec<usize>,
    pub sde_steps: Vec<usize>,
}

pub const STUDY_CSV_HEADER: &str =
    "method,M,K_or_n,sde_steps,probe_t,probe_x_repr,value,std_error,abs_error_vs_reference,work,wall_ms";

/// Oracle grid used when a one-dimensional entry has no reference.
fn fd_reference(entry: &CatalogEntry, probes: &[Probe]) -> Option<FdSolution> {
    let xs = probes.iter().map(|p| p.x[0]);
    let lo = xs.clone().fold(f64::INFINITY, f64::min) - 4.0;
    let hi = xs.fold(f64::NEG_INFINITY, f64::max) + 4.0;
    let mut grid = FdGrid::with_cfl(&entry.problem, lo, hi, 200, Boundary::ExtrapolateLinear).ok()?;
    grid.nt = grid.nt.max(ORACLE_MIN_STEPS);
    fd_solve(&entry.problem, &grid).ok()
}

/// Runs the estimator over the full sweep grid. Errors are measured against
/// the reference solution, or the finite-difference oracle when `d = 1`.
pub fn run_study(
    entry: &CatalogEntry,
    base: &SolveConfig,
    sweep: &Sweep,
    probes: &[Probe],
    out: Option<&Path>,
) -> Result<(RunRecord, String), AppError> {
    if sweep.samples.is_empty() || sweep.depth.is_empty() || sweep.sde_steps.is_empty() {
        return Err(AppError::Config("empty sweep".into()));
    }
    if probes.is_empty() {
        return Err(AppError::Config("no probes".into()));
    }
    let mut record = RunRecord::new("study", entry, json!({ "base": base, "sweep": sweep }));
    admissibility_gate(entry, base, &mut record)?;
    let oracle = match entry.reference_solution {
        None if entry.problem.dim() == 1 => fd_reference(entry, probes),
        _ => None,
    };
    let truth: Vec<Option<f64>> = probes
        .iter()
        .map(|p| entry.reference_at(p.t, &p.x).or_else(|| oracle.as_ref()?.interpolate(p.t, p.x[0]).ok()))
        .collect();
    let mut csv = format!("{STUDY_CSV_HEADER}\n");
    for &depth in &sweep.depth {
        for &samples in &sweep.samples {
            for &sde_steps in &sweep.sde_steps {
                let cfg = SolveConfig { samples, depth, sde_steps, ..base.clone() };
                for (probe, truth) in probes.iter().zip(&truth) {
                    let r = solve_probe(entry, &cfg, probe)?;
                    let err = truth.map(|u| (r.value - u).abs().to_string()).unwrap_or_default();
                    let se = r.std_error.map(|s| s.to_string()).unwrap_or_default();
                    csv.push_str(&format!(
                        "{},{samples},{depth},{sde_steps},{},{},{},{se},{err},{},{:.3}\n",
                        cfg.method,
                        probe.t,
                        probe.x_repr(),
                        r.value,
                        r.work,
                        r.wall_time_ms
                    ));
                    record.results.push(to_value(&r));
                }
            }
        }
    }
    if let Some(out) = out {
        record.persist(out, &[("study.csv", &csv)])?;
    }
    Ok((record, csv))
}

/// Fewest time steps of an oracle grid whose `nt` is left open.
pub const ORACLE_MIN_STEPS: usize = 1000;

/// Grid of an oracle comparison. Without an explicit `nt` the oracle takes
/// the larger of the step-limit requirement and [`ORACLE_MIN_STEPS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleGridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: Option<usize>,
}

impl Default for OracleGridConfig {
    fn default() -> Self {
        Self { x_min: -4.0, x_max: 4.0, nx: 200, nt: None }
    }
}

/// Finite-difference table against Monte-Carlo estimates at probes in the
/// middle half of the domain (five at `t = 0` by default).
pub fn run_oracle_compare(
    entry: &CatalogEntry,
    grid: &OracleGridConfig,
    cfg: &SolveConfig,
    probes: Option<&[Probe]>,
    fd_tol: f64,
    out: Option<&Path>,
) -> Result<(RunRecord, CompareReport), AppError> {
    let p = &entry.problem;
    if p.dim() != 1 {
        return Err(AppError::Config(format!("oracle comparison needs d = 1, `{}` has d = {}", entry.id, p.dim())));
    }
    let (lo, hi) = (grid.x_min + 0.25 * (grid.x_max - grid.x_min), grid.x_max - 0.25 * (grid.x_max - grid.x_min));
    let probes: Vec<Probe> = match probes {
        Some(ps) => ps.to_vec(),
        None => interior_probes(grid.x_min, grid.x_max, 5).into_iter().map(|x| Probe::new(0.0, vec![x])).collect(),
    };
    if let Some(bad) = probes.iter().find(|q| q.x.len() != 1 || !(lo..=hi).contains(&q.x[0])) {
        return Err(AppError::Config(format!("probe {} lies outside the interior half [{lo}, {hi}]", bad.x_repr())));
    }
    let mut record = RunRecord::new("oracle-compare", entry, json!({ "grid": grid, "mc": cfg, "fd_tol": fd_tol }));
    admissibility_gate(entry, cfg, &mut record)?;
    let boundary = match &entry.reference_solution {
        Some(r) => Boundary::Reference(r.clone()),
        None => Boundary::ExtrapolateLinear,
    };
    let mut fd_grid = FdGrid::with_cfl(p, grid.x_min, grid.x_max, grid.nx, boundary)?;
    fd_grid.nt = grid.nt.unwrap_or(fd_grid.nt.max(ORACLE_MIN_STEPS));
    let sol = fd_solve(p, &fd_grid)?;
    let results = probes.iter().map(|q| solve_probe(entry, cfg, q)).collect::<Result<Vec<_>, _>>()?;
    let mc: Vec<(f64, f64, Estimate<f64>)> = results
        .iter()
        .map(|r| {
            (r.t, r.x[0], Estimate { value: r.value, std_error: r.std_error, samples: cfg.replications, work: r.work })
        })
        .collect();
    let report = fd_compare(&sol, &mc, fd_tol)?;
    record.results = results.iter().map(to_value).collect();
    record.report = Some(json!({
        "fd": { "nx": fd_grid.nx, "nt": fd_grid.nt, "boundary": sol.boundary, "cfl_ratio": sol.cfl_ratio },
        "compare": report,
    }));
    if let Some(out) = out {
        record.persist(out, &[("fd.csv", &sol.to_csv())])?;
    }
    Ok((record, report))
}

/// CSV `path_id,step,t,x1..xd` of Euler paths from `(t0, x0)` to `T`.
pub fn paths_dump(
    entry: &CatalogEntry,
    t0: f64,
    x0: &[f64],
    paths: usize,
    steps: usize,
    seed: u64,
) -> Result<String, AppError> {
    let p = &entry.problem;
    let plan = PathPlan::euler(t0, p.horizon, steps);
    let root = RngStream::new(seed);
    let header: Vec<String> = (1..=p.dim()).map(|i| format!("x{i}")).collect();
    let mut csv = format!("path_id,step,t,{}\n", header.join(","));
    for i in 0..paths {
        let path = simulate_path(x0, &plan, &p.coeffs, &root.child(i as u64)).map_err(AppError::numerical)?;
        for (k, (t, x)) in path.times.iter().zip(&path.states).enumerate() {
            let xs: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{i},{k},{t},{}\n", xs.join(",")));
        }
    }
    Ok(csv)
}

/// Runs `f` on a dedicated pool with `threads` workers, or on the global
/// pool when `None`.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, AppError> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| AppError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}
