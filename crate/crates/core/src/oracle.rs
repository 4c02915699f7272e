//! Explicit finite-difference solver for one-dimensional terminal-value
//! problems
//!
//! `u_t + a(t,x)/2 u_xx + mu(t,x) u_x + f(t, x, u) = 0`, `u(T, x) = g(x)`,
//!
//! with `a = sum_j sigma_1j^2`, marched backward from `T` to `0` on a uniform
//! grid. Central differences in space, forward Euler in time, `f` explicit.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{BatchBindings, EvalError, Expression, LANES};
use crate::sfpe::ProblemSpec;
use crate::stats::Estimate;

/// Largest admissible `max(a) dt / h^2`.
pub const CFL_LIMIT: f64 = 0.45;
/// Largest admissible `L dt`.
pub const LIPSCHITZ_STEP_LIMIT: f64 = 0.1;
/// Default additive tolerance of [`fd_compare`].
pub const DEFAULT_FD_TOL: f64 = 2e-2;

/// Time samples used to bound the diffusion before marching.
const CFL_SCAN_TIMES: usize = 17;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("finite-difference oracle needs d = 1, got d = {0}")]
    Dimension(usize),
    #[error("explicit scheme unstable: ratio {ratio:.4} (diffusion) / {lipschitz_step:.4} (L dt); need nt >= {required_nt}")]
    CflViolation { ratio: f64, lipschitz_step: f64, required_nt: usize },
    #[error("evaluating {what} at t = {t}: {source}")]
    Domain { what: &'static str, t: f64, source: EvalError },
    #[error("non-finite solution value at t = {t}")]
    NonFinite { t: f64 },
    #[error("probe (t = {t}, x = {x}) lies outside the grid")]
    ProbeOutOfRange { t: f64, x: f64 },
}

/// Values imposed on the two boundary nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Boundary {
    /// `g` at the boundary, frozen in time.
    DirichletG,
    /// Linear extrapolation from the two nearest interior nodes.
    ExtrapolateLinear,
    /// A known solution `u(t, x)` (an expression in `t` and `x1`).
    Reference(Expression),
}

impl Boundary {
    pub fn name(&self) -> &'static str {
        match self {
            Boundary::DirichletG => "dirichlet_g",
            Boundary::ExtrapolateLinear => "extrapolate_linear",
            Boundary::Reference(_) => "dirichlet_reference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGrid {
    pub x_min: f64,
    pub x_max: f64,
    /// Interior points.
    pub nx: usize,
    pub nt: usize,
    pub boundary: Boundary,
}

impl FdGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, nt: usize, boundary: Boundary) -> Result<Self, OracleError> {
        let grid = Self { x_min, x_max, nx, nt, boundary };
        grid.validate()?;
        Ok(grid)
    }

    /// The coarsest grid in time that satisfies both step limits for `p`.
    pub fn with_cfl(p: &ProblemSpec, x_min: f64, x_max: f64, nx: usize, boundary: Boundary) -> Result<Self, OracleError> {
        let mut grid = Self::new(x_min, x_max, nx, 1, boundary)?;
        grid.nt = required_steps(p, &grid)?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(OracleError::InvalidGrid("need finite x_min < x_max".into()));
        }
        if self.nx < 3 {
            return Err(OracleError::InvalidGrid("need at least 3 interior points".into()));
        }
        if self.nt < 1 {
            return Err(OracleError::InvalidGrid("need at least one time step".into()));
        }
        if let Boundary::Reference(e) = &self.boundary {
            if e.dim() != 1 || e.uses_v() {
                return Err(OracleError::InvalidGrid("reference must be an expression in t and x1".into()));
            }
        }
        Ok(())
    }

    /// Grid spacing.
    pub fn h(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx + 1) as f64
    }

    /// Node `i` for `i` in `0..=nx + 1`; nodes `0` and `nx + 1` are the boundary.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.nx + 1 {
            self.x_max
        } else {
            self.x_min + i as f64 * self.h()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdSolution {
    /// Interior nodes.
    pub x: Vec<f64>,
    /// `times[n] = T - n dt`, descending.
    pub times: Vec<f64>,
    /// `values[n][i]` approximates `u(times[n], x[i])`.
    pub values: Vec<Vec<f64>>,
    /// Boundary values `[left, right]` per time row.
    pub boundary_values: Vec<[f64; 2]>,
    pub x_min: f64,
    pub x_max: f64,
    pub scheme: String,
    pub boundary: String,
    /// Largest `a dt / h^2` met while marching.
    pub cfl_ratio: f64,
    pub lipschitz_step: f64,
}

impl FdSolution {
    /// Long-format CSV `t,x,u` including the boundary nodes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x,u\n");
        for (n, &t) in self.times.iter().enumerate() {
            let row = std::iter::once((self.x_min, self.boundary_values[n][0]))
                .chain(self.x.iter().copied().zip(self.values[n].iter().copied()))
                .chain(std::iter::once((self.x_max, self.boundary_values[n][1])));
            for (x, u) in row {
                out.push_str(&format!("{t},{x},{u}\n"));
            }
        }
        out
    }

    /// Bilinear interpolation of the space-time table.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64, OracleError> {
        let (horizon, nt) = (self.times[0], self.times.len() - 1);
        if !(0.0..=horizon).contains(&t) || !(self.x_min..=self.x_max).contains(&x) {
            return Err(OracleError::ProbeOutOfRange { t, x });
        }
        let nx = self.x.len();
        let h = (self.x_max - self.x_min) / (nx + 1) as f64;
        let dt = horizon / nt as f64;
        let sn = ((horizon - t) / dt).clamp(0.0, nt as f64);
        let n = (sn.floor() as usize).min(nt - 1);
        let wt = sn - n as f64;
        let sx = ((x - self.x_min) / h).clamp(0.0, (nx + 1) as f64);
        let i = (sx.floor() as usize).min(nx);
        let wx = sx - i as f64;
        let at = |n: usize, i: usize| match i {
            0 => self.boundary_values[n][0],
            i if i == nx + 1 => self.boundary_values[n][1],
            i => self.values[n][i - 1],
        };
        let row = |n: usize| (1.0 - wx) * at(n, i) + wx * at(n, i + 1);
        Ok((1.0 - wt) * row(n) + wt * row(n + 1))
    }
}

/// Time steps needed for `p` on `grid` under both step limits.
pub fn required_steps(p: &ProblemSpec, grid: &FdGrid) -> Result<usize, OracleError> {
    check_dimension(p)?;
    grid.validate()?;
    let h = grid.h();
    let xs: Vec<f64> = (0..=grid.nx + 1).map(|i| grid.node(i)).collect();
    let mut a_max = 0.0f64;
    for k in 0..CFL_SCAN_TIMES {
        let t = p.horizon * k as f64 / (CFL_SCAN_TIMES - 1) as f64;
        let mut a = vec![0.0; xs.len()];
        diffusion_on(p, t, &xs, &mut a)?;
        a_max = a.iter().copied().fold(a_max, f64::max);
    }
    let by_cfl = (a_max * p.horizon / (CFL_LIMIT * h * h)).ceil();
    let by_lipschitz = (p.lipschitz_l * p.horizon / LIPSCHITZ_STEP_LIMIT).ceil();
    Ok(by_cfl.max(by_lipschitz).max(1.0) as usize)
}

fn check_dimension(p: &ProblemSpec) -> Result<(), OracleError> {
    if p.dim() != 1 {
        return Err(OracleError::Dimension(p.dim()));
    }
    Ok(())
}

/// Evaluates `e` at time `t` over `xs` with optional `v`, `LANES` at a time.
fn eval_on(
    e: &Expression,
    what: &'static str,
    t: f64,
    xs: &[f64],
    v: Option<&[f64]>,
    out: &mut [f64],
) -> Result<(), OracleError> {
    let ts = [t; LANES];
    for start in (0..xs.len()).step_by(LANES) {
        let end = (start + LANES).min(xs.len());
        let b = BatchBindings { t: &ts[..end - start], x: &xs[start..end], v: v.map(|v| &v[start..end]) };
        e.eval_batch(&b, &mut out[start..end]).map_err(|source| OracleError::Domain { what, t, source })?;
    }
    Ok(())
}

/// `a = sum_j sigma_1j^2` over `xs`.
fn diffusion_on(p: &ProblemSpec, t: f64, xs: &[f64], a: &mut [f64]) -> Result<(), OracleError> {
    let mut col = vec![0.0; xs.len()];
    a.fill(0.0);
    for s in &p.coeffs.sigma {
        eval_on(s, "sigma", t, xs, None, &mut col)?;
        for (ai, &c) in a.iter_mut().zip(&col) {
            *ai += c * c;
        }
    }
    Ok(())
}

/// Marches the terminal-value problem from `T` to `0`.
pub fn fd_solve(p: &ProblemSpec, grid: &FdGrid) -> Result<FdSolution, OracleError> {
    check_dimension(p)?;
    grid.validate()?;
    let (nx, nt) = (grid.nx, grid.nt);
    let h = grid.h();
    let dt = p.horizon / nt as f64;
    let lipschitz_step = p.lipschitz_l * dt;
    let required = required_steps(p, grid)?;
    let violation = |ratio: f64| OracleError::CflViolation { ratio, lipschitz_step, required_nt: required.max(nt + 1) };
    if lipschitz_step > LIPSCHITZ_STEP_LIMIT {
        return Err(violation(f64::NAN));
    }
    let interior: Vec<f64> = (1..=nx).map(|i| grid.node(i)).collect();
    let ends = [grid.x_min, grid.x_max];
    let times: Vec<f64> = (0..=nt).map(|n| p.horizon - n as f64 * dt).collect();

    let mut u = vec![0.0; nx];
    eval_on(&p.g, "g", p.horizon, &interior, None, &mut u)?;
    let mut g_ends = [0.0; 2];
    eval_on(&p.g, "g", p.horizon, &ends, None, &mut g_ends)?;
    let boundary_at = |t: f64, u: &[f64]| -> Result<[f64; 2], OracleError> {
        match &grid.boundary {
            Boundary::DirichletG => Ok(g_ends),
            Boundary::ExtrapolateLinear => Ok([2.0 * u[0] - u[1], 2.0 * u[nx - 1] - u[nx - 2]]),
            Boundary::Reference(e) => {
                let mut out = [0.0; 2];
                eval_on(e, "reference", t, &ends, None, &mut out)?;
                Ok(out)
            }
        }
    };
    let first_bc = match grid.boundary {
        Boundary::ExtrapolateLinear => g_ends,
        _ => boundary_at(p.horizon, &u)?,
    };

    let mut values = Vec::with_capacity(nt + 1);
    let mut boundary_values = Vec::with_capacity(nt + 1);
    values.push(u.clone());
    boundary_values.push(first_bc);
    let (mut a, mut mu, mut f) = (vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]);
    let mut next = vec![0.0; nx];
    let mut bc = first_bc;
    let mut cfl_ratio = 0.0f64;
    for n in 0..nt {
        let t = times[n];
        diffusion_on(p, t, &interior, &mut a)?;
        eval_on(&p.coeffs.mu[0], "mu", t, &interior, None, &mut mu)?;
        eval_on(&p.f, "f", t, &interior, Some(&u), &mut f)?;
        let ratio = a.iter().copied().fold(0.0, f64::max) * dt / (h * h);
        if ratio > CFL_LIMIT {
            return Err(violation(ratio));
        }
        cfl_ratio = cfl_ratio.max(ratio);
        for i in 0..nx {
            let left = if i == 0 { bc[0] } else { u[i - 1] };
            let right = if i + 1 == nx { bc[1] } else { u[i + 1] };
            let uxx = (right - 2.0 * u[i] + left) / (h * h);
            let ux = (right - left) / (2.0 * h);
            next[i] = u[i] + dt * (0.5 * a[i] * uxx + mu[i] * ux + f[i]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::NonFinite { t: times[n + 1] });
        }
        std::mem::swap(&mut u, &mut next);
        bc = boundary_at(times[n + 1], &u)?;
        values.push(u.clone());
        boundary_values.push(bc);
    }
    Ok(FdSolution {
        x: interior,
        times,
        values,
        boundary_values,
        x_min: grid.x_min,
        x_max: grid.x_max,
        scheme: "explicit_central".into(),
        boundary: grid.boundary.name().into(),
        cfl_ratio,
        lipschitz_step,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub t: f64,
    pub x: f64,
    pub fd: f64,
    pub mc: f64,
    pub std_error: f64,
    pub abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
    pub fd_tol: f64,
    pub pass: bool,
}

/// Compares Monte-Carlo estimates with the interpolated table; a probe
/// passes when `|FD - MC| <= 3 SE + fd_tol`.
pub fn fd_compare(sol: &FdSolution, mc: &[(f64, f64, Estimate<f64>)], fd_tol: f64) -> Result<CompareReport, OracleError> {
    let rows = mc
        .iter()
        .map(|(t, x, est)| {
            let fd = sol.interpolate(*t, *x)?;
            let se = est.se_or_zero();
            let abs_diff = (fd - est.value).abs();
            Ok(CompareRow { t: *t, x: *x, fd, mc: est.value, std_error: se, abs_diff, pass: abs_diff <= 3.0 * se + fd_tol })
        })
        .collect::<Result<Vec<_>, OracleError>>()?;
    let pass = rows.iter().all(|r| r.pass);
    Ok(CompareReport { rows, fd_tol, pass })
}

/// `count` probe points evenly spread over the middle half of `[x_min, x_max]`.
pub fn interior_probes(x_min: f64, x_max: f64, count: usize) -> Vec<f64> {
    let (lo, hi) = (x_min + 0.25 * (x_max - x_min), x_max - 0.25 * (x_max - x_min));
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..count).map(|k| lo + (hi - lo) * k as f64 / (count - 1) as f64).collect(),
    }
}
