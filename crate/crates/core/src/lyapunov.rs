//! Lyapunov functions and the admissibility inequalities built on them.
//!
//! Three families are supported: `V_q(x) = (1 + |x|^2)^(q/2)`, the
//! time-shifted backward heat kernel
//! `V(t, x) = (2 pi (alpha t + eps))^(-d/2) exp(|x|^2 / (2 (alpha t + eps)))`,
//! and arbitrary user expressions in `(t, x)`. The generator
//! `dV/dt + 1/2 tr(sigma sigma^* Hess V) + <mu, grad V>` uses closed-form
//! partials for the first two families and central differences with step
//! `1e-4 (1 + |x|)` for expressions.

use serde::Serialize;
use thiserror::Error;

use crate::expr::{Bindings, EvalError, Expression};
use crate::rng::RngStream;
use crate::scalar::{dot, norm_sq, Real};
use crate::sde::{simulate_path, PathPlan, SdeCoefficients, SdeError};
use crate::stats::mean_and_se;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LyapunovError {
    #[error("invalid Lyapunov parameters: {0}")]
    InvalidParams(String),
    #[error("Lyapunov value overflows at |x| = {norm}")]
    Overflow { norm: f64 },
    #[error("Lyapunov value {value} is not positive")]
    NotPositive { value: f64 },
    #[error("evaluating {what}: {source}")]
    Eval { what: String, source: EvalError },
    #[error("{0}")]
    Sde(String),
    #[error("invalid check input: {0}")]
    InvalidInput(String),
}

impl From<SdeError> for LyapunovError {
    fn from(e: SdeError) -> Self {
        LyapunovError::Sde(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LyapunovFamily {
    Polynomial { q: f64 },
    HeatKernel { alpha: f64, epsilon: f64 },
    UserExpression { expr: Expression },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovSpec {
    #[serde(flatten)]
    pub family: LyapunovFamily,
    /// Declared supersolution rate: the generator should stay below `rho V`.
    pub rho: f64,
}

/// Value and partial derivatives of `V` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives<F> {
    pub value: F,
    pub dt: F,
    pub grad: Vec<F>,
    /// Row-major `d x d`.
    pub hess: Vec<F>,
}

impl LyapunovSpec {
    pub fn polynomial(q: f64, rho: f64) -> Self {
        Self { family: LyapunovFamily::Polynomial { q }, rho }
    }

    pub fn heat_kernel(alpha: f64, epsilon: f64, rho: f64) -> Self {
        Self { family: LyapunovFamily::HeatKernel { alpha, epsilon }, rho }
    }

    pub fn expression(expr: Expression, rho: f64) -> Self {
        Self { family: LyapunovFamily::UserExpression { expr }, rho }
    }

    pub fn validate(&self) -> Result<(), LyapunovError> {
        let bad = |m: &str| Err(LyapunovError::InvalidParams(m.into()));
        if !(self.rho >= 0.0) {
            return bad("rho must be non-negative");
        }
        match &self.family {
            LyapunovFamily::Polynomial { q } if !(*q > 0.0) => bad("polynomial family needs q > 0"),
            LyapunovFamily::HeatKernel { epsilon, .. } if !(*epsilon > 0.0) => bad("heat kernel needs epsilon > 0"),
            LyapunovFamily::HeatKernel { alpha, .. } if !(*alpha >= 0.0) => bad("heat kernel needs alpha >= 0"),
            LyapunovFamily::UserExpression { expr } if expr.uses_v() => bad("V may not depend on v"),
            _ => Ok(()),
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self.family {
            LyapunovFamily::Polynomial { .. } => "polynomial",
            LyapunovFamily::HeatKernel { .. } => "heat_kernel",
            LyapunovFamily::UserExpression { .. } => "user_expression",
        }
    }

    pub fn params(&self) -> serde_json::Value {
        match &self.family {
            LyapunovFamily::Polynomial { q } => serde_json::json!({ "q": q, "rho": self.rho }),
            LyapunovFamily::HeatKernel { alpha, epsilon } => {
                serde_json::json!({ "alpha": alpha, "epsilon": epsilon, "rho": self.rho })
            }
            LyapunovFamily::UserExpression { expr } => serde_json::json!({ "expr": expr.source(), "rho": self.rho }),
        }
    }

    /// `V(t, x)`; errors instead of returning an infinite value.
    pub fn value<F: Real>(&self, t: F, x: &[F]) -> Result<F, LyapunovError> {
        let norm = || norm_sq(x).sqrt().as_f64();
        let v = match &self.family {
            LyapunovFamily::Polynomial { q } => {
                let log_v = F::lit(*q / 2.0) * (F::one() + norm_sq(x)).ln();
                if log_v > F::max_value().ln() {
                    return Err(LyapunovError::Overflow { norm: norm() });
                }
                (F::one() + norm_sq(x)).powf(F::lit(*q / 2.0))
            }
            LyapunovFamily::HeatKernel { alpha, epsilon } => {
                let s = F::lit(*alpha) * t + F::lit(*epsilon);
                let two = F::lit(2.0);
                let log_v = -F::from_count(x.len()) / two * (two * F::PI() * s).ln() + norm_sq(x) / (two * s);
                if log_v > F::max_value().ln() {
                    return Err(LyapunovError::Overflow { norm: norm() });
                }
                (two * F::PI() * s).powf(-F::from_count(x.len()) / two) * (norm_sq(x) / (two * s)).exp()
            }
            LyapunovFamily::UserExpression { expr } => match expr.eval(&Bindings::new(t, x)) {
                Ok(v) => v,
                Err(EvalError::NonFinite { .. }) => return Err(LyapunovError::Overflow { norm: norm() }),
                Err(source) => return Err(LyapunovError::Eval { what: "V".into(), source }),
            },
        };
        if !v.is_finite() {
            return Err(LyapunovError::Overflow { norm: norm() });
        }
        if !(v > F::zero()) {
            return Err(LyapunovError::NotPositive { value: v.as_f64() });
        }
        Ok(v)
    }

    /// Closed-form partials for the built-in families, central differences
    /// for user expressions.
    pub fn derivatives<F: Real>(&self, t: F, x: &[F]) -> Result<Derivatives<F>, LyapunovError> {
        let d = x.len();
        let value = self.value(t, x)?;
        match &self.family {
            LyapunovFamily::Polynomial { q } => {
                let (g1, g2) = polynomial_factors(F::lit(*q), norm_sq(x));
                let grad = x.iter().map(|&xi| g1 * xi).collect();
                let hess = (0..d * d)
                    .map(|k| {
                        let (i, j) = (k / d, k % d);
                        g2 * x[i] * x[j] + if i == j { g1 } else { F::zero() }
                    })
                    .collect();
                Ok(Derivatives { value, dt: F::zero(), grad, hess })
            }
            LyapunovFamily::HeatKernel { alpha, epsilon } => {
                let alpha = F::lit(*alpha);
                let s = alpha * t + F::lit(*epsilon);
                let two = F::lit(2.0);
                let r2 = norm_sq(x);
                let dt = alpha * (-F::from_count(d) / (two * s) - r2 / (two * s * s)) * value;
                let grad = x.iter().map(|&xi| xi / s * value).collect();
                let hess = (0..d * d)
                    .map(|k| {
                        let (i, j) = (k / d, k % d);
                        (x[i] * x[j] / (s * s) + if i == j { F::one() / s } else { F::zero() }) * value
                    })
                    .collect();
                Ok(Derivatives { value, dt, grad, hess })
            }
            LyapunovFamily::UserExpression { .. } => self.derivatives_fd(t, x),
        }
    }

    /// Central-difference partials of `V`, step `1e-4 (1 + |x|)`.
    pub fn derivatives_fd<F: Real>(&self, t: F, x: &[F]) -> Result<Derivatives<F>, LyapunovError> {
        let d = x.len();
        let h = F::lit(1e-4) * (F::one() + norm_sq(x).sqrt());
        let two = F::lit(2.0);
        let value = self.value(t, x)?;
        let dt = (self.value(t + h, x)? - self.value(t - h, x)?) / (two * h);
        let mut y = x.to_vec();
        let mut at = |shifts: &[(usize, F)]| -> Result<F, LyapunovError> {
            y.copy_from_slice(x);
            for &(i, s) in shifts {
                y[i] = y[i] + s;
            }
            self.value(t, &y)
        };
        let mut grad = vec![F::zero(); d];
        let mut hess = vec![F::zero(); d * d];
        for i in 0..d {
            let up = at(&[(i, h)])?;
            let down = at(&[(i, -h)])?;
            grad[i] = (up - down) / (two * h);
            hess[i * d + i] = (up - two * value + down) / (h * h);
            for j in 0..i {
                let pp = at(&[(i, h), (j, h)])?;
                let pm = at(&[(i, h), (j, -h)])?;
                let mp = at(&[(i, -h), (j, h)])?;
                let mm = at(&[(i, -h), (j, -h)])?;
                let hij = (pp - pm - mp + mm) / (F::lit(4.0) * h * h);
                hess[i * d + j] = hij;
                hess[j * d + i] = hij;
            }
        }
        Ok(Derivatives { value, dt, grad, hess })
    }
}

/// `q P^(q/2-1)` and `q (q-2) P^(q/2-2)` with `P = 1 + |x|^2`.
fn polynomial_factors<F: Real>(q: F, r2: F) -> (F, F) {
    let two = F::lit(2.0);
    let p = F::one() + r2;
    (q * p.powf(q / two - F::one()), q * (q - two) * p.powf(q / two - two))
}

/// `sigma sigma^*` at `(t, x)`, row-major `d x d`.
fn diffusion_matrix<F: Real>(c: &SdeCoefficients, t: F, x: &[F]) -> Result<Vec<F>, LyapunovError> {
    let (d, m) = (c.d, c.m);
    let mut sigma = vec![F::zero(); d * m];
    c.diffusion(t, x, &mut sigma)?;
    Ok((0..d * d)
        .map(|k| {
            let (i, j) = (k / d, k % d);
            dot(&sigma[i * m..(i + 1) * m], &sigma[j * m..(j + 1) * m])
        })
        .collect())
}

/// `dV/dt + 1/2 tr(A Hess V) + <mu, grad V>` from explicit partials.
pub fn generator_from_derivatives<F: Real>(der: &Derivatives<F>, a: &[F], mu: &[F]) -> F {
    let half_trace = a.iter().zip(&der.hess).fold(F::zero(), |acc, (&aij, &hij)| acc + aij * hij) / F::lit(2.0);
    der.dt + half_trace + dot(mu, &der.grad)
}

/// Parabolic generator of the SDE applied to `V` at `(t, x)`.
pub fn generator_apply<F: Real>(spec: &LyapunovSpec, c: &SdeCoefficients, t: F, x: &[F]) -> Result<F, LyapunovError> {
    if x.len() != c.d {
        return Err(LyapunovError::InvalidInput(format!("state has {} entries, expected {}", x.len(), c.d)));
    }
    let d = c.d;
    let mut mu = vec![F::zero(); d];
    c.drift(t, x, &mut mu)?;
    let a = diffusion_matrix(c, t, x)?;
    let two = F::lit(2.0);
    // <x, A x> and tr(A), the only pieces of the Hessian term that the
    // radial families need.
    let quad = || {
        x.iter()
            .enumerate()
            .fold(F::zero(), |acc, (i, &xi)| acc + xi * dot(&a[i * d..(i + 1) * d], x))
    };
    let trace = || (0..d).fold(F::zero(), |acc, i| acc + a[i * d + i]);
    match &spec.family {
        LyapunovFamily::Polynomial { q } => {
            spec.value(t, x)?;
            let (g1, g2) = polynomial_factors(F::lit(*q), norm_sq(x));
            Ok(g1 * dot(&mu, x) + (g1 * trace() + g2 * quad()) / two)
        }
        LyapunovFamily::HeatKernel { alpha, epsilon } => {
            let value = spec.value(t, x)?;
            let alpha = F::lit(*alpha);
            let s = alpha * t + F::lit(*epsilon);
            let r2 = norm_sq(x);
            // Differences first, so that A = alpha I cancels exactly.
            let trace_gap = trace() - alpha * F::from_count(d);
            let quad_gap = quad() - alpha * r2;
            Ok(((trace_gap / s + quad_gap / (s * s)) / two + dot(&mu, x) / s) * value)
        }
        LyapunovFamily::UserExpression { .. } => {
            let der = spec.derivatives_fd(t, x)?;
            Ok(generator_from_derivatives(&der, &a, &mu))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorReport {
    pub family: &'static str,
    pub params: serde_json::Value,
    pub points_checked: usize,
    /// `max (generator - rho V)` over the grid.
    pub max_violation: f64,
    pub argmax: (f64, Vec<f64>),
    /// Smallest rate that would make the grid pass: `max generator / V`.
    pub fitted_rho: f64,
    pub pass: bool,
}

/// Checks `generator(V) <= rho V + tol` at every grid point.
pub fn check_supersolution<F: Real>(
    spec: &LyapunovSpec,
    c: &SdeCoefficients,
    grid: &[(F, Vec<F>)],
    tol: f64,
) -> Result<GeneratorReport, LyapunovError> {
    spec.validate()?;
    if grid.is_empty() {
        return Err(LyapunovError::InvalidInput("empty grid".into()));
    }
    let rho = F::lit(spec.rho);
    let mut worst = (F::neg_infinity(), 0usize);
    let mut fitted = F::zero();
    for (k, (t, x)) in grid.iter().enumerate() {
        let gen = generator_apply(spec, c, *t, x)?;
        let v = spec.value(*t, x)?;
        let violation = gen - rho * v;
        if violation > worst.0 {
            worst = (violation, k);
        }
        fitted = fitted.max(gen / v);
    }
    let (t, x) = &grid[worst.1];
    Ok(GeneratorReport {
        family: spec.family_name(),
        params: spec.params(),
        points_checked: grid.len(),
        max_violation: worst.0.as_f64(),
        argmax: (t.as_f64(), x.iter().map(|v| v.as_f64()).collect()),
        fitted_rho: fitted.as_f64(),
        pass: worst.0.as_f64() <= tol,
    })
}

/// Smallest non-negative `rho` with `generator <= rho V` on the grid.
pub fn fit_rho<F: Real>(spec: &LyapunovSpec, c: &SdeCoefficients, grid: &[(F, Vec<F>)]) -> Result<F, LyapunovError> {
    let mut rho = F::zero();
    for (t, x) in grid {
        rho = rho.max(generator_apply(spec, c, *t, x)? / spec.value(*t, x)?);
    }
    Ok(rho)
}

/// Uniformly random direction in `R^d` (normalized Gaussian).
pub fn random_direction<F: Real>(d: usize, rng: &RngStream) -> Vec<F> {
    let mut z = vec![0.0; d];
    rng.fill_normals(0, &mut z);
    let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    z.into_iter().map(|v| F::lit(v / n)).collect()
}

/// `count` points `(t, x)`: `t` uniform on `[0, horizon]`, `x` uniform in
/// the ball of radius `radius`, preceded by the origin at `t = 0`.
pub fn ball_points<F: Real>(d: usize, radius: f64, horizon: f64, count: usize, rng: &RngStream) -> Vec<(F, Vec<F>)> {
    let mut pts = vec![(F::zero(), vec![F::zero(); d])];
    for k in 0..count {
        let s = rng.child(k as u64);
        let dir: Vec<F> = random_direction(d, &s.child(0));
        let r = radius * s.uniform(0).powf(1.0 / d as f64);
        let t = horizon * s.uniform(1);
        pts.push((F::lit(t), dir.into_iter().map(|v| v * F::lit(r)).collect()));
    }
    pts
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub radii: Vec<f64>,
    /// Shell-wise sup of `|f(t,x,0)| / V(t,x) + |g(x)| / V(T,x)`.
    pub shell_sups: Vec<f64>,
    pub f_sups: Vec<f64>,
    pub g_sups: Vec<f64>,
    pub pass: bool,
}

/// Samples the growth ratio of `f(., ., 0)` and `g` against `V` on spheres
/// `|x| = r`. Passes when the shell sups are non-increasing from the second
/// shell on and the last one is at most `tol`.
#[allow(clippy::too_many_arguments)]
pub fn check_growth_ratio<F: Real>(
    f: &Expression,
    g: &Expression,
    spec: &LyapunovSpec,
    horizon: f64,
    radii: &[f64],
    samples_per_shell: usize,
    tol: f64,
    rng: &RngStream,
) -> Result<GrowthReport, LyapunovError> {
    spec.validate()?;
    if radii.is_empty() || radii.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(LyapunovError::InvalidInput("radii must be strictly increasing".into()));
    }
    if samples_per_shell < 8 {
        return Err(LyapunovError::InvalidInput("need at least 8 samples per shell".into()));
    }
    let d = g.dim();
    let horizon_f = F::lit(horizon);
    // Overflowing V dominates any finite numerator.
    let ratio = |num: Result<F, EvalError>, v: Result<F, LyapunovError>, what: &str| -> Result<F, LyapunovError> {
        let num = match num {
            Ok(n) => n.abs(),
            Err(EvalError::NonFinite { .. }) => return Ok(F::infinity()),
            Err(source) => return Err(LyapunovError::Eval { what: what.into(), source }),
        };
        match v {
            Ok(v) => Ok(num / v),
            Err(LyapunovError::Overflow { .. }) => Ok(F::zero()),
            Err(e) => Err(e),
        }
    };
    let (mut shell_sups, mut f_sups, mut g_sups) = (vec![], vec![], vec![]);
    for (ri, &r) in radii.iter().enumerate() {
        let (mut fs, mut gs, mut both) = (F::zero(), F::zero(), F::zero());
        for k in 0..samples_per_shell {
            let s = rng.child(ri as u64).child(k as u64);
            let x: Vec<F> = random_direction::<F>(d, &s).into_iter().map(|v| v * F::lit(r)).collect();
            let t = F::lit(horizon * s.uniform(0));
            let fr = ratio(f.eval(&Bindings::with_v(t, &x, F::zero())), spec.value(t, &x), "f(t,x,0)")?;
            let gr = ratio(g.eval(&Bindings::new(horizon_f, &x)), spec.value(horizon_f, &x), "g")?;
            fs = fs.max(fr);
            gs = gs.max(gr);
            both = both.max(fr + gr);
        }
        shell_sups.push(both.as_f64());
        f_sups.push(fs.as_f64());
        g_sups.push(gs.as_f64());
    }
    let monotone = shell_sups.windows(2).skip(1).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    let last = *shell_sups.last().expect("non-empty");
    Ok(GrowthReport {
        radii: radii.to_vec(),
        pass: monotone && last <= tol,
        shell_sups,
        f_sups,
        g_sups,
    })
}

/// `c < 1 / (2 a T)`, strictly.
pub fn admissible_heat_type(a: f64, c: f64, horizon: f64) -> bool {
    c < 1.0 / (2.0 * a * horizon)
}

/// Supremum of admissible horizons `1 / (2 a c)` (excluded itself).
pub fn max_admissible_horizon(a: f64, c: f64) -> f64 {
    1.0 / (2.0 * a * c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub samples: usize,
    pub max_quotient: f64,
    /// `(t, x, v, w)` attaining the maximum.
    pub witness: (f64, Vec<f64>, f64, f64),
    pub declared_l: f64,
    pub pass: bool,
}

/// Difference quotients `|f(t,x,v) - f(t,x,w)| / |v - w|` against `L`.
pub fn lipschitz_probe<F: Real>(
    f: &Expression,
    l: f64,
    samples: &[(F, Vec<F>, F, F)],
    tol: f64,
) -> Result<LipschitzReport, LyapunovError> {
    if samples.is_empty() {
        return Err(LyapunovError::InvalidInput("no samples".into()));
    }
    let eval = |t: F, x: &[F], v: F| {
        f.eval(&Bindings::with_v(t, x, v)).map_err(|source| LyapunovError::Eval { what: "f".into(), source })
    };
    let mut worst = (F::neg_infinity(), 0usize);
    for (k, (t, x, v, w)) in samples.iter().enumerate() {
        if v == w {
            return Err(LyapunovError::InvalidInput("v and w must differ".into()));
        }
        let qt = (eval(*t, x, *v)? - eval(*t, x, *w)?).abs() / (*v - *w).abs();
        if qt > worst.0 {
            worst = (qt, k);
        }
    }
    let (t, x, v, w) = &samples[worst.1];
    Ok(LipschitzReport {
        samples: samples.len(),
        max_quotient: worst.0.as_f64(),
        witness: (t.as_f64(), x.iter().map(|a| a.as_f64()).collect(), v.as_f64(), w.as_f64()),
        declared_l: l,
        pass: worst.0.as_f64() <= l + tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupermartingaleRow {
    pub t: f64,
    pub mean: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupermartingaleReport {
    pub rho: f64,
    pub initial_value: f64,
    pub rows: Vec<SupermartingaleRow>,
    pub pass: bool,
}

/// Monte-Carlo check of `E[exp(-rho s) V(s, X_s)] <= V(0, x0)` at
/// `s = min(t, tau)`, `tau` being the first grid time with `V >= level`
/// when a level is given. `check_times` must lie on the Euler grid of
/// `[0, max(check_times)]` with `steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn supermartingale_check<F: Real>(
    spec: &LyapunovSpec,
    c: &SdeCoefficients,
    x0: &[F],
    check_times: &[F],
    steps: usize,
    paths: usize,
    rho: F,
    level: Option<f64>,
    rng: &RngStream,
) -> Result<SupermartingaleReport, LyapunovError> {
    let t_end = check_times.iter().copied().fold(F::zero(), F::max);
    let mut plan = PathPlan::euler(F::zero(), t_end, steps);
    if let Some(level) = level {
        plan = plan.with_stop(spec.clone(), level);
    }
    let dt = plan.dt();
    let indices: Vec<usize> = check_times
        .iter()
        .map(|&t| (t / dt).round().to_usize().unwrap_or(0).min(steps))
        .collect();
    let mut samples = vec![Vec::with_capacity(paths); check_times.len()];
    for p in 0..paths {
        let path = simulate_path(x0, &plan, c, &rng.child(p as u64))?;
        for (j, &k) in indices.iter().enumerate() {
            let s = path.times[k].min(path.stop_time);
            let v = spec.value(s, &path.states[k])?;
            samples[j].push((-rho * s).exp() * v);
        }
    }
    let v0 = spec.value(F::zero(), x0)?;
    let rows: Vec<SupermartingaleRow> = check_times
        .iter()
        .zip(&samples)
        .map(|(t, vals)| {
            let (mean, se) = mean_and_se(vals);
            let se = se.unwrap_or(F::zero());
            SupermartingaleRow {
                t: t.as_f64(),
                mean: mean.as_f64(),
                std_error: se.as_f64(),
                pass: mean <= v0 + F::lit(3.0) * se,
            }
        })
        .collect();
    Ok(SupermartingaleReport {
        rho: rho.as_f64(),
        initial_value: v0.as_f64(),
        pass: rows.iter().all(|r| r.pass),
        rows,
    })
}
