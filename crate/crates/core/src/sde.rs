//! Simulation of `dX = mu(t, X) dt + sigma(t, X) dW`.
//!
//! Paths are produced either by Euler–Maruyama on a uniform grid or, when
//! the drift and diffusion are constant, by exact Gaussian increments. The
//! Brownian increments of a path are draws `step * m + component` of the
//! path's [`RngStream`], so two simulations given the same stream share
//! their noise exactly.

use serde::Serialize;
use smallvec::{smallvec, SmallVec};
use thiserror::Error;

use crate::expr::{Bindings, EvalError, ExprError, Expression};
use crate::lyapunov::{LyapunovError, LyapunovSpec};
use crate::rng::RngStream;
use crate::scalar::{dot, norm_sq, Real};
use crate::stats::mean_and_se;

pub(crate) type State<F> = SmallVec<[F; 8]>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SdeError {
    #[error("invalid SDE coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("invalid path plan: {0}")]
    InvalidPlan(String),
    #[error("failed to parse {what}: {source}")]
    Parse { what: String, source: ExprError },
    #[error("evaluating {what}: {source}")]
    Eval { what: String, source: EvalError },
    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

/// Drift vector and diffusion matrix of the SDE.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SdeCoefficients {
    pub d: usize,
    pub m: usize,
    pub mu: Vec<Expression>,
    /// Row-major `d x m`.
    pub sigma: Vec<Expression>,
    pub lipschitz_l: f64,
}

impl SdeCoefficients {
    pub fn new(
        d: usize,
        m: usize,
        mu: Vec<Expression>,
        sigma: Vec<Expression>,
        lipschitz_l: f64,
    ) -> Result<Self, SdeError> {
        if d == 0 || m == 0 {
            return Err(SdeError::InvalidCoefficients("d and m must be at least 1".into()));
        }
        if mu.len() != d {
            return Err(SdeError::InvalidCoefficients(format!("mu has {} entries, expected {d}", mu.len())));
        }
        if sigma.len() != d * m {
            return Err(SdeError::InvalidCoefficients(format!(
                "sigma has {} entries, expected {d}x{m}",
                sigma.len()
            )));
        }
        if let Some(e) = mu.iter().chain(&sigma).find(|e| e.uses_v() || e.dim() != d) {
            return Err(SdeError::InvalidCoefficients(format!(
                "coefficient `{e}` must be an expression in (t, x1..x{d})"
            )));
        }
        if !(lipschitz_l >= 0.0) {
            return Err(SdeError::InvalidCoefficients("Lipschitz constant must be non-negative".into()));
        }
        Ok(Self { d, m, mu, sigma, lipschitz_l })
    }

    /// Parses drift strings and a row-major list of diffusion rows.
    pub fn parse<S: AsRef<str>>(d: usize, m: usize, mu: &[S], sigma: &[Vec<S>], lipschitz_l: f64) -> Result<Self, SdeError> {
        let parse = |s: &S, what: String| {
            Expression::parse(s.as_ref(), d, false).map_err(|source| SdeError::Parse { what, source })
        };
        let mu = mu.iter().enumerate().map(|(i, s)| parse(s, format!("mu[{i}]"))).collect::<Result<Vec<_>, _>>()?;
        if sigma.len() != d || sigma.iter().any(|row| row.len() != m) {
            return Err(SdeError::InvalidCoefficients(format!("sigma must have {d} rows of {m} entries")));
        }
        let sigma = sigma
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, s)| (i, j, s)))
            .map(|(i, j, s)| parse(s, format!("sigma[{i}][{j}]")))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(d, m, mu, sigma, lipschitz_l)
    }

    /// `mu = 0`, `sigma = scale * I_d`.
    pub fn scaled_brownian(d: usize, scale: f64, lipschitz_l: f64) -> Self {
        let mu = (0..d).map(|_| Expression::constant(0.0, d)).collect();
        let sigma = (0..d * d)
            .map(|k| Expression::constant(if k / d == k % d { scale } else { 0.0 }, d))
            .collect();
        Self::new(d, d, mu, sigma, lipschitz_l).expect("valid by construction")
    }

    /// Coefficient-expression evaluations per Euler step.
    pub fn evals_per_step(&self) -> u64 {
        (self.d + self.d * self.m) as u64
    }

    pub fn drift<F: Real>(&self, t: F, x: &[F], out: &mut [F]) -> Result<(), SdeError> {
        let b = Bindings::new(t, x);
        for (i, (e, o)) in self.mu.iter().zip(out.iter_mut()).enumerate() {
            *o = e.eval(&b).map_err(|source| SdeError::Eval { what: format!("mu[{i}]"), source })?;
        }
        Ok(())
    }

    pub fn diffusion<F: Real>(&self, t: F, x: &[F], out: &mut [F]) -> Result<(), SdeError> {
        let b = Bindings::new(t, x);
        for (k, (e, o)) in self.sigma.iter().zip(out.iter_mut()).enumerate() {
            *o = e.eval(&b).map_err(|source| SdeError::Eval {
                what: format!("sigma[{}][{}]", k / self.m, k % self.m),
                source,
            })?;
        }
        Ok(())
    }

    /// Row-major diffusion matrix when every entry is a constant.
    pub fn constant_diffusion(&self) -> Option<Vec<f64>> {
        self.sigma.iter().map(Expression::constant_value).collect()
    }

    pub fn constant_drift(&self) -> Option<Vec<f64>> {
        self.mu.iter().map(Expression::constant_value).collect()
    }
}

/// One Euler–Maruyama step: `state + mu(t, state) dt + sigma(t, state) dW`.
pub fn em_step<F: Real>(state: &[F], t: F, dt: F, dw: &[F], c: &SdeCoefficients) -> Result<Vec<F>, SdeError> {
    if !(dt > F::zero()) {
        return Err(SdeError::InvalidPlan("dt must be positive".into()));
    }
    let mut out = vec![F::zero(); c.d];
    let mut scratch = EmScratch::new(c);
    em_step_into(state, t, dt, dw, c, &mut scratch, &mut out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SdeError::NonFinite { step: 0 });
    }
    Ok(out)
}

pub(crate) struct EmScratch<F> {
    drift: State<F>,
    diffusion: SmallVec<[F; 16]>,
}

impl<F: Real> EmScratch<F> {
    pub(crate) fn new(c: &SdeCoefficients) -> Self {
        Self { drift: smallvec![F::zero(); c.d], diffusion: smallvec![F::zero(); c.d * c.m] }
    }
}

#[inline]
pub(crate) fn em_step_into<F: Real>(
    state: &[F],
    t: F,
    dt: F,
    dw: &[F],
    c: &SdeCoefficients,
    scratch: &mut EmScratch<F>,
    out: &mut [F],
) -> Result<(), SdeError> {
    c.drift(t, state, &mut scratch.drift)?;
    c.diffusion(t, state, &mut scratch.diffusion)?;
    for i in 0..c.d {
        let row = &scratch.diffusion[i * c.m..(i + 1) * c.m];
        out[i] = state[i] + scratch.drift[i] * dt + dot(row, dw);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    EulerMaruyama,
    ExactConstantDiffusion,
}

/// Localization: freeze the path once `V(t, X) >= level`.
#[derive(Debug, Clone, PartialEq)]
pub struct StopRule {
    pub lyapunov: LyapunovSpec,
    pub level: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathPlan<F> {
    pub t_start: F,
    pub t_end: F,
    pub steps: usize,
    pub scheme: Scheme,
    pub stop: Option<StopRule>,
}

impl<F: Real> PathPlan<F> {
    pub fn euler(t_start: F, t_end: F, steps: usize) -> Self {
        Self { t_start, t_end, steps, scheme: Scheme::EulerMaruyama, stop: None }
    }

    pub fn with_stop(mut self, lyapunov: LyapunovSpec, level: f64) -> Self {
        self.stop = Some(StopRule { lyapunov, level });
        self
    }

    fn validate(&self, c: &SdeCoefficients) -> Result<(), SdeError> {
        if !(self.t_start < self.t_end) {
            return Err(SdeError::InvalidPlan("t_start must be below t_end".into()));
        }
        if self.steps == 0 {
            return Err(SdeError::InvalidPlan("steps must be at least 1".into()));
        }
        if self.scheme == Scheme::ExactConstantDiffusion && (c.constant_diffusion().is_none() || c.constant_drift().is_none()) {
            return Err(SdeError::InvalidPlan("exact sampling needs constant drift and diffusion".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> F {
        (self.t_end - self.t_start) / F::from_count(self.steps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathResult<F> {
    pub times: Vec<F>,
    pub states: Vec<Vec<F>>,
    pub stopped_early: bool,
    pub stop_time: F,
    /// Coefficient-expression evaluations spent on the path.
    pub work: u64,
}

/// Simulates one path on the plan's uniform grid.
pub fn simulate_path<F: Real>(
    x0: &[F],
    plan: &PathPlan<F>,
    c: &SdeCoefficients,
    rng: &RngStream,
) -> Result<PathResult<F>, SdeError> {
    plan.validate(c)?;
    if x0.len() != c.d {
        return Err(SdeError::InvalidPlan(format!("initial state has {} entries, expected {}", x0.len(), c.d)));
    }
    let dt = plan.dt();
    let sqrt_dt = dt.sqrt();
    let exact = match plan.scheme {
        Scheme::ExactConstantDiffusion => Some((
            lift::<F>(&c.constant_drift().expect("validated")),
            lift::<F>(&c.constant_diffusion().expect("validated")),
        )),
        Scheme::EulerMaruyama => None,
    };
    let mut scratch = EmScratch::new(c);
    let mut z = vec![0.0; c.m];
    let mut dw: State<F> = smallvec![F::zero(); c.m];
    let mut times = Vec::with_capacity(plan.steps + 1);
    let mut states = Vec::with_capacity(plan.steps + 1);
    let mut state = x0.to_vec();
    let mut next = vec![F::zero(); c.d];
    let mut work = 0;
    let mut stopped = None;
    for k in 0..=plan.steps {
        let t = if k == plan.steps { plan.t_end } else { plan.t_start + dt * F::from_count(k) };
        times.push(t);
        states.push(state.clone());
        if let (None, Some(rule)) = (stopped, &plan.stop) {
            work += 1;
            if rule.lyapunov.value(t, &state)? >= F::lit(rule.level) {
                stopped = Some(t);
            }
        }
        if k == plan.steps {
            break;
        }
        if stopped.is_some() {
            continue;
        }
        rng.fill_normals((k * c.m) as u64, &mut z);
        for (w, &zi) in dw.iter_mut().zip(&z) {
            *w = F::lit(zi) * sqrt_dt;
        }
        match &exact {
            Some((drift, b)) => {
                for i in 0..c.d {
                    next[i] = state[i] + drift[i] * dt + dot(&b[i * c.m..(i + 1) * c.m], &dw);
                }
            }
            None => {
                em_step_into(&state, t, dt, &dw, c, &mut scratch, &mut next)?;
                work += c.evals_per_step();
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(SdeError::NonFinite { step: k });
        }
        std::mem::swap(&mut state, &mut next);
    }
    Ok(PathResult {
        times,
        states,
        stopped_early: stopped.is_some(),
        stop_time: stopped.unwrap_or(plan.t_end),
        work,
    })
}

pub(crate) fn lift<F: Real>(v: &[f64]) -> Vec<F> {
    v.iter().map(|&a| F::lit(a)).collect()
}

/// `x0 + B Z sqrt(s - t)` with `Z` standard normal; `B` is row-major `d x m`.
pub fn exact_constant_diffusion_sample<F: Real>(x0: &[F], t: F, s: F, b: &[F], m: usize, rng: &RngStream) -> Vec<F> {
    assert!(s >= t, "sampling time must not precede the start time");
    assert_eq!(b.len(), x0.len() * m, "diffusion matrix shape");
    let mut z = vec![0.0; m];
    rng.fill_normals(0, &mut z);
    let scale = (s - t).sqrt();
    let z: Vec<F> = z.into_iter().map(|zi| F::lit(zi) * scale).collect();
    x0.iter().enumerate().map(|(i, &xi)| xi + dot(&b[i * m..(i + 1) * m], &z)).collect()
}

/// Path generator used by the fixed-point estimators: returns the states of
/// a path started at `(t, x)` at a few ascending query times.
#[derive(Debug, Clone)]
pub struct PathSampler<'a, F> {
    coeffs: &'a SdeCoefficients,
    kind: SamplerKind<F>,
}

#[derive(Debug, Clone)]
enum SamplerKind<F> {
    Euler { steps: usize },
    Exact { drift: Vec<F>, b: Vec<F> },
}

impl<'a, F: Real> PathSampler<'a, F> {
    pub fn new(coeffs: &'a SdeCoefficients, scheme: Scheme, steps: usize) -> Result<Self, SdeError> {
        let kind = match scheme {
            Scheme::EulerMaruyama => {
                if steps == 0 {
                    return Err(SdeError::InvalidPlan("steps must be at least 1".into()));
                }
                SamplerKind::Euler { steps }
            }
            Scheme::ExactConstantDiffusion => match (coeffs.constant_drift(), coeffs.constant_diffusion()) {
                (Some(mu), Some(b)) => SamplerKind::Exact { drift: lift(&mu), b: lift(&b) },
                _ => return Err(SdeError::InvalidPlan("exact sampling needs constant drift and diffusion".into())),
            },
        };
        Ok(Self { coeffs, kind })
    }

    /// Exact sampling when the coefficients allow it, Euler otherwise.
    pub fn auto(coeffs: &'a SdeCoefficients, steps: usize) -> Result<Self, SdeError> {
        Self::new(coeffs, Self::preferred_scheme(coeffs), steps)
    }

    pub fn preferred_scheme(coeffs: &SdeCoefficients) -> Scheme {
        if coeffs.constant_drift().is_some() && coeffs.constant_diffusion().is_some() {
            Scheme::ExactConstantDiffusion
        } else {
            Scheme::EulerMaruyama
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self.kind {
            SamplerKind::Euler { .. } => Scheme::EulerMaruyama,
            SamplerKind::Exact { .. } => Scheme::ExactConstantDiffusion,
        }
    }

    pub fn coefficients(&self) -> &SdeCoefficients {
        self.coeffs
    }

    /// Coefficient evaluations of one full path, for work budgeting.
    pub fn path_cost(&self) -> u64 {
        match self.kind {
            SamplerKind::Euler { steps } => steps as u64 * self.coeffs.evals_per_step(),
            SamplerKind::Exact { .. } => 0,
        }
    }

    /// Constant drift and row-major diffusion of the exact scheme.
    pub fn exact_parts(&self) -> Option<(&[F], &[F])> {
        match &self.kind {
            SamplerKind::Exact { drift, b } => Some((drift, b)),
            SamplerKind::Euler { .. } => None,
        }
    }

    pub fn steps(&self) -> usize {
        match self.kind {
            SamplerKind::Euler { steps } => steps,
            SamplerKind::Exact { .. } => 1,
        }
    }

    /// Writes the states at `times` (ascending, within `[t, t_end]`) into
    /// `out`, `d` entries per time. Euler paths live on a uniform grid of
    /// `[t, t_end]` and are read at the nearest grid point at or before
    /// each query time.
    pub fn sample(
        &self,
        t: F,
        x: &[F],
        t_end: F,
        times: &[F],
        rng: &RngStream,
        out: &mut [F],
        work: &mut u64,
    ) -> Result<(), SdeError> {
        let (d, m) = (self.coeffs.d, self.coeffs.m);
        debug_assert_eq!(out.len(), times.len() * d);
        match &self.kind {
            SamplerKind::Exact { drift, b } => {
                let n = times.len();
                let mut zbuf = [0.0f64; 16];
                let mut zvec = Vec::new();
                let zs: &mut [f64] = if n * m <= zbuf.len() {
                    &mut zbuf[..n * m]
                } else {
                    zvec.resize(n * m, 0.0);
                    &mut zvec
                };
                rng.fill_normals(0, zs);
                let mut prev_t = t;
                for j in 0..n {
                    let (done, rest) = out.split_at_mut(j * d);
                    let prev = if j == 0 { x } else { &done[(j - 1) * d..] };
                    let cur = &mut rest[..d];
                    let h = times[j] - prev_t;
                    if h > F::zero() {
                        let sh = h.sqrt();
                        let z = &zs[j * m..(j + 1) * m];
                        for i in 0..d {
                            let row = &b[i * m..(i + 1) * m];
                            let noise = row.iter().zip(z).fold(F::zero(), |acc, (&bij, &zj)| acc + bij * (F::lit(zj) * sh));
                            cur[i] = prev[i] + drift[i] * h + noise;
                        }
                    } else {
                        cur.copy_from_slice(&prev[..d]);
                    }
                    prev_t = times[j];
                }
                if out.iter().any(|v| !v.is_finite()) {
                    return Err(SdeError::NonFinite { step: n });
                }
            }
            SamplerKind::Euler { steps } => {
                let mut z: SmallVec<[f64; 8]> = smallvec![0.0; m];
                let mut dw: State<F> = smallvec![F::zero(); m];
                let steps = *steps;
                let dt = (t_end - t) / F::from_count(steps);
                let sqrt_dt = dt.sqrt();
                let grid_index = |s: F| -> usize {
                    if s >= t_end {
                        steps
                    } else {
                        ((s - t) / dt).floor().to_usize().unwrap_or(0).min(steps)
                    }
                };
                let mut scratch = EmScratch::new(self.coeffs);
                let mut state: State<F> = x.iter().copied().collect();
                let mut next: State<F> = smallvec![F::zero(); d];
                let mut k = 0;
                for (j, &s) in times.iter().enumerate() {
                    let target = grid_index(s);
                    while k < target {
                        rng.fill_normals((k * m) as u64, &mut z);
                        for (w, &zi) in dw.iter_mut().zip(z.iter()) {
                            *w = F::lit(zi) * sqrt_dt;
                        }
                        let tk = t + dt * F::from_count(k);
                        em_step_into(&state, tk, dt, &dw, self.coeffs, &mut scratch, &mut next)?;
                        *work += self.coeffs.evals_per_step();
                        if next.iter().any(|v| !v.is_finite()) {
                            return Err(SdeError::NonFinite { step: k });
                        }
                        std::mem::swap(&mut state, &mut next);
                        k += 1;
                    }
                    out[j * d..(j + 1) * d].copy_from_slice(&state);
                }
            }
        }
        Ok(())
    }
}

/// Largest eigenvalue of `B B^*` by power iteration (`B` row-major `d x m`).
pub fn sup_quadratic_form(b: &[f64], d: usize, m: usize) -> f64 {
    let a: Vec<f64> = (0..d * d)
        .map(|k| {
            let (i, j) = (k / d, k % d);
            (0..m).map(|l| b[i * m + l] * b[j * m + l]).sum()
        })
        .collect();
    // A is PSD; start off-axis so no eigenvector is orthogonal to the seed.
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a[i * d + j] * v[j]).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next_lambda = dot(&v, &w) / dot(&v, &v);
        v = w.into_iter().map(|x| x / norm).collect();
        if (next_lambda - lambda).abs() <= 1e-15 * next_lambda.abs() {
            return next_lambda;
        }
        lambda = next_lambda;
    }
    lambda
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoercivityReport {
    pub points_checked: usize,
    /// `max <x, mu(t,x)> - L (1 + |x|^2)`; positive means violated.
    pub max_drift_violation: f64,
    pub drift_witness: (f64, Vec<f64>),
    /// `max |sigma(t,x)| - L (1 + |x|)`; spectral norm for constant sigma,
    /// Frobenius norm otherwise.
    pub max_diffusion_violation: f64,
    pub diffusion_witness: (f64, Vec<f64>),
    pub pass: bool,
}

/// Samples the growth conditions `<x, mu> <= L(1+|x|^2)` and
/// `|sigma| <= L(1+|x|)` at the given points.
pub fn coercivity_check<F: Real>(
    c: &SdeCoefficients,
    l: F,
    points: &[(F, Vec<F>)],
) -> Result<CoercivityReport, SdeError> {
    if points.is_empty() {
        return Err(SdeError::InvalidPlan("no sample points".into()));
    }
    let constant_norm = c.constant_diffusion().map(|b| sup_quadratic_form(&b, c.d, c.m).sqrt());
    let mut drift = vec![F::zero(); c.d];
    let mut sigma = vec![F::zero(); c.d * c.m];
    let mut worst_drift = (F::neg_infinity(), 0usize);
    let mut worst_diff = (F::neg_infinity(), 0usize);
    for (k, (t, x)) in points.iter().enumerate() {
        c.drift(*t, x, &mut drift)?;
        let r2 = norm_sq(x);
        let v = dot(x, &drift) - l * (F::one() + r2);
        if v > worst_drift.0 {
            worst_drift = (v, k);
        }
        let norm = match constant_norm {
            Some(n) => F::lit(n),
            None => {
                c.diffusion(*t, x, &mut sigma)?;
                norm_sq(&sigma).sqrt()
            }
        };
        let v = norm - l * (F::one() + r2.sqrt());
        if v > worst_diff.0 {
            worst_diff = (v, k);
        }
    }
    let witness = |k: usize| (points[k].0.as_f64(), points[k].1.iter().map(|v| v.as_f64()).collect());
    Ok(CoercivityReport {
        points_checked: points.len(),
        max_drift_violation: worst_drift.0.as_f64(),
        drift_witness: witness(worst_drift.1),
        max_diffusion_violation: worst_diff.0.as_f64(),
        diffusion_witness: witness(worst_diff.1),
        pass: worst_drift.0 <= F::zero() && worst_diff.0 <= F::zero(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub perturbation: f64,
    pub paths: usize,
    /// Monte-Carlo estimate of `E |X^gap_T - X_T|^2`.
    pub estimate: f64,
    pub std_error: f64,
    /// `4 T (T+1) gap^2 exp(4 L^2 T (T+1))`.
    pub bound: f64,
    pub pass: bool,
}

/// Closed-form right-hand side of the coefficient-perturbation estimate.
pub fn stability_bound(horizon: f64, lipschitz_l: f64, gap: f64) -> f64 {
    let tt = horizon * (horizon + 1.0);
    4.0 * tt * gap * gap * (4.0 * lipschitz_l * lipschitz_l * tt).exp()
}

/// Truncation radius of [`stability_bound_test`] for locally Lipschitz
/// coefficients.
pub const STABILITY_RADIUS: f64 = 10.0;

/// Couples the SDE with a copy whose drift is shifted by the constant
/// vector `gap / sqrt(d) * (1, ..., 1)` and measures the mean squared
/// terminal distance. Both copies consume the same Brownian increments.
/// Coefficients are evaluated at the projection of the state onto the ball
/// of radius `radius` when one is given.
pub fn stability_bound_test<F: Real>(
    c: &SdeCoefficients,
    x0: &[F],
    gap: F,
    paths: usize,
    plan: &PathPlan<F>,
    radius: Option<F>,
    rng: &RngStream,
) -> Result<StabilityReport, SdeError> {
    plan.validate(c)?;
    if gap < F::zero() {
        return Err(SdeError::InvalidPlan("perturbation must be non-negative".into()));
    }
    if paths < 2 {
        return Err(SdeError::InvalidPlan("need at least two paths".into()));
    }
    let shift = gap / F::from_count(c.d).sqrt();
    let dt = plan.dt();
    let sqrt_dt = dt.sqrt();
    let project = |x: &[F]| -> State<F> {
        match radius {
            Some(r) => {
                let n = norm_sq(x).sqrt();
                if n > r {
                    x.iter().map(|&v| v * r / n).collect()
                } else {
                    x.iter().copied().collect()
                }
            }
            None => x.iter().copied().collect(),
        }
    };
    let mut values = Vec::with_capacity(paths);
    let mut drift = vec![F::zero(); c.d];
    let mut sigma = vec![F::zero(); c.d * c.m];
    let mut z = vec![0.0; c.m];
    let mut dw = vec![F::zero(); c.m];
    for p in 0..paths {
        let stream = rng.child(p as u64);
        let mut base = x0.to_vec();
        let mut pert = x0.to_vec();
        for k in 0..plan.steps {
            let t = plan.t_start + dt * F::from_count(k);
            stream.fill_normals((k * c.m) as u64, &mut z);
            for (w, &zi) in dw.iter_mut().zip(&z) {
                *w = F::lit(zi) * sqrt_dt;
            }
            for (state, extra) in [(&mut base, F::zero()), (&mut pert, shift)] {
                let y = project(state);
                c.drift(t, &y, &mut drift)?;
                c.diffusion(t, &y, &mut sigma)?;
                for i in 0..c.d {
                    state[i] = state[i] + (drift[i] + extra) * dt + dot(&sigma[i * c.m..(i + 1) * c.m], &dw);
                }
                if state.iter().any(|v| !v.is_finite()) {
                    return Err(SdeError::NonFinite { step: k });
                }
            }
        }
        let diff: Vec<F> = base.iter().zip(&pert).map(|(a, b)| *b - *a).collect();
        values.push(norm_sq(&diff));
    }
    let (mean, se) = mean_and_se(&values);
    let bound = stability_bound(plan.t_end.as_f64(), c.lipschitz_l, gap.as_f64());
    let se = se.unwrap_or(F::zero());
    Ok(StabilityReport {
        perturbation: gap.as_f64(),
        paths,
        estimate: mean.as_f64(),
        std_error: se.as_f64(),
        bound,
        pass: mean.as_f64() <= bound + 3.0 * se.as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coeffs(d: usize, m: usize, mu: &[&str], sigma: &[Vec<&str>], l: f64) -> SdeCoefficients {
        SdeCoefficients::parse(d, m, mu, sigma, l).unwrap()
    }

    #[test]
    fn em_step_examples() {
        let c = coeffs(2, 2, &["0", "0"], &[vec!["1", "0"], vec!["0", "1"]], 1.0);
        assert_eq!(em_step(&[0.0, 0.0], 0.0, 0.1, &[0.1, -0.2], &c).unwrap(), vec![0.1, -0.2]);
        let c = coeffs(1, 1, &["0.05*x1"], &[vec!["0.2*x1"]], 1.0);
        let out = em_step(&[1.0f64], 0.0, 0.1, &[0.3], &c).unwrap();
        assert!((out[0] - 1.065).abs() < 1e-15);
        let c = coeffs(1, 1, &["0"], &[vec!["1/x1"]], 1.0);
        assert!(matches!(em_step(&[0.0], 0.0, 0.1, &[0.3], &c), Err(SdeError::Eval { .. })));
        assert!(em_step(&[1.0], 0.0, 0.0, &[0.3], &c).is_err());
    }

    #[test]
    fn rejects_malformed_coefficients() {
        assert!(SdeCoefficients::parse(2, 1, &["0", "0"], &[vec!["1"]], 1.0).is_err());
        assert!(SdeCoefficients::parse(1, 1, &["v"], &[vec!["1"]], 1.0).is_err());
        assert!(SdeCoefficients::parse(1, 1, &["x2"], &[vec!["1"]], 1.0).is_err());
        assert!(SdeCoefficients::parse(1, 1, &["0"], &[vec!["1"]], -1.0).is_err());
    }

    #[test]
    fn degenerate_sde_is_constant() {
        let c = coeffs(2, 1, &["0", "0"], &[vec!["0"], vec!["0"]], 0.0);
        let plan = PathPlan::euler(0.0, 1.0, 20);
        let p = simulate_path(&[1.5, -2.0], &plan, &c, &RngStream::new(1)).unwrap();
        assert_eq!(p.states.len(), 21);
        assert!(p.states.iter().all(|s| s == &vec![1.5, -2.0]));
        assert!(p.times.windows(2).all(|w| w[0] < w[1]));
        assert!(!p.stopped_early);
        assert_eq!(p.work, 20 * 4);
    }

    #[test]
    fn zero_noise_matches_forward_euler() {
        let c = coeffs(1, 1, &["-x1 + sin(t)"], &[vec!["0"]], 1.0);
        let plan = PathPlan::euler(0.0, 1.0, 50);
        let p = simulate_path(&[2.0], &plan, &c, &RngStream::new(3)).unwrap();
        let mut x = 2.0f64;
        for k in 0..50 {
            let t = k as f64 * 0.02;
            x += (-x + t.sin()) * 0.02;
            assert!((p.states[k + 1][0] - x).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn threshold_stops_immediately_when_already_above() {
        let c = SdeCoefficients::scaled_brownian(2, 1.0, 1.0);
        let plan = PathPlan::euler(0.0, 1.0, 10).with_stop(LyapunovSpec::polynomial(2.0, 0.0), 1.0);
        let p = simulate_path(&[0.5, 0.0], &plan, &c, &RngStream::new(5)).unwrap();
        assert!(p.stopped_early);
        assert_eq!(p.stop_time, 0.0);
        assert!(p.states.iter().all(|s| s == &vec![0.5, 0.0]));
    }

    #[test]
    fn raising_the_threshold_never_stops_earlier() {
        let c = coeffs(1, 1, &["0.5*x1"], &[vec!["0.5*x1 + 0.2"]], 1.0);
        let spec = LyapunovSpec::polynomial(2.0, 0.0);
        for p in 0..50 {
            let rng = RngStream::new(9).child(p);
            let mut last = 0.0;
            for level in [1.5, 2.0, 4.0, 8.0, 1e9] {
                let plan = PathPlan::euler(0.0, 1.0, 40).with_stop(spec.clone(), level);
                let r = simulate_path(&[0.3], &plan, &c, &rng).unwrap();
                assert!(r.stop_time >= last);
                last = r.stop_time;
            }
        }
    }

    #[test]
    fn exact_sample_edge_cases() {
        let rng = RngStream::new(2);
        assert_eq!(exact_constant_diffusion_sample(&[1.0, 2.0], 0.3, 0.3, &[1.0, 0.0, 0.0, 1.0], 2, &rng), vec![1.0, 2.0]);
        assert_eq!(exact_constant_diffusion_sample(&[1.0, 2.0], 0.0, 5.0, &[0.0; 4], 2, &rng), vec![1.0, 2.0]);
    }

    #[test]
    fn exact_sample_variance() {
        // Var(W_1) = 1; the sample variance has SE about sqrt(2/n).
        let n = 100_000;
        let root = RngStream::new(11);
        let xs: Vec<f64> = (0..n)
            .map(|i| exact_constant_diffusion_sample(&[0.0], 0.0, 1.0, &[1.0], 1, &root.child(i))[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() <= 3.0 * (2.0 / n as f64).sqrt(), "var={var}");
    }

    #[test]
    fn sampler_reads_left_grid_point() {
        let c = coeffs(1, 1, &["1"], &[vec!["0"]], 1.0);
        let s = PathSampler::<f64>::new(&c, Scheme::EulerMaruyama, 10).unwrap();
        let mut out = [0.0; 3];
        let mut work = 0;
        s.sample(0.0, &[0.0], 1.0, &[0.0, 0.37, 1.0], &RngStream::new(1), &mut out, &mut work).unwrap();
        assert!((out[0]).abs() < 1e-15);
        assert!((out[1] - 0.3).abs() < 1e-12);
        assert!((out[2] - 1.0).abs() < 1e-12);
        assert_eq!(work, 10 * 2);
        assert!(PathSampler::<f64>::new(&coeffs(1, 1, &["x1"], &[vec!["1"]], 1.0), Scheme::ExactConstantDiffusion, 1).is_err());
    }

    #[test]
    fn euler_and_exact_agree_for_constant_coefficients() {
        let c = coeffs(2, 2, &["0.5", "-1"], &[vec!["1", "0.5"], vec!["0", "2"]], 1.0);
        let euler = PathSampler::<f64>::new(&c, Scheme::EulerMaruyama, 1).unwrap();
        let exact = PathSampler::<f64>::new(&c, Scheme::ExactConstantDiffusion, 1).unwrap();
        let (mut a, mut b) = ([0.0; 2], [0.0; 2]);
        let rng = RngStream::new(4);
        euler.sample(0.2, &[1.0, 1.0], 1.0, &[1.0], &rng, &mut a, &mut 0).unwrap();
        exact.sample(0.2, &[1.0, 1.0], 1.0, &[1.0], &rng, &mut b, &mut 0).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn coercivity_examples() {
        let pts: Vec<(f64, Vec<f64>)> = (-20..=20).map(|k| (0.0, vec![k as f64 * 0.5])).collect();
        let c = coeffs(1, 1, &["-x1"], &[vec!["1"]], 1.0);
        assert!(coercivity_check(&c, 1.0, &pts).unwrap().pass);
        let c = coeffs(1, 1, &["x1^3"], &[vec!["0"]], 1.0);
        let r = coercivity_check(&c, 1.0, &[(0.0, vec![2.0])]).unwrap();
        assert!(!r.pass);
        assert!((r.max_drift_violation - 11.0).abs() < 1e-12);
        let c = SdeCoefficients::scaled_brownian(3, 1.0, 1.0);
        let pts3: Vec<(f64, Vec<f64>)> = (0..10).map(|k| (0.0, vec![k as f64, -1.0, 0.5])).collect();
        assert!(coercivity_check(&c, 1.0, &pts3).unwrap().pass);
        assert!(coercivity_check::<f64>(&c, 1.0, &[]).is_err());
    }

    #[test]
    fn power_iteration() {
        assert!((sup_quadratic_form(&[1.0, 0.0, 0.0, 1.0], 2, 2) - 1.0).abs() < 1e-12);
        assert!((sup_quadratic_form(&[2.0, 0.0, 0.0, 1.0], 2, 2) - 4.0).abs() < 1e-12);
        // B = [1 1]^T (d=2, m=1): B B^T = [[1,1],[1,1]] with top eigenvalue 2.
        assert!((sup_quadratic_form(&[1.0, 1.0], 2, 1) - 2.0).abs() < 1e-12);
        assert_eq!(sup_quadratic_form(&[0.0; 4], 2, 2), 0.0);
    }

    #[test]
    fn stability_bound_constant() {
        // 4 * 1 * 2 * 0.01 * e^8
        assert!((stability_bound(1.0, 1.0, 0.1) - 0.08 * 8f64.exp()).abs() < 1e-9);
        assert!((stability_bound(1.0, 1.0, 0.1) - 238.5).abs() < 0.1);
    }

    #[test]
    fn stability_test_zero_gap_is_exactly_zero() {
        let c = coeffs(1, 1, &["-x1"], &[vec!["1"]], 1.0);
        let plan = PathPlan::euler(0.0, 1.0, 50);
        let r = stability_bound_test(&c, &[0.5], 0.0, 200, &plan, Some(10.0), &RngStream::new(1)).unwrap();
        assert_eq!(r.estimate, 0.0);
        assert!(r.pass);
    }
}
