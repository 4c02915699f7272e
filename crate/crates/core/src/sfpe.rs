//! Monte-Carlo solution of the stochastic fixed-point equation
//!
//! `v(t, x) = E[ g(X_T) + int_t^T f(s, X_s, v(s, X_s)) ds ]`, `X = X^{t,x}`,
//!
//! by nested Picard iteration and by the full-history multilevel Picard
//! (MLP) recursion
//!
//! ```text
//! U_0 = 0,
//! U_n(t,x) = M^-n sum_i g(X_T^(n,0,i))
//!          + sum_{l<n} (T-t) M^-(n-l) sum_i [ f(R, X_R, U_l(R, X_R))
//!                                           - 1{l>0} f(R, X_R, U_{l-1}(R, X_R)) ]
//! ```
//!
//! with one time sample `R ~ U(t, T)` per path. `U_l` and `U_{l-1}` inside one
//! term are independent realizations.
//!
//! Random streams: path `i` of an application at stream `s` uses
//! `s.child(i)`, drawing `R` from its uniform 0 and the path from its normals;
//! the value function at a time node `j` receives `s.child(i).child(j)`. In
//! MLP the level-`l >= 1` term `i` uses `s.child(i).child(l)`, whose children
//! 0 and 1 drive `U_l` and `U_{l-1}`. With this layout MLP with one level
//! reproduces [`picard_apply`] with `v = 0` bit for bit.

use rayon::prelude::*;
use serde::Serialize;
use smallvec::{smallvec, SmallVec};
use thiserror::Error;

use crate::expr::{BatchBindings, Bindings, EvalError, Expression, LANES};
use crate::lyapunov::{LyapunovError, LyapunovSpec};
use crate::quadrature::gauss_legendre;
use crate::rng::RngStream;
use crate::scalar::Real;
use crate::sde::{PathSampler, Scheme, SdeCoefficients, SdeError};
use crate::stats::{linear_fit, mean_and_se, Estimate};

/// Stack scratch capacity of the batched path kernel.
const SCRATCH: usize = 2 * LANES;

/// Default cap on estimated coefficient evaluations per solve.
pub const DEFAULT_WORK_BUDGET: u64 = 100_000_000;
/// Outer replications used for the MLP standard error.
pub const MLP_REPLICATIONS: usize = 16;
/// Deepest MLP recursion accepted.
pub const MLP_MAX_LEVELS: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SfpeError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("estimated work {estimated:.3e} exceeds the budget {budget}")]
    BudgetExceeded { estimated: f64, budget: u64 },
    #[error("evaluating {what}: {source}")]
    Eval { what: &'static str, source: EvalError },
    #[error(transparent)]
    Sde(#[from] SdeError),
    #[error(transparent)]
    Lyapunov(#[from] LyapunovError),
}

/// Growth class of `|f(t,x,0)| + |g(x)|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum GrowthClass {
    /// At most `C (1 + |x|^p)`.
    Polynomial(f64),
    /// At most `L exp(a |x|^2)`.
    Gaussian(f64),
}

/// A semilinear terminal-value problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemSpec {
    pub id: String,
    pub coeffs: SdeCoefficients,
    pub f: Expression,
    pub g: Expression,
    pub horizon: f64,
    pub lipschitz_l: f64,
    pub lyapunov: LyapunovSpec,
    pub growth: GrowthClass,
}

impl ProblemSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        coeffs: SdeCoefficients,
        f: Expression,
        g: Expression,
        horizon: f64,
        lipschitz_l: f64,
        lyapunov: LyapunovSpec,
        growth: GrowthClass,
    ) -> Result<Self, SfpeError> {
        let bad = |m: String| Err(SfpeError::InvalidProblem(m));
        if !(horizon > 0.0 && horizon.is_finite()) {
            return bad("horizon must be positive".into());
        }
        if !(lipschitz_l >= 0.0) {
            return bad("Lipschitz constant must be non-negative".into());
        }
        if f.dim() != coeffs.d || g.dim() != coeffs.d {
            return bad(format!("f and g must be declared over dimension {}", coeffs.d));
        }
        if g.uses_v() {
            return bad("g may not depend on v".into());
        }
        match growth {
            GrowthClass::Polynomial(p) if !(p >= 0.0) => return bad("growth exponent must be non-negative".into()),
            GrowthClass::Gaussian(a) if !(a > 0.0) => return bad("gaussian growth rate must be positive".into()),
            _ => {}
        }
        lyapunov.validate()?;
        Ok(Self { id: id.into(), coeffs, f, g, horizon, lipschitz_l, lyapunov, growth })
    }

    pub fn dim(&self) -> usize {
        self.coeffs.d
    }

    fn check_query<F: Real>(&self, t: F, x: &[F]) -> Result<(), SfpeError> {
        if x.len() != self.dim() {
            return Err(SfpeError::InvalidConfig(format!("query has {} coordinates, expected {}", x.len(), self.dim())));
        }
        if !(t >= F::zero() && t < F::lit(self.horizon)) {
            return Err(SfpeError::InvalidConfig(format!("query time {t} outside [0, {})", self.horizon)));
        }
        Ok(())
    }
}

/// How `int_t^T ... ds` is estimated along each path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRule {
    /// One uniform time sample, scaled by `T - t`.
    UniformSample,
    /// `n`-point Gauss–Legendre rule; `n = 1` is the midpoint rule.
    GaussLegendre(usize),
}

impl TimeRule {
    fn nodes(self) -> usize {
        match self {
            TimeRule::UniformSample => 1,
            TimeRule::GaussLegendre(n) => n,
        }
    }
}

/// Parameters of one application of the fixed-point map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ApplyOptions {
    pub samples: usize,
    pub sde_steps: usize,
    pub time_rule: TimeRule,
    /// `None` picks exact sampling whenever the coefficients are constant.
    pub scheme: Option<Scheme>,
}

impl ApplyOptions {
    pub fn new(samples: usize, sde_steps: usize) -> Self {
        Self { samples, sde_steps, time_rule: TimeRule::UniformSample, scheme: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    #[default]
    Zero,
    TerminalG,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PicardConfig {
    pub iterations: usize,
    pub samples: usize,
    pub sde_steps: usize,
    pub init: InitPolicy,
    pub seed: u64,
    pub time_rule: TimeRule,
    pub scheme: Option<Scheme>,
    pub work_budget: u64,
}

impl PicardConfig {
    pub fn new(iterations: usize, samples: usize, sde_steps: usize, seed: u64) -> Self {
        Self {
            iterations,
            samples,
            sde_steps,
            init: InitPolicy::Zero,
            seed,
            time_rule: TimeRule::UniformSample,
            scheme: None,
            work_budget: DEFAULT_WORK_BUDGET,
        }
    }

    fn apply_options(&self) -> ApplyOptions {
        ApplyOptions { samples: self.samples, sde_steps: self.sde_steps, time_rule: self.time_rule, scheme: self.scheme }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MlpConfig {
    pub levels: usize,
    pub samples: usize,
    pub sde_steps: usize,
    pub seed: u64,
    pub replications: usize,
    pub scheme: Option<Scheme>,
    pub work_budget: u64,
}

impl MlpConfig {
    pub fn new(levels: usize, samples: usize, sde_steps: usize, seed: u64) -> Self {
        Self {
            levels,
            samples,
            sde_steps,
            seed,
            replications: MLP_REPLICATIONS,
            scheme: None,
            work_budget: DEFAULT_WORK_BUDGET,
        }
    }
}

/// A (possibly random) function `(t, x) -> v` plugged into the fixed-point
/// map. `work` receives the coefficient evaluations it performs.
pub trait ValueFn<F: Real>: Sync {
    fn value(&self, t: F, x: &[F], rng: &RngStream, work: &mut u64) -> Result<F, SfpeError>;

    /// Deterministic forms the solver may evaluate many points at a time.
    fn batch_form(&self) -> Option<BatchValue> {
        None
    }
}

/// Value functions with a batched evaluation path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchValue {
    Zero,
    /// `v(t, x) = g(x)`.
    TerminalG,
}

/// `v = 0`.
#[derive(Debug, Clone, Copy)]
pub struct ZeroFn;

impl<F: Real> ValueFn<F> for ZeroFn {
    fn value(&self, _: F, _: &[F], _: &RngStream, _: &mut u64) -> Result<F, SfpeError> {
        Ok(F::zero())
    }

    fn batch_form(&self) -> Option<BatchValue> {
        Some(BatchValue::Zero)
    }
}

/// `v = c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstFn(pub f64);

impl<F: Real> ValueFn<F> for ConstFn {
    fn value(&self, _: F, _: &[F], _: &RngStream, _: &mut u64) -> Result<F, SfpeError> {
        Ok(F::lit(self.0))
    }
}

/// `v(t, x) = e(t, x)` for an expression without `v`.
#[derive(Debug, Clone, Copy)]
pub struct ExprFn<'a>(pub &'a Expression);

impl<F: Real> ValueFn<F> for ExprFn<'_> {
    fn value(&self, t: F, x: &[F], _: &RngStream, work: &mut u64) -> Result<F, SfpeError> {
        *work += 1;
        self.0.eval(&Bindings::new(t, x)).map_err(|source| SfpeError::Eval { what: "value function", source })
    }
}

/// Deterministic closure `(t, x) -> v`.
pub struct FnValue<G>(pub G);

impl<F: Real, G: Fn(F, &[F]) -> F + Sync> ValueFn<F> for FnValue<G> {
    fn value(&self, t: F, x: &[F], _: &RngStream, _: &mut u64) -> Result<F, SfpeError> {
        Ok((self.0)(t, x))
    }
}

type Buf<F> = SmallVec<[F; 16]>;

/// Everything one application of the map needs, resolved once.
struct Kernel<'a, F> {
    p: &'a ProblemSpec,
    sampler: PathSampler<'a, F>,
    horizon: F,
    samples: usize,
    /// Gauss–Legendre nodes and weights on `[-1, 1]`; empty for sampling.
    rule: Vec<(F, F)>,
    f_uses_v: bool,
}

impl<'a, F: Real> Kernel<'a, F> {
    fn new(p: &'a ProblemSpec, opts: &ApplyOptions) -> Result<Self, SfpeError> {
        if opts.samples == 0 {
            return Err(SfpeError::InvalidConfig("samples must be at least 1".into()));
        }
        if opts.sde_steps == 0 {
            return Err(SfpeError::InvalidConfig("sde_steps must be at least 1".into()));
        }
        let scheme = opts.scheme.unwrap_or_else(|| PathSampler::<F>::preferred_scheme(&p.coeffs));
        let rule = match opts.time_rule {
            TimeRule::UniformSample => Vec::new(),
            TimeRule::GaussLegendre(0) => {
                return Err(SfpeError::InvalidConfig("quadrature needs at least one node".into()))
            }
            TimeRule::GaussLegendre(n) => {
                let (x, w) = gauss_legendre(n);
                x.into_iter().zip(w).map(|(a, b)| (F::lit(a), F::lit(b))).collect()
            }
        };
        Ok(Self {
            p,
            sampler: PathSampler::new(&p.coeffs, scheme, opts.sde_steps)?,
            horizon: F::lit(p.horizon),
            samples: opts.samples,
            rule,
            f_uses_v: p.f.uses_v(),
        })
    }

    /// Cost of one path term, not counting the value function.
    fn term_cost(&self) -> f64 {
        self.sampler.path_cost().max(1) as f64 + 1.0 + self.rule.len().max(1) as f64
    }

    #[inline]
    fn eval_f(&self, t: F, x: &[F], v: F, work: &mut u64) -> Result<F, SfpeError> {
        *work += 1;
        self.p.f.eval(&Bindings::with_v(t, x, v)).map_err(|source| SfpeError::Eval { what: "f", source })
    }

    #[inline]
    fn eval_g(&self, x: &[F], work: &mut u64) -> Result<F, SfpeError> {
        *work += 1;
        self.p.g.eval(&Bindings::new(self.horizon, x)).map_err(|source| SfpeError::Eval { what: "g", source })
    }

    /// `g(X_T) + int_t^T f(s, X_s, v(s, X_s)) ds` along the path of stream `ps`.
    fn path_term<V: ValueFn<F>>(&self, v: &V, t: F, x: &[F], ps: &RngStream, work: &mut u64) -> Result<F, SfpeError> {
        let d = self.p.dim();
        let tau = self.horizon - t;
        let mut times: Buf<F> = SmallVec::new();
        if self.rule.is_empty() {
            times.push(t + tau * F::lit(ps.uniform(0)));
        } else {
            let half = tau / F::lit(2.0);
            times.extend(self.rule.iter().map(|&(node, _)| t + half * (node + F::one())));
        }
        times.push(self.horizon);
        let mut states: Buf<F> = smallvec![F::zero(); times.len() * d];
        self.sampler.sample(t, x, self.horizon, &times, ps, &mut states, work)?;
        let nodes = times.len() - 1;
        let mut integral = F::zero();
        for j in 0..nodes {
            let xs = &states[j * d..(j + 1) * d];
            let vs = if self.f_uses_v { v.value(times[j], xs, &ps.child(j as u64), work)? } else { F::zero() };
            let fs = self.eval_f(times[j], xs, vs, work)?;
            let weight = if self.rule.is_empty() { tau } else { tau / F::lit(2.0) * self.rule[j].1 };
            integral = integral + weight * fs;
        }
        Ok(self.eval_g(&states[nodes * d..], work)? + integral)
    }

    /// Batched form of `v` usable with this kernel, if any.
    fn batchable<V: ValueFn<F>>(&self, v: &V) -> Option<BatchValue> {
        self.sampler.exact_parts()?;
        if self.f_uses_v {
            v.batch_form()
        } else {
            Some(BatchValue::Zero)
        }
    }

    /// Path terms of paths `first..first + count`, computed `LANES` paths at
    /// a time and handed to `sink` in order; bit-identical to
    /// [`Kernel::path_term`] with the matching `v`.
    #[allow(clippy::too_many_arguments)]
    fn batch_terms(
        &self,
        leaf: BatchValue,
        t: F,
        x: &[F],
        rng: &RngStream,
        first: usize,
        count: usize,
        work: &mut u64,
        sink: &mut impl FnMut(&[F]),
    ) -> Result<(), SfpeError> {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: AVX2 support was just detected.
            return unsafe { self.batch_terms_avx2(leaf, t, x, rng, first, count, work, sink) };
        }
        self.batch_terms_impl(leaf, t, x, rng, first, count, work, sink)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    #[allow(clippy::too_many_arguments)]
    fn batch_terms_avx2(
        &self,
        leaf: BatchValue,
        t: F,
        x: &[F],
        rng: &RngStream,
        first: usize,
        count: usize,
        work: &mut u64,
        sink: &mut impl FnMut(&[F]),
    ) -> Result<(), SfpeError> {
        self.batch_terms_impl(leaf, t, x, rng, first, count, work, sink)
    }

    #[inline(always)]
    #[allow(clippy::too_many_arguments)]
    fn batch_terms_impl(
        &self,
        leaf: BatchValue,
        t: F,
        x: &[F],
        rng: &RngStream,
        first: usize,
        count: usize,
        work: &mut u64,
        sink: &mut impl FnMut(&[F]),
    ) -> Result<(), SfpeError> {
        let (drift, b) = self.sampler.exact_parts().expect("batched terms need the exact sampler");
        let (d, m) = (self.p.dim(), self.p.coeffs.m);
        let tau = self.horizon - t;
        let half = tau / F::lit(2.0);
        let q = self.rule.len().max(1);
        let nt = q + 1;
        let mut u = [0.0f64; LANES];
        // Stack storage for small problems, heap otherwise.
        macro_rules! scratch {
            ($name:ident, $zero:expr, $len:expr) => {
                let mut inline = [$zero; SCRATCH];
                let mut heap = Vec::new();
                let $name: &mut [_] = if $len <= SCRATCH {
                    &mut inline[..$len]
                } else {
                    heap.resize($len, $zero);
                    &mut heap[..]
                };
            };
        }
        scratch!(times, F::zero(), nt * LANES);
        scratch!(z, 0.0f64, nt * m * LANES);
        scratch!(zt, F::zero(), nt * m * LANES);
        scratch!(xs, F::zero(), nt * d * LANES);
        let (mut step, mut root, mut noise) = ([F::zero(); LANES], [F::zero(); LANES], [F::zero(); LANES]);
        let mut vals = [F::zero(); LANES];
        let mut fvals = [F::zero(); LANES];
        let mut integral = [F::zero(); LANES];
        let horizon = [self.horizon; LANES];
        for start in (0..count).step_by(LANES) {
            let n = (count - start).min(LANES);
            let first_path = (first + start) as u64;
            if self.rule.is_empty() {
                rng.children_uniforms(first_path, 0, &mut u[..n]);
                for l in 0..n {
                    times[l] = t + tau * F::lit(u[l]);
                }
            } else {
                for (j, &(node, _)) in self.rule.iter().enumerate() {
                    times[j * n..(j + 1) * n].fill(t + half * (node + F::one()));
                }
            }
            times[q * n..(q + 1) * n].fill(self.horizon);
            rng.children_normals(first_path, 0, nt * m, &mut z[..n * nt * m]);
            for (l, row) in z[..n * nt * m].chunks_exact(nt * m).enumerate() {
                for (jc, &zv) in row.iter().enumerate() {
                    zt[jc * n + l] = F::lit(zv);
                }
            }
            for j in 0..nt {
                for l in 0..n {
                    let prev_t = if j == 0 { t } else { times[(j - 1) * n + l] };
                    let h = times[j * n + l] - prev_t;
                    step[l] = h;
                    root[l] = if h > F::zero() { h.sqrt() } else { F::zero() };
                }
                for i in 0..d {
                    let acc = &mut noise[..n];
                    acc.fill(F::zero());
                    for c in 0..m {
                        let bic = b[i * m + c];
                        let zc = &zt[(j * m + c) * n..(j * m + c + 1) * n];
                        for ((a, &zv), &sh) in acc.iter_mut().zip(zc).zip(&root[..n]) {
                            *a = *a + bic * (zv * sh);
                        }
                    }
                    let (done, rest) = xs.split_at_mut(j * d * n);
                    let cur = &mut rest[i * n..(i + 1) * n];
                    let prev = if j == 0 { None } else { Some(&done[((j - 1) * d + i) * n..((j - 1) * d + i + 1) * n]) };
                    for l in 0..n {
                        let pv = prev.map_or(x[i], |pr| pr[l]);
                        let h = step[l];
                        cur[l] = if h > F::zero() { pv + drift[i] * h + acc[l] } else { pv };
                    }
                }
            }
            if xs[..nt * d * n].iter().any(|v| !v.is_finite()) {
                return Err(SdeError::NonFinite { step: nt }.into());
            }
            integral[..n].fill(F::zero());
            for j in 0..q {
                let tj = &times[j * n..(j + 1) * n];
                let xj = &xs[j * d * n..(j + 1) * d * n];
                match leaf {
                    _ if !self.f_uses_v => vals[..n].fill(F::zero()),
                    BatchValue::Zero => vals[..n].fill(F::zero()),
                    BatchValue::TerminalG => {
                        *work += n as u64;
                        self.p
                            .g
                            .eval_batch(&BatchBindings { t: &horizon[..n], x: xj, v: None }, &mut vals[..n])
                            .map_err(|source| SfpeError::Eval { what: "g", source })?;
                    }
                }
                *work += n as u64;
                self.p
                    .f
                    .eval_batch(&BatchBindings { t: tj, x: xj, v: Some(&vals[..n]) }, &mut fvals[..n])
                    .map_err(|source| SfpeError::Eval { what: "f", source })?;
                let weight = if self.rule.is_empty() { tau } else { half * self.rule[j].1 };
                for l in 0..n {
                    integral[l] = integral[l] + weight * fvals[l];
                }
            }
            *work += n as u64;
            let xt = &xs[q * d * n..(q + 1) * d * n];
            self.p
                .g
                .eval_batch(&BatchBindings { t: &horizon[..n], x: xt, v: None }, &mut vals[..n])
                .map_err(|source| SfpeError::Eval { what: "g", source })?;
            for l in 0..n {
                fvals[l] = vals[l] + integral[l];
            }
            sink(&fvals[..n]);
        }
        Ok(())
    }

    /// Sequential mean over `samples` paths.
    fn apply_mean<V: ValueFn<F>>(&self, v: &V, t: F, x: &[F], rng: &RngStream, work: &mut u64) -> Result<F, SfpeError> {
        self.mean_of_terms(v, t, x, rng, self.samples, work)
    }

    /// Mean of the first `count` path terms of stream `rng`.
    fn mean_of_terms<V: ValueFn<F>>(
        &self,
        v: &V,
        t: F,
        x: &[F],
        rng: &RngStream,
        count: usize,
        work: &mut u64,
    ) -> Result<F, SfpeError> {
        let mut sum = F::zero();
        if let Some(leaf) = self.batchable(v) {
            self.batch_terms(leaf, t, x, rng, 0, count, work, &mut |terms| {
                for &term in terms {
                    sum = sum + term;
                }
            })?;
        } else {
            for i in 0..count {
                sum = sum + self.path_term(v, t, x, &rng.child(i as u64), work)?;
            }
        }
        Ok(sum / F::from_count(count))
    }

    /// Parallel application returning the estimate with its standard error.
    fn apply_estimate<V: ValueFn<F>>(&self, v: &V, t: F, x: &[F], rng: &RngStream) -> Result<Estimate<F>, SfpeError> {
        let terms = if let Some(leaf) = self.batchable(v) {
            let chunks = self.samples.div_ceil(LANES);
            (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let start = c * LANES;
                    let n = (self.samples - start).min(LANES);
                    let mut w = 0;
                    let mut buf = Vec::with_capacity(n);
                    self.batch_terms(leaf, t, x, rng, start, n, &mut w, &mut |terms| buf.extend_from_slice(terms))?;
                    Ok(buf.into_iter().enumerate().map(|(k, val)| (val, if k == 0 { w } else { 0 })).collect::<Vec<_>>())
                })
                .collect::<Result<Vec<_>, SfpeError>>()?
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
        } else {
            (0..self.samples)
                .into_par_iter()
                .map(|i| {
                    let mut w = 0;
                    self.path_term(v, t, x, &rng.child(i as u64), &mut w).map(|val| (val, w))
                })
                .collect::<Result<Vec<_>, _>>()?
        };
        let work = terms.iter().map(|&(_, w)| w).sum();
        let values: Vec<F> = terms.into_iter().map(|(val, _)| val).collect();
        Ok(Estimate::from_samples(&values, work))
    }
}

/// `Phi(v_prev)(t, x)` estimated from `opts.samples` paths.
pub fn picard_apply<F: Real, V: ValueFn<F>>(
    v_prev: &V,
    p: &ProblemSpec,
    t: F,
    x: &[F],
    opts: &ApplyOptions,
    rng: &RngStream,
) -> Result<Estimate<F>, SfpeError> {
    p.check_query(t, x)?;
    Kernel::new(p, opts)?.apply_estimate(v_prev, t, x, rng)
}

/// Picard iterate `v_level`, realized by nested applications.
struct Nested<'k, 'a, F> {
    kernel: &'k Kernel<'a, F>,
    level: usize,
    init: InitPolicy,
}

impl<F: Real> ValueFn<F> for Nested<'_, '_, F> {
    fn value(&self, t: F, x: &[F], rng: &RngStream, work: &mut u64) -> Result<F, SfpeError> {
        if self.level == 0 {
            return match self.init {
                InitPolicy::Zero => Ok(F::zero()),
                InitPolicy::TerminalG => self.kernel.eval_g(x, work),
            };
        }
        if t >= self.kernel.horizon {
            return self.kernel.eval_g(x, work);
        }
        let inner = Nested { kernel: self.kernel, level: self.level - 1, init: self.init };
        self.kernel.apply_mean(&inner, t, x, rng, work)
    }

    fn batch_form(&self) -> Option<BatchValue> {
        match (self.level, self.init) {
            (0, InitPolicy::Zero) => Some(BatchValue::Zero),
            (0, InitPolicy::TerminalG) => Some(BatchValue::TerminalG),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardOutput<F> {
    /// The `K`-th iterate at the query.
    pub estimate: Estimate<F>,
    /// `v_1(t,x), ..., v_K(t,x)`, each from an independent nested run.
    pub iterates: Vec<Estimate<F>>,
}

/// Estimated coefficient evaluations of `picard_solve`.
pub fn picard_work_estimate(p: &ProblemSpec, cfg: &PicardConfig) -> Result<f64, SfpeError> {
    let kernel = Kernel::<f64>::new(p, &cfg.apply_options())?;
    let fan = if kernel.f_uses_v { (cfg.samples * cfg.time_rule.nodes()) as f64 } else { 0.0 };
    let per_level = cfg.samples as f64 * kernel.term_cost();
    // Work of one run of depth k: per_level * (1 + fan + ... + fan^(k-1)).
    let mut total = 0.0;
    let mut run = 0.0;
    let mut power = 1.0;
    for _ in 0..cfg.iterations {
        run += per_level * power;
        power *= fan;
        total += run;
    }
    Ok(total)
}

/// Nested Picard iteration at `(t, x)`.
pub fn picard_solve<F: Real>(p: &ProblemSpec, cfg: &PicardConfig, t: F, x: &[F]) -> Result<PicardOutput<F>, SfpeError> {
    p.check_query(t, x)?;
    if cfg.iterations == 0 {
        return Err(SfpeError::InvalidConfig("iterations must be at least 1".into()));
    }
    let estimated = picard_work_estimate(p, cfg)?;
    if estimated > cfg.work_budget as f64 {
        return Err(SfpeError::BudgetExceeded { estimated, budget: cfg.work_budget });
    }
    let kernel = Kernel::new(p, &cfg.apply_options())?;
    let root = RngStream::new(cfg.seed);
    let iterates = (1..=cfg.iterations)
        .map(|k| {
            let inner = Nested { kernel: &kernel, level: k - 1, init: cfg.init };
            kernel.apply_estimate(&inner, t, x, &root.child(k as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut estimate = *iterates.last().expect("at least one iteration");
    estimate.work = iterates.iter().map(|e| e.work).sum();
    Ok(PicardOutput { estimate, iterates })
}

/// One realization of `U_n(t, x)`.
struct Mlp<'k, 'a, F> {
    kernel: &'k Kernel<'a, F>,
    powers: Vec<usize>,
}

impl<F: Real> Mlp<'_, '_, F> {
    fn level(&self, n: usize, t: F, x: &[F], s: &RngStream, work: &mut u64) -> Result<F, SfpeError> {
        if n == 0 {
            return Ok(F::zero());
        }
        let k = self.kernel;
        if t >= k.horizon {
            return k.eval_g(x, work);
        }
        let d = k.p.dim();
        let tau = k.horizon - t;
        let mut out = k.mean_of_terms(&ZeroFn, t, x, s, self.powers[n], work)?;
        if !k.f_uses_v {
            return Ok(out);
        }
        let mut states: Buf<F> = smallvec![F::zero(); 2 * d];
        for l in 1..n {
            let count = self.powers[n - l];
            let mut diff = F::zero();
            for i in 0..count {
                let ps = s.child(i as u64).child(l as u64);
                let r = t + tau * F::lit(ps.uniform(0));
                k.sampler.sample(t, x, k.horizon, &[r, k.horizon], &ps, &mut states, work)?;
                let xr = &states[..d];
                let hi = self.level(l, r, xr, &ps.child(0), work)?;
                let lo = self.level(l - 1, r, xr, &ps.child(1), work)?;
                diff = diff + (k.eval_f(r, xr, hi, work)? - k.eval_f(r, xr, lo, work)?);
            }
            out = out + tau * diff / F::from_count(count);
        }
        Ok(out)
    }
}

/// Estimated coefficient evaluations of `mlp_estimate`.
pub fn mlp_work_estimate(p: &ProblemSpec, cfg: &MlpConfig) -> Result<f64, SfpeError> {
    let kernel = Kernel::<f64>::new(p, &ApplyOptions { scheme: cfg.scheme, ..ApplyOptions::new(cfg.samples, cfg.sde_steps) })?;
    let path = kernel.sampler.path_cost().max(1) as f64;
    let m = cfg.samples as f64;
    let mut cost = vec![0.0; cfg.levels + 1];
    for n in 1..=cfg.levels {
        let mut c = m.powi(n as i32) * (path + 2.0);
        if kernel.f_uses_v {
            for l in 1..n {
                c += m.powi((n - l) as i32) * (path + 2.0 + cost[l] + cost[l - 1]);
            }
        }
        cost[n] = c;
    }
    Ok(cost[cfg.levels] * cfg.replications as f64)
}

fn mlp_setup<'a, F: Real>(p: &'a ProblemSpec, cfg: &MlpConfig) -> Result<(Kernel<'a, F>, Vec<usize>), SfpeError> {
    if cfg.levels == 0 || cfg.levels > MLP_MAX_LEVELS {
        return Err(SfpeError::InvalidConfig(format!("MLP levels must lie in 1..={MLP_MAX_LEVELS}")));
    }
    if cfg.samples < 2 {
        return Err(SfpeError::InvalidConfig("MLP needs at least two samples per level".into()));
    }
    let kernel = Kernel::new(p, &ApplyOptions { scheme: cfg.scheme, ..ApplyOptions::new(cfg.samples, cfg.sde_steps) })?;
    let powers = (0..=cfg.levels)
        .map(|n| cfg.samples.checked_pow(n as u32))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| SfpeError::InvalidConfig("sample count overflows".into()))?;
    Ok((kernel, powers))
}

/// A single MLP realization `U_n(t, x)` driven by `rng`, with its work.
pub fn mlp_single<F: Real>(p: &ProblemSpec, cfg: &MlpConfig, t: F, x: &[F], rng: &RngStream) -> Result<(F, u64), SfpeError> {
    p.check_query(t, x)?;
    let (kernel, powers) = mlp_setup(p, cfg)?;
    let mut work = 0;
    let value = Mlp { kernel: &kernel, powers }.level(cfg.levels, t, x, rng, &mut work)?;
    Ok((value, work))
}

/// MLP estimate at `(t, x)`: the mean of `cfg.replications` independent
/// realizations, replication `r` driven by `rng.child(r)`.
pub fn mlp_estimate<F: Real>(p: &ProblemSpec, cfg: &MlpConfig, t: F, x: &[F], rng: &RngStream) -> Result<Estimate<F>, SfpeError> {
    p.check_query(t, x)?;
    if cfg.replications == 0 {
        return Err(SfpeError::InvalidConfig("need at least one replication".into()));
    }
    let estimated = mlp_work_estimate(p, cfg)?;
    if estimated > cfg.work_budget as f64 {
        return Err(SfpeError::BudgetExceeded { estimated, budget: cfg.work_budget });
    }
    let (kernel, powers) = mlp_setup(p, cfg)?;
    let mlp = Mlp { kernel: &kernel, powers };
    let reps = (0..cfg.replications)
        .into_par_iter()
        .map(|r| {
            let mut w = 0;
            mlp.level(cfg.levels, t, x, &rng.child(r as u64), &mut w).map(|v| (v, w))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let work = reps.iter().map(|&(_, w)| w).sum();
    let values: Vec<F> = reps.into_iter().map(|(v, _)| v).collect();
    Ok(Estimate::from_samples(&values, work))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub v_hat: f64,
    pub phi: f64,
    pub residual: f64,
    pub std_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResidualReport {
    pub rows: Vec<ResidualRow>,
    /// `max |residual| / max(1, |v_hat|)` over probes.
    pub summary: f64,
    pub pass: bool,
}

/// `Phi(v_hat) - v_hat` at each probe; a probe passes when
/// `|residual| <= 3 SE + tol`. Probe `j` is driven by `rng.child(j)`.
pub fn fixed_point_residual<F: Real, V: ValueFn<F>>(
    v_hat: &V,
    p: &ProblemSpec,
    probes: &[(F, Vec<F>)],
    opts: &ApplyOptions,
    tol: f64,
    rng: &RngStream,
) -> Result<ResidualReport, SfpeError> {
    if probes.is_empty() {
        return Err(SfpeError::InvalidConfig("no probes".into()));
    }
    let kernel = Kernel::new(p, opts)?;
    let mut rows = Vec::with_capacity(probes.len());
    for (j, (t, x)) in probes.iter().enumerate() {
        p.check_query(*t, x)?;
        let stream = rng.child(j as u64);
        let phi = kernel.apply_estimate(v_hat, *t, x, &stream.child(0))?;
        let mut w = 0;
        let vh = v_hat.value(*t, x, &stream.child(1), &mut w)?.as_f64();
        let residual = phi.value.as_f64() - vh;
        let se = phi.se_or_zero().as_f64();
        rows.push(ResidualRow {
            t: t.as_f64(),
            x: x.iter().map(|a| a.as_f64()).collect(),
            v_hat: vh,
            phi: phi.value.as_f64(),
            residual,
            std_error: se,
            pass: residual.abs() <= 3.0 * se + tol,
        });
    }
    let summary = rows.iter().map(|r| r.residual.abs() / r.v_hat.abs().max(1.0)).fold(0.0, f64::max);
    Ok(ResidualReport { pass: rows.iter().all(|r| r.pass), rows, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ContractionStatus {
    Contracting,
    NotContracting,
    /// Fewer than two differences stand out from Monte-Carlo noise.
    NoiseFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContractionReport {
    pub iterates: Vec<f64>,
    /// `|v_{k+1} - v_k|` for `k = 1..K-1`.
    pub differences: Vec<f64>,
    /// Combined standard error of each difference.
    pub difference_se: Vec<f64>,
    /// Index (0-based into `differences`) of the first difference within
    /// three combined standard errors of zero.
    pub noise_floor_at: Option<usize>,
    /// `exp(slope)` of `log |v_{k+1} - v_k|` against `k`.
    pub fitted_ratio: Option<f64>,
    pub threshold: f64,
    pub status: ContractionStatus,
    pub pass: bool,
}

/// Noise allowance added to the `1.5 L (T - t)` ratio threshold.
pub const CONTRACTION_NOISE_ALLOWANCE: f64 = 0.25;

/// Fits the decay of successive iterate differences.
pub fn analyze_contraction<F: Real>(iterates: &[Estimate<F>], lipschitz_l: f64, tau: f64) -> ContractionReport {
    let values: Vec<f64> = iterates.iter().map(|e| e.value.as_f64()).collect();
    let ses: Vec<f64> = iterates.iter().map(|e| e.se_or_zero().as_f64()).collect();
    let differences: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let difference_se: Vec<f64> = ses.windows(2).map(|w| (w[0] * w[0] + w[1] * w[1]).sqrt()).collect();
    let noise_floor_at = differences.iter().zip(&difference_se).position(|(&dv, &se)| dv <= 3.0 * se);
    let usable = noise_floor_at.unwrap_or(differences.len());
    let threshold = 1.5 * lipschitz_l * tau + CONTRACTION_NOISE_ALLOWANCE;
    let (fitted_ratio, status, pass) = if usable >= 2 {
        let ks: Vec<f64> = (1..=usable).map(|k| k as f64).collect();
        let logs: Vec<f64> = differences[..usable].iter().map(|v| v.ln()).collect();
        let ratio = linear_fit(&ks, &logs).0.exp();
        let pass = ratio <= threshold;
        (Some(ratio), if pass { ContractionStatus::Contracting } else { ContractionStatus::NotContracting }, pass)
    } else {
        (None, ContractionStatus::NoiseFloor, true)
    };
    ContractionReport {
        iterates: values,
        differences,
        difference_se,
        noise_floor_at,
        fitted_ratio,
        threshold,
        status,
        pass,
    }
}

/// Runs [`picard_solve`] and fits the decay of successive differences.
pub fn contraction_diagnostic<F: Real>(
    p: &ProblemSpec,
    cfg: &PicardConfig,
    t: F,
    x: &[F],
) -> Result<ContractionReport, SfpeError> {
    if cfg.iterations < 3 {
        return Err(SfpeError::InvalidConfig("contraction diagnostic needs at least 3 iterations".into()));
    }
    let out = picard_solve(p, cfg, t, x)?;
    Ok(analyze_contraction(&out.iterates, p.lipschitz_l, p.horizon - t.as_f64()))
}

/// Mean and standard error of plain Monte-Carlo `g(X_T)` with `paths`
/// paths, path `i` driven by `rng.child(i)`.
pub fn feynman_kac_linear<F: Real>(
    p: &ProblemSpec,
    t: F,
    x: &[F],
    paths: usize,
    sde_steps: usize,
    rng: &RngStream,
) -> Result<Estimate<F>, SfpeError> {
    p.check_query(t, x)?;
    let kernel = Kernel::<F>::new(p, &ApplyOptions::new(paths, sde_steps))?;
    let d = p.dim();
    let values = (0..paths)
        .into_par_iter()
        .map(|i| {
            let mut w = 0;
            let mut out: Buf<F> = smallvec![F::zero(); d];
            kernel.sampler.sample(t, x, kernel.horizon, &[kernel.horizon], &rng.child(i as u64), &mut out, &mut w)?;
            Ok((kernel.eval_g(&out, &mut w)?, w))
        })
        .collect::<Result<Vec<_>, SfpeError>>()?;
    let work = values.iter().map(|&(_, w)| w).sum();
    let vals: Vec<F> = values.into_iter().map(|(v, _)| v).collect();
    let (value, std_error) = mean_and_se(&vals);
    Ok(Estimate { value, std_error, samples: paths, work })
}
