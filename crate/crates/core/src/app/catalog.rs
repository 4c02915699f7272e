//! Built-in problems.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::AppError;
use crate::expr::Expression;
use crate::lyapunov::LyapunovSpec;
use crate::sde::SdeCoefficients;
use crate::sfpe::{GrowthClass, ProblemSpec};

/// Hypothesis checks an entry can require.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Check {
    Coercivity,
    Lipschitz,
    Supersolution,
    GrowthRatio,
    HeatType,
}

impl Check {
    pub const ALL: [Check; 5] = [Check::Coercivity, Check::Lipschitz, Check::Supersolution, Check::GrowthRatio, Check::HeatType];

    pub fn name(self) -> &'static str {
        match self {
            Check::Coercivity => "coercivity",
            Check::Lipschitz => "lipschitz",
            Check::Supersolution => "supersolution",
            Check::GrowthRatio => "growth_ratio",
            Check::HeatType => "heat_type",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        Check::ALL.into_iter().find(|c| c.name() == s).ok_or(())
    }
}

/// Checks required of a problem file that does not list its own.
pub fn default_profile(growth: &GrowthClass) -> Vec<Check> {
    let mut checks = vec![Check::Coercivity, Check::Lipschitz, Check::Supersolution, Check::GrowthRatio];
    if matches!(growth, GrowthClass::Gaussian(_)) {
        checks.push(Check::HeatType);
    }
    checks
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub id: String,
    pub problem: ProblemSpec,
    /// Known solution `u(t, x)`.
    pub reference_solution: Option<Expression>,
    pub admissibility_profile: Vec<Check>,
}

impl CatalogEntry {
    /// Reference value at `(t, x)`, when a reference exists.
    pub fn reference_at(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.reference_solution.as_ref().and_then(|r| r.eval_at(t, x, None).ok())
    }
}

fn norm_sq_source(d: usize) -> String {
    (1..=d).map(|i| format!("x{i}^2")).collect::<Vec<_>>().join(" + ")
}

fn diagonal(d: usize, entry: &str) -> Vec<Vec<String>> {
    (0..d).map(|i| (0..d).map(|j| if i == j { entry.to_string() } else { "0".to_string() }).collect()).collect()
}

struct Draft<'a> {
    id: &'a str,
    d: usize,
    mu: Vec<String>,
    sigma: Vec<Vec<String>>,
    f: String,
    g: String,
    lipschitz_l: f64,
    lyapunov: LyapunovSpec,
    growth: GrowthClass,
    reference: Option<String>,
}

impl Draft<'_> {
    fn build(self) -> CatalogEntry {
        let m = self.sigma[0].len();
        let coeffs = SdeCoefficients::parse(self.d, m, &self.mu, &self.sigma, self.lipschitz_l).expect("catalog coefficients parse");
        let f = Expression::parse(&self.f, self.d, true).expect("catalog f parses");
        let g = Expression::parse(&self.g, self.d, false).expect("catalog g parses");
        let reference = self.reference.map(|r| Expression::parse(&r, self.d, false).expect("catalog reference parses"));
        let problem = ProblemSpec::new(self.id, coeffs, f, g, 1.0, self.lipschitz_l, self.lyapunov, self.growth)
            .expect("catalog problems are valid");
        CatalogEntry {
            id: self.id.to_string(),
            admissibility_profile: default_profile(&problem.growth),
            problem,
            reference_solution: reference,
        }
    }
}

/// `V_4` rate for `sigma sigma^T = a I` and `mu = 0`: `2 a (d + 2)`.
fn v4_rate(d: usize, a: f64) -> f64 {
    2.0 * a * (d as f64 + 2.0)
}

/// Brownian motion, `f = 0`, `g = |x|^2`; `u = |x|^2 + d (T - t)`.
pub fn heat_quadratic(d: usize) -> CatalogEntry {
    Draft {
        id: "heat_quadratic",
        d,
        mu: vec!["0".into(); d],
        sigma: diagonal(d, "1"),
        f: "0".into(),
        g: norm_sq_source(d),
        lipschitz_l: 1.0,
        lyapunov: LyapunovSpec::polynomial(4.0, v4_rate(d, 1.0)),
        growth: GrowthClass::Polynomial(2.0),
        reference: Some(format!("{} + {d}*(1 - t)", norm_sq_source(d))),
    }
    .build()
}

/// `f = lambda v` over the dynamics of [`heat_quadratic`];
/// `u = exp(lambda (T - t)) (|x|^2 + d (T - t))`.
pub fn lambda_reaction(d: usize, lambda: f64) -> CatalogEntry {
    Draft {
        id: "lambda_reaction",
        d,
        mu: vec!["0".into(); d],
        sigma: diagonal(d, "1"),
        f: format!("{lambda:?}*v"),
        g: norm_sq_source(d),
        lipschitz_l: lambda.abs().max(1.0),
        lyapunov: LyapunovSpec::polynomial(4.0, v4_rate(d, 1.0)),
        growth: GrowthClass::Polynomial(2.0),
        reference: Some(format!("exp({lambda:?}*(1 - t))*({} + {d}*(1 - t))", norm_sq_source(d))),
    }
    .build()
}

/// No noise, `f = v`, `g = 1`; `u = exp(T - t)`.
pub fn deterministic_exp() -> CatalogEntry {
    Draft {
        id: "deterministic_exp",
        d: 1,
        mu: vec!["0".into()],
        sigma: diagonal(1, "0"),
        f: "v".into(),
        g: "1".into(),
        lipschitz_l: 1.0,
        lyapunov: LyapunovSpec::polynomial(2.0, 0.0),
        growth: GrowthClass::Polynomial(0.0),
        reference: Some("exp(1 - t)".into()),
    }
    .build()
}

/// `sigma = sqrt(2)`, `g = sin x`; `u = exp(-(T - t)) sin x`.
pub fn heat_sin_1d() -> CatalogEntry {
    Draft {
        id: "heat_sin_1d",
        d: 1,
        mu: vec!["0".into()],
        sigma: diagonal(1, "sqrt(2)"),
        f: "0".into(),
        g: "sin(x1)".into(),
        lipschitz_l: 1.5,
        lyapunov: LyapunovSpec::polynomial(4.0, v4_rate(1, 2.0)),
        growth: GrowthClass::Polynomial(0.0),
        reference: Some("exp(-(1 - t))*sin(x1)".into()),
    }
    .build()
}

/// Truncated cubic reaction `f = v - clip(v, -1, 1)^3` (Lipschitz 4).
pub fn allen_cahn_trunc() -> CatalogEntry {
    Draft {
        id: "allen_cahn_trunc",
        d: 1,
        mu: vec!["0".into()],
        sigma: diagonal(1, "1"),
        f: "v - clip(v, -1, 1)^3".into(),
        g: "1.5*cos(x1)".into(),
        lipschitz_l: 4.0,
        lyapunov: LyapunovSpec::polynomial(4.0, v4_rate(1, 1.0)),
        growth: GrowthClass::Polynomial(0.0),
        reference: None,
    }
    .build()
}

/// `f = sin v` (Lipschitz 1).
pub fn sine_reaction() -> CatalogEntry {
    Draft {
        id: "sine_reaction",
        d: 1,
        mu: vec!["0".into()],
        sigma: diagonal(1, "1"),
        f: "sin(v)".into(),
        g: "cos(x1)".into(),
        lipschitz_l: 1.0,
        lyapunov: LyapunovSpec::polynomial(4.0, v4_rate(1, 1.0)),
        growth: GrowthClass::Polynomial(0.0),
        reference: None,
    }
    .build()
}

/// Geometric Brownian motion `dX = 0.1 X dt + 0.4 X dW` with discounting
/// `f = -0.05 v` and `g = x`; `u = exp(0.05 (T - t)) x`.
pub fn gbm_linear() -> CatalogEntry {
    let (drift, vol, rate) = (0.1, 0.4, 0.05);
    Draft {
        id: "gbm_linear",
        d: 1,
        mu: vec![format!("{drift:?}*x1")],
        sigma: vec![vec![format!("{vol:?}*x1")]],
        f: format!("-{rate:?}*v"),
        g: "x1".into(),
        lipschitz_l: vol,
        lyapunov: LyapunovSpec::polynomial(2.0, 2.0 * drift + vol * vol),
        growth: GrowthClass::Polynomial(1.0),
        reference: Some(format!("exp({:?}*(1 - t))*x1", drift - rate)),
    }
    .build()
}

/// All built-in entries with their default parameters.
pub fn catalog() -> Vec<CatalogEntry> {
    vec![
        heat_quadratic(10),
        lambda_reaction(1, 1.0),
        deterministic_exp(),
        heat_sin_1d(),
        allen_cahn_trunc(),
        sine_reaction(),
        gbm_linear(),
    ]
}

pub fn catalog_entry(id: &str) -> Result<CatalogEntry, AppError> {
    catalog().into_iter().find(|e| e.id == id).ok_or_else(|| AppError::Config(format!("no catalog entry `{id}`")))
}
