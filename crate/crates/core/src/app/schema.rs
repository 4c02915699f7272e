//! Problem files: a TOML document with the fields
//!
//! ```toml
//! id = "heat_sin_1d"
//! dimension_d = 1
//! noise_m = 1
//! horizon = 1.0
//! mu = ["0"]
//! sigma = [["sqrt(2)"]]
//! f = "0"
//! g = "sin(x1)"
//! lipschitz_L = 0.0
//! reference_solution = "exp(-(1 - t))*sin(x1)"   # optional
//!
//! [growth]
//! kind = "polynomial"   # or "gaussian"
//! param = 2.0
//!
//! [lyapunov]
//! family = "polynomial" # q; "heat_kernel": alpha, epsilon; "expression": expr
//! q = 4.0
//! rho = 12.0
//! ```
//!
//! Unknown fields are rejected.

use std::path::Path;

use toml::{Table, Value};

use super::catalog::{default_profile, CatalogEntry};
use super::AppError;
use crate::expr::Expression;
use crate::lyapunov::{LyapunovFamily, LyapunovSpec};
use crate::sde::SdeCoefficients;
use crate::sfpe::{GrowthClass, ProblemSpec, SfpeError};

const TOP_LEVEL: [&str; 13] = [
    "id",
    "dimension_d",
    "noise_m",
    "horizon",
    "mu",
    "sigma",
    "f",
    "g",
    "lipschitz_L",
    "growth",
    "lyapunov",
    "reference_solution",
    // Accepted for round trips of catalog exports.
    "admissibility_profile",
];

fn schema(field: impl Into<String>, reason: impl Into<String>) -> AppError {
    AppError::Schema { field: field.into(), reason: reason.into() }
}

/// Source text plus the position bookkeeping used in error messages.
struct Doc<'a> {
    text: &'a str,
    file: &'a str,
}

impl Doc<'_> {
    /// 1-based line of `key = ...` inside `section` (top level when `None`).
    fn line_of(&self, section: Option<&str>, key: &str) -> usize {
        let mut current: Option<String> = None;
        for (n, raw) in self.text.lines().enumerate() {
            let line = raw.trim();
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.trim().to_string());
                continue;
            }
            let in_section = current.as_deref() == section;
            let is_key = line.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='));
            if in_section && is_key {
                return n + 1;
            }
        }
        0
    }

    fn expression(
        &self,
        section: Option<&str>,
        key: &str,
        label: &str,
        source: &str,
        dim: usize,
        allow_v: bool,
    ) -> Result<Expression, AppError> {
        Expression::parse(source, dim, allow_v).map_err(|source| AppError::Syntax {
            file: self.file.to_string(),
            line: self.line_of(section, key),
            field: label.to_string(),
            source,
        })
    }
}

fn check_keys(table: &Table, allowed: &[&str], prefix: &str) -> Result<(), AppError> {
    match table.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(schema(format!("{prefix}{k}"), "unknown field")),
        None => Ok(()),
    }
}

fn required<'t>(table: &'t Table, key: &str, prefix: &str) -> Result<&'t Value, AppError> {
    table.get(key).ok_or_else(|| schema(format!("{prefix}{key}"), "required"))
}

fn as_str<'t>(v: &'t Value, field: &str) -> Result<&'t str, AppError> {
    v.as_str().ok_or_else(|| schema(field, "expected a string"))
}

fn as_f64(v: &Value, field: &str) -> Result<f64, AppError> {
    match v {
        Value::Float(x) => Ok(*x),
        Value::Integer(i) => Ok(*i as f64),
        _ => Err(schema(field, "expected a number")),
    }
}

fn as_count(v: &Value, field: &str) -> Result<usize, AppError> {
    match v {
        Value::Integer(i) if *i >= 1 => Ok(*i as usize),
        _ => Err(schema(field, "expected a positive integer")),
    }
}

fn as_strings<'t>(v: &'t Value, field: &str) -> Result<Vec<&'t str>, AppError> {
    v.as_array()
        .ok_or_else(|| schema(field, "expected a list of strings"))?
        .iter()
        .map(|e| e.as_str().ok_or_else(|| schema(field, "expected a list of strings")))
        .collect()
}

fn as_table<'t>(v: &'t Value, field: &str) -> Result<&'t Table, AppError> {
    v.as_table().ok_or_else(|| schema(field, "expected a table"))
}

fn problem_error(e: SfpeError) -> AppError {
    match e {
        SfpeError::Lyapunov(e) => schema("lyapunov", e.to_string()),
        other => schema("problem", other.to_string()),
    }
}

/// Parses a problem document; `file` labels error messages.
pub fn parse_problem(text: &str, file: &str) -> Result<CatalogEntry, AppError> {
    let doc = Doc { text, file };
    let table: Table = text.parse().map_err(|e: toml::de::Error| schema("document", e.message().to_string()))?;
    check_keys(&table, &TOP_LEVEL, "")?;
    for key in ["id", "dimension_d", "noise_m", "horizon", "mu", "sigma", "f", "g", "lipschitz_L", "growth", "lyapunov"] {
        required(&table, key, "")?;
    }
    let id = as_str(&table["id"], "id")?.to_string();
    if id.is_empty() {
        return Err(schema("id", "must not be empty"));
    }
    let d = as_count(&table["dimension_d"], "dimension_d")?;
    let m = as_count(&table["noise_m"], "noise_m")?;
    let horizon = as_f64(&table["horizon"], "horizon")?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(schema("horizon", "must be positive and finite"));
    }
    let lipschitz_l = as_f64(&table["lipschitz_L"], "lipschitz_L")?;
    if !(lipschitz_l >= 0.0 && lipschitz_l.is_finite()) {
        return Err(schema("lipschitz_L", "must be non-negative and finite"));
    }

    let mu_src = as_strings(&table["mu"], "mu")?;
    if mu_src.len() != d {
        return Err(schema("mu", format!("expected {d} entries, found {}", mu_src.len())));
    }
    let rows = table["sigma"].as_array().ok_or_else(|| schema("sigma", "expected a list of lists"))?;
    if rows.len() != d {
        return Err(schema("sigma", format!("expected {d} rows of {m} entries, found {} rows", rows.len())));
    }
    let mut sigma = Vec::with_capacity(d * m);
    for (i, row) in rows.iter().enumerate() {
        let row = as_strings(row, "sigma")?;
        if row.len() != m {
            return Err(schema("sigma", format!("expected {d} rows of {m} entries, row {} has {}", i + 1, row.len())));
        }
        for (j, s) in row.into_iter().enumerate() {
            sigma.push(doc.expression(None, "sigma", &format!("sigma[{}][{}]", i + 1, j + 1), s, d, false)?);
        }
    }
    let mu = mu_src
        .into_iter()
        .enumerate()
        .map(|(i, s)| doc.expression(None, "mu", &format!("mu[{}]", i + 1), s, d, false))
        .collect::<Result<Vec<_>, _>>()?;
    let coeffs = SdeCoefficients::new(d, m, mu, sigma, lipschitz_l).map_err(|e| schema("sigma", e.to_string()))?;
    let f = doc.expression(None, "f", "f", as_str(&table["f"], "f")?, d, true)?;
    let g = doc.expression(None, "g", "g", as_str(&table["g"], "g")?, d, false)?;
    let reference = match table.get("reference_solution") {
        None => None,
        Some(v) => Some(doc.expression(
            None,
            "reference_solution",
            "reference_solution",
            as_str(v, "reference_solution")?,
            d,
            false,
        )?),
    };

    let growth_t = as_table(&table["growth"], "growth")?;
    check_keys(growth_t, &["kind", "param"], "growth.")?;
    let kind = as_str(required(growth_t, "kind", "growth.")?, "growth.kind")?;
    let param = as_f64(required(growth_t, "param", "growth.")?, "growth.param")?;
    let growth = match kind {
        "polynomial" => GrowthClass::Polynomial(param),
        "gaussian" => GrowthClass::Gaussian(param),
        other => return Err(schema("growth.kind", format!("unknown kind `{other}` (polynomial, gaussian)"))),
    };

    let ly = as_table(&table["lyapunov"], "lyapunov")?;
    let family = as_str(required(ly, "family", "lyapunov.")?, "lyapunov.family")?;
    let rho = as_f64(required(ly, "rho", "lyapunov.")?, "lyapunov.rho")?;
    let number = |key: &str| -> Result<f64, AppError> {
        as_f64(required(ly, key, "lyapunov.")?, &format!("lyapunov.{key}"))
    };
    let family = match family {
        "polynomial" => {
            check_keys(ly, &["family", "q", "rho"], "lyapunov.")?;
            LyapunovFamily::Polynomial { q: number("q")? }
        }
        "heat_kernel" => {
            check_keys(ly, &["family", "alpha", "epsilon", "rho"], "lyapunov.")?;
            LyapunovFamily::HeatKernel { alpha: number("alpha")?, epsilon: number("epsilon")? }
        }
        "expression" => {
            check_keys(ly, &["family", "expr", "rho"], "lyapunov.")?;
            let src = as_str(required(ly, "expr", "lyapunov.")?, "lyapunov.expr")?;
            LyapunovFamily::UserExpression { expr: doc.expression(Some("lyapunov"), "expr", "lyapunov.expr", src, d, false)? }
        }
        other => {
            return Err(schema("lyapunov.family", format!("unknown family `{other}` (polynomial, heat_kernel, expression)")))
        }
    };
    let lyapunov = LyapunovSpec { family, rho };

    let profile = match table.get("admissibility_profile") {
        None => default_profile(&growth),
        Some(v) => {
            let names = as_strings(v, "admissibility_profile")?;
            names
                .into_iter()
                .map(|n| n.parse().map_err(|_| schema("admissibility_profile", format!("unknown check `{n}`"))))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    let problem = ProblemSpec::new(id.clone(), coeffs, f, g, horizon, lipschitz_l, lyapunov, growth).map_err(problem_error)?;
    Ok(CatalogEntry { id, problem, reference_solution: reference, admissibility_profile: profile })
}

/// Reads and parses a problem file.
pub fn load_problem(path: &Path) -> Result<CatalogEntry, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::Io(format!("{}: {e}", path.display())))?;
    parse_problem(&text, &path.display().to_string())
}

/// Serializes an entry in the problem-file format.
pub fn to_problem_file(entry: &CatalogEntry) -> String {
    let p = &entry.problem;
    let c = &p.coeffs;
    let strings = |es: &[Expression]| Value::Array(es.iter().map(|e| Value::String(e.source().to_string())).collect());
    let mut t = Table::new();
    t.insert("id".into(), Value::String(entry.id.clone()));
    t.insert("dimension_d".into(), Value::Integer(c.d as i64));
    t.insert("noise_m".into(), Value::Integer(c.m as i64));
    t.insert("horizon".into(), Value::Float(p.horizon));
    t.insert("mu".into(), strings(&c.mu));
    t.insert("sigma".into(), Value::Array(c.sigma.chunks(c.m).map(strings).collect()));
    t.insert("f".into(), Value::String(p.f.source().to_string()));
    t.insert("g".into(), Value::String(p.g.source().to_string()));
    t.insert("lipschitz_L".into(), Value::Float(p.lipschitz_l));
    if let Some(r) = &entry.reference_solution {
        t.insert("reference_solution".into(), Value::String(r.source().to_string()));
    }
    t.insert(
        "admissibility_profile".into(),
        Value::Array(entry.admissibility_profile.iter().map(|c| Value::String(c.name().to_string())).collect()),
    );
    let (kind, param) = match p.growth {
        GrowthClass::Polynomial(q) => ("polynomial", q),
        GrowthClass::Gaussian(a) => ("gaussian", a),
    };
    let mut growth = Table::new();
    growth.insert("kind".into(), Value::String(kind.into()));
    growth.insert("param".into(), Value::Float(param));
    t.insert("growth".into(), Value::Table(growth));
    let mut ly = Table::new();
    match &p.lyapunov.family {
        LyapunovFamily::Polynomial { q } => {
            ly.insert("family".into(), Value::String("polynomial".into()));
            ly.insert("q".into(), Value::Float(*q));
        }
        LyapunovFamily::HeatKernel { alpha, epsilon } => {
            ly.insert("family".into(), Value::String("heat_kernel".into()));
            ly.insert("alpha".into(), Value::Float(*alpha));
            ly.insert("epsilon".into(), Value::Float(*epsilon));
        }
        LyapunovFamily::UserExpression { expr } => {
            ly.insert("family".into(), Value::String("expression".into()));
            ly.insert("expr".into(), Value::String(expr.source().to_string()));
        }
    }
    ly.insert("rho".into(), Value::Float(p.lyapunov.rho));
    t.insert("lyapunov".into(), Value::Table(ly));
    toml::to_string(&t).expect("problem tables always serialize")
}
