//! Problem catalog, problem files, run drivers and result persistence.

pub mod catalog;
pub mod runs;
pub mod schema;
pub mod verify;

use std::fmt::Display;

use thiserror::Error;

use crate::expr::ExprError;
use crate::oracle::OracleError;
use crate::sfpe::SfpeError;

pub use catalog::{catalog, catalog_entry, CatalogEntry, Check};
pub use runs::{
    content_hash, paths_dump, run_oracle_compare, run_solve, run_study, solve_probe, standard_probes, with_threads, Method,
    OracleGridConfig, Probe, RunRecord, SolveConfig, SolveResult, Sweep,
};
pub use schema::{load_problem, parse_problem, to_problem_file};
pub use verify::{run_verify, VerifyReport};

/// Process exit codes.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const ADMISSIBILITY: i32 = 2;
    pub const NUMERICAL: i32 = 3;
    pub const CONFIG: i32 = 4;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AppError {
    #[error("schema error in `{field}`: {reason}")]
    Schema { field: String, reason: String },
    #[error("{file}:{line}: in `{field}`: {source}")]
    Syntax { file: String, line: usize, field: String, source: ExprError },
    #[error("{0}")]
    Io(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("admissibility failure: {}{}", join(failed), note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default())]
    Admissibility { failed: Vec<Check>, note: Option<String> },
    #[error("numerical failure: {0}")]
    Numerical(String),
}

fn join(checks: &[Check]) -> String {
    checks.iter().map(|c| c.name()).collect::<Vec<_>>().join(", ")
}

impl AppError {
    pub fn numerical(e: impl Display) -> Self {
        AppError::Numerical(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Admissibility { .. } => exit::ADMISSIBILITY,
            AppError::Numerical(_) => exit::NUMERICAL,
            _ => exit::CONFIG,
        }
    }
}

impl From<SfpeError> for AppError {
    fn from(e: SfpeError) -> Self {
        match e {
            SfpeError::InvalidConfig(_) | SfpeError::InvalidProblem(_) | SfpeError::BudgetExceeded { .. } => {
                AppError::Config(e.to_string())
            }
            other => AppError::numerical(other),
        }
    }
}

impl From<OracleError> for AppError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Domain { .. } | OracleError::NonFinite { .. } => AppError::numerical(e),
            other => AppError::Config(other.to_string()),
        }
    }
}
