//! Consolidated admissibility report.

use serde::Serialize;
use serde_json::json;

use super::catalog::{CatalogEntry, Check};
use super::AppError;
use crate::lyapunov::{
    admissible_heat_type, ball_points, check_growth_ratio, check_supersolution, lipschitz_probe, max_admissible_horizon,
};
use crate::rng::RngStream;
use crate::sde::{coercivity_check, sup_quadratic_form};
use crate::sfpe::GrowthClass;

/// Radius of the ball sampled by the pointwise checks.
pub const VERIFY_RADIUS: f64 = 10.0;
/// Points sampled by the coercivity and supersolution checks.
pub const VERIFY_POINTS: usize = 512;
/// Pairs sampled by the Lipschitz probe.
pub const LIPSCHITZ_PAIRS: usize = 2048;
/// Shell radii of the growth-ratio check.
pub const GROWTH_RADII: [f64; 8] = [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0];
pub const GROWTH_SAMPLES_PER_SHELL: usize = 32;
/// Largest admissible ratio on the outermost shell.
pub const GROWTH_TOL: f64 = 1e-2;
/// Slack on pointwise inequalities.
pub const POINTWISE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: Check,
    /// Listed in the entry's admissibility profile.
    pub required: bool,
    pub pass: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub problem_id: String,
    pub checks: Vec<CheckOutcome>,
    /// Required checks that failed.
    pub failed: Vec<Check>,
    /// Supremum of admissible horizons when the heat-type rule applies.
    pub max_admissible_horizon: Option<f64>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn outcome(&self, check: Check) -> Option<&CheckOutcome> {
        self.checks.iter().find(|c| c.check == check)
    }
}

fn to_json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("reports serialize")
}

/// Runs every applicable hypothesis check; those in the profile decide `pass`.
pub fn run_verify(entry: &CatalogEntry, seed: u64) -> Result<VerifyReport, AppError> {
    let p = &entry.problem;
    let d = p.dim();
    let root = RngStream::new(seed);
    let points = ball_points::<f64>(d, VERIFY_RADIUS, p.horizon, VERIFY_POINTS, &root.child(0));
    let mut checks = Vec::new();
    let mut push = |check: Check, pass: bool, detail: serde_json::Value| {
        checks.push(CheckOutcome { check, required: entry.admissibility_profile.contains(&check), pass, detail });
    };

    let coercivity = coercivity_check(&p.coeffs, p.coeffs.lipschitz_l, &points).map_err(AppError::numerical)?;
    push(Check::Coercivity, coercivity.pass, to_json(&coercivity));

    let pairs_rng = root.child(1);
    let pairs: Vec<(f64, Vec<f64>, f64, f64)> = points
        .iter()
        .cycle()
        .take(LIPSCHITZ_PAIRS)
        .enumerate()
        .filter_map(|(k, (t, x))| {
            let s = pairs_rng.child(k as u64);
            let v = 20.0 * s.uniform(0) - 10.0;
            // Gaps from 1e-3 to 1 in either direction.
            let gap = (2.0 * s.uniform(1) - 1.0) * 10f64.powf(-3.0 * s.uniform(2));
            (gap != 0.0).then(|| (*t, x.clone(), v, v + gap))
        })
        .collect();
    let lipschitz = lipschitz_probe(&p.f, p.lipschitz_l, &pairs, POINTWISE_TOL).map_err(AppError::numerical)?;
    push(Check::Lipschitz, lipschitz.pass, to_json(&lipschitz));

    let supersolution =
        check_supersolution(&p.lyapunov, &p.coeffs, &points, POINTWISE_TOL).map_err(AppError::numerical)?;
    push(Check::Supersolution, supersolution.pass, to_json(&supersolution));

    let growth = check_growth_ratio::<f64>(
        &p.f,
        &p.g,
        &p.lyapunov,
        p.horizon,
        &GROWTH_RADII,
        GROWTH_SAMPLES_PER_SHELL,
        GROWTH_TOL,
        &root.child(2),
    )
    .map_err(AppError::numerical)?;
    push(Check::GrowthRatio, growth.pass, to_json(&growth));

    let mut max_horizon = None;
    if let GrowthClass::Gaussian(a) = p.growth {
        match p.coeffs.constant_diffusion() {
            Some(b) => {
                let c = sup_quadratic_form(&b, p.coeffs.d, p.coeffs.m);
                let limit = max_admissible_horizon(a, c);
                max_horizon = Some(limit);
                let pass = admissible_heat_type(a, c, p.horizon);
                push(Check::HeatType, pass, json!({ "a": a, "c": c, "horizon": p.horizon, "max_admissible_horizon": limit }));
            }
            None => push(Check::HeatType, false, json!({ "reason": "diffusion is not constant" })),
        }
    } else if entry.admissibility_profile.contains(&Check::HeatType) {
        push(Check::HeatType, false, json!({ "reason": "growth class is not gaussian" }));
    }

    let failed: Vec<Check> = checks.iter().filter(|c| c.required && !c.pass).map(|c| c.check).collect();
    Ok(VerifyReport { problem_id: entry.id.clone(), pass: failed.is_empty(), failed, checks, max_admissible_horizon: max_horizon })
}
