//! Monte-Carlo estimates and their standard errors.

use serde::Serialize;

use crate::scalar::Real;

/// A Monte-Carlo value with its standard error and cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate<F> {
    pub value: F,
    /// `sd / sqrt(samples)`; `None` when fewer than two samples exist.
    pub std_error: Option<F>,
    pub samples: usize,
    /// Coefficient-expression evaluations performed.
    pub work: u64,
}

impl<F: Real> Estimate<F> {
    /// Exact value with zero uncertainty.
    pub fn exact(value: F) -> Self {
        Self { value, std_error: Some(F::zero()), samples: 1, work: 0 }
    }

    /// Mean and standard error of `values`, summed in order.
    pub fn from_samples(values: &[F], work: u64) -> Self {
        let (value, std_error) = mean_and_se(values);
        Self { value, std_error, samples: values.len(), work }
    }

    pub fn se_or_zero(&self) -> F {
        self.std_error.unwrap_or(F::zero())
    }

    /// `|self - other| <= k * sqrt(se_a^2 + se_b^2)`.
    pub fn agrees_with(&self, other: &Self, k: F) -> bool {
        let combined = (self.se_or_zero().powi(2) + other.se_or_zero().powi(2)).sqrt();
        (self.value - other.value).abs() <= k * combined
    }

    pub fn within(&self, target: F, k: F) -> bool {
        (self.value - target).abs() <= k * self.se_or_zero()
    }
}

/// Two-pass mean and standard error; deterministic for a given order.
pub fn mean_and_se<F: Real>(values: &[F]) -> (F, Option<F>) {
    let n = values.len();
    if n == 0 {
        return (F::nan(), None);
    }
    let nf = F::from_count(n);
    let mean = values.iter().copied().fold(F::zero(), |a, b| a + b) / nf;
    if n < 2 {
        return (mean, None);
    }
    let ss = values.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean));
    let sd = (ss / F::from_count(n - 1)).sqrt();
    (mean, Some(sd / nf.sqrt()))
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn se_definition() {
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sd = sqrt(5/3)
        assert!((se.unwrap() - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(mean_and_se(&[7.0]).1, None);
        assert_eq!(mean_and_se(&[1.0; 10]), (1.0, Some(0.0)));
    }

    #[test]
    fn fit_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| -0.5 * v + 2.0).collect();
        let (s, c) = linear_fit(&x, &y);
        assert!((s + 0.5).abs() < 1e-12 && (c - 2.0).abs() < 1e-12);
    }
}
