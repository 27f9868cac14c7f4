//! Small statistics helpers: sample moments and log-log order fits.

use serde::{Deserialize, Serialize};

/// Errors at or below this level are treated as exact (round-off only).
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Standard error of the sample mean.
pub fn std_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    std_dev(xs) / (xs.len() as f64).sqrt()
}

pub fn rms(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64).sqrt()
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

/// Least-squares slope of log(error) against log(step).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OrderFit {
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    pub order: f64,
    /// Every error sits at the round-off floor, so the slope carries no information.
    pub exact: bool,
}

impl OrderFit {
    pub fn passes(&self, min_order: f64) -> bool {
        self.exact || (self.order.is_finite() && self.order >= min_order)
    }
}

pub fn fit_order(steps: &[f64], errors: &[f64]) -> OrderFit {
    assert_eq!(steps.len(), errors.len());
    let exact = errors.iter().all(|e| e.abs() <= ROUNDOFF_FLOOR);
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .zip(errors)
        .filter(|(_, e)| **e > 0.0)
        .map(|(h, e)| (h.ln(), e.ln()))
        .collect();
    let order = if pts.len() < 2 {
        f64::NAN
    } else {
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        sxy / sxx
    };
    OrderFit {
        steps: steps.to_vec(),
        errors: errors.to_vec(),
        order,
        exact,
    }
}
