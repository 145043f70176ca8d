//! Small descriptive statistics helpers.

use serde::{Deserialize, Serialize};

/// Linear-interpolation percentile (`q` in `[0, 100]`) of unsorted data.
/// Returns NaN for empty input.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, q)
}

pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn median(data: &[f64]) -> f64 {
    percentile(data, 50.0)
}

pub fn mean(data: &[f64]) -> f64 {
    if data.is_empty() {
        return f64::NAN;
    }
    data.iter().sum::<f64>() / data.len() as f64
}

/// Unbiased sample variance.
pub fn variance(data: &[f64]) -> f64 {
    if data.len() < 2 {
        return 0.0;
    }
    let m = mean(data);
    data.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (data.len() - 1) as f64
}

/// Median with a central 95% band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Summary {
    pub fn of(data: &[f64]) -> Self {
        let mut v = data.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Self {
            median: percentile_sorted(&v, 50.0),
            lo: percentile_sorted(&v, 2.5),
            hi: percentile_sorted(&v, 97.5),
        }
    }
}
