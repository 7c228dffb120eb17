//! Evaluation metrics: multiplicative estimation error, nearest-rank
//! percentiles, and selection-quality ratios.

use std::fmt;

/// Multiplicative error of a cardinality estimate: `max(e/t, t/e) >= 1`.
///
/// Estimates below one tuple are floored to one so the error stays finite;
/// a non-positive truth is undefined and rejected.
pub fn q_error(estimate: f64, truth: f64) -> Result<f64, MetricsError> {
    if !(truth > 0.0) {
        return Err(MetricsError::NonPositiveTruth(truth));
    }
    let e = estimate.max(1.0);
    Ok((e / truth).max(truth / e))
}

/// Nearest-rank percentile of an ascending-sorted slice; `None` when empty.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    debug_assert!((0.0..=100.0).contains(&p));
    debug_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Five-number summary of an error sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorProfile {
    pub min: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

/// Sorts `values` in place and reads off the five-number summary.
pub fn error_profile(values: &mut [f64]) -> Option<ErrorProfile> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("metric values are comparable"));
    Some(ErrorProfile {
        min: percentile(values, 0.0)?,
        p25: percentile(values, 25.0)?,
        median: percentile(values, 50.0)?,
        p75: percentile(values, 75.0)?,
        max: percentile(values, 100.0)?,
    })
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(values.iter().sum::<f64>() / values.len() as f64)
}

/// `achieved / reference` for nonnegative scores. Two zeros compare equal
/// (ratio one); beating a zero reference yields infinity.
pub fn quality_ratio(achieved: f64, reference: f64) -> Result<f64, MetricsError> {
    if !(achieved >= 0.0) || !(reference >= 0.0) {
        return Err(MetricsError::NegativeScore {
            achieved,
            reference,
        });
    }
    if reference == 0.0 {
        return Ok(if achieved == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok(achieved / reference)
}

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    NonPositiveTruth(f64),
    NegativeScore { achieved: f64, reference: f64 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::NonPositiveTruth(t) => {
                write!(f, "q-error needs a positive truth, got {t}")
            }
            MetricsError::NegativeScore {
                achieved,
                reference,
            } => write!(
                f,
                "quality ratio needs nonnegative scores, got {achieved} / {reference}"
            ),
        }
    }
}

impl std::error::Error for MetricsError {}
