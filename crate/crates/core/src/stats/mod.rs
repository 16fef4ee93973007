//! Resampling, two-sample tests, rank correlation, curve fitting and
//! grouped summaries. Everything here is a pure function of its inputs
//! (and seed, where one is taken).

mod aggregate;
mod bootstrap;
mod ks;
mod logistic;
mod spearman;

pub use aggregate::{aggregate, GroupSummary, Keyed};
pub use bootstrap::{bootstrap, bootstrap_indices, BootstrapOutcome, BootstrapSpec};
pub use ks::{kolmogorov_survival, ks_statistic, ks_two_sample};
pub use logistic::{fit_logistic, LogisticFit, LogisticInit, LogisticParams};
pub use spearman::{average_ranks, spearman};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("constant series: rank correlation is undefined")]
    ConstantSeries,
    #[error("invalid bootstrap spec: {0}")]
    InvalidSpec(String),
    #[error("unknown group key `{0}`")]
    UnknownKey(String),
    #[error("non-finite value in input")]
    NonFinite,
}

/// Output of a two-sample test or correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n1: usize,
    pub n2: usize,
    pub method: String,
}

/// Mean and sample standard deviation (n - 1 denominator).
///
/// A single value has no defined spread; it is reported as 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1.0)).sqrt()
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

pub(crate) fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_single_value_has_zero_spread() {
        let m = MeanStd::of(&[0.3]).unwrap();
        assert_eq!(m.std, 0.0);
        assert_eq!(m.count, 1);
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(MeanStd::of(&[]).is_none());
    }
}
