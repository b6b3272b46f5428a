// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::engine::{sentence_log_prob, EncodedSentence, ModelConfig, ModelWeights};
use crate::error::{ProbeError, Result};
use crate::stats::{self, RegressionResult};

/// `log p(original) - log p(reversed)`; positive when the original order is preferred.
pub fn modnoun_log_ratio(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    original: &EncodedSentence,
    reversed: &EncodedSentence,
) -> Result<f64> {
    if original.token_ids == reversed.token_ids {
        sentence_log_prob(cfg, weights, original)?;
        return Ok(0.0);
    }
    Ok(sentence_log_prob(cfg, weights, original)? - sentence_log_prob(cfg, weights, reversed)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// R² ~ log ratio + run dummies.
    pub logratio_fit: RegressionResult,
    /// R² ~ log10(step + 1) + run dummies.
    pub step_fit: RegressionResult,
    /// AIC(step model) - AIC(log-ratio model); positive favours the log ratio.
    pub delta_aic: f64,
}

/// Indicator columns for every run label except the first in sorted order.
pub fn run_dummies(labels: &[String]) -> Vec<Vec<f64>> {
    let mut levels: Vec<&String> = labels.iter().collect();
    levels.sort();
    levels.dedup();
    levels
        .iter()
        .skip(1)
        .map(|lvl| labels.iter().map(|l| if l == *lvl { 1.0 } else { 0.0 }).collect())
        .collect()
}

pub fn logratio_r2_coupling(
    r2_series: &[f64],
    logratio_series: &[f64],
    step_series: &[u64],
    run_labels: &[String],
) -> Result<CouplingReport> {
    let n = r2_series.len();
    if logratio_series.len() != n || step_series.len() != n || run_labels.len() != n {
        return Err(ProbeError::Argument("coupling series are not aligned".into()));
    }
    if n < 3 {
        return Err(ProbeError::Argument("coupling needs >= 3 checkpoints".into()));
    }
    let dummies = run_dummies(run_labels);
    let extra = (!dummies.is_empty()).then_some(dummies.as_slice());
    let log_step: Vec<f64> = step_series.iter().map(|s| (*s as f64 + 1.0).log10()).collect();
    let logratio_fit = stats::ols(logratio_series, r2_series, extra)?;
    let step_fit = stats::ols(&log_step, r2_series, extra)?;
    Ok(CouplingReport {
        delta_aic: step_fit.aic - logratio_fit.aic,
        logratio_fit,
        step_fit,
    })
}
