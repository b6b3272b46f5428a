// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::HeadId;
use crate::engine::ForwardTrace;
use crate::error::{ProbeError, Result};
use crate::stats::{self, RegressionResult, TTestResult};

/// How attention to a multi-token cue is combined across key tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueAggregation {
    /// Mean over query tokens of the mean over key tokens.
    #[default]
    MeanOverKeys,
    /// Mean over query tokens of the summed key mass.
    SumOverKeys,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionScore {
    pub score: f64,
    /// (query, key) pairs with key after query; they contribute zero.
    pub masked_pairs: usize,
}

/// Attention from the target span to the cue span in one head.
pub fn head_attention_score(
    trace: &ForwardTrace,
    target_span: &Range<usize>,
    cue_span: &Range<usize>,
    head: HeadId,
    aggregation: CueAggregation,
) -> Result<AttentionScore> {
    let pattern = trace.attention(head.layer)?;
    let t = pattern.n_tokens;
    if head.head == 0 || head.head > pattern.n_heads {
        return Err(ProbeError::Argument(format!(
            "head {head} outside {} heads",
            pattern.n_heads
        )));
    }
    if target_span.is_empty() || cue_span.is_empty() || target_span.end > t || cue_span.end > t {
        return Err(ProbeError::Argument(format!(
            "spans {target_span:?} / {cue_span:?} invalid for {t} tokens"
        )));
    }
    let h = head.head_index();
    let mut masked = 0;
    let mut total = 0.0f64;
    for q in target_span.clone() {
        let row = pattern.row(h, q);
        let mut mass = 0.0f64;
        for k in cue_span.clone() {
            if k > q {
                masked += 1;
            }
            mass += row[k] as f64;
        }
        total += match aggregation {
            CueAggregation::MeanOverKeys => mass / cue_span.len() as f64,
            CueAggregation::SumOverKeys => mass,
        };
    }
    if masked > 0 {
        log::debug!("head {head}: {masked} cue positions follow a target query");
    }
    Ok(AttentionScore {
        score: total / target_span.len() as f64,
        masked_pairs: masked,
    })
}

/// Mean attention from each token to its predecessor.
pub fn one_back_score(trace: &ForwardTrace, head: HeadId) -> Result<f64> {
    let pattern = trace.attention(head.layer)?;
    let t = pattern.n_tokens;
    if t < 2 {
        return Err(ProbeError::Argument("1-back score needs at least 2 tokens".into()));
    }
    if head.head == 0 || head.head > pattern.n_heads {
        return Err(ProbeError::Argument(format!(
            "head {head} outside {} heads",
            pattern.n_heads
        )));
    }
    let h = head.head_index();
    let sum: f64 = (1..t).map(|q| pattern.get(h, q, q - 1) as f64).sum();
    Ok(sum / (t - 1) as f64)
}

/// One-tailed paired test of cue attention exceeding 1-back attention.
/// Input is `(cue_attention, one_back)` per sentence.
pub fn oneback_subtraction_test(per_sentence: &[(f64, f64)]) -> Result<TTestResult> {
    let (cue, back): (Vec<f64>, Vec<f64>) = per_sentence.iter().copied().unzip();
    stats::paired_t_one_tailed(&cue, &back)
}

/// Per-step attention series of one head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrajectory {
    pub head: HeadId,
    pub steps: Vec<u64>,
    pub mean_attention: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl HeadTrajectory {
    pub fn validate(&self) -> Result<()> {
        let n = self.steps.len();
        if self.mean_attention.len() != n || self.stderr.len() != n {
            return Err(ProbeError::Argument(format!(
                "trajectory {} has ragged series",
                self.head
            )));
        }
        if self.steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProbeError::Argument(format!(
                "trajectory {} steps not increasing",
                self.head
            )));
        }
        if self.mean_attention.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(ProbeError::Argument(format!(
                "trajectory {} attention outside [0, 1]",
                self.head
            )));
        }
        Ok(())
    }
}

/// OLS of the R² series on a head's attention series over the same steps.
pub fn trajectory_regression(r2_series: &[f64], attn_series: &[f64]) -> Result<RegressionResult> {
    if r2_series.len() != attn_series.len() {
        return Err(ProbeError::Argument(format!(
            "step grids differ: {} R² values, {} attention values",
            r2_series.len(),
            attn_series.len()
        )));
    }
    if r2_series.len() < 3 {
        return Err(ProbeError::Argument("trajectory regression needs >= 3 steps".into()));
    }
    stats::ols(attn_series, r2_series, None)
}
