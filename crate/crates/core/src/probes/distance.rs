// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{forward, CaptureSpec, ForwardTrace, ModelConfig, ModelWeights};
use crate::error::{ProbeError, Result};
use crate::stats;
use crate::stimuli::AlignedPair;

/// Variance in relatedness explained by one layer's distances at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub checkpoint_step: u64,
    /// Hidden-state index; 0 is the embedding output.
    pub layer: usize,
    pub r2: f64,
    pub n_pairs: usize,
}

/// Mean hidden vector over a token span, accumulated in f64.
pub fn span_mean(trace: &ForwardTrace, span: &Range<usize>, layer: usize) -> Result<Vec<f64>> {
    let hidden = trace.hidden(layer)?;
    if span.is_empty() || span.end > hidden.rows {
        return Err(ProbeError::Argument(format!(
            "span {span:?} invalid for a {}-token trace",
            hidden.rows
        )));
    }
    let mut acc = vec![0.0f64; hidden.cols];
    for t in span.clone() {
        for (a, v) in acc.iter_mut().zip(hidden.row(t)) {
            *a += *v as f64;
        }
    }
    let n = span.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Cosine distance `1 - cos(u, v)` between span-mean hidden vectors.
pub fn target_distance(
    trace_a: &ForwardTrace,
    trace_b: &ForwardTrace,
    span_a: &Range<usize>,
    span_b: &Range<usize>,
    layer: usize,
) -> Result<f64> {
    let u = span_mean(trace_a, span_a, layer)?;
    let v = span_mean(trace_b, span_b, layer)?;
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(nu > 0.0 && nv > 0.0) {
        return Err(ProbeError::DegenerateEmbedding(format!(
            "zero-norm span mean at layer {layer}"
        )));
    }
    let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok(1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// OLS of relatedness on distance; `pairs` are `(distance, relatedness)`.
pub fn layer_r2(pairs: &[(f64, f64)], checkpoint_step: u64, layer: usize) -> Result<LayerScore> {
    if pairs.len() < 3 {
        return Err(ProbeError::Argument(format!(
            "layer_r2 needs >= 3 pairs, got {}",
            pairs.len()
        )));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    if x.iter().all(|d| *d == x[0]) {
        return Err(ProbeError::DegenerateRegressor(format!(
            "constant distances at layer {layer}"
        )));
    }
    let fit = stats::ols(&x, &y, None)?;
    Ok(LayerScore {
        checkpoint_step,
        layer,
        r2: fit.r2,
        n_pairs: pairs.len(),
    })
}

/// Layer with the highest r2; ties go to the lower layer.
pub fn select_tracked_layer(final_step_scores: &[LayerScore]) -> Result<usize> {
    final_step_scores
        .iter()
        .fold(None::<&LayerScore>, |best, s| match best {
            Some(b) if b.r2 > s.r2 || (b.r2 == s.r2 && b.layer <= s.layer) => Some(b),
            _ => Some(s),
        })
        .map(|s| s.layer)
        .ok_or_else(|| ProbeError::Argument("no layer scores to select from".into()))
}

/// Target distance at every hidden layer for each pair: `[pair][layer]`.
pub fn pair_distances(cfg: &ModelConfig, weights: &ModelWeights, pairs: &[AlignedPair]) -> Result<Vec<Vec<f64>>> {
    let capture = CaptureSpec::hidden_only();
    crate::parallel::try_map(pairs, |p| {
        let ta = forward(cfg, weights, &p.a.encoded, &capture)?;
        let tb = forward(cfg, weights, &p.b.encoded, &capture)?;
        (0..=cfg.n_layers)
            .map(|l| target_distance(&ta, &tb, &p.a.target_span, &p.b.target_span, l))
            .collect()
    })
}

/// R² of relatedness on distance for every hidden layer `0..=n_layers`.
///
/// A layer whose distances are all equal (typically the embedding output
/// when both sentences share the target's tokens) scores the intercept-only
/// fit, R² = 0.
pub fn layer_scores_from_distances(
    distances: &[Vec<f64>],
    relatedness: &[f64],
    checkpoint_step: u64,
) -> Result<Vec<LayerScore>> {
    let n_layers = distances.first().map_or(0, Vec::len);
    (0..n_layers)
        .map(|l| {
            let pts: Vec<(f64, f64)> = distances.iter().zip(relatedness).map(|(d, r)| (d[l], *r)).collect();
            match layer_r2(&pts, checkpoint_step, l) {
                Err(ProbeError::DegenerateRegressor(msg)) => {
                    log::debug!("step {checkpoint_step}: {msg}; scoring R² = 0");
                    Ok(LayerScore {
                        checkpoint_step,
                        layer: l,
                        r2: 0.0,
                        n_pairs: pts.len(),
                    })
                }
                other => other,
            }
        })
        .collect()
}

pub fn layer_scores(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    pairs: &[AlignedPair],
    checkpoint_step: u64,
) -> Result<Vec<LayerScore>> {
    let d = pair_distances(cfg, weights, pairs)?;
    let rel: Vec<f64> = pairs.iter().map(|p| p.relatedness).collect();
    layer_scores_from_distances(&d, &rel, checkpoint_step)
}
