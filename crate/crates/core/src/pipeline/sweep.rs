// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sweep-level aggregates computed from per-step cell outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::cells::{AblationOutput, AttentionOutput, ModNounOutput, OneBackOutput, Phase1Output};
use crate::ablation::{condition_effect, Condition};
use crate::error::{ProbeError, Result};
use crate::probes::distance::select_tracked_layer;
use crate::probes::{
    composite_index, logratio_r2_coupling, trajectory_regression, CompositeIndexRow, CompositeInputs, HeadId,
};
use crate::stats::{bh_fdr, RegressionResult};

/// One fitted term, flattened for the regressions table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermRow {
    pub subject: String,
    pub term: String,
    #[serde(with = "super::float")]
    pub estimate: f64,
    #[serde(with = "super::float")]
    pub std_error: f64,
    #[serde(with = "super::float")]
    pub t: f64,
    #[serde(with = "super::float")]
    pub p: f64,
    #[serde(with = "super::float::option")]
    pub p_fdr: Option<f64>,
    #[serde(with = "super::float")]
    pub r2: f64,
    pub n: usize,
    #[serde(with = "super::float")]
    pub aic: f64,
}

impl TermRow {
    /// Row for coefficient `idx` of `fit`.
    pub fn from_fit(subject: String, term: &str, fit: &RegressionResult, idx: usize) -> Self {
        let (t, p) = fit.coef_test(idx);
        Self {
            subject,
            term: term.into(),
            estimate: fit.coefficients[idx],
            std_error: fit.std_errors[idx],
            t,
            p,
            p_fdr: None,
            r2: fit.r2,
            n: fit.n,
            aic: fit.aic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Sweep {
    pub tracked_layer: usize,
    /// Step the layer was chosen at (or `None` when configured).
    pub selected_at: Option<u64>,
    /// Tracked-layer R² per step.
    pub r2_series: Vec<(u64, f64)>,
    /// Attention slope per head, FDR over all heads of the model.
    pub trajectories: Vec<TermRow>,
    pub notes: Vec<String>,
}

/// Tracked layer, its R² series and per-head trajectory regressions.
pub fn phase1_sweep(per_step: &[(u64, &Phase1Output)], tracked: Option<usize>, final_step: u64) -> Result<Phase1Sweep> {
    let (tracked_layer, selected_at) = match tracked {
        Some(l) => (l, None),
        None => {
            let fin = per_step
                .iter()
                .find(|(s, _)| *s == final_step)
                .ok_or_else(|| ProbeError::Argument(format!("no phase1 result at the final step {final_step}")))?;
            (select_tracked_layer(&fin.1.layer_scores)?, Some(final_step))
        }
    };
    let mut r2_series = Vec::with_capacity(per_step.len());
    for (s, out) in per_step {
        let score = out
            .layer_scores
            .iter()
            .find(|l| l.layer == tracked_layer)
            .ok_or_else(|| ProbeError::Argument(format!("tracked layer {tracked_layer} missing at step {s}")))?;
        r2_series.push((*s, score.r2));
    }
    let mut notes = Vec::new();
    let mut trajectories = Vec::new();
    if per_step.len() >= 3 {
        let r2: Vec<f64> = r2_series.iter().map(|x| x.1).collect();
        let heads: Vec<HeadId> = per_step[0].1.heads.iter().map(|h| h.head).collect();
        for (i, head) in heads.iter().enumerate() {
            let attn: Vec<f64> = per_step.iter().map(|(_, o)| o.heads[i].mean).collect();
            match trajectory_regression(&r2, &attn) {
                Ok(fit) => trajectories.push(TermRow::from_fit(head.to_string(), "attention", &fit, 1)),
                Err(e) => notes.push(format!("trajectory {head}: {e}")),
            }
        }
        let p: Vec<f64> = trajectories.iter().map(|r| r.p).collect();
        if !p.is_empty() {
            for (row, q) in trajectories.iter_mut().zip(bh_fdr(&p)?) {
                row.p_fdr = Some(q);
            }
        }
    } else {
        notes.push(format!(
            "trajectory regressions need >= 3 steps, have {}",
            per_step.len()
        ));
    }
    Ok(Phase1Sweep {
        tracked_layer,
        selected_at,
        r2_series,
        trajectories,
        notes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneBackSweep {
    /// `(step, head, q)` over every finite test of the model.
    pub fdr: Vec<(u64, HeadId, f64)>,
}

pub fn oneback_sweep(per_step: &[(u64, &OneBackOutput)]) -> Result<OneBackSweep> {
    let mut keys = Vec::new();
    let mut p = Vec::new();
    for (s, out) in per_step {
        for r in &out.rows {
            if r.p.is_finite() {
                keys.push((*s, r.head));
                p.push(r.p);
            }
        }
    }
    if p.is_empty() {
        return Ok(OneBackSweep { fdr: Vec::new() });
    }
    let q = bh_fdr(&p)?;
    Ok(OneBackSweep {
        fdr: keys.into_iter().zip(q).map(|((s, h), q)| (s, h, q)).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeEntry {
    pub rank: usize,
    pub inputs: CompositeInputs,
    pub index: CompositeIndexRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeSweep {
    pub final_step: u64,
    pub rows: Vec<CompositeEntry>,
}

fn dataset_means(out: &AttentionOutput, name: &str) -> Result<BTreeMap<HeadId, f64>> {
    out.datasets
        .iter()
        .find(|d| d.dataset == name)
        .map(|d| d.heads.iter().map(|h| (h.head, h.mean)).collect())
        .ok_or_else(|| ProbeError::Argument(format!("no `{name}` items were scored at the final step")))
}

/// Composite index from the trajectory slopes and final-step stress results.
pub fn composite_sweep(
    final_step: u64,
    phase1: &Phase1Sweep,
    oneback: &OneBackOutput,
    positional: &AttentionOutput,
    pos: &AttentionOutput,
) -> Result<CompositeSweep> {
    let coef: BTreeMap<String, f64> = phase1
        .trajectories
        .iter()
        .map(|r| (r.subject.clone(), r.estimate))
        .collect();
    let noun = dataset_means(pos, "pos_noun")?;
    let verb = dataset_means(pos, "pos_verb")?;
    let posit = dataset_means(positional, "positional")?;
    let t: BTreeMap<HeadId, f64> = oneback.rows.iter().map(|r| (r.head, r.t)).collect();
    let inputs: Vec<CompositeInputs> = oneback
        .rows
        .iter()
        .map(|r| CompositeInputs {
            head: r.head,
            coef: coef.get(&r.head.to_string()).copied(),
            noun_attn: noun.get(&r.head).copied(),
            verb_attn: verb.get(&r.head).copied(),
            oneback_t: t.get(&r.head).copied(),
            positional_attn: posit.get(&r.head).copied(),
        })
        .collect();
    let index = composite_index(&inputs)?;
    let by_head: BTreeMap<HeadId, CompositeInputs> = inputs.iter().map(|i| (i.head, *i)).collect();
    Ok(CompositeSweep {
        final_step,
        rows: index
            .into_iter()
            .enumerate()
            .map(|(i, row)| CompositeEntry {
                rank: i + 1,
                inputs: by_head[&row.head],
                index: row,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSweep {
    pub effects: Vec<TermRow>,
    pub notes: Vec<String>,
}

/// Condition effect on ΔR² and fraction intact at the tracked layer, per
/// ablation kind; each fit pools all steps and head groups.
pub fn ablation_sweep(per_step: &[(u64, &AblationOutput)]) -> Result<AblationSweep> {
    let mut kinds = Vec::new();
    for (_, out) in per_step {
        for r in &out.records {
            let k = r.kind.to_string();
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
    }
    let mut effects = Vec::new();
    let mut notes = Vec::new();
    for kind in kinds {
        let mut delta: Vec<(f64, Condition, u64)> = Vec::new();
        let mut frac: Vec<(f64, Condition, u64)> = Vec::new();
        for (s, out) in per_step {
            for r in out.records.iter().filter(|r| r.kind.to_string() == kind) {
                if let Some(o) = r.outcomes.iter().find(|o| o.layer == out.tracked_layer) {
                    delta.push((o.delta_r2, r.condition, *s));
                    if let Some(f) = o.fraction_intact {
                        frac.push((f, r.condition, *s));
                    }
                }
            }
        }
        for (metric, rows) in [("delta_r2", &delta), ("fraction_intact", &frac)] {
            match condition_effect(rows, false) {
                Ok(fit) => effects.push(TermRow::from_fit(kind.clone(), &format!("condition:{metric}"), &fit, 1)),
                Err(e) => notes.push(format!("{kind} {metric}: {e}")),
            }
            match condition_effect(rows, true) {
                Ok(fit) => {
                    let last = fit.coefficients.len() - 1;
                    effects.push(TermRow::from_fit(
                        kind.clone(),
                        &format!("condition_x_log_step:{metric}"),
                        &fit,
                        last,
                    ));
                }
                Err(e) => notes.push(format!("{kind} {metric} interaction: {e}")),
            }
        }
    }
    Ok(AblationSweep { effects, notes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModnounSweep {
    pub terms: Vec<TermRow>,
    #[serde(with = "super::float")]
    pub delta_aic: f64,
}

/// Per-run series: `(run label, tracked-layer R² per step, modnoun per step)`.
pub fn modnoun_sweep(label: &str, runs: &[(String, &Phase1Sweep, Vec<(u64, &ModNounOutput)>)]) -> Result<ModnounSweep> {
    let (mut r2, mut lr, mut steps, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (run, p1, mn) in runs {
        let series: BTreeMap<u64, f64> = p1.r2_series.iter().copied().collect();
        for (s, out) in mn {
            if let Some(v) = series.get(s) {
                r2.push(*v);
                lr.push(out.mean_log_ratio);
                steps.push(*s);
                labels.push(run.clone());
            }
        }
    }
    let rep = logratio_r2_coupling(&r2, &lr, &steps, &labels)?;
    Ok(ModnounSweep {
        terms: vec![
            TermRow::from_fit(label.into(), "log_ratio", &rep.logratio_fit, 1),
            TermRow::from_fit(label.into(), "log_step", &rep.step_fit, 1),
        ],
        delta_aic: rep.delta_aic,
    })
}
