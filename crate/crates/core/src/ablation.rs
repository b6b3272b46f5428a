// SPDX-License-Identifier: MIT OR Apache-2.0

//! Query/key weight ablations and their effect on layer-wise R².

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{ModelConfig, ModelWeights, QkvPart};
use crate::error::{ProbeError, Result};
use crate::probes::distance::layer_scores;
use crate::probes::{CompositeIndexRow, HeadId};
use crate::stats::{self, RegressionResult};
use crate::stimuli::AlignedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "source_step")]
pub enum AblationKind {
    /// Q and K weights and biases set to zero.
    Zero,
    /// Q and K weights and biases copied from the checkpoint at this step.
    CopyFromStep(u64),
}

impl fmt::Display for AblationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Zero => f.write_str("zero"),
            Self::CopyFromStep(s) => write!(f, "copy_step{s}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Target,
    Baseline,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Target => "target",
            Self::Baseline => "baseline",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub kind: AblationKind,
    pub targets: Vec<HeadId>,
    pub label: Condition,
}

impl AblationSpec {
    /// Heads joined as `3.1+3.2`.
    pub fn heads_label(&self) -> String {
        self.targets
            .iter()
            .map(|h| format!("{}.{}", h.layer, h.head))
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Copy of `weights` with the Q/K slices of every target head replaced.
/// Everything else, V and the output projection included, is untouched.
pub fn apply_ablation(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    spec: &AblationSpec,
    source: Option<&ModelWeights>,
) -> Result<ModelWeights> {
    if spec.targets.is_empty() {
        return Err(ProbeError::Argument("ablation spec has no target heads".into()));
    }
    for h in &spec.targets {
        h.check(cfg)?;
    }
    let source = match (spec.kind, source) {
        (AblationKind::Zero, None) => None,
        (AblationKind::Zero, Some(_)) => {
            return Err(ProbeError::Argument("zero ablation takes no source weights".into()))
        }
        (AblationKind::CopyFromStep(s), None) => {
            return Err(ProbeError::Argument(format!(
                "copy ablation needs the step {s} weights"
            )))
        }
        (AblationKind::CopyFromStep(_), Some(src)) => {
            check_same_shapes(weights, src)?;
            Some(src)
        }
    };
    let mut out = weights.clone();
    let d_head = cfg.d_head;
    for h in &spec.targets {
        let li = h.layer - 1;
        for part in [QkvPart::Query, QkvPart::Key] {
            let layer = &mut out.layers[li];
            match source {
                None => {
                    layer.head_weight_mut(d_head, h.head_index(), part).fill(0.0);
                    layer.head_bias_mut(d_head, h.head_index(), part).fill(0.0);
                }
                Some(src) => {
                    let s = &src.layers[li];
                    layer
                        .head_weight_mut(d_head, h.head_index(), part)
                        .copy_from_slice(s.head_weight(d_head, h.head_index(), part));
                    layer
                        .head_bias_mut(d_head, h.head_index(), part)
                        .copy_from_slice(s.head_bias(d_head, h.head_index(), part));
                }
            }
        }
    }
    Ok(out)
}

fn check_same_shapes(a: &ModelWeights, b: &ModelWeights) -> Result<()> {
    let ta = a.named_tensors();
    let tb = b.named_tensors();
    if ta.len() != tb.len() {
        return Err(ProbeError::Argument(format!(
            "source checkpoint has {} tensors, target has {}",
            tb.len(),
            ta.len()
        )));
    }
    for ((name, sa, _), (_, sb, _)) in ta.iter().zip(&tb) {
        if sa != sb {
            return Err(ProbeError::Shape {
                tensor: name.clone(),
                expected: sa.clone(),
                actual: sb.clone(),
            });
        }
    }
    Ok(())
}

/// Effect of one ablation at one (step, layer).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub step: u64,
    pub layer: usize,
    pub r2_intact: f64,
    pub r2_ablated: f64,
    /// `r2_intact - r2_ablated`
    pub delta_r2: f64,
    /// `r2_ablated / r2_intact`; `None` when `r2_intact == 0`.
    pub fraction_intact: Option<f64>,
}

impl AblationOutcome {
    pub fn new(step: u64, layer: usize, r2_intact: f64, r2_ablated: f64) -> Self {
        Self {
            step,
            layer,
            r2_intact,
            r2_ablated,
            delta_r2: r2_intact - r2_ablated,
            fraction_intact: (r2_intact != 0.0).then(|| r2_ablated / r2_intact),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEvaluation {
    pub per_layer: Vec<AblationOutcome>,
    pub mean_delta_r2: f64,
    /// Mean over layers with a defined fraction.
    pub mean_fraction_intact: Option<f64>,
}

/// Per-layer R² of the ablated model against the intact one.
///
/// `intact_r2` is indexed by hidden layer; computed here when absent.
pub fn evaluate_ablated(
    cfg: &ModelConfig,
    weights_intact: &ModelWeights,
    spec: &AblationSpec,
    source: Option<&ModelWeights>,
    stimuli: &[AlignedPair],
    intact_r2: Option<&[f64]>,
    step: u64,
) -> Result<AblationEvaluation> {
    let intact: Vec<f64> = match intact_r2 {
        Some(v) if v.len() == cfg.n_layers + 1 => v.to_vec(),
        Some(v) => {
            return Err(ProbeError::Argument(format!(
                "intact R² has {} layers, model has {}",
                v.len(),
                cfg.n_layers + 1
            )))
        }
        None => layer_scores(cfg, weights_intact, stimuli, step)?
            .iter()
            .map(|s| s.r2)
            .collect(),
    };
    let ablated_weights = apply_ablation(cfg, weights_intact, spec, source)?;
    let ablated = layer_scores(cfg, &ablated_weights, stimuli, step)?;
    let per_layer: Vec<AblationOutcome> = ablated
        .iter()
        .map(|s| {
            let o = AblationOutcome::new(step, s.layer, intact[s.layer], s.r2);
            if o.fraction_intact.is_none() {
                log::warn!("step {step} layer {}: intact R² is 0, fraction undefined", s.layer);
            }
            o
        })
        .collect();
    Ok(summarize(per_layer))
}

pub fn summarize(per_layer: Vec<AblationOutcome>) -> AblationEvaluation {
    let deltas: Vec<f64> = per_layer.iter().map(|o| o.delta_r2).collect();
    let fractions: Vec<f64> = per_layer.iter().filter_map(|o| o.fraction_intact).collect();
    AblationEvaluation {
        mean_delta_r2: stats::mean(&deltas),
        mean_fraction_intact: (!fractions.is_empty()).then(|| stats::mean(&fractions)),
        per_layer,
    }
}

/// OLS of `value` on a target indicator and `log10(step + 1)`; the slope is
/// the condition coefficient. With `interaction`, the product term is the
/// last coefficient.
pub fn condition_effect(outcomes: &[(f64, Condition, u64)], interaction: bool) -> Result<RegressionResult> {
    let has = |c: Condition| outcomes.iter().any(|o| o.1 == c);
    if !has(Condition::Target) || !has(Condition::Baseline) {
        return Err(ProbeError::Argument(
            "condition effect needs both target and baseline rows".into(),
        ));
    }
    let mut steps: Vec<u64> = outcomes.iter().map(|o| o.2).collect();
    steps.sort_unstable();
    steps.dedup();
    if steps.len() < 3 {
        return Err(ProbeError::Argument(format!(
            "condition effect needs >= 3 steps, got {}",
            steps.len()
        )));
    }
    let y: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let ind: Vec<f64> = outcomes.iter().map(|o| f64::from(o.1 == Condition::Target)).collect();
    let log_step: Vec<f64> = outcomes.iter().map(|o| (o.2 as f64 + 1.0).log10()).collect();
    let mut extra = vec![log_step.clone()];
    if interaction {
        extra.push(ind.iter().zip(&log_step).map(|(a, b)| a * b).collect());
    }
    stats::ols(&ind, &y, Some(&extra))
}

/// Target and baseline head groups; each group is ablated together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSets {
    pub targets: Vec<Vec<HeadId>>,
    pub baselines: Vec<Vec<HeadId>>,
}

pub const PYTHIA_410M_TARGETS: [HeadId; 6] = [
    HeadId::new(1, 14),
    HeadId::new(4, 7),
    HeadId::new(1, 3),
    HeadId::new(2, 3),
    HeadId::new(6, 10),
    HeadId::new(1, 13),
];

/// Head groups for a known model, or `user` verbatim when given.
///
/// For pythia-410m each target gets its own control: the same-layer
/// non-target head with the lowest composite index not already used,
/// ties to the lower head index.
pub fn default_head_sets(
    model: &str,
    composite: Option<&[CompositeIndexRow]>,
    user: Option<&HeadSets>,
) -> Result<HeadSets> {
    if let Some(u) = user {
        return Ok(u.clone());
    }
    let model = model.to_ascii_lowercase();
    let name = model.rsplit('/').next().unwrap_or(&model);
    let h = HeadId::new;
    match name {
        n if n.starts_with("pythia-14m") => Ok(HeadSets {
            targets: vec![vec![h(3, 1)], vec![h(3, 2)], vec![h(3, 1), h(3, 2)]],
            baselines: vec![vec![h(3, 3)], vec![h(3, 4)], vec![h(3, 3), h(3, 4)]],
        }),
        n if n.starts_with("pythia-410m") => {
            let composite = composite
                .ok_or_else(|| ProbeError::Argument("pythia-410m baselines need the composite index".into()))?;
            let mut used: Vec<HeadId> = Vec::new();
            let mut baselines = Vec::new();
            for t in PYTHIA_410M_TARGETS {
                let best = composite
                    .iter()
                    .filter(|r| r.head.layer == t.layer)
                    .filter(|r| !PYTHIA_410M_TARGETS.contains(&r.head) && !used.contains(&r.head))
                    .min_by(|a, b| a.composite.total_cmp(&b.composite).then(a.head.head.cmp(&b.head.head)))
                    .ok_or_else(|| ProbeError::Argument(format!("no baseline candidate in layer {}", t.layer)))?;
                used.push(best.head);
                baselines.push(vec![best.head]);
            }
            Ok(HeadSets {
                targets: PYTHIA_410M_TARGETS.iter().map(|t| vec![*t]).collect(),
                baselines,
            })
        }
        other => Err(ProbeError::Argument(format!(
            "no default head sets for `{other}`; supply targets and baselines in the config"
        ))),
    }
}

/// Expand head sets into specs of one kind.
pub fn specs_for(sets: &HeadSets, kind: AblationKind) -> Vec<AblationSpec> {
    let tag = |groups: &[Vec<HeadId>], label| {
        groups
            .iter()
            .map(move |g| AblationSpec {
                kind,
                targets: g.clone(),
                label,
            })
            .collect::<Vec<_>>()
    };
    let mut out = tag(&sets.targets, Condition::Target);
    out.extend(tag(&sets.baselines, Condition::Baseline));
    out
}
