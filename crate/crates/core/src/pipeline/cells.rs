// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-(model, step) computations. Each returns a serializable output that
//! is written to one cell file; tables are assembled from these files.

use serde::{Deserialize, Serialize};

use crate::ablation::{evaluate_ablated, AblationKind, AblationOutcome, AblationSpec, Condition};
use crate::engine::{forward, CaptureSpec, Checkpoint, ForwardTrace, ModelConfig};
use crate::error::{ProbeError, Result};
use crate::parallel;
use crate::probes::distance::{layer_scores_from_distances, target_distance, LayerScore};
use crate::probes::{
    all_heads, head_attention_score, modnoun_log_ratio, one_back_score, oneback_subtraction_test, CueAggregation,
    HeadId,
};
use crate::stats;
use crate::stimuli::{
    align_pair, align_spans, make_reversed_modnoun, AlignedPair, AlignedSentence, ModNounItem, PerturbationKind,
    PerturbedStimulus, StimulusPair,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadStat {
    pub head: HeadId,
    #[serde(with = "super::float")]
    pub mean: f64,
    #[serde(with = "super::float")]
    pub stderr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeads {
    pub dataset: String,
    pub heads: Vec<HeadStat>,
}

/// Stimulus ids dropped from a cell, with the reason.
pub type Skipped = Vec<(String, String)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Output {
    pub layer_scores: Vec<LayerScore>,
    /// Target-to-cue attention over both sentences of every noun pair.
    pub heads: Vec<HeadStat>,
    pub skipped: Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneBackRow {
    pub head: HeadId,
    /// `NaN` when every difference is the same nonzero value.
    #[serde(with = "super::float")]
    pub t: f64,
    pub df: usize,
    #[serde(with = "super::float")]
    pub p: f64,
    #[serde(with = "super::float")]
    pub mean_diff: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneBackOutput {
    pub rows: Vec<OneBackRow>,
    pub skipped: Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub datasets: Vec<DatasetHeads>,
    pub skipped: Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModNounOutput {
    /// `(item_id, log ratio)` in file order.
    pub items: Vec<(String, f64)>,
    #[serde(with = "super::float")]
    pub mean_log_ratio: f64,
    pub skipped: Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub kind: AblationKind,
    pub condition: Condition,
    pub heads: Vec<HeadId>,
    pub outcomes: Vec<AblationOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub tracked_layer: usize,
    /// Step whose weights the copy ablation used, when it ran.
    pub copy_source_step: Option<u64>,
    pub records: Vec<AblationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "analysis", rename_all = "snake_case")]
pub enum CellOutput {
    Phase1(Phase1Output),
    #[serde(rename = "stress_1back")]
    OneBack(OneBackOutput),
    StressPositional(AttentionOutput),
    StressPos(AttentionOutput),
    Modnoun(ModNounOutput),
    Ablation(AblationOutput),
}

/// Aligned noun pairs plus the ids that failed to align.
pub fn align_nouns(ck: &Checkpoint, nouns: &[StimulusPair]) -> (Vec<AlignedPair>, Skipped) {
    let mut kept = Vec::with_capacity(nouns.len());
    let mut skipped = Vec::new();
    for p in nouns {
        match align_pair(&ck.tokenizer, p) {
            Ok(a) => kept.push(a),
            Err(e) => {
                log::warn!("pair {}: {e}", p.pair_id);
                skipped.push((p.pair_id.clone(), e.to_string()));
            }
        }
    }
    (kept, skipped)
}

fn cue_scores(trace: &ForwardTrace, s: &AlignedSentence, heads: &[HeadId], agg: CueAggregation) -> Result<Vec<f64>> {
    heads
        .iter()
        .map(|h| head_attention_score(trace, &s.target_span, &s.cue_span, *h, agg).map(|a| a.score))
        .collect()
}

fn one_back_scores(trace: &ForwardTrace, heads: &[HeadId]) -> Result<Vec<f64>> {
    heads.iter().map(|h| one_back_score(trace, *h)).collect()
}

/// Everything the noun-pair analyses need from one pass over the pairs.
pub struct NounSweep {
    /// `[pair][hidden layer]`; empty without hidden capture.
    pub distances: Vec<Vec<f64>>,
    pub relatedness: Vec<f64>,
    /// `[sentence][head]`, sentences ordered a0, b0, a1, b1, ...
    pub cue: Vec<Vec<f64>>,
    pub one_back: Vec<Vec<f64>>,
}

pub fn noun_sweep(
    cfg: &ModelConfig,
    ck: &Checkpoint,
    pairs: &[AlignedPair],
    agg: CueAggregation,
    hidden: bool,
) -> Result<NounSweep> {
    let heads = all_heads(cfg);
    let capture = if hidden {
        CaptureSpec::hidden_and_attention()
    } else {
        CaptureSpec::attention_only()
    };
    let per_pair = parallel::try_map(pairs, |p| -> Result<_> {
        let ta = forward(cfg, &ck.weights, &p.a.encoded, &capture)?;
        let tb = forward(cfg, &ck.weights, &p.b.encoded, &capture)?;
        let dist = if hidden {
            (0..=cfg.n_layers)
                .map(|l| target_distance(&ta, &tb, &p.a.target_span, &p.b.target_span, l))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let cue = [cue_scores(&ta, &p.a, &heads, agg)?, cue_scores(&tb, &p.b, &heads, agg)?];
        let back = [one_back_scores(&ta, &heads)?, one_back_scores(&tb, &heads)?];
        Ok((dist, cue, back))
    })?;
    let mut sweep = NounSweep {
        distances: Vec::with_capacity(pairs.len()),
        relatedness: pairs.iter().map(|p| p.relatedness).collect(),
        cue: Vec::with_capacity(2 * pairs.len()),
        one_back: Vec::with_capacity(2 * pairs.len()),
    };
    for (dist, cue, back) in per_pair {
        if hidden {
            sweep.distances.push(dist);
        }
        sweep.cue.extend(cue);
        sweep.one_back.extend(back);
    }
    Ok(sweep)
}

/// Mean and standard error per head of a `[item][head]` table.
pub fn head_stats(heads: &[HeadId], table: &[Vec<f64>]) -> Vec<HeadStat> {
    heads
        .iter()
        .enumerate()
        .map(|(i, h)| {
            let col: Vec<f64> = table.iter().map(|row| row[i]).collect();
            HeadStat {
                head: *h,
                mean: if col.is_empty() { f64::NAN } else { stats::mean(&col) },
                stderr: stats::std_error(&col),
                n: col.len(),
            }
        })
        .collect()
}

pub fn phase1(cfg: &ModelConfig, sweep: &NounSweep, step: u64, skipped: Skipped) -> Result<Phase1Output> {
    if sweep.relatedness.len() < 3 {
        return Err(ProbeError::Argument(format!(
            "phase1 needs >= 3 aligned noun pairs, got {}",
            sweep.relatedness.len()
        )));
    }
    Ok(Phase1Output {
        layer_scores: layer_scores_from_distances(&sweep.distances, &sweep.relatedness, step)?,
        heads: head_stats(&all_heads(cfg), &sweep.cue),
        skipped,
    })
}

pub fn one_back(cfg: &ModelConfig, sweep: &NounSweep, skipped: Skipped) -> Result<OneBackOutput> {
    let rows = all_heads(cfg)
        .into_iter()
        .enumerate()
        .map(|(i, head)| {
            let per: Vec<(f64, f64)> = sweep
                .cue
                .iter()
                .zip(&sweep.one_back)
                .map(|(c, b)| (c[i], b[i]))
                .collect();
            let n = per.len();
            match oneback_subtraction_test(&per) {
                Ok(t) => Ok(OneBackRow {
                    head,
                    t: t.t,
                    df: t.df,
                    p: t.p_one_tailed,
                    mean_diff: t.mean_diff,
                    n,
                }),
                Err(ProbeError::DegenerateTest(msg)) => {
                    log::warn!("1-back test for {head}: {msg}");
                    let d: Vec<f64> = per.iter().map(|(c, b)| c - b).collect();
                    Ok(OneBackRow {
                        head,
                        t: f64::NAN,
                        df: n.saturating_sub(1),
                        p: f64::NAN,
                        mean_diff: stats::mean(&d),
                        n,
                    })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OneBackOutput { rows, skipped })
}

/// Target-to-cue attention per head over perturbed items, grouped by the
/// dataset name `group` assigns to each item.
pub fn perturbed_attention(
    cfg: &ModelConfig,
    ck: &Checkpoint,
    items: &[PerturbedStimulus],
    agg: CueAggregation,
    group: impl Fn(&PerturbedStimulus) -> &'static str,
) -> Result<AttentionOutput> {
    let heads = all_heads(cfg);
    let capture = CaptureSpec::attention_only();
    let scored = parallel::map(items, |it| -> std::result::Result<Vec<f64>, String> {
        let aligned = align_spans(&ck.tokenizer, &it.sentence, &it.target, &it.cue).map_err(|e| e.to_string())?;
        let trace = forward(cfg, &ck.weights, &aligned.encoded, &capture).map_err(|e| e.to_string())?;
        cue_scores(&trace, &aligned, &heads, agg).map_err(|e| e.to_string())
    });
    let mut names: Vec<&'static str> = Vec::new();
    let mut tables: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut skipped = Vec::new();
    for (it, s) in items.iter().zip(scored) {
        match s {
            Ok(row) => {
                let g = group(it);
                let idx = names.iter().position(|n| *n == g).unwrap_or_else(|| {
                    names.push(g);
                    tables.push(Vec::new());
                    names.len() - 1
                });
                tables[idx].push(row);
            }
            Err(reason) => {
                log::warn!("{} ({}): {reason}", it.base_pair_id, it.kind.as_str());
                skipped.push((it.base_pair_id.clone(), reason));
            }
        }
    }
    let mut datasets: Vec<DatasetHeads> = names
        .into_iter()
        .zip(tables)
        .map(|(name, t)| DatasetHeads {
            dataset: name.to_string(),
            heads: head_stats(&heads, &t),
        })
        .collect();
    datasets.sort_by(|a, b| a.dataset.cmp(&b.dataset));
    Ok(AttentionOutput { datasets, skipped })
}

pub fn pos_group(it: &PerturbedStimulus) -> &'static str {
    match it.kind {
        PerturbationKind::Positional => "positional",
        PerturbationKind::PosNounTarget => "pos_noun",
        PerturbationKind::PosVerbTarget => "pos_verb",
    }
}

pub fn modnoun(cfg: &ModelConfig, ck: &Checkpoint, items: &[ModNounItem]) -> Result<ModNounOutput> {
    let ratios = parallel::map(items, |it| -> std::result::Result<f64, String> {
        let rev = make_reversed_modnoun(&it.sentence, &it.cue, &it.target).map_err(|e| e.to_string())?;
        let a = ck.tokenizer.encode(&it.sentence).map_err(|e| e.to_string())?;
        let b = ck.tokenizer.encode(&rev).map_err(|e| e.to_string())?;
        modnoun_log_ratio(cfg, &ck.weights, &a, &b).map_err(|e| e.to_string())
    });
    let mut out = ModNounOutput {
        items: Vec::new(),
        mean_log_ratio: f64::NAN,
        skipped: Vec::new(),
    };
    for (it, r) in items.iter().zip(ratios) {
        match r {
            Ok(v) => out.items.push((it.item_id.clone(), v)),
            Err(reason) => out.skipped.push((it.item_id.clone(), reason)),
        }
    }
    if out.items.is_empty() {
        return Err(ProbeError::Argument("no modifier-noun item could be scored".into()));
    }
    let vals: Vec<f64> = out.items.iter().map(|i| i.1).collect();
    out.mean_log_ratio = stats::mean(&vals);
    Ok(out)
}

pub fn ablation(
    cfg: &ModelConfig,
    ck: &Checkpoint,
    source: Option<(u64, &Checkpoint)>,
    pairs: &[AlignedPair],
    intact_r2: &[f64],
    specs: &[AblationSpec],
    tracked_layer: usize,
    step: u64,
) -> Result<AblationOutput> {
    let mut records = Vec::with_capacity(specs.len());
    for spec in specs {
        let src = match spec.kind {
            AblationKind::Zero => None,
            AblationKind::CopyFromStep(_) => Some(
                &source
                    .ok_or_else(|| ProbeError::Argument("copy ablation without a source checkpoint".into()))?
                    .1
                    .weights,
            ),
        };
        let eval = evaluate_ablated(cfg, &ck.weights, spec, src, pairs, Some(intact_r2), step)?;
        records.push(AblationRecord {
            kind: spec.kind,
            condition: spec.label,
            heads: spec.targets.clone(),
            outcomes: eval.per_layer,
        });
    }
    Ok(AblationOutput {
        tracked_layer,
        copy_source_step: source.map(|s| s.0),
        records,
    })
}
