// SPDX-License-Identifier: MIT OR Apache-2.0

//! Long-format CSV tables. Row order is model, step, dataset row, layer,
//! head, so output bytes do not depend on scheduling.

use std::path::Path;

use super::config::{Analysis, RunConfig};
use super::manifest::{sha256_hex, write_atomic, TableRecord};
use super::run::ModelResults;
use super::sweep::{ModnounSweep, TermRow};
use crate::error::Result;

pub const LAYER_SCORES: &str = "layer_scores.csv";
pub const HEAD_SCORES: &str = "head_scores.csv";
pub const TESTS: &str = "tests.csv";
pub const REGRESSIONS: &str = "regressions.csv";
pub const COMPOSITE: &str = "composite.csv";
pub const ABLATION_OUTCOMES: &str = "ablation_outcomes.csv";
pub const MODNOUN: &str = "modnoun.csv";

/// The analysis whose absence leaves `table` unwritten.
pub fn producer(table: &str) -> Option<Analysis> {
    Some(match table {
        LAYER_SCORES | HEAD_SCORES => Analysis::Phase1,
        TESTS => Analysis::StressOneBack,
        REGRESSIONS => Analysis::Phase1,
        COMPOSITE => Analysis::Composite,
        ABLATION_OUTCOMES => Analysis::Ablation,
        MODNOUN => Analysis::Modnoun,
        _ => return None,
    })
}

/// Shortest round-trip form; empty for `None`.
pub fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

struct Table {
    name: &'static str,
    w: csv::Writer<Vec<u8>>,
    rows: usize,
}

impl Table {
    fn new(name: &'static str, header: &[&str]) -> Result<Self> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Self { name, w, rows: 0 })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        self.w.write_record(fields)?;
        self.rows += 1;
        Ok(())
    }

    fn finish(self, dir: &Path) -> Result<TableRecord> {
        let bytes = self
            .w
            .into_inner()
            .map_err(|e| crate::error::ProbeError::Argument(e.to_string()))?;
        write_atomic(&dir.join(self.name), &bytes)?;
        Ok(TableRecord {
            file: self.name.into(),
            rows: self.rows,
            sha256: sha256_hex(&bytes),
        })
    }
}

const TERM_HEADER: [&str; 12] = [
    "model",
    "analysis",
    "subject",
    "term",
    "estimate",
    "std_error",
    "t",
    "p",
    "p_fdr",
    "r2",
    "n",
    "aic",
];

fn term_fields(model: &str, analysis: &str, r: &TermRow) -> Vec<String> {
    vec![
        model.into(),
        analysis.into(),
        r.subject.clone(),
        r.term.clone(),
        num(r.estimate),
        num(r.std_error),
        num(r.t),
        num(r.p),
        opt(r.p_fdr),
        num(r.r2),
        r.n.to_string(),
        num(r.aic),
    ]
}

pub fn write_all(
    dir: &Path,
    cfg: &RunConfig,
    models: &[ModelResults],
    couplings: &[(String, ModnounSweep)],
) -> Result<Vec<TableRecord>> {
    let mut out = Vec::new();
    let phase1 = cfg.wants(Analysis::Phase1);
    let attention = phase1 || cfg.wants(Analysis::StressPositional) || cfg.wants(Analysis::StressPos);

    if phase1 {
        let mut t = Table::new(LAYER_SCORES, &["model", "step", "layer", "r2", "n"])?;
        for m in models {
            for (step, o) in &m.phase1 {
                for l in &o.layer_scores {
                    t.row(&[
                        m.id.clone(),
                        step.to_string(),
                        l.layer.to_string(),
                        num(l.r2),
                        l.n_pairs.to_string(),
                    ])?;
                }
            }
        }
        out.push(t.finish(dir)?);
    }

    if attention {
        let mut t = Table::new(
            HEAD_SCORES,
            &[
                "model",
                "step",
                "layer",
                "head",
                "dataset",
                "mean_attention",
                "stderr",
                "n",
            ],
        )?;
        for m in models {
            for step in &m.steps {
                let mut sets: Vec<(&str, &Vec<super::cells::HeadStat>)> = Vec::new();
                if let Some(o) = m.phase1.get(step) {
                    sets.push(("noun", &o.heads));
                }
                for src in [m.positional.get(step), m.pos.get(step)].into_iter().flatten() {
                    sets.extend(src.datasets.iter().map(|d| (d.dataset.as_str(), &d.heads)));
                }
                for (name, heads) in sets {
                    for h in heads {
                        t.row(&[
                            m.id.clone(),
                            step.to_string(),
                            h.head.layer.to_string(),
                            h.head.head.to_string(),
                            name.into(),
                            num(h.mean),
                            num(h.stderr),
                            h.n.to_string(),
                        ])?;
                    }
                }
            }
        }
        out.push(t.finish(dir)?);
    }

    if cfg.wants(Analysis::StressOneBack) {
        let mut t = Table::new(
            TESTS,
            &[
                "model",
                "step",
                "layer",
                "head",
                "t",
                "df",
                "p_raw",
                "p_fdr",
                "mean_diff",
                "n",
            ],
        )?;
        for m in models {
            let q = |s: u64, h| {
                m.oneback_sweep
                    .as_ref()
                    .and_then(|sw| sw.fdr.iter().find(|(fs, fh, _)| *fs == s && *fh == h).map(|x| x.2))
            };
            for (step, o) in &m.oneback {
                for r in &o.rows {
                    t.row(&[
                        m.id.clone(),
                        step.to_string(),
                        r.head.layer.to_string(),
                        r.head.head.to_string(),
                        num(r.t),
                        r.df.to_string(),
                        num(r.p),
                        opt(q(*step, r.head)),
                        num(r.mean_diff),
                        r.n.to_string(),
                    ])?;
                }
            }
        }
        out.push(t.finish(dir)?);
    }

    if phase1 || cfg.wants(Analysis::Ablation) || cfg.wants(Analysis::Modnoun) {
        let mut t = Table::new(REGRESSIONS, &TERM_HEADER)?;
        for m in models {
            if let Some(p) = &m.phase1_sweep {
                for r in &p.trajectories {
                    t.row(&term_fields(&m.id, "trajectory", r))?;
                }
            }
            if let Some(a) = &m.ablation_sweep {
                for r in &a.effects {
                    t.row(&term_fields(&m.id, "ablation", r))?;
                }
            }
        }
        for (label, c) in couplings {
            for r in &c.terms {
                t.row(&term_fields(label, "modnoun_coupling", r))?;
            }
        }
        out.push(t.finish(dir)?);
    }

    if cfg.wants(Analysis::Composite) {
        let mut t = Table::new(
            COMPOSITE,
            &[
                "model",
                "step",
                "rank",
                "layer",
                "head",
                "coef",
                "noun_attn",
                "verb_attn",
                "oneback_t",
                "positional_attn",
                "z_coef",
                "z_noun_attn",
                "z_verb_attn",
                "z_oneback_t",
                "z_positional_attn",
                "composite",
            ],
        )?;
        for m in models {
            let Some(c) = &m.composite else { continue };
            for e in &c.rows {
                let (i, z) = (&e.inputs, &e.index);
                t.row(&[
                    m.id.clone(),
                    c.final_step.to_string(),
                    e.rank.to_string(),
                    z.head.layer.to_string(),
                    z.head.head.to_string(),
                    opt(i.coef),
                    opt(i.noun_attn),
                    opt(i.verb_attn),
                    opt(i.oneback_t),
                    opt(i.positional_attn),
                    num(z.z_coef),
                    num(z.z_noun_attn),
                    num(z.z_verb_attn),
                    num(z.z_oneback_t),
                    num(z.z_positional_attn),
                    num(z.composite),
                ])?;
            }
        }
        out.push(t.finish(dir)?);
    }

    if cfg.wants(Analysis::Ablation) {
        let mut t = Table::new(
            ABLATION_OUTCOMES,
            &[
                "model",
                "step",
                "kind",
                "condition",
                "heads",
                "layer",
                "tracked",
                "r2_intact",
                "r2_ablated",
                "delta_r2",
                "fraction_intact",
            ],
        )?;
        for m in models {
            for (step, o) in &m.ablation {
                for r in &o.records {
                    let heads = r
                        .heads
                        .iter()
                        .map(|h| format!("{}.{}", h.layer, h.head))
                        .collect::<Vec<_>>()
                        .join("+");
                    for x in &r.outcomes {
                        t.row(&[
                            m.id.clone(),
                            step.to_string(),
                            r.kind.to_string(),
                            r.condition.to_string(),
                            heads.clone(),
                            x.layer.to_string(),
                            (x.layer == o.tracked_layer).to_string(),
                            num(x.r2_intact),
                            num(x.r2_ablated),
                            num(x.delta_r2),
                            opt(x.fraction_intact),
                        ])?;
                    }
                }
            }
        }
        out.push(t.finish(dir)?);
    }

    if cfg.wants(Analysis::Modnoun) {
        let mut t = Table::new(MODNOUN, &["model", "step", "item_id", "log_ratio"])?;
        for m in models {
            for (step, o) in &m.modnoun {
                for (id, v) in &o.items {
                    t.row(&[m.id.clone(), step.to_string(), id.clone(), num(*v)])?;
                }
            }
        }
        out.push(t.finish(dir)?);
    }
    Ok(out)
}
