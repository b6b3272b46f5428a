// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::HeadId;
use crate::error::{ProbeError, Result};
use crate::stats;

/// Per-head raw variables; `None` marks a missing measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeInputs {
    pub head: HeadId,
    pub coef: Option<f64>,
    pub noun_attn: Option<f64>,
    pub verb_attn: Option<f64>,
    pub oneback_t: Option<f64>,
    pub positional_attn: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeIndexRow {
    pub head: HeadId,
    pub z_coef: f64,
    pub z_noun_attn: f64,
    pub z_verb_attn: f64,
    pub z_oneback_t: f64,
    pub z_positional_attn: f64,
    pub composite: f64,
}

const NAMES: [&str; 5] = ["coef", "noun_attn", "verb_attn", "oneback_t", "positional_attn"];

/// z-score each variable across heads, average per head, sort descending.
/// Ties keep (layer, head) order.
pub fn composite_index(inputs: &[CompositeInputs]) -> Result<Vec<CompositeIndexRow>> {
    let mut columns: [Vec<f64>; 5] = Default::default();
    for row in inputs {
        let vals = [
            row.coef,
            row.noun_attn,
            row.verb_attn,
            row.oneback_t,
            row.positional_attn,
        ];
        for ((col, v), name) in columns.iter_mut().zip(vals).zip(NAMES) {
            match v {
                Some(v) if v.is_finite() => col.push(v),
                _ => {
                    return Err(ProbeError::Argument(format!(
                        "composite: head {} has no usable {name}",
                        row.head
                    )))
                }
            }
        }
    }
    let z = columns
        .iter()
        .zip(NAMES)
        .map(|(c, name)| {
            stats::zscore(c).map_err(|e| match e {
                ProbeError::DegenerateRegressor(_) => {
                    ProbeError::DegenerateRegressor(format!("composite: {name} has zero variance across heads"))
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<CompositeIndexRow> = inputs
        .iter()
        .enumerate()
        .map(|(i, inp)| {
            let parts = [z[0][i], z[1][i], z[2][i], z[3][i], z[4][i]];
            CompositeIndexRow {
                head: inp.head,
                z_coef: parts[0],
                z_noun_attn: parts[1],
                z_verb_attn: parts[2],
                z_oneback_t: parts[3],
                z_positional_attn: parts[4],
                composite: parts.iter().sum::<f64>() / 5.0,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.composite.total_cmp(&a.composite).then(a.head.cmp(&b.head)));
    Ok(rows)
}
