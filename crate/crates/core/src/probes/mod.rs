// SPDX-License-Identifier: MIT OR Apache-2.0

//! Layer-wise disambiguation scores, per-head attention probes, stress
//! tests, the composite index and the modifier-noun log-ratio task.
//!
//! Head coordinates are 1-based in both layer and head, so `(3, 2)` is the
//! second head of the third block. Hidden-state layers are 0-based with
//! layer 0 the embedding output.

pub mod composite;
pub mod distance;
pub mod heads;
pub mod modnoun;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::ModelConfig;
use crate::error::{ProbeError, Result};

pub use composite::{composite_index, CompositeIndexRow, CompositeInputs};
pub use distance::{layer_r2, layer_scores, select_tracked_layer, target_distance, LayerScore};
pub use heads::{
    head_attention_score, one_back_score, oneback_subtraction_test, trajectory_regression, AttentionScore,
    CueAggregation, HeadTrajectory,
};
pub use modnoun::{logratio_r2_coupling, modnoun_log_ratio, CouplingReport};

/// A 1-based (layer, head) coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub const fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if (1..=cfg.n_layers).contains(&self.layer) && (1..=cfg.n_heads).contains(&self.head) {
            Ok(())
        } else {
            Err(ProbeError::Argument(format!(
                "head {self} outside {} layers x {} heads",
                cfg.n_layers, cfg.n_heads
            )))
        }
    }

    /// 0-based head index within its block.
    pub fn head_index(&self) -> usize {
        self.head - 1
    }
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.layer, self.head)
    }
}

impl FromStr for HeadId {
    type Err = ProbeError;

    /// Accepts `(3,2)`, `3,2` and `3:2`.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        let mut parts = inner.split([',', ':']).map(str::trim);
        let parse = |p: Option<&str>| p.and_then(|v| v.parse::<usize>().ok()).filter(|v| *v >= 1);
        match (parse(parts.next()), parse(parts.next()), parts.next()) {
            (Some(layer), Some(head), None) => Ok(Self { layer, head }),
            _ => Err(ProbeError::Argument(format!("cannot parse head id `{s}`"))),
        }
    }
}

/// Every head of the model in (layer, head) order.
pub fn all_heads(cfg: &ModelConfig) -> Vec<HeadId> {
    (1..=cfg.n_layers)
        .flat_map(|l| (1..=cfg.n_heads).map(move |h| HeadId::new(l, h)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_id_text_forms() {
        for s in ["(3,2)", "3,2", "3:2", " ( 3 , 2 ) "] {
            assert_eq!(s.parse::<HeadId>().unwrap(), HeadId::new(3, 2));
        }
        assert!("(0,1)".parse::<HeadId>().is_err());
        assert!("3".parse::<HeadId>().is_err());
        assert_eq!(HeadId::new(24, 8).to_string(), "(24,8)");
    }
}
