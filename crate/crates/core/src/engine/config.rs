// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};

/// Architecture hyperparameters of a GPT-NeoX-style decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub intermediate_size: usize,
    pub rotary_pct: f64,
    pub rotary_base: f64,
    pub layer_norm_eps: f64,
    pub max_positions: usize,
    pub parallel_residual: bool,
}

/// On-disk `config.json` keys.
#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct ConfigDocument {
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    #[serde(default)]
    pub rotary_pct: Option<f64>,
    #[serde(default)]
    pub rotary_emb_base: Option<f64>,
    /// Newer writers nest the rotary settings here instead.
    #[serde(default, skip_serializing)]
    pub rope_parameters: Option<RopeParameters>,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub max_position_embeddings: usize,
    #[serde(default = "default_parallel")]
    pub use_parallel_residual: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct RopeParameters {
    pub partial_rotary_factor: Option<f64>,
    pub rope_theta: Option<f64>,
}

fn default_rotary_pct() -> f64 {
    0.25
}
fn default_rotary_base() -> f64 {
    10_000.0
}
fn default_eps() -> f64 {
    1e-5
}
fn default_parallel() -> bool {
    true
}

impl ModelConfig {
    /// Number of leading dimensions of each head that receive rotary embedding.
    pub fn rotary_dims(&self) -> usize {
        (self.rotary_pct * self.d_head as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("intermediate_size", self.intermediate_size),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ProbeError::Argument(format!("config: {name} must be >= 1")));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(ProbeError::Argument(format!(
                "config: n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        if !(self.rotary_pct > 0.0 && self.rotary_pct <= 1.0) {
            return Err(ProbeError::Argument(format!(
                "config: rotary_pct {} outside (0, 1]",
                self.rotary_pct
            )));
        }
        if self.rotary_dims() % 2 != 0 {
            return Err(ProbeError::Argument(format!(
                "config: rotary dims {} must be even",
                self.rotary_dims()
            )));
        }
        if !(self.rotary_base > 0.0) || !(self.layer_norm_eps > 0.0) {
            return Err(ProbeError::Argument(
                "config: rotary_base and layer_norm_eps must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, String> {
        let doc: ConfigDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if doc.num_attention_heads == 0 {
            return Err("num_attention_heads must be >= 1".into());
        }
        let rope = doc.rope_parameters.as_ref();
        let rotary_pct = doc
            .rotary_pct
            .or_else(|| rope.and_then(|r| r.partial_rotary_factor))
            .unwrap_or_else(default_rotary_pct);
        let rotary_base = doc
            .rotary_emb_base
            .or_else(|| rope.and_then(|r| r.rope_theta))
            .unwrap_or_else(default_rotary_base);
        let cfg = ModelConfig {
            n_layers: doc.num_hidden_layers,
            n_heads: doc.num_attention_heads,
            d_model: doc.hidden_size,
            d_head: doc.hidden_size / doc.num_attention_heads,
            vocab_size: doc.vocab_size,
            intermediate_size: doc.intermediate_size,
            rotary_pct,
            rotary_base,
            layer_norm_eps: doc.layer_norm_eps,
            max_positions: doc.max_position_embeddings,
            parallel_residual: doc.use_parallel_residual,
        };
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::load(path, e.to_string()))?;
        Self::from_json_str(&text).map_err(|reason| ProbeError::load(path, reason))
    }

    pub fn to_json_string(&self) -> String {
        let doc = ConfigDocument {
            num_hidden_layers: self.n_layers,
            num_attention_heads: self.n_heads,
            hidden_size: self.d_model,
            intermediate_size: self.intermediate_size,
            vocab_size: self.vocab_size,
            rotary_pct: Some(self.rotary_pct),
            rotary_emb_base: Some(self.rotary_base),
            rope_parameters: None,
            layer_norm_eps: self.layer_norm_eps,
            max_position_embeddings: self.max_positions,
            use_parallel_residual: self.parallel_residual,
        };
        serde_json::to_string_pretty(&doc).expect("config serializes")
    }
}
