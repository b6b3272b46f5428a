// SPDX-License-Identifier: MIT OR Apache-2.0

//! GPT-NeoX checkpoint loading and the instrumented forward pass.

pub mod config;
pub mod forward;
pub mod reference;
pub mod safetensors;
pub mod synthetic;
pub mod tokenizer;
pub mod weights;

use std::path::{Path, PathBuf};

pub use config::ModelConfig;
pub use forward::{forward, forward_ids, sentence_log_prob, AttentionPattern, CaptureSpec, ForwardTrace};
pub use tokenizer::{EncodedSentence, Tokenizer};
pub use weights::{Matrix, ModelWeights, QkvPart};

use crate::error::Result;

/// A loaded checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub config: ModelConfig,
    pub weights: ModelWeights,
    pub tokenizer: Tokenizer,
}

/// Load `config.json`, `tokenizer.json` and every `*.safetensors` in `dir`.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let config = ModelConfig::load(&dir.join("config.json"))?;
    let tokenizer = Tokenizer::load(&dir.join("tokenizer.json"))?;
    let weights = ModelWeights::load_dir(&config, dir)?;
    Ok(Checkpoint {
        dir: dir.to_path_buf(),
        config,
        weights,
        tokenizer,
    })
}
