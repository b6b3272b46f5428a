// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic checkpoints for offline runs, tests and benches.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::safetensors::Dtype;
use super::tokenizer::{bytes_to_unicode, tokenizer_document, Tokenizer};
use super::weights::{LayerWeights, Matrix, ModelWeights};
use crate::error::{ProbeError, Result};

/// Byte-level vocabulary plus one merge chain per word, so that each
/// space-prefixed word in `words` encodes to a single token.
pub fn word_tokenizer_parts(words: &[&str]) -> (Vec<(String, u32)>, Vec<(String, String)>) {
    let table = bytes_to_unicode();
    let mut vocab: Vec<(String, u32)> = table
        .iter()
        .enumerate()
        .map(|(i, c)| (c.to_string(), i as u32))
        .collect();
    let mut known: HashSet<String> = vocab.iter().map(|(s, _)| s.clone()).collect();
    let mut merges = Vec::new();
    for word in words {
        let symbols: Vec<String> = format!(" {word}")
            .bytes()
            .map(|b| table[b as usize].to_string())
            .collect();
        let mut acc = symbols[0].clone();
        for s in &symbols[1..] {
            let merged = format!("{acc}{s}");
            if known.insert(merged.clone()) {
                merges.push((acc.clone(), s.clone()));
                vocab.push((merged.clone(), vocab.len() as u32));
            }
            acc = merged;
        }
    }
    (vocab, merges)
}

pub fn word_tokenizer(words: &[&str]) -> (Tokenizer, String) {
    let (vocab, merges) = word_tokenizer_parts(words);
    let doc = tokenizer_document(&vocab, &merges);
    (
        Tokenizer::from_json_str(&doc).expect("synthetic tokenizer is valid"),
        doc,
    )
}

pub fn tiny_config(n_layers: usize, n_heads: usize, d_model: usize, vocab_size: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_heads,
        d_model,
        d_head: d_model / n_heads,
        vocab_size,
        intermediate_size: 4 * d_model,
        rotary_pct: 1.0,
        rotary_base: 10_000.0,
        layer_norm_eps: 1e-5,
        max_positions: 64,
        parallel_residual: true,
    }
}

fn fill(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    if scale == 0.0 {
        return vec![0.0; n];
    }
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    Matrix {
        rows,
        cols,
        data: fill(rng, rows * cols, scale),
    }
}

/// Uniformly random weights; layernorm scales near 1.
pub fn random_weights(cfg: &ModelConfig, seed: u64, scale: f32) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let inter = cfg.intermediate_size;
    let ln = |rng: &mut ChaCha8Rng| -> (Vec<f32>, Vec<f32>) {
        let s = (0..d).map(|_| 1.0 + rng.gen_range(-0.1f32..0.1)).collect();
        (s, fill(rng, d, 0.1))
    };
    let layers = (0..cfg.n_layers)
        .map(|_| {
            let (input_ln_scale, input_ln_shift) = ln(&mut rng);
            let (post_ln_scale, post_ln_shift) = ln(&mut rng);
            LayerWeights {
                input_ln_scale,
                input_ln_shift,
                post_ln_scale,
                post_ln_shift,
                qkv_weight: matrix(&mut rng, 3 * d, d, scale),
                qkv_bias: fill(&mut rng, 3 * d, scale),
                attn_out_weight: matrix(&mut rng, d, d, scale),
                attn_out_bias: fill(&mut rng, d, scale),
                mlp_up_weight: matrix(&mut rng, inter, d, scale),
                mlp_up_bias: fill(&mut rng, inter, scale),
                mlp_down_weight: matrix(&mut rng, d, inter, scale),
                mlp_down_bias: fill(&mut rng, d, scale),
            }
        })
        .collect();
    let (final_ln_scale, final_ln_shift) = ln(&mut rng);
    ModelWeights {
        step: None,
        embedding: matrix(&mut rng, cfg.vocab_size, d, 1.0),
        layers,
        final_ln_scale,
        final_ln_shift,
        unembedding: matrix(&mut rng, cfg.vocab_size, d, scale),
    }
}

/// Elementwise `a + frac * (b - a)`.
pub fn interpolate(a: &ModelWeights, b: &ModelWeights, frac: f32) -> ModelWeights {
    let lerp = |x: &[f32], y: &[f32]| -> Vec<f32> { x.iter().zip(y).map(|(p, q)| p + frac * (q - p)).collect() };
    let lm = |x: &Matrix, y: &Matrix| Matrix {
        rows: x.rows,
        cols: x.cols,
        data: lerp(&x.data, &y.data),
    };
    ModelWeights {
        step: None,
        embedding: lm(&a.embedding, &b.embedding),
        layers: a
            .layers
            .iter()
            .zip(&b.layers)
            .map(|(x, y)| LayerWeights {
                input_ln_scale: lerp(&x.input_ln_scale, &y.input_ln_scale),
                input_ln_shift: lerp(&x.input_ln_shift, &y.input_ln_shift),
                post_ln_scale: lerp(&x.post_ln_scale, &y.post_ln_scale),
                post_ln_shift: lerp(&x.post_ln_shift, &y.post_ln_shift),
                qkv_weight: lm(&x.qkv_weight, &y.qkv_weight),
                qkv_bias: lerp(&x.qkv_bias, &y.qkv_bias),
                attn_out_weight: lm(&x.attn_out_weight, &y.attn_out_weight),
                attn_out_bias: lerp(&x.attn_out_bias, &y.attn_out_bias),
                mlp_up_weight: lm(&x.mlp_up_weight, &y.mlp_up_weight),
                mlp_up_bias: lerp(&x.mlp_up_bias, &y.mlp_up_bias),
                mlp_down_weight: lm(&x.mlp_down_weight, &y.mlp_down_weight),
                mlp_down_bias: lerp(&x.mlp_down_bias, &y.mlp_down_bias),
            })
            .collect(),
        final_ln_scale: lerp(&a.final_ln_scale, &b.final_ln_scale),
        final_ln_shift: lerp(&a.final_ln_shift, &b.final_ln_shift),
        unembedding: lm(&a.unembedding, &b.unembedding),
    }
}

/// Write `config.json`, `tokenizer.json` and `model.safetensors` into `dir`.
pub fn write_checkpoint(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights, tokenizer_json: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| ProbeError::io(p, e))
    };
    write("config.json", cfg.to_json_string().as_bytes())?;
    write("tokenizer.json", tokenizer_json.as_bytes())?;
    write("model.safetensors", &weights.to_safetensors(Dtype::F32))
}

/// A model family whose weights drift from a random init toward a second
/// random point on a log-step schedule. Written as `root/step<N>/`.
pub fn write_family(root: &Path, cfg: &ModelConfig, tokenizer_json: &str, steps: &[u64], seed: u64) -> Result<()> {
    let init = random_weights(cfg, seed, 0.3);
    let end = random_weights(cfg, seed.wrapping_add(1), 0.6);
    let last = steps.iter().copied().max().unwrap_or(1) as f64;
    for &step in steps {
        let frac = ((step as f64 + 1.0).ln() / (last + 1.0).ln()) as f32;
        let w = interpolate(&init, &end, frac);
        write_checkpoint(&root.join(format!("step{step}")), cfg, &w, tokenizer_json)?;
    }
    Ok(())
}
