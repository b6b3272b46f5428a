// SPDX-License-Identifier: MIT OR Apache-2.0

//! Instrumented GPT-NeoX forward pass.
//!
//! Each block computes layernorm, multi-head causal attention with rotary
//! embedding on the leading `rotary_dims` of every query/key head, and a GELU
//! MLP, combined either in parallel (`x + attn(ln1 x) + mlp(ln2 x)`) or
//! sequentially. All arithmetic is f32 with f32 accumulation.
//!
//! Layer numbering: hidden state `ℓ` is the residual stream after block `ℓ`
//! (`0` is the embedding output), and the attention of block `ℓ` (1-based)
//! is the pattern that produced hidden state `ℓ`.

use super::config::ModelConfig;
use super::tokenizer::EncodedSentence;
use super::weights::{LayerWeights, Matrix, ModelWeights, QkvPart};
use crate::error::{ProbeError, Result};

/// What a forward pass should record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureSpec {
    pub want_hidden: bool,
    pub want_attention: bool,
    pub want_logits: bool,
    /// Layer subset. Hidden states use `0..=n_layers`, attention uses
    /// block numbers `1..=n_layers`. `None` captures every layer.
    pub layers: Option<Vec<usize>>,
}

impl CaptureSpec {
    pub fn everything() -> Self {
        Self {
            want_hidden: true,
            want_attention: true,
            want_logits: true,
            layers: None,
        }
    }

    pub fn hidden_and_attention() -> Self {
        Self {
            want_hidden: true,
            want_attention: true,
            want_logits: false,
            layers: None,
        }
    }

    pub fn hidden_only() -> Self {
        Self {
            want_hidden: true,
            want_attention: false,
            want_logits: false,
            layers: None,
        }
    }

    pub fn attention_only() -> Self {
        Self {
            want_hidden: false,
            want_attention: true,
            want_logits: false,
            layers: None,
        }
    }

    pub fn logits_only() -> Self {
        Self {
            want_hidden: false,
            want_attention: false,
            want_logits: true,
            layers: None,
        }
    }

    fn includes(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.want_hidden || self.want_attention || self.want_logits) {
            return Err(ProbeError::Argument("capture spec requests nothing".into()));
        }
        Ok(())
    }
}

/// Post-softmax attention of one block: `[head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPattern {
    pub n_heads: usize,
    pub n_tokens: usize,
    pub data: Vec<f32>,
}

impl AttentionPattern {
    /// Attention from `query` to `key` in 0-based `head`.
    pub fn get(&self, head: usize, query: usize, key: usize) -> f32 {
        self.data[(head * self.n_tokens + query) * self.n_tokens + key]
    }

    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.n_tokens + query) * self.n_tokens;
        &self.data[start..start + self.n_tokens]
    }
}

/// Captured activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub n_tokens: usize,
    /// Index `0..=n_layers`; each `T x d_model` when captured.
    pub hidden: Vec<Option<Matrix>>,
    /// Index `0..n_layers` holds block `index + 1`.
    pub attention: Vec<Option<AttentionPattern>>,
    /// `T x vocab_size`.
    pub logits: Option<Matrix>,
}

impl ForwardTrace {
    pub fn hidden(&self, layer: usize) -> Result<&Matrix> {
        self.hidden
            .get(layer)
            .and_then(Option::as_ref)
            .ok_or_else(|| ProbeError::Argument(format!("hidden state {layer} was not captured")))
    }

    /// Attention pattern of 1-based block `layer`.
    pub fn attention(&self, layer: usize) -> Result<&AttentionPattern> {
        layer
            .checked_sub(1)
            .and_then(|i| self.attention.get(i))
            .and_then(Option::as_ref)
            .ok_or_else(|| ProbeError::Argument(format!("attention of layer {layer} was not captured")))
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `x [T, in] @ w^T + bias` with `w` stored `[out, in]`.
fn linear(x: &[f32], n_tokens: usize, w: &Matrix, bias: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0.0f32; n_tokens * w.rows];
    for t in 0..n_tokens {
        let xt = &x[t * w.cols..(t + 1) * w.cols];
        let ot = &mut out[t * w.rows..(t + 1) * w.rows];
        for (o, slot) in ot.iter_mut().enumerate() {
            *slot = dot(w.row(o), xt) + bias.map_or(0.0, |b| b[o]);
        }
    }
    out
}

fn layer_norm(x: &[f32], d: usize, scale: &[f32], shift: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            orow[i] = (row[i] - mean) * inv * scale[i] + shift[i];
        }
    }
    out
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * std::f32::consts::FRAC_1_SQRT_2))
}

/// Rotary tables `[position][i]` for `i < rotary_dims / 2`.
fn rotary_tables(cfg: &ModelConfig, n_tokens: usize) -> (Vec<f32>, Vec<f32>) {
    let rd = cfg.rotary_dims();
    let half = rd / 2;
    let mut cos = vec![0.0f32; n_tokens * half];
    let mut sin = vec![0.0f32; n_tokens * half];
    for i in 0..half {
        let inv_freq = 1.0 / (cfg.rotary_base as f32).powf((2 * i) as f32 / rd as f32);
        for t in 0..n_tokens {
            let angle = t as f32 * inv_freq;
            cos[t * half + i] = angle.cos();
            sin[t * half + i] = angle.sin();
        }
    }
    (cos, sin)
}

/// Rotate-half rotary embedding on the first `2 * half` entries of `v`.
fn apply_rotary(v: &mut [f32], half: usize, cos: &[f32], sin: &[f32]) {
    for i in 0..half {
        let (x1, x2) = (v[i], v[i + half]);
        v[i] = x1 * cos[i] - x2 * sin[i];
        v[i + half] = x2 * cos[i] + x1 * sin[i];
    }
}

struct AttentionOutput {
    mixed: Vec<f32>,
    probs: Vec<f32>,
}

fn attention_block(
    cfg: &ModelConfig,
    layer: &LayerWeights,
    normed: &[f32],
    n_tokens: usize,
    rotary: &(Vec<f32>, Vec<f32>),
) -> AttentionOutput {
    let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
    let half = cfg.rotary_dims() / 2;
    let qkv = linear(normed, n_tokens, &layer.qkv_weight, Some(&layer.qkv_bias));
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = vec![0.0f32; nh * n_tokens * n_tokens];
    let mut mixed = vec![0.0f32; n_tokens * d];
    let mut q = vec![0.0f32; n_tokens * dh];
    let mut k = vec![0.0f32; n_tokens * dh];
    let mut scores = vec![0.0f32; n_tokens];
    for h in 0..nh {
        let q_off = super::weights::qkv_rows(dh, h, QkvPart::Query).start;
        let k_off = super::weights::qkv_rows(dh, h, QkvPart::Key).start;
        let v_off = super::weights::qkv_rows(dh, h, QkvPart::Value).start;
        for t in 0..n_tokens {
            let row = &qkv[t * 3 * d..(t + 1) * 3 * d];
            q[t * dh..(t + 1) * dh].copy_from_slice(&row[q_off..q_off + dh]);
            k[t * dh..(t + 1) * dh].copy_from_slice(&row[k_off..k_off + dh]);
            let (c, s) = (&rotary.0[t * half..(t + 1) * half], &rotary.1[t * half..(t + 1) * half]);
            apply_rotary(&mut q[t * dh..(t + 1) * dh], half, c, s);
            apply_rotary(&mut k[t * dh..(t + 1) * dh], half, c, s);
        }
        for tq in 0..n_tokens {
            let qv = &q[tq * dh..(tq + 1) * dh];
            let mut max = f32::NEG_INFINITY;
            for tk in 0..=tq {
                let s = dot(qv, &k[tk * dh..(tk + 1) * dh]) * scale;
                scores[tk] = s;
                max = max.max(s);
            }
            let mut sum = 0.0f32;
            for s in scores.iter_mut().take(tq + 1) {
                *s = (*s - max).exp();
                sum += *s;
            }
            let prow = &mut probs[(h * n_tokens + tq) * n_tokens..(h * n_tokens + tq + 1) * n_tokens];
            for tk in 0..=tq {
                prow[tk] = scores[tk] / sum;
            }
            let out = &mut mixed[tq * d + h * dh..tq * d + (h + 1) * dh];
            for tk in 0..=tq {
                let p = prow[tk];
                let vrow = &qkv[tk * 3 * d + v_off..tk * 3 * d + v_off + dh];
                for (o, v) in out.iter_mut().zip(vrow) {
                    *o += p * v;
                }
            }
        }
    }
    AttentionOutput { mixed, probs }
}

fn mlp(layer: &LayerWeights, normed: &[f32], n_tokens: usize) -> Vec<f32> {
    let mut up = linear(normed, n_tokens, &layer.mlp_up_weight, Some(&layer.mlp_up_bias));
    for v in up.iter_mut() {
        *v = gelu(*v);
    }
    linear(&up, n_tokens, &layer.mlp_down_weight, Some(&layer.mlp_down_bias))
}

fn check_finite(v: &[f32], layer: usize, site: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ProbeError::NonFinite { layer, site })
    }
}

/// Run the model over `tokens`, recording what `capture` asks for.
pub fn forward(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    tokens: &EncodedSentence,
    capture: &CaptureSpec,
) -> Result<ForwardTrace> {
    forward_ids(cfg, weights, &tokens.token_ids, capture)
}

pub fn forward_ids(
    cfg: &ModelConfig,
    weights: &ModelWeights,
    ids: &[u32],
    capture: &CaptureSpec,
) -> Result<ForwardTrace> {
    capture.validate()?;
    let n = ids.len();
    if n == 0 {
        return Err(ProbeError::Argument("forward pass over zero tokens".into()));
    }
    if n > cfg.max_positions {
        return Err(ProbeError::Argument(format!(
            "sequence of {n} tokens exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    if let Some(bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(ProbeError::Argument(format!(
            "token id {bad} >= vocab_size {}",
            cfg.vocab_size
        )));
    }
    let d = cfg.d_model;
    let eps = cfg.layer_norm_eps as f32;

    // Blocks beyond the last requested layer are skipped unless logits are needed.
    let last_needed = if capture.want_logits {
        cfg.n_layers
    } else {
        match &capture.layers {
            None => cfg.n_layers,
            Some(ls) => ls.iter().copied().filter(|l| *l <= cfg.n_layers).max().unwrap_or(0),
        }
    };

    let mut x = Vec::with_capacity(n * d);
    for &id in ids {
        x.extend_from_slice(weights.embedding.row(id as usize));
    }
    let mut hidden = vec![None; cfg.n_layers + 1];
    let mut attention = vec![None; cfg.n_layers];
    if capture.want_hidden && capture.includes(0) {
        hidden[0] = Some(Matrix {
            rows: n,
            cols: d,
            data: x.clone(),
        });
    }
    let rotary = rotary_tables(cfg, n);

    for (i, layer) in weights.layers.iter().enumerate().take(last_needed) {
        let block = i + 1;
        let ln1 = layer_norm(&x, d, &layer.input_ln_scale, &layer.input_ln_shift, eps);
        let attn = attention_block(cfg, layer, &ln1, n, &rotary);
        let attn_out = linear(&attn.mixed, n, &layer.attn_out_weight, Some(&layer.attn_out_bias));
        check_finite(&attn_out, block, "attention")?;
        if cfg.parallel_residual {
            let ln2 = layer_norm(&x, d, &layer.post_ln_scale, &layer.post_ln_shift, eps);
            let m = mlp(layer, &ln2, n);
            for ((xv, a), mv) in x.iter_mut().zip(&attn_out).zip(&m) {
                *xv += mv + a;
            }
        } else {
            for (xv, a) in x.iter_mut().zip(&attn_out) {
                *xv += a;
            }
            let ln2 = layer_norm(&x, d, &layer.post_ln_scale, &layer.post_ln_shift, eps);
            let m = mlp(layer, &ln2, n);
            for (xv, mv) in x.iter_mut().zip(&m) {
                *xv += mv;
            }
        }
        check_finite(&x, block, "residual")?;
        if capture.want_attention && capture.includes(block) {
            attention[i] = Some(AttentionPattern {
                n_heads: cfg.n_heads,
                n_tokens: n,
                data: attn.probs,
            });
        }
        if capture.want_hidden && capture.includes(block) {
            hidden[block] = Some(Matrix {
                rows: n,
                cols: d,
                data: x.clone(),
            });
        }
    }

    let logits = if capture.want_logits {
        let normed = layer_norm(&x, d, &weights.final_ln_scale, &weights.final_ln_shift, eps);
        let data = linear(&normed, n, &weights.unembedding, None);
        check_finite(&data, cfg.n_layers, "logits")?;
        Some(Matrix {
            rows: n,
            cols: cfg.vocab_size,
            data,
        })
    } else {
        None
    };

    Ok(ForwardTrace {
        n_tokens: n,
        hidden,
        attention,
        logits,
    })
}

/// Natural-log softmax probability of `target` under one logit row.
pub fn log_softmax_at(row: &[f32], target: usize) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln() + max;
    row[target] as f64 - lse
}

/// `Σ_{t≥1} log p(token_t | tokens_<t)`; the first token is unconditioned.
pub fn sentence_log_prob(cfg: &ModelConfig, weights: &ModelWeights, tokens: &EncodedSentence) -> Result<f64> {
    let ids = &tokens.token_ids;
    if ids.len() < 2 {
        return Err(ProbeError::Argument(format!(
            "sentence log-probability needs at least 2 tokens, got {}",
            ids.len()
        )));
    }
    let trace = forward_ids(cfg, weights, ids, &CaptureSpec::logits_only())?;
    let logits = trace.logits.expect("logits requested");
    Ok((1..ids.len())
        .map(|t| log_softmax_at(logits.row(t - 1), ids[t] as usize))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_preserves_norm() {
        let mut v = [1.0f32, 2.0, 3.0, 4.0];
        let (c, s) = ([0.6f32, 1.0], [0.8f32, 0.0]);
        apply_rotary(&mut v, 2, &c, &s);
        let n: f32 = v.iter().map(|x| x * x).sum();
        assert!((n - 30.0).abs() < 1e-5);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (0..11).map(|i| i as f32).collect();
        assert_eq!(dot(&a, &a), (0..11).map(|i| (i * i) as f32).sum::<f32>());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841_344_7).abs() < 1e-6);
        assert!((gelu(-1.0) + 0.158_655_3).abs() < 1e-6);
    }

    #[test]
    fn empty_capture_rejected() {
        let spec = CaptureSpec {
            want_hidden: false,
            want_attention: false,
            want_logits: false,
            layers: None,
        };
        assert!(spec.validate().is_err());
    }
}
