// SPDX-License-Identifier: MIT OR Apache-2.0

//! Straight-loop f64 reference forward pass for tiny models.
//!
//! Shares no code with [`super::forward`]: every projection is an explicit
//! triple loop, rotary is evaluated as a 2-D rotation per frequency, and
//! softmax is computed in double precision. Used by the `oracle` subcommand
//! and the parity tests.

use super::config::ModelConfig;
use super::weights::ModelWeights;

/// Reference activations, all in f64.
#[derive(Debug, Clone)]
pub struct ReferenceTrace {
    /// `[layer 0..=n_layers][t][d]`
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// `[block 0..n_layers][head][query][key]`
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[t][vocab]`
    pub logits: Vec<Vec<f64>>,
}

fn mat_vec(w: &[f32], rows: usize, cols: usize, x: &[f64], bias: Option<&[f32]>) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        let mut s = 0.0;
        for c in 0..cols {
            s += w[r * cols + c] as f64 * x[c];
        }
        if let Some(b) = bias {
            s += b[r] as f64;
        }
        out[r] = s;
    }
    out
}

fn norm(x: &[f64], scale: &[f32], shift: &[f32], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * scale[i] as f64 + shift[i] as f64)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Rotate pairs `(i, i + rd/2)` of the first `rd` entries by `pos * θ_i`.
fn rotate(v: &mut [f64], pos: usize, rd: usize, base: f64) {
    let half = rd / 2;
    for i in 0..half {
        let theta = base.powf(-(2.0 * i as f64) / rd as f64);
        let angle = pos as f64 * theta;
        let (a, b) = (v[i], v[i + half]);
        v[i] = a * angle.cos() - b * angle.sin();
        v[i + half] = a * angle.sin() + b * angle.cos();
    }
}

pub fn reference_forward(cfg: &ModelConfig, w: &ModelWeights, ids: &[u32]) -> ReferenceTrace {
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let t_len = ids.len();
    let rd = cfg.rotary_dims();
    let eps = cfg.layer_norm_eps;

    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| (0..d).map(|c| w.embedding.data[id as usize * d + c] as f64).collect())
        .collect();
    let mut hidden = vec![x.clone()];
    let mut attention = Vec::new();

    for layer in &w.layers {
        let qkv_w = &layer.qkv_weight.data;
        let ln1: Vec<Vec<f64>> = x
            .iter()
            .map(|r| norm(r, &layer.input_ln_scale, &layer.input_ln_shift, eps))
            .collect();
        let qkv: Vec<Vec<f64>> = ln1
            .iter()
            .map(|r| mat_vec(qkv_w, 3 * d, d, r, Some(&layer.qkv_bias)))
            .collect();
        let pick = |t: usize, h: usize, part: usize| -> Vec<f64> {
            (0..dh).map(|i| qkv[t][h * 3 * dh + part * dh + i]).collect()
        };

        let mut layer_attn = vec![vec![vec![0.0; t_len]; t_len]; nh];
        let mut mixed = vec![vec![0.0; d]; t_len];
        for h in 0..nh {
            let qs: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    let mut q = pick(t, h, 0);
                    rotate(&mut q, t, rd, cfg.rotary_base);
                    q
                })
                .collect();
            let ks: Vec<Vec<f64>> = (0..t_len)
                .map(|t| {
                    let mut k = pick(t, h, 1);
                    rotate(&mut k, t, rd, cfg.rotary_base);
                    k
                })
                .collect();
            for i in 0..t_len {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| qs[i].iter().zip(&ks[j]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                for j in 0..=i {
                    let p = (scores[j] - m).exp() / z;
                    layer_attn[h][i][j] = p;
                    let v = pick(j, h, 2);
                    for c in 0..dh {
                        mixed[i][h * dh + c] += p * v[c];
                    }
                }
            }
        }
        attention.push(layer_attn);

        let attn_out: Vec<Vec<f64>> = mixed
            .iter()
            .map(|r| mat_vec(&layer.attn_out_weight.data, d, d, r, Some(&layer.attn_out_bias)))
            .collect();
        let ffn = |input: &[f64]| -> Vec<f64> {
            let inter = cfg.intermediate_size;
            let up: Vec<f64> = mat_vec(&layer.mlp_up_weight.data, inter, d, input, Some(&layer.mlp_up_bias))
                .into_iter()
                .map(gelu)
                .collect();
            mat_vec(&layer.mlp_down_weight.data, d, inter, &up, Some(&layer.mlp_down_bias))
        };
        for t in 0..t_len {
            if cfg.parallel_residual {
                let m = ffn(&norm(&x[t], &layer.post_ln_scale, &layer.post_ln_shift, eps));
                for c in 0..d {
                    x[t][c] += attn_out[t][c] + m[c];
                }
            } else {
                for c in 0..d {
                    x[t][c] += attn_out[t][c];
                }
                let m = ffn(&norm(&x[t], &layer.post_ln_scale, &layer.post_ln_shift, eps));
                for c in 0..d {
                    x[t][c] += m[c];
                }
            }
        }
        hidden.push(x.clone());
    }

    let logits = x
        .iter()
        .map(|r| {
            let normed = norm(r, &w.final_ln_scale, &w.final_ln_shift, eps);
            mat_vec(&w.unembedding.data, cfg.vocab_size, d, &normed, None)
        })
        .collect();
    ReferenceTrace {
        hidden,
        attention,
        logits,
    }
}

/// Reference `Σ log p(token_t | <t)` from [`reference_forward`] logits.
pub fn reference_log_prob(cfg: &ModelConfig, w: &ModelWeights, ids: &[u32]) -> f64 {
    let trace = reference_forward(cfg, w, ids);
    let mut total = 0.0;
    for t in 1..ids.len() {
        let row = &trace.logits[t - 1];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        total += row[ids[t] as usize] - m - z.ln();
    }
    total
}
