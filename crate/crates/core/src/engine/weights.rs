// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use super::config::ModelConfig;
use super::safetensors::{self, Dtype, RawTensor};
use crate::error::{ProbeError, Result};

/// Row-major f32 matrix; `Linear` weights are stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn rows_slice(&self, rows: Range<usize>) -> &[f32] {
        &self.data[rows.start * self.cols..rows.end * self.cols]
    }

    pub fn rows_slice_mut(&mut self, rows: Range<usize>) -> &mut [f32] {
        &mut self.data[rows.start * self.cols..rows.end * self.cols]
    }
}

/// Which third of a head's fused projection block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QkvPart {
    Query = 0,
    Key = 1,
    Value = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub input_ln_scale: Vec<f32>,
    pub input_ln_shift: Vec<f32>,
    pub post_ln_scale: Vec<f32>,
    pub post_ln_shift: Vec<f32>,
    /// `[3 * d_model, d_model]`, grouped `[head][q|k|v][d_head]` along rows.
    pub qkv_weight: Matrix,
    pub qkv_bias: Vec<f32>,
    pub attn_out_weight: Matrix,
    pub attn_out_bias: Vec<f32>,
    pub mlp_up_weight: Matrix,
    pub mlp_up_bias: Vec<f32>,
    pub mlp_down_weight: Matrix,
    pub mlp_down_bias: Vec<f32>,
}

/// All parameters of one checkpoint, materialized as f32.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// Training step parsed from the checkpoint directory name, if any.
    pub step: Option<u64>,
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_ln_scale: Vec<f32>,
    pub final_ln_shift: Vec<f32>,
    pub unembedding: Matrix,
}

/// Rows of the fused QKV projection holding `part` of `head` (0-based).
pub fn qkv_rows(d_head: usize, head: usize, part: QkvPart) -> Range<usize> {
    let start = (head * 3 + part as usize) * d_head;
    start..start + d_head
}

impl LayerWeights {
    pub fn head_weight(&self, d_head: usize, head: usize, part: QkvPart) -> &[f32] {
        self.qkv_weight.rows_slice(qkv_rows(d_head, head, part))
    }

    pub fn head_bias(&self, d_head: usize, head: usize, part: QkvPart) -> &[f32] {
        &self.qkv_bias[qkv_rows(d_head, head, part)]
    }

    pub fn head_weight_mut(&mut self, d_head: usize, head: usize, part: QkvPart) -> &mut [f32] {
        self.qkv_weight.rows_slice_mut(qkv_rows(d_head, head, part))
    }

    pub fn head_bias_mut(&mut self, d_head: usize, head: usize, part: QkvPart) -> &mut [f32] {
        &mut self.qkv_bias[qkv_rows(d_head, head, part)]
    }
}

fn layer_name(i: usize, suffix: &str) -> String {
    format!("gpt_neox.layers.{i}.{suffix}")
}

struct TensorSource<'a> {
    tensors: &'a mut BTreeMap<String, RawTensor>,
    origin: &'a Path,
}

impl TensorSource<'_> {
    fn take(&mut self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let short = name.strip_prefix("gpt_neox.").unwrap_or(name);
        let raw = self
            .tensors
            .remove(name)
            .or_else(|| self.tensors.remove(short))
            .ok_or_else(|| ProbeError::load(self.origin, format!("missing tensor `{name}`")))?;
        if raw.shape != expected {
            return Err(ProbeError::Shape {
                tensor: name.to_string(),
                expected: expected.to_vec(),
                actual: raw.shape,
            });
        }
        Ok(raw.data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix {
            rows,
            cols,
            data: self.take(name, &[rows, cols])?,
        })
    }
}

impl ModelWeights {
    /// Build from a name → tensor map, validating every shape against `cfg`.
    pub fn from_tensors(
        cfg: &ModelConfig,
        mut tensors: BTreeMap<String, RawTensor>,
        origin: &Path,
        step: Option<u64>,
    ) -> Result<Self> {
        let d = cfg.d_model;
        let inter = cfg.intermediate_size;
        let mut src = TensorSource {
            tensors: &mut tensors,
            origin,
        };
        let embedding = src.matrix("gpt_neox.embed_in.weight", cfg.vocab_size, d)?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            layers.push(LayerWeights {
                input_ln_scale: src.take(&layer_name(i, "input_layernorm.weight"), &[d])?,
                input_ln_shift: src.take(&layer_name(i, "input_layernorm.bias"), &[d])?,
                post_ln_scale: src.take(&layer_name(i, "post_attention_layernorm.weight"), &[d])?,
                post_ln_shift: src.take(&layer_name(i, "post_attention_layernorm.bias"), &[d])?,
                qkv_weight: src.matrix(&layer_name(i, "attention.query_key_value.weight"), 3 * d, d)?,
                qkv_bias: src.take(&layer_name(i, "attention.query_key_value.bias"), &[3 * d])?,
                attn_out_weight: src.matrix(&layer_name(i, "attention.dense.weight"), d, d)?,
                attn_out_bias: src.take(&layer_name(i, "attention.dense.bias"), &[d])?,
                mlp_up_weight: src.matrix(&layer_name(i, "mlp.dense_h_to_4h.weight"), inter, d)?,
                mlp_up_bias: src.take(&layer_name(i, "mlp.dense_h_to_4h.bias"), &[inter])?,
                mlp_down_weight: src.matrix(&layer_name(i, "mlp.dense_4h_to_h.weight"), d, inter)?,
                mlp_down_bias: src.take(&layer_name(i, "mlp.dense_4h_to_h.bias"), &[d])?,
            });
        }
        let final_ln_scale = src.take("gpt_neox.final_layer_norm.weight", &[d])?;
        let final_ln_shift = src.take("gpt_neox.final_layer_norm.bias", &[d])?;
        let unembedding = src.matrix("embed_out.weight", cfg.vocab_size, d)?;
        Ok(Self {
            step,
            embedding,
            layers,
            final_ln_scale,
            final_ln_shift,
            unembedding,
        })
    }

    /// Load every `*.safetensors` file in `dir` (sorted by name).
    pub fn load_dir(cfg: &ModelConfig, dir: &Path) -> Result<Self> {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| ProbeError::load(dir, e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(ProbeError::load(dir, "no .safetensors files"));
        }
        let mut all = BTreeMap::new();
        for file in &files {
            all.extend(safetensors::read_file(file)?);
        }
        Self::from_tensors(cfg, all, dir, step_from_path(dir))
    }

    /// Named tensors in the on-disk naming scheme.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
        let mat = |m: &Matrix| vec![m.rows, m.cols];
        out.push((
            "gpt_neox.embed_in.weight".into(),
            mat(&self.embedding),
            &self.embedding.data,
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let d = l.input_ln_scale.len();
            let v = |x: &Vec<f32>| vec![x.len()];
            out.push((layer_name(i, "input_layernorm.weight"), vec![d], &l.input_ln_scale));
            out.push((layer_name(i, "input_layernorm.bias"), vec![d], &l.input_ln_shift));
            out.push((
                layer_name(i, "post_attention_layernorm.weight"),
                vec![d],
                &l.post_ln_scale,
            ));
            out.push((
                layer_name(i, "post_attention_layernorm.bias"),
                vec![d],
                &l.post_ln_shift,
            ));
            out.push((
                layer_name(i, "attention.query_key_value.weight"),
                mat(&l.qkv_weight),
                &l.qkv_weight.data,
            ));
            out.push((
                layer_name(i, "attention.query_key_value.bias"),
                v(&l.qkv_bias),
                &l.qkv_bias,
            ));
            out.push((
                layer_name(i, "attention.dense.weight"),
                mat(&l.attn_out_weight),
                &l.attn_out_weight.data,
            ));
            out.push((
                layer_name(i, "attention.dense.bias"),
                v(&l.attn_out_bias),
                &l.attn_out_bias,
            ));
            out.push((
                layer_name(i, "mlp.dense_h_to_4h.weight"),
                mat(&l.mlp_up_weight),
                &l.mlp_up_weight.data,
            ));
            out.push((
                layer_name(i, "mlp.dense_h_to_4h.bias"),
                v(&l.mlp_up_bias),
                &l.mlp_up_bias,
            ));
            out.push((
                layer_name(i, "mlp.dense_4h_to_h.weight"),
                mat(&l.mlp_down_weight),
                &l.mlp_down_weight.data,
            ));
            out.push((
                layer_name(i, "mlp.dense_4h_to_h.bias"),
                v(&l.mlp_down_bias),
                &l.mlp_down_bias,
            ));
        }
        out.push((
            "gpt_neox.final_layer_norm.weight".into(),
            vec![self.final_ln_scale.len()],
            &self.final_ln_scale,
        ));
        out.push((
            "gpt_neox.final_layer_norm.bias".into(),
            vec![self.final_ln_shift.len()],
            &self.final_ln_shift,
        ));
        out.push((
            "embed_out.weight".into(),
            mat(&self.unembedding),
            &self.unembedding.data,
        ));
        out
    }

    pub fn to_safetensors(&self, dtype: Dtype) -> Vec<u8> {
        let named = self.named_tensors();
        safetensors::serialize(named.iter().map(|(n, s, d)| (n.as_str(), s.as_slice(), *d)), dtype)
    }
}

/// Parse `step12345` from the final path component.
pub fn step_from_path(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("step")?.parse().ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn qkv_layout_is_head_major() {
        // d_head = 2, two heads: rows [q0 q0 k0 k0 v0 v0 q1 q1 k1 k1 v1 v1]
        assert_eq!(qkv_rows(2, 0, QkvPart::Query), 0..2);
        assert_eq!(qkv_rows(2, 0, QkvPart::Key), 2..4);
        assert_eq!(qkv_rows(2, 0, QkvPart::Value), 4..6);
        assert_eq!(qkv_rows(2, 1, QkvPart::Query), 6..8);
        assert_eq!(qkv_rows(2, 1, QkvPart::Value), 10..12);
    }

    #[test]
    fn step_parsing() {
        assert_eq!(step_from_path(Path::new("/x/step143000")), Some(143_000));
        assert_eq!(step_from_path(Path::new("/x/main")), None);
    }
}
