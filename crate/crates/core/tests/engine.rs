// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use headprobe::engine::reference::{reference_forward, reference_log_prob};
use headprobe::engine::safetensors::Dtype;
use headprobe::engine::synthetic::{random_weights, tiny_config, word_tokenizer, write_checkpoint};
use headprobe::engine::{
    forward_ids, load_checkpoint, sentence_log_prob, CaptureSpec, ModelConfig, ModelWeights, QkvPart, Tokenizer,
};
use headprobe::ProbeError;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs + rel * b.abs()
}

fn as_vec(v: &Value) -> Vec<f64> {
    fn walk(v: &Value, out: &mut Vec<f64>) {
        match v {
            Value::Array(a) => a.iter().for_each(|x| walk(x, out)),
            Value::Number(n) => out.push(n.as_f64().unwrap()),
            _ => panic!("unexpected json"),
        }
    }
    let mut out = Vec::new();
    walk(v, &mut out);
    out
}

fn check_against_transformers(name: &str) {
    let dir = fixture(name);
    let cfg = ModelConfig::load(&dir.join("config.json")).unwrap();
    let weights = ModelWeights::load_dir(&cfg, &dir).unwrap();
    let reference: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("reference.json")).unwrap()).unwrap();
    let ids: Vec<u32> = reference["ids"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap() as u32)
        .collect();
    let trace = forward_ids(&cfg, &weights, &ids, &CaptureSpec::everything()).unwrap();

    for (layer, expected) in reference["hidden"].as_array().unwrap().iter().enumerate() {
        let got = &trace.hidden(layer).unwrap().data;
        for (g, e) in got.iter().zip(as_vec(expected)) {
            assert!(close(*g as f64, e, 1e-5, 1e-5), "{name} hidden {layer}: {g} vs {e}");
        }
    }
    for (i, expected) in reference["attention"].as_array().unwrap().iter().enumerate() {
        let got = &trace.attention(i + 1).unwrap().data;
        for (g, e) in got.iter().zip(as_vec(expected)) {
            assert!(
                close(*g as f64, e, 1e-5, 1e-6),
                "{name} attention {}: {g} vs {e}",
                i + 1
            );
        }
    }
    let logits = &trace.logits.as_ref().unwrap().data;
    for (g, e) in logits.iter().zip(as_vec(&reference["logits"])) {
        assert!(close(*g as f64, e, 1e-5, 1e-5), "{name} logits: {g} vs {e}");
    }
}

#[test]
fn matches_transformers_parallel_residual_partial_rotary() {
    check_against_transformers("neox_parallel");
}

#[test]
fn matches_transformers_sequential_residual_full_rotary() {
    check_against_transformers("neox_sequential");
}

#[test]
fn fused_qkv_slicing_against_hand_built_file() {
    // qkv rows are [head][q|k|v][d_head]; tag every row with its index.
    let cfg = tiny_config(1, 2, 4, 256);
    let mut w = random_weights(&cfg, 3, 0.1);
    for (r, chunk) in w.layers[0].qkv_weight.data.chunks_mut(4).enumerate() {
        chunk.fill(r as f32);
    }
    let dir = tempfile::tempdir().unwrap();
    let (_, tok) = word_tokenizer(&[]);
    write_checkpoint(dir.path(), &cfg, &w, &tok).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let layer = &loaded.weights.layers[0];
    let d_head = 2;
    for (head, part, first_row) in [
        (0, QkvPart::Query, 0.0),
        (0, QkvPart::Key, 2.0),
        (0, QkvPart::Value, 4.0),
        (1, QkvPart::Query, 6.0),
        (1, QkvPart::Key, 8.0),
        (1, QkvPart::Value, 10.0),
    ] {
        let slice = layer.head_weight(d_head, head, part);
        assert_eq!(slice.len(), 2 * 4);
        assert!(slice[..4].iter().all(|v| *v == first_row));
        assert!(slice[4..].iter().all(|v| *v == first_row + 1.0));
    }
}

#[test]
fn oracle_parity_on_random_tiny_models() {
    for seed in 0..12u64 {
        let n_layers = 1 + (seed % 2) as usize;
        let n_heads = 1 + ((seed / 2) % 2) as usize;
        let d_model = if seed % 3 == 0 { 4 } else { 8 };
        let mut cfg = tiny_config(n_layers, n_heads, d_model, 19);
        cfg.parallel_residual = seed % 4 != 1;
        cfg.rotary_pct = if seed % 2 == 0 { 1.0 } else { 0.5 };
        if cfg.rotary_dims() % 2 == 1 {
            cfg.rotary_pct = 1.0;
        }
        let w = random_weights(&cfg, seed, 0.7);
        let t = 2 + (seed as usize % 7);
        let ids: Vec<u32> = (0..t).map(|i| ((i * 7 + seed as usize) % 19) as u32).collect();
        let got = forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()).unwrap();
        let want = reference_forward(&cfg, &w, &ids);
        for l in 0..=n_layers {
            let g = &got.hidden(l).unwrap().data;
            let e: Vec<f64> = want.hidden[l].iter().flatten().copied().collect();
            for (a, b) in g.iter().zip(&e) {
                assert!(close(*a as f64, *b, 1e-5, 1e-6), "seed {seed} hidden {l}: {a} vs {b}");
            }
        }
        for l in 0..n_layers {
            let g = &got.attention(l + 1).unwrap().data;
            let e: Vec<f64> = want.attention[l].iter().flatten().flatten().copied().collect();
            for (a, b) in g.iter().zip(&e) {
                assert!(close(*a as f64, *b, 1e-5, 1e-7), "seed {seed} attn {l}: {a} vs {b}");
            }
        }
        let g = &got.logits.unwrap().data;
        let e: Vec<f64> = want.logits.iter().flatten().copied().collect();
        for (a, b) in g.iter().zip(&e) {
            assert!(close(*a as f64, *b, 1e-5, 1e-6), "seed {seed} logits: {a} vs {b}");
        }
    }
}

#[test]
fn attention_rows_are_causal_distributions() {
    let cfg = tiny_config(2, 2, 8, 40);
    let w = random_weights(&cfg, 11, 1.5);
    let ids: Vec<u32> = (0..12).map(|i| (i * 5 % 40) as u32).collect();
    let trace = forward_ids(&cfg, &w, &ids, &CaptureSpec::attention_only()).unwrap();
    for layer in 1..=2 {
        let a = trace.attention(layer).unwrap();
        for h in 0..2 {
            for q in 0..12 {
                let row = a.row(h, q);
                let s: f32 = row[..=q].iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert!(row[q + 1..].iter().all(|v| *v == 0.0));
                assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}

#[test]
fn all_zero_weights_give_uniform_causal_attention() {
    let mut cfg = tiny_config(2, 2, 8, 256);
    cfg.rotary_pct = 0.5;
    let zero = random_weights(&cfg, 0, 0.0);
    let (_, tok) = word_tokenizer(&[]);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &cfg, &zero, &tok).unwrap();
    let ckpt = load_checkpoint(dir.path()).unwrap();
    let enc = ckpt.tokenizer.encode("abcdef").unwrap();
    let trace = headprobe::engine::forward(&ckpt.config, &ckpt.weights, &enc, &CaptureSpec::attention_only()).unwrap();
    for layer in 1..=2 {
        let a = trace.attention(layer).unwrap();
        for h in 0..2 {
            for q in 0..enc.len() {
                let expected = 1.0f32 / (q + 1) as f32;
                assert!(a.row(h, q)[..=q].iter().all(|v| *v == expected));
            }
        }
    }
}

#[test]
fn rotary_scores_depend_only_on_offset() {
    // Same token at every position and identity query/key maps: the
    // pre-softmax score is a function of (i - j) alone, so log-ratios of
    // attention probabilities at a fixed offset agree across rows.
    let mut cfg = tiny_config(1, 1, 4, 5);
    cfg.rotary_pct = 1.0;
    let mut w = random_weights(&cfg, 2, 0.5);
    let layer = &mut w.layers[0];
    for part in [QkvPart::Query, QkvPart::Key] {
        let slice = layer.head_weight_mut(4, 0, part);
        slice.fill(0.0);
        for i in 0..4 {
            slice[i * 4 + i] = 3.0;
        }
        layer.head_bias_mut(4, 0, part).fill(0.0);
    }
    let ids = vec![2u32; 8];
    let a = forward_ids(&cfg, &w, &ids, &CaptureSpec::attention_only()).unwrap();
    let pat = a.attention(1).unwrap();
    for delta in 1..4 {
        let ratios: Vec<f64> = (delta..8)
            .map(|i| (pat.get(0, i, i - delta) as f64).ln() - (pat.get(0, i, i) as f64).ln())
            .collect();
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-4, "offset {delta}: {ratios:?}");
        }
    }
    // And the direct rotation formula agrees with the reference.
    let reference = reference_forward(&cfg, &w, &ids);
    for i in 0..8 {
        for j in 0..=i {
            assert!(close(
                pat.get(0, i, j) as f64,
                reference.attention[0][0][i][j],
                1e-5,
                1e-7
            ));
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = tiny_config(2, 2, 8, 30);
    let w = random_weights(&cfg, 5, 0.9);
    let ids: Vec<u32> = vec![1, 29, 3, 3, 7, 0];
    let a = forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()).unwrap();
    for _ in 0..3 {
        assert_eq!(forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()).unwrap(), a);
    }
}

#[test]
fn sequence_limits() {
    let mut cfg = tiny_config(1, 1, 4, 10);
    cfg.max_positions = 4;
    let w = random_weights(&cfg, 1, 0.5);
    assert!(matches!(
        forward_ids(&cfg, &w, &[1, 2, 3, 4, 5], &CaptureSpec::everything()),
        Err(ProbeError::Argument(_))
    ));
    assert!(matches!(
        forward_ids(&cfg, &w, &[], &CaptureSpec::everything()),
        Err(ProbeError::Argument(_))
    ));
    assert!(matches!(
        forward_ids(&cfg, &w, &[10], &CaptureSpec::everything()),
        Err(ProbeError::Argument(_))
    ));
}

#[test]
fn non_finite_weights_reported_with_layer() {
    let cfg = tiny_config(2, 1, 4, 10);
    let mut w = random_weights(&cfg, 1, 0.5);
    w.layers[1].mlp_down_bias[0] = f32::NAN;
    let err = forward_ids(&cfg, &w, &[1, 2], &CaptureSpec::hidden_only()).unwrap_err();
    assert!(matches!(err, ProbeError::NonFinite { layer: 2, .. }), "{err}");
}

#[test]
fn uniform_logits_give_uniform_log_prob() {
    let cfg = tiny_config(1, 1, 4, 256);
    let mut w = random_weights(&cfg, 4, 0.5);
    w.unembedding.data.fill(0.0);
    let (tok, _) = word_tokenizer(&[]);
    let enc = tok.encode("hello").unwrap();
    let lp = sentence_log_prob(&cfg, &w, &enc).unwrap();
    let expected = 4.0 * (1.0f64 / 256.0).ln();
    assert!((lp - expected).abs() < 1e-9, "{lp} vs {expected}");
    let single = tok.encode("h").unwrap();
    assert!(matches!(
        sentence_log_prob(&cfg, &w, &single),
        Err(ProbeError::Argument(_))
    ));
}

#[test]
fn two_token_log_prob_matches_oracle() {
    let cfg = tiny_config(2, 2, 8, 256);
    let w = random_weights(&cfg, 9, 0.8);
    let (tok, _) = word_tokenizer(&[]);
    let enc = tok.encode("ab").unwrap();
    let got = sentence_log_prob(&cfg, &w, &enc).unwrap();
    let want = reference_log_prob(&cfg, &w, &enc.token_ids);
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn truncated_weight_file_is_named() {
    let cfg = tiny_config(1, 1, 4, 256);
    let w = random_weights(&cfg, 1, 0.5);
    let (_, tok) = word_tokenizer(&[]);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &cfg, &w, &tok).unwrap();
    let path = dir.path().join("model.safetensors");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("model.safetensors"), "{err}");
}

#[test]
fn shape_mismatch_names_tensor() {
    let cfg = tiny_config(1, 1, 4, 256);
    let w = random_weights(&cfg, 1, 0.5);
    let (_, tok) = word_tokenizer(&[]);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &cfg, &w, &tok).unwrap();
    let mut bigger = cfg.clone();
    bigger.intermediate_size = 20;
    std::fs::write(dir.path().join("config.json"), bigger.to_json_string()).unwrap();
    match load_checkpoint(dir.path()).unwrap_err() {
        ProbeError::Shape {
            tensor,
            expected,
            actual,
        } => {
            assert_eq!(tensor, "gpt_neox.layers.0.mlp.dense_h_to_4h.weight");
            assert_eq!(expected, vec![20, 4]);
            assert_eq!(actual, vec![16, 4]);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn f16_checkpoints_load_as_f32() {
    let cfg = tiny_config(1, 1, 4, 256);
    let w = random_weights(&cfg, 1, 0.5);
    let (_, tok) = word_tokenizer(&[]);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(dir.path(), &cfg, &w, &tok).unwrap();
    std::fs::write(dir.path().join("model.safetensors"), w.to_safetensors(Dtype::F16)).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    for (a, b) in loaded.weights.layers[0]
        .qkv_weight
        .data
        .iter()
        .zip(&w.layers[0].qkv_weight.data)
    {
        assert_eq!(*a, half::f16::from_f32(*b).to_f32());
    }
}

#[test]
fn bpe_matches_reference_tokenizer() {
    let tok = Tokenizer::load(&fixture("bpe_tokenizer.json")).unwrap();
    let cases: Value = serde_json::from_str(&std::fs::read_to_string(fixture("bpe_reference.json")).unwrap()).unwrap();
    for case in cases.as_array().unwrap() {
        let text = case["text"].as_str().unwrap();
        let want: Vec<u32> = case["ids"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as u32)
            .collect();
        let enc = tok.encode(text).unwrap();
        assert_eq!(enc.token_ids, want, "{text:?}");
        assert_eq!(tok.decode(&enc.token_ids).unwrap(), text);
    }
    let bare = tok.encode("lamb").unwrap();
    let spaced = tok.encode(" lamb").unwrap();
    assert_ne!(bare.token_ids[0], spaced.token_ids[0]);
}
