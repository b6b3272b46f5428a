// SPDX-License-Identifier: MIT OR Apache-2.0

use headprobe::ablation::{
    apply_ablation, condition_effect, default_head_sets, evaluate_ablated, specs_for, AblationKind, AblationOutcome,
    AblationSpec, Condition, HeadSets, PYTHIA_410M_TARGETS,
};
use headprobe::demo;
use headprobe::engine::synthetic::{random_weights, tiny_config, word_tokenizer};
use headprobe::engine::{forward_ids, CaptureSpec, ModelConfig, ModelWeights};
use headprobe::probes::distance::layer_scores;
use headprobe::probes::{all_heads, CompositeIndexRow, HeadId};
use headprobe::stimuli::{align_pair, AlignedPair};
use headprobe::ProbeError;
use proptest::prelude::*;

fn model() -> (ModelConfig, ModelWeights) {
    let cfg = tiny_config(4, 4, 16, 64);
    (cfg.clone(), random_weights(&cfg, 17, 0.9))
}

fn spec(kind: AblationKind, heads: &[(usize, usize)]) -> AblationSpec {
    AblationSpec {
        kind,
        targets: heads.iter().map(|&(l, h)| HeadId::new(l, h)).collect(),
        label: Condition::Target,
    }
}

/// Indices of every element that differs between two weight sets, by tensor name.
fn diff(a: &ModelWeights, b: &ModelWeights) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    for ((name, _, x), (_, _, y)) in a.named_tensors().iter().zip(b.named_tensors().iter()) {
        for (i, (p, q)) in x.iter().zip(y.iter()).enumerate() {
            if p.to_bits() != q.to_bits() {
                out.push((name.clone(), i));
            }
        }
    }
    out
}

#[test]
fn zero_ablation_gives_uniform_rows_and_leaves_earlier_layers_alone() {
    let (cfg, w) = model();
    let s = spec(AblationKind::Zero, &[(3, 1), (3, 2)]);
    let ab = apply_ablation(&cfg, &w, &s, None).unwrap();
    let ids: Vec<u32> = vec![5, 9, 33, 2, 61, 7, 7, 40];
    let intact = forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()).unwrap();
    let got = forward_ids(&cfg, &ab, &ids, &CaptureSpec::everything()).unwrap();
    let pattern = got.attention(3).unwrap();
    for h in 0..2 {
        for q in 0..ids.len() {
            let expected = 1.0 / (q + 1) as f32;
            assert!(pattern.row(h, q)[..=q].iter().all(|v| *v == expected));
        }
    }
    for layer in 1..3 {
        assert_eq!(intact.attention(layer).unwrap(), got.attention(layer).unwrap());
    }
    for l in 0..3 {
        assert_eq!(intact.hidden(l).unwrap(), got.hidden(l).unwrap());
    }
    let a3 = intact.attention(3).unwrap();
    for h in 2..4 {
        for q in 0..ids.len() {
            assert_eq!(a3.row(h, q), pattern.row(h, q));
        }
    }
    assert_ne!(intact.logits, got.logits);
}

#[test]
fn copy_of_self_is_identity() {
    let (cfg, w) = model();
    let s = spec(AblationKind::CopyFromStep(1), &[(3, 1), (1, 4)]);
    let ab = apply_ablation(&cfg, &w, &s, Some(&w)).unwrap();
    assert_eq!(ab, w);
    let ids = [1u32, 2, 3, 4, 5];
    assert_eq!(
        forward_ids(&cfg, &w, &ids, &CaptureSpec::everything()).unwrap(),
        forward_ids(&cfg, &ab, &ids, &CaptureSpec::everything()).unwrap()
    );
}

#[test]
fn copy_takes_source_qk_only() {
    let (cfg, w) = model();
    let src = random_weights(&cfg, 99, 0.3);
    let s = spec(AblationKind::CopyFromStep(1), &[(2, 3)]);
    let ab = apply_ablation(&cfg, &w, &s, Some(&src)).unwrap();
    let layer = &ab.layers[1];
    use headprobe::engine::QkvPart::*;
    for part in [Query, Key] {
        assert_eq!(layer.head_weight(4, 2, part), src.layers[1].head_weight(4, 2, part));
        assert_eq!(layer.head_bias(4, 2, part), src.layers[1].head_bias(4, 2, part));
    }
    assert_eq!(layer.head_weight(4, 2, Value), w.layers[1].head_weight(4, 2, Value));
    assert_eq!(layer.attn_out_weight, w.layers[1].attn_out_weight);
}

#[test]
fn ablation_errors() {
    let (cfg, w) = model();
    let out_of_range = spec(AblationKind::Zero, &[(5, 1)]);
    assert!(matches!(
        apply_ablation(&cfg, &w, &out_of_range, None),
        Err(ProbeError::Argument(_))
    ));
    let head_zero = spec(AblationKind::Zero, &[(1, 0)]);
    assert!(apply_ablation(&cfg, &w, &head_zero, None).is_err());
    assert!(apply_ablation(&cfg, &w, &spec(AblationKind::Zero, &[]), None).is_err());
    let copy = spec(AblationKind::CopyFromStep(1), &[(1, 1)]);
    assert!(matches!(
        apply_ablation(&cfg, &w, &copy, None),
        Err(ProbeError::Argument(_))
    ));
    let other_cfg = tiny_config(4, 4, 16, 65);
    let other = random_weights(&other_cfg, 1, 0.5);
    assert!(matches!(
        apply_ablation(&cfg, &w, &copy, Some(&other)),
        Err(ProbeError::Shape { .. })
    ));
}

proptest! {
    #[test]
    fn diff_is_confined_to_qk_slices(mask in 1u16..u16::MAX) {
        let (cfg, w) = model();
        let heads: Vec<HeadId> = all_heads(&cfg).into_iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, h)| h).collect();
        let s = AblationSpec { kind: AblationKind::Zero, targets: heads.clone(), label: Condition::Baseline };
        let ab = apply_ablation(&cfg, &w, &s, None).unwrap();
        let d_head = cfg.d_head;
        let allowed = |name: &str, idx: usize| -> bool {
            heads.iter().any(|h| {
                let prefix = format!("gpt_neox.layers.{}.attention.query_key_value.", h.layer - 1);
                if !name.starts_with(&prefix) {
                    return false;
                }
                let row = if name.ends_with("weight") { idx / cfg.d_model } else { idx };
                let base = h.head_index() * 3 * d_head;
                (base..base + 2 * d_head).contains(&row)
            })
        };
        for (name, idx) in diff(&w, &ab) {
            prop_assert!(allowed(&name, idx), "{name}[{idx}] changed");
        }
    }
}

fn stimuli() -> (ModelConfig, ModelWeights, Vec<AlignedPair>) {
    let (tok, _) = word_tokenizer(&demo::vocabulary());
    let cfg = tiny_config(4, 4, 16, tok.vocab_len());
    let w = random_weights(&cfg, 5, 0.6);
    let pairs = demo::pairs(3).iter().map(|p| align_pair(&tok, p).unwrap()).collect();
    (cfg, w, pairs)
}

#[test]
fn self_copy_has_no_effect() {
    let (cfg, w, pairs) = stimuli();
    let s = spec(AblationKind::CopyFromStep(512), &[(3, 1), (3, 2)]);
    let ev = evaluate_ablated(&cfg, &w, &s, Some(&w), &pairs, None, 512).unwrap();
    assert_eq!(ev.per_layer.len(), cfg.n_layers + 1);
    for o in &ev.per_layer {
        assert_eq!(o.delta_r2, 0.0);
        assert_eq!(o.fraction_intact, Some(1.0));
    }
    assert_eq!(ev.mean_delta_r2, 0.0);
}

#[test]
fn zero_ablation_leaves_layers_before_it_unchanged() {
    let (cfg, w, pairs) = stimuli();
    let intact: Vec<f64> = layer_scores(&cfg, &w, &pairs, 0)
        .unwrap()
        .iter()
        .map(|s| s.r2)
        .collect();
    let s = spec(AblationKind::Zero, &[(3, 1), (3, 2)]);
    let ev = evaluate_ablated(&cfg, &w, &s, None, &pairs, Some(&intact), 0).unwrap();
    for o in &ev.per_layer[..3] {
        assert_eq!(o.delta_r2, 0.0);
    }
    assert!(ev.per_layer[3..].iter().any(|o| o.delta_r2 != 0.0));
    for o in &ev.per_layer {
        assert!((o.r2_intact - o.r2_ablated - o.delta_r2).abs() <= 1e-12);
        if let Some(f) = o.fraction_intact {
            assert!((o.r2_ablated / o.r2_intact - f).abs() <= 1e-12);
        }
    }
    assert!(evaluate_ablated(&cfg, &w, &s, None, &pairs, Some(&intact[..2]), 0).is_err());
}

#[test]
fn undefined_fraction_is_missing() {
    let o = AblationOutcome::new(10, 2, 0.0, 0.05);
    assert_eq!(o.fraction_intact, None);
    assert_eq!(o.delta_r2, -0.05);
}

#[test]
fn condition_effect_cases() {
    let steps = [1u64, 512, 2000, 143_000];
    let mut rows = Vec::new();
    for &s in &steps {
        let base = 0.02 * (s as f64 + 1.0).log10();
        rows.push((base + 0.1, Condition::Target, s));
        rows.push((base, Condition::Baseline, s));
    }
    let fit = condition_effect(&rows, false).unwrap();
    assert!((fit.slope - 0.1).abs() < 1e-12);
    assert!((fit.coefficients[2] - 0.02).abs() < 1e-12);

    let flat: Vec<_> = rows
        .iter()
        .map(|(_, c, s)| (0.3 + (*s as f64) * 1e-6, *c, *s))
        .collect();
    assert!(condition_effect(&flat, false).unwrap().slope.abs() < 1e-12);

    let with = condition_effect(&rows, true).unwrap();
    assert_eq!(with.coefficients.len(), 4);
    assert!(with.coefficients[3].abs() < 1e-9);

    let only: Vec<_> = rows.iter().filter(|r| r.1 == Condition::Target).cloned().collect();
    assert!(matches!(condition_effect(&only, false), Err(ProbeError::Argument(_))));
    assert!(condition_effect(&rows[..4], false).is_err());
}

#[test]
fn head_set_defaults() {
    let s = default_head_sets("EleutherAI/pythia-14m", None, None).unwrap();
    assert!(s.targets.contains(&vec![HeadId::new(3, 1)]));
    assert!(s.targets.contains(&vec![HeadId::new(3, 2)]));
    assert!(s.targets.contains(&vec![HeadId::new(3, 1), HeadId::new(3, 2)]));
    assert_eq!(s.baselines.len(), 3);
    assert_eq!(specs_for(&s, AblationKind::Zero).len(), 6);

    // 410M: 24 layers x 16 heads; composite falls with head index, so the
    // highest-numbered free heads in each layer are the controls.
    let composite: Vec<CompositeIndexRow> = (1..=24)
        .flat_map(|l| (1..=16).map(move |h| (l, h)))
        .map(|(l, h)| CompositeIndexRow {
            head: HeadId::new(l, h),
            z_coef: 0.0,
            z_noun_attn: 0.0,
            z_verb_attn: 0.0,
            z_oneback_t: 0.0,
            z_positional_attn: 0.0,
            composite: -(h as f64),
        })
        .collect();
    let s = default_head_sets("pythia-410m", Some(&composite), None).unwrap();
    let targets: Vec<HeadId> = s.targets.iter().flatten().copied().collect();
    assert_eq!(targets, PYTHIA_410M_TARGETS.to_vec());
    let base: Vec<HeadId> = s.baselines.iter().flatten().copied().collect();
    assert_eq!(
        base,
        vec![
            HeadId::new(1, 16),
            HeadId::new(4, 16),
            HeadId::new(1, 15),
            HeadId::new(2, 16),
            HeadId::new(6, 16),
            HeadId::new(1, 12),
        ]
    );
    assert!(default_head_sets("pythia-410m", None, None).is_err());

    let user = HeadSets {
        targets: vec![vec![HeadId::new(2, 2)]],
        baselines: vec![vec![HeadId::new(2, 1)]],
    };
    assert_eq!(default_head_sets("anything", None, Some(&user)).unwrap(), user);
    assert!(default_head_sets("gpt2", None, None).is_err());
}
