// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded offline workspace: a synthetic checkpoint family plus stimulus
//! files in the layouts the pipeline reads.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::synthetic::{tiny_config, word_tokenizer, write_family};
use crate::error::{ProbeError, Result};
use crate::stimuli::{
    make_positional_variant, write_pairs, AmbiguityClass, ModNounItem, PerturbationKind, PerturbedStimulus,
    StimulusPair,
};

/// (word, cue for sense A, cue for sense B, class)
const NOUNS: [(&str, &str, &str, AmbiguityClass); 12] = [
    ("lamb", "marinated", "friendly", AmbiguityClass::Polysemy),
    ("case", "leather", "legal", AmbiguityClass::Homonymy),
    ("bark", "loud", "rough", AmbiguityClass::Homonymy),
    ("glass", "broken", "full", AmbiguityClass::Polysemy),
    ("atmosphere", "tense", "gaseous", AmbiguityClass::Polysemy),
    ("beam", "wooden", "laser", AmbiguityClass::Polysemy),
    ("bat", "baseball", "furry", AmbiguityClass::Homonymy),
    ("seal", "royal", "arctic", AmbiguityClass::Homonymy),
    ("pitch", "grassy", "high", AmbiguityClass::Homonymy),
    ("table", "kitchen", "periodic", AmbiguityClass::Polysemy),
    ("paper", "white", "academic", AmbiguityClass::Polysemy),
    ("bank", "river", "savings", AmbiguityClass::Homonymy),
];

/// (subject cue, verb target)
const VERBS: [(&str, &str); 6] = [
    ("glass", "broken"),
    ("promise", "broken"),
    ("case", "filed"),
    ("nail", "filed"),
    ("lamb", "roasted"),
    ("coffee", "roasted"),
];

/// (verb cue, noun target)
const NOUN_TARGETS: [(&str, &str); 6] = [
    ("polished", "case"),
    ("argued", "case"),
    ("roasted", "lamb"),
    ("petted", "lamb"),
    ("painted", "table"),
    ("memorized", "table"),
];

const TEMPLATES: [&str; 2] = ["They saw the {cue} {word} today.", "We found a {cue} {word} there."];
const EXTRA: [&str; 12] = [
    "saw", "the", "today", "found", "a", "there", "kind", "of", "was", "he", "we", "they",
];

fn fill(template: &str, cue: &str, word: &str) -> String {
    template.replace("{cue}", cue).replace("{word}", word)
}

/// Every word that should encode to a single token.
pub fn vocabulary() -> Vec<&'static str> {
    let mut v: Vec<&str> = EXTRA.to_vec();
    for (w, a, b, _) in NOUNS {
        v.extend([w, a, b]);
    }
    for (a, b) in VERBS.iter().chain(NOUN_TARGETS.iter()) {
        v.extend([*a, *b]);
    }
    v.sort_unstable();
    v.dedup();
    v
}

/// Three pairs per noun: two same-sense pairs and one cross-sense pair.
pub fn pairs(seed: u64) -> Vec<StimulusPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (word, cue_x, cue_y, class) in NOUNS {
        for (k, (ca, cb)) in [(cue_x, cue_y), (cue_x, cue_x), (cue_y, cue_y)].into_iter().enumerate() {
            let same = ca == cb;
            let base = if same { 4.4 } else { 1.6 };
            let relatedness: f64 = (base + rng.gen_range(-0.5..0.5f64)).clamp(1.0, 5.0);
            out.push(StimulusPair {
                pair_id: format!("{word}-{k}"),
                word: word.into(),
                class,
                same_sense: same,
                sentence_a: fill(TEMPLATES[0], ca, word),
                sentence_b: fill(TEMPLATES[1], cb, word),
                cue_a: ca.into(),
                cue_b: cb.into(),
                relatedness: (relatedness * 100.0).round() / 100.0,
                pos: Some("N".into()),
            });
        }
    }
    out
}

pub fn pos_items() -> Vec<PerturbedStimulus> {
    let nouns = NOUN_TARGETS
        .iter()
        .enumerate()
        .map(|(i, (cue, target))| PerturbedStimulus {
            base_pair_id: format!("noun-{i}"),
            kind: PerturbationKind::PosNounTarget,
            sentence: format!("He {cue} the {target}."),
            cue: cue.to_string(),
            target: target.to_string(),
        });
    let verbs = VERBS.iter().enumerate().map(|(i, (cue, target))| PerturbedStimulus {
        base_pair_id: format!("verb-{i}"),
        kind: PerturbationKind::PosVerbTarget,
        sentence: format!("The {cue} was {target}."),
        cue: cue.to_string(),
        target: target.to_string(),
    });
    nouns.chain(verbs).collect()
}

pub fn positional_items(pairs: &[StimulusPair]) -> Vec<PerturbedStimulus> {
    pairs
        .iter()
        .filter(|p| !p.same_sense)
        .filter_map(|p| make_positional_variant(p, "kind of").ok())
        .flatten()
        .collect()
}

pub fn modnoun_items() -> Vec<ModNounItem> {
    NOUNS
        .iter()
        .flat_map(|(word, a, b, _)| [(word, a), (word, b)])
        .enumerate()
        .map(|(i, (word, cue))| ModNounItem {
            item_id: format!("mn-{i}"),
            sentence: fill(TEMPLATES[0], cue, word),
            cue: cue.to_string(),
            target: word.to_string(),
        })
        .collect()
}

pub fn write_perturbed(path: &Path, items: &[PerturbedStimulus]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair_id", "sentence", "target", "cue", "kind"])?;
    for it in items {
        w.write_record([&it.base_pair_id, &it.sentence, &it.target, &it.cue, it.kind.as_str()])?;
    }
    w.flush().map_err(|e| ProbeError::io(path, e))
}

pub fn write_modnoun(path: &Path, items: &[ModNounItem]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["pair_id", "sentence", "cue", "target"])?;
    for it in items {
        w.write_record([&it.item_id, &it.sentence, &it.cue, &it.target])?;
    }
    w.flush().map_err(|e| ProbeError::io(path, e))
}

/// Steps used by the demo family: a compact log-spaced grid.
pub const DEMO_STEPS: [u64; 8] = [0, 1, 2, 8, 64, 512, 2000, 8000];

/// Write `models/`, `data/` and `run.toml` under `root`; returns the config path.
///
/// The model has 4 blocks of 4 heads so the pythia-14m head sets
/// (`(3,1)`..`(3,4)`) are in range.
pub fn write_workspace(root: &Path, seed: u64) -> Result<PathBuf> {
    let words = vocabulary();
    let (tok, tok_json) = word_tokenizer(&words);
    let cfg = tiny_config(4, 4, 16, tok.vocab_len());
    let model_dir = root.join("models").join("demo");
    write_family(&model_dir, &cfg, &tok_json, &DEMO_STEPS, seed)?;

    let data = root.join("data");
    std::fs::create_dir_all(&data).map_err(|e| ProbeError::io(&data, e))?;
    let all = pairs(seed);
    write_pairs(&data.join("pairs.csv"), &all)?;
    write_perturbed(&data.join("pos.csv"), &pos_items())?;
    write_perturbed(&data.join("positional.csv"), &positional_items(&all))?;
    write_modnoun(&data.join("modnoun.csv"), &modnoun_items())?;

    let steps: Vec<String> = DEMO_STEPS.iter().map(u64::to_string).collect();
    let config = format!(
        r#"output_dir = "out"
workers = 2
schedule = [{}]
analyses = ["phase1", "stress_1back", "stress_positional", "stress_pos", "composite", "ablation", "modnoun"]

[[models]]
label = "demo"
path = "models/demo"
run = "seed{seed}"

[datasets]
rawc = "data/pairs.csv"
positional = "data/positional.csv"
pos = "data/pos.csv"
modnoun = "data/modnoun.csv"

[ablation]
preset = "pythia-14m"
kinds = ["zero", "copy"]
"#,
        steps.join(", ")
    );
    let path = root.join("run.toml");
    std::fs::write(&path, config).map_err(|e| ProbeError::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{align_pair, align_spans, make_reversed_modnoun};

    #[test]
    fn demo_items_align_with_demo_tokenizer() {
        let (tok, _) = word_tokenizer(&vocabulary());
        for p in pairs(1) {
            let a = align_pair(&tok, &p).unwrap();
            assert_eq!(a.a.target_span.len(), 1);
            assert_eq!(a.a.cue_span.len(), 1);
        }
        for it in pos_items().iter().chain(&positional_items(&pairs(1))) {
            let a = align_spans(&tok, &it.sentence, &it.target, &it.cue).unwrap();
            assert!(a.cue_span.end <= a.target_span.start);
        }
        for it in modnoun_items() {
            make_reversed_modnoun(&it.sentence, &it.cue, &it.target).unwrap();
        }
        assert_eq!(pairs(1).len(), 36);
    }
}
