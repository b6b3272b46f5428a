// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stimulus ingestion, word-span alignment and perturbation sets.
//!
//! Files are UTF-8 CSV with a header row. Columns are resolved through a
//! [`ColumnMap`]; rows that violate an invariant are collected as
//! [`Reject`]s rather than aborting the load.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{EncodedSentence, Tokenizer};
use crate::error::{ProbeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmbiguityClass {
    Polysemy,
    Homonymy,
}

impl fmt::Display for AmbiguityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Polysemy => "polysemy",
            Self::Homonymy => "homonymy",
        })
    }
}

impl FromStr for AmbiguityClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "polysemy" | "polysemous" | "p" => Ok(Self::Polysemy),
            "homonymy" | "homonymous" | "homonym" | "h" => Ok(Self::Homonymy),
            other => Err(format!("unknown ambiguity class `{other}`")),
        }
    }
}

/// One ambiguous word in two sentence contexts with a human relatedness rating.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulusPair {
    pub pair_id: String,
    pub word: String,
    pub class: AmbiguityClass,
    pub same_sense: bool,
    pub sentence_a: String,
    pub sentence_b: String,
    pub cue_a: String,
    pub cue_b: String,
    /// In [1, 5].
    pub relatedness: f64,
    /// Part of speech of `word`, when the file carries one.
    pub pos: Option<String>,
}

/// File column names for each canonical field.
///
/// `pair_id` and `pos` are optional; a missing `pair_id` column yields
/// ids of the form `<word>-<row>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub pair_id: Option<String>,
    pub word: String,
    pub class: String,
    pub same_sense: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub cue_a: String,
    pub cue_b: String,
    pub relatedness: String,
    pub pos: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ColumnMap {
    /// The column names written by [`write_pairs`].
    pub fn canonical() -> Self {
        Self {
            pair_id: Some("pair_id".into()),
            word: "word".into(),
            class: "class".into(),
            same_sense: "same_sense".into(),
            sentence_a: "sentence_a".into(),
            sentence_b: "sentence_b".into(),
            cue_a: "cue_a".into(),
            cue_b: "cue_b".into(),
            relatedness: "relatedness".into(),
            pos: Some("pos".into()),
        }
    }

    /// Column names of the public RAW-C release.
    pub fn rawc() -> Self {
        Self {
            pair_id: None,
            word: "word".into(),
            class: "ambiguity_type".into(),
            same_sense: "same".into(),
            sentence_a: "sentence1".into(),
            sentence_b: "sentence2".into(),
            cue_a: "disambiguating_word1".into(),
            cue_b: "disambiguating_word2".into(),
            relatedness: "mean_relatedness".into(),
            pos: Some("Class".into()),
        }
    }
}

/// A row excluded from a load, with its 1-based data-row number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct PairSet {
    pub pairs: Vec<StimulusPair>,
    pub rejects: Vec<Reject>,
}

impl PairSet {
    pub fn count(&self, class: AmbiguityClass) -> usize {
        self.pairs.iter().filter(|p| p.class == class).count()
    }

    /// Pairs whose `pos` is a noun tag (`N`, `noun`, `NN*`). Pairs without
    /// a tag are kept.
    pub fn nouns_only(&self) -> Vec<StimulusPair> {
        self.pairs
            .iter()
            .filter(|p| p.pos.as_deref().map_or(true, is_noun_tag))
            .cloned()
            .collect()
    }
}

fn is_noun_tag(tag: &str) -> bool {
    let t = tag.trim().to_ascii_lowercase();
    t == "n" || t == "noun" || t.starts_with("nn")
}

struct Header {
    index: HashMap<String, usize>,
    lower: HashMap<String, usize>,
}

impl Header {
    fn new(record: &csv::StringRecord) -> Self {
        let mut index = HashMap::new();
        let mut lower = HashMap::new();
        for (i, name) in record.iter().enumerate() {
            let name = name.trim().trim_start_matches('\u{feff}');
            index.entry(name.to_string()).or_insert(i);
            lower.entry(name.to_ascii_lowercase()).or_insert(i);
        }
        Self { index, lower }
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.index
            .get(name)
            .or_else(|| self.lower.get(&name.to_ascii_lowercase()))
            .copied()
    }

    fn require(&self, name: &str, origin: &str) -> Result<usize> {
        self.find(name).ok_or_else(|| {
            let mut have: Vec<_> = self.index.keys().cloned().collect();
            have.sort();
            ProbeError::Schema(format!("{origin}: no column `{name}` (have: {})", have.join(", ")))
        })
    }
}

fn parse_bool(s: &str) -> std::result::Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "t" | "1" | "yes" | "y" | "same" => Ok(true),
        "false" | "f" | "0" | "no" | "n" | "different" => Ok(false),
        other => Err(format!("cannot read `{other}` as a boolean")),
    }
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(input)
}

pub fn load_pairs(path: &Path, schema: &ColumnMap) -> Result<PairSet> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    read_pairs(file, schema, &path.display().to_string())
}

/// Parse pairs from any reader; `origin` labels schema errors.
pub fn read_pairs<R: Read>(input: R, schema: &ColumnMap, origin: &str) -> Result<PairSet> {
    let mut reader = csv_reader(input);
    let header = Header::new(reader.headers()?);
    let col = |name: &str| header.require(name, origin);
    let c_word = col(&schema.word)?;
    let c_class = col(&schema.class)?;
    let c_same = col(&schema.same_sense)?;
    let c_sa = col(&schema.sentence_a)?;
    let c_sb = col(&schema.sentence_b)?;
    let c_ca = col(&schema.cue_a)?;
    let c_cb = col(&schema.cue_b)?;
    let c_rel = col(&schema.relatedness)?;
    let c_id = schema.pair_id.as_deref().map(col).transpose()?;
    let c_pos = schema.pos.as_deref().map(col).transpose()?;

    let mut out = PairSet::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                out.rejects.push(Reject {
                    row,
                    reason: format!("malformed row: {e}"),
                });
                continue;
            }
        };
        let field = |c: usize| record.get(c).unwrap_or("").to_string();
        let parsed = (|| -> std::result::Result<StimulusPair, String> {
            let word = field(c_word).trim().to_string();
            let relatedness: f64 = field(c_rel)
                .trim()
                .parse()
                .map_err(|_| format!("relatedness `{}` is not a number", field(c_rel)))?;
            if !(1.0..=5.0).contains(&relatedness) {
                return Err(format!("relatedness {relatedness} outside [1, 5]"));
            }
            let pair = StimulusPair {
                pair_id: c_id.map(field).unwrap_or_else(|| format!("{word}-{row}")),
                class: field(c_class).parse()?,
                same_sense: parse_bool(&field(c_same))?,
                sentence_a: field(c_sa),
                sentence_b: field(c_sb),
                cue_a: field(c_ca).trim().to_string(),
                cue_b: field(c_cb).trim().to_string(),
                relatedness,
                pos: c_pos.map(field).filter(|s| !s.is_empty()),
                word,
            };
            for (sentence, cue) in [(&pair.sentence_a, &pair.cue_a), (&pair.sentence_b, &pair.cue_b)] {
                if pair.word.is_empty() || cue.is_empty() {
                    return Err("empty word or cue".into());
                }
                if find_word(sentence, &pair.word, Occurrence::Last).is_none() {
                    return Err(format!("`{}` not found in \"{sentence}\"", pair.word));
                }
                if find_word(sentence, cue, Occurrence::First).is_none() {
                    return Err(format!("cue `{cue}` not found in \"{sentence}\""));
                }
            }
            Ok(pair)
        })();
        match parsed {
            Ok(p) => out.pairs.push(p),
            Err(reason) => out.rejects.push(Reject { row, reason }),
        }
    }
    log::info!(
        "{origin}: {} pairs ({} polysemy, {} homonymy), {} rejected",
        out.pairs.len(),
        out.count(AmbiguityClass::Polysemy),
        out.count(AmbiguityClass::Homonymy),
        out.rejects.len()
    );
    Ok(out)
}

/// Write pairs under the canonical column names.
pub fn write_pairs(path: &Path, pairs: &[StimulusPair]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "pair_id",
        "word",
        "class",
        "same_sense",
        "sentence_a",
        "sentence_b",
        "cue_a",
        "cue_b",
        "relatedness",
        "pos",
    ])?;
    for p in pairs {
        w.write_record([
            p.pair_id.as_str(),
            &p.word,
            &p.class.to_string(),
            if p.same_sense { "true" } else { "false" },
            &p.sentence_a,
            &p.sentence_b,
            &p.cue_a,
            &p.cue_b,
            &p.relatedness.to_string(),
            p.pos.as_deref().unwrap_or(""),
        ])?;
    }
    w.flush().map_err(|e| ProbeError::io(path, e))
}

/// Rejects as JSON lines `{"row": .., "reason": ..}`.
pub fn write_rejects(path: &Path, rejects: &[Reject]) -> Result<()> {
    let mut text = String::new();
    for r in rejects {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| ProbeError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Occurrence {
    First,
    Last,
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

fn whole_word_matches(sentence: &str, word: &str, ignore_case: bool) -> Vec<Range<usize>> {
    let s = sentence.as_bytes();
    let w = word.as_bytes();
    if w.is_empty() || w.len() > s.len() {
        return Vec::new();
    }
    (0..=s.len() - w.len())
        .filter(|&i| sentence.is_char_boundary(i) && sentence.is_char_boundary(i + w.len()))
        .filter(|&i| {
            let window = &s[i..i + w.len()];
            if ignore_case {
                window.eq_ignore_ascii_case(w)
            } else {
                window == w
            }
        })
        .filter(|&i| {
            let before_ok = i == 0 || !is_word_byte(s[i - 1]) || !is_word_byte(w[0]);
            let end = i + w.len();
            let after_ok = end == s.len() || !is_word_byte(s[end]) || !is_word_byte(w[w.len() - 1]);
            before_ok && after_ok
        })
        .map(|i| i..i + w.len())
        .collect()
}

fn pick(sentence: &str, matches: Vec<Range<usize>>, which: Occurrence) -> Option<Range<usize>> {
    let s = sentence.as_bytes();
    let preferred: Vec<_> = matches
        .iter()
        .filter(|r| r.start == 0 || s[r.start - 1] == b' ')
        .cloned()
        .collect();
    let pool = if preferred.is_empty() { matches } else { preferred };
    match which {
        Occurrence::First => pool.into_iter().next(),
        Occurrence::Last => pool.into_iter().last(),
    }
}

/// Byte range of a whole-word occurrence of `word`.
///
/// Occurrences preceded by a space or at position 0 win over others.
/// Matching is case-sensitive first, then ASCII case-insensitive with a
/// warning.
pub fn find_word(sentence: &str, word: &str, which: Occurrence) -> Option<Range<usize>> {
    find_word_excluding(sentence, word, which, None)
}

fn find_word_excluding(
    sentence: &str,
    word: &str,
    which: Occurrence,
    avoid: Option<&Range<usize>>,
) -> Option<Range<usize>> {
    let disjoint = |r: &Range<usize>| avoid.map_or(true, |a| r.end <= a.start || a.end <= r.start);
    for ignore_case in [false, true] {
        let matches: Vec<_> = whole_word_matches(sentence, word, ignore_case)
            .into_iter()
            .filter(disjoint)
            .collect();
        if let Some(r) = pick(sentence, matches, which) {
            if ignore_case {
                log::warn!("`{word}` matched case-insensitively in \"{sentence}\"");
            }
            return Some(r);
        }
    }
    None
}

/// An encoded sentence with the token ranges of its target and cue words.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSentence {
    pub encoded: EncodedSentence,
    pub target_span: Range<usize>,
    pub cue_span: Range<usize>,
}

/// Byte ranges of cue (first occurrence) and target (last occurrence
/// disjoint from the cue).
pub fn locate(sentence: &str, target: &str, cue: &str) -> Result<(Range<usize>, Range<usize>)> {
    let missing = |word: &str| ProbeError::Alignment {
        word: word.to_string(),
        sentence: sentence.to_string(),
    };
    let cue_bytes = find_word(sentence, cue, Occurrence::First).ok_or_else(|| missing(cue))?;
    let target_bytes =
        find_word_excluding(sentence, target, Occurrence::Last, Some(&cue_bytes)).ok_or_else(|| missing(target))?;
    Ok((target_bytes, cue_bytes))
}

pub fn align_spans(tokenizer: &Tokenizer, sentence: &str, target: &str, cue: &str) -> Result<AlignedSentence> {
    let (target_bytes, cue_bytes) = locate(sentence, target, cue)?;
    let encoded = tokenizer.encode(sentence)?;
    let target_span = encoded.tokens_overlapping(target_bytes);
    let cue_span = encoded.tokens_overlapping(cue_bytes);
    if target_span.is_empty() || cue_span.is_empty() {
        return Err(ProbeError::Alignment {
            word: if target_span.is_empty() { target } else { cue }.to_string(),
            sentence: sentence.to_string(),
        });
    }
    if target_span.start < cue_span.end && cue_span.start < target_span.end {
        // Both words fell inside one token.
        return Err(ProbeError::Alignment {
            word: format!("{cue}/{target} (shared token)"),
            sentence: sentence.to_string(),
        });
    }
    Ok(AlignedSentence {
        encoded,
        target_span,
        cue_span,
    })
}

/// Both sentences of a pair, aligned, with the pair's rating.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPair {
    pub pair_id: String,
    pub a: AlignedSentence,
    pub b: AlignedSentence,
    pub relatedness: f64,
}

pub fn align_pair(tokenizer: &Tokenizer, pair: &StimulusPair) -> Result<AlignedPair> {
    Ok(AlignedPair {
        pair_id: pair.pair_id.clone(),
        a: align_spans(tokenizer, &pair.sentence_a, &pair.word, &pair.cue_a)?,
        b: align_spans(tokenizer, &pair.sentence_b, &pair.word, &pair.cue_b)?,
        relatedness: pair.relatedness,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    Positional,
    PosNounTarget,
    PosVerbTarget,
}

impl PerturbationKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Positional => "positional",
            Self::PosNounTarget => "pos_noun_target",
            Self::PosVerbTarget => "pos_verb_target",
        }
    }
}

impl FromStr for PerturbationKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positional" => Ok(Self::Positional),
            "pos_noun_target" | "noun" => Ok(Self::PosNounTarget),
            "pos_verb_target" | "verb" => Ok(Self::PosVerbTarget),
            other => Err(format!("unknown stimulus kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedStimulus {
    pub base_pair_id: String,
    pub kind: PerturbationKind,
    pub sentence: String,
    pub cue: String,
    pub target: String,
}

/// Cue and target byte ranges when the cue is the word right before the target.
fn adjacent(sentence: &str, cue: &str, target: &str) -> Result<(Range<usize>, Range<usize>)> {
    let (t, c) = locate(sentence, target, cue)?;
    let gap = sentence.get(c.end..t.start);
    match gap {
        Some(g) if c.end <= t.start && !g.is_empty() && g.chars().all(char::is_whitespace) => Ok((c, t)),
        _ => Err(ProbeError::Argument(format!(
            "`{cue}` does not immediately precede `{target}` in \"{sentence}\""
        ))),
    }
}

/// Insert `phrase` between an adjacent cue and target in both sentences.
pub fn make_positional_variant(pair: &StimulusPair, phrase: &str) -> Result<[PerturbedStimulus; 2]> {
    let one = |sentence: &str, cue: &str| -> Result<PerturbedStimulus> {
        let (c, _) = adjacent(sentence, cue, &pair.word)?;
        let phrase = phrase.trim();
        let sentence = if phrase.is_empty() {
            sentence.to_string()
        } else {
            format!("{} {phrase}{}", &sentence[..c.end], &sentence[c.end..])
        };
        Ok(PerturbedStimulus {
            base_pair_id: pair.pair_id.clone(),
            kind: PerturbationKind::Positional,
            sentence,
            cue: cue.to_string(),
            target: pair.word.clone(),
        })
    };
    Ok([one(&pair.sentence_a, &pair.cue_a)?, one(&pair.sentence_b, &pair.cue_b)?])
}

/// Swap an adjacent cue and target; every other byte is kept.
pub fn make_reversed_modnoun(sentence: &str, cue: &str, target: &str) -> Result<String> {
    if cue == target {
        return Ok(sentence.to_string());
    }
    let (c, t) = adjacent(sentence, cue, target)?;
    Ok(format!(
        "{}{}{}{}{}",
        &sentence[..c.start],
        &sentence[t.clone()],
        &sentence[c.end..t.start],
        &sentence[c],
        &sentence[t.end..]
    ))
}

#[derive(Debug, Clone, Default)]
pub struct PerturbedSet {
    pub items: Vec<PerturbedStimulus>,
    pub rejects: Vec<Reject>,
}

/// Load a perturbation file with columns `sentence, target, cue, kind` and
/// an optional `pair_id`.
pub fn load_pos_stimuli(path: &Path) -> Result<PerturbedSet> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    read_pos_stimuli(file, &path.display().to_string())
}

pub fn read_pos_stimuli<R: Read>(input: R, origin: &str) -> Result<PerturbedSet> {
    let mut reader = csv_reader(input);
    let header = Header::new(reader.headers()?);
    let c_sentence = header.require("sentence", origin)?;
    let c_target = header.require("target", origin)?;
    let c_cue = header.require("cue", origin)?;
    let c_kind = header.require("kind", origin)?;
    let c_id = header.find("pair_id").or_else(|| header.find("base_pair_id"));
    let mut out = PerturbedSet::default();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = record.map_err(|e| format!("malformed row: {e}")).and_then(|r| {
            let field = |c: usize| r.get(c).unwrap_or("").to_string();
            let item = PerturbedStimulus {
                base_pair_id: c_id.map(field).unwrap_or_else(|| format!("row{row}")),
                kind: field(c_kind).parse()?,
                sentence: field(c_sentence),
                cue: field(c_cue).trim().to_string(),
                target: field(c_target).trim().to_string(),
            };
            locate(&item.sentence, &item.target, &item.cue).map_err(|e| e.to_string())?;
            Ok(item)
        });
        match parsed {
            Ok(item) => out.items.push(item),
            Err(reason) => out.rejects.push(Reject { row, reason }),
        }
    }
    Ok(out)
}

/// A modifier-noun item: `cue` modifies `target` and directly precedes it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModNounItem {
    pub item_id: String,
    pub sentence: String,
    pub cue: String,
    pub target: String,
}

/// Modifier-noun items from columns `sentence, cue, target` (optional
/// `pair_id`). Items whose cue is not adjacent to the target are rejected.
pub fn load_modnoun(path: &Path) -> Result<(Vec<ModNounItem>, Vec<Reject>)> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let origin = path.display().to_string();
    let mut reader = csv_reader(file);
    let header = Header::new(reader.headers()?);
    let c_sentence = header.require("sentence", &origin)?;
    let c_target = header.require("target", &origin)?;
    let c_cue = header.require("cue", &origin)?;
    let c_id = header.find("pair_id");
    let mut items = Vec::new();
    let mut rejects = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = record.map_err(|e| format!("malformed row: {e}")).and_then(|r| {
            let field = |c: usize| r.get(c).unwrap_or("").trim().to_string();
            let item = ModNounItem {
                item_id: c_id.map(field).unwrap_or_else(|| format!("row{row}")),
                sentence: r.get(c_sentence).unwrap_or("").to_string(),
                cue: field(c_cue),
                target: field(c_target),
            };
            adjacent(&item.sentence, &item.cue, &item.target).map_err(|e| e.to_string())?;
            Ok(item)
        });
        match parsed {
            Ok(item) => items.push(item),
            Err(reason) => rejects.push(Reject { row, reason }),
        }
    }
    Ok((items, rejects))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefers_space_delimited_occurrence() {
        // "(lamb" is a whole word but the spaced one wins.
        let s = "(lamb) and lamb.";
        assert_eq!(find_word(s, "lamb", Occurrence::First), Some(11..15));
        assert_eq!(find_word("Lamb is food.", "lamb", Occurrence::First), Some(0..4));
        assert_eq!(find_word("lambs", "lamb", Occurrence::First), None);
    }

    #[test]
    fn target_avoids_cue_overlap() {
        let (t, c) = locate("the case case", "case", "case").unwrap();
        assert_eq!(c, 4..8);
        assert_eq!(t, 9..13);
    }
}
