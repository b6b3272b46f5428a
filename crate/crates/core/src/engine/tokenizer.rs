// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE tokenizer read from a `tokenizer.json` document.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use fancy_regex::Regex;
use serde::Deserialize;

use crate::error::{ProbeError, Result};

const GPT2_SPLIT: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// Token ids for one sentence, with the byte span each token covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSentence {
    pub token_ids: Vec<u32>,
    /// Half-open byte ranges into `source_text`; consecutive and covering.
    pub byte_offsets: Vec<Range<usize>>,
    pub source_text: String,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Token indices whose byte range intersects `bytes`.
    pub fn tokens_overlapping(&self, bytes: Range<usize>) -> Range<usize> {
        let first = self
            .byte_offsets
            .iter()
            .position(|r| r.end > bytes.start && r.start < bytes.end);
        match first {
            None => 0..0,
            Some(f) => {
                let last = self.byte_offsets[f..]
                    .iter()
                    .take_while(|r| r.start < bytes.end)
                    .count();
                f..f + last
            }
        }
    }
}

#[derive(Deserialize)]
struct TokenizerDocument {
    #[serde(default)]
    added_tokens: Vec<AddedTokenDoc>,
    #[serde(default)]
    pre_tokenizer: Option<serde_json::Value>,
    model: BpeModelDoc,
}

#[derive(Deserialize)]
struct AddedTokenDoc {
    id: u32,
    content: String,
}

#[derive(Deserialize)]
struct BpeModelDoc {
    vocab: HashMap<String, u32>,
    merges: Vec<MergeDoc>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MergeDoc {
    Joined(String),
    Pair([String; 2]),
}

/// GPT-2 style byte-level BPE.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, u32>,
    id_to_token: HashMap<u32, String>,
    merge_ranks: HashMap<(String, String), usize>,
    /// Literal tokens matched before BPE, longest first.
    added: Vec<(String, u32)>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    splitter: Regex,
}

/// The reversible byte → printable-char table used by byte-level BPE.
pub fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = (b'!'..=b'~').contains(&b) || (0xA1..=0xAC).contains(&b) || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from(b)
        } else {
            let c = char::from_u32(256 + extra).expect("valid codepoint");
            extra += 1;
            c
        };
    }
    table
}

impl Tokenizer {
    pub fn from_json_str(text: &str) -> std::result::Result<Self, String> {
        let doc: TokenizerDocument = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let Some(pre) = &doc.pre_tokenizer {
            if pre.get("add_prefix_space").and_then(|v| v.as_bool()) == Some(true) {
                return Err("add_prefix_space tokenizers are not supported".into());
            }
        }
        let mut merge_ranks = HashMap::with_capacity(doc.model.merges.len());
        for (rank, m) in doc.model.merges.into_iter().enumerate() {
            let pair = match m {
                MergeDoc::Joined(s) => {
                    let (a, b) = s
                        .split_once(' ')
                        .ok_or_else(|| format!("merge {rank} has no separator: {s:?}"))?;
                    (a.to_string(), b.to_string())
                }
                MergeDoc::Pair([a, b]) => (a, b),
            };
            merge_ranks.entry(pair).or_insert(rank);
        }
        let mut id_to_token: HashMap<u32, String> = doc.model.vocab.iter().map(|(k, v)| (*v, k.clone())).collect();
        let mut added: Vec<(String, u32)> = doc
            .added_tokens
            .into_iter()
            .filter(|t| !t.content.is_empty())
            .map(|t| (t.content, t.id))
            .collect();
        for (content, id) in &added {
            id_to_token.insert(*id, content.clone());
        }
        added.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        let byte_to_char = bytes_to_unicode();
        let char_to_byte = byte_to_char.iter().enumerate().map(|(b, c)| (*c, b as u8)).collect();
        Ok(Self {
            vocab: doc.model.vocab,
            id_to_token,
            merge_ranks,
            added,
            byte_to_char,
            char_to_byte,
            splitter: Regex::new(GPT2_SPLIT).expect("static pattern"),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::load(path, e.to_string()))?;
        Self::from_json_str(&text).map_err(|reason| ProbeError::load(path, reason))
    }

    pub fn vocab_len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn token_to_id(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn id_to_token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(&id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<EncodedSentence> {
        if text.is_empty() {
            return Err(ProbeError::Argument("cannot encode empty text".into()));
        }
        let mut ids = Vec::new();
        let mut offsets = Vec::new();
        let mut segment_start = 0;
        let mut pos = 0;
        while pos < text.len() {
            let hit = self
                .added
                .iter()
                .find(|(content, _)| text[pos..].starts_with(content.as_str()));
            match hit {
                Some((content, id)) => {
                    self.encode_segment(text, segment_start..pos, &mut ids, &mut offsets)?;
                    ids.push(*id);
                    offsets.push(pos..pos + content.len());
                    pos += content.len();
                    segment_start = pos;
                }
                None => {
                    pos += text[pos..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
        self.encode_segment(text, segment_start..text.len(), &mut ids, &mut offsets)?;
        Ok(EncodedSentence {
            token_ids: ids,
            byte_offsets: offsets,
            source_text: text.to_string(),
        })
    }

    fn encode_segment(
        &self,
        text: &str,
        range: Range<usize>,
        ids: &mut Vec<u32>,
        offsets: &mut Vec<Range<usize>>,
    ) -> Result<()> {
        let segment = &text[range.clone()];
        for piece in self.splitter.find_iter(segment) {
            let piece = piece.map_err(|e| ProbeError::Argument(format!("pre-tokenizer: {e}")))?;
            let mut cursor = range.start + piece.start();
            for symbol in self.bpe(piece.as_str()) {
                let id = self
                    .vocab
                    .get(&symbol)
                    .copied()
                    .ok_or_else(|| ProbeError::Argument(format!("symbol {symbol:?} missing from vocabulary")))?;
                let width = symbol.chars().count();
                ids.push(id);
                offsets.push(cursor..cursor + width);
                cursor += width;
            }
        }
        Ok(())
    }

    fn bpe(&self, piece: &str) -> Vec<String> {
        let mut symbols: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        loop {
            let best = symbols
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|rank| (*rank, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len()
                    && self.merge_ranks.get(&(symbols[i].clone(), symbols[i + 1].clone())) == Some(&rank)
                {
                    merged.push(format!("{}{}", symbols[i], symbols[i + 1]));
                    i += 2;
                } else {
                    merged.push(symbols[i].clone());
                    i += 1;
                }
            }
            symbols = merged;
        }
        symbols
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for id in ids {
            let token = self
                .id_to_token
                .get(id)
                .ok_or_else(|| ProbeError::Argument(format!("unknown token id {id}")))?;
            if self.added.iter().any(|(c, i)| i == id && c == token) {
                bytes.extend_from_slice(token.as_bytes());
                continue;
            }
            for ch in token.chars() {
                let b = self
                    .char_to_byte
                    .get(&ch)
                    .ok_or_else(|| ProbeError::Argument(format!("token {token:?} is not byte-level")))?;
                bytes.push(*b);
            }
        }
        String::from_utf8(bytes).map_err(|e| ProbeError::Argument(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// Byte-level alphabet: maps a raw byte to its vocabulary character.
    pub fn byte_symbol(&self, b: u8) -> char {
        self.byte_to_char[b as usize]
    }
}

/// Serialize a minimal `tokenizer.json` for the given vocabulary and merges.
pub fn tokenizer_document(vocab: &[(String, u32)], merges: &[(String, String)]) -> String {
    let vocab_map: serde_json::Map<String, serde_json::Value> = vocab
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::from(*v)))
        .collect();
    let merges: Vec<String> = merges.iter().map(|(a, b)| format!("{a} {b}")).collect();
    let doc = serde_json::json!({
        "version": "1.0",
        "added_tokens": [],
        "normalizer": null,
        "pre_tokenizer": {"type": "ByteLevel", "add_prefix_space": false, "trim_offsets": true, "use_regex": true},
        "decoder": {"type": "ByteLevel", "add_prefix_space": false, "trim_offsets": true, "use_regex": true},
        "model": {"type": "BPE", "dropout": null, "unk_token": null, "continuing_subword_prefix": null,
                  "end_of_word_suffix": null, "fuse_unk": false, "byte_fallback": false,
                  "vocab": vocab_map, "merges": merges}
    });
    serde_json::to_string_pretty(&doc).expect("tokenizer serializes")
}
