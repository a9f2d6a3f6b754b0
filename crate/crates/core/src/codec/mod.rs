//! Textual side of the visual refiner: the spatial-representation grammar,
//! coordinate quantization, the closed vocabulary, tokenization and the
//! whole-object masking used by masked spatial prediction.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::scene::{SceneConfig, COUNT_WORDS};
use crate::templates;

mod masking;
mod spatial;

pub use masking::mask_whole_object;
pub use spatial::{
    coord_string, dequantize_coord, parse_spatial, quantize_coord, serialize_spatial, ParseDiagnostic,
};

pub const SPECIALS: [&str; 8] = ["[PAD]", "[BOS]", "[CLS]", "[DEC]", "[MLM]", "[MASK]", "[EOS]", "[UNK]"];
pub const STRUCTURAL: [&str; 6] = ["\u{27e8}br\u{27e9}", "\u{27e8}/br\u{27e9}", "\u{27e8}T\u{27e9}", "\u{27e8}/T\u{27e9}", "\u{27e8}Bbox\u{27e9}", "\u{27e8}/Box\u{27e9}"];
pub const PUNCT: [&str; 6] = ["(", ")", ",", "?", ".", ":"];
pub const N_COORDS: usize = 101;

/// Words used by the caption grammar, the QA generator and the multi-choice
/// option labels, beyond counts, colors and tags.
const BASE_WORDS: [&str; 28] = [
    "a", "photo", "of", "and", "the", "is", "left", "right", "above", "below", "top", "middle",
    "bottom", "center", "how", "many", "are", "in", "image", "what", "color", "where", "there",
    "yes", "no", "b", "c", "d",
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary file is missing required token {0:?}")]
    MissingToken(String),
    #[error("vocabulary file has duplicate token {0:?}")]
    DuplicateToken(String),
}

/// Per-token role in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Spatial,
    Caption,
    Instruction,
    Response,
}

/// Dense, stable token table: specials, structural, punctuation, the 101
/// coordinate bins, configured tags, then the closed word list. Content
/// tokens (tags and words) all live past the coordinate section, which is
/// what masking needs to distinguish.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn build(config: &SceneConfig) -> Vocabulary {
        let mut tokens: Vec<String> = Vec::new();
        tokens.extend(SPECIALS.iter().map(|s| s.to_string()));
        tokens.extend(STRUCTURAL.iter().map(|s| s.to_string()));
        tokens.extend(PUNCT.iter().map(|s| s.to_string()));
        tokens.extend((0..N_COORDS).map(coord_string));
        tokens.extend(config.tags.iter().cloned());

        let mut words: Vec<String> = BASE_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(COUNT_WORDS.iter().map(|s| s.to_string()));
        words.extend(config.colors.iter().cloned());
        words.extend(templates::all_template_words());
        words.sort();
        words.dedup();
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocabulary {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i as u32);
        }
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn pad(&self) -> u32 {
        0
    }
    pub fn bos(&self) -> u32 {
        1
    }
    pub fn cls(&self) -> u32 {
        2
    }
    pub fn dec(&self) -> u32 {
        3
    }
    pub fn mlm(&self) -> u32 {
        4
    }
    pub fn mask(&self) -> u32 {
        5
    }
    pub fn eos(&self) -> u32 {
        6
    }
    pub fn unk(&self) -> u32 {
        7
    }

    const COORD_BASE: u32 = (SPECIALS.len() + STRUCTURAL.len() + PUNCT.len()) as u32;
    const CONTENT_BASE: u32 = Self::COORD_BASE + N_COORDS as u32;

    pub fn coord_id(&self, bin: usize) -> u32 {
        debug_assert!(bin < N_COORDS);
        Self::COORD_BASE + bin as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIALS.len() as u32
    }

    pub fn is_structural(&self, id: u32) -> bool {
        id >= SPECIALS.len() as u32 && id < Self::COORD_BASE
    }

    pub fn is_coord(&self, id: u32) -> bool {
        id >= Self::COORD_BASE && id < Self::CONTENT_BASE
    }

    /// Tags and words: everything past the coordinate section.
    pub fn is_content(&self, id: u32) -> bool {
        id >= Self::CONTENT_BASE
    }

    /// Coordinate bin of a coord token id.
    pub fn coord_bin(&self, id: u32) -> Option<usize> {
        self.is_coord(id).then(|| (id - Self::COORD_BASE) as usize)
    }

    /// One token per line, line number = id; round-trips bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|source| VocabError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: &Path) -> Result<Vocabulary, VocabError> {
        let text = fs::read_to_string(path)
            .map_err(|source| VocabError::Io { path: path.display().to_string(), source })?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        let mut seen = HashMap::new();
        for t in &tokens {
            if seen.insert(t.clone(), ()).is_some() {
                return Err(VocabError::DuplicateToken(t.clone()));
            }
        }
        // The fixed sections are positional; verify them exactly.
        let fixed: Vec<String> = SPECIALS
            .iter()
            .chain(&STRUCTURAL)
            .chain(&PUNCT)
            .map(|s| s.to_string())
            .chain((0..N_COORDS).map(coord_string))
            .collect();
        for (i, required) in fixed.iter().enumerate() {
            if tokens.get(i) != Some(required) {
                return Err(VocabError::MissingToken(required.clone()));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Tokenized text, per-token segment labels, and the object spans covering
/// each serialized spatial block.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segments: Vec<Segment>,
    /// (start, end, object index); each span begins at a block-open token
    /// and ends just past its block-close token.
    pub object_spans: Vec<(usize, usize, usize)>,
    pub diagnostics: Vec<String>,
}

impl TokenSequence {
    pub fn empty() -> TokenSequence {
        TokenSequence { ids: vec![], segments: vec![], object_spans: vec![], diagnostics: vec![] }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends another sequence, shifting its object spans.
    pub fn extend(&mut self, other: TokenSequence) {
        let offset = self.ids.len();
        self.ids.extend(other.ids);
        self.segments.extend(other.segments);
        self.object_spans
            .extend(other.object_spans.into_iter().map(|(s, e, i)| (s + offset, e + offset, i)));
        self.diagnostics.extend(other.diagnostics);
    }

    pub fn push(&mut self, id: u32, segment: Segment) {
        self.ids.push(id);
        self.segments.push(segment);
    }
}

/// Whitespace-and-punctuation word splitting over the closed vocabulary.
/// Structural angle-bracket tokens and coordinate strings lex as single
/// tokens; unknown words become `[UNK]` with a diagnostic. Input is
/// lowercased, so round-trip identity holds on lowercase vocabulary text.
pub fn tokenize(vocab: &Vocabulary, text: &str, segment: Segment) -> TokenSequence {
    let mut seq = TokenSequence::empty();
    let chars: Vec<char> = text.chars().collect();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\u{27e8}' {
            let close = chars[i..].iter().position(|&c| c == '\u{27e9}');
            match close {
                Some(rel) => {
                    let tok: String = chars[i..=i + rel].iter().collect();
                    match vocab.id(&tok) {
                        Some(id) => seq.push(id, segment),
                        None => {
                            seq.push(vocab.unk(), segment);
                            seq.diagnostics.push(format!("unknown structural token {tok:?}"));
                        }
                    }
                    i += rel + 1;
                }
                None => {
                    seq.push(vocab.unk(), segment);
                    seq.diagnostics.push("unterminated structural token".to_string());
                    i = chars.len();
                }
            }
            continue;
        }
        if PUNCT.contains(&c.to_string().as_str()) {
            // Coordinate strings start with 0 or 1 and are handled below, so
            // a bare '.' here is sentence punctuation.
            seq.push(vocab.id(&c.to_string()).unwrap(), segment);
            i += 1;
            continue;
        }
        // Coordinate literal: [01].dd with a non-alphanumeric boundary.
        if (c == '0' || c == '1')
            && chars.get(i + 1) == Some(&'.')
            && chars.get(i + 2).is_some_and(|c| c.is_ascii_digit())
            && chars.get(i + 3).is_some_and(|c| c.is_ascii_digit())
            && !chars.get(i + 4).is_some_and(|c| c.is_alphanumeric())
        {
            let tok: String = chars[i..i + 4].iter().collect();
            match vocab.id(&tok) {
                Some(id) => seq.push(id, segment),
                None => {
                    seq.push(vocab.unk(), segment);
                    seq.diagnostics.push(format!("unknown coordinate {tok:?}"));
                }
            }
            i += 4;
            continue;
        }
        // Word: letters, digits, hyphens, apostrophes.
        let start = i;
        while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '-' || chars[i] == '\'') {
            i += 1;
        }
        if i == start {
            seq.push(vocab.unk(), segment);
            seq.diagnostics.push(format!("unexpected character {:?}", chars[i]));
            i += 1;
            continue;
        }
        let word: String = chars[start..i].iter().collect::<String>().to_lowercase();
        match vocab.id(&word) {
            Some(id) => seq.push(id, segment),
            None => {
                seq.push(vocab.unk(), segment);
                seq.diagnostics.push(format!("unknown word {word:?}"));
            }
        }
    }
    seq
}

/// Serializes the objects and tokenizes them, recording one object span per
/// block.
pub fn tokenize_spatial(vocab: &Vocabulary, objects: &[crate::scene::VisualObject]) -> TokenSequence {
    let mut seq = TokenSequence::empty();
    for (idx, obj) in objects.iter().enumerate() {
        let text = serialize_spatial(std::slice::from_ref(obj));
        let part = tokenize(vocab, &text, Segment::Spatial);
        let start = seq.ids.len();
        let end = start + part.ids.len();
        seq.extend(part);
        seq.object_spans.push((start, end, idx));
    }
    seq
}

/// Inverse of [`tokenize`] on vocabulary-clean text: emits canonical spacing
/// around punctuation and structural tokens.
pub fn detokenize(vocab: &Vocabulary, ids: &[u32]) -> String {
    let mut out = String::new();
    let mut prev: Option<&str> = None;
    for &id in ids {
        let tok = vocab.token(id);
        if let Some(p) = prev {
            out.push_str(gap(p, tok));
        }
        out.push_str(tok);
        prev = Some(tok);
    }
    out
}

fn is_angle(tok: &str) -> bool {
    tok.starts_with('\u{27e8}')
}

fn gap(prev: &str, next: &str) -> &'static str {
    if matches!(next, ")" | "," | "?" | "." | ":") {
        return "";
    }
    if prev == "(" {
        return "";
    }
    if prev == "," {
        return if next == "(" { "" } else { " " };
    }
    if matches!(prev, "." | "?" | ":") {
        return " ";
    }
    if is_angle(prev) && (is_angle(next) || next == "(") {
        return "";
    }
    if prev == ")" && is_angle(next) {
        return "";
    }
    " "
}

#[cfg(test)]
mod tests;
