//! The spatial-representation grammar:
//! `⟨br⟩⟨T⟩ tag ⟨/T⟩⟨Bbox⟩(x1, y1),(x2, y2)⟨/Box⟩⟨/br⟩`.
//!
//! The serializer emits exactly this form (note the asymmetric `⟨Bbox⟩` /
//! `⟨/Box⟩` pair). The parser is liberal: it also accepts `⟨/Bbox⟩`, tolerates
//! arbitrary whitespace, skips malformed blocks with a diagnostic, and never
//! aborts — generated text is untrusted.

use std::fmt::Write as _;

use crate::scene::{BBox, VisualObject};

use super::N_COORDS;

/// Nearest 0.01 bin, rounding decimal halves up. Out-of-range input clamps
/// and reports it.
pub fn quantize_coord(x: f64) -> (usize, bool) {
    let clamped = !(0.0..=1.0).contains(&x);
    let x = x.clamp(0.0, 1.0);
    // The guard keeps decimal halves (stored as the binary float just below
    // .005) rounding up, e.g. 0.345 -> 0.35.
    let bin = (x * 100.0 + 0.5 + 1e-9).floor() as usize;
    (bin.min(N_COORDS - 1), clamped)
}

/// Bin-center face value of a coordinate bin.
pub fn dequantize_coord(bin: usize) -> f64 {
    debug_assert!(bin < N_COORDS);
    bin as f64 / 100.0
}

/// Rendering of a coordinate bin: "0.00".."0.99", "1.00".
pub fn coord_string(bin: usize) -> String {
    debug_assert!(bin < N_COORDS);
    if bin == 100 {
        "1.00".to_string()
    } else {
        format!("0.{bin:02}")
    }
}

fn coord_of(x: f64) -> String {
    coord_string(quantize_coord(x).0)
}

/// Canonical rendering of the objects in input order, coordinates quantized
/// to two decimals. An empty list serializes to the empty string.
pub fn serialize_spatial(objects: &[VisualObject]) -> String {
    let mut out = String::new();
    for obj in objects {
        let b = &obj.bbox;
        write!(
            out,
            "\u{27e8}br\u{27e9}\u{27e8}T\u{27e9} {} \u{27e8}/T\u{27e9}\u{27e8}Bbox\u{27e9}({}, {}),({}, {})\u{27e8}/Box\u{27e9}\u{27e8}/br\u{27e9}",
            obj.tag,
            coord_of(b.x1),
            coord_of(b.y1),
            coord_of(b.x2),
            coord_of(b.y2),
        )
        .expect("string write cannot fail");
    }
    out
}

/// A skipped malformed block: byte range in the input plus the reason.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostic {
    pub byte_range: (usize, usize),
    pub message: String,
}

struct Scanner<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.text[self.pos..];
        let trimmed = rest.trim_start();
        self.pos += rest.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.text[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn eat_any(&mut self, tokens: &[&str]) -> bool {
        tokens.iter().any(|t| self.eat(t))
    }

    fn until(&mut self, token: &str) -> Option<&'a str> {
        let rest = &self.text[self.pos..];
        let at = rest.find(token)?;
        let captured = &rest[..at];
        self.pos += at + token.len();
        Some(captured)
    }

    fn number(&mut self) -> Option<f64> {
        self.skip_ws();
        let rest = &self.text[self.pos..];
        let len = rest
            .char_indices()
            .take_while(|(_, c)| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
            .map(|(i, c)| i + c.len_utf8())
            .last()?;
        let parsed: f64 = rest[..len].parse().ok()?;
        if !parsed.is_finite() {
            return None;
        }
        self.pos += len;
        Some(parsed)
    }

    fn pair(&mut self) -> Option<(f64, f64)> {
        if !self.eat("(") {
            return None;
        }
        let a = self.number()?;
        if !self.eat(",") {
            return None;
        }
        let b = self.number()?;
        if !self.eat(")") {
            return None;
        }
        Some((a, b))
    }
}

const BR: &str = "\u{27e8}br\u{27e9}";

/// Recovers all well-formed object blocks from arbitrary text. Malformed
/// blocks are skipped and reported with their byte ranges; the function is
/// total and never panics. Parsed boxes are not validated — callers decide
/// what a degenerate box means.
pub fn parse_spatial(text: &str) -> (Vec<VisualObject>, Vec<ParseDiagnostic>) {
    let mut objects = Vec::new();
    let mut diagnostics = Vec::new();
    let mut search = 0;
    while let Some(found) = text[search..].find(BR) {
        let start = search + found;
        let mut s = Scanner { text, pos: start + BR.len() };
        match parse_block(&mut s) {
            Ok(obj) => {
                objects.push(obj);
                search = s.pos;
            }
            Err(msg) => {
                // Resume after this opener; an inner ⟨br⟩ may still parse.
                let end = s.pos.max(start + BR.len());
                diagnostics.push(ParseDiagnostic { byte_range: (start, end), message: msg });
                search = start + BR.len();
            }
        }
    }
    (objects, diagnostics)
}

fn parse_block(s: &mut Scanner<'_>) -> Result<VisualObject, String> {
    if !s.eat("\u{27e8}T\u{27e9}") {
        return Err("expected \u{27e8}T\u{27e9} after block open".to_string());
    }
    let tag = s
        .until("\u{27e8}/T\u{27e9}")
        .ok_or_else(|| "unterminated tag".to_string())?
        .trim()
        .to_string();
    if tag.is_empty() {
        return Err("empty tag".to_string());
    }
    if !s.eat("\u{27e8}Bbox\u{27e9}") {
        return Err("expected \u{27e8}Bbox\u{27e9}".to_string());
    }
    let (x1, y1) = s.pair().ok_or_else(|| "malformed first coordinate pair".to_string())?;
    if !s.eat(",") {
        return Err("expected comma between coordinate pairs".to_string());
    }
    let (x2, y2) = s.pair().ok_or_else(|| "malformed second coordinate pair".to_string())?;
    if !s.eat_any(&["\u{27e8}/Box\u{27e9}", "\u{27e8}/Bbox\u{27e9}"]) {
        return Err("expected box close tag".to_string());
    }
    if !s.eat("\u{27e8}/br\u{27e9}") {
        return Err("expected block close tag".to_string());
    }
    Ok(VisualObject { tag, bbox: BBox { x1, y1, x2, y2 }, confidence: 1.0 })
}
