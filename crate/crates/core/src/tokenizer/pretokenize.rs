//! Pre-tokenization: splits raw bytes into the chunks BPE merges operate inside.
//!
//! The rule is the cl100k-style pattern with digits forced into singletons. Written as a
//! regex (tried in order at each chunk start) it reads:
//!
//! ```text
//! '(?i:s|t|re|ve|m|ll|d)      contraction suffix
//! [0-9]                       every ASCII digit alone
//!  ?\p{L}+                    optional single space + letter run
//!  ?[^\s\p{L}0-9]+[\r\n]*     optional single space + symbol run + trailing newlines
//! \s*[\r\n]+                  whitespace through the last newline
//! \s+(?!\S)                   whitespace, leaving one space for the next word
//! \s+
//! ```
//!
//! `regex` has no lookahead, so the scanner below implements it directly. Invalid UTF-8
//! bytes are treated as symbols, one byte per unit, so every byte string is covered.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Digit,
    Letter,
    Space,
    Symbol,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    start: usize,
    end: usize,
    ch: Option<char>,
    class: Class,
}

fn classify(ch: char) -> Class {
    if ch.is_ascii_digit() {
        Class::Digit
    } else if ch.is_alphabetic() {
        Class::Letter
    } else if ch.is_whitespace() {
        Class::Space
    } else {
        Class::Symbol
    }
}

fn units(bytes: &[u8]) -> Vec<Unit> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut offset = 0;
    for chunk in bytes.utf8_chunks() {
        for (i, ch) in chunk.valid().char_indices() {
            out.push(Unit {
                start: offset + i,
                end: offset + i + ch.len_utf8(),
                ch: Some(ch),
                class: classify(ch),
            });
        }
        offset += chunk.valid().len();
        for _ in chunk.invalid() {
            out.push(Unit {
                start: offset,
                end: offset + 1,
                ch: None,
                class: Class::Symbol,
            });
            offset += 1;
        }
    }
    out
}

fn contraction_len(units: &[Unit], i: usize) -> usize {
    if units[i].ch != Some('\'') {
        return 0;
    }
    let lower = |j: usize| units.get(j).and_then(|u| u.ch).map(|c| c.to_ascii_lowercase());
    match (lower(i + 1), lower(i + 2)) {
        (Some('r'), Some('e')) | (Some('v'), Some('e')) | (Some('l'), Some('l')) => 3,
        (Some('s' | 't' | 'm' | 'd'), _) => 2,
        _ => 0,
    }
}

fn run_end(units: &[Unit], mut j: usize, class: Class) -> usize {
    while j < units.len() && units[j].class == class {
        j += 1;
    }
    j
}

fn is_newline(u: &Unit) -> bool {
    matches!(u.ch, Some('\r' | '\n'))
}

/// Length in units of the chunk starting at unit `i`.
fn chunk_len(units: &[Unit], i: usize) -> usize {
    let n = contraction_len(units, i);
    if n > 0 {
        return n;
    }
    let u = units[i];
    if u.class == Class::Digit {
        return 1;
    }
    let lead_space = u.ch == Some(' ');
    let body = if lead_space { i + 1 } else { i };
    if let Some(b) = units.get(body) {
        match b.class {
            Class::Letter => return run_end(units, body, Class::Letter) - i,
            Class::Symbol => {
                let mut j = run_end(units, body, Class::Symbol);
                while j < units.len() && is_newline(&units[j]) {
                    j += 1;
                }
                return j - i;
            }
            _ => {}
        }
    }
    // Whitespace.
    let end = run_end(units, i, Class::Space);
    if let Some(last_nl) = (i..end).rev().find(|&j| is_newline(&units[j])) {
        return last_nl + 1 - i;
    }
    if end == units.len() || end - i == 1 {
        end - i
    } else {
        end - i - 1
    }
}

/// Splits `text` into chunks whose concatenation is exactly `text`.
pub fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let units = units(text);
    let mut out = Vec::new();
    let mut i = 0;
    while i < units.len() {
        let n = chunk_len(&units, i);
        debug_assert!(n > 0);
        out.push(&text[units[i].start..units[i + n - 1].end]);
        i += n;
    }
    out
}
