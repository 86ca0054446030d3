//! Sentence segmentation on characters, independent of any tokenizer.
//!
//! A raw boundary falls after a terminal punctuation mark followed by
//! whitespace (the whitespace run stays with the earlier sentence), after a
//! blank line, or around a fenced code block, which is kept whole. Raw spans
//! shorter than `min_chars` are merged forward, or backward when last.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TokenSpan;

pub const DEFAULT_MIN_CHARS: usize = 12;
pub const DEFAULT_PUNCTUATION: &str = ".!?;。！？";

const FENCE: [char; 3] = ['`', '`', '`'];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterConfig {
    pub min_chars: usize,
    pub punctuation: String,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            min_chars: DEFAULT_MIN_CHARS,
            punctuation: DEFAULT_PUNCTUATION.to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub index: usize,
    pub char_start: usize,
    pub char_end: usize,
}

impl SentenceSpan {
    pub fn len(&self) -> usize {
        self.char_end - self.char_start
    }

    pub fn is_empty(&self) -> bool {
        self.char_end == self.char_start
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SegmentError {
    #[error("cannot segment empty text")]
    EmptyText,
    #[error("token {index} ends at character {char_end}, beyond text length {text_len}")]
    TokenOutOfRange {
        index: usize,
        char_end: usize,
        text_len: usize,
    },
    #[error("token {index} does not continue the tiling at character {expected}")]
    TokenGap { index: usize, expected: usize },
    #[error("tokens cover {covered} of {text_len} characters")]
    Incomplete { covered: usize, text_len: usize },
}

fn at_line_start(chars: &[char], i: usize) -> bool {
    i == 0 || chars[i - 1] == '\n'
}

fn end_of_line(chars: &[char], i: usize) -> usize {
    chars[i..]
        .iter()
        .position(|&c| c == '\n')
        .map_or(chars.len(), |p| i + p + 1)
}

fn skip_whitespace(chars: &[char], mut i: usize) -> usize {
    while i < chars.len() && chars[i].is_whitespace() {
        i += 1;
    }
    i
}

fn raw_boundaries(chars: &[char], punctuation: &[char]) -> Vec<usize> {
    let n = chars.len();
    let mut cuts = Vec::new();
    let mut i = 0;
    while i < n {
        if at_line_start(chars, i) && chars[i..].starts_with(&FENCE) {
            cuts.push(i);
            let mut j = end_of_line(chars, i);
            let mut close = n;
            while j < n {
                let line_end = end_of_line(chars, j);
                if chars[j..].starts_with(&FENCE) {
                    close = line_end;
                    break;
                }
                j = line_end;
            }
            let after = skip_whitespace(chars, close);
            cuts.push(after);
            i = after;
            continue;
        }
        let c = chars[i];
        if punctuation.contains(&c) && i + 1 < n && chars[i + 1].is_whitespace() {
            let after = skip_whitespace(chars, i + 1);
            cuts.push(after);
            i = after;
            continue;
        }
        if c == '\n' {
            let after = skip_whitespace(chars, i);
            if chars[i..after].iter().filter(|&&c| c == '\n').count() >= 2 {
                cuts.push(after);
                i = after;
                continue;
            }
        }
        i += 1;
    }
    cuts.retain(|&b| b > 0 && b < n);
    cuts.dedup();
    cuts
}

/// Splits `text` into consecutive sentence spans that partition it.
pub fn segment(text: &str, cfg: &SegmenterConfig) -> Result<Vec<SentenceSpan>, SegmentError> {
    if text.is_empty() {
        return Err(SegmentError::EmptyText);
    }
    let chars: Vec<char> = text.chars().collect();
    let punctuation: Vec<char> = cfg.punctuation.chars().collect();
    let n = chars.len();
    let mut ends = raw_boundaries(&chars, &punctuation);
    ends.push(n);

    let mut merged: Vec<Range<usize>> = Vec::new();
    let mut start = 0;
    for end in ends {
        if end - start >= cfg.min_chars {
            merged.push(start..end);
            start = end;
        }
    }
    if start < n {
        match merged.last_mut() {
            Some(last) => last.end = n,
            None => merged.push(start..n),
        }
    }
    Ok(merged
        .into_iter()
        .enumerate()
        .map(|(index, r)| SentenceSpan {
            index,
            char_start: r.start,
            char_end: r.end,
        })
        .collect())
}

/// Token index range of every sentence.
///
/// A token belongs to the sentence containing its first character, so a
/// token straddling a boundary goes to the earlier sentence. Ranges are
/// contiguous and together cover every token; a sentence may get an empty
/// range when a single token spans it entirely.
pub fn assign_tokens(
    spans: &[SentenceSpan],
    tokens: &[TokenSpan],
) -> Result<Vec<Range<usize>>, SegmentError> {
    let text_len = spans.last().map_or(0, |s| s.char_end);
    let mut expected = 0;
    for (index, tok) in tokens.iter().enumerate() {
        if tok.char_end > text_len {
            return Err(SegmentError::TokenOutOfRange {
                index,
                char_end: tok.char_end,
                text_len,
            });
        }
        if tok.char_start != expected || tok.char_end <= tok.char_start {
            return Err(SegmentError::TokenGap { index, expected });
        }
        expected = tok.char_end;
    }
    if expected != text_len {
        return Err(SegmentError::Incomplete {
            covered: expected,
            text_len,
        });
    }

    let mut ranges = Vec::with_capacity(spans.len());
    let mut t = 0;
    for span in spans {
        let first = t;
        while t < tokens.len() && tokens[t].char_start < span.char_end {
            t += 1;
        }
        ranges.push(first..t);
    }
    Ok(ranges)
}

/// Merges sentences until every one owns at least one token in each tokenization.
///
/// Used before per-sentence statistics when models tokenize differently.
pub fn coalesce_for_tokenizations(
    spans: &[SentenceSpan],
    tokenizations: &[&[TokenSpan]],
) -> Result<Vec<SentenceSpan>, SegmentError> {
    let mut current: Vec<SentenceSpan> = spans.to_vec();
    loop {
        let mut empty = None;
        for tokens in tokenizations {
            let ranges = assign_tokens(&current, tokens)?;
            if let Some(i) = ranges.iter().position(|r| r.is_empty()) {
                empty = Some(i);
                break;
            }
        }
        let Some(i) = empty else {
            return Ok(current);
        };
        if current.len() == 1 {
            return Ok(current);
        }
        // fold the empty sentence into its predecessor (or successor when first)
        if i == 0 {
            current[1].char_start = current[0].char_start;
            current.remove(0);
        } else {
            current[i - 1].char_end = current[i].char_end;
            current.remove(i);
        }
        for (k, s) in current.iter_mut().enumerate() {
            s.index = k;
        }
    }
}
