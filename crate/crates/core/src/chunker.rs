//! Token-budgeted chunking with sentence-preserving splits.
//!
//! Tokens follow a portable reference rule: a token is a maximal run of
//! alphanumeric characters or a single non-whitespace, non-alphanumeric
//! character. Sentences end after `.`, `!` or `?` when followed by whitespace
//! and then an uppercase letter or digit, and always after a newline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doc_model::Provenance;

pub const DEFAULT_CHUNK_BUDGET: usize = 1000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChunkerError {
    #[error("chunk_budget must be positive")]
    ZeroBudget,
    #[error("overlap ({overlap}) must be smaller than chunk_budget ({budget})")]
    OverlapTooLarge { overlap: usize, budget: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChunkerConfig {
    pub chunk_budget: usize,
    pub overlap: usize,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig { chunk_budget: DEFAULT_CHUNK_BUDGET, overlap: 0 }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<(), ChunkerError> {
        if self.chunk_budget == 0 {
            return Err(ChunkerError::ZeroBudget);
        }
        if self.overlap >= self.chunk_budget {
            return Err(ChunkerError::OverlapTooLarge { overlap: self.overlap, budget: self.chunk_budget });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub chunk_index: usize,
    pub text: String,
    pub token_count: usize,
    /// `(page_number, block_index)` pairs the chunk draws from, in order.
    pub provenance: Vec<(u32, usize)>,
    /// Byte offset of the chunk text within the source text.
    pub start: usize,
    /// Leading bytes of `text` repeated from the previous chunk.
    pub overlap_len: usize,
    /// Set when the chunk is a single sentence larger than the budget.
    pub oversized: bool,
}

impl TextChunk {
    /// The part of the chunk not shared with its predecessor.
    pub fn fresh_text(&self) -> &str {
        &self.text[self.overlap_len..]
    }
}

pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        if c.is_alphanumeric() {
            if !in_word {
                count += 1;
                in_word = true;
            }
        } else {
            in_word = false;
            if !c.is_whitespace() {
                count += 1;
            }
        }
    }
    count
}

/// Byte ranges of sentences covering `text` exactly. Whitespace-only pieces
/// are folded into the preceding sentence.
pub fn split_sentences(text: &str) -> Vec<std::ops::Range<usize>> {
    let mut cuts = Vec::new();
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        match c {
            '\n' => cuts.push(i + 1),
            '.' | '!' | '?' => {
                let mut end = i + c.len_utf8();
                let mut saw_space = false;
                let mut saw_newline = false;
                while let Some(&(j, w)) = iter.peek() {
                    if !w.is_whitespace() {
                        break;
                    }
                    saw_space = true;
                    saw_newline |= w == '\n';
                    if w == '\n' {
                        cuts.push(j + 1);
                    }
                    end = j + w.len_utf8();
                    iter.next();
                }
                if saw_space && !saw_newline {
                    if let Some(&(_, next)) = iter.peek() {
                        if next.is_uppercase() || next.is_ascii_digit() {
                            cuts.push(end);
                        }
                    }
                }
            }
            _ => {}
        }
    }

    let mut ranges: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    for cut in cuts.into_iter().chain(std::iter::once(text.len())) {
        if cut <= start {
            continue;
        }
        let piece = &text[start..cut];
        match ranges.last_mut() {
            Some(prev) if piece.trim().is_empty() => prev.end = cut,
            _ => ranges.push(start..cut),
        }
        start = cut;
    }
    ranges
}

struct Sentence {
    start: usize,
    end: usize,
    tokens: usize,
}

/// Packs sentences greedily into chunks of at most `chunk_budget` tokens.
///
/// With a non-zero overlap, each chunk after the first begins with the longest
/// run of trailing sentences of its predecessor totalling at most `overlap`
/// tokens; the budget includes those repeated tokens.
pub fn chunk_text(text: &str, provenance: &[Provenance], cfg: &ChunkerConfig) -> Result<Vec<TextChunk>, ChunkerError> {
    cfg.validate()?;
    let sentences: Vec<Sentence> = split_sentences(text)
        .into_iter()
        .map(|r| Sentence { tokens: count_tokens(&text[r.clone()]), start: r.start, end: r.end })
        .collect();

    let mut chunks = Vec::new();
    // indices into `sentences`: current chunk is seed..end, fresh part from fresh_start
    let mut seed = 0usize;
    let mut fresh_start = 0usize;
    let mut tokens = 0usize;

    let emit = |chunks: &mut Vec<TextChunk>, from: usize, fresh: usize, to: usize, oversized: bool| {
        let start = sentences[from].start;
        let end = sentences[to - 1].end;
        let body = &text[start..end];
        chunks.push(TextChunk {
            chunk_index: chunks.len(),
            text: body.to_string(),
            token_count: count_tokens(body),
            provenance: provenance_for(provenance, start, end),
            start,
            overlap_len: sentences[fresh].start - start,
            oversized,
        });
    };

    let mut i = 0;
    while i < sentences.len() {
        let s = &sentences[i];
        if s.tokens > cfg.chunk_budget {
            if fresh_start < i {
                emit(&mut chunks, seed, fresh_start, i, false);
            }
            emit(&mut chunks, i, i, i + 1, true);
            i += 1;
            seed = i;
            fresh_start = i;
            tokens = 0;
            continue;
        }
        if tokens + s.tokens > cfg.chunk_budget {
            if fresh_start < i {
                emit(&mut chunks, seed, fresh_start, i, false);
                let (new_seed, seed_tokens) = overlap_seed(&sentences[..i], cfg.overlap, seed);
                seed = new_seed;
                tokens = seed_tokens;
                fresh_start = i;
            }
            // drop repeated sentences until the next one fits
            while seed < fresh_start && tokens + s.tokens > cfg.chunk_budget {
                tokens -= sentences[seed].tokens;
                seed += 1;
            }
        }
        tokens += s.tokens;
        i += 1;
    }
    if fresh_start < sentences.len() {
        emit(&mut chunks, seed, fresh_start, sentences.len(), false);
    }
    Ok(chunks)
}

/// Longest run of trailing sentences of `done`, starting no earlier than
/// `floor`, whose token total stays within `overlap`.
fn overlap_seed(done: &[Sentence], overlap: usize, floor: usize) -> (usize, usize) {
    let mut seed = done.len();
    let mut total = 0;
    while seed > floor {
        let t = done[seed - 1].tokens;
        if total + t > overlap {
            break;
        }
        total += t;
        seed -= 1;
    }
    (seed, total)
}

fn provenance_for(provenance: &[Provenance], start: usize, end: usize) -> Vec<(u32, usize)> {
    provenance.iter().filter(|p| p.start < end && p.end > start).map(|p| (p.page_number, p.block_index)).collect()
}
