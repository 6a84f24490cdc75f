//! Text side of the pipeline: tokenization, vocabulary, datasets.

mod synth;
mod tokenize;
mod tsv;
mod vocab;

pub use synth::{synth_generate, SynthSpec, SynthSplits};
pub use tokenize::tokenize;
pub use tsv::{load_tsv, read_tsv, LabelKind, Schema};
pub use vocab::{build_vocab, Vocabulary, CLS, MASK, N_RESERVED, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// Supervision for one example.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Class(usize),
    Regression(f32),
}

impl Target {
    pub fn class(self) -> Option<usize> {
        match self {
            Target::Class(c) => Some(c),
            Target::Regression(_) => None,
        }
    }
}

/// Tokenized sentence (or pair) before vocabulary lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct RawExample {
    pub tokens: Vec<String>,
    pub tokens_b: Option<Vec<String>>,
    pub target: Target,
    /// Positions into `tokens` of the label-determining keywords.
    pub gold_keyword_positions: Option<Vec<usize>>,
}

/// Encoded example: `[CLS] a.. [SEP] (b.. [SEP])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub target: Target,
    /// Positions into `token_ids` (so already offset past `[CLS]`).
    pub gold_keyword_positions: Option<Vec<usize>>,
}

impl Example {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Class label; errors on regression targets.
    pub fn class(&self) -> Result<usize> {
        self.target
            .class()
            .ok_or_else(|| Error::contract(format!("example {} has a regression target", self.id)))
    }

    /// True at `[CLS]`, `[SEP]` and `[PAD]` positions.
    pub fn special_mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| vocab::is_special(t)).collect()
    }

    /// Positions that the probe may mask.
    pub fn maskable_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| !vocab::is_special(self.token_ids[i]))
            .collect()
    }

    /// Shortens the example to at most `max_len` ids, keeping the closing
    /// `[SEP]` of every segment. Returns whether anything was dropped.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        if self.len() <= max_len {
            return false;
        }
        let seps: Vec<usize> = (0..self.len()).filter(|&i| self.token_ids[i] == SEP).collect();
        let mut budget = self.len() - max_len;
        let mut keep = vec![true; self.len()];
        // trim from the longest segment first
        let mut bounds = Vec::new();
        let mut start = 1;
        for &s in &seps {
            bounds.push((start, s));
            start = s + 1;
        }
        while budget > 0 {
            let Some((idx, _)) = bounds
                .iter()
                .enumerate()
                .map(|(i, &(a, b))| (i, (a..b).filter(|&p| keep[p]).count()))
                .filter(|&(_, n)| n > 0)
                .max_by_key(|&(i, n)| (n, std::cmp::Reverse(i)))
            else {
                break;
            };
            let (a, b) = bounds[idx];
            if let Some(last) = (a..b).rev().find(|&p| keep[p]) {
                keep[last] = false;
                budget -= 1;
            }
        }
        let old_to_new: Vec<Option<usize>> = {
            let mut next = 0;
            keep.iter()
                .map(|&k| {
                    k.then(|| {
                        next += 1;
                        next - 1
                    })
                })
                .collect()
        };
        if let Some(gold) = &mut self.gold_keyword_positions {
            *gold = gold.iter().filter_map(|&p| old_to_new[p]).collect();
        }
        let mut i = 0;
        self.token_ids.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        let mut i = 0;
        self.segment_ids.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        true
    }
}

/// Frames and encodes raw examples, numbering them from `first_id`.
pub fn encode_examples(raw: &[RawExample], vocab: &Vocabulary, first_id: usize) -> Vec<Example> {
    raw.iter()
        .enumerate()
        .map(|(i, r)| encode_example(r, vocab, first_id + i))
        .collect()
}

pub fn encode_example(raw: &RawExample, vocab: &Vocabulary, id: usize) -> Example {
    let mut token_ids = vec![CLS];
    token_ids.extend(raw.tokens.iter().map(|t| vocab.id(t)));
    token_ids.push(SEP);
    let mut segment_ids = vec![0; token_ids.len()];
    if let Some(b) = &raw.tokens_b {
        token_ids.extend(b.iter().map(|t| vocab.id(t)));
        token_ids.push(SEP);
        segment_ids.resize(token_ids.len(), 1);
    }
    Example {
        id,
        token_ids,
        segment_ids,
        target: raw.target,
        gold_keyword_positions: raw
            .gold_keyword_positions
            .as_ref()
            .map(|g| g.iter().map(|p| p + 1).collect()),
    }
}
