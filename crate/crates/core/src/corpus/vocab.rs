use std::collections::HashMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const N_RESERVED: usize = 5;

const RESERVED: [&str; N_RESERVED] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

/// `[CLS]`, `[SEP]` and `[PAD]` never carry importance labels or pooling weight.
pub(crate) fn is_special(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Vocabulary of the reserved block followed by `tokens` in order.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::contract(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Non-reserved entries, in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[N_RESERVED..]
    }

    /// Stable content hash of the token list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
    }

    /// One non-reserved token per line; line `k` holds id `k + 5`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in self.entries() {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(str::to_string))
    }
}

/// Frequency-sorted vocabulary (ties broken lexicographically). Tokens seen
/// fewer than `min_freq` times are left out and so map to `[UNK]`.
pub fn build_vocab<'a, I>(corpus: I, min_freq: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a [String]>,
{
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for t in sentence {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut entries: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, n)| n >= min_freq.max(1) && !RESERVED.contains(&t))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(entries.into_iter().map(|(t, _)| t.to_string()))
        .expect("counted tokens are unique")
}
