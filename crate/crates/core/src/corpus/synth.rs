//! Synthetic keyword-sentiment corpus with planted ground-truth importance.
//!
//! Every sentence carries one keyword whose lexicon decides the label. With
//! probability `distractor_prob` a word from the opposite-polarity distractor
//! lexicon is planted as well. Everything else is neutral filler.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{RawExample, Target};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_examples: usize,
    pub vocab_size: usize,
    pub positive_keywords: Vec<String>,
    pub negative_keywords: Vec<String>,
    /// Positive-looking words, planted into negative sentences.
    pub positive_distractors: Vec<String>,
    /// Negative-looking words, planted into positive sentences.
    pub negative_distractors: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec::with_sizes(2500, 1000, 200, 100, 5, 15, 0.5, 0)
    }
}

impl SynthSpec {
    /// Builds generated lexicons of the requested sizes.
    #[allow(clippy::too_many_arguments)]
    pub fn with_sizes(
        n_examples: usize,
        vocab_size: usize,
        n_keywords: usize,
        n_distractors: usize,
        min_len: usize,
        max_len: usize,
        distractor_prob: f64,
        seed: u64,
    ) -> Self {
        let lex = |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect();
        SynthSpec {
            n_examples,
            vocab_size,
            positive_keywords: lex("pos", n_keywords),
            negative_keywords: lex("neg", n_keywords),
            positive_distractors: lex("dpos", n_distractors),
            negative_distractors: lex("dneg", n_distractors),
            min_len,
            max_len,
            distractor_prob,
            seed,
        }
    }

    pub fn fillers(&self) -> Vec<String> {
        let n = self.vocab_size.saturating_sub(self.lexicon_size());
        (0..n).map(|i| format!("w{i}")).collect()
    }

    fn lexicon_size(&self) -> usize {
        self.positive_keywords.len()
            + self.negative_keywords.len()
            + self.positive_distractors.len()
            + self.negative_distractors.len()
    }

    pub fn is_keyword(&self, token: &str) -> bool {
        self.positive_keywords.iter().any(|t| t == token)
            || self.negative_keywords.iter().any(|t| t == token)
    }

    pub fn is_distractor(&self, token: &str) -> bool {
        self.positive_distractors.iter().any(|t| t == token)
            || self.negative_distractors.iter().any(|t| t == token)
    }

    pub fn validate(&self) -> Result<()> {
        let keywords: HashSet<&String> = self
            .positive_keywords
            .iter()
            .chain(&self.negative_keywords)
            .collect();
        if self
            .positive_distractors
            .iter()
            .chain(&self.negative_distractors)
            .any(|d| keywords.contains(d))
        {
            return Err(Error::contract("keyword and distractor lexicons overlap"));
        }
        if self.positive_keywords.is_empty() || self.negative_keywords.is_empty() {
            return Err(Error::config("n_keywords", "must be at least 1"));
        }
        if self.distractor_prob > 0.0
            && (self.positive_distractors.is_empty() || self.negative_distractors.is_empty())
        {
            return Err(Error::config("n_distractors", "must be at least 1 when distractor_prob > 0"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::config("min_len", "need 2 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::config("distractor_prob", "must lie in [0, 1]"));
        }
        if self.fillers().is_empty() {
            return Err(Error::config("vocab_size", "leaves no room for filler words"));
        }
        Ok(())
    }

    /// Parses a `key=value` spec file. Unknown keys are errors.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let d = SynthSpec::default();
        let mut n_examples = d.n_examples;
        let mut vocab_size = d.vocab_size;
        let mut n_keywords = d.positive_keywords.len();
        let mut n_distractors = d.positive_distractors.len();
        let (mut min_len, mut max_len) = (d.min_len, d.max_len);
        let mut distractor_prob = d.distractor_prob;
        let mut seed = d.seed;
        for (key, value) in crate::training::parse_kv_lines(text)? {
            let bad = |_| Error::config(key.as_str(), format!("cannot parse `{value}`"));
            match key.as_str() {
                "n_examples" => n_examples = value.parse().map_err(bad)?,
                "vocab_size" => vocab_size = value.parse().map_err(bad)?,
                "n_keywords" => n_keywords = value.parse().map_err(bad)?,
                "n_distractors" => n_distractors = value.parse().map_err(bad)?,
                "min_len" => min_len = value.parse().map_err(bad)?,
                "max_len" => max_len = value.parse().map_err(bad)?,
                "distractor_prob" => {
                    distractor_prob = value
                        .parse()
                        .map_err(|_| Error::config("distractor_prob", format!("cannot parse `{value}`")))?
                }
                "seed" => seed = value.parse().map_err(bad)?,
                _ => return Err(Error::config(key, "unknown synthetic-spec key")),
            }
        }
        let spec = SynthSpec::with_sizes(
            n_examples,
            vocab_size,
            n_keywords,
            n_distractors,
            min_len,
            max_len,
            distractor_prob,
            seed,
        );
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SynthSpec::from_kv_str(&fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        format!(
            "n_examples={}\nvocab_size={}\nn_keywords={}\nn_distractors={}\nmin_len={}\nmax_len={}\ndistractor_prob={}\nseed={}\n",
            self.n_examples,
            self.vocab_size,
            self.positive_keywords.len(),
            self.positive_distractors.len(),
            self.min_len,
            self.max_len,
            self.distractor_prob,
            self.seed
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSplits {
    pub train: Vec<RawExample>,
    pub dev: Vec<RawExample>,
    pub test: Vec<RawExample>,
}

/// Generates the corpus and splits it 80/10/10 by a seeded permutation.
/// Label 1 is positive, 0 negative.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthSplits> {
    spec.validate()?;
    let fillers = spec.fillers();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut all = Vec::with_capacity(spec.n_examples);
    for _ in 0..spec.n_examples {
        let positive = rng.random_bool(0.5);
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut tokens: Vec<String> = (0..len)
            .map(|_| fillers[rng.random_range(0..fillers.len())].clone())
            .collect();
        let (keywords, distractors) = if positive {
            (&spec.positive_keywords, &spec.negative_distractors)
        } else {
            (&spec.negative_keywords, &spec.positive_distractors)
        };
        let k = rng.random_range(0..len);
        tokens[k] = keywords[rng.random_range(0..keywords.len())].clone();
        if rng.random_bool(spec.distractor_prob) {
            let mut d = rng.random_range(0..len - 1);
            if d >= k {
                d += 1;
            }
            tokens[d] = distractors[rng.random_range(0..distractors.len())].clone();
        }
        all.push(RawExample {
            tokens,
            tokens_b: None,
            target: Target::Class(usize::from(positive)),
            gold_keyword_positions: Some(vec![k]),
        });
    }

    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (all.len() * 8).div_ceil(10);
    let n_dev = (all.len() - n_train) / 2;
    let mut splits = SynthSplits {
        train: Vec::with_capacity(n_train),
        dev: Vec::with_capacity(n_dev),
        test: Vec::new(),
    };
    for (rank, idx) in order.into_iter().enumerate() {
        let ex = all[idx].clone();
        if rank < n_train {
            splits.train.push(ex);
        } else if rank < n_train + n_dev {
            splits.dev.push(ex);
        } else {
            splits.test.push(ex);
        }
    }
    Ok(splits)
}
