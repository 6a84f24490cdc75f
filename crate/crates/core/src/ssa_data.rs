//! Decision-flip probing: weak token-importance labels from masking.
//!
//! A probe masks a random subset of a correctly classified sentence and asks
//! the frozen model again. If the predicted class flips, every masked
//! position is labelled important (1), otherwise unimportant (0). Positions
//! that were not masked stay unlabelled.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::corpus::{Example, MASK};
use crate::encoder::{EncoderModel, Pooling};
use crate::error::{Error, Result};

/// Anything that assigns a class to an example. Probing only needs this.
pub trait LabelPredictor: Sync {
    fn predict(&self, example: &Example) -> Result<usize>;
}

/// An encoder snapshot together with its pooling path.
#[derive(Debug, Clone, Copy)]
pub struct ModelPredictor<'a> {
    pub model: &'a EncoderModel,
    pub pooling: Pooling,
}

impl LabelPredictor for ModelPredictor<'_> {
    fn predict(&self, example: &Example) -> Result<usize> {
        self.model.predict_label(example, self.pooling)
    }
}

/// Per-token SSA supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenLabel {
    NoLabel,
    Unimportant,
    Important,
}

impl TokenLabel {
    pub fn as_char(self) -> char {
        match self {
            TokenLabel::NoLabel => '_',
            TokenLabel::Unimportant => '0',
            TokenLabel::Important => '1',
        }
    }

    pub fn from_char(c: char) -> Option<Self> {
        match c {
            '_' => Some(TokenLabel::NoLabel),
            '0' => Some(TokenLabel::Unimportant),
            '1' => Some(TokenLabel::Important),
            _ => None,
        }
    }

    /// Class index for the SSA cross-entropy, `None` when unlabelled.
    pub fn class(self) -> Option<usize> {
        match self {
            TokenLabel::NoLabel => None,
            TokenLabel::Unimportant => Some(0),
            TokenLabel::Important => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsaLabeledExample {
    pub origin_id: usize,
    pub probe_index: usize,
    pub epoch_generated: u32,
    /// The original, unmasked ids.
    pub token_ids: Vec<usize>,
    pub target_label: usize,
    pub ssa_labels: Vec<TokenLabel>,
}

impl SsaLabeledExample {
    pub fn labeled_positions(&self) -> Vec<usize> {
        (0..self.ssa_labels.len())
            .filter(|&i| self.ssa_labels[i] != TokenLabel::NoLabel)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub mask_ratio: f64,
    /// Expected probes per eligible sentence per epoch.
    pub gamma: f64,
    pub rng_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            mask_ratio: 0.3,
            gamma: 1.0,
            rng_seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config("mask_ratio", "must lie in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma", "must be positive"));
        }
        Ok(())
    }
}

/// Number of positions a probe masks: `max(1, round(ratio · n))`, ties to even.
pub fn mask_count(n_maskable: usize, mask_ratio: f64) -> usize {
    let k = (mask_ratio * n_maskable as f64).round_ties_even() as usize;
    k.clamp(1, n_maskable.max(1))
}

/// Draws [`mask_count`] distinct indices from `0..n_maskable`, uniformly
/// without replacement, returned in ascending order.
pub fn sample_mask<R: Rng + ?Sized>(n_maskable: usize, mask_ratio: f64, rng: &mut R) -> Vec<usize> {
    assert!(n_maskable >= 1, "sample_mask needs at least one maskable position");
    let k = mask_count(n_maskable, mask_ratio);
    let mut picked = rand::seq::index::sample(rng, n_maskable, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Copy of `token_ids` with the given positions replaced by `[MASK]`.
pub fn apply_mask(token_ids: &[usize], positions: &[usize]) -> Vec<usize> {
    let mut ids = token_ids.to_vec();
    for &p in positions {
        ids[p] = MASK;
    }
    ids
}

fn masked_example(example: &Example, positions: &[usize]) -> Example {
    Example {
        token_ids: apply_mask(&example.token_ids, positions),
        ..example.clone()
    }
}

/// Labels `positions` by whether masking them flips the model's prediction.
/// Returns `None` when the original prediction is wrong.
pub fn probe_with_mask<P: LabelPredictor + ?Sized>(
    model: &P,
    example: &Example,
    positions: &[usize],
    epoch: u32,
    probe_index: usize,
) -> Result<Option<SsaLabeledExample>> {
    let target = example.class()?;
    let original = model.predict(example)?;
    if original != target {
        return Ok(None);
    }
    label_from_flip(model, example, original, positions, epoch, probe_index).map(Some)
}

fn label_from_flip<P: LabelPredictor + ?Sized>(
    model: &P,
    example: &Example,
    original: usize,
    positions: &[usize],
    epoch: u32,
    probe_index: usize,
) -> Result<SsaLabeledExample> {
    let special = example.special_mask();
    if let Some(&p) = positions.iter().find(|&&p| p >= special.len() || special[p]) {
        return Err(Error::contract(format!("position {p} is not maskable")));
    }
    let masked = model.predict(&masked_example(example, positions))?;
    let value = if masked != original {
        TokenLabel::Important
    } else {
        TokenLabel::Unimportant
    };
    let mut ssa_labels = vec![TokenLabel::NoLabel; example.len()];
    for &p in positions {
        ssa_labels[p] = value;
    }
    Ok(SsaLabeledExample {
        origin_id: example.id,
        probe_index,
        epoch_generated: epoch,
        token_ids: example.token_ids.clone(),
        target_label: original,
        ssa_labels,
    })
}

/// One probe: filter on a correct original prediction, mask a random
/// subset of the maskable positions, label by decision flip.
pub fn probe<P: LabelPredictor + ?Sized, R: Rng + ?Sized>(
    model: &P,
    example: &Example,
    cfg: &ProbeConfig,
    rng: &mut R,
) -> Result<Option<SsaLabeledExample>> {
    let maskable = example.maskable_positions();
    if maskable.is_empty() {
        return Ok(None);
    }
    let target = example.class()?;
    let original = model.predict(example)?;
    if original != target {
        return Ok(None);
    }
    let positions: Vec<usize> = sample_mask(maskable.len(), cfg.mask_ratio, rng)
        .into_iter()
        .map(|i| maskable[i])
        .collect();
    label_from_flip(model, example, original, &positions, 0, 0).map(Some)
}

/// Independent stream for one example in one epoch.
pub(crate) fn example_rng(seed: u64, epoch: u32, origin_id: usize, salt: u32) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&epoch.to_le_bytes());
    key[12..20].copy_from_slice(&(origin_id as u64).to_le_bytes());
    key[20..24].copy_from_slice(&salt.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const SALT_PROBE: u32 = 0x5353_4150;
const SALT_AUGMENT: u32 = 0x4d41_534b;

/// `floor(γ)` plus one more with probability `frac(γ)`.
fn probe_budget<R: Rng + ?Sized>(gamma: f64, rng: &mut R) -> usize {
    let whole = gamma.floor();
    let extra = rng.random::<f64>() < gamma - whole;
    whole as usize + usize::from(extra)
}

/// Labels generated from one model snapshot.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpochLabels {
    /// Sorted by `(origin_id, probe_index)`.
    pub examples: Vec<SsaLabeledExample>,
    pub probes_attempted: usize,
    pub eligible: usize,
}

/// Probes every correctly predicted example of `dataset` with the frozen
/// `model`. Results do not depend on `parallel`.
pub fn generate_epoch_labels<P: LabelPredictor + ?Sized>(
    model: &P,
    dataset: &[Example],
    cfg: &ProbeConfig,
    epoch: u32,
    parallel: bool,
) -> Result<EpochLabels> {
    cfg.validate()?;
    let run = |ex: &Example| -> Result<(Vec<SsaLabeledExample>, usize, bool)> {
        let maskable = ex.maskable_positions();
        if maskable.is_empty() {
            return Ok((Vec::new(), 0, false));
        }
        let original = model.predict(ex)?;
        if original != ex.class()? {
            return Ok((Vec::new(), 0, false));
        }
        let mut rng = example_rng(cfg.rng_seed, epoch, ex.id, SALT_PROBE);
        let budget = probe_budget(cfg.gamma, &mut rng);
        let mut out = Vec::with_capacity(budget);
        for probe_index in 0..budget {
            let positions: Vec<usize> = sample_mask(maskable.len(), cfg.mask_ratio, &mut rng)
                .into_iter()
                .map(|i| maskable[i])
                .collect();
            out.push(label_from_flip(model, ex, original, &positions, epoch, probe_index)?);
        }
        Ok((out, budget, true))
    };
    let per_example: Vec<_> = if parallel {
        dataset.par_iter().map(run).collect::<Result<_>>()?
    } else {
        dataset.iter().map(run).collect::<Result<_>>()?
    };
    let mut labels = EpochLabels::default();
    for (examples, attempted, eligible) in per_example {
        labels.examples.extend(examples);
        labels.probes_attempted += attempted;
        labels.eligible += usize::from(eligible);
    }
    labels
        .examples
        .sort_by_key(|e| (e.origin_id, e.probe_index));
    Ok(labels)
}

/// Masked copies of the training set that keep their original label and
/// carry no importance labels. New ids continue after `next_id`.
pub fn mask_augment(dataset: &[Example], cfg: &ProbeConfig, next_id: usize) -> Result<Vec<Example>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for ex in dataset {
        let maskable = ex.maskable_positions();
        let mut rng = example_rng(cfg.rng_seed, 0, ex.id, SALT_AUGMENT);
        let budget = probe_budget(cfg.gamma, &mut rng);
        if maskable.is_empty() {
            continue;
        }
        for _ in 0..budget {
            let positions: Vec<usize> = sample_mask(maskable.len(), cfg.mask_ratio, &mut rng)
                .into_iter()
                .map(|i| maskable[i])
                .collect();
            let mut variant = masked_example(ex, &positions);
            variant.id = next_id + out.len();
            variant.gold_keyword_positions = None;
            out.push(variant);
        }
    }
    Ok(out)
}

/// One line per example: `origin_id TAB labels`, labels space separated
/// with `_` for unlabelled positions.
pub fn format_dump(labels: &[SsaLabeledExample]) -> String {
    let mut out = String::new();
    for ex in labels {
        write!(out, "{}\t", ex.origin_id).expect("writing to a String");
        for (i, l) in ex.ssa_labels.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push(l.as_char());
        }
        out.push('\n');
    }
    out
}

/// Parses [`format_dump`] output back into `(origin_id, labels)` pairs.
pub fn parse_dump(text: &str) -> Result<Vec<(usize, Vec<TokenLabel>)>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let err = |reason: &str| Error::Parse {
                path: "labels.dump".into(),
                line: i + 1,
                reason: reason.into(),
            };
            let (id, rest) = line.split_once('\t').ok_or_else(|| err("missing tab"))?;
            let id = id.parse().map_err(|_| err("bad origin id"))?;
            let labels = rest
                .split(' ')
                .map(|s| {
                    let mut chars = s.chars();
                    match (chars.next(), chars.next()) {
                        (Some(c), None) => TokenLabel::from_char(c),
                        _ => None,
                    }
                })
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| err("bad label"))?;
            Ok((id, labels))
        })
        .collect()
}
