use crate::corpus::{
    build_vocab, encode_examples, read_tsv, synth_generate, Example, RawExample, SynthSpec,
    Vocabulary,
};
use crate::error::Result;

use super::{DataSource, RunConfig};

/// Encoded splits sharing one vocabulary built from the training split.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    /// How many examples were cut down to `max_len`.
    pub truncated: usize,
    /// Set for synthetic runs; carries the lexicons.
    pub synth: Option<SynthSpec>,
}

/// Loads or generates the configured corpus, builds the vocabulary from the
/// training split and truncates every example to the encoder's `max_len`.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let (train, dev, test, synth) = match &cfg.data {
        DataSource::Synth(spec) => {
            let s = synth_generate(spec)?;
            (s.train, s.dev, s.test, Some(spec.clone()))
        }
        DataSource::Tsv {
            train,
            dev,
            test,
            schema,
        } => {
            let kind = cfg.label_kind();
            let test = match test {
                Some(p) => read_tsv(p, *schema, kind)?,
                None => Vec::new(),
            };
            (
                read_tsv(train, *schema, kind)?,
                read_tsv(dev, *schema, kind)?,
                test,
                None,
            )
        }
    };
    let vocab = build_vocab(
        train.iter().flat_map(|ex: &RawExample| {
            std::iter::once(ex.tokens.as_slice()).chain(ex.tokens_b.as_deref())
        }),
        cfg.min_freq,
    );
    let mut truncated = 0;
    let mut encode = |raw: &[RawExample]| {
        let mut out = encode_examples(raw, &vocab, 0);
        for ex in &mut out {
            truncated += usize::from(ex.truncate(cfg.encoder.max_len));
        }
        out
    };
    let (train, dev, test) = (encode(&train), encode(&dev), encode(&test));
    Ok(PreparedData {
        vocab,
        train,
        dev,
        test,
        truncated,
        synth,
    })
}
