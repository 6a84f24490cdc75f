use std::fs;
use std::path::Path;

use super::{encode_examples, tokenize, Example, RawExample, Target, Vocabulary};
use crate::error::{Error, Result};

/// Column layout of a TSV dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schema {
    /// `sentence TAB label`
    Single,
    /// `sentence1 TAB sentence2 TAB label`
    Pair,
}

impl Schema {
    fn columns(self) -> usize {
        match self {
            Schema::Single => 2,
            Schema::Pair => 3,
        }
    }
}

impl std::str::FromStr for Schema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Schema::Single),
            "pair" => Ok(Schema::Pair),
            other => Err(Error::config("schema", format!("expected single|pair, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelKind {
    Class { n_classes: usize },
    Regression,
}

fn parse_label(s: &str, kind: LabelKind) -> std::result::Result<Target, String> {
    match kind {
        LabelKind::Class { n_classes } => match s.parse::<usize>() {
            Ok(c) if c < n_classes => Ok(Target::Class(c)),
            _ => Err(format!("unknown label `{s}` (expected 0..{n_classes})")),
        },
        LabelKind::Regression => s
            .parse::<f32>()
            .ok()
            .filter(|v| v.is_finite())
            .map(Target::Regression)
            .ok_or_else(|| format!("unknown label `{s}` (expected a number)")),
    }
}

/// Reads and tokenizes a TSV file. A first line whose label column reads
/// `label` is treated as a header; blank lines are skipped.
pub fn read_tsv(path: &Path, schema: Schema, kind: LabelKind) -> Result<Vec<RawExample>> {
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != schema.columns() {
            return Err(Error::Parse {
                path: display,
                line: line_no,
                reason: format!("expected {} columns, found {}", schema.columns(), cols.len()),
            });
        }
        let label = cols[cols.len() - 1].trim();
        if i == 0 && label == "label" {
            continue;
        }
        let target = parse_label(label, kind).map_err(|reason| Error::Parse {
            path: display.clone(),
            line: line_no,
            reason,
        })?;
        out.push(RawExample {
            tokens: tokenize(cols[0]),
            tokens_b: (schema == Schema::Pair).then(|| tokenize(cols[1])),
            target,
            gold_keyword_positions: None,
        });
    }
    Ok(out)
}

/// Reads a TSV file and encodes it with `vocab`; ids are line order from 0.
pub fn load_tsv(
    path: &Path,
    schema: Schema,
    kind: LabelKind,
    vocab: &Vocabulary,
) -> Result<Vec<Example>> {
    Ok(encode_examples(&read_tsv(path, schema, kind)?, vocab, 0))
}
