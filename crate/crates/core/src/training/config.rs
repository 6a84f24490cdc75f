use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::{LabelKind, Schema, SynthSpec};
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::ssa_data::ProbeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Baseline,
    MaskAugment,
    SsaCo,
    SsaHybrid,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::MaskAugment, Mode::SsaCo, Mode::SsaHybrid];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::MaskAugment => "mask_augment",
            Mode::SsaCo => "ssa_co",
            Mode::SsaHybrid => "ssa_hybrid",
        }
    }

    pub fn pooling(self) -> Pooling {
        match self {
            Mode::SsaHybrid => Pooling::Hybrid,
            _ => Pooling::Cls,
        }
    }

    pub fn uses_ssa(self) -> bool {
        matches!(self, Mode::SsaCo | Mode::SsaHybrid)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "mode",
                    format!("expected baseline|mask_augment|ssa_co|ssa_hybrid, got `{s}`"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Tsv {
        train: PathBuf,
        dev: PathBuf,
        test: Option<PathBuf>,
        schema: Schema,
    },
}

/// Every hyperparameter of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    /// Weight of the target loss; the SSA loss gets `1 - alpha`.
    pub alpha: f32,
    pub gamma: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// `vocab_size` is overwritten from the data once the vocabulary exists.
    /// `ssa_beta` holds the pooling mix.
    pub encoder: EncoderConfig,
    pub min_freq: usize,
    pub parallel_probe: bool,
    /// Pick the reported best epoch by mean-minus-std accuracy over three dev folds.
    pub three_way_dev: bool,
    pub data: DataSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Baseline,
            alpha: 0.9,
            gamma: 1.0,
            mask_ratio: 0.3,
            epochs: 5,
            warmup_epochs: 1,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            encoder: EncoderConfig::default(),
            min_freq: 1,
            parallel_probe: false,
            three_way_dev: false,
            data: DataSource::Synth(SynthSpec::default()),
        }
    }
}

/// Splits `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: "config".into(),
            line: i + 1,
            reason: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(key, format!("expected true|false, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            mask_ratio: self.mask_ratio,
            gamma: self.gamma,
            rng_seed: self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5ca1_ab1e,
        }
    }

    pub fn label_kind(&self) -> LabelKind {
        LabelKind::Class {
            n_classes: self.encoder.n_classes,
        }
    }

    /// Applies one `key=value` setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let enc = &mut self.encoder;
        match key {
            "mode" => self.mode = value.parse()?,
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => enc.ssa_beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "d_model" => enc.d_model = parse(key, value)?,
            "n_layers" => enc.n_layers = parse(key, value)?,
            "n_heads" => enc.n_heads = parse(key, value)?,
            "d_ff" => enc.d_ff = parse(key, value)?,
            "max_len" => enc.max_len = parse(key, value)?,
            "n_classes" => enc.n_classes = parse(key, value)?,
            "dropout" => enc.dropout_rate = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "parallel_probe" => self.parallel_probe = parse_bool(key, value)?,
            "three_way_dev" => self.three_way_dev = parse_bool(key, value)?,
            "synth_spec" => self.data = DataSource::Synth(SynthSpec::load(Path::new(value))?),
            "train_tsv" | "dev_tsv" | "test_tsv" | "schema" => self.set_tsv(key, value)?,
            _ => {
                if let Some(synth_key) = key.strip_prefix("synth.") {
                    let mut text = match &self.data {
                        DataSource::Synth(spec) => spec.to_kv_string(),
                        DataSource::Tsv { .. } => {
                            return Err(Error::config(key, "synthetic key given for a TSV run"))
                        }
                    };
                    text.push_str(&format!("{synth_key}={value}\n"));
                    self.data = DataSource::Synth(SynthSpec::from_kv_str(&text)?);
                } else {
                    return Err(Error::config(key, "unknown key"));
                }
            }
        }
        Ok(())
    }

    fn set_tsv(&mut self, key: &str, value: &str) -> Result<()> {
        if let DataSource::Synth(_) = self.data {
            self.data = DataSource::Tsv {
                train: PathBuf::new(),
                dev: PathBuf::new(),
                test: None,
                schema: Schema::Single,
            };
        }
        let DataSource::Tsv {
            train,
            dev,
            test,
            schema,
        } = &mut self.data
        else {
            unreachable!("set to Tsv above")
        };
        match key {
            "train_tsv" => *train = PathBuf::from(value),
            "dev_tsv" => *dev = PathBuf::from(value),
            "test_tsv" => *test = Some(PathBuf::from(value)),
            _ => *schema = value.parse()?,
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv_lines(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_kv_str(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config("alpha", "must lie in (0, 1]"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.encoder.n_classes < 2 {
            return Err(Error::config(
                "n_classes",
                "training runs are classification runs and need at least 2 classes",
            ));
        }
        if let DataSource::Tsv { train, dev, .. } = &self.data {
            if train.as_os_str().is_empty() || dev.as_os_str().is_empty() {
                return Err(Error::config("train_tsv", "TSV runs need both train_tsv and dev_tsv"));
            }
        }
        self.probe_config().validate()?;
        let mut enc = self.encoder.clone();
        enc.vocab_size = enc.vocab_size.max(1);
        enc.validate()
    }
}
