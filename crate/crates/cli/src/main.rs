use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use ssa_core::corpus::{build_vocab, encode_example, synth_generate, tokenize, RawExample, Target};
use ssa_core::encoder::Checkpoint;
use ssa_core::experiment::{explain, run_on, run_sweep, sweep_csv, sweep_svg};
use ssa_core::ssa_data::{format_dump, generate_epoch_labels, ModelPredictor};
use ssa_core::training::{epochs_csv, evaluate, prepare_data, DataSource, Mode, PreparedData, RunConfig};
use ssa_core::Error;

#[derive(Parser)]
#[command(name = "ssa", about = "Self-supervised token-importance training for text classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set mode=ssa_co`; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory; every file the command writes lands here
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.ckpt, best.ckpt and epochs.csv
    Train(Common),
    /// Score a checkpoint on the configured dev or test split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Generate SSA labels for the training split and write labels.dump
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train every gamma x mode x seed combination; write sweep.csv and sweep.svg
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', required = true)]
        gammas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "mask_augment,ssa_co,ssa_hybrid")]
        modes: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        parallel: bool,
    },
    /// Per-token attention, SSA probability and pooling weight for one sentence
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentence: String,
    },
    /// Write the synthetic corpus as train/dev/test TSV files
    Synth(Common),
}

fn load_config(common: &Common) -> ssa_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(out: &Path, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = out.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(common: &Common) -> anyhow::Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(&common.out)
}

/// Data for a checkpoint-driven command. The vocabulary rebuilt from the
/// configured training split must hash to the checkpoint's.
fn data_for(cfg: &RunConfig, ckpt: &Checkpoint) -> ssa_core::Result<PreparedData> {
    let mut cfg = cfg.clone();
    cfg.encoder.max_len = ckpt.model.config().max_len;
    let data = prepare_data(&cfg)?;
    if data.vocab.hash() != ckpt.vocab.hash() {
        return Err(Error::VocabMismatch {
            checkpoint: ckpt.vocab.hash(),
            dataset: data.vocab.hash(),
        });
    }
    Ok(data)
}

fn train(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let data = prepare_data(&cfg)?;
    if data.truncated > 0 {
        eprintln!("truncated {} examples to max_len {}", data.truncated, cfg.encoder.max_len);
    }
    let result = run_on(&cfg, data, &mut ())?;
    let outcome = &result.outcome;
    for r in &outcome.reports {
        if let Some(w) = &r.warning {
            eprintln!("warning: {w}");
        }
    }
    outcome.final_checkpoint.save(&out.join("model.ckpt"))?;
    outcome.best_checkpoint.save(&out.join("best.ckpt"))?;
    write(out, "epochs.csv", epochs_csv(&outcome.reports))?;
    for (epoch, labels) in outcome.labels.iter().enumerate() {
        if !labels.examples.is_empty() {
            write(out, &format!("labels_epoch{epoch}.dump"), format_dump(&labels.examples))?;
        }
    }
    let last = outcome.reports.last().expect("at least one epoch");
    println!(
        "mode={} epochs={} final_dev_acc={:.4} best_epoch={} best_dev_acc={:.4}",
        cfg.mode,
        cfg.epochs,
        last.dev.accuracy,
        outcome.best_epoch,
        outcome.reports[outcome.best_epoch].dev.accuracy
    );
    if let Some(t) = result.test {
        println!("test_acc={:.4} test_mcc={:.4} test_f1={:.4}", t.accuracy, t.mcc, t.macro_f1);
    }
    Ok(())
}

fn eval(common: &Common, checkpoint: &Path, split: &str) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = data_for(&cfg, &ckpt)?;
    let examples = match split {
        "dev" => &data.dev,
        "test" => &data.test,
        "train" => &data.train,
        other => {
            return Err(Error::Config {
                key: "split".into(),
                reason: format!("expected dev|test|train, got `{other}`"),
            }
            .into())
        }
    };
    let m = evaluate(&ckpt.model, ckpt.pooling, examples, false)?;
    println!("split={split} n={} acc={:.4} mcc={:.4} f1={:.4}", m.n, m.accuracy, m.mcc, m.macro_f1);
    Ok(())
}

fn probe(common: &Common, checkpoint: &Path) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let data = data_for(&cfg, &ckpt)?;
    let predictor = ModelPredictor {
        model: &ckpt.model,
        pooling: ckpt.pooling,
    };
    let labels = generate_epoch_labels(&predictor, &data.train, &cfg.probe_config(), ckpt.epoch, cfg.parallel_probe)?;
    write(out, "labels.dump", format_dump(&labels.examples))?;
    println!(
        "n_generated={} eligible={} probes={}",
        labels.examples.len(),
        labels.eligible,
        labels.probes_attempted
    );
    Ok(())
}

fn sweep(common: &Common, gammas: &[f64], modes: &[String], seeds: &[u64], parallel: bool) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    if !matches!(cfg.data, DataSource::Synth(_)) {
        return Err(Error::Config {
            key: "train_tsv".into(),
            reason: "sweeps run on the synthetic corpus".into(),
        }
        .into());
    }
    let modes = modes
        .iter()
        .map(|m| {
            let mode: Mode = m.parse()?;
            if mode == Mode::Baseline {
                return Err(Error::Config {
                    key: "modes".into(),
                    reason: "sweep modes are mask_augment, ssa_co and ssa_hybrid".into(),
                });
            }
            Ok(mode)
        })
        .collect::<ssa_core::Result<Vec<_>>>()?;
    let out = out_dir(common)?;
    let rows = run_sweep(&cfg, gammas, &modes, seeds, parallel)?;
    write(out, "sweep.csv", sweep_csv(&rows))?;
    write(out, "sweep.svg", sweep_svg(&rows))?;
    println!("rows={}", rows.len());
    Ok(())
}

fn explain_cmd(common: &Common, checkpoint: &Path, sentence: &str) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let out = out_dir(common)?;
    let raw = RawExample {
        tokens: tokenize(sentence),
        tokens_b: None,
        target: Target::Class(0),
        gold_keyword_positions: None,
    };
    if raw.tokens.is_empty() {
        bail!(Error::Config {
            key: "sentence".into(),
            reason: "no tokens".into()
        });
    }
    let ex = encode_example(&raw, &ckpt.vocab, 0);
    let e = explain(&ckpt.model, ckpt.pooling, &ex, &ckpt.vocab)?;
    print!("{}", e.report());
    write(out, "explain.svg", e.heatmap_svg())?;
    Ok(())
}

fn synth(common: &Common) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let DataSource::Synth(spec) = &cfg.data else {
        return Err(Error::Config {
            key: "train_tsv".into(),
            reason: "synth needs a synthetic data source".into(),
        }
        .into());
    };
    let out = out_dir(common)?;
    let splits = synth_generate(spec)?;
    let tsv = |rows: &[RawExample]| {
        let mut s = String::from("sentence\tlabel\n");
        for r in rows {
            let label = r.target.class().expect("synthetic labels are classes");
            s.push_str(&format!("{}\t{label}\n", r.tokens.join(" ")));
        }
        s
    };
    write(out, "train.tsv", tsv(&splits.train))?;
    write(out, "dev.tsv", tsv(&splits.dev))?;
    write(out, "test.tsv", tsv(&splits.test))?;
    write(out, "synth.spec", spec.to_kv_string())?;
    let vocab = build_vocab(splits.train.iter().map(|r| r.tokens.as_slice()), cfg.min_freq);
    println!(
        "train={} dev={} test={} vocab={}",
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        vocab.len()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => 2,
        Some(Error::NonFinite(_)) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => eval(common, checkpoint, split),
        Command::Probe { common, checkpoint } => probe(common, checkpoint),
        Command::Sweep {
            common,
            gammas,
            modes,
            seeds,
            parallel,
        } => sweep(common, gammas, modes, seeds, *parallel),
        Command::Explain {
            common,
            checkpoint,
            sentence,
        } => explain_cmd(common, checkpoint, sentence),
        Command::Synth(c) => synth(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
