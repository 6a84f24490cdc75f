//! End-to-end runs: train-and-test, the γ sensitivity sweep and per-token
//! explanations.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::corpus::{Example, Vocabulary};
use crate::encoder::{argmax, EncoderInput, EncoderModel, Pooling};
use crate::error::{Error, Result};
use crate::svg;
use crate::tensor::{Graph, MASK_FILL};
use crate::training::{
    co_train, evaluate, prepare_data, Metrics, Mode, PreparedData, RunConfig, TrainObserver,
    TrainOutcome,
};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub data: PreparedData,
    pub outcome: TrainOutcome,
    /// Test metrics of the best-dev checkpoint; `None` without a test split.
    pub test: Option<Metrics>,
}

/// Prepares the configured data, trains, and scores the best-dev checkpoint
/// on the test split.
pub fn run(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<RunResult> {
    let data = prepare_data(cfg)?;
    run_on(cfg, data, observer)
}

pub fn run_on(cfg: &RunConfig, data: PreparedData, observer: &mut dyn TrainObserver) -> Result<RunResult> {
    let outcome = co_train(cfg, &data.vocab, &data.train, &data.dev, observer)?;
    let test = if data.test.is_empty() {
        None
    } else {
        let best = &outcome.best_checkpoint;
        Some(evaluate(&best.model, best.pooling, &data.test, cfg.parallel_probe)?)
    };
    Ok(RunResult { data, outcome, test })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub gamma: f64,
    pub mode: Mode,
    pub seed: u64,
    /// Dev accuracy of the best-dev epoch.
    pub dev_acc: f64,
}

/// Trains every `γ × mode × seed` combination on `base`'s data. Rows come
/// back in grid order whether or not `parallel` is set.
pub fn run_sweep(
    base: &RunConfig,
    gammas: &[f64],
    modes: &[Mode],
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() || modes.is_empty() || seeds.is_empty() {
        return Err(Error::config("gammas", "sweep needs at least one gamma, mode and seed"));
    }
    let data = prepare_data(base)?;
    let mut grid = Vec::new();
    for &gamma in gammas {
        for &mode in modes {
            for &seed in seeds {
                grid.push((gamma, mode, seed));
            }
        }
    }
    let one = |&(gamma, mode, seed): &(f64, Mode, u64)| -> Result<SweepRow> {
        let mut cfg = base.clone();
        cfg.gamma = gamma;
        cfg.mode = mode;
        cfg.seed = seed;
        let outcome = co_train(&cfg, &data.vocab, &data.train, &data.dev, &mut ())?;
        let dev_acc = outcome.reports[outcome.best_epoch].dev.accuracy;
        Ok(SweepRow {
            gamma,
            mode,
            seed,
            dev_acc,
        })
    };
    if parallel {
        grid.par_iter().map(one).collect()
    } else {
        grid.iter().map(one).collect()
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma,mode,seed,dev_acc\n");
    for r in rows {
        writeln!(out, "{},{},{},{:.6}", r.gamma, r.mode, r.seed, r.dev_acc).expect("writing to a String");
    }
    out
}

/// Mean dev accuracy per `(mode, γ)`, modes in first-seen order.
pub fn sweep_means(rows: &[SweepRow]) -> Vec<(Mode, Vec<(f64, f64)>)> {
    let mut out: Vec<(Mode, Vec<(f64, f64, usize)>)> = Vec::new();
    for r in rows {
        let idx = match out.iter().position(|(m, _)| *m == r.mode) {
            Some(i) => i,
            None => {
                out.push((r.mode, Vec::new()));
                out.len() - 1
            }
        };
        let pts = &mut out[idx].1;
        match pts.iter_mut().find(|(g, _, _)| *g == r.gamma) {
            Some(p) => {
                p.1 += r.dev_acc;
                p.2 += 1;
            }
            None => pts.push((r.gamma, r.dev_acc, 1)),
        }
    }
    out.into_iter()
        .map(|(m, pts)| {
            let mut pts: Vec<(f64, f64)> = pts.into_iter().map(|(g, s, n)| (g, s / n as f64)).collect();
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            (m, pts)
        })
        .collect()
}

pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let series: Vec<(String, Vec<(f64, f64)>)> = sweep_means(rows)
        .into_iter()
        .map(|(m, pts)| (m.to_string(), pts))
        .collect();
    svg::line_chart("dev accuracy vs generation ratio", "gamma", "mean dev accuracy", &series)
}

/// Per-token view of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub tokens: Vec<String>,
    /// `[head][token]`: last-layer attention each token receives, averaged
    /// over the non-padding query positions.
    pub attention: Vec<Vec<f32>>,
    /// Probability of the "important" SSA class per token.
    pub ssa_prob: Vec<f32>,
    /// Softmax of the importance logit over non-special tokens; 0 at
    /// special tokens. These are the hybrid pooling weights.
    pub pool_weight: Vec<f32>,
    pub predicted: usize,
    pub confidence: f32,
}

pub fn explain(model: &EncoderModel, pooling: Pooling, example: &Example, vocab: &Vocabulary) -> Result<Explanation> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let input = EncoderInput::from_example(example);
    let fwd = bound.forward_full(&mut g, &input, pooling, true, None)?;
    let n = example.len();
    let ssa = fwd.ssa_logits.expect("requested with_ssa");
    let probs = g.softmax(ssa, 1)?;
    let ssa_prob: Vec<f32> = (0..n).map(|i| g.value(probs).at(i, 1)).collect();

    let logits = g.value(ssa);
    let special = example.special_mask();
    let z: Vec<f32> = (0..n)
        .map(|i| if special[i] { MASK_FILL } else { logits.at(i, 1) })
        .collect();
    let pool_weight = if special.iter().all(|&s| s) {
        vec![0.0; n]
    } else {
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let e: Vec<f32> = z
            .iter()
            .zip(&special)
            .map(|(&v, &s)| if s { 0.0 } else { (v - max).exp() })
            .collect();
        let sum: f32 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    };

    let queries: Vec<usize> = (0..n).filter(|&i| !input.pad_mask[i]).collect();
    let last = fwd.encoded.attention_maps.last().expect("at least one layer");
    let attention = last
        .iter()
        .map(|&map| {
            let a = g.value(map);
            (0..n)
                .map(|j| queries.iter().map(|&i| a.at(i, j)).sum::<f32>() / queries.len() as f32)
                .collect()
        })
        .collect();

    let class_logits = g.value(fwd.logits).data().to_vec();
    let predicted = argmax(&class_logits);
    let max = class_logits[predicted];
    let denom: f32 = class_logits.iter().map(|v| (v - max).exp()).sum();
    Ok(Explanation {
        tokens: vocab.decode(&example.token_ids),
        attention,
        ssa_prob,
        pool_weight,
        predicted,
        confidence: 1.0 / denom,
    })
}

impl Explanation {
    /// Tab-separated report with values rounded to three decimals.
    pub fn report(&self) -> String {
        let mut out = String::from("token");
        for h in 0..self.attention.len() {
            write!(out, "\tattn_h{h}").expect("writing to a String");
        }
        out.push_str("\tssa_prob\tpool_weight\n");
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            for head in &self.attention {
                write!(out, "\t{:.3}", head[i]).expect("writing to a String");
            }
            writeln!(out, "\t{:.3}\t{:.3}", self.ssa_prob[i], self.pool_weight[i]).expect("writing to a String");
        }
        writeln!(out, "predicted\t{}\tconfidence\t{:.3}", self.predicted, self.confidence)
            .expect("writing to a String");
        out
    }

    pub fn heatmap_svg(&self) -> String {
        let mut rows = vec![
            ("pool weight".to_string(), self.pool_weight.clone()),
            ("ssa prob".to_string(), self.ssa_prob.clone()),
        ];
        for (h, head) in self.attention.iter().enumerate() {
            rows.push((format!("head {h}"), head.clone()));
        }
        svg::heatmap(&self.tokens, &rows)
    }
}

/// How well pooling weights single out the planted keyword on a synthetic
/// split: the fraction of sentences whose top-weighted token is a gold
/// keyword, and the AUC of keyword weights against distractor weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub top1: f64,
    pub auc: f64,
    pub n_sentences: usize,
}

pub fn importance_alignment(
    model: &EncoderModel,
    vocab: &Vocabulary,
    examples: &[Example],
    is_distractor: impl Fn(&str) -> bool,
) -> Result<Alignment> {
    let mut hits = 0;
    let mut keyword_w = Vec::new();
    let mut distractor_w = Vec::new();
    for ex in examples {
        let gold = ex
            .gold_keyword_positions
            .as_ref()
            .ok_or_else(|| Error::contract(format!("example {} has no gold keyword", ex.id)))?;
        let e = explain(model, Pooling::Hybrid, ex, vocab)?;
        let top = argmax(&e.pool_weight);
        hits += usize::from(gold.contains(&top));
        for &p in gold {
            keyword_w.push(e.pool_weight[p]);
        }
        for (i, t) in e.tokens.iter().enumerate() {
            if is_distractor(t) {
                distractor_w.push(e.pool_weight[i]);
            }
        }
    }
    let mut wins = 0.0;
    for &k in &keyword_w {
        for &d in &distractor_w {
            wins += if k > d {
                1.0
            } else if k == d {
                0.5
            } else {
                0.0
            };
        }
    }
    let pairs = (keyword_w.len() * distractor_w.len()) as f64;
    Ok(Alignment {
        top1: hits as f64 / examples.len().max(1) as f64,
        auc: if pairs > 0.0 { wins / pairs } else { f64::NAN },
        n_sentences: examples.len(),
    })
}
