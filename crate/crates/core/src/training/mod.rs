//! Target-only, mask-augmented and SSA co-training loops.

mod config;
mod data;
mod loss;
mod metrics;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use config::{parse_kv_lines, DataSource, Mode, RunConfig};
pub use data::{prepare_data, PreparedData};
pub use loss::{loss_ssa, loss_target, loss_total};
pub use metrics::{classification_metrics, Metrics};

use crate::corpus::{Example, Vocabulary};
use crate::encoder::{Checkpoint, EncoderInput, EncoderModel, Forward, Pooling};
use crate::error::{Error, Result};
use crate::ssa_data::{
    generate_epoch_labels, mask_augment, EpochLabels, ModelPredictor, SsaLabeledExample, TokenLabel,
};
use crate::tensor::{adam_step, check_finite, AdamConfig, AdamState, Graph, Tensor, Var};

/// Per-epoch training summary; one row of `epochs.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Batch means of the three loss terms.
    pub l_target: f64,
    pub l_ssa: f64,
    pub l_total: f64,
    pub n_generated: usize,
    pub dev: Metrics,
    pub warning: Option<String>,
}

pub const EPOCH_CSV_HEADER: &str = "epoch,l_target,l_ssa,l_total,n_generated,dev_acc,dev_mcc,dev_f1";

pub fn epochs_csv(reports: &[EpochReport]) -> String {
    let mut out = format!("{EPOCH_CSV_HEADER}\n");
    for r in reports {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6}",
            r.epoch, r.l_target, r.l_ssa, r.l_total, r.n_generated, r.dev.accuracy, r.dev.mcc, r.dev.macro_f1
        )
        .expect("writing to a String");
    }
    out
}

/// Hooks into [`co_train`] for inspection; every method defaults to a no-op.
pub trait TrainObserver {
    /// Called after the forward pass of each batch, before the update.
    fn on_batch(&mut self, _epoch: usize, _graph: &Graph, _forwards: &[Forward]) {}
    /// Called once per epoch after evaluation. `labels` is what the epoch's
    /// snapshot generated, empty outside SSA epochs.
    fn on_epoch(&mut self, _report: &EpochReport, _model: &EncoderModel, _labels: &EpochLabels) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    pub best_checkpoint: Checkpoint,
    /// Zero-based epoch the best checkpoint comes from.
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    /// Labels per epoch, empty for epochs without probing.
    pub labels: Vec<EpochLabels>,
}

/// Inference-mode metrics of `model` on a classification dataset.
pub fn evaluate(model: &EncoderModel, pooling: Pooling, data: &[Example], parallel: bool) -> Result<Metrics> {
    let gold = data.iter().map(Example::class).collect::<Result<Vec<_>>>()?;
    let predict = |ex: &Example| model.predict_label(ex, pooling);
    let preds = if parallel {
        data.par_iter().map(predict).collect::<Result<Vec<_>>>()?
    } else {
        data.iter().map(predict).collect::<Result<Vec<_>>>()?
    };
    Ok(classification_metrics(&preds, &gold))
}

/// Mean minus standard deviation of accuracy over three interleaved dev folds.
fn three_way_score(model: &EncoderModel, pooling: Pooling, dev: &[Example], parallel: bool) -> Result<f64> {
    let mut accs = Vec::with_capacity(3);
    for fold in 0..3 {
        let part: Vec<Example> = dev.iter().skip(fold).step_by(3).cloned().collect();
        accs.push(evaluate(model, pooling, &part, parallel)?.accuracy);
    }
    let mean = accs.iter().sum::<f64>() / 3.0;
    let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
    Ok(mean - var.sqrt())
}

const SALT_INIT: u64 = 0x1a17;
const SALT_TRAIN: u64 = 0x7e41;

/// Trains per `cfg.mode`:
///
/// * `baseline`: target loss only.
/// * `mask_augment`: the training set gains masked copies up front.
/// * `ssa_co` / `ssa_hybrid`: after `warmup_epochs`, each epoch first
///   freezes a snapshot, probes the training set with it and then trains on
///   the mixed loss with those labels. Hybrid also pools by SSA importance.
pub fn co_train(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    train: &[Example],
    dev: &[Example],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    for ex in train.iter().chain(dev) {
        ex.class()?;
    }
    let mut enc = cfg.encoder.clone();
    enc.vocab_size = vocab.len();
    let pooling = cfg.mode.pooling();
    let probe_cfg = cfg.probe_config();
    let mut model = EncoderModel::new(enc, cfg.seed ^ SALT_INIT)?;
    let mut adam = AdamState::new(model.params().iter().map(|p| &*p.value));
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SALT_TRAIN);

    let augmented;
    let train: &[Example] = if cfg.mode == Mode::MaskAugment {
        let mut all = train.to_vec();
        let next_id = train.iter().map(|e| e.id + 1).max().unwrap_or(0);
        all.extend(mask_augment(train, &probe_cfg, next_id)?);
        augmented = all;
        &augmented
    } else {
        train
    };
    let row_of: HashMap<usize, usize> = train.iter().enumerate().map(|(i, e)| (e.id, i)).collect();

    let snapshot = |model: &EncoderModel, epoch: usize| Checkpoint {
        model: model.clone(),
        pooling,
        vocab: vocab.clone(),
        seed: cfg.seed,
        epoch: epoch as u32,
    };
    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut all_labels = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let ssa_active = cfg.mode.uses_ssa() && epoch >= cfg.warmup_epochs;
        let labels = if ssa_active {
            let frozen = model.clone();
            let predictor = ModelPredictor {
                model: &frozen,
                pooling,
            };
            generate_epoch_labels(&predictor, train, &probe_cfg, epoch as u32, cfg.parallel_probe)?
        } else {
            EpochLabels::default()
        };
        let mut probes_of: Vec<Vec<&SsaLabeledExample>> = vec![Vec::new(); train.len()];
        for l in &labels.examples {
            if l.epoch_generated != epoch as u32 {
                return Err(Error::contract(format!(
                    "label for example {} was generated in epoch {}, expected {epoch}",
                    l.origin_id, l.epoch_generated
                )));
            }
            let &row = row_of
                .get(&l.origin_id)
                .ok_or_else(|| Error::contract(format!("label for unknown example {}", l.origin_id)))?;
            probes_of[row].push(l);
        }
        let warning = (ssa_active && labels.eligible == 0)
            .then(|| format!("epoch {epoch}: no correctly classified sentence to probe"));

        order.shuffle(&mut rng);
        let (mut sum_t, mut sum_s, mut sum_total, mut n_batches) = (0.0f64, 0.0f64, 0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let mut forwards = Vec::with_capacity(batch.len());
            let mut rows = Vec::with_capacity(batch.len());
            let mut ssa_parts: Vec<Var> = Vec::new();
            let mut ssa_labels: Vec<TokenLabel> = Vec::new();
            for &i in batch {
                let ex = &train[i];
                let input = EncoderInput::from_example(ex);
                let fwd = bound.forward_full(&mut g, &input, pooling, ssa_active, Some(&mut rng))?;
                let c = g.shape(fwd.logits)[0];
                rows.push(g.reshape(fwd.logits, vec![1, c])?);
                if let Some(ssa) = fwd.ssa_logits.filter(|_| ssa_active) {
                    for probe in &probes_of[i] {
                        let positions = probe.labeled_positions();
                        if positions.is_empty() {
                            continue;
                        }
                        ssa_parts.push(g.select_rows(ssa, &positions)?);
                        ssa_labels.extend(positions.iter().map(|&p| probe.ssa_labels[p]));
                    }
                }
                forwards.push(fwd);
            }
            let logits = g.concat_rows(&rows)?;
            let targets: Vec<_> = batch.iter().map(|&i| train[i].target).collect();
            let l_target = loss_target(&mut g, logits, &targets)?;
            let l_ssa = if ssa_parts.is_empty() {
                g.constant(Tensor::scalar(0.0))
            } else {
                let all = g.concat_rows(&ssa_parts)?;
                loss_ssa(&mut g, all, &ssa_labels)?
            };
            let total = if ssa_active {
                loss_total(&mut g, l_target, l_ssa, cfg.alpha)?
            } else {
                l_target
            };
            observer.on_batch(epoch, &g, &forwards);

            let lv = g.value(total).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}: {lv}")));
            }
            sum_t += f64::from(g.value(l_target).item());
            sum_s += f64::from(g.value(l_ssa).item());
            sum_total += f64::from(lv);
            n_batches += 1;

            g.backward(total)?;
            let zeros: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect();
            let grads: Vec<&[f32]> = bound
                .vars
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| g.grad(v).unwrap_or(z))
                .collect();
            let mut tensors = model.tensors_mut();
            adam_step(&mut tensors, &grads, &mut adam, &adam_cfg)?;
            for p in model.params() {
                check_finite(&p.name, &p.value)?;
            }
        }

        let dev_metrics = evaluate(&model, pooling, dev, cfg.parallel_probe)?;
        let nb = n_batches as f64;
        let report = EpochReport {
            epoch,
            l_target: sum_t / nb,
            l_ssa: sum_s / nb,
            l_total: sum_total / nb,
            n_generated: labels.examples.len(),
            dev: dev_metrics,
            warning,
        };
        let score = if cfg.three_way_dev {
            three_way_score(&model, pooling, dev, cfg.parallel_probe)?
        } else {
            dev_metrics.accuracy
        };
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, snapshot(&model, epoch + 1)));
        }
        observer.on_epoch(&report, &model, &labels);
        reports.push(report);
        all_labels.push(labels);
    }

    let (_, best_epoch, best_checkpoint) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        final_checkpoint: snapshot(&model, cfg.epochs),
        best_checkpoint,
        best_epoch,
        reports,
        labels: all_labels,
    })
}
