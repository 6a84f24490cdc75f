//! One test per acceptance criterion. Each prints a `criterion N: PASS|FAIL`
//! line straight to stderr, so the verdicts show up even when the harness
//! captures output.

mod common;

use std::collections::BTreeSet;
use std::io::Write as _;
use std::time::Instant;

use rand::Rng;
use ssa_core::corpus::{build_vocab, encode_examples, synth_generate, Example, SynthSpec, CLS, MASK, PAD, SEP};
use ssa_core::encoder::{EncoderModel, Forward, Pooling};
use ssa_core::experiment::{importance_alignment, run, run_sweep, sweep_means};
use ssa_core::ssa_data::{format_dump, generate_epoch_labels, probe_with_mask, EpochLabels, ModelPredictor, ProbeConfig, TokenLabel};
use ssa_core::tensor::Graph;
use ssa_core::training::{
    classification_metrics, co_train, epochs_csv, prepare_data, EpochReport, Mode, RunConfig, TrainObserver,
};

fn verdict(n: u32, pass: bool, detail: &str) {
    let line = format!("\ncriterion {n}: {} — {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

/// Default synthetic setting: 2,000 training sentences, distractor
/// probability 0.5, five epochs.
fn synthetic_run(mode: Mode, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let mut worst_op = (String::new(), 0.0f64);
    for (i, case) in common::op_cases().iter().enumerate() {
        let e = common::check_op(case, 100 + i as u64);
        if e > worst_op.1 {
            worst_op = (case.name.to_string(), e);
        }
    }
    let groups = common::end_to_end_check(50, 3);
    let worst_e2e = groups
        .iter()
        .map(|g| (g.group.clone(), g.worst))
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_op.1 < 1e-4 && worst_e2e.1 < 1e-2 && secs < 60.0;
    verdict(
        1,
        pass,
        &format!(
            "worst op {} {:.2e} (<1e-4), worst group {} {:.2e} (<1e-2), {secs:.1}s",
            worst_op.0, worst_op.1, worst_e2e.0, worst_e2e.1
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Brute-force label for one (example, mask) pair.
fn oracle_probe(model: &EncoderModel, pooling: Pooling, ex: &Example, mask: &[usize]) -> Option<Vec<TokenLabel>> {
    let gold = ex.target.class().unwrap();
    let before = argmax(&model.predict_logits(ex, pooling).unwrap());
    if before != gold {
        return None;
    }
    let mut masked = ex.clone();
    for &p in mask {
        masked.token_ids[p] = MASK;
    }
    let after = argmax(&model.predict_logits(&masked, pooling).unwrap());
    let value = if after != before { TokenLabel::Important } else { TokenLabel::Unimportant };
    let mut labels = vec![TokenLabel::NoLabel; ex.len()];
    for &p in mask {
        labels[p] = value;
    }
    Some(labels)
}

fn oracle_mask_count(n: usize, ratio: f64) -> usize {
    let x = ratio * n as f64;
    let (fl, frac) = (x.floor(), x - x.floor());
    let r = if frac > 0.5 || (frac == 0.5 && fl % 2.0 == 1.0) { fl + 1.0 } else { fl };
    (r as usize).max(1)
}

#[test]
fn criterion_2_probe_oracle() {
    let start = Instant::now();
    let spec = SynthSpec::with_sizes(375, 60, 6, 4, 4, 10, 0.5, 3);
    let raw = synth_generate(&spec).unwrap().train;
    let vocab = build_vocab(raw.iter().map(|r| r.tokens.as_slice()), 1);
    let data = encode_examples(&raw, &vocab, 0);
    let model = common::perturbed_model(common::small_config(vocab.len()), 21);
    let pooling = Pooling::Hybrid;
    let predictor = ModelPredictor { model: &model, pooling };
    let cfg = ProbeConfig {
        mask_ratio: 0.3,
        gamma: 2.0,
        rng_seed: 17,
    };
    let labels = generate_epoch_labels(&predictor, &data, &cfg, 1, false).unwrap();

    let mut mismatches = Vec::new();
    // the correct-prediction filter decides exactly which sentences were probed
    let probed: BTreeSet<usize> = labels.examples.iter().map(|l| l.origin_id).collect();
    let eligible: BTreeSet<usize> = data
        .iter()
        .filter(|ex| {
            ex.token_ids.iter().any(|&t| t != PAD && t != CLS && t != SEP)
                && argmax(&model.predict_logits(ex, pooling).unwrap()) == ex.target.class().unwrap()
        })
        .map(|ex| ex.id)
        .collect();
    if probed != eligible {
        mismatches.push(format!("probed {} sentences, oracle expects {}", probed.len(), eligible.len()));
    }

    let mut pairs = 0;
    let (mut flips, mut holds) = (0, 0);
    for l in labels.examples.iter().take(200) {
        let ex = &data[l.origin_id];
        let mask = l.labeled_positions();
        let n_maskable = ex.token_ids.iter().filter(|&&t| t != PAD && t != CLS && t != SEP).count();
        if mask.len() != oracle_mask_count(n_maskable, cfg.mask_ratio) {
            mismatches.push(format!("example {}: {} masked of {n_maskable}", ex.id, mask.len()));
        }
        match oracle_probe(&model, pooling, ex, &mask) {
            Some(expected) if expected == l.ssa_labels && l.token_ids == ex.token_ids => {
                if expected[mask[0]] == TokenLabel::Important {
                    flips += 1;
                } else {
                    holds += 1;
                }
            }
            other => mismatches.push(format!("example {}: {:?} vs {:?}", ex.id, l.ssa_labels, other)),
        }
        pairs += 1;
    }

    // random masks on arbitrary sentences, wrong predictions included
    let mut r = common::rng(99);
    let mut rejected = 0;
    for _ in 0..200 {
        let ex = &data[r.random_range(0..data.len())];
        let maskable: Vec<usize> = (0..ex.len()).filter(|&i| ex.token_ids[i] != CLS && ex.token_ids[i] != SEP && ex.token_ids[i] != PAD).collect();
        let k = r.random_range(1..=maskable.len());
        let mut mask: Vec<usize> = rand::seq::index::sample(&mut r, maskable.len(), k).into_iter().map(|i| maskable[i]).collect();
        mask.sort_unstable();
        let got = probe_with_mask(&predictor, ex, &mask, 0, 0).unwrap().map(|l| l.ssa_labels);
        let expected = oracle_probe(&model, pooling, ex, &mask);
        rejected += usize::from(expected.is_none());
        if got != expected {
            mismatches.push(format!("direct probe of example {}: {got:?} vs {expected:?}", ex.id));
        }
    }

    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches.is_empty() && pairs == 200 && flips > 0 && holds > 0 && rejected > 0 && secs < 60.0;
    verdict(
        2,
        pass,
        &format!(
            "{pairs} generated pairs ({flips} flip, {holds} no-flip) + 200 direct pairs ({rejected} filtered), {} mismatches, {secs:.1}s",
            mismatches.len()
        ),
    );
    assert!(pass, "{:?}", &mismatches[..mismatches.len().min(5)]);
}

// ---------------------------------------------------------------- 3

#[derive(Default)]
struct ParamTrace(Vec<Vec<Vec<u32>>>);

impl TrainObserver for ParamTrace {
    fn on_epoch(&mut self, _: &EpochReport, model: &EncoderModel, _: &EpochLabels) {
        self.0.push(
            model
                .params()
                .iter()
                .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
                .collect(),
        );
    }
}

#[derive(Default)]
struct PoolCheck {
    forwards: usize,
    mismatches: usize,
}

impl TrainObserver for PoolCheck {
    fn on_batch(&mut self, _: usize, g: &Graph, forwards: &[Forward]) {
        for f in forwards {
            self.forwards += 1;
            let same = g
                .value(f.pooled)
                .data()
                .iter()
                .zip(g.value(f.encoded.cls_repr).data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            self.mismatches += usize::from(!same);
        }
    }
}

#[test]
fn criterion_3_degenerate_identities() {
    let data = prepare_data(&synthetic_run(Mode::Baseline, 0)).unwrap();
    let traced = |mode: Mode| {
        let mut cfg = synthetic_run(mode, 0);
        cfg.epochs = 2;
        cfg.alpha = 1.0;
        let mut trace = ParamTrace::default();
        let out = co_train(&cfg, &data.vocab, &data.train, &data.dev, &mut trace).unwrap();
        (trace.0, out)
    };
    let (base, base_out) = traced(Mode::Baseline);
    let (co, co_out) = traced(Mode::SsaCo);
    let alpha_ok = base.len() == 2
        && base == co
        && base_out.final_checkpoint.to_bytes() == co_out.final_checkpoint.to_bytes()
        && co_out.reports[1].n_generated > 0;

    let mut cfg = synthetic_run(Mode::SsaHybrid, 0);
    cfg.epochs = 2;
    cfg.encoder.ssa_beta = 1.0;
    let mut check = PoolCheck::default();
    co_train(&cfg, &data.vocab, &data.train, &data.dev, &mut check).unwrap();
    let beta_ok = check.mismatches == 0 && check.forwards == 2 * data.train.len();

    let pass = alpha_ok && beta_ok;
    verdict(
        3,
        pass,
        &format!(
            "alpha=1 ssa_co vs baseline parameters bitwise equal over 2 epochs: {alpha_ok}; beta=1 pooled==cls on {} forwards, {} mismatches",
            check.forwards, check.mismatches
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_synthetic_improvement() {
    let mut means = Vec::new();
    let mut detail = Vec::new();
    let mut slow = false;
    for mode in [Mode::Baseline, Mode::SsaCo, Mode::SsaHybrid] {
        let start = Instant::now();
        let accs: Vec<f64> = (0..5)
            .map(|seed| run(&synthetic_run(mode, seed), &mut ()).unwrap().test.unwrap().accuracy)
            .collect();
        let secs = start.elapsed().as_secs_f64();
        slow |= secs >= 300.0;
        let mean = 100.0 * accs.iter().sum::<f64>() / 5.0;
        detail.push(format!("{mode} {mean:.2} ({secs:.0}s)"));
        means.push(mean);
    }
    let (hybrid_gap, co_gap) = (means[2] - means[0], means[1] - means[0]);
    let pass = hybrid_gap >= 2.0 && co_gap >= 0.5 && !slow;
    verdict(
        4,
        pass,
        &format!(
            "mean test acc {}; ssa_hybrid gap {hybrid_gap:+.2} (need >=2.0), ssa_co gap {co_gap:+.2} (need >=0.5)",
            detail.join(", ")
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_5_importance_alignment() {
    let result = run(&synthetic_run(Mode::SsaHybrid, 0), &mut ()).unwrap();
    let spec = result.data.synth.clone().unwrap();
    let test = &result.data.test[..100];
    let a = importance_alignment(&result.outcome.best_checkpoint.model, &result.data.vocab, test, |t| {
        spec.is_distractor(t)
    })
    .unwrap();
    let pass = a.n_sentences == 100 && a.top1 >= 0.8 && a.auc >= 0.8;
    verdict(
        5,
        pass,
        &format!("keyword ranked first in {:.1}% of {} sentences (need >=80%), AUC {:.3} (need >=0.8)", 100.0 * a.top1, a.n_sentences, a.auc),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_6_sweep_shape() {
    let start = Instant::now();
    let gammas = [0.2, 0.6, 1.0, 1.4, 2.0];
    let rows = run_sweep(&RunConfig::default(), &gammas, &[Mode::MaskAugment, Mode::SsaHybrid], &[0, 1, 2], false).unwrap();
    let means = sweep_means(&rows);
    let curve = |mode: Mode| &means.iter().find(|(m, _)| *m == mode).unwrap().1;
    let at = |pts: &[(f64, f64)], g: f64| 100.0 * pts.iter().find(|p| p.0 == g).unwrap().1;
    let hybrid = curve(Mode::SsaHybrid);
    let masked = curve(Mode::MaskAugment);
    let (h_lo, h_hi) = (at(hybrid, 0.2), at(hybrid, 2.0));
    let m_best = 100.0 * masked.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let m_hi = at(masked, 2.0);
    let secs = start.elapsed().as_secs_f64();
    let pass = rows.len() == 30 && h_hi >= h_lo - 0.5 && m_hi < m_best && secs < 1800.0;
    let fmt = |pts: &[(f64, f64)]| pts.iter().map(|p| format!("{}:{:.2}", p.0, 100.0 * p.1)).collect::<Vec<_>>().join(" ");
    verdict(
        6,
        pass,
        &format!(
            "ssa_hybrid [{}] gamma2 {h_hi:.2} vs gamma0.2 {h_lo:.2}-0.5; mask_augment [{}] gamma2 {m_hi:.2} < best {m_best:.2}; {secs:.0}s",
            fmt(hybrid),
            fmt(masked)
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 7

/// Matthews correlation as the Pearson correlation of one-hot label
/// matrices, macro-F1 from per-class precision and recall.
fn reference_metrics(preds: &[usize], gold: &[usize]) -> (f64, f64, f64) {
    let n = preds.len() as f64;
    let k = preds.iter().chain(gold).max().unwrap() + 1;
    let onehot = |v: &[usize]| -> Vec<Vec<f64>> { v.iter().map(|&c| (0..k).map(|j| f64::from(u8::from(j == c))).collect()).collect() };
    let (x, y) = (onehot(preds), onehot(gold));
    let mean = |m: &[Vec<f64>], j: usize| m.iter().map(|r| r[j]).sum::<f64>() / n;
    let cov = |a: &[Vec<f64>], b: &[Vec<f64>]| -> f64 {
        (0..k)
            .map(|j| {
                let (ma, mb) = (mean(a, j), mean(b, j));
                a.iter().zip(b).map(|(ra, rb)| (ra[j] - ma) * (rb[j] - mb)).sum::<f64>()
            })
            .sum()
    };
    let denom = (cov(&x, &x) * cov(&y, &y)).sqrt();
    let mcc = if denom == 0.0 { 0.0 } else { cov(&x, &y) / denom };
    let acc = preds.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / n;
    let mut f1s = Vec::new();
    for c in 0..k {
        let tp = preds.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let pc = preds.iter().filter(|&&p| p == c).count() as f64;
        let gc = gold.iter().filter(|&&g| g == c).count() as f64;
        if pc == 0.0 && gc == 0.0 {
            continue;
        }
        let (prec, rec) = (if pc > 0.0 { tp / pc } else { 0.0 }, if gc > 0.0 { tp / gc } else { 0.0 });
        f1s.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
    }
    (acc, mcc, f1s.iter().sum::<f64>() / f1s.len() as f64)
}

fn from_confusion(m: &[&[usize]]) -> (Vec<usize>, Vec<usize>) {
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for (t, row) in m.iter().enumerate() {
        for (c, &count) in row.iter().enumerate() {
            p.extend(std::iter::repeat_n(c, count));
            g.extend(std::iter::repeat_n(t, count));
        }
    }
    (p, g)
}

#[test]
fn criterion_7_metric_correctness() {
    let mut cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
        from_confusion(&[&[5, 5], &[5, 5]]), // balanced errors
        from_confusion(&[&[7, 0], &[0, 3]]),
        from_confusion(&[&[0, 4], &[6, 0]]),
        from_confusion(&[&[3, 1, 0], &[2, 4, 1], &[0, 2, 5]]),
        from_confusion(&[&[4, 0, 1], &[0, 0, 0], &[2, 0, 3]]), // class 1 absent
        from_confusion(&[&[0, 0], &[0, 6]]),                    // single class
        from_confusion(&[&[1, 2, 3, 4], &[4, 3, 2, 1], &[0, 5, 0, 5], &[2, 2, 2, 2]]),
        from_confusion(&[&[9, 1], &[0, 0]]),                    // positive class only predicted
    ];
    let mut r = common::rng(2024);
    while cases.len() < 20 {
        let k = r.random_range(2..=4);
        let n = r.random_range(5..=60);
        let gold: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let preds = gold
            .iter()
            .map(|&g| if r.random_bool(0.6) { g } else { r.random_range(0..k) })
            .collect();
        cases.push((preds, gold));
    }
    let mut worst = 0.0f64;
    for (preds, gold) in &cases {
        let m = classification_metrics(preds, gold);
        let (acc, mcc, f1) = reference_metrics(preds, gold);
        worst = worst.max((m.accuracy - acc).abs()).max((m.mcc - mcc).abs()).max((m.macro_f1 - f1).abs());
    }
    let balanced = classification_metrics(&cases[0].0, &cases[0].1).mcc;
    let pass = worst <= 1e-9 && balanced == 0.0;
    verdict(7, pass, &format!("20 cases, worst deviation {worst:.1e} (<=1e-9); balanced-errors MCC = {balanced}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

fn artefacts(cfg: &RunConfig) -> (Vec<u8>, String, Vec<String>) {
    let data = prepare_data(cfg).unwrap();
    let out = co_train(cfg, &data.vocab, &data.train, &data.dev, &mut ()).unwrap();
    let dumps = out.labels.iter().map(|l| format_dump(&l.examples)).collect();
    (out.final_checkpoint.to_bytes(), epochs_csv(&out.reports), dumps)
}

#[test]
fn criterion_8_determinism() {
    let mut cfg = synthetic_run(Mode::SsaHybrid, 3);
    cfg.epochs = 3;
    let serial = [artefacts(&cfg), artefacts(&cfg)];
    cfg.parallel_probe = true;
    let parallel = [artefacts(&cfg), artefacts(&cfg)];
    let dumps_nonempty = serial[0].2[1..].iter().all(|d| !d.is_empty());
    let pass = serial[0] == serial[1] && parallel[0] == parallel[1] && serial[0] == parallel[0] && dumps_nonempty;
    verdict(
        8,
        pass,
        &format!(
            "checkpoint ({} bytes), epochs.csv and {} label dumps identical across serial x2 and parallel x2 runs: {pass}",
            serial[0].0.len(),
            serial[0].2.len()
        ),
    );
    assert!(pass);
}
