//! Independent f64 reference implementations and a finite-difference harness.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssa_core::corpus::{Example, Target, CLS, PAD, SEP};
use ssa_core::encoder::{EncoderConfig, EncoderModel};
use ssa_core::tensor::{Graph, Tensor, Var};
use ssa_core::Result;

pub const FD_EPS: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
/// from dividing by zero.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()
}

// ---------------------------------------------------------------- f64 ops

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for c in 0..cols {
            out[r * cols + c] = (row[c] - max).exp() / total;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let d = gain.len();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out[r * d + j] = (row[j] - mean) * rs * gain[j] + bias[j];
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// Mean cross-entropy over rows whose label is `Some`.
pub fn cross_entropy(logits: &[f64], labels: &[Option<usize>], classes: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for (r, l) in labels.iter().enumerate() {
        let Some(l) = l else { continue };
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[*l];
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn add_bias(x: &mut [f64], b: &[f64]) {
    let d = b.len();
    for (i, v) in x.iter_mut().enumerate() {
        *v += b[i % d];
    }
}

// ----------------------------------------------------------- f64 encoder

/// Named parameters as f64, in storage order.
#[derive(Clone)]
pub struct Params64 {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl Params64 {
    pub fn from_model(model: &EncoderModel) -> Self {
        let ps = model.params();
        Params64 {
            names: ps.iter().map(|p| p.name.clone()).collect(),
            shapes: ps.iter().map(|p| p.value.shape().to_vec()).collect(),
            values: ps
                .iter()
                .map(|p| p.value.data().iter().map(|&v| f64::from(v)).collect())
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("{name}"));
        &self.values[i]
    }
}

pub struct Forward64 {
    pub token_reprs: Vec<f64>,
    pub ssa_logits: Vec<f64>,
    pub pool_weights: Option<Vec<f64>>,
    pub logits: Vec<f64>,
}

/// Inference forward pass written from the architecture description alone.
pub fn encoder_forward(cfg: &EncoderConfig, p: &Params64, ex: &Example, hybrid: bool) -> Forward64 {
    let (d, n, f) = (cfg.d_model, ex.len(), cfg.d_ff);
    let eps = 1e-5;
    let pad: Vec<bool> = ex.token_ids.iter().map(|&t| t == PAD).collect();
    let special: Vec<bool> = ex
        .token_ids
        .iter()
        .map(|&t| t == PAD || t == CLS || t == SEP)
        .collect();

    let (tok, pos, seg) = (p.get("embed.token"), p.get("embed.position"), p.get("embed.segment"));
    let mut x = vec![0.0; n * d];
    for i in 0..n {
        for j in 0..d {
            x[i * d + j] = tok[ex.token_ids[i] * d + j] + pos[i * d + j] + seg[ex.segment_ids[i] * d + j];
        }
    }
    x = layer_norm(&x, p.get("embed.ln.gain"), p.get("embed.ln.bias"), eps);

    let dh = d / cfg.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..cfg.n_layers {
        let w = |name: &str| p.get(&format!("layer{l}.{name}"));
        let proj = |x: &[f64], which: &str| {
            let mut y = matmul(x, w(&format!("{which}.weight")), n, d, d);
            add_bias(&mut y, w(&format!("{which}.bias")));
            y
        };
        let (q, k, v) = (proj(&x, "attn.q"), proj(&x, "attn.k"), proj(&x, "attn.v"));
        let mut ctx = vec![0.0; n * d];
        for h in 0..cfg.n_heads {
            let mut scores = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    scores[i * n + j] = if pad[j] {
                        -1e9
                    } else {
                        (0..dh).map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c]).sum::<f64>() * scale
                    };
                }
            }
            let probs = softmax_rows(&scores, n, n);
            for i in 0..n {
                for c in 0..dh {
                    ctx[i * d + h * dh + c] = (0..n).map(|j| probs[i * n + j] * v[j * d + h * dh + c]).sum();
                }
            }
        }
        let attn = proj(&ctx, "attn.out");
        let h1: Vec<f64> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
        let h1 = layer_norm(&h1, w("ln1.gain"), w("ln1.bias"), eps);
        let mut ff = matmul(&h1, w("ffn.in.weight"), n, d, f);
        add_bias(&mut ff, w("ffn.in.bias"));
        let ff: Vec<f64> = ff.into_iter().map(gelu).collect();
        let mut ff = matmul(&ff, w("ffn.out.weight"), n, f, d);
        add_bias(&mut ff, w("ffn.out.bias"));
        let h2: Vec<f64> = h1.iter().zip(&ff).map(|(a, b)| a + b).collect();
        x = layer_norm(&h2, w("ln2.gain"), w("ln2.bias"), eps);
    }

    let mut ssa = matmul(&x, p.get("ssa_head.weight"), n, d, 2);
    add_bias(&mut ssa, p.get("ssa_head.bias"));
    let cls = x[..d].to_vec();
    let (pooled, pool_weights) = if hybrid && special.iter().any(|&s| !s) {
        let z: Vec<f64> = (0..n).map(|i| if special[i] { -1e9 } else { ssa[i * 2 + 1] }).collect();
        let w = softmax_rows(&z, 1, n);
        let beta = f64::from(cfg.ssa_beta);
        let pooled = (0..d)
            .map(|j| beta * cls[j] + (1.0 - beta) * (0..n).map(|i| w[i] * x[i * d + j]).sum::<f64>())
            .collect();
        (pooled, Some(w))
    } else {
        (cls, None)
    };
    let mut logits = matmul(&pooled, p.get("classifier.weight"), 1, d, cfg.n_classes);
    add_bias(&mut logits, p.get("classifier.bias"));
    Forward64 {
        token_reprs: x,
        ssa_logits: ssa,
        pool_weights,
        logits,
    }
}

// --------------------------------------------------------------- fixtures

pub fn small_config(vocab_size: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        max_len: 12,
        n_classes: 2,
        dropout_rate: 0.0,
        ssa_beta: 0.4,
    }
}

/// Model with larger-than-default weights so gradients are not vanishingly small.
pub fn perturbed_model(cfg: EncoderConfig, seed: u64) -> EncoderModel {
    let mut model = EncoderModel::new(cfg, seed).unwrap();
    let mut r = rng(seed + 1000);
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3f32..0.3);
        }
    }
    model
}

pub fn example(id: usize, words: &[usize], label: usize) -> Example {
    let mut token_ids = vec![CLS];
    token_ids.extend_from_slice(words);
    token_ids.push(SEP);
    Example {
        id,
        segment_ids: vec![0; token_ids.len()],
        token_ids,
        target: Target::Class(label),
        gold_keyword_positions: None,
    }
}

pub fn pair_example(id: usize, a: &[usize], b: &[usize], label: usize) -> Example {
    let mut token_ids = vec![CLS];
    token_ids.extend_from_slice(a);
    token_ids.push(SEP);
    let split = token_ids.len();
    token_ids.extend_from_slice(b);
    token_ids.push(SEP);
    let segment_ids = (0..token_ids.len()).map(|i| usize::from(i >= split)).collect();
    Example {
        id,
        token_ids,
        segment_ids,
        target: Target::Class(label),
        gold_keyword_positions: None,
    }
}

// --------------------------------------------------- gradient harness

/// One differentiable primitive under test. `build` applies the op on the
/// tape; `oracle` recomputes the same output in f64.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    /// Inputs at these indices are constants (not checked).
    pub constant: Vec<usize>,
    pub build: Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    pub oracle: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
}

/// Largest relative error between the tape's f32 gradient of
/// `Σ w ⊙ op(x)` and a central difference of the f64 oracle.
pub fn check_op(case: &OpCase, seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if case.constant.contains(&i) {
                g.constant(t.clone())
            } else {
                g.param(Arc::new(t.clone()))
            }
        })
        .collect();
    let out = (case.build)(&mut g, &vars).unwrap();
    let out_shape = g.shape(out).to_vec();
    let mut r = rng(seed);
    let w: Vec<f64> = random_vec(&mut r, g.value(out).numel(), 1.0);
    let w32 = Tensor::new(out_shape, w.iter().map(|&v| v as f32).collect()).unwrap();
    let wv = g.constant(w32);
    let weighted = g.mul(out, wv).unwrap();
    let loss = g.sum(weighted);
    g.backward(loss).unwrap();

    let x64: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();
    let w64: Vec<f64> = w.iter().map(|&v| f64::from(v as f32)).collect();
    let objective = |xs: &[Vec<f64>]| -> f64 {
        let y = (case.oracle)(xs);
        assert_eq!(y.len(), w64.len(), "{}: oracle output size", case.name);
        y.iter().zip(&w64).map(|(a, b)| a * b).sum()
    };
    let mut worst = 0.0f64;
    for (i, var) in vars.iter().enumerate() {
        if case.constant.contains(&i) {
            continue;
        }
        let grad = g.grad(*var).expect("parameter has a gradient");
        for j in 0..x64[i].len() {
            let mut xs = x64.clone();
            xs[i][j] += FD_EPS;
            let up = objective(&xs);
            xs[i][j] -= 2.0 * FD_EPS;
            let down = objective(&xs);
            let numeric = (up - down) / (2.0 * FD_EPS);
            let e = rel_err(f64::from(grad[j]), numeric, 1e-3);
            assert!(e.is_finite(), "{}: non-finite error", case.name);
            worst = worst.max(e);
        }
    }
    worst
}

fn t(shape: Vec<usize>, r: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(r, n, scale).into_iter().map(|v| v as f32).collect()).unwrap()
}

/// Every differentiable primitive of the tape, each with its f64 oracle.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = rng(7);
    let mut cases = Vec::new();

    cases.push(OpCase {
        name: "matmul",
        inputs: vec![t(vec![3, 4], &mut r, 1.0), t(vec![4, 2], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.matmul(v[0], v[1])),
        oracle: Box::new(|x| matmul(&x[0], &x[1], 3, 4, 2)),
    });
    cases.push(OpCase {
        name: "add",
        inputs: vec![t(vec![2, 3], &mut r, 1.0), t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.add(v[0], v[1])),
        oracle: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a + b).collect()),
    });
    cases.push(OpCase {
        name: "add_bias",
        inputs: vec![t(vec![3, 4], &mut r, 1.0), t(vec![4], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.add_bias(v[0], v[1])),
        oracle: Box::new(|x| {
            let mut y = x[0].clone();
            add_bias(&mut y, &x[1]);
            y
        }),
    });
    cases.push(OpCase {
        name: "mul",
        inputs: vec![t(vec![2, 3], &mut r, 1.0), t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.mul(v[0], v[1])),
        oracle: Box::new(|x| x[0].iter().zip(&x[1]).map(|(a, b)| a * b).collect()),
    });
    cases.push(OpCase {
        name: "scale",
        inputs: vec![t(vec![5], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| Ok(g.scale(v[0], -0.75))),
        oracle: Box::new(|x| x[0].iter().map(|a| a * f64::from(-0.75f32)).collect()),
    });
    cases.push(OpCase {
        name: "gelu",
        inputs: vec![t(vec![2, 5], &mut r, 3.0)],
        constant: vec![],
        build: Box::new(|g, v| Ok(g.gelu(v[0]))),
        oracle: Box::new(|x| x[0].iter().map(|&a| gelu(a)).collect()),
    });
    cases.push(OpCase {
        name: "softmax_rows",
        inputs: vec![t(vec![3, 4], &mut r, 2.0)],
        constant: vec![],
        build: Box::new(|g, v| g.softmax(v[0], 1)),
        oracle: Box::new(|x| softmax_rows(&x[0], 3, 4)),
    });
    cases.push(OpCase {
        name: "softmax_cols",
        inputs: vec![t(vec![3, 4], &mut r, 2.0)],
        constant: vec![],
        build: Box::new(|g, v| g.softmax(v[0], 0)),
        oracle: Box::new(|x| {
            let tr = transpose(&x[0], 3, 4);
            transpose(&softmax_rows(&tr, 4, 3), 4, 3)
        }),
    });
    cases.push(OpCase {
        name: "layer_norm",
        inputs: vec![t(vec![3, 5], &mut r, 2.0), t(vec![5], &mut r, 1.0), t(vec![5], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        oracle: Box::new(|x| layer_norm(&x[0], &x[1], &x[2], f64::from(1e-5f32))),
    });
    cases.push(OpCase {
        name: "cross_entropy",
        inputs: vec![t(vec![4, 3], &mut r, 2.0)],
        constant: vec![],
        build: Box::new(|g, v| g.cross_entropy(v[0], &[2, usize::MAX, 0, 1], usize::MAX)),
        oracle: Box::new(|x| vec![cross_entropy(&x[0], &[Some(2), None, Some(0), Some(1)], 3)]),
    });
    cases.push(OpCase {
        name: "mse",
        inputs: vec![t(vec![2, 3], &mut r, 1.0), t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.mse(v[0], v[1])),
        oracle: Box::new(|x| {
            vec![x[0].iter().zip(&x[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 6.0]
        }),
    });
    cases.push(OpCase {
        name: "embedding",
        inputs: vec![t(vec![5, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.embedding(v[0], &[4, 1, 4, 0])),
        oracle: Box::new(|x| [4, 1, 4, 0].iter().flat_map(|&i| x[0][i * 3..i * 3 + 3].to_vec()).collect()),
    });
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![t(vec![2, 6], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.reshape(v[0], vec![3, 4])),
        oracle: Box::new(|x| x[0].clone()),
    });
    cases.push(OpCase {
        name: "transpose",
        inputs: vec![t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.transpose(v[0])),
        oracle: Box::new(|x| transpose(&x[0], 2, 3)),
    });
    // Composed with softmax, as in attention: filled entries get ~0 weight.
    let mask = vec![false, true, false, false, false, true];
    let mask_oracle = mask.clone();
    cases.push(OpCase {
        name: "masked_fill",
        inputs: vec![t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(move |g, v| {
            let m = g.masked_fill(v[0], &mask)?;
            g.softmax(m, 1)
        }),
        oracle: Box::new(move |x| {
            let filled: Vec<f64> = x[0]
                .iter()
                .zip(&mask_oracle)
                .map(|(&a, &m)| if m { -1e9 } else { a })
                .collect();
            softmax_rows(&filled, 2, 3)
        }),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| Ok(g.sum(v[0]))),
        oracle: Box::new(|x| vec![x[0].iter().sum()]),
    });
    cases.push(OpCase {
        name: "mean",
        inputs: vec![t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| Ok(g.mean(v[0]))),
        oracle: Box::new(|x| vec![x[0].iter().sum::<f64>() / 6.0]),
    });
    cases.push(OpCase {
        name: "slice_cols",
        inputs: vec![t(vec![3, 5], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.slice_cols(v[0], 1, 3)),
        oracle: Box::new(|x| (0..3).flat_map(|i| x[0][i * 5 + 1..i * 5 + 4].to_vec()).collect()),
    });
    cases.push(OpCase {
        name: "concat_cols",
        inputs: vec![t(vec![2, 2], &mut r, 1.0), t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
        oracle: Box::new(|x| {
            (0..2)
                .flat_map(|i| {
                    let mut row = x[0][i * 2..i * 2 + 2].to_vec();
                    row.extend_from_slice(&x[1][i * 3..i * 3 + 3]);
                    row
                })
                .collect()
        }),
    });
    cases.push(OpCase {
        name: "concat_rows",
        inputs: vec![t(vec![1, 3], &mut r, 1.0), t(vec![2, 3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
        oracle: Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
    });
    cases.push(OpCase {
        name: "stack",
        inputs: vec![t(vec![3], &mut r, 1.0), t(vec![3], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.stack(&[v[0], v[1]])),
        oracle: Box::new(|x| x[0].iter().chain(&x[1]).copied().collect()),
    });
    cases.push(OpCase {
        name: "select_rows",
        inputs: vec![t(vec![4, 2], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| g.select_rows(v[0], &[3, 0, 3])),
        oracle: Box::new(|x| [3, 0, 3].iter().flat_map(|&i| x[0][i * 2..i * 2 + 2].to_vec()).collect()),
    });
    // The mask is recovered by pushing ones through the same seeded stream.
    let probe_mask: Vec<f64> = {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::full(vec![2, 4], 1.0));
        let d = g.dropout(ones, 0.5, &mut rng(3));
        g.value(d).data().iter().map(|&v| f64::from(v)).collect()
    };
    cases.push(OpCase {
        name: "dropout",
        inputs: vec![t(vec![2, 4], &mut r, 1.0)],
        constant: vec![],
        build: Box::new(|g, v| Ok(g.dropout(v[0], 0.5, &mut rng(3)))),
        oracle: Box::new(move |x| x[0].iter().zip(&probe_mask).map(|(a, m)| a * m).collect()),
    });
    cases
}

// ------------------------------------------------ end-to-end check

pub struct EndToEnd {
    pub group: String,
    pub checked: usize,
    pub worst: f64,
}

/// Gradient of the mixed training loss of a 2-layer, d_model=16 hybrid
/// model against central differences of the f64 oracle, at up to
/// `per_group` sampled coordinates of every parameter tensor.
pub fn end_to_end_check(per_group: usize, seed: u64) -> Vec<EndToEnd> {
    use ssa_core::encoder::{EncoderInput, Pooling};
    use ssa_core::ssa_data::TokenLabel;
    use ssa_core::training::{loss_ssa, loss_target, loss_total};

    let vocab = 14;
    let cfg = small_config(vocab);
    let model = perturbed_model(cfg.clone(), seed);
    let mut batch = vec![example(0, &[5, 6, 7, 8], 1), pair_example(1, &[9, 10], &[11, 12, 13], 0)];
    // trailing padding exercises the key mask
    batch[0].token_ids.extend([PAD, PAD]);
    batch[0].segment_ids.extend([0, 0]);
    let ssa_labels: Vec<Vec<(usize, TokenLabel)>> = vec![
        vec![(1, TokenLabel::Important), (3, TokenLabel::Unimportant)],
        vec![(2, TokenLabel::Unimportant), (4, TokenLabel::Important), (5, TokenLabel::Unimportant)],
    ];
    let alpha = 0.7f32;

    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let mut rows = Vec::new();
    let mut parts = Vec::new();
    let mut flat = Vec::new();
    for (ex, labels) in batch.iter().zip(&ssa_labels) {
        let fwd = bound
            .forward_full(&mut g, &EncoderInput::from_example(ex), Pooling::Hybrid, true, None)
            .unwrap();
        rows.push(g.reshape(fwd.logits, vec![1, 2]).unwrap());
        let positions: Vec<usize> = labels.iter().map(|l| l.0).collect();
        parts.push(g.select_rows(fwd.ssa_logits.unwrap(), &positions).unwrap());
        flat.extend(labels.iter().map(|l| l.1));
    }
    let logits = g.concat_rows(&rows).unwrap();
    let targets: Vec<Target> = batch.iter().map(|e| e.target).collect();
    let lt = loss_target(&mut g, logits, &targets).unwrap();
    let ssa = g.concat_rows(&parts).unwrap();
    let ls = loss_ssa(&mut g, ssa, &flat).unwrap();
    let total = loss_total(&mut g, lt, ls, alpha).unwrap();
    g.backward(total).unwrap();

    let p64 = Params64::from_model(&model);
    let objective = |p: &Params64| -> f64 {
        let mut class_logits = Vec::new();
        let mut ssa_rows = Vec::new();
        let mut ssa_targets = Vec::new();
        for (ex, labels) in batch.iter().zip(&ssa_labels) {
            let f = encoder_forward(&cfg, p, ex, true);
            class_logits.extend(f.logits);
            for &(pos, l) in labels {
                ssa_rows.extend_from_slice(&f.ssa_logits[pos * 2..pos * 2 + 2]);
                ssa_targets.push(l.class());
            }
        }
        let gold: Vec<Option<usize>> = batch.iter().map(|e| e.target.class()).collect();
        let a = f64::from(alpha);
        a * cross_entropy(&class_logits, &gold, 2) + (1.0 - a) * cross_entropy(&ssa_rows, &ssa_targets, 2)
    };

    let used_ids: Vec<usize> = {
        let mut ids: Vec<usize> = batch.iter().flat_map(|e| e.token_ids.clone()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    };
    let mut r = rng(seed + 7);
    let mut out = Vec::new();
    for (k, var) in bound.vars.iter().enumerate() {
        let name = p64.names[k].clone();
        let grad = g.grad(*var).expect("every parameter is used");
        let d = p64.shapes[k].last().copied().unwrap_or(1);
        let candidates: Vec<usize> = if name == "embed.token" {
            used_ids.iter().flat_map(|&id| id * d..(id + 1) * d).collect()
        } else {
            (0..grad.len()).collect()
        };
        let coords: Vec<usize> = if candidates.len() <= per_group {
            candidates
        } else {
            rand::seq::index::sample(&mut r, candidates.len(), per_group)
                .into_iter()
                .map(|i| candidates[i])
                .collect()
        };
        let mut worst = 0.0f64;
        for &j in &coords {
            let mut p = p64.clone();
            p.values[k][j] += FD_EPS;
            let up = objective(&p);
            p.values[k][j] -= 2.0 * FD_EPS;
            let down = objective(&p);
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(f64::from(grad[j]), numeric, 1e-3));
        }
        out.push(EndToEnd {
            group: name,
            checked: coords.len(),
            worst,
        });
    }
    out
}

// ------------------------------------------------------------ tiny runs

/// Small synthetic corpus and model that train in well under a second.
pub fn tiny_run(mode: ssa_core::training::Mode, seed: u64) -> ssa_core::training::RunConfig {
    use ssa_core::corpus::SynthSpec;
    use ssa_core::training::{DataSource, RunConfig};

    let mut cfg = RunConfig::default();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr = 3e-3;
    cfg.encoder.d_model = 16;
    cfg.encoder.n_layers = 1;
    cfg.encoder.n_heads = 2;
    cfg.encoder.d_ff = 32;
    cfg.encoder.max_len = 16;
    cfg.data = DataSource::Synth(SynthSpec::with_sizes(150, 60, 6, 4, 4, 8, 0.5, 7));
    cfg
}
