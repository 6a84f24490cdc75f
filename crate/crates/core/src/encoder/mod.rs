//! Post-LN transformer encoder with a sentence classifier, a per-token SSA
//! head and the hybrid importance-weighted pooling layer.

mod checkpoint;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::corpus::{Example, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const LN_EPS: f32 = 1e-5;
const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub n_classes: usize,
    pub dropout_rate: f32,
    /// Weight of `R_[CLS]` in the hybrid pooled representation.
    pub ssa_beta: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 1005,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            max_len: 32,
            n_classes: 2,
            dropout_rate: 0.1,
            ssa_beta: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("n_classes", self.n_classes),
        ];
        if let Some((key, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(*key, "must be at least 1"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config("n_heads", "must divide d_model"));
        }
        if !(0.0..=1.0).contains(&self.ssa_beta) {
            return Err(Error::config("beta", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Ordered `(key, value)` pairs; the checkpoint header stores these.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("vocab_size", self.vocab_size.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("max_len", self.max_len.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("ssa_beta", self.ssa_beta.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing config key `{key}`")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        };
        let float = |key: &str| -> Result<f32> {
            get(key)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad value for `{key}`")))
        };
        let cfg = EncoderConfig {
            vocab_size: int("vocab_size")?,
            d_model: int("d_model")?,
            n_layers: int("n_layers")?,
            n_heads: int("n_heads")?,
            d_ff: int("d_ff")?,
            max_len: int("max_len")?,
            n_classes: int("n_classes")?,
            dropout_rate: float("dropout_rate")?,
            ssa_beta: float("ssa_beta")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut specs = vec![
            ("embed.token".to_string(), vec![self.vocab_size, d]),
            ("embed.position".to_string(), vec![self.max_len, d]),
            ("embed.segment".to_string(), vec![2, d]),
            ("embed.ln.gain".to_string(), vec![d]),
            ("embed.ln.bias".to_string(), vec![d]),
        ];
        for l in 0..self.n_layers {
            for (name, shape) in [
                ("attn.q.weight", vec![d, d]),
                ("attn.q.bias", vec![d]),
                ("attn.k.weight", vec![d, d]),
                ("attn.k.bias", vec![d]),
                ("attn.v.weight", vec![d, d]),
                ("attn.v.bias", vec![d]),
                ("attn.out.weight", vec![d, d]),
                ("attn.out.bias", vec![d]),
                ("ln1.gain", vec![d]),
                ("ln1.bias", vec![d]),
                ("ffn.in.weight", vec![d, f]),
                ("ffn.in.bias", vec![f]),
                ("ffn.out.weight", vec![f, d]),
                ("ffn.out.bias", vec![d]),
                ("ln2.gain", vec![d]),
                ("ln2.bias", vec![d]),
            ] {
                specs.push((format!("layer{l}.{name}"), shape));
            }
        }
        specs.push(("classifier.weight".to_string(), vec![d, self.n_classes]));
        specs.push(("classifier.bias".to_string(), vec![self.n_classes]));
        specs.push(("ssa_head.weight".to_string(), vec![d, 2]));
        specs.push(("ssa_head.bias".to_string(), vec![2]));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// How the sentence representation fed to the classifier is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// `R_[CLS]` alone.
    Cls,
    /// `β·R_[CLS] + (1−β)·Σ softmax(importance)ᵢ·Rᵢ`.
    Hybrid,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Cls => "cls",
            Pooling::Hybrid => "hybrid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cls" => Some(Pooling::Cls),
            "hybrid" => Some(Pooling::Hybrid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// Every trainable tensor of the model, in [`EncoderConfig::param_specs`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    config: EncoderConfig,
    params: Vec<Param>,
}

// Offsets into the parameter list.
const EMB_TOKEN: usize = 0;
const EMB_POS: usize = 1;
const EMB_SEG: usize = 2;
const EMB_LN_G: usize = 3;
const EMB_LN_B: usize = 4;
const PER_LAYER: usize = 16;

impl EncoderModel {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit LN gains.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let params = config
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let numel = shape.iter().product();
                let data = if name.ends_with(".gain") {
                    vec![1.0; numel]
                } else if name.ends_with(".bias") {
                    vec![0.0; numel]
                } else {
                    (0..numel).map(|_| normal.sample(&mut rng)).collect()
                };
                Param {
                    name,
                    value: Arc::new(Tensor::new(shape, data).expect("spec shape matches data")),
                }
            })
            .collect();
        Ok(EncoderModel { config, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_params(config: EncoderConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let specs = config.param_specs();
        if specs.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                specs.len(),
                params.len()
            )));
        }
        let params = specs
            .into_iter()
            .zip(params)
            .map(|((name, shape), (got_name, t))| {
                if name != got_name || shape != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                        t.shape()
                    )));
                }
                Ok(Param {
                    name,
                    value: Arc::new(t),
                })
            })
            .collect::<Result<_>>()?;
        Ok(EncoderModel { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &*p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| Arc::make_mut(&mut p.value))
    }

    /// Mutable access to every parameter tensor, in storage order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params
            .iter_mut()
            .map(|p| Arc::make_mut(&mut p.value))
            .collect()
    }

    pub fn set_beta(&mut self, beta: f32) -> Result<()> {
        let mut cfg = self.config.clone();
        cfg.ssa_beta = beta;
        cfg.validate()?;
        self.config = cfg;
        Ok(())
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| graph.param(p.value.clone())).collect(),
            config: self.config.clone(),
        }
    }

    /// Inference-mode label for one example. Ties go to the lowest class.
    pub fn predict_label(&self, example: &Example, pooling: Pooling) -> Result<usize> {
        Ok(argmax(&self.predict_logits(example, pooling)?))
    }

    /// Inference-mode class logits for one example.
    pub fn predict_logits(&self, example: &Example, pooling: Pooling) -> Result<Vec<f32>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let fwd = bound.forward(&mut graph, &EncoderInput::from_example(example), pooling, None)?;
        Ok(graph.value(fwd.logits).data().to_vec())
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [usize],
    pub segment_ids: &'a [usize],
    /// True at padding positions; those keys are never attended to.
    pub pad_mask: Vec<bool>,
    /// True at `[CLS]`, `[SEP]` and `[PAD]`.
    pub special_mask: Vec<bool>,
}

impl<'a> EncoderInput<'a> {
    pub fn new(token_ids: &'a [usize], segment_ids: &'a [usize], pad_mask: Vec<bool>) -> Self {
        let special_mask = token_ids
            .iter()
            .zip(&pad_mask)
            .map(|(&t, &p)| p || t == PAD || t == CLS || t == SEP)
            .collect();
        EncoderInput {
            token_ids,
            segment_ids,
            pad_mask,
            special_mask,
        }
    }

    pub fn from_example(ex: &'a Example) -> Self {
        let pad_mask = ex.token_ids.iter().map(|&t| t == PAD).collect();
        EncoderInput::new(&ex.token_ids, &ex.segment_ids, pad_mask)
    }
}

/// Result of [`Bound::encode`]; all fields are graph handles.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `R_[CLS]`, shape `[d_model]`.
    pub cls_repr: Var,
    /// `R_i` for every position, shape `[n, d_model]`.
    pub token_reprs: Var,
    /// Softmax attention weights, `[layer][head]`, each `[n, n]`.
    pub attention_maps: Vec<Vec<Var>>,
}

/// Everything a classification forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub encoded: EncoderOutput,
    /// `[n, 2]` SSA logits; present whenever the SSA head ran.
    pub ssa_logits: Option<Var>,
    /// `[1, n]` pooling weights for hybrid pooling.
    pub pool_weights: Option<Var>,
    pub pooled: Var,
    /// `[n_classes]`
    pub logits: Var,
}

/// A model's parameters registered on one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
    config: EncoderConfig,
}

impl Bound {
    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    fn layer(&self, l: usize, k: usize) -> Var {
        self.vars[5 + l * PER_LAYER + k]
    }

    fn tail(&self, k: usize) -> Var {
        self.vars[5 + self.config.n_layers * PER_LAYER + k]
    }

    /// Runs the encoder. Dropout is active only when `train_rng` is given.
    pub fn encode(
        &self,
        g: &mut Graph,
        input: &EncoderInput,
        mut train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let n = input.token_ids.len();
        if n == 0 {
            return Err(Error::contract("empty input sequence"));
        }
        if n > cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max_len: cfg.max_len,
            });
        }
        if input.segment_ids.len() != n || input.pad_mask.len() != n {
            return Err(Error::contract(format!(
                "token/segment/pad lengths differ: {n}, {}, {}",
                input.segment_ids.len(),
                input.pad_mask.len()
            )));
        }
        let rate = if train_rng.is_some() { cfg.dropout_rate } else { 0.0 };
        let positions: Vec<usize> = (0..n).collect();

        let tok = g.embedding(self.vars[EMB_TOKEN], input.token_ids)?;
        let pos = g.embedding(self.vars[EMB_POS], &positions)?;
        let seg = g.embedding(self.vars[EMB_SEG], input.segment_ids)?;
        let x = g.add(tok, pos)?;
        let x = g.add(x, seg)?;
        let x = g.layer_norm(x, self.vars[EMB_LN_G], self.vars[EMB_LN_B], LN_EPS)?;
        let mut x = maybe_dropout(g, x, rate, &mut train_rng);

        // key mask shared by every query row
        let key_mask: Vec<bool> = (0..n * n).map(|i| input.pad_mask[i % n]).collect();
        let scale = 1.0 / (cfg.head_dim() as f32).sqrt();
        let mut attention_maps = Vec::with_capacity(cfg.n_layers);

        for l in 0..cfg.n_layers {
            let p = |k| self.layer(l, k);
            let q = linear(g, x, p(0), p(1))?;
            let k = linear(g, x, p(2), p(3))?;
            let v = linear(g, x, p(4), p(5))?;
            let dh = cfg.head_dim();
            let mut heads = Vec::with_capacity(cfg.n_heads);
            let mut maps = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_cols(k, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.masked_fill(scores, &key_mask)?;
                let probs = g.softmax(scores, 1)?;
                maps.push(probs);
                let probs = maybe_dropout(g, probs, rate, &mut train_rng);
                heads.push(g.matmul(probs, vh)?);
            }
            attention_maps.push(maps);
            let ctx = if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            };
            let attn = linear(g, ctx, p(6), p(7))?;
            let attn = maybe_dropout(g, attn, rate, &mut train_rng);
            let h1 = g.add(x, attn)?;
            let h1 = g.layer_norm(h1, p(8), p(9), LN_EPS)?;
            let ff = linear(g, h1, p(10), p(11))?;
            let ff = g.gelu(ff);
            let ff = linear(g, ff, p(12), p(13))?;
            let ff = maybe_dropout(g, ff, rate, &mut train_rng);
            let h2 = g.add(h1, ff)?;
            x = g.layer_norm(h2, p(14), p(15), LN_EPS)?;
        }

        let cls = g.select_rows(x, &[0])?;
        let cls = g.reshape(cls, vec![cfg.d_model])?;
        Ok(EncoderOutput {
            cls_repr: cls,
            token_reprs: x,
            attention_maps,
        })
    }

    /// Per-token two-class SSA logits, `[n, 2]`.
    pub fn ssa_logits(&self, g: &mut Graph, token_reprs: Var) -> Result<Var> {
        linear(g, token_reprs, self.tail(2), self.tail(3))
    }

    /// Per-token softmax over the SSA logits; column 1 is the probability
    /// that the token is important.
    pub fn ssa_scores(&self, g: &mut Graph, token_reprs: Var) -> Result<Var> {
        let logits = self.ssa_logits(g, token_reprs)?;
        g.softmax(logits, 1)
    }

    /// `β·R_[CLS] + (1−β)·Σ wᵢ·Rᵢ` with `w = softmax(importance)` over the
    /// non-special positions. Returns the pooled vector and, unless every
    /// position is special, the `[1, n]` weights.
    pub fn hybrid_pool(
        &self,
        g: &mut Graph,
        cls_repr: Var,
        token_reprs: Var,
        importance: Var,
        special_mask: &[bool],
    ) -> Result<(Var, Option<Var>)> {
        let n = special_mask.len();
        if g.value(importance).numel() != n || g.shape(token_reprs).first() != Some(&n) {
            return Err(Error::Shape {
                op: "hybrid_pool",
                lhs: g.shape(token_reprs).to_vec(),
                rhs: g.shape(importance).to_vec(),
            });
        }
        if special_mask.iter().all(|&s| s) {
            return Ok((cls_repr, None));
        }
        let beta = self.config.ssa_beta;
        let row = g.reshape(importance, vec![1, n])?;
        let row = g.masked_fill(row, special_mask)?;
        let weights = g.softmax(row, 1)?;
        let pooled = g.matmul(weights, token_reprs)?;
        let pooled = g.reshape(pooled, vec![self.config.d_model])?;
        let a = g.scale(cls_repr, beta);
        let b = g.scale(pooled, 1.0 - beta);
        Ok((g.add(a, b)?, Some(weights)))
    }

    /// Class logits `[n_classes]` from a pooled `[d_model]` vector.
    pub fn classify(&self, g: &mut Graph, pooled: Var) -> Result<Var> {
        let d = self.config.d_model;
        let row = g.reshape(pooled, vec![1, d])?;
        let logits = linear(g, row, self.tail(0), self.tail(1))?;
        g.reshape(logits, vec![self.config.n_classes])
    }

    /// Encoder, SSA head (when `with_ssa` or hybrid pooling needs it),
    /// pooling and classifier in one call.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        input: &EncoderInput,
        pooling: Pooling,
        with_ssa: bool,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        let encoded = self.encode(g, input, train_rng)?;
        let ssa_logits = if with_ssa || pooling == Pooling::Hybrid {
            Some(self.ssa_logits(g, encoded.token_reprs)?)
        } else {
            None
        };
        let (pooled, pool_weights) = match pooling {
            Pooling::Cls => (encoded.cls_repr, None),
            Pooling::Hybrid => {
                let logits = ssa_logits.expect("computed above for hybrid pooling");
                let importance = g.slice_cols(logits, 1, 1)?;
                self.hybrid_pool(
                    g,
                    encoded.cls_repr,
                    encoded.token_reprs,
                    importance,
                    &input.special_mask,
                )?
            }
        };
        let logits = self.classify(g, pooled)?;
        Ok(Forward {
            encoded,
            ssa_logits,
            pool_weights,
            pooled,
            logits,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: &EncoderInput,
        pooling: Pooling,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Forward> {
        self.forward_full(g, input, pooling, false, train_rng)
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn maybe_dropout(g: &mut Graph, x: Var, rate: f32, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, *r),
        _ => x,
    }
}
