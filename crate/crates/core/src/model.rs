//! Encoder–decoder transformer over a [`NamedParams`] map.
//!
//! # Parameter names
//!
//! ```text
//! embedding.table                          [vocab, d]   shared input/output table
//! output.table                             [vocab, d]   only when embeddings are untied
//! encoder.layer.{i}.self_attn.{wq,wk,wv,wo}  [d, d]
//! encoder.layer.{i}.self_attn.{bq,bv,bo}     [d]   no key bias
//! encoder.layer.{i}.ln{1,2}.{gain,bias}      [d]
//! encoder.layer.{i}.ffn.w1  [hidden, d]    encoder.layer.{i}.ffn.b1  [hidden]
//! encoder.layer.{i}.ffn.w2  [d, hidden]    encoder.layer.{i}.ffn.b2  [d]
//! encoder.final_ln.{gain,bias}             [d]          pre-norm only
//! decoder.layer.{i}.self_attn.*, cross_attn.*, ln{1,2,3}.*, ffn.*
//! decoder.final_ln.{gain,bias}             [d]          pre-norm only
//! ```
//!
//! Projections are stored `[out, in]` and applied as `x · Wᵀ + b`. The key
//! projection has no bias: it would shift every score in a softmax row by
//! the same amount, so its gradient is identically zero.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::Tensor;
use crate::vocab::{BOS_ID, EOS_ID, PAD_ID};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub model_dim: usize,
    pub ffn_hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub attention_dropout: f64,
    pub label_smoothing_epsilon: f64,
    pub max_positions: usize,
    #[serde(default = "default_true")]
    pub pre_norm: bool,
    #[serde(default = "default_true")]
    pub tied_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            enc_layers: 4,
            dec_layers: 4,
            model_dim: 64,
            ffn_hidden_dim: 128,
            heads: 4,
            vocab_size: 512,
            attention_dropout: 0.1,
            label_smoothing_epsilon: 0.1,
            max_positions: 64,
            pre_norm: true,
            tied_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("model_dim", self.model_dim),
            ("ffn_hidden_dim", self.ffn_hidden_dim),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        for (name, v) in [
            ("attention_dropout", self.attention_dropout),
            ("label_smoothing_epsilon", self.label_smoothing_epsilon),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} {v} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// Non-fatal convention violations.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.ffn_hidden_dim < self.model_dim {
            w.push(format!(
                "ffn_hidden_dim {} is smaller than model_dim {}",
                self.ffn_hidden_dim, self.model_dim
            ));
        }
        w
    }

    /// Canonical name → shape table for this architecture.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, h, v) = (self.model_dim, self.ffn_hidden_dim, self.vocab_size);
        let mut out = BTreeMap::new();
        out.insert("embedding.table".to_string(), vec![v, d]);
        if !self.tied_embeddings {
            out.insert("output.table".to_string(), vec![v, d]);
        }
        let attn = |out: &mut BTreeMap<String, Vec<usize>>, p: &str| {
            for w in ["wq", "wk", "wv", "wo"] {
                out.insert(format!("{p}.{w}"), vec![d, d]);
            }
            for b in ["bq", "bv", "bo"] {
                out.insert(format!("{p}.{b}"), vec![d]);
            }
        };
        let ln = |out: &mut BTreeMap<String, Vec<usize>>, p: &str| {
            out.insert(format!("{p}.gain"), vec![d]);
            out.insert(format!("{p}.bias"), vec![d]);
        };
        let ffn = |out: &mut BTreeMap<String, Vec<usize>>, p: &str| {
            out.insert(format!("{p}.w1"), vec![h, d]);
            out.insert(format!("{p}.b1"), vec![h]);
            out.insert(format!("{p}.w2"), vec![d, h]);
            out.insert(format!("{p}.b2"), vec![d]);
        };
        for i in 0..self.enc_layers {
            let p = format!("encoder.layer.{i}");
            attn(&mut out, &format!("{p}.self_attn"));
            ln(&mut out, &format!("{p}.ln1"));
            ln(&mut out, &format!("{p}.ln2"));
            ffn(&mut out, &format!("{p}.ffn"));
        }
        for i in 0..self.dec_layers {
            let p = format!("decoder.layer.{i}");
            attn(&mut out, &format!("{p}.self_attn"));
            attn(&mut out, &format!("{p}.cross_attn"));
            ln(&mut out, &format!("{p}.ln1"));
            ln(&mut out, &format!("{p}.ln2"));
            ln(&mut out, &format!("{p}.ln3"));
            ffn(&mut out, &format!("{p}.ffn"));
        }
        if self.pre_norm {
            ln(&mut out, "encoder.final_ln");
            ln(&mut out, "decoder.final_ln");
        }
        out
    }
}

/// Which stack a layer-scoped parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stack {
    Encoder,
    Decoder,
}

impl Stack {
    pub fn prefix(self) -> &'static str {
        match self {
            Stack::Encoder => "encoder",
            Stack::Decoder => "decoder",
        }
    }
}

/// Splits `encoder.layer.3.ffn.w1` into `(Encoder, 3, "ffn.w1")`.
pub fn parse_layer_name(name: &str) -> Option<(Stack, usize, &str)> {
    let (stack, rest) = if let Some(r) = name.strip_prefix("encoder.layer.") {
        (Stack::Encoder, r)
    } else if let Some(r) = name.strip_prefix("decoder.layer.") {
        (Stack::Decoder, r)
    } else {
        return None;
    };
    let (idx, tail) = rest.split_once('.')?;
    Some((stack, idx.parse().ok()?, tail))
}

pub fn layer_name(stack: Stack, layer: usize, tail: &str) -> String {
    format!("{}.layer.{layer}.{tail}", stack.prefix())
}

/// Tensors indexed by vocabulary row.
pub fn vocab_tables(config: &ModelConfig) -> Vec<&'static str> {
    if config.tied_embeddings {
        vec!["embedding.table"]
    } else {
        vec!["embedding.table", "output.table"]
    }
}

/// Parameters keyed by canonical name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NamedParams(BTreeMap<String, Tensor>);

impl NamedParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.0.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    pub fn bitwise_eq(&self, other: &NamedParams) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, a), (nb, b))| na == nb && a.bitwise_eq(b))
    }

    /// Checks names and shapes against the architecture table.
    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.param_shapes();
        for (name, shape) in &shapes {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("parameter", t.shape(), shape));
            }
        }
        if let Some(extra) = self.0.keys().find(|n| !shapes.contains_key(*n)) {
            return Err(Error::invalid(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// All values concatenated in name order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.0.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`NamedParams::flatten`] against this map's layout.
    pub fn unflatten(&self, flat: &[f64]) -> NamedParams {
        let mut off = 0;
        let mut out = BTreeMap::new();
        for (name, t) in &self.0 {
            let n = t.numel();
            let data = flat[off..off + n].to_vec();
            off += n;
            out.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), data).expect("layout matches"),
            );
        }
        NamedParams(out)
    }
}

impl FromIterator<(String, Tensor)> for NamedParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        NamedParams(iter.into_iter().collect())
    }
}

/// Draws a single tensor as `init_model` would for `name`.
pub fn init_tensor(name: &str, shape: &[usize], model_dim: usize, seed: u64) -> Tensor {
    init_tensor_with_stream(name, name, shape, model_dim, seed)
}

/// Like [`init_tensor`], but random draws come from the stream named `label`.
pub fn init_tensor_with_stream(
    name: &str,
    label: &str,
    shape: &[usize],
    model_dim: usize,
    seed: u64,
) -> Tensor {
    let tail = name.rsplit('.').next().unwrap_or(name);
    match tail {
        "gain" => Tensor::ones(shape),
        "bias" | "bq" | "bv" | "bo" | "b1" | "b2" => Tensor::zeros(shape),
        _ => {
            let mut rng = seeding::stream(seed, label);
            Tensor::randn(shape, (model_dim as f64).powf(-0.5), &mut rng)
        }
    }
}

/// Gaussian(0, model_dim^-1/2) projections and embeddings, unit layer-norm
/// gains, zero biases. Each tensor draws from its own named stream.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<NamedParams> {
    config.validate()?;
    Ok(config
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let t = init_tensor(&name, &shape, config.model_dim, seed);
            (name, t)
        })
        .collect())
}

/// One source sentence and its target-side token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    /// `[source tag, tokens..., <eos>]`
    pub src: Vec<usize>,
    pub tgt_tag: usize,
    /// Target tokens without tag or `<eos>`.
    pub tgt: Vec<usize>,
}

impl Example {
    /// `[<bos>, tag, y...]`
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len() + 2);
        v.push(BOS_ID);
        v.push(self.tgt_tag);
        v.extend_from_slice(&self.tgt);
        v
    }

    /// `[<pad>, y..., <eos>]`; the tag is given, never predicted.
    pub fn decoder_target(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.tgt.len() + 2);
        v.push(PAD_ID);
        v.extend_from_slice(&self.tgt);
        v.push(EOS_ID);
        v
    }

    pub fn num_tokens(&self) -> usize {
        self.src.len() + self.tgt.len() + 2
    }
}

/// Row-major padded id matrix with per-row lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl Padded {
    pub fn new(rows: &[Vec<usize>]) -> Self {
        let width = rows.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD_ID; rows.len() * width];
        for (r, row) in rows.iter().enumerate() {
            ids[r * width..r * width + row.len()].copy_from_slice(row);
        }
        Padded {
            ids,
            lengths: rows.iter().map(Vec::len).collect(),
            width,
        }
    }

    pub fn rows(&self) -> usize {
        self.lengths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub src: Padded,
    pub tgt_in: Padded,
    pub tgt_out: Padded,
}

impl Batch {
    pub fn from_examples(examples: &[Example]) -> Self {
        let src: Vec<_> = examples.iter().map(|e| e.src.clone()).collect();
        let tin: Vec<_> = examples.iter().map(Example::decoder_input).collect();
        let tout: Vec<_> = examples.iter().map(Example::decoder_target).collect();
        Batch {
            src: Padded::new(&src),
            tgt_in: Padded::new(&tin),
            tgt_out: Padded::new(&tout),
        }
    }

    pub fn len(&self) -> usize {
        self.src.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dropout is active only in training mode, with masks drawn from the given generator.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut dyn rand::RngCore),
}

impl Mode<'_> {
    fn dropout_mask(&mut self, p: f64, n: usize) -> Option<Vec<f64>> {
        match self {
            Mode::Train(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                Some(
                    (0..n)
                        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                        .collect(),
                )
            }
            _ => None,
        }
    }
}

pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let freq = 10000f64.powf(-2.0 * (j / 2) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Parameter leaves bound onto a tape.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn new<'p>(tape: &mut Tape<'p>, params: &'p NamedParams) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.clone(), tape.param(t)))
            .collect();
        Bound { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

struct Net<'c, 'b> {
    config: &'c ModelConfig,
    bound: &'b Bound,
}

impl Net<'_, '_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bound.var(name)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: &str, b: &str) -> Result<Var> {
        let y = tape.matmul_nt(x, self.p(w)?)?;
        tape.add_row(y, self.p(b)?)
    }

    fn ln(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        tape.layer_norm(
            x,
            self.p(&format!("{prefix}.gain"))?,
            self.p(&format!("{prefix}.bias"))?,
            LN_EPS,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        prefix: &str,
        x: Var,
        memory: Var,
        spec: AttentionSpec,
        mode: &mut Mode,
    ) -> Result<Var> {
        let q = self.linear(tape, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = tape.matmul_nt(memory, self.p(&format!("{prefix}.wk"))?)?;
        let v = self.linear(tape, memory, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let n = spec.batch * spec.heads * spec.q_len * spec.k_len;
        let mask = mode.dropout_mask(self.config.attention_dropout, n);
        let o = tape.attention(q, k, v, spec, mask)?;
        self.linear(tape, o, &format!("{prefix}.wo"), &format!("{prefix}.bo"))
    }

    fn ffn(&self, tape: &mut Tape, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(tape, x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = tape.relu(h);
        self.linear(tape, h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Residual sub-block, pre- or post-norm.
    fn residual(
        &self,
        tape: &mut Tape,
        x: Var,
        ln: &str,
        f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
    ) -> Result<Var> {
        if self.config.pre_norm {
            let h = self.ln(tape, x, ln)?;
            let y = f(tape, h)?;
            tape.add(x, y)
        } else {
            let y = f(tape, x)?;
            let s = tape.add(x, y)?;
            self.ln(tape, s, ln)
        }
    }

    fn embed(&self, tape: &mut Tape, ids: &Padded) -> Result<Var> {
        if ids.width > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len: ids.width,
                max: self.config.max_positions,
            });
        }
        let d = self.config.model_dim;
        let e = tape.embedding(self.p("embedding.table")?, &ids.ids)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let pos = sinusoidal_positions(ids.width, d);
        let mut tiled = Vec::with_capacity(ids.rows() * ids.width * d);
        for _ in 0..ids.rows() {
            tiled.extend_from_slice(pos.data());
        }
        let pos = tape.constant(Tensor::new(vec![ids.rows() * ids.width, d], tiled)?);
        tape.add(e, pos)
    }

    fn encode(&self, tape: &mut Tape, src: &Padded, mode: &mut Mode) -> Result<Var> {
        let mut x = self.embed(tape, src)?;
        let spec = AttentionSpec {
            batch: src.rows(),
            q_len: src.width,
            k_len: src.width,
            heads: self.config.heads,
            key_lengths: src.lengths.clone(),
            causal: false,
        };
        for i in 0..self.config.enc_layers {
            let p = format!("encoder.layer.{i}");
            x = self.residual(tape, x, &format!("{p}.ln1"), |t, h| {
                self.attention(t, &format!("{p}.self_attn"), h, h, spec.clone(), mode)
            })?;
            x = self.residual(tape, x, &format!("{p}.ln2"), |t, h| {
                self.ffn(t, h, &format!("{p}.ffn"))
            })?;
        }
        if self.config.pre_norm {
            x = self.ln(tape, x, "encoder.final_ln")?;
        }
        Ok(x)
    }

    fn decode(
        &self,
        tape: &mut Tape,
        memory: Var,
        src_lengths: &[usize],
        src_width: usize,
        tgt_in: &Padded,
        mode: &mut Mode,
    ) -> Result<Var> {
        let mut y = self.embed(tape, tgt_in)?;
        let self_spec = AttentionSpec {
            batch: tgt_in.rows(),
            q_len: tgt_in.width,
            k_len: tgt_in.width,
            heads: self.config.heads,
            key_lengths: tgt_in.lengths.clone(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch: tgt_in.rows(),
            q_len: tgt_in.width,
            k_len: src_width,
            heads: self.config.heads,
            key_lengths: src_lengths.to_vec(),
            causal: false,
        };
        for i in 0..self.config.dec_layers {
            let p = format!("decoder.layer.{i}");
            y = self.residual(tape, y, &format!("{p}.ln1"), |t, h| {
                self.attention(t, &format!("{p}.self_attn"), h, h, self_spec.clone(), mode)
            })?;
            y = self.residual(tape, y, &format!("{p}.ln2"), |t, h| {
                self.attention(t, &format!("{p}.cross_attn"), h, memory, cross_spec.clone(), mode)
            })?;
            y = self.residual(tape, y, &format!("{p}.ln3"), |t, h| {
                self.ffn(t, h, &format!("{p}.ffn"))
            })?;
        }
        if self.config.pre_norm {
            y = self.ln(tape, y, "decoder.final_ln")?;
        }
        Ok(y)
    }

    fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let table = if self.config.tied_embeddings {
            "embedding.table"
        } else {
            "output.table"
        };
        tape.matmul_nt(hidden, self.p(table)?)
    }
}

/// Records the full encoder–decoder pass and loss; returns `(loss, token count)`.
pub fn build_loss(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    batch: &Batch,
    epsilon: f64,
    mode: &mut Mode,
) -> Result<(Var, usize)> {
    let net = Net { config, bound };
    let memory = net.encode(tape, &batch.src, mode)?;
    let hidden = net.decode(
        tape,
        memory,
        &batch.src.lengths,
        batch.src.width,
        &batch.tgt_in,
        mode,
    )?;
    let logits = net.logits(tape, hidden)?;
    tape.label_smoothed_nll(logits, &batch.tgt_out.ids, epsilon, PAD_ID)
}

/// Records the pass up to logits for every target position.
pub fn build_logits(
    tape: &mut Tape,
    bound: &Bound,
    config: &ModelConfig,
    batch: &Batch,
    mode: &mut Mode,
) -> Result<Var> {
    let net = Net { config, bound };
    let memory = net.encode(tape, &batch.src, mode)?;
    let hidden = net.decode(
        tape,
        memory,
        &batch.src.lengths,
        batch.src.width,
        &batch.tgt_in,
        mode,
    )?;
    net.logits(tape, hidden)
}

/// Eval-mode logits, one row per target position (`rows × width` of `tgt_in`).
pub fn logits(params: &NamedParams, config: &ModelConfig, batch: &Batch) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let out = build_logits(&mut tape, &bound, config, batch, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Label-smoothed loss and non-pad target count.
pub fn forward_loss(
    params: &NamedParams,
    config: &ModelConfig,
    batch: &Batch,
    mut mode: Mode,
) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let (loss, count) = build_loss(
        &mut tape,
        &bound,
        config,
        batch,
        config.label_smoothing_epsilon,
        &mut mode,
    )?;
    Ok((tape.value(loss).data()[0], count))
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub count: usize,
    pub grads: BTreeMap<String, Vec<f64>>,
}

pub fn loss_and_grads(
    params: &NamedParams,
    config: &ModelConfig,
    batch: &Batch,
    mut mode: Mode,
) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let (loss, count) = build_loss(
        &mut tape,
        &bound,
        config,
        batch,
        config.label_smoothing_epsilon,
        &mut mode,
    )?;
    let mut g = tape.backward(loss);
    let grads = bound
        .iter()
        .map(|(name, &v)| {
            let n = params.get(name).map_or(0, Tensor::numel);
            (name.clone(), g.take(v).unwrap_or_else(|| vec![0.0; n]))
        })
        .collect();
    Ok(LossAndGrads {
        loss: tape.value(loss).data()[0],
        count,
        grads,
    })
}

/// Encoder output for one source sentence, reused across decoding steps.
struct Encoded {
    memory: Tensor,
    len: usize,
}

fn encode_one(params: &NamedParams, config: &ModelConfig, src: &[usize]) -> Result<Encoded> {
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let net = Net {
        config,
        bound: &bound,
    };
    let padded = Padded::new(&[src.to_vec()]);
    let m = net.encode(&mut tape, &padded, &mut Mode::Eval)?;
    Ok(Encoded {
        memory: tape.value(m).clone(),
        len: src.len(),
    })
}

/// Log-probabilities of the next token after each equal-length prefix.
fn next_log_probs(
    params: &NamedParams,
    config: &ModelConfig,
    enc: &Encoded,
    prefixes: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let rows = prefixes.len();
    let width = prefixes[0].len();
    let d = config.model_dim;
    let mut mem = Vec::with_capacity(rows * enc.memory.numel());
    for _ in 0..rows {
        mem.extend_from_slice(enc.memory.data());
    }
    let memory = Tensor::new(vec![rows * enc.len, d], mem)?;
    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, params);
    let net = Net {
        config,
        bound: &bound,
    };
    let mv = tape.constant(memory);
    let tgt = Padded::new(prefixes);
    let hidden = net.decode(&mut tape, mv, &vec![enc.len; rows], enc.len, &tgt, &mut Mode::Eval)?;
    let last: Vec<usize> = (0..rows).map(|r| r * width + width - 1).collect();
    let h = tape.embedding(hidden, &last)?;
    let logits = net.logits(&mut tape, h)?;
    let lv = tape.value(logits);
    Ok((0..rows)
        .map(|r| {
            let mut row = lv.row(r).to_vec();
            row[PAD_ID] = f64::NEG_INFINITY;
            row[BOS_ID] = f64::NEG_INFINITY;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            row.iter().map(|z| z - lse).collect()
        })
        .collect())
}

/// Argmax decoding; the lowest id wins ties. Returns tokens without `<eos>`.
pub fn decode_greedy(
    params: &NamedParams,
    config: &ModelConfig,
    src: &[usize],
    tgt_tag: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let enc = encode_one(params, config, src)?;
    let mut prefix = vec![BOS_ID, tgt_tag];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let lp = next_log_probs(params, config, &enc, std::slice::from_ref(&prefix))?;
        let mut best = 0;
        for (i, &v) in lp[0].iter().enumerate() {
            if v > lp[0][best] {
                best = i;
            }
        }
        if best == EOS_ID {
            break;
        }
        out.push(best);
        prefix.push(best);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logprob: f64,
}

/// Length-normalized score `logprob / len^penalty`, `len` counting `<eos>`.
pub fn normalized_score(logprob: f64, len: usize, length_penalty: f64) -> f64 {
    logprob / (len.max(1) as f64).powf(length_penalty)
}

/// Beam search; returns the best hypothesis without `<eos>`.
///
/// Hypotheses finish on `<eos>` or are truncated at `max_len`. Final
/// selection maximizes [`normalized_score`], ties broken by the
/// lexicographically lower id sequence.
pub fn decode_beam(
    params: &NamedParams,
    config: &ModelConfig,
    src: &[usize],
    tgt_tag: usize,
    beam: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Vec<usize>> {
    if beam == 0 {
        return Err(Error::invalid("beam must be at least 1"));
    }
    let enc = encode_one(params, config, src)?;
    let mut alive = vec![Hyp {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut finished: Vec<(f64, Vec<usize>)> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<usize>> = alive
            .iter()
            .map(|h| {
                let mut p = vec![BOS_ID, tgt_tag];
                p.extend_from_slice(&h.tokens);
                p
            })
            .collect();
        let lps = next_log_probs(params, config, &enc, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (hi, lp) in lps.iter().enumerate() {
            for (tok, &l) in lp.iter().enumerate() {
                cands.push((alive[hi].logprob + l, hi, tok));
            }
        }
        // Higher logprob first; among equals the lower id sequence.
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| alive[a.1].tokens.cmp(&alive[b.1].tokens))
                .then(a.2.cmp(&b.2))
        });
        let last = step + 1 == max_len;
        let mut next = Vec::with_capacity(beam);
        let mut kept = 0;
        for (rank, (lp, hi, tok)) in cands.into_iter().enumerate() {
            if kept == beam {
                break;
            }
            let mut tokens = alive[hi].tokens.clone();
            if tok == EOS_ID {
                // Only hypotheses that rank inside the beam may finish.
                if rank < beam {
                    let len = tokens.len() + 1;
                    finished.push((normalized_score(lp, len, length_penalty), tokens));
                }
                continue;
            }
            kept += 1;
            tokens.push(tok);
            if last {
                let len = tokens.len();
                finished.push((normalized_score(lp, len, length_penalty), tokens));
            } else {
                next.push(Hyp {
                    tokens,
                    logprob: lp,
                });
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam {
            break;
        }
    }
    finished.extend(alive.into_iter().map(|h| {
        let len = h.tokens.len();
        (normalized_score(h.logprob, len, length_penalty), h.tokens)
    }));
    finished.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    Ok(finished.into_iter().next().map(|(_, t)| t).unwrap_or_default())
}
