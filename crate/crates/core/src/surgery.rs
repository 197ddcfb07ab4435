//! Growing a trained checkpoint: new vocabulary rows, wider feed-forward
//! layers and extra encoder/decoder layers, with element-level provenance.
//!
//! Every element of the grown model belongs to exactly one [`Segment`] of its
//! tensor's [`TensorProvenance`]. A segment is a contiguous index range along
//! one axis (rows of `w1`/`b1`/embedding tables, columns of `w2`), so the
//! old/new split consumed by learning-rate groups is explicit.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::{self, init_tensor_with_stream, layer_name, parse_layer_name, Stack};
use crate::seeding;
use crate::tensor::Tensor;
use crate::vocab::{overlap_map, Vocab, VocabMapping, UNK_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    UnkCopy,
    RandomNew,
    RandomAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthInit {
    ConcatNoise,
    LinearInterp,
    RandomExpand,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    FrobeniusMatch,
    FunctionPreserve,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthInit {
    AverageLayer,
    ClosestLayer,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertPosition {
    Bottom,
    Top,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Copied,
    CopiedNoisy,
    Interpolated,
    UnkRow,
    FreshRandom,
    LayerAverage,
}

/// Old elements come from the seed model; everything else is new.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Old,
    New,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthPlan {
    pub factor: usize,
    pub init: WidthInit,
    pub noise_std: f64,
    pub norm_mode: NormMode,
}

impl Default for WidthPlan {
    fn default() -> Self {
        WidthPlan {
            factor: 1,
            init: WidthInit::ConcatNoise,
            noise_std: 0.01,
            norm_mode: NormMode::FrobeniusMatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepthPlan {
    pub enc_count: usize,
    pub dec_count: usize,
    pub enc_position: InsertPosition,
    pub dec_position: InsertPosition,
    pub init: DepthInit,
}

impl Default for DepthPlan {
    fn default() -> Self {
        DepthPlan {
            enc_count: 0,
            dec_count: 0,
            enc_position: InsertPosition::Bottom,
            dec_position: InsertPosition::Top,
            init: DepthInit::AverageLayer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPlan {
    pub target_vocab: Vocab,
    pub embedding_init: EmbeddingInit,
    #[serde(default)]
    pub width: WidthPlan,
    #[serde(default)]
    pub depth: DepthPlan,
    pub seed: u64,
}

impl GrowthPlan {
    /// A plan that changes nothing but may swap the vocabulary.
    pub fn vocab_only(target_vocab: Vocab, seed: u64) -> Self {
        GrowthPlan {
            target_vocab,
            embedding_init: EmbeddingInit::UnkCopy,
            width: WidthPlan::default(),
            depth: DepthPlan::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width.factor == 0 {
            return Err(Error::invalid("width factor must be at least 1"));
        }
        if !(self.width.noise_std >= 0.0 && self.width.noise_std.is_finite()) {
            return Err(Error::invalid(format!(
                "noise_std {} must be finite and non-negative",
                self.width.noise_std
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub provenance: Provenance,
    pub group: Group,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorProvenance {
    pub shape: Vec<usize>,
    /// Axis the segments index; the other axes are covered in full.
    pub axis: usize,
    pub segments: Vec<Segment>,
    /// Seed-model tensor this one descends from, if any.
    pub source: Option<String>,
    /// Factor applied to the whole tensor after construction.
    pub scale: f64,
}

impl TensorProvenance {
    fn copied(name: &str, shape: &[usize]) -> Self {
        TensorProvenance {
            shape: shape.to_vec(),
            axis: 0,
            segments: vec![Segment {
                start: 0,
                len: shape[0],
                provenance: Provenance::Copied,
                group: Group::Old,
            }],
            source: Some(name.to_string()),
            scale: 1.0,
        }
    }

    fn whole(shape: &[usize], provenance: Provenance, group: Group, source: Option<String>) -> Self {
        TensorProvenance {
            shape: shape.to_vec(),
            axis: 0,
            segments: vec![Segment {
                start: 0,
                len: shape[0],
                provenance,
                group,
            }],
            source,
            scale: 1.0,
        }
    }

    /// Builds run-length segments from one label per index along `axis`.
    fn from_labels(
        shape: &[usize],
        axis: usize,
        labels: &[(Provenance, Group)],
        source: Option<String>,
    ) -> Self {
        let mut segments: Vec<Segment> = Vec::new();
        for (i, &(provenance, group)) in labels.iter().enumerate() {
            match segments.last_mut() {
                Some(s) if s.provenance == provenance && s.group == group => s.len += 1,
                _ => segments.push(Segment {
                    start: i,
                    len: 1,
                    provenance,
                    group,
                }),
            }
        }
        TensorProvenance {
            shape: shape.to_vec(),
            axis,
            segments,
            source,
            scale: 1.0,
        }
    }

    /// Label of every index along the segment axis.
    pub fn axis_labels(&self) -> Vec<(Provenance, Group)> {
        let mut out = Vec::with_capacity(self.shape[self.axis]);
        for s in &self.segments {
            out.extend(std::iter::repeat_n((s.provenance, s.group), s.len));
        }
        out
    }

    /// Group of every element in row-major order.
    pub fn element_groups(&self) -> Vec<Group> {
        let labels = self.axis_labels();
        let numel: usize = self.shape.iter().product();
        let inner: usize = self.shape[self.axis + 1..].iter().product();
        let dim = self.shape[self.axis];
        (0..numel).map(|i| labels[(i / inner) % dim].1).collect()
    }

    pub fn count(&self, group: Group) -> usize {
        let per_index: usize =
            self.shape.iter().product::<usize>() / self.shape[self.axis].max(1);
        self.segments
            .iter()
            .filter(|s| s.group == group)
            .map(|s| s.len * per_index)
            .sum()
    }

    /// Segments must tile `0..shape[axis]` in order without gaps or overlap.
    pub fn validate(&self, name: &str) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.start != next || s.len == 0 {
                return Err(Error::ProvenanceMismatch(format!(
                    "`{name}`: segment at {} (len {}) does not continue at {next}",
                    s.start, s.len
                )));
            }
            next += s.len;
        }
        if self.axis >= self.shape.len() || next != self.shape[self.axis] {
            return Err(Error::ProvenanceMismatch(format!(
                "`{name}`: segments cover {next} of axis {} in {:?}",
                self.axis, self.shape
            )));
        }
        Ok(())
    }
}

/// What [`grow`] actually did; `None` for a stage that had nothing to do.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppliedChoices {
    pub embedding_init: Option<EmbeddingInit>,
    pub width: Option<WidthPlan>,
    pub depth: Option<DepthPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurgeryReport {
    pub coverage: f64,
    pub mapping: VocabMapping,
    pub applied: AppliedChoices,
    pub seed: u64,
    pub tensors: BTreeMap<String, TensorProvenance>,
}

impl SurgeryReport {
    /// Every tensor of `ckpt` has a provenance entry whose segments tile it.
    pub fn validate(&self, ckpt: &Checkpoint) -> Result<()> {
        if self.tensors.len() != ckpt.params.len() {
            return Err(Error::ProvenanceMismatch(format!(
                "{} provenance entries for {} tensors",
                self.tensors.len(),
                ckpt.params.len()
            )));
        }
        for (name, t) in ckpt.params.iter() {
            let p = self.tensors.get(name).ok_or_else(|| {
                Error::ProvenanceMismatch(format!("no provenance for `{name}`"))
            })?;
            if p.shape != t.shape() {
                return Err(Error::ProvenanceMismatch(format!(
                    "`{name}`: provenance shape {:?} vs tensor {:?}",
                    p.shape,
                    t.shape()
                )));
            }
            p.validate(name)?;
        }
        Ok(())
    }

    pub fn element_groups(&self, name: &str) -> Option<Vec<Group>> {
        self.tensors.get(name).map(TensorProvenance::element_groups)
    }

    pub fn count(&self, group: Group) -> usize {
        self.tensors.values().map(|p| p.count(group)).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Label of the stream that supplies new-element values for `name`.
pub fn noise_label(name: &str) -> String {
    format!("widen/{name}")
}

/// `n` draws of N(0, std²) from the named stream.
pub fn gaussian(seed: u64, label: &str, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = seeding::stream(seed, label);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

struct State {
    ckpt: Checkpoint,
    prov: BTreeMap<String, TensorProvenance>,
}

impl State {
    fn new(ckpt: &Checkpoint) -> Self {
        let prov = ckpt
            .params
            .iter()
            .map(|(n, t)| (n.clone(), TensorProvenance::copied(n, t.shape())))
            .collect();
        State {
            ckpt: ckpt.clone(),
            prov,
        }
    }
}

/// Replaces the vocabulary, building new embedding rows per `strategy`.
pub fn remap_embeddings(
    ckpt: &Checkpoint,
    new_vocab: &Vocab,
    mapping: &VocabMapping,
    strategy: EmbeddingInit,
    seed: u64,
) -> Result<Checkpoint> {
    let mut st = State::new(ckpt);
    remap_state(&mut st, new_vocab, mapping, strategy, seed)?;
    Ok(st.ckpt)
}

fn is_identity(mapping: &VocabMapping) -> bool {
    mapping.is_bijection() && mapping.pairs.iter().all(|&(o, n)| o == n)
}

fn remap_state(
    st: &mut State,
    new_vocab: &Vocab,
    mapping: &VocabMapping,
    strategy: EmbeddingInit,
    seed: u64,
) -> Result<bool> {
    let old_size = st.ckpt.vocab.len();
    if mapping.old_size != old_size || mapping.new_size != new_vocab.len() {
        return Err(Error::invalid(format!(
            "mapping is {}→{} but vocabularies are {}→{}",
            mapping.old_size,
            mapping.new_size,
            old_size,
            new_vocab.len()
        )));
    }
    mapping.validate(old_size, new_vocab.len())?;
    for &(o, n) in &mapping.pairs {
        if st.ckpt.vocab.token(o) != new_vocab.token(n) {
            return Err(Error::invalid(format!(
                "mapping pairs differing tokens at ({o}, {n})"
            )));
        }
    }
    if is_identity(mapping) && strategy != EmbeddingInit::RandomAll {
        return Ok(false);
    }
    let d = st.ckpt.config.model_dim;
    let std = (d as f64).powf(-0.5);
    let old_for_new = mapping.old_for_new();
    let v = new_vocab.len();
    for table in model::vocab_tables(&st.ckpt.config) {
        let old = st.ckpt.params.require(table)?.clone();
        let mut rng = seeding::stream(seed, &format!("remap/{table}"));
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut data = Vec::with_capacity(v * d);
        let mut labels = Vec::with_capacity(v);
        for old_id in &old_for_new {
            let (prov, group) = match (strategy, old_id) {
                (EmbeddingInit::RandomAll, _) => {
                    data.extend((0..d).map(|_| normal.sample(&mut rng)));
                    (Provenance::FreshRandom, Group::New)
                }
                (_, Some(o)) => {
                    data.extend_from_slice(old.row(*o));
                    (Provenance::Copied, Group::Old)
                }
                (EmbeddingInit::UnkCopy, None) => {
                    data.extend_from_slice(old.row(UNK_ID));
                    (Provenance::UnkRow, Group::New)
                }
                (EmbeddingInit::RandomNew, None) => {
                    data.extend((0..d).map(|_| normal.sample(&mut rng)));
                    (Provenance::FreshRandom, Group::New)
                }
            };
            labels.push((prov, group));
        }
        let t = Tensor::new(vec![v, d], data)?;
        st.prov.insert(
            table.to_string(),
            TensorProvenance::from_labels(t.shape(), 0, &labels, Some(table.to_string())),
        );
        st.ckpt.params.insert(table, t);
        st.ckpt.moments.remove(table);
    }
    st.ckpt.vocab = new_vocab.clone();
    st.ckpt.config.vocab_size = v;
    Ok(true)
}

/// Widens every feed-forward block's hidden dimension by `factor`.
pub fn widen_ffn(
    ckpt: &Checkpoint,
    factor: usize,
    strategy: WidthInit,
    noise_std: f64,
    norm_mode: NormMode,
    seed: u64,
) -> Result<Checkpoint> {
    let mut st = State::new(ckpt);
    let plan = WidthPlan {
        factor,
        init: strategy,
        noise_std,
        norm_mode,
    };
    widen_state(&mut st, &plan, seed)?;
    Ok(st.ckpt)
}

fn ffn_prefixes(config: &model::ModelConfig) -> Vec<String> {
    let enc = (0..config.enc_layers).map(|i| layer_name(Stack::Encoder, i, "ffn"));
    let dec = (0..config.dec_layers).map(|i| layer_name(Stack::Decoder, i, "ffn"));
    enc.chain(dec).collect()
}

/// How hidden unit `i` of the widened layer is built from the old ones.
#[derive(Clone, Copy)]
enum Unit {
    Copy(usize),
    /// `a + t·(b − a)` plus noise.
    Interp(usize, usize, f64),
    /// Copy of `a` plus noise.
    Noisy(usize),
    Fresh,
}

impl Unit {
    fn label(self) -> (Provenance, Group) {
        match self {
            Unit::Copy(_) => (Provenance::Copied, Group::Old),
            Unit::Interp(..) => (Provenance::Interpolated, Group::New),
            Unit::Noisy(_) => (Provenance::CopiedNoisy, Group::New),
            Unit::Fresh => (Provenance::FreshRandom, Group::New),
        }
    }
}

fn unit_plan(h: usize, factor: usize, init: WidthInit) -> Vec<Unit> {
    match init {
        WidthInit::ConcatNoise => (0..h * factor)
            .map(|i| if i < h { Unit::Copy(i) } else { Unit::Noisy(i % h) })
            .collect(),
        WidthInit::RandomExpand => (0..h * factor)
            .map(|i| if i < h { Unit::Copy(i) } else { Unit::Fresh })
            .collect(),
        WidthInit::LinearInterp => (0..h * factor)
            .map(|i| {
                let (j, r) = (i / factor, i % factor);
                if r == 0 {
                    Unit::Copy(j)
                } else {
                    Unit::Interp(j, (j + 1).min(h - 1), r as f64 / factor as f64)
                }
            })
            .collect(),
    }
}

/// Value of new unit `u` given the old slice accessor `old(j, k)`.
fn unit_value(u: Unit, k: usize, old: impl Fn(usize, usize) -> f64) -> f64 {
    match u {
        Unit::Copy(j) | Unit::Noisy(j) => old(j, k),
        Unit::Interp(a, b, t) => {
            let (x, y) = (old(a, k), old(b, k));
            x + t * (y - x)
        }
        Unit::Fresh => 0.0,
    }
}

fn widen_state(st: &mut State, plan: &WidthPlan, seed: u64) -> Result<bool> {
    if plan.factor == 0 {
        return Err(Error::invalid("width factor must be at least 1"));
    }
    if plan.factor == 1 {
        return Ok(false);
    }
    let config = st.ckpt.config.clone();
    let (d, h) = (config.model_dim, config.ffn_hidden_dim);
    let hn = h * plan.factor;
    let units = unit_plan(h, plan.factor, plan.init);
    let labels: Vec<_> = units.iter().map(|u| u.label()).collect();
    let fresh_std = (d as f64).powf(-0.5);
    let noise_std = |u: Unit| match u {
        Unit::Copy(_) => None,
        Unit::Fresh => Some(fresh_std),
        _ => Some(plan.noise_std),
    };
    for prefix in ffn_prefixes(&config) {
        let (n_w1, n_b1, n_w2) = (
            format!("{prefix}.w1"),
            format!("{prefix}.b1"),
            format!("{prefix}.w2"),
        );
        let w1 = st.ckpt.params.require(&n_w1)?.clone();
        let b1 = st.ckpt.params.require(&n_b1)?.clone();
        let w2 = st.ckpt.params.require(&n_w2)?.clone();

        // w1 [hn, d]: new rows consume their noise stream row-major.
        let mut noise = NoiseCursor::new(seed, &n_w1);
        let mut w1n = Vec::with_capacity(hn * d);
        for &u in &units {
            for k in 0..d {
                let base = unit_value(u, k, |j, k| w1.data()[j * d + k]);
                w1n.push(base + noise.next(noise_std(u)));
            }
        }
        // b1 [hn]; fresh hidden units get zero bias like a fresh init.
        let mut noise = NoiseCursor::new(seed, &n_b1);
        let b1n: Vec<f64> = units
            .iter()
            .map(|&u| match u {
                Unit::Fresh => 0.0,
                _ => unit_value(u, 0, |j, _| b1.data()[j]) + noise.next(noise_std(u)),
            })
            .collect();
        // w2 [d, hn]: columns follow the same unit plan as w1 rows.
        let mut noise = NoiseCursor::new(seed, &n_w2);
        let mut w2n = Vec::with_capacity(d * hn);
        for r in 0..d {
            for &u in &units {
                let base = unit_value(u, r, |j, r| w2.data()[r * h + j]);
                w2n.push(base + noise.next(noise_std(u)));
            }
        }
        let old_norm = w2.frobenius_norm();
        let mut w2n = Tensor::new(vec![d, hn], w2n)?;
        let scale = match plan.norm_mode {
            NormMode::None => 1.0,
            NormMode::FunctionPreserve => 1.0 / plan.factor as f64,
            NormMode::FrobeniusMatch => {
                let n = w2n.frobenius_norm();
                if n > 0.0 {
                    old_norm / n
                } else {
                    1.0
                }
            }
        };
        if scale != 1.0 {
            w2n = w2n.scale(scale);
        }

        let w1n = Tensor::new(vec![hn, d], w1n)?;
        let b1n = Tensor::new(vec![hn], b1n)?;
        for (name, t, axis, sc) in [
            (&n_w1, w1n, 0, 1.0),
            (&n_b1, b1n, 0, 1.0),
            (&n_w2, w2n, 1, scale),
        ] {
            let source = st.prov.get(name).and_then(|p| p.source.clone());
            let mut p = TensorProvenance::from_labels(t.shape(), axis, &labels, source);
            p.scale = sc;
            st.prov.insert(name.clone(), p);
            st.ckpt.moments.remove(name.as_str());
            st.ckpt.params.insert(name.clone(), t);
        }
    }
    st.ckpt.config.ffn_hidden_dim = hn;
    Ok(true)
}

/// Sequential draws from one named stream, consumed only by new elements.
struct NoiseCursor {
    rng: rand_chacha::ChaCha8Rng,
}

impl NoiseCursor {
    fn new(seed: u64, name: &str) -> Self {
        NoiseCursor {
            rng: seeding::stream(seed, &noise_label(name)),
        }
    }

    fn next(&mut self, std: Option<f64>) -> f64 {
        match std {
            None => 0.0,
            Some(s) if s == 0.0 => 0.0,
            Some(s) => Normal::new(0.0, s).expect("finite std").sample(&mut self.rng),
        }
    }
}

/// Inserts `enc_count` encoder and `dec_count` decoder layers.
pub fn deepen(ckpt: &Checkpoint, plan: &DepthPlan, seed: u64) -> Result<Checkpoint> {
    let mut st = State::new(ckpt);
    deepen_state(&mut st, plan, seed)?;
    Ok(st.ckpt)
}

fn deepen_state(st: &mut State, plan: &DepthPlan, seed: u64) -> Result<bool> {
    if plan.enc_count == 0 && plan.dec_count == 0 {
        return Ok(false);
    }
    for (stack, count, position) in [
        (Stack::Encoder, plan.enc_count, plan.enc_position),
        (Stack::Decoder, plan.dec_count, plan.dec_position),
    ] {
        if count > 0 {
            insert_layers(st, stack, count, position, plan.init, seed)?;
        }
    }
    Ok(true)
}

fn insert_layers(
    st: &mut State,
    stack: Stack,
    count: usize,
    position: InsertPosition,
    init: DepthInit,
    seed: u64,
) -> Result<()> {
    let n_old = match stack {
        Stack::Encoder => st.ckpt.config.enc_layers,
        Stack::Decoder => st.ckpt.config.dec_layers,
    };
    let (shift, first_new) = match position {
        InsertPosition::Bottom => (count, 0),
        InsertPosition::Top => (0, n_old),
    };
    let d = st.ckpt.config.model_dim;

    // Tensor tails of one layer, from layer 0.
    let tails: Vec<(String, Vec<usize>)> = st
        .ckpt
        .params
        .iter()
        .filter_map(|(n, t)| match parse_layer_name(n) {
            Some((s, 0, tail)) if s == stack => Some((tail.to_string(), t.shape().to_vec())),
            _ => None,
        })
        .collect();

    let mut inserted = Vec::new();
    for k in 0..count {
        let idx = first_new + k;
        for (tail, shape) in &tails {
            let name = layer_name(stack, idx, tail);
            let (t, prov, source) = match init {
                DepthInit::AverageLayer => {
                    let mut acc = vec![0.0; shape.iter().product()];
                    for l in 0..n_old {
                        let src = st.ckpt.params.require(&layer_name(stack, l, tail))?;
                        for (a, x) in acc.iter_mut().zip(src.data()) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= n_old as f64);
                    (Tensor::new(shape.clone(), acc)?, Provenance::LayerAverage, None)
                }
                DepthInit::ClosestLayer => {
                    let l = match position {
                        InsertPosition::Bottom => 0,
                        InsertPosition::Top => n_old - 1,
                    };
                    let src = layer_name(stack, l, tail);
                    let t = st.ckpt.params.require(&src)?.clone();
                    let source = st.prov.get(&src).and_then(|p| p.source.clone());
                    (t, Provenance::Copied, source)
                }
                DepthInit::Random => (
                    init_tensor_with_stream(&name, &format!("deepen/{name}"), shape, d, seed),
                    Provenance::FreshRandom,
                    None,
                ),
            };
            inserted.push((name, t, prov, source));
        }
    }

    // Shift the old layers, carrying their provenance and optimizer state.
    if shift > 0 {
        let old: Vec<(String, usize, String)> = st
            .ckpt
            .params
            .names()
            .filter_map(|n| match parse_layer_name(n) {
                Some((s, l, tail)) if s == stack => Some((n.clone(), l, tail.to_string())),
                _ => None,
            })
            .collect();
        let mut moved = Vec::with_capacity(old.len());
        for (name, l, tail) in old {
            let t = st.ckpt.params.remove(&name).expect("listed");
            let p = st.prov.remove(&name).expect("provenance for every tensor");
            let m = st.ckpt.moments.remove(&name);
            moved.push((layer_name(stack, l + shift, &tail), t, p, m));
        }
        for (name, t, p, m) in moved {
            st.ckpt.params.insert(name.clone(), t);
            st.prov.insert(name.clone(), p);
            if let Some(m) = m {
                st.ckpt.moments.insert(name, m);
            }
        }
    }
    for (name, t, prov, source) in inserted {
        let p = TensorProvenance::whole(t.shape(), prov, Group::New, source);
        st.prov.insert(name.clone(), p);
        st.ckpt.params.insert(name, t);
    }
    match stack {
        Stack::Encoder => st.ckpt.config.enc_layers += count,
        Stack::Decoder => st.ckpt.config.dec_layers += count,
    }
    Ok(())
}

/// Vocabulary remap, then widening, then depth insertion. The input is not modified.
pub fn grow(ckpt: &Checkpoint, plan: &GrowthPlan) -> Result<(Checkpoint, SurgeryReport)> {
    plan.validate()?;
    ckpt.validate()?;
    let mapping = overlap_map(&ckpt.vocab, &plan.target_vocab);
    let mut st = State::new(ckpt);
    let remapped = remap_state(
        &mut st,
        &plan.target_vocab,
        &mapping,
        plan.embedding_init,
        plan.seed,
    )?;
    let widened = widen_state(&mut st, &plan.width, plan.seed)?;
    let deepened = deepen_state(&mut st, &plan.depth, plan.seed)?;
    st.ckpt.validate()?;
    let report = SurgeryReport {
        coverage: mapping.coverage(),
        mapping,
        applied: AppliedChoices {
            embedding_init: remapped.then_some(plan.embedding_init),
            width: widened.then_some(plan.width),
            depth: deepened.then_some(plan.depth),
        },
        seed: plan.seed,
        tensors: st.prov,
    };
    report.validate(&st.ckpt)?;
    Ok((st.ckpt, report))
}

/// Fresh initialization at the grown architecture: keeps the grown vocabulary
/// and shapes, discards every seed weight and optimizer moment.
pub fn reinitialize(
    grown: &Checkpoint,
    report: &SurgeryReport,
    seed: u64,
) -> Result<(Checkpoint, SurgeryReport)> {
    let params = model::init_model(&grown.config, seed)?;
    let ckpt = Checkpoint::new(grown.config.clone(), grown.vocab.clone(), params);
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, t)| {
            let p = TensorProvenance::whole(t.shape(), Provenance::FreshRandom, Group::New, None);
            (name.clone(), p)
        })
        .collect();
    let out = SurgeryReport {
        tensors,
        seed,
        ..report.clone()
    };
    out.validate(&ckpt)?;
    Ok((ckpt, out))
}
