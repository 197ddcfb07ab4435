//! Optimizer schedule, direction sampling, grouped Adam and the training loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Moments};
use crate::error::{Error, Result};
use crate::model::{self, Batch, Bound, Example, Mode, NamedParams};
use crate::seeding;
use crate::surgery::{Group, SurgeryReport};
use crate::synth::{DirectionSpec, Tier};
use crate::tensor::Tensor;
use crate::vocab::{Vocab, UNK_ID};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Inverse square-root schedule with linear warmup.
pub fn lr_at(step: u64, peak: f64, warmup: u64) -> Result<f64> {
    if step < 1 {
        return Err(Error::invalid("learning-rate step must be at least 1"));
    }
    if warmup < 1 {
        return Err(Error::invalid("warmup must be at least 1"));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(peak * (s / w).min((w / s).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaSchedule {
    pub start: f64,
    pub end: f64,
    pub ramp_steps: u64,
}

impl GammaSchedule {
    pub fn constant(gamma: f64) -> Self {
        GammaSchedule {
            start: gamma,
            end: gamma,
            ramp_steps: 0,
        }
    }

    pub fn ramp(start: f64, end: f64, ramp_steps: u64) -> Self {
        GammaSchedule {
            start,
            end,
            ramp_steps,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.start == self.end
    }
}

/// Linear from `start` to `end` over `ramp_steps`, then held at `end`.
pub fn gamma_at(schedule: &GammaSchedule, continual_step: u64) -> f64 {
    if schedule.is_constant() || continual_step >= schedule.ramp_steps {
        return schedule.end;
    }
    let t = continual_step as f64 / schedule.ramp_steps as f64;
    schedule.start + t * (schedule.end - schedule.start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub gamma: GammaSchedule,
}

#[derive(Debug, Clone, PartialEq)]
enum Assignment {
    Whole(usize),
    Elements(Vec<u8>),
}

/// A partition of every parameter element into named groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroups {
    groups: Vec<ParamGroup>,
    assignment: BTreeMap<String, Assignment>,
}

impl ParamGroups {
    /// Every element in one group.
    pub fn single(params: &NamedParams, name: &str, gamma: GammaSchedule) -> Self {
        ParamGroups {
            groups: vec![ParamGroup {
                name: name.to_string(),
                gamma,
            }],
            assignment: params.names().map(|n| (n.clone(), Assignment::Whole(0))).collect(),
        }
    }

    /// Old elements follow `old`, new elements follow `new`.
    pub fn from_report(report: &SurgeryReport, old: GammaSchedule, new: GammaSchedule) -> Self {
        let assignment = report
            .tensors
            .iter()
            .map(|(name, p)| {
                let a = if p.segments.iter().all(|s| s.group == Group::Old) {
                    Assignment::Whole(0)
                } else if p.segments.iter().all(|s| s.group == Group::New) {
                    Assignment::Whole(1)
                } else {
                    Assignment::Elements(
                        p.element_groups()
                            .into_iter()
                            .map(|g| (g == Group::New) as u8)
                            .collect(),
                    )
                };
                (name.clone(), a)
            })
            .collect();
        ParamGroups {
            groups: vec![
                ParamGroup {
                    name: "old".into(),
                    gamma: old,
                },
                ParamGroup {
                    name: "new".into(),
                    gamma: new,
                },
            ],
            assignment,
        }
    }

    /// Elements selected by `mask` go to `groups[1]`, the rest to `groups[0]`.
    pub fn from_masks(
        groups: [ParamGroup; 2],
        masks: &BTreeMap<String, Vec<bool>>,
    ) -> Self {
        let assignment = masks
            .iter()
            .map(|(name, m)| {
                let a = if m.iter().all(|&x| !x) {
                    Assignment::Whole(0)
                } else if m.iter().all(|&x| x) {
                    Assignment::Whole(1)
                } else {
                    Assignment::Elements(m.iter().map(|&x| x as u8).collect())
                };
                (name.clone(), a)
            })
            .collect();
        ParamGroups {
            groups: groups.to_vec(),
            assignment,
        }
    }

    pub fn set_gamma(&mut self, group: usize, gamma: GammaSchedule) {
        self.groups[group].gamma = gamma;
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    /// Replaces every schedule with a constant γ=1.
    pub fn neutral(&self) -> Self {
        let mut out = self.clone();
        for g in &mut out.groups {
            g.gamma = GammaSchedule::constant(1.0);
        }
        out
    }

    /// Number of elements in each group.
    pub fn sizes(&self, params: &NamedParams) -> Vec<usize> {
        let mut sizes = vec![0; self.groups.len()];
        for (name, a) in &self.assignment {
            match a {
                Assignment::Whole(g) => sizes[*g] += params.get(name).map_or(0, Tensor::numel),
                Assignment::Elements(m) => m.iter().for_each(|&g| sizes[g as usize] += 1),
            }
        }
        sizes
    }

    pub fn group_of(&self, name: &str, index: usize) -> Option<usize> {
        match self.assignment.get(name)? {
            Assignment::Whole(g) => Some(*g),
            Assignment::Elements(m) => m.get(index).map(|&g| g as usize),
        }
    }

    /// Checks that the groups partition exactly the elements of `params`.
    pub fn validate(&self, params: &NamedParams) -> Result<()> {
        for g in &self.groups {
            for v in [g.gamma.start, g.gamma.end] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::invalid(format!("group `{}` has γ {v}", g.name)));
                }
            }
        }
        for (name, t) in params.iter() {
            match self.assignment.get(name) {
                None => {
                    return Err(Error::invalid(format!("`{name}` belongs to no parameter group")))
                }
                Some(Assignment::Elements(m)) if m.len() != t.numel() => {
                    return Err(Error::invalid(format!(
                        "group mask for `{name}` has {} entries, tensor has {}",
                        m.len(),
                        t.numel()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.assignment.keys().find(|n| params.get(n).is_none()) {
            return Err(Error::invalid(format!("group assignment names unknown tensor `{extra}`")));
        }
        Ok(())
    }
}

/// Sampling probabilities `p_d ∝ (α_d · n_d)^(1/T)`.
pub fn direction_probs(sizes: &[usize], alphas: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if sizes.is_empty() || sizes.len() != alphas.len() {
        return Err(Error::invalid("need one α per direction and at least one direction"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("direction sizes must be positive"));
    }
    if !(temperature >= 1.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be >= 1")));
    }
    let w: Vec<f64> = sizes
        .iter()
        .zip(alphas)
        .map(|(&n, &a)| (a * n as f64).powf(1.0 / temperature))
        .collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Draws one direction index with probability `p_d ∝ (α_d · n_d)^(1/T)`.
pub fn sample_direction<R: Rng + ?Sized>(
    sizes: &[usize],
    alphas: &[f64],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    let p = direction_probs(sizes, alphas, temperature)?;
    Ok(WeightedIndex::new(&p).expect("positive weights").sample(rng))
}

fn check_finite(grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
    for (name, g) in grads {
        if let Some(i) = g.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: name.clone(),
                index: i,
                value: g[i],
            });
        }
    }
    Ok(())
}

/// One Adam update; element `i` of tensor `n` moves with
/// `base_lr · γ(group(n, i))`. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut NamedParams,
    grads: &BTreeMap<String, Vec<f64>>,
    moments: &mut BTreeMap<String, Moments>,
    base_lr: f64,
    groups: &ParamGroups,
    continual_step: u64,
) -> Result<()> {
    check_finite(grads)?;
    for (name, g) in grads {
        let t = params.require(name)?;
        if t.numel() != g.len() {
            return Err(Error::shape("adam_step", t.shape(), &[g.len()]));
        }
    }
    let lrs: Vec<f64> = groups
        .groups
        .iter()
        .map(|g| base_lr * gamma_at(&g.gamma, continual_step))
        .collect();
    for (name, g) in grads {
        let t = params.get_mut(name).expect("checked above");
        let assignment = groups
            .assignment
            .get(name)
            .ok_or_else(|| Error::invalid(format!("`{name}` belongs to no parameter group")))?;
        let mo = moments
            .entry(name.clone())
            .or_insert_with(|| Moments::zeros(t.shape()));
        mo.steps += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(mo.steps as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(mo.steps as i32);
        let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
        for (i, (x, &gi)) in t.data_mut().iter_mut().zip(g).enumerate() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let lr = match assignment {
                Assignment::Whole(k) => lrs[*k],
                Assignment::Elements(mask) => lrs[mask[i] as usize],
            };
            *x -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    /// Updates performed by this call.
    pub total_steps: u64,
    /// Approximate source+target tokens per batch.
    pub batch_tokens: usize,
    pub temperature: f64,
    /// Up-sampling factor per direction name; missing means 1.
    #[serde(default)]
    pub alpha: BTreeMap<String, f64>,
    pub label_smoothing: f64,
    pub seed: u64,
    pub validate_every: u64,
    #[serde(default)]
    pub reset_scheduler: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: Option<f64>,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 0.003,
            warmup_steps: 8000,
            total_steps: 1000,
            batch_tokens: 512,
            temperature: 1.0,
            alpha: BTreeMap::new(),
            label_smoothing: 0.1,
            seed: 1,
            validate_every: 250,
            reset_scheduler: false,
            clip_norm: default_clip(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::invalid("warmup_steps must be at least 1"));
        }
        if !(self.temperature >= 1.0) {
            return Err(Error::invalid("temperature must be >= 1"));
        }
        if self.validate_every < 1 {
            return Err(Error::invalid("validate_every must be at least 1"));
        }
        if self.batch_tokens < 1 {
            return Err(Error::invalid("batch_tokens must be at least 1"));
        }
        if let Some((k, a)) = self.alpha.iter().find(|(_, &a)| !(a >= 1.0)) {
            return Err(Error::invalid(format!("α for {k} is {a}; must be >= 1")));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing must be in [0, 1)"));
        }
        Ok(())
    }
}

/// One direction's encoded training and validation examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainDirection {
    pub name: String,
    pub source: String,
    pub target: String,
    pub tier: Tier,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
}

impl TrainDirection {
    pub fn encode(vocab: &Vocab, train: &DirectionSpec, dev: &[(String, String)]) -> Result<Self> {
        let tgt_tag = vocab.tag_id(&train.target).ok_or_else(|| {
            Error::invalid(format!("vocabulary has no tag for `{}`", train.target))
        })?;
        let enc = |pairs: &[(String, String)]| -> Result<Vec<Example>> {
            pairs
                .iter()
                .map(|(s, t)| {
                    Ok(Example {
                        src: vocab.encode(&train.source, s)?,
                        tgt_tag,
                        tgt: vocab.encode_tokens(t),
                    })
                })
                .collect()
        };
        Ok(TrainDirection {
            name: train.name(),
            source: train.source.clone(),
            target: train.target.clone(),
            tier: train.tier,
            train: enc(&train.pairs)?,
            dev: enc(dev)?,
        })
    }
}

/// Examples drawn uniformly with replacement until `batch_tokens` is reached.
pub fn draw_batch<R: Rng + ?Sized>(examples: &[Example], batch_tokens: usize, rng: &mut R) -> Vec<Example> {
    let mut out = Vec::new();
    let mut tokens = 0;
    while tokens < batch_tokens {
        let e = &examples[rng.random_range(0..examples.len())];
        tokens += e.num_tokens();
        out.push(e.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub gammas: Vec<f64>,
    pub direction: String,
    pub train_loss: f64,
    /// Per-direction validation loss, on validation steps only.
    pub val: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub groups: Vec<String>,
    pub directions: Vec<String>,
    pub rows: Vec<LogRow>,
    pub best_step: u64,
    pub best_val: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr");
        for g in &self.groups {
            let _ = write!(out, ",gamma_{g}");
        }
        out.push_str(",direction,train_loss");
        for d in &self.directions {
            let _ = write!(out, ",val_{d}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{}", r.step, r.lr);
            for g in &r.gammas {
                let _ = write!(out, ",{g}");
            }
            let _ = write!(out, ",{},{}", r.direction, r.train_loss);
            match &r.val {
                Some(v) => v.iter().for_each(|x| {
                    let _ = write!(out, ",{x}");
                }),
                None => self.directions.iter().for_each(|_| out.push(',')),
            }
            out.push('\n');
        }
        out
    }

    pub fn first_step(&self) -> Option<u64> {
        self.rows.first().map(|r| r.step)
    }
}

/// Mean eval-mode loss over a direction's dev examples.
pub fn dev_loss(
    params: &NamedParams,
    config: &model::ModelConfig,
    examples: &[Example],
    epsilon: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in examples.chunks(64) {
        let batch = Batch::from_examples(chunk);
        let mut tape = crate::autodiff::Tape::new();
        let bound = Bound::new(&mut tape, params);
        let (loss, n) = model::build_loss(&mut tape, &bound, config, &batch, epsilon, &mut Mode::Eval)?;
        total += tape.value(loss).data()[0] * n as f64;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

fn check_coverage(batch: &[Example], direction: &str) -> Result<()> {
    if batch
        .iter()
        .any(|e| e.src.contains(&UNK_ID) || e.tgt.contains(&UNK_ID))
    {
        return Err(Error::invalid(format!(
            "batch from `{direction}` contains tokens outside the model vocabulary"
        )));
    }
    Ok(())
}

/// Trains from `ckpt` and returns the best-validation checkpoint and the log.
///
/// The global step continues from `ckpt.step` unless `reset_scheduler` is set;
/// γ schedules are indexed by the step within this call, starting at 0.
pub fn train(
    ckpt: &Checkpoint,
    directions: &[TrainDirection],
    cfg: &TrainConfig,
    groups: &ParamGroups,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    groups.validate(&ckpt.params)?;
    if directions.is_empty() || directions.iter().any(|d| d.train.is_empty()) {
        return Err(Error::invalid("every direction needs training examples"));
    }
    let names: Vec<String> = directions.iter().map(|d| d.name.clone()).collect();
    if let Some(k) = cfg.alpha.keys().find(|k| !names.contains(k)) {
        return Err(Error::invalid(format!("α given for undeclared direction `{k}`")));
    }
    let sizes: Vec<usize> = directions.iter().map(|d| d.train.len()).collect();
    let alphas: Vec<f64> = names
        .iter()
        .map(|n| cfg.alpha.get(n).copied().unwrap_or(1.0))
        .collect();
    let probs = direction_probs(&sizes, &alphas, cfg.temperature)?;
    let picker = WeightedIndex::new(&probs).expect("positive weights");

    let mut sample_rng = seeding::stream(cfg.seed, "train/direction");
    let mut batch_rng = seeding::stream(cfg.seed, "train/batch");
    let mut dropout_rng = seeding::stream(cfg.seed, "train/dropout");

    let mut cur = ckpt.clone();
    if cfg.reset_scheduler {
        cur.step = 0;
    }
    let config = cur.config.clone();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut rows = Vec::with_capacity(cfg.total_steps as usize);

    let validate = |params: &NamedParams| -> Result<Vec<f64>> {
        directions
            .iter()
            .map(|d| dev_loss(params, &config, &d.dev, cfg.label_smoothing))
            .collect()
    };

    for i in 0..cfg.total_steps {
        let step = cur.step + 1;
        let lr = lr_at(step, cfg.peak_lr, cfg.warmup_steps)?;
        let d = picker.sample(&mut sample_rng);
        let examples = draw_batch(&directions[d].train, cfg.batch_tokens, &mut batch_rng);
        check_coverage(&examples, &directions[d].name)?;
        let batch = Batch::from_examples(&examples);

        let mut tape = crate::autodiff::Tape::new();
        let bound = Bound::new(&mut tape, &cur.params);
        let (loss, _) = model::build_loss(
            &mut tape,
            &bound,
            &config,
            &batch,
            cfg.label_smoothing,
            &mut Mode::Train(&mut dropout_rng),
        )?;
        let train_loss = tape.value(loss).data()[0];
        let mut g = tape.backward(loss);
        let mut grads: BTreeMap<String, Vec<f64>> = bound
            .iter()
            .map(|(n, &v)| {
                let len = cur.params.get(n).map_or(0, Tensor::numel);
                (n.clone(), g.take(v).unwrap_or_else(|| vec![0.0; len]))
            })
            .collect();
        drop(tape);
        check_finite(&grads)?;
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(&mut cur.params, &grads, &mut cur.moments, lr, groups, i)?;
        cur.step = step;

        let gammas = groups.groups.iter().map(|g| gamma_at(&g.gamma, i)).collect();
        let last = i + 1 == cfg.total_steps;
        let val = if (i + 1) % cfg.validate_every == 0 || last {
            let v = validate(&cur.params)?;
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            if best.as_ref().is_none_or(|(b, _)| mean < *b) {
                best = Some((mean, cur.clone()));
            }
            Some(v)
        } else {
            None
        };
        rows.push(LogRow {
            step,
            lr,
            gammas,
            direction: directions[d].name.clone(),
            train_loss,
            val,
        });
    }
    let (best_val, best_ckpt) = match best {
        Some(b) => b,
        None => (f64::NAN, cur),
    };
    let log = TrainLog {
        groups: groups.groups.iter().map(|g| g.name.clone()).collect(),
        directions: names,
        rows,
        best_step: best_ckpt.step,
        best_val,
    };
    Ok((best_ckpt, log))
}
