//! Experiment manifests, ablations, and the seed → grow → continual →
//! evaluate → probe pipeline, both in memory and as file-backed stages.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{self, DecodeOptions, EvalDirection, EvalReport};
use crate::model::{self, Example, ModelConfig};
use crate::probes::{self, FisherMap, ForgettingReport, NormDriftReport};
use crate::seeding::sha256_hex;
use crate::surgery::{
    self, DepthInit, DepthPlan, EmbeddingInit, GrowthPlan, InsertPosition, SurgeryReport,
    WidthInit, WidthPlan,
};
use crate::synth::{self, DirectionSpec, LanguageSpec, Lexicon, Reorder, Tier, ENGLISH};
use crate::train::{self, GammaSchedule, ParamGroups, TrainConfig, TrainDirection, TrainLog};
use crate::vocab::{self, overlap_map, Vocab};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the directory that manifest output paths are relative to.
pub const OUTPUT_ROOT_ENV: &str = "MTGROW_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub lexicon: Lexicon,
    /// Multiplier on the per-tier pair counts.
    pub tier_scale: f64,
    pub dev_pairs: usize,
    pub test_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabSettings {
    pub seed_size: usize,
    pub grown_size: usize,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSettings {
    pub embedding_init: EmbeddingInit,
    pub width: Option<WidthPlan>,
    pub depth: Option<DepthPlan>,
    /// Replace every grown weight with a fresh initialization.
    #[serde(default)]
    pub random_init_all: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrScaling {
    /// Old and new groups come from the surgery provenance.
    Surgery,
    /// Elements whose Fisher information on old directions exceeds the
    /// threshold get `gamma_old`; all others learn at the base rate.
    Fisher { threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinualSettings {
    pub train: TrainConfig,
    pub gamma_old: GammaSchedule,
    pub gamma_new: GammaSchedule,
    pub scaling: LrScaling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub beam: usize,
    pub length_penalty: f64,
    pub extra_len: usize,
}

impl EvalSettings {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            length_penalty: self.length_penalty,
            extra_len: self.extra_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub master_seed: u64,
    pub old_languages: Vec<LanguageSpec>,
    pub new_languages: Vec<LanguageSpec>,
    pub data: DataSettings,
    pub vocab: VocabSettings,
    /// `vocab_size` is replaced by the size of the built seed vocabulary.
    pub seed_model: ModelConfig,
    pub seed_train: TrainConfig,
    pub growth: GrowthSettings,
    pub continual: ContinualSettings,
    pub eval: EvalSettings,
    /// Relative paths resolve against the output root.
    pub output_dir: String,
}

fn lang(code: &str, script: &str, cipher: &str, reorder: Reorder, tier: Tier) -> LanguageSpec {
    LanguageSpec {
        code: code.into(),
        script: script.into(),
        cipher_seed: cipher.into(),
        reorder,
        tier,
    }
}

impl Default for ExperimentManifest {
    /// Eight old languages in two scripts and three low-resource additions,
    /// two of them in scripts the seed model has never seen.
    fn default() -> Self {
        use Reorder::*;
        use Tier::*;
        let old_languages = vec![
            lang("fra", "lat", "romance:fra", SwapAdjacent, High),
            lang("rus", "cyr", "slavic:rus", None, High),
            lang("spa", "lat", "romance:spa", SwapAdjacent, Mid),
            lang("ukr", "cyr", "slavic:ukr", None, Mid),
            lang("zul", "lat", "nguni:zul", ReverseWindow(3), Low),
            lang("mar", "cyr", "indic:mar", ReverseWindow(2), Low),
            lang("som", "lat", "cushitic:som", ReverseWindow(4), Low),
            lang("tat", "cyr", "turkic:tat", SwapAdjacent, VLow),
        ];
        let new_languages = vec![
            lang("xho", "lat", "nguni:xho", ReverseWindow(3), Low),
            lang("guj", "guj", "indic:guj", ReverseWindow(2), Low),
            lang("kat", "geo", "kartvelian:kat", None, VLow),
        ];
        let up: BTreeMap<String, f64> = ["xho", "guj", "kat", "zul", "mar"]
            .iter()
            .flat_map(|l| [synth::direction_name(ENGLISH, l), synth::direction_name(l, ENGLISH)])
            .map(|d| (d, 5.0))
            .collect();
        ExperimentManifest {
            name: "desk".into(),
            master_seed: 20,
            old_languages,
            new_languages,
            data: DataSettings {
                lexicon: Lexicon::default(),
                tier_scale: 0.25,
                dev_pairs: 24,
                test_pairs: 40,
            },
            vocab: VocabSettings {
                seed_size: 512,
                grown_size: 512,
                temperature: 2.0,
            },
            seed_model: ModelConfig::default(),
            seed_train: TrainConfig {
                peak_lr: 0.003,
                warmup_steps: 400,
                total_steps: 8000,
                batch_tokens: 320,
                temperature: 2.0,
                alpha: BTreeMap::new(),
                label_smoothing: 0.1,
                seed: 1,
                validate_every: 500,
                reset_scheduler: false,
                clip_norm: Some(1.0),
            },
            growth: GrowthSettings {
                embedding_init: EmbeddingInit::UnkCopy,
                width: Some(WidthPlan {
                    factor: 2,
                    init: WidthInit::ConcatNoise,
                    noise_std: 0.01,
                    norm_mode: surgery::NormMode::FrobeniusMatch,
                }),
                depth: Option::None,
                random_init_all: false,
            },
            continual: ContinualSettings {
                train: TrainConfig {
                    peak_lr: 0.003,
                    warmup_steps: 400,
                    total_steps: 1500,
                    batch_tokens: 320,
                    temperature: 2.0,
                    alpha: up,
                    label_smoothing: 0.1,
                    seed: 2,
                    validate_every: 500,
                    reset_scheduler: false,
                    clip_norm: Some(1.0),
                },
                gamma_old: GammaSchedule::constant(0.5),
                gamma_new: GammaSchedule::constant(5.0),
                scaling: LrScaling::Surgery,
            },
            eval: EvalSettings {
                beam: 4,
                length_penalty: 1.0,
                extra_len: 4,
            },
            output_dir: "runs/desk".into(),
        }
    }
}

fn manifest_err(path: &str, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.into(),
        message: message.into(),
    }
}

/// Deserializes with the failing field's dotted path in the error.
fn from_value_at<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        manifest_err(&path, e.into_inner().to_string())
    })
}

impl ExperimentManifest {
    /// The default languages at a size that runs end to end in seconds.
    pub fn smoke() -> Self {
        let mut m = ExperimentManifest::default();
        m.name = "smoke".into();
        m.data.tier_scale = 0.01;
        m.data.lexicon.size = 30;
        m.data.dev_pairs = 3;
        m.data.test_pairs = 3;
        m.vocab.seed_size = 160;
        m.vocab.grown_size = 200;
        m.seed_model = ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            model_dim: 8,
            ffn_hidden_dim: 12,
            heads: 2,
            max_positions: 40,
            ..ModelConfig::default()
        };
        for t in [&mut m.seed_train, &mut m.continual.train] {
            t.total_steps = 6;
            t.warmup_steps = 3;
            t.validate_every = 3;
            t.batch_tokens = 40;
        }
        m.eval.beam = 2;
        m.output_dir = "runs/smoke".into();
        m
    }

    pub fn languages(&self) -> impl Iterator<Item = (&LanguageSpec, bool)> {
        self.old_languages
            .iter()
            .map(|l| (l, false))
            .chain(self.new_languages.iter().map(|l| (l, true)))
    }

    /// Both English-centric direction names of every language.
    pub fn direction_names(&self) -> Vec<String> {
        self.languages()
            .flat_map(|(l, _)| {
                [
                    synth::direction_name(ENGLISH, &l.code),
                    synth::direction_name(&l.code, ENGLISH),
                ]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, (l, new)) in self.languages().enumerate() {
            let field = if new {
                format!("new_languages.{}", i - self.old_languages.len())
            } else {
                format!("old_languages.{i}")
            };
            if l.code == ENGLISH {
                return Err(manifest_err(&format!("{field}.code"), "English is the pivot, not a language entry"));
            }
            if !seen.insert(l.code.as_str()) {
                return Err(manifest_err(
                    &format!("{field}.code"),
                    format!("`{}` appears twice; old and new splits must be disjoint", l.code),
                ));
            }
            if l.code.contains(['-', '\t', ' ', '/']) {
                return Err(manifest_err(&format!("{field}.code"), "code may not contain '-', '/', tab or space"));
            }
        }
        if self.old_languages.is_empty() {
            return Err(manifest_err("old_languages", "at least one old language is required"));
        }
        let names: BTreeSet<String> = self.direction_names().into_iter().collect();
        for (field, cfg) in [("seed_train", &self.seed_train), ("continual.train", &self.continual.train)] {
            cfg.validate().map_err(|e| manifest_err(field, e.to_string()))?;
            if let Some(k) = cfg.alpha.keys().find(|k| !names.contains(*k)) {
                return Err(manifest_err(
                    &format!("{field}.alpha.{k}"),
                    "α key does not name a declared direction",
                ));
            }
        }
        let old_names: BTreeSet<String> = self
            .old_languages
            .iter()
            .flat_map(|l| [synth::direction_name(ENGLISH, &l.code), synth::direction_name(&l.code, ENGLISH)])
            .collect();
        if let Some(k) = self.seed_train.alpha.keys().find(|k| !old_names.contains(*k)) {
            return Err(manifest_err(&format!("seed_train.alpha.{k}"), "seed training only sees old directions"));
        }
        if !(self.data.tier_scale > 0.0) {
            return Err(manifest_err("data.tier_scale", "must be positive"));
        }
        if self.data.dev_pairs == 0 || self.data.test_pairs == 0 {
            return Err(manifest_err("data", "dev_pairs and test_pairs must be at least 1"));
        }
        if self.data.lexicon.size < 2 {
            return Err(manifest_err("data.lexicon.size", "must be at least 2"));
        }
        if !(self.vocab.temperature >= 1.0) {
            return Err(manifest_err("vocab.temperature", "must be >= 1"));
        }
        let mut probe = self.seed_model.clone();
        probe.vocab_size = probe.vocab_size.max(5);
        probe.validate().map_err(|e| manifest_err("seed_model", e.to_string()))?;
        if let Some(w) = &self.growth.width {
            if w.factor == 0 {
                return Err(manifest_err("growth.width.factor", "must be at least 1"));
            }
            if !(w.noise_std >= 0.0 && w.noise_std.is_finite()) {
                return Err(manifest_err("growth.width.noise_std", "must be finite and >= 0"));
            }
        }
        for (field, g) in [("continual.gamma_old", &self.continual.gamma_old), ("continual.gamma_new", &self.continual.gamma_new)] {
            if !(g.start > 0.0 && g.end > 0.0) {
                return Err(manifest_err(field, "γ must be positive"));
            }
        }
        if let LrScaling::Fisher { threshold } = self.continual.scaling {
            if !(threshold >= 0.0) {
                return Err(manifest_err("continual.scaling.threshold", "must be >= 0"));
            }
        }
        if self.eval.beam == 0 {
            return Err(manifest_err("eval.beam", "must be at least 1"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| manifest_err("", e.to_string()))?;
        let m: Self = from_value_at(value)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// sha256 of the compact JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    /// Sets the leaf at `path` (dot-separated keys or array indices). `raw`
    /// is parsed as JSON, falling back to a plain string.
    pub fn with_override(&self, path: &str, raw: &str) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(manifest_err(path, "empty path component"));
        }
        let mut cur = &mut root;
        for (depth, key) in keys.iter().enumerate() {
            let last = depth + 1 == keys.len();
            let here = keys[..=depth].join(".");
            cur = match cur {
                Value::Object(map) => {
                    if last {
                        map.insert(key.to_string(), value);
                        break;
                    }
                    map.get_mut(*key).ok_or_else(|| manifest_err(&here, "no such field"))?
                }
                Value::Array(items) => {
                    let i: usize = key.parse().map_err(|_| manifest_err(&here, "expected an array index"))?;
                    let len = items.len();
                    let slot = items
                        .get_mut(i)
                        .ok_or_else(|| manifest_err(&here, format!("index out of range for length {len}")))?;
                    if last {
                        *slot = value;
                        break;
                    }
                    slot
                }
                _ => return Err(manifest_err(&here, "cannot descend into a scalar")),
            };
        }
        let m: Self = from_value_at(root)?;
        m.validate()?;
        Ok(m)
    }

    pub fn output_path(&self, root: &Path) -> PathBuf {
        root.join(&self.output_dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    RandomInitAll,
    RandomInitNew,
    NoUpsampling,
    NoLrScaling,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [
        AblationAxis::RandomInitAll,
        AblationAxis::RandomInitNew,
        AblationAxis::NoUpsampling,
        AblationAxis::NoLrScaling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::RandomInitAll => "random_init_all",
            AblationAxis::RandomInitNew => "random_init_new",
            AblationAxis::NoUpsampling => "no_upsampling",
            AblationAxis::NoLrScaling => "no_lr_scaling",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation axis `{s}`")))
    }
}

/// The base manifest with exactly one recipe element switched off.
pub fn ablation(base: &ExperimentManifest, axis: AblationAxis) -> Result<ExperimentManifest> {
    base.validate()?;
    let mut m = base.clone();
    match axis {
        AblationAxis::RandomInitAll => m.growth.random_init_all = true,
        AblationAxis::RandomInitNew => {
            m.growth.embedding_init = EmbeddingInit::RandomNew;
            if let Some(w) = &mut m.growth.width {
                w.init = WidthInit::RandomExpand;
            }
            if let Some(d) = &mut m.growth.depth {
                d.init = DepthInit::Random;
            }
        }
        AblationAxis::NoUpsampling => {
            m.continual.train.alpha.values_mut().for_each(|a| *a = 1.0);
        }
        AblationAxis::NoLrScaling => {
            m.continual.gamma_old = GammaSchedule::constant(1.0);
            m.continual.gamma_new = GammaSchedule::constant(1.0);
        }
    }
    m.name = format!("{}+{}", base.name, axis.as_str());
    m.output_dir = format!("{}/{}", base.output_dir, axis.as_str());
    Ok(m)
}

/// Train, dev and test pairs of one direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionData {
    pub spec: DirectionSpec,
    pub added: bool,
    pub dev: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

impl DirectionData {
    pub fn name(&self) -> String {
        self.spec.name()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub directions: Vec<DirectionData>,
}

impl Corpus {
    pub fn old(&self) -> impl Iterator<Item = &DirectionData> {
        self.directions.iter().filter(|d| !d.added)
    }

    fn specs<'a>(dirs: impl Iterator<Item = &'a DirectionData>) -> Vec<DirectionSpec> {
        dirs.map(|d| d.spec.clone()).collect()
    }
}

/// Synthetic corpora for every declared language.
pub fn generate_corpus(m: &ExperimentManifest) -> Result<Corpus> {
    let lex = &m.data.lexicon;
    let mut directions = Vec::new();
    for (spec, added) in m.languages() {
        let n = synth::tier_size(spec.tier, m.data.tier_scale);
        let (fwd, back) = synth::gen_corpus(spec, lex, n, m.master_seed)?;
        let seen: HashSet<Vec<usize>> = synth::latent_sentences(&spec.code, "train", n, lex, m.master_seed)
            .into_iter()
            .collect();
        let (dev_f, dev_b) = synth::gen_heldout(spec, lex, "dev", m.data.dev_pairs, m.master_seed, &seen)?;
        let mut seen_dev = seen;
        for (a, _) in &dev_f.pairs {
            seen_dev.insert(synth::unrender(&LanguageSpec::english(), &identity(lex.size), a)?);
        }
        let (test_f, test_b) = synth::gen_heldout(spec, lex, "test", m.data.test_pairs, m.master_seed, &seen_dev)?;
        for (train, dev, test) in [(fwd, dev_f, test_f), (back, dev_b, test_b)] {
            directions.push(DirectionData {
                spec: train,
                added,
                dev: dev.pairs,
                test: test.pairs,
            });
        }
    }
    Ok(Corpus { directions })
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Seed vocabulary from old directions, grown vocabulary from all of them.
pub fn build_vocabs(m: &ExperimentManifest, corpus: &Corpus) -> Result<(Vocab, Vocab)> {
    let old = vocab::build_vocab(
        &synth::language_counts(&Corpus::specs(corpus.old())),
        m.vocab.seed_size,
        m.vocab.temperature,
    )?;
    let all = vocab::build_vocab(
        &synth::language_counts(&Corpus::specs(corpus.directions.iter())),
        m.vocab.grown_size,
        m.vocab.temperature,
    )?;
    Ok((old, all))
}

fn train_directions<'a>(
    vocab: &Vocab,
    dirs: impl Iterator<Item = &'a DirectionData>,
) -> Result<Vec<TrainDirection>> {
    dirs.map(|d| TrainDirection::encode(vocab, &d.spec, &d.dev)).collect()
}

pub fn seed_init(m: &ExperimentManifest, seed_vocab: &Vocab) -> Result<Checkpoint> {
    let mut config = m.seed_model.clone();
    config.vocab_size = seed_vocab.len();
    let params = model::init_model(&config, m.master_seed)?;
    Ok(Checkpoint::new(config, seed_vocab.clone(), params))
}

/// Trains the seed model on the old directions.
pub fn train_seed(m: &ExperimentManifest, corpus: &Corpus, seed_vocab: &Vocab) -> Result<(Checkpoint, TrainLog)> {
    let init = seed_init(m, seed_vocab)?;
    let dirs = train_directions(seed_vocab, corpus.old())?;
    let groups = ParamGroups::single(&init.params, "all", GammaSchedule::constant(1.0));
    train::train(&init, &dirs, &m.seed_train, &groups)
}

pub fn growth_plan(m: &ExperimentManifest, grown_vocab: &Vocab) -> GrowthPlan {
    GrowthPlan {
        target_vocab: grown_vocab.clone(),
        embedding_init: m.growth.embedding_init,
        width: m.growth.width.unwrap_or_default(),
        depth: m.growth.depth.unwrap_or_default(),
        seed: m.master_seed,
    }
}

/// Applies the manifest's growth, or a fresh initialization at the grown
/// architecture for the random-init-all ablation.
pub fn grow_seed(m: &ExperimentManifest, seed: &Checkpoint, grown_vocab: &Vocab) -> Result<(Checkpoint, SurgeryReport)> {
    let (grown, report) = surgery::grow(seed, &growth_plan(m, grown_vocab))?;
    if m.growth.random_init_all {
        surgery::reinitialize(&grown, &report, m.master_seed ^ 0x5eed)
    } else {
        Ok((grown, report))
    }
}

/// Dev examples of the old directions, one batch per direction.
pub fn old_dev_batches(corpus: &Corpus, vocab: &Vocab) -> Result<Vec<Vec<Example>>> {
    Ok(train_directions(vocab, corpus.old())?.into_iter().map(|d| d.dev).collect())
}

pub fn fisher_map(corpus: &Corpus, grown: &Checkpoint) -> Result<FisherMap> {
    probes::fisher(grown, &old_dev_batches(corpus, &grown.vocab)?)
}

pub fn continual_groups(
    m: &ExperimentManifest,
    grown: &Checkpoint,
    report: &SurgeryReport,
    fisher: Option<&FisherMap>,
) -> Result<ParamGroups> {
    let c = &m.continual;
    let groups = match (c.scaling, fisher) {
        (LrScaling::Surgery, _) => ParamGroups::from_report(report, c.gamma_old, c.gamma_new),
        (LrScaling::Fisher { threshold }, Some(f)) => {
            let mut g = probes::fisher_groups(f, threshold, 1.0)?;
            g.set_gamma(0, c.gamma_new);
            g.set_gamma(1, c.gamma_old);
            g
        }
        (LrScaling::Fisher { .. }, None) => {
            return Err(Error::invalid("Fisher scaling needs a Fisher map"));
        }
    };
    groups.validate(&grown.params)?;
    Ok(groups)
}

pub fn train_continual(
    m: &ExperimentManifest,
    corpus: &Corpus,
    grown: &Checkpoint,
    groups: &ParamGroups,
) -> Result<(Checkpoint, TrainLog)> {
    let dirs = train_directions(&grown.vocab, corpus.directions.iter())?;
    train::train(grown, &dirs, &m.continual.train, groups)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalScope {
    All,
    Old,
}

pub fn eval_directions(corpus: &Corpus, scope: EvalScope) -> Vec<EvalDirection> {
    corpus
        .directions
        .iter()
        .filter(|d| scope == EvalScope::All || !d.added)
        .map(|d| EvalDirection {
            source: d.spec.source.clone(),
            target: d.spec.target.clone(),
            tier: d.spec.tier,
            added: d.added,
            pairs: d.test.clone(),
        })
        .collect()
}

pub fn evaluate(
    m: &ExperimentManifest,
    corpus: &Corpus,
    ckpt: &Checkpoint,
    id: &str,
    scope: EvalScope,
) -> Result<EvalReport> {
    metrics::evaluate(ckpt, id, &eval_directions(corpus, scope), &m.eval.decode_options())
}

/// Seed-model score drop on old directions after substituting the
/// continually trained embeddings.
pub fn forgetting_probe(
    m: &ExperimentManifest,
    corpus: &Corpus,
    seed: &Checkpoint,
    seed_eval: &EvalReport,
    continual: &Checkpoint,
) -> Result<(ForgettingReport, EvalReport)> {
    let mapping = overlap_map(&seed.vocab, &continual.vocab);
    let substituted = probes::substitute_embeddings(seed, continual, &mapping)?;
    let sub_eval = evaluate(m, corpus, &substituted, "substituted", EvalScope::Old)?;
    Ok((probes::forgetting_drop(seed_eval, &sub_eval)?, sub_eval))
}

/// Everything one end-to-end run produces.
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub grown: Checkpoint,
    pub report: SurgeryReport,
    pub continual: Checkpoint,
    pub log: TrainLog,
    pub eval: EvalReport,
}

/// Grows `seed`, trains continually and evaluates on every direction.
pub fn run_continual(
    m: &ExperimentManifest,
    corpus: &Corpus,
    seed: &Checkpoint,
    grown_vocab: &Vocab,
) -> Result<RunOutputs> {
    let (grown, report) = grow_seed(m, seed, grown_vocab)?;
    let fisher = match m.continual.scaling {
        LrScaling::Fisher { .. } => Some(fisher_map(corpus, &grown)?),
        LrScaling::Surgery => None,
    };
    let groups = continual_groups(m, &grown, &report, fisher.as_ref())?;
    let (continual, log) = train_continual(m, corpus, &grown, &groups)?;
    let eval = evaluate(m, corpus, &continual, "continual", EvalScope::All)?;
    Ok(RunOutputs {
        grown,
        report,
        continual,
        log,
        eval,
    })
}

/// A model with the grown architecture trained from scratch on every
/// direction with the seed-phase recipe for `total_steps` updates.
pub fn train_baseline(
    m: &ExperimentManifest,
    corpus: &Corpus,
    seed: &Checkpoint,
    grown_vocab: &Vocab,
    total_steps: u64,
) -> Result<(Checkpoint, TrainLog, EvalReport)> {
    if total_steps == 0 {
        return Err(Error::invalid("baseline needs at least one update"));
    }
    let (grown, report) = grow_seed(m, seed, grown_vocab)?;
    let (init, _) = surgery::reinitialize(&grown, &report, m.master_seed ^ 0xba5e)?;
    let cfg = TrainConfig {
        total_steps,
        ..m.seed_train.clone()
    };
    let groups = ParamGroups::single(&init.params, "all", GammaSchedule::constant(1.0));
    let dirs = train_directions(&init.vocab, corpus.directions.iter())?;
    let (ckpt, log) = train::train(&init, &dirs, &cfg, &groups)?;
    let eval = evaluate(m, corpus, &ckpt, "baseline", EvalScope::All)?;
    Ok((ckpt, log, eval))
}

/// All / Orig. / Added for two reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub subset: String,
    pub baseline_bleu: Option<f64>,
    pub candidate_bleu: Option<f64>,
    pub baseline_chrf: Option<f64>,
    pub candidate_chrf: Option<f64>,
}

pub fn compare(baseline: &EvalReport, candidate: &EvalReport) -> Comparison {
    let rows = [("All", &baseline.all, &candidate.all), ("Orig.", &baseline.orig, &candidate.orig), ("Added", &baseline.added, &candidate.added)]
        .into_iter()
        .map(|(subset, b, c)| ComparisonRow {
            subset: subset.to_string(),
            baseline_bleu: b.map(|a| a.bleu),
            candidate_bleu: c.map(|a| a.bleu),
            baseline_chrf: b.map(|a| a.chrf),
            candidate_chrf: c.map(|a| a.chrf),
        })
        .collect();
    Comparison { rows }
}

impl Comparison {
    pub fn to_table(&self, baseline: &str, candidate: &str) -> String {
        let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut out = format!(
            "{:<8} {:>12} {:>12} {:>12} {:>12}\n",
            "", format!("{baseline} BLEU"), format!("{candidate} BLEU"), "chrF++ (b)", "chrF++ (c)"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>12} {:>12} {:>12} {:>12}\n",
                r.subset,
                f(r.baseline_bleu),
                f(r.candidate_bleu),
                f(r.baseline_chrf),
                f(r.candidate_chrf)
            ));
        }
        out
    }
}

/// Written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub manifest_hash: String,
    pub master_seed: u64,
    pub code_version: String,
    /// Relative path → sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
}

/// A manifest bound to its output directory; each method is one pipeline stage.
pub struct Workspace {
    pub manifest: ExperimentManifest,
    pub dir: PathBuf,
    hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenData,
    TrainSeed,
    Grow,
    Fisher,
    TrainContinual,
}

impl Stage {
    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenData => "data",
            Stage::TrainSeed => "seed",
            Stage::Grow => "grown",
            Stage::Fisher => "fisher",
            Stage::TrainContinual => "continual",
        }
    }

    pub fn command(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainSeed => "train-seed",
            Stage::Grow => "grow",
            Stage::Fisher => "fisher",
            Stage::TrainContinual => "train-continual",
        }
    }
}

/// Checkpoints that `evaluate` can score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Seed,
    Grown,
    Continual,
}

impl EvalTarget {
    fn stage(self) -> Stage {
        match self {
            EvalTarget::Seed => Stage::TrainSeed,
            EvalTarget::Grown => Stage::Grow,
            EvalTarget::Continual => Stage::TrainContinual,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalTarget::Seed => "seed",
            EvalTarget::Grown => "grown",
            EvalTarget::Continual => "continual",
        }
    }
}

/// Named growth presets for the `grow` stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowPreset {
    Manifest,
    VocabOnly,
    Wide,
    Deep,
}

impl std::str::FromStr for GrowPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "manifest" => GrowPreset::Manifest,
            "vocab" => GrowPreset::VocabOnly,
            "wide" => GrowPreset::Wide,
            "deep" => GrowPreset::Deep,
            _ => return Err(Error::invalid(format!("unknown growth plan `{s}`"))),
        })
    }
}

impl GrowPreset {
    pub fn apply(self, m: &ExperimentManifest) -> ExperimentManifest {
        let mut m = m.clone();
        match self {
            GrowPreset::Manifest => {}
            GrowPreset::VocabOnly => {
                m.growth.width = None;
                m.growth.depth = None;
            }
            GrowPreset::Wide => {
                let mut w = m.growth.width.unwrap_or_default();
                w.factor = 2;
                m.growth.width = Some(w);
                m.growth.depth = None;
            }
            GrowPreset::Deep => {
                m.growth.width = None;
                m.growth.depth = Some(DepthPlan {
                    enc_count: 2,
                    dec_count: 2,
                    enc_position: InsertPosition::Bottom,
                    dec_position: InsertPosition::Top,
                    init: DepthInit::AverageLayer,
                });
            }
        }
        m
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Workspace {
    pub fn new(manifest: ExperimentManifest, root: &Path) -> Result<Self> {
        manifest.validate()?;
        let dir = manifest.output_path(root);
        let hash = manifest.hash();
        Ok(Workspace { manifest, dir, hash })
    }

    pub fn manifest_hash(&self) -> &str {
        &self.hash
    }

    fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.dir.join(stage.dir())
    }

    fn stamp_path(&self, stage_dir: &str) -> PathBuf {
        self.dir.join(stage_dir).join("stamp.json")
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.dir).unwrap_or(path).display().to_string()
    }

    /// Loads and checks an upstream stage's stamp.
    pub fn require(&self, stage: Stage) -> Result<Stamp> {
        let path = self.stamp_path(stage.dir());
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: stage.command(),
            });
        }
        let stamp: Stamp = serde_json::from_slice(&read_file(&path)?)?;
        if stamp.manifest_hash != self.hash {
            return Err(Error::ProvenanceMismatch(format!(
                "{} was produced under manifest {} but the current manifest is {}",
                self.rel(&path),
                stamp.manifest_hash,
                self.hash
            )));
        }
        Ok(stamp)
    }

    /// Reads an upstream output, verifying it against the upstream stamp.
    fn read_input(&self, stage: Stage, name: &str, inputs: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
        let stamp = self.require(stage)?;
        let path = self.stage_dir(stage).join(name);
        let rel = self.rel(&path);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                stage: stage.command(),
            });
        }
        let bytes = read_file(&path)?;
        let hash = sha256_hex(&bytes);
        match stamp.outputs.get(&rel) {
            Some(h) if *h == hash => {}
            _ => {
                return Err(Error::ProvenanceMismatch(format!(
                    "{rel} does not match the stamp of `{}`",
                    stage.command()
                )))
            }
        }
        inputs.insert(rel, hash);
        Ok(bytes)
    }

    fn load_checkpoint(&self, stage: Stage, inputs: &mut BTreeMap<String, String>) -> Result<Checkpoint> {
        let bytes = self.read_input(stage, "checkpoint.bin", inputs)?;
        Checkpoint::from_bytes(&bytes)
    }

    fn commit(
        &self,
        stage_dir: &str,
        stage: &str,
        inputs: BTreeMap<String, String>,
        files: Vec<(String, Vec<u8>)>,
    ) -> Result<Stamp> {
        let mut outputs = BTreeMap::new();
        for (name, bytes) in files {
            let path = self.dir.join(stage_dir).join(&name);
            write_file(&path, &bytes)?;
            outputs.insert(self.rel(&path), sha256_hex(&bytes));
        }
        let stamp = Stamp {
            stage: stage.to_string(),
            manifest_hash: self.hash.clone(),
            master_seed: self.manifest.master_seed,
            code_version: CODE_VERSION.to_string(),
            inputs,
            outputs,
        };
        write_file(&self.stamp_path(stage_dir), serde_json::to_string_pretty(&stamp)?.as_bytes())?;
        Ok(stamp)
    }

    pub fn gen_data(&self) -> Result<Stamp> {
        let corpus = generate_corpus(&self.manifest)?;
        let (seed_vocab, grown_vocab) = build_vocabs(&self.manifest, &corpus)?;
        let mut files = vec![
            ("manifest.json".to_string(), self.manifest.to_json()?.into_bytes()),
            ("seed_vocab.json".to_string(), serde_json::to_vec_pretty(&seed_vocab)?),
            ("grown_vocab.json".to_string(), serde_json::to_vec_pretty(&grown_vocab)?),
        ];
        for d in &corpus.directions {
            for (split, pairs) in [("train", &d.spec.pairs), ("dev", &d.dev), ("test", &d.test)] {
                let mut buf = String::new();
                for (a, b) in pairs.iter() {
                    buf.push_str(a);
                    buf.push('\t');
                    buf.push_str(b);
                    buf.push('\n');
                }
                files.push((format!("{}/{split}.tsv", d.name()), buf.into_bytes()));
            }
        }
        self.commit(Stage::GenData.dir(), Stage::GenData.command(), BTreeMap::new(), files)
    }

    fn load_pairs(&self, name: &str, inputs: &mut BTreeMap<String, String>) -> Result<Vec<(String, String)>> {
        let bytes = self.read_input(Stage::GenData, name, inputs)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::invalid(format!("{name}: {e}")))?;
        text.lines()
            .map(|l| {
                l.split_once('\t')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::invalid(format!("{name}: line without tab")))
            })
            .collect()
    }

    /// Reads the corpus and both vocabularies written by `gen-data`.
    pub fn load_data(&self, inputs: &mut BTreeMap<String, String>) -> Result<(Corpus, Vocab, Vocab)> {
        let mut directions = Vec::new();
        for (spec, added) in self.manifest.languages() {
            for (source, target) in [(ENGLISH, spec.code.as_str()), (spec.code.as_str(), ENGLISH)] {
                let name = synth::direction_name(source, target);
                let pairs = self.load_pairs(&format!("{name}/train.tsv"), inputs)?;
                let dev = self.load_pairs(&format!("{name}/dev.tsv"), inputs)?;
                let test = self.load_pairs(&format!("{name}/test.tsv"), inputs)?;
                directions.push(DirectionData {
                    spec: DirectionSpec {
                        source: source.to_string(),
                        target: target.to_string(),
                        size: pairs.len(),
                        pairs,
                        tier: spec.tier,
                        alpha: 1.0,
                    },
                    added,
                    dev,
                    test,
                });
            }
        }
        let seed_vocab: Vocab = serde_json::from_slice(&self.read_input(Stage::GenData, "seed_vocab.json", inputs)?)?;
        let grown_vocab: Vocab = serde_json::from_slice(&self.read_input(Stage::GenData, "grown_vocab.json", inputs)?)?;
        Ok((Corpus { directions }, seed_vocab, grown_vocab))
    }

    pub fn train_seed(&self) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (corpus, seed_vocab, _) = self.load_data(&mut inputs)?;
        let (ckpt, log) = train_seed(&self.manifest, &corpus, &seed_vocab)?;
        self.commit(
            Stage::TrainSeed.dir(),
            Stage::TrainSeed.command(),
            inputs,
            vec![
                ("checkpoint.bin".into(), ckpt.to_bytes()?),
                ("train_log.csv".into(), log.to_csv().into_bytes()),
            ],
        )
    }

    pub fn grow(&self, preset: GrowPreset) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (_, _, grown_vocab) = self.load_data(&mut inputs)?;
        let seed = self.load_checkpoint(Stage::TrainSeed, &mut inputs)?;
        let m = preset.apply(&self.manifest);
        let (grown, report) = grow_seed(&m, &seed, &grown_vocab)?;
        self.commit(
            Stage::Grow.dir(),
            Stage::Grow.command(),
            inputs,
            vec![
                ("checkpoint.bin".into(), grown.to_bytes()?),
                ("surgery.json".into(), report.to_json()?.into_bytes()),
            ],
        )
    }

    fn load_report(&self, inputs: &mut BTreeMap<String, String>) -> Result<SurgeryReport> {
        let bytes = self.read_input(Stage::Grow, "surgery.json", inputs)?;
        SurgeryReport::from_json(&String::from_utf8_lossy(&bytes))
    }

    /// Fisher information of the grown model on old-direction dev data. The
    /// map is stored in the checkpoint container, one tensor per parameter.
    pub fn fisher(&self) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (corpus, _, _) = self.load_data(&mut inputs)?;
        let grown = self.load_checkpoint(Stage::Grow, &mut inputs)?;
        let map = fisher_map(&corpus, &grown)?;
        let summary = serde_json::json!({
            "tokens": map.tokens,
            "max": map.max(),
            "tensors": map.summary(),
        });
        let mut holder = Checkpoint::new(grown.config.clone(), grown.vocab.clone(), map.values.clone().into_iter().collect());
        holder.step = map.tokens as u64;
        self.commit(
            Stage::Fisher.dir(),
            Stage::Fisher.command(),
            inputs,
            vec![
                ("fisher.bin".into(), holder.to_bytes()?),
                ("summary.json".into(), serde_json::to_vec_pretty(&summary)?),
            ],
        )
    }

    fn load_fisher(&self, inputs: &mut BTreeMap<String, String>) -> Result<FisherMap> {
        let holder = Checkpoint::from_bytes(&self.read_input(Stage::Fisher, "fisher.bin", inputs)?)?;
        Ok(FisherMap {
            tokens: holder.step as usize,
            values: holder.params.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        })
    }

    pub fn train_continual(&self) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (corpus, _, _) = self.load_data(&mut inputs)?;
        let grown = self.load_checkpoint(Stage::Grow, &mut inputs)?;
        let report = self.load_report(&mut inputs)?;
        let fisher = match self.manifest.continual.scaling {
            LrScaling::Fisher { .. } => Some(self.load_fisher(&mut inputs)?),
            LrScaling::Surgery => None,
        };
        let groups = continual_groups(&self.manifest, &grown, &report, fisher.as_ref())?;
        let (ckpt, log) = train_continual(&self.manifest, &corpus, &grown, &groups)?;
        self.commit(
            Stage::TrainContinual.dir(),
            Stage::TrainContinual.command(),
            inputs,
            vec![
                ("checkpoint.bin".into(), ckpt.to_bytes()?),
                ("train_log.csv".into(), log.to_csv().into_bytes()),
            ],
        )
    }

    pub fn evaluate(&self, target: EvalTarget) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (corpus, _, _) = self.load_data(&mut inputs)?;
        let ckpt = self.load_checkpoint(target.stage(), &mut inputs)?;
        let scope = match target {
            EvalTarget::Seed => EvalScope::Old,
            _ => EvalScope::All,
        };
        let report = evaluate(&self.manifest, &corpus, &ckpt, target.as_str(), scope)?;
        let dir = format!("eval/{}", target.as_str());
        self.commit(
            &dir,
            "evaluate",
            inputs,
            vec![
                ("report.json".into(), report.to_json()?.into_bytes()),
                ("report.csv".into(), report.to_csv().into_bytes()),
            ],
        )
    }

    pub fn load_eval(&self, target: EvalTarget) -> Result<EvalReport> {
        let path = self.dir.join("eval").join(target.as_str()).join("report.json");
        let stamp_path = self.stamp_path(&format!("eval/{}", target.as_str()));
        if !stamp_path.exists() || !path.exists() {
            return Err(Error::MissingArtifact { path, stage: "evaluate" });
        }
        let stamp: Stamp = serde_json::from_slice(&read_file(&stamp_path)?)?;
        if stamp.manifest_hash != self.hash {
            return Err(Error::ProvenanceMismatch(format!(
                "{} was produced under a different manifest",
                self.rel(&path)
            )));
        }
        EvalReport::from_json(&String::from_utf8_lossy(&read_file(&path)?))
    }

    pub fn probe_forget(&self) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let (corpus, _, _) = self.load_data(&mut inputs)?;
        let seed = self.load_checkpoint(Stage::TrainSeed, &mut inputs)?;
        let continual = self.load_checkpoint(Stage::TrainContinual, &mut inputs)?;
        let seed_eval = self.load_eval(EvalTarget::Seed)?;
        let (report, sub_eval) = forgetting_probe(&self.manifest, &corpus, &seed, &seed_eval, &continual)?;
        let mut csv = String::from("direction,tier,seed_bleu,substituted_bleu,drop\n");
        for d in &report.directions {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                d.direction, d.tier, d.seed_bleu, d.substituted_bleu, d.drop
            ));
        }
        self.commit(
            "probes/forget",
            "probe-forget",
            inputs,
            vec![
                ("forget.json".into(), serde_json::to_vec_pretty(&report)?),
                ("forget.csv".into(), csv.into_bytes()),
                ("substituted_eval.json".into(), sub_eval.to_json()?.into_bytes()),
            ],
        )
    }

    pub fn analyze_norms(&self) -> Result<Stamp> {
        let mut inputs = BTreeMap::new();
        let seed = self.load_checkpoint(Stage::TrainSeed, &mut inputs)?;
        let continual = self.load_checkpoint(Stage::TrainContinual, &mut inputs)?;
        let report = self.load_report(&mut inputs)?;
        let drift: NormDriftReport = probes::norm_drift(&seed, &continual, &report)?;
        self.commit(
            "probes/norms",
            "analyze-norms",
            inputs,
            vec![
                ("norm_drift.json".into(), serde_json::to_vec_pretty(&drift)?),
                ("norm_drift.csv".into(), drift.to_csv().into_bytes()),
            ],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_manifest_validates() {
        let m = ExperimentManifest::default();
        m.validate().unwrap();
        assert_eq!(m.old_languages.len(), 8);
        assert_eq!(m.new_languages.len(), 3);
    }

    #[test]
    fn override_reports_field_path() {
        let m = ExperimentManifest::default();
        let n = m.with_override("continual.train.total_steps", "7").unwrap();
        assert_eq!(n.continual.train.total_steps, 7);
        let err = m.with_override("continual.train.total_steps", "\"x\"").unwrap_err();
        assert!(matches!(err, Error::Manifest { ref path, .. } if path == "continual.train.total_steps"), "{err}");
        let err = m.with_override("growth.nonsense.x", "1").unwrap_err();
        assert!(matches!(err, Error::Manifest { ref path, .. } if path == "growth.nonsense"), "{err}");
    }

    #[test]
    fn unknown_alpha_key_rejected() {
        let m = ExperimentManifest::default();
        let err = m.with_override("continual.train.alpha.eng-xyz", "5").unwrap_err();
        assert!(matches!(err, Error::Manifest { ref path, .. } if path == "continual.train.alpha.eng-xyz"));
    }
}
