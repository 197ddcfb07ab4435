//! Synthetic English-centric parallel corpora.
//!
//! Every language renders sentences of a shared latent lexicon: English
//! spells latent word `w` as `lat_tok_w`; language X spells it as
//! `{script}_tok_{π_X(w)}` after reordering. `π_X` is a permutation derived
//! from the language's cipher seed `family:member`: all members of a family
//! share a base permutation and differ by a few member-specific swaps.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::vocab::TokenCounts;

pub const ENGLISH: &str = "eng";
pub const IDENTITY_CIPHER: &str = "identity";
pub const MIN_LEN: usize = 3;
pub const MAX_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    Mid,
    Low,
    VLow,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::High, Tier::Mid, Tier::Low, Tier::VLow];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::High => "high",
            Tier::Mid => "mid",
            Tier::Low => "low",
            Tier::VLow => "v_low",
        }
    }
}

/// Pairs per direction: 20000, 5000, 1000, 200 times `scale`, floored, at least 10.
pub fn tier_size(tier: Tier, scale: f64) -> usize {
    let base = match tier {
        Tier::High => 20000.0,
        Tier::Mid => 5000.0,
        Tier::Low => 1000.0,
        Tier::VLow => 200.0,
    };
    ((base * scale).floor() as usize).max(10)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reorder {
    None,
    SwapAdjacent,
    /// Reverses consecutive chunks of `k` tokens.
    ReverseWindow(usize),
}

impl Reorder {
    /// Every rule here is an involution, so this also inverts itself.
    pub fn apply<T: Clone>(self, tokens: &[T]) -> Vec<T> {
        let mut out = tokens.to_vec();
        match self {
            Reorder::None => {}
            Reorder::SwapAdjacent => out.chunks_mut(2).for_each(|c| c.reverse()),
            Reorder::ReverseWindow(k) => out.chunks_mut(k.max(1)).for_each(|c| c.reverse()),
        }
        out
    }

    pub fn invert<T: Clone>(self, tokens: &[T]) -> Vec<T> {
        self.apply(tokens)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub code: String,
    /// Surface prefix; languages share tokens iff they share a script.
    pub script: String,
    /// `identity`, or `family:member`.
    pub cipher_seed: String,
    pub reorder: Reorder,
    pub tier: Tier,
}

impl LanguageSpec {
    pub fn english() -> Self {
        LanguageSpec {
            code: ENGLISH.into(),
            script: "lat".into(),
            cipher_seed: IDENTITY_CIPHER.into(),
            reorder: Reorder::None,
            tier: Tier::High,
        }
    }

    pub fn family(&self) -> Option<&str> {
        self.cipher_seed.split_once(':').map(|(f, _)| f)
    }

    pub fn related(&self, other: &LanguageSpec) -> bool {
        self.code != other.code && self.family().is_some() && self.family() == other.family()
    }

    pub fn surface(&self, symbol: usize) -> String {
        format!("{}_tok_{symbol}", self.script)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lexicon {
    pub size: usize,
    /// Zipf exponent of word frequencies.
    pub zipf: f64,
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon {
            size: 100,
            zipf: 1.0,
        }
    }
}

/// Number of member-specific transpositions applied to a family permutation.
const MEMBER_SWAPS_PER_100: usize = 10;

/// `π[w]` is the surface symbol of latent word `w`.
pub fn cipher(spec: &LanguageSpec, lexicon_size: usize, seed: u64) -> Result<Vec<usize>> {
    let mut perm: Vec<usize> = (0..lexicon_size).collect();
    if spec.cipher_seed == IDENTITY_CIPHER {
        return Ok(perm);
    }
    let (family, member) = spec.cipher_seed.split_once(':').ok_or_else(|| {
        Error::invalid(format!(
            "cipher seed {:?} is neither `identity` nor `family:member`",
            spec.cipher_seed
        ))
    })?;
    perm.shuffle(&mut seeding::stream(seed, &format!("cipher/family/{family}")));
    let mut rng = seeding::stream(seed, &format!("cipher/member/{family}/{member}"));
    let swaps = (lexicon_size * MEMBER_SWAPS_PER_100).div_ceil(100);
    for _ in 0..swaps {
        let a = rng.random_range(0..lexicon_size);
        let b = rng.random_range(0..lexicon_size);
        perm.swap(a, b);
    }
    Ok(perm)
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Latent sentences for `code`'s `split`; lengths uniform in 3..=12, Zipf words.
pub fn latent_sentences(code: &str, split: &str, n: usize, lexicon: &Lexicon, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seeding::stream(seed, &format!("corpus/{code}/{split}"));
    let weights: Vec<f64> = (0..lexicon.size)
        .map(|i| 1.0 / ((i + 1) as f64).powf(lexicon.zipf))
        .collect();
    let words = WeightedIndex::new(&weights).expect("positive weights");
    (0..n)
        .map(|_| {
            let len = rng.random_range(MIN_LEN..=MAX_LEN);
            (0..len).map(|_| words.sample(&mut rng)).collect()
        })
        .collect()
}

/// Renders a latent sentence in `spec`'s language.
pub fn render(spec: &LanguageSpec, perm: &[usize], latent: &[usize]) -> String {
    let symbols: Vec<usize> = latent.iter().map(|&w| perm[w]).collect();
    spec.reorder
        .apply(&symbols)
        .into_iter()
        .map(|s| spec.surface(s))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Recovers the latent sentence from a rendering.
pub fn unrender(spec: &LanguageSpec, perm: &[usize], text: &str) -> Result<Vec<usize>> {
    let inv = invert_permutation(perm);
    let prefix = format!("{}_tok_", spec.script);
    let symbols = text
        .split_whitespace()
        .map(|t| {
            t.strip_prefix(&prefix)
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&s| s < inv.len())
                .ok_or_else(|| Error::invalid(format!("{t:?} is not a {} token", spec.code)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(spec.reorder.invert(&symbols).into_iter().map(|s| inv[s]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionSpec {
    pub source: String,
    pub target: String,
    pub pairs: Vec<(String, String)>,
    pub size: usize,
    pub tier: Tier,
    pub alpha: f64,
}

impl DirectionSpec {
    pub fn name(&self) -> String {
        direction_name(&self.source, &self.target)
    }

    /// The non-English side.
    pub fn language(&self) -> &str {
        if self.source == ENGLISH {
            &self.target
        } else {
            &self.source
        }
    }
}

pub fn direction_name(source: &str, target: &str) -> String {
    format!("{source}-{target}")
}

fn directions(spec: &LanguageSpec, eng: &[String], x: &[String]) -> (DirectionSpec, DirectionSpec) {
    let pairs: Vec<(String, String)> = eng.iter().cloned().zip(x.iter().cloned()).collect();
    let back: Vec<(String, String)> = pairs.iter().map(|(a, b)| (b.clone(), a.clone())).collect();
    let mk = |source: &str, target: &str, pairs: Vec<(String, String)>| DirectionSpec {
        source: source.to_string(),
        target: target.to_string(),
        size: pairs.len(),
        pairs,
        tier: spec.tier,
        alpha: 1.0,
    };
    (mk(ENGLISH, &spec.code, pairs), mk(&spec.code, ENGLISH, back))
}

/// Training corpus for `eng→X` and `X→eng` (the same pairs, swapped).
pub fn gen_corpus(
    spec: &LanguageSpec,
    lexicon: &Lexicon,
    n_pairs: usize,
    seed: u64,
) -> Result<(DirectionSpec, DirectionSpec)> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    let latent = latent_sentences(&spec.code, "train", n_pairs, lexicon, seed);
    render_directions(spec, lexicon, &latent, seed)
}

fn render_directions(
    spec: &LanguageSpec,
    lexicon: &Lexicon,
    latent: &[Vec<usize>],
    seed: u64,
) -> Result<(DirectionSpec, DirectionSpec)> {
    let eng_spec = LanguageSpec::english();
    let ident = cipher(&eng_spec, lexicon.size, seed)?;
    let perm = cipher(spec, lexicon.size, seed)?;
    let eng: Vec<String> = latent.iter().map(|s| render(&eng_spec, &ident, s)).collect();
    let x: Vec<String> = latent.iter().map(|s| render(spec, &perm, s)).collect();
    Ok(directions(spec, &eng, &x))
}

/// Held-out pairs whose latent sentences avoid `exclude` and each other.
pub fn gen_heldout(
    spec: &LanguageSpec,
    lexicon: &Lexicon,
    split: &str,
    n_pairs: usize,
    seed: u64,
    exclude: &HashSet<Vec<usize>>,
) -> Result<(DirectionSpec, DirectionSpec)> {
    let mut seen = exclude.clone();
    let mut chosen = Vec::with_capacity(n_pairs);
    let mut batch = 0;
    while chosen.len() < n_pairs {
        if batch > 64 {
            return Err(Error::invalid(format!(
                "could not draw {n_pairs} unseen {split} sentences for {}",
                spec.code
            )));
        }
        for s in latent_sentences(&spec.code, &format!("{split}/{batch}"), n_pairs, lexicon, seed) {
            if chosen.len() < n_pairs && seen.insert(s.clone()) {
                chosen.push(s);
            }
        }
        batch += 1;
    }
    render_directions(spec, lexicon, &chosen, seed)
}

/// Whitespace-token counts of one side of a corpus.
pub fn token_counts<'a>(texts: impl IntoIterator<Item = &'a str>) -> TokenCounts {
    let mut counts = TokenCounts::new();
    for t in texts {
        for tok in t.split_whitespace() {
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    counts
}

/// Every surface token used by either side of the given directions.
pub fn surface_tokens(dirs: &[DirectionSpec]) -> HashSet<String> {
    dirs.iter()
        .flat_map(|d| d.pairs.iter())
        .flat_map(|(a, b)| a.split_whitespace().chain(b.split_whitespace()))
        .map(str::to_string)
        .collect()
}

/// Per-language count tables over directions, for vocabulary building.
/// Each sentence is counted once, under the language it is written in.
pub fn language_counts(dirs: &[DirectionSpec]) -> Vec<(String, TokenCounts)> {
    let mut out: BTreeMap<String, TokenCounts> = BTreeMap::new();
    for d in dirs.iter().filter(|d| d.source == ENGLISH) {
        for (lang, idx) in [(&d.source, 0), (&d.target, 1)] {
            let counts = out.entry(lang.clone()).or_default();
            for pair in &d.pairs {
                let text = if idx == 0 { &pair.0 } else { &pair.1 };
                for tok in text.split_whitespace() {
                    *counts.entry(tok.to_string()).or_default() += 1;
                }
            }
        }
    }
    out.into_iter().collect()
}

/// One `source<TAB>target` pair per line.
pub fn write_tsv(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut buf = Vec::new();
    for (a, b) in pairs {
        writeln!(buf, "{a}\t{b}").expect("write to Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_once('\t')
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .ok_or_else(|| Error::invalid(format!("{}:{}: missing tab", path.display(), i + 1)))
        })
        .collect()
}
