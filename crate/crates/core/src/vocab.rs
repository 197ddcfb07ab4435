//! Whitespace-token vocabularies built from multilingual count tables, and
//! the surface-string overlap between two of them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;

const RESERVED: [&str; 4] = [PAD, UNK, BOS, EOS];

pub fn lang_tag(language: &str) -> String {
    format!("<lang:{language}>")
}

fn tag_language(token: &str) -> Option<&str> {
    token.strip_prefix("<lang:")?.strip_suffix('>')
}

/// Token table with fixed reserved ids 0..3 followed by one tag per language.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    languages: Vec<String>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::invalid("vocabulary must start with <pad> <unk> <bos> <eos>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let languages = tokens
            .iter()
            .filter_map(|t| tag_language(t).map(str::to_string))
            .collect();
        Ok(Vocab {
            tokens,
            index,
            languages,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tag_id(&self, language: &str) -> Option<usize> {
        self.id(&lang_tag(language))
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < RESERVED.len() || self.token(id).is_some_and(|t| tag_language(t).is_some())
    }

    /// Token ids without tag or end marker; unknown tokens map to `<unk>`.
    pub fn encode_tokens(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK_ID))
            .collect()
    }

    /// `[tag, tokens..., <eos>]`.
    pub fn encode(&self, language: &str, text: &str) -> Result<Vec<usize>> {
        let tag = self
            .tag_id(language)
            .ok_or_else(|| Error::invalid(format!("language tag for `{language}` not in vocabulary")))?;
        let mut ids = Vec::with_capacity(text.len() / 4 + 2);
        ids.push(tag);
        ids.extend(self.encode_tokens(text));
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Inverse of [`Vocab::encode`]: control tokens and tags are dropped,
    /// `<unk>` is rendered literally.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let token = self.token(id).ok_or(Error::IdRange {
                id,
                size: self.len(),
            })?;
            if id != UNK_ID && self.is_special(id) {
                continue;
            }
            words.push(token);
        }
        Ok(words.join(" "))
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

/// Token counts for one language.
pub type TokenCounts = BTreeMap<String, u64>;

/// Merges count tables that name the same language.
fn merge_by_language(corpora: &[(String, TokenCounts)]) -> BTreeMap<&str, TokenCounts> {
    let mut merged: BTreeMap<&str, TokenCounts> = BTreeMap::new();
    for (lang, counts) in corpora {
        let entry = merged.entry(lang.as_str()).or_default();
        for (tok, c) in counts {
            *entry.entry(tok.clone()).or_default() += c;
        }
    }
    merged
}

/// Per-language multiplier that maps raw mass `m` to `m^(1/temperature)`.
pub fn language_scales(corpora: &[(String, TokenCounts)], temperature: f64) -> BTreeMap<String, f64> {
    merge_by_language(corpora)
        .into_iter()
        .map(|(lang, counts)| {
            let mass = counts.values().sum::<u64>() as f64;
            let scale = if mass > 0.0 {
                mass.powf(1.0 / temperature) / mass
            } else {
                0.0
            };
            (lang.to_string(), scale)
        })
        .collect()
}

/// Temperature-rescaled count of every token across all languages.
pub fn rescaled_counts(corpora: &[(String, TokenCounts)], temperature: f64) -> BTreeMap<String, f64> {
    let scales = language_scales(corpora, temperature);
    let mut out: BTreeMap<String, f64> = BTreeMap::new();
    for (lang, counts) in merge_by_language(corpora) {
        let s = scales[lang];
        for (tok, &c) in &counts {
            *out.entry(tok.clone()).or_default() += s * c as f64;
        }
    }
    out
}

/// Builds a vocabulary of at most `size` entries.
///
/// Regular tokens are ranked by temperature-rescaled count, ties broken by
/// lexicographic token order; tags are ordered by language code.
pub fn build_vocab(corpora: &[(String, TokenCounts)], size: usize, temperature: f64) -> Result<Vocab> {
    if corpora.is_empty() {
        return Err(Error::invalid("build_vocab needs at least one corpus"));
    }
    if !(temperature >= 1.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be >= 1")));
    }
    let languages: BTreeSet<&str> = corpora.iter().map(|(l, _)| l.as_str()).collect();
    let fixed = RESERVED.len() + languages.len();
    if size <= fixed {
        return Err(Error::invalid(format!(
            "vocabulary size {size} cannot hold {fixed} reserved and tag tokens"
        )));
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(languages.iter().map(|l| lang_tag(l)));

    let mut ranked: Vec<(String, f64)> = rescaled_counts(corpora, temperature)
        .into_iter()
        .filter(|(t, c)| *c > 0.0 && !RESERVED.contains(&t.as_str()) && tag_language(t).is_none())
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    tokens.extend(ranked.into_iter().take(size - fixed).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}

/// Correspondence between equal-surface tokens of two vocabularies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabMapping {
    /// `(old_id, new_id)` sorted by `old_id`.
    pub pairs: Vec<(usize, usize)>,
    pub old_size: usize,
    pub new_size: usize,
}

impl VocabMapping {
    /// Fraction of the new vocabulary reachable from the old one.
    pub fn coverage(&self) -> f64 {
        self.pairs.len() as f64 / self.new_size as f64
    }

    pub fn is_bijection(&self) -> bool {
        self.pairs.len() == self.old_size && self.pairs.len() == self.new_size
    }

    /// `new_id → old_id` lookup table.
    pub fn old_for_new(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.new_size];
        for &(o, n) in &self.pairs {
            out[n] = Some(o);
        }
        out
    }

    pub fn transpose(&self) -> VocabMapping {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(o, n)| (n, o)).collect();
        pairs.sort_unstable();
        VocabMapping {
            pairs,
            old_size: self.new_size,
            new_size: self.old_size,
        }
    }

    pub fn validate(&self, old_size: usize, new_size: usize) -> Result<()> {
        let mut seen_old = vec![false; old_size];
        let mut seen_new = vec![false; new_size];
        for &(o, n) in &self.pairs {
            if o >= old_size {
                return Err(Error::IdRange { id: o, size: old_size });
            }
            if n >= new_size {
                return Err(Error::IdRange { id: n, size: new_size });
            }
            if std::mem::replace(&mut seen_old[o], true) || std::mem::replace(&mut seen_new[n], true) {
                return Err(Error::invalid(format!("mapping pair ({o}, {n}) repeats an id")));
            }
        }
        Ok(())
    }
}

pub fn overlap_map(old: &Vocab, new: &Vocab) -> VocabMapping {
    let pairs = old
        .tokens()
        .iter()
        .enumerate()
        .filter_map(|(o, t)| new.id(t).map(|n| (o, n)))
        .collect();
    VocabMapping {
        pairs,
        old_size: old.len(),
        new_size: new.len(),
    }
}
