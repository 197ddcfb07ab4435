//! Corpus BLEU, chrF++ and per-direction evaluation reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model;
use crate::synth::Tier;

fn ngram_counts<T: AsRef<str> + Eq + std::hash::Hash>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn char_ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut out = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn clipped_matches<K: Eq + std::hash::Hash>(hyp: &HashMap<K, usize>, reference: &HashMap<K, usize>) -> usize {
    hyp.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

fn check_corpus(hyps: usize, refs: usize) -> Result<()> {
    if hyps != refs {
        return Err(Error::invalid(format!(
            "{hyps} hypotheses for {refs} references"
        )));
    }
    if hyps == 0 {
        return Err(Error::invalid("cannot score an empty corpus"));
    }
    Ok(())
}

/// Corpus BLEU over whitespace tokens, orders 1–4, no smoothing.
pub fn bleu<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<f64> {
    check_corpus(hypotheses.len(), references.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            matches[n - 1] += clipped_matches(&hc, &rc);
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if matches.contains(&0) || hyp_len == 0 {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4)
        .map(|i| (matches[i] as f64 / totals[i] as f64).ln())
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;

fn f_beta(matches: usize, hyp: usize, reference: usize) -> f64 {
    let p = matches as f64 / hyp as f64;
    let r = matches as f64 / reference as f64;
    let b2 = CHRF_BETA * CHRF_BETA;
    let denom = b2 * p + r;
    if denom > 0.0 {
        (1.0 + b2) * p * r / denom
    } else {
        0.0
    }
}

/// chrF++ of one segment in `[0, 1]`: F_β averaged over the character
/// orders 1–6 (whitespace removed) and word orders 1–2 that occur in both
/// hypothesis and reference.
pub fn chrfpp_segment(hypothesis: &str, reference: &str) -> f64 {
    let hc: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw: Vec<&str> = hypothesis.split_whitespace().collect();
    let rw: Vec<&str> = reference.split_whitespace().collect();
    if hc.is_empty() && rc.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    let mut orders = 0;
    for n in 1..=CHRF_CHAR_ORDER {
        let (h, r) = (char_ngram_counts(&hc, n), char_ngram_counts(&rc, n));
        let (nh, nr) = (h.values().sum::<usize>(), r.values().sum::<usize>());
        if nh > 0 && nr > 0 {
            total += f_beta(clipped_matches(&h, &r), nh, nr);
            orders += 1;
        }
    }
    for n in 1..=CHRF_WORD_ORDER {
        let (h, r) = (ngram_counts(&hw, n), ngram_counts(&rw, n));
        let (nh, nr) = (h.values().sum::<usize>(), r.values().sum::<usize>());
        if nh > 0 && nr > 0 {
            total += f_beta(clipped_matches(&h, &r), nh, nr);
            orders += 1;
        }
    }
    if orders == 0 {
        0.0
    } else {
        total / orders as f64
    }
}

/// Macro average of per-segment chrF++, scaled to `[0, 100]`.
pub fn chrfpp<S: AsRef<str>, R: AsRef<str>>(hypotheses: &[S], references: &[R]) -> Result<f64> {
    check_corpus(hypotheses.len(), references.len())?;
    let sum: f64 = hypotheses
        .iter()
        .zip(references)
        .map(|(h, r)| chrfpp_segment(h.as_ref(), r.as_ref()))
        .sum();
    Ok(100.0 * sum / hypotheses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: String,
    pub source: String,
    pub target: String,
    pub tier: Tier,
    /// Involves a language added in the continual phase.
    pub added: bool,
    pub bleu: f64,
    pub chrf: f64,
    pub segments: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub bleu: f64,
    pub chrf: f64,
    pub directions: usize,
}

impl Aggregate {
    /// Unweighted mean over directions; `None` when empty.
    pub fn over<'a>(scores: impl IntoIterator<Item = &'a DirectionScore>) -> Option<Self> {
        let (mut b, mut c, mut n) = (0.0, 0.0, 0);
        for s in scores {
            b += s.bleu;
            c += s.chrf;
            n += 1;
        }
        (n > 0).then(|| Aggregate {
            bleu: b / n as f64,
            chrf: c / n as f64,
            directions: n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub step: u64,
    pub directions: Vec<DirectionScore>,
    pub all: Option<Aggregate>,
    pub orig: Option<Aggregate>,
    pub added: Option<Aggregate>,
    pub tiers: BTreeMap<String, Aggregate>,
}

impl EvalReport {
    pub fn new(checkpoint: impl Into<String>, step: u64, directions: Vec<DirectionScore>) -> Self {
        let all = Aggregate::over(&directions);
        let orig = Aggregate::over(directions.iter().filter(|d| !d.added));
        let added = Aggregate::over(directions.iter().filter(|d| d.added));
        let tiers = Tier::ALL
            .iter()
            .filter_map(|&t| {
                Aggregate::over(directions.iter().filter(|d| d.tier == t))
                    .map(|a| (t.as_str().to_string(), a))
            })
            .collect();
        EvalReport {
            checkpoint: checkpoint.into(),
            step,
            directions,
            all,
            orig,
            added,
            tiers,
        }
    }

    pub fn direction(&self, name: &str) -> Option<&DirectionScore> {
        self.directions.iter().find(|d| d.direction == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One row per direction.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,source,target,tier,added,bleu,chrf,segments\n");
        for d in &self.directions {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                d.direction,
                d.source,
                d.target,
                d.tier.as_str(),
                d.added,
                d.bleu,
                d.chrf,
                d.segments
            );
        }
        out
    }
}

/// A held-out direction to score.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDirection {
    pub source: String,
    pub target: String,
    pub tier: Tier,
    pub added: bool,
    pub pairs: Vec<(String, String)>,
}

pub struct DecodeOptions {
    pub beam: usize,
    pub length_penalty: f64,
    /// Extra target tokens allowed beyond the source length.
    pub extra_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam: 4,
            length_penalty: 1.0,
            extra_len: 4,
        }
    }
}

/// Beam-decodes one source sentence into target text.
pub fn translate(
    ckpt: &Checkpoint,
    source_lang: &str,
    target_lang: &str,
    text: &str,
    opts: &DecodeOptions,
) -> Result<String> {
    let tag = ckpt.vocab.tag_id(target_lang).ok_or_else(|| {
        Error::invalid(format!("vocabulary has no tag for `{target_lang}`"))
    })?;
    let src = ckpt.vocab.encode(source_lang, text)?;
    let max_len = (src.len() + opts.extra_len).min(ckpt.config.max_positions - 2);
    let ids = model::decode_beam(
        &ckpt.params,
        &ckpt.config,
        &src,
        tag,
        opts.beam,
        max_len,
        opts.length_penalty,
    )?;
    ckpt.vocab.decode(&ids)
}

/// Decodes every held-out source and scores each direction.
pub fn evaluate(
    ckpt: &Checkpoint,
    checkpoint_id: &str,
    directions: &[EvalDirection],
    opts: &DecodeOptions,
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(directions.len());
    for d in directions {
        if ckpt.vocab.tag_id(&d.source).is_none() {
            return Err(Error::invalid(format!("vocabulary has no tag for `{}`", d.source)));
        }
        let hyps = d
            .pairs
            .iter()
            .map(|(s, _)| translate(ckpt, &d.source, &d.target, s, opts))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = d.pairs.iter().map(|(_, r)| r.as_str()).collect();
        scores.push(DirectionScore {
            direction: crate::synth::direction_name(&d.source, &d.target),
            source: d.source.clone(),
            target: d.target.clone(),
            tier: d.tier,
            added: d.added,
            bleu: bleu(&hyps, &refs)?,
            chrf: chrfpp(&hyps, &refs)?,
            segments: d.pairs.len(),
        });
    }
    Ok(EvalReport::new(checkpoint_id, ckpt.step, scores))
}
