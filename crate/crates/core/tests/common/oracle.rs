//! Brute-force metric oracles: n-gram counts by scanning, no hashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Occurrences of `gram` in `seq`, by scanning every offset.
pub fn occurrences<T: PartialEq>(seq: &[T], gram: &[T]) -> usize {
    if gram.len() > seq.len() {
        return 0;
    }
    (0..=seq.len() - gram.len()).filter(|&i| &seq[i..i + gram.len()] == gram).count()
}

/// Clipped matches and hypothesis n-gram total, without hashing.
pub fn brute_matches<T: PartialEq>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize) {
    if hyp.len() < n {
        return (0, 0);
    }
    let mut seen: Vec<&[T]> = Vec::new();
    let mut matches = 0;
    for i in 0..=hyp.len() - n {
        let g = &hyp[i..i + n];
        if seen.contains(&g) {
            continue;
        }
        seen.push(g);
        matches += occurrences(hyp, g).min(occurrences(reference, g));
    }
    (matches, hyp.len() - n + 1)
}

pub fn bleu_oracle(hyps: &[String], refs: &[String]) -> f64 {
    let mut m = [0usize; 4];
    let mut t = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.split_whitespace().collect();
        let rf: Vec<&str> = rf.split_whitespace().collect();
        c += h.len();
        r += rf.len();
        for n in 1..=4 {
            let (a, b) = brute_matches(&h, &rf, n);
            m[n - 1] += a;
            t[n - 1] += b;
        }
    }
    if c == 0 || m.iter().any(|&x| x == 0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 0..4 {
        prod *= m[n] as f64 / t[n] as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    100.0 * bp * prod.powf(0.25)
}

pub fn f2(m: usize, h: usize, r: usize) -> f64 {
    let p = m as f64 / h as f64;
    let rc = m as f64 / r as f64;
    if p + rc == 0.0 {
        0.0
    } else {
        5.0 * p * rc / (4.0 * p + rc)
    }
}

pub fn chrf_oracle_segment(h: &str, r: &str) -> f64 {
    let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
    if hc.is_empty() && rc.is_empty() {
        return 1.0;
    }
    let hw: Vec<&str> = h.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    let mut scores = Vec::new();
    for n in 1..=6 {
        let (m, th) = brute_matches(&hc, &rc, n);
        let (_, tr) = brute_matches(&rc, &rc, n);
        if th > 0 && tr > 0 {
            scores.push(f2(m, th, tr));
        }
    }
    for n in 1..=2 {
        let (m, th) = brute_matches(&hw, &rw, n);
        let (_, tr) = brute_matches(&rw, &rw, n);
        if th > 0 && tr > 0 {
            scores.push(f2(m, th, tr));
        }
    }
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

pub fn random_sentence(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..7);
    (0..len)
        .map(|_| {
            let wl = rng.random_range(1..4);
            (0..wl).map(|_| ['a', 'b', 'c'][rng.random_range(0..3)]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn random_corpus(seed: u64) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..5);
    let refs: Vec<String> = (0..n).map(|_| random_sentence(&mut rng)).collect();
    let hyps: Vec<String> = refs
        .iter()
        .map(|r| {
            if rng.random_bool(0.3) {
                r.clone()
            } else {
                random_sentence(&mut rng)
            }
        })
        .collect();
    (hyps, refs)
}

/// Corpus chrF++ as the mean of segment scores, times 100.
pub fn chrfpp_oracle(hyps: &[String], refs: &[String]) -> f64 {
    100.0 * hyps.iter().zip(refs).map(|(a, b)| chrf_oracle_segment(a, b)).sum::<f64>() / hyps.len() as f64
}
