use std::collections::{BTreeSet, HashSet};

use mtgrow::synth::{
    cipher, gen_corpus, language_counts, read_tsv, render, tier_size, unrender, write_tsv, LanguageSpec, Lexicon,
    Reorder, Tier,
};
use mtgrow::vocab::{build_vocab, overlap_map, UNK_ID};

fn lang(code: &str, script: &str, cipher: &str, reorder: Reorder, tier: Tier) -> LanguageSpec {
    LanguageSpec {
        code: code.into(),
        script: script.into(),
        cipher_seed: cipher.into(),
        reorder,
        tier,
    }
}

fn fra() -> LanguageSpec {
    lang("fra", "lat", "romance:fra", Reorder::SwapAdjacent, Tier::High)
}

fn guj() -> LanguageSpec {
    lang("guj", "guj", "indic:guj", Reorder::ReverseWindow(2), Tier::Low)
}

fn token_set<'a>(texts: impl IntoIterator<Item = &'a String>) -> BTreeSet<&'a str> {
    texts.into_iter().flat_map(|s| s.split_whitespace()).collect()
}

#[test]
fn identity_language_equals_english() {
    let spec = lang("cpy", "lat", "identity", Reorder::None, Tier::Mid);
    let (fwd, back) = gen_corpus(&spec, &Lexicon::default(), 200, 4).unwrap();
    assert_eq!(fwd.size, 200);
    for ((e, x), (x2, e2)) in fwd.pairs.iter().zip(&back.pairs) {
        assert_eq!(e, x);
        assert_eq!((e, x), (e2, x2));
    }
}

#[test]
fn inverse_cipher_and_reorder_recover_english() {
    let lex = Lexicon::default();
    let eng = LanguageSpec::english();
    let ident = cipher(&eng, lex.size, 9).unwrap();
    for spec in [
        fra(),
        guj(),
        lang("zul", "lat", "nguni:zul", Reorder::ReverseWindow(3), Tier::Low),
    ] {
        let perm = cipher(&spec, lex.size, 9).unwrap();
        let (fwd, _) = gen_corpus(&spec, &lex, 300, 9).unwrap();
        for (e, x) in &fwd.pairs {
            let latent = unrender(&spec, &perm, x).unwrap();
            assert_eq!(&render(&eng, &ident, &latent), e);
            assert_eq!(&render(&spec, &perm, &latent), x);
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_tsv() {
    let dir = tempfile::tempdir().unwrap();
    let lex = Lexicon::default();
    let mut files = Vec::new();
    for i in 0..2 {
        let (fwd, _) = gen_corpus(&guj(), &lex, 150, 31).unwrap();
        let p = dir.path().join(format!("{i}.tsv"));
        write_tsv(&p, &fwd.pairs).unwrap();
        assert_eq!(read_tsv(&p).unwrap(), fwd.pairs);
        files.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let (other, _) = gen_corpus(&guj(), &lex, 150, 32).unwrap();
    let (same, _) = gen_corpus(&guj(), &lex, 150, 31).unwrap();
    assert_ne!(other.pairs, same.pairs);
}

#[test]
fn disjoint_script_shares_no_surface_token_with_seed_corpus() {
    let lex = Lexicon::default();
    let (seed_fwd, _) = gen_corpus(&fra(), &lex, 500, 2).unwrap();
    let (new_fwd, _) = gen_corpus(&guj(), &lex, 500, 2).unwrap();
    let seed_tokens = token_set(seed_fwd.pairs.iter().flat_map(|(a, b)| [a, b]));
    let new_tokens = token_set(new_fwd.pairs.iter().map(|(_, x)| x));
    let mut shared = 0;
    for a in &seed_tokens {
        for b in &new_tokens {
            shared += usize::from(a == b);
        }
    }
    assert_eq!(shared, 0);
    assert!(!new_tokens.is_empty());
}

#[test]
fn unseen_script_encodes_entirely_to_unk() {
    let lex = Lexicon::default();
    let (seed_fwd, seed_back) = gen_corpus(&fra(), &lex, 400, 5).unwrap();
    let old = build_vocab(&language_counts(&[seed_fwd, seed_back]), 4096, 2.0).unwrap();
    let (new_fwd, _) = gen_corpus(&guj(), &lex, 100, 5).unwrap();
    let mut total = 0;
    for (_, x) in &new_fwd.pairs {
        let ids = old.encode_tokens(x);
        total += ids.len();
        assert!(ids.iter().all(|&i| i == UNK_ID));
    }
    assert!(total > 0);
}

#[test]
fn overlap_coverage_matches_brute_force_intersection() {
    let lex = Lexicon::default();
    let (a, b) = gen_corpus(&fra(), &lex, 400, 6).unwrap();
    let (c, d) = gen_corpus(&guj(), &lex, 400, 6).unwrap();
    let old = build_vocab(&language_counts(&[a.clone(), b.clone()]), 4096, 2.0).unwrap();
    let new = build_vocab(&language_counts(&[a, b, c, d]), 4096, 2.0).unwrap();
    let map = overlap_map(&old, &new);

    let mut expected = 0;
    for t in old.tokens() {
        for u in new.tokens() {
            expected += usize::from(t == u);
        }
    }
    assert_eq!(map.pairs.len(), expected);
    assert!(map.coverage() < 1.0);
    assert_eq!(map.coverage(), expected as f64 / new.len() as f64);
    let mapped: HashSet<usize> = map.pairs.iter().map(|&(_, n)| n).collect();
    for (id, t) in new.tokens().iter().enumerate() {
        if t.starts_with("guj_") || t == "<lang:guj>" {
            assert!(!mapped.contains(&id), "{t} should be unmapped");
        }
    }
    for &(o, n) in &map.pairs {
        assert_eq!(old.token(o), new.token(n));
    }
    for r in 0..4 {
        assert!(map.pairs.contains(&(r, r)));
    }
}

#[test]
fn v_low_sits_below_coverage_saturation() {
    // Saturation: the corpus size past which the X side uses every lexicon word.
    let lex = Lexicon::default();
    let coverage = |n: usize| {
        let (fwd, _) = gen_corpus(&guj(), &lex, n, 17).unwrap();
        token_set(fwd.pairs.iter().map(|(_, x)| x)).len()
    };
    let mut saturation = 1;
    while coverage(saturation) < lex.size {
        saturation *= 2;
    }
    let mut lo = saturation / 2;
    while lo + 1 < saturation {
        let mid = (lo + saturation) / 2;
        if coverage(mid) < lex.size {
            lo = mid;
        } else {
            saturation = mid;
        }
    }
    let v_low = tier_size(Tier::VLow, 1.0);
    assert_eq!(v_low, 200);
    assert!(coverage(v_low) < lex.size, "v_low {v_low} saturates at {saturation}");
    assert!(v_low < saturation);
    assert!(coverage(tier_size(Tier::High, 1.0)) == lex.size);
}
