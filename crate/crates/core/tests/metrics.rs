mod common;

use common::oracle::*;
use mtgrow::metrics::{bleu, chrfpp, chrfpp_segment, Aggregate, DirectionScore, EvalReport};
use mtgrow::synth::Tier;
use proptest::prelude::*;

#[test]
fn bleu_matches_brute_force_on_random_corpora() {
    let mut nonzero = 0;
    for seed in 0..50 {
        let (h, r) = random_corpus(seed);
        let got = bleu(&h, &r).unwrap();
        let want = bleu_oracle(&h, &r);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
        nonzero += usize::from(want > 0.0);
    }
    assert!(nonzero >= 5, "corpora too degenerate to exercise the formula");
}

#[test]
fn chrfpp_matches_brute_force_on_random_corpora() {
    for seed in 100..150 {
        let (h, r) = random_corpus(seed);
        let got = chrfpp(&h, &r).unwrap();
        let want = chrfpp_oracle(&h, &r);
        assert!((got - want).abs() < 1e-9, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn bleu_repeated_token_example() {
    let h = ["a a a"];
    let r = ["a b"];
    let want = bleu_oracle(&["a a a".into()], &["a b".into()]);
    assert!((bleu(&h, &r).unwrap() - want).abs() < 1e-9);
}

#[test]
fn two_word_chrf_example() {
    let got = chrfpp_segment("ab cd", "ab ce");
    assert!((got - chrf_oracle_segment("ab cd", "ab ce")).abs() < 1e-9);
}

#[test]
fn identity_corpora_score_100() {
    for seed in 0..20 {
        let (_, r) = random_corpus(seed);
        if r.iter().all(|s| s.split_whitespace().count() >= 4) {
            assert_eq!(bleu(&r, &r).unwrap(), 100.0);
        }
        assert!((chrfpp(&r, &r).unwrap() - 100.0).abs() < 1e-12);
    }
    let r = ["x y z w v", "p q r s t u"];
    assert_eq!(bleu(&r, &r).unwrap(), 100.0);
}

fn score(direction: &str, tier: Tier, added: bool, bleu: f64, chrf: f64) -> DirectionScore {
    let (source, target) = direction.split_once('-').unwrap();
    DirectionScore {
        direction: direction.into(),
        source: source.into(),
        target: target.into(),
        tier,
        added,
        bleu,
        chrf,
        segments: 3,
    }
}

#[test]
fn report_aggregates_are_exact_means() {
    let report = EvalReport::new(
        "ck",
        9,
        vec![
            score("eng-fra", Tier::High, false, 40.0, 60.0),
            score("fra-eng", Tier::High, false, 20.0, 50.0),
            score("eng-zul", Tier::Low, false, 9.0, 30.0),
            score("eng-xho", Tier::Low, true, 5.0, 20.0),
        ],
    );
    assert_eq!(report.orig.unwrap().bleu, 23.0);
    assert_eq!(report.added.unwrap().bleu, 5.0);
    assert_eq!(report.all.unwrap().bleu, 18.5);
    assert_eq!(report.all.unwrap().chrf, 40.0);
    assert_eq!(report.tiers["high"].bleu, 30.0);
    assert_eq!(report.tiers["low"].bleu, 7.0);
    let empty: Option<Aggregate> = Aggregate::over(std::iter::empty());
    assert!(empty.is_none());
}

#[test]
fn report_json_round_trip_is_bitwise() {
    let report = EvalReport::new(
        "ck",
        1,
        vec![
            score("eng-fra", Tier::High, false, 1.0 / 3.0, 2.0f64.sqrt()),
            score("eng-kat", Tier::VLow, true, 0.1 + 0.2, 1e-300),
        ],
    );
    let text = report.to_json().unwrap();
    let back = EvalReport::from_json(&text).unwrap();
    assert_eq!(back, report);
    assert_eq!(back.to_json().unwrap(), text);
    for (a, b) in back.directions.iter().zip(&report.directions) {
        assert_eq!(a.bleu.to_bits(), b.bleu.to_bits());
        assert_eq!(a.chrf.to_bits(), b.chrf.to_bits());
    }
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "ab", "c", "ba"]), 0..6).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_permutation_invariant(
        pairs in prop::collection::vec((sentence(), sentence()), 1..6),
        rot in 0usize..6,
    ) {
        let (h, r): (Vec<String>, Vec<String>) = pairs.iter().cloned().unzip();
        let b = bleu(&h, &r).unwrap();
        let c = chrfpp(&h, &r).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
        prop_assert!((0.0..=100.0 + 1e-9).contains(&c));
        let k = rot % pairs.len();
        let (h2, r2): (Vec<String>, Vec<String>) = pairs[k..].iter().chain(&pairs[..k]).cloned().unzip();
        prop_assert!((bleu(&h2, &r2).unwrap() - b).abs() < 1e-9);
        prop_assert!((chrfpp(&h2, &r2).unwrap() - c).abs() < 1e-9);
        if (c - 100.0).abs() < 1e-12 {
            let stripped = |s: &String| s.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert!(h.iter().zip(&r).all(|(a, b)| stripped(a) == stripped(b)));
        }
    }
}
