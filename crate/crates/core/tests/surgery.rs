mod common;

use std::collections::BTreeSet;

use common::*;
use mtgrow::model::{self, layer_name, parse_layer_name, Stack};
use mtgrow::surgery::*;
use mtgrow::tensor::Tensor;
use mtgrow::vocab::{overlap_map, VocabMapping, UNK_ID};
use proptest::prelude::*;

fn ffn_names(config: &model::ModelConfig) -> Vec<(String, String, String, String)> {
    let mut out = Vec::new();
    for (stack, n) in [(Stack::Encoder, config.enc_layers), (Stack::Decoder, config.dec_layers)] {
        for l in 0..n {
            let f = |t: &str| layer_name(stack, l, &format!("ffn.{t}"));
            out.push((f("w1"), f("b1"), f("w2"), f("b2")));
        }
    }
    out
}

/// relu(W1 x + b1) then W2 · + b2, by explicit loops.
fn ffn_oracle(w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, x: &[f64]) -> Vec<f64> {
    let (h, d) = (w1.shape()[0], w1.shape()[1]);
    let hidden: Vec<f64> = (0..h)
        .map(|i| {
            let z: f64 = (0..d).map(|j| w1.data()[i * d + j] * x[j]).sum::<f64>() + b1.data()[i];
            z.max(0.0)
        })
        .collect();
    (0..d)
        .map(|r| (0..h).map(|i| w2.data()[r * h + i] * hidden[i]).sum::<f64>() + b2.data()[r])
        .collect()
}

#[test]
fn function_preserve_leaves_logits_unchanged() {
    let seed = seed_checkpoint(3);
    let batch = random_batch(seed.config.vocab_size, 5, 11);
    let before = model::logits(&seed.params, &seed.config, &batch).unwrap();
    for factor in [2, 3] {
        let wide = widen_ffn(&seed, factor, WidthInit::ConcatNoise, 0.0, NormMode::FunctionPreserve, 9).unwrap();
        assert_eq!(wide.config.ffn_hidden_dim, factor * seed.config.ffn_hidden_dim);
        let after = model::logits(&wide.params, &wide.config, &batch).unwrap();
        assert!(max_abs_diff(before.data(), after.data()) < 1e-10);
    }
}

#[test]
fn frobenius_match_norm_and_closed_form() {
    let seed = seed_checkpoint(4);
    let wide = widen_ffn(&seed, 2, WidthInit::ConcatNoise, 0.0, NormMode::FrobeniusMatch, 1).unwrap();
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    for (w1, b1, w2, b2) in ffn_names(&seed.config) {
        let g = |ck: &mtgrow::checkpoint::Checkpoint, n: &str| ck.params.get(n).unwrap().clone();
        let (n_old, n_new) = (g(&seed, &w2).frobenius_norm(), g(&wide, &w2).frobenius_norm());
        assert!((n_old - n_new).abs() < 1e-12, "{w2}: {n_old} vs {n_new}");
        let x: Vec<f64> = (0..seed.config.model_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = ffn_oracle(&g(&seed, &w1), &g(&seed, &b1), &g(&seed, &w2), &g(&seed, &b2), &x);
        let grown = ffn_oracle(&g(&wide, &w1), &g(&wide, &b1), &g(&wide, &w2), &g(&wide, &b2), &x);
        let b2v = g(&seed, &b2);
        for r in 0..x.len() {
            let expect = 2f64.sqrt() * (base[r] - b2v.data()[r]) + b2v.data()[r];
            assert!((grown[r] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn concat_noise_regenerates_from_seed() {
    let seed = seed_checkpoint(5);
    let surgery_seed = 77;
    let wide = widen_ffn(&seed, 2, WidthInit::ConcatNoise, 0.01, NormMode::None, surgery_seed).unwrap();
    for (w1, b1, w2, b2) in ffn_names(&seed.config) {
        let old_w1 = seed.params.get(&w1).unwrap();
        let (h, d) = (old_w1.shape()[0], old_w1.shape()[1]);
        let n1 = gaussian(surgery_seed, &noise_label(&w1), h * d, 0.01);
        let new_w1 = wide.params.get(&w1).unwrap();
        for i in 0..h * d {
            assert_eq!(new_w1.data()[i].to_bits(), old_w1.data()[i].to_bits());
            assert_eq!(new_w1.data()[h * d + i].to_bits(), (old_w1.data()[i] + n1[i]).to_bits());
        }
        let nb = gaussian(surgery_seed, &noise_label(&b1), h, 0.01);
        let (ob, wb) = (seed.params.get(&b1).unwrap(), wide.params.get(&b1).unwrap());
        for i in 0..h {
            assert_eq!(wb.data()[h + i].to_bits(), (ob.data()[i] + nb[i]).to_bits());
        }
        let n2 = gaussian(surgery_seed, &noise_label(&w2), d * h, 0.01);
        let (ow2, ww2) = (seed.params.get(&w2).unwrap(), wide.params.get(&w2).unwrap());
        for r in 0..d {
            for c in 0..h {
                assert_eq!(ww2.data()[r * 2 * h + c].to_bits(), ow2.data()[r * h + c].to_bits());
                let expect = ow2.data()[r * h + c] + n2[r * h + c];
                assert_eq!(ww2.data()[r * 2 * h + h + c].to_bits(), expect.to_bits());
            }
        }
        assert!(seed.params.get(&b2).unwrap().bitwise_eq(wide.params.get(&b2).unwrap()));
    }
    let again = widen_ffn(&seed, 2, WidthInit::ConcatNoise, 0.01, NormMode::None, surgery_seed).unwrap();
    assert!(again.bitwise_eq(&wide));
}

#[test]
fn width_pairing_is_preserved_under_every_strategy() {
    // Zeroing one hidden unit's W1 row and b1 entry must silence the paired
    // W2 column, whatever strategy built them.
    let seed = seed_checkpoint(6);
    for init in [WidthInit::ConcatNoise, WidthInit::LinearInterp, WidthInit::RandomExpand] {
        let wide = widen_ffn(&seed, 2, init, 0.01, NormMode::FrobeniusMatch, 2).unwrap();
        let (w1, b1, w2, b2) = ffn_names(&wide.config).remove(0);
        let g = |n: &str| wide.params.get(n).unwrap().clone();
        let x: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let full = ffn_oracle(&g(&w1), &g(&b1), &g(&w2), &g(&b2), &x);
        let h = g(&w1).shape()[0];
        let k = 13;
        let mut w1k = g(&w1);
        w1k.row_mut(k).iter_mut().for_each(|v| *v = 0.0);
        let mut b1k = g(&b1);
        b1k.data_mut()[k] = 0.0;
        let hidden = {
            let z: f64 = (0..8).map(|j| g(&w1).data()[k * 8 + j] * x[j]).sum::<f64>() + g(&b1).data()[k];
            z.max(0.0)
        };
        let without = ffn_oracle(&w1k, &b1k, &g(&w2), &g(&b2), &x);
        let removed: Vec<f64> = (0..8).map(|r| g(&w2).data()[r * h + k] * hidden).collect();
        for r in 0..8 {
            assert!((full[r] - without[r] - removed[r]).abs() < 1e-12, "{init:?}");
        }
    }
}

#[test]
fn unmapped_rows_copy_unk_exactly() {
    let seed = seed_checkpoint(7);
    let mut w = words("lat", 20);
    w.extend(words("guj", 10));
    let target = vocab(&["eng", "fra", "guj"], &w);
    let mapping = overlap_map(&seed.vocab, &target);
    let grown = remap_embeddings(&seed, &target, &mapping, EmbeddingInit::UnkCopy, 1).unwrap();
    let table = grown.params.get("embedding.table").unwrap();
    let old = seed.params.get("embedding.table").unwrap();
    let unk = old.row(UNK_ID);
    let g7 = target.id("guj_tok_7").unwrap();
    assert_eq!(table.row(g7), unk);
    for (i, tok) in target.tokens().iter().enumerate() {
        match seed.vocab.id(tok) {
            Some(o) => assert_eq!(table.row(i), old.row(o), "{tok}"),
            None => assert_eq!(table.row(i), unk, "{tok}"),
        }
    }
    assert_eq!(grown.vocab, target);
    assert_eq!(grown.config.vocab_size, target.len());
}

#[test]
fn bijective_unk_copy_is_a_row_permutation() {
    let seed = seed_checkpoint(8);
    let mut tokens: Vec<String> = seed.vocab.tokens().to_vec();
    tokens[7..].reverse();
    let permuted = mtgrow::vocab::Vocab::from_tokens(tokens).unwrap();
    let mapping = overlap_map(&seed.vocab, &permuted);
    assert!(mapping.is_bijection());
    let grown = remap_embeddings(&seed, &permuted, &mapping, EmbeddingInit::UnkCopy, 1).unwrap();
    let old = seed.params.get("embedding.table").unwrap();
    let new = grown.params.get("embedding.table").unwrap();
    // Reconstruct the permutation from row contents alone.
    let perm: Vec<usize> = (0..new.rows())
        .map(|i| (0..old.rows()).find(|&j| old.row(j) == new.row(i)).expect("row present"))
        .collect();
    let expect: Vec<usize> = permuted.tokens().iter().map(|t| seed.vocab.id(t).unwrap()).collect();
    assert_eq!(perm, expect);
}

#[test]
fn random_all_shares_no_row_with_the_old_table() {
    let seed = seed_checkpoint(9);
    let mut w = words("lat", 20);
    w.extend(words("geo", 6));
    let target = vocab(&["eng", "fra", "kat"], &w);
    let mapping = overlap_map(&seed.vocab, &target);
    let grown = remap_embeddings(&seed, &target, &mapping, EmbeddingInit::RandomAll, 42).unwrap();
    let old = seed.params.get("embedding.table").unwrap();
    let new = grown.params.get("embedding.table").unwrap();
    for i in 0..new.rows() {
        for j in 0..old.rows() {
            assert_ne!(new.row(i), old.row(j), "new row {i} equals old row {j}");
        }
    }
    let again = remap_embeddings(&seed, &target, &mapping, EmbeddingInit::RandomAll, 42).unwrap();
    assert!(again.bitwise_eq(&grown));
}

#[test]
fn random_new_keeps_mapped_rows() {
    let seed = seed_checkpoint(10);
    let mut w = words("lat", 20);
    w.extend(words("guj", 4));
    let target = vocab(&["eng", "fra", "guj"], &w);
    let mapping = overlap_map(&seed.vocab, &target);
    let grown = remap_embeddings(&seed, &target, &mapping, EmbeddingInit::RandomNew, 3).unwrap();
    let old = seed.params.get("embedding.table").unwrap();
    let new = grown.params.get("embedding.table").unwrap();
    for &(o, n) in &mapping.pairs {
        assert_eq!(new.row(n), old.row(o));
    }
    let mapped: BTreeSet<usize> = mapping.pairs.iter().map(|p| p.1).collect();
    for i in (0..new.rows()).filter(|i| !mapped.contains(i)) {
        assert_ne!(new.row(i), old.row(UNK_ID));
    }
}

#[test]
fn remap_rejects_out_of_range_mapping() {
    let seed = seed_checkpoint(1);
    let bad = VocabMapping {
        pairs: vec![(0, 0), (999, 1)],
        old_size: seed.vocab.len(),
        new_size: seed.vocab.len(),
    };
    assert!(remap_embeddings(&seed, &seed.vocab, &bad, EmbeddingInit::UnkCopy, 1).is_err());
}

fn four_by_four() -> mtgrow::checkpoint::Checkpoint {
    let v = vocab(&["eng"], &words("lat", 10));
    let mut c = tiny_config(v.len());
    c.enc_layers = 4;
    c.dec_layers = 4;
    checkpoint(c, v, 12)
}

#[test]
fn average_layer_is_the_per_tensor_mean() {
    let seed = four_by_four();
    let plan = DepthPlan {
        enc_count: 2,
        dec_count: 2,
        enc_position: InsertPosition::Bottom,
        dec_position: InsertPosition::Top,
        init: DepthInit::AverageLayer,
    };
    let deep = deepen(&seed, &plan, 1).unwrap();
    assert_eq!((deep.config.enc_layers, deep.config.dec_layers), (6, 6));
    for (name, t) in seed.params.iter() {
        let Some((stack, l, tail)) = parse_layer_name(name) else {
            assert!(deep.params.get(name).unwrap().bitwise_eq(t));
            continue;
        };
        let moved = match stack {
            Stack::Encoder => layer_name(stack, l + 2, tail),
            Stack::Decoder => layer_name(stack, l, tail),
        };
        assert!(deep.params.get(&moved).unwrap().bitwise_eq(t), "{name} → {moved}");
    }
    for (stack, inserted) in [(Stack::Encoder, [0, 1]), (Stack::Decoder, [4, 5])] {
        for tail in ["self_attn.wq", "ffn.w1", "ln1.gain", "ffn.b2"] {
            let olds: Vec<&Tensor> = (0..4).map(|l| seed.params.get(&layer_name(stack, l, tail)).unwrap()).collect();
            for l in inserted {
                let t = deep.params.get(&layer_name(stack, l, tail)).unwrap();
                for (i, &v) in t.data().iter().enumerate() {
                    let mean = olds.iter().map(|o| o.data()[i]).sum::<f64>() / 4.0;
                    assert!((v - mean).abs() < 1e-15);
                }
            }
        }
    }
}

#[test]
fn constant_layers_average_to_their_mean() {
    let v = vocab(&["eng"], &words("lat", 4));
    let mut seed = checkpoint(tiny_config(v.len()), v, 2);
    let name0 = layer_name(Stack::Encoder, 0, "ffn.w1");
    let name1 = layer_name(Stack::Encoder, 1, "ffn.w1");
    let shape = seed.params.get(&name0).unwrap().shape().to_vec();
    seed.params.insert(name0, Tensor::filled(&shape, 2.0));
    seed.params.insert(name1, Tensor::filled(&shape, 4.0));
    let plan = DepthPlan {
        enc_count: 1,
        ..DepthPlan::default()
    };
    let deep = deepen(&seed, &plan, 1).unwrap();
    let inserted = deep.params.get(&layer_name(Stack::Encoder, 0, "ffn.w1")).unwrap();
    assert!(inserted.data().iter().all(|&x| x == 3.0));
}

#[test]
fn closest_layer_copies_the_edge_layers() {
    let seed = four_by_four();
    let plan = DepthPlan {
        enc_count: 1,
        dec_count: 1,
        enc_position: InsertPosition::Bottom,
        dec_position: InsertPosition::Top,
        init: DepthInit::ClosestLayer,
    };
    let deep = deepen(&seed, &plan, 1).unwrap();
    for (name, t) in seed.params.iter() {
        match parse_layer_name(name) {
            Some((Stack::Encoder, 0, tail)) => {
                assert!(deep.params.get(&layer_name(Stack::Encoder, 0, tail)).unwrap().bitwise_eq(t));
            }
            Some((Stack::Decoder, 3, tail)) => {
                assert!(deep.params.get(&layer_name(Stack::Decoder, 4, tail)).unwrap().bitwise_eq(t));
            }
            _ => {}
        }
    }
}

#[test]
fn deep_plan_new_set_is_inserted_layers_plus_unmapped_rows() {
    let seed = four_by_four();
    let mut w = words("lat", 10);
    w.extend(words("geo", 5));
    let target = vocab(&["eng", "kat"], &w);
    let plan = GrowthPlan {
        target_vocab: target.clone(),
        embedding_init: EmbeddingInit::UnkCopy,
        width: WidthPlan::default(),
        depth: DepthPlan {
            enc_count: 2,
            dec_count: 2,
            enc_position: InsertPosition::Bottom,
            dec_position: InsertPosition::Top,
            init: DepthInit::AverageLayer,
        },
        seed: 5,
    };
    let (grown, report) = grow(&seed, &plan).unwrap();

    // Independently constructed expectation.
    let mut expected: BTreeSet<(String, usize)> = BTreeSet::new();
    for (name, t) in grown.params.iter() {
        let inserted = match parse_layer_name(name) {
            Some((Stack::Encoder, l, _)) => l < 2,
            Some((Stack::Decoder, l, _)) => l >= 4,
            None => false,
        };
        if inserted {
            expected.extend((0..t.numel()).map(|i| (name.clone(), i)));
        }
    }
    let d = grown.config.model_dim;
    for (row, tok) in target.tokens().iter().enumerate() {
        if !seed.vocab.tokens().contains(tok) {
            expected.extend((0..d).map(|c| ("embedding.table".to_string(), row * d + c)));
        }
    }

    let mut actual = BTreeSet::new();
    for name in grown.params.names() {
        let groups = report.element_groups(name).unwrap();
        assert_eq!(groups.len(), grown.params.get(name).unwrap().numel());
        actual.extend(
            groups
                .iter()
                .enumerate()
                .filter(|(_, g)| **g == Group::New)
                .map(|(i, _)| (name.clone(), i)),
        );
    }
    assert_eq!(actual, expected);
}

#[test]
fn wide_plan_splits_every_ffn_tensor_in_two() {
    let seed = seed_checkpoint(13);
    let mut w = words("lat", 20);
    w.extend(words("guj", 3));
    let target = vocab(&["eng", "fra", "guj"], &w);
    let plan = GrowthPlan {
        target_vocab: target,
        embedding_init: EmbeddingInit::UnkCopy,
        width: WidthPlan {
            factor: 2,
            init: WidthInit::ConcatNoise,
            noise_std: 0.01,
            norm_mode: NormMode::FrobeniusMatch,
        },
        depth: DepthPlan::default(),
        seed: 1,
    };
    let before = seed.clone();
    let (grown, report) = grow(&seed, &plan).unwrap();
    assert!(seed.bitwise_eq(&before), "grow must not mutate its input");
    for (w1, b1, w2, b2) in ffn_names(&grown.config) {
        for n in [&w1, &b1, &w2] {
            let groups = report.element_groups(n).unwrap();
            let old = groups.iter().filter(|g| **g == Group::Old).count();
            assert_eq!(old * 2, groups.len(), "{n}");
        }
        assert!(report.element_groups(&b2).unwrap().iter().all(|g| *g == Group::Old));
    }
}

#[test]
fn identity_plan_is_bitwise_no_op() {
    let mut seed = seed_checkpoint(14);
    seed.step = 17;
    let (grown, report) = grow(&seed, &GrowthPlan::vocab_only(seed.vocab.clone(), 3)).unwrap();
    assert!(grown.bitwise_eq(&seed));
    for p in report.tensors.values() {
        assert!(p.segments.iter().all(|s| s.provenance == Provenance::Copied && s.group == Group::Old));
    }
}

#[test]
fn report_round_trips_through_json() {
    let seed = seed_checkpoint(15);
    let mut plan = GrowthPlan::vocab_only(seed.vocab.clone(), 3);
    plan.width.factor = 2;
    let (_, report) = grow(&seed, &plan).unwrap();
    let back = SurgeryReport::from_json(&report.to_json().unwrap()).unwrap();
    assert_eq!(back, report);
}

use rand::{Rng, SeedableRng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn provenance_partitions_every_element(
        factor in 1usize..4,
        init in prop_oneof![Just(WidthInit::ConcatNoise), Just(WidthInit::LinearInterp), Just(WidthInit::RandomExpand)],
        enc in 0usize..3,
        dec in 0usize..3,
        depth_init in prop_oneof![Just(DepthInit::AverageLayer), Just(DepthInit::ClosestLayer), Just(DepthInit::Random)],
        extra in 0usize..5,
        seed in 0u64..1000,
    ) {
        let base = seed_checkpoint(seed);
        let mut w = words("lat", 20);
        w.extend(words("cyr", extra));
        let target = vocab(&["eng", "fra", "rus"], &w);
        let plan = GrowthPlan {
            target_vocab: target,
            embedding_init: EmbeddingInit::UnkCopy,
            width: WidthPlan { factor, init, noise_std: 0.01, norm_mode: NormMode::FrobeniusMatch },
            depth: DepthPlan {
                enc_count: enc,
                dec_count: dec,
                enc_position: InsertPosition::Bottom,
                dec_position: InsertPosition::Top,
                init: depth_init,
            },
            seed,
        };
        let (grown, report) = grow(&base, &plan).unwrap();
        prop_assert_eq!(report.tensors.len(), grown.params.len());
        let mut total = 0;
        for (name, t) in grown.params.iter() {
            let groups = report.element_groups(name).unwrap();
            prop_assert_eq!(groups.len(), t.numel());
            total += groups.len();
        }
        prop_assert_eq!(report.count(Group::Old) + report.count(Group::New), total);
        prop_assert_eq!(grown.config.enc_layers, 2 + enc);
        prop_assert_eq!(grown.config.ffn_hidden_dim, 12 * factor);
    }
}
