#![allow(dead_code)]

pub mod oracle;

use mtgrow::checkpoint::Checkpoint;
use mtgrow::model::{init_model, Batch, Example, ModelConfig};
use mtgrow::synth::Tier;
use mtgrow::train::{TrainConfig, TrainDirection};
use mtgrow::vocab::EOS_ID;
use mtgrow::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        model_dim: 8,
        ffn_hidden_dim: 12,
        heads: 2,
        vocab_size,
        attention_dropout: 0.1,
        label_smoothing_epsilon: 0.1,
        max_positions: 32,
        ..ModelConfig::default()
    }
}

/// Reserved tokens, tags for `langs`, then `words`.
pub fn vocab(langs: &[&str], words: &[String]) -> Vocab {
    let mut tokens: Vec<String> = ["<pad>", "<unk>", "<bos>", "<eos>"].iter().map(|s| s.to_string()).collect();
    tokens.extend(langs.iter().map(|l| format!("<lang:{l}>")));
    tokens.extend(words.iter().cloned());
    Vocab::from_tokens(tokens).unwrap()
}

pub fn words(script: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{script}_tok_{i}")).collect()
}

pub fn checkpoint(config: ModelConfig, vocab: Vocab, seed: u64) -> Checkpoint {
    let params = init_model(&config, seed).unwrap();
    Checkpoint::new(config, vocab, params)
}

/// The standard small seed checkpoint: `eng` + `fra` over 20 latin tokens.
pub fn seed_checkpoint(seed: u64) -> Checkpoint {
    let v = vocab(&["eng", "fra"], &words("lat", 20));
    checkpoint(tiny_config(v.len()), v, seed)
}

/// Random examples whose ids avoid the reserved range.
pub fn random_batch(vocab_size: usize, rows: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let examples: Vec<Example> = (0..rows)
        .map(|_| {
            let ls = rng.random_range(2..7);
            let lt = rng.random_range(1..6);
            Example {
                src: (0..ls).map(|_| rng.random_range(4..vocab_size)).collect(),
                tgt_tag: 4,
                tgt: (0..lt).map(|_| rng.random_range(4..vocab_size)).collect(),
            }
        })
        .collect();
    Batch::from_examples(&examples)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Four source/target pairs over the `lat` tokens, `eng → fra`.
pub fn toy_direction(vocab: &Vocab) -> TrainDirection {
    let eng = vocab.tag_id("eng").unwrap();
    let fra = vocab.tag_id("fra").unwrap();
    let w0 = vocab.id("lat_tok_0").unwrap();
    let ex = |s: &[usize], t: &[usize]| Example {
        src: std::iter::once(eng).chain(s.iter().map(|i| w0 + i)).chain([3]).collect(),
        tgt_tag: fra,
        tgt: t.iter().map(|i| w0 + i).collect(),
    };
    let train = vec![
        ex(&[0, 1, 2], &[5, 6, 7]),
        ex(&[3, 4], &[9, 8]),
        ex(&[10, 11, 12, 13], &[14, 15, 16, 17]),
        ex(&[2, 0], &[7, 5]),
    ];
    TrainDirection {
        name: "eng-fra".into(),
        source: "eng".into(),
        target: "fra".into(),
        tier: Tier::High,
        dev: train.clone(),
        train,
    }
}

pub fn toy_config(steps: u64) -> TrainConfig {
    TrainConfig {
        peak_lr: 0.01,
        warmup_steps: 20,
        total_steps: steps,
        batch_tokens: 24,
        temperature: 1.0,
        label_smoothing: 0.0,
        seed: 5,
        validate_every: 25,
        ..TrainConfig::default()
    }
}

/// Deterministic `eng → fra` dev examples over the non-reserved ids.
pub fn dev_examples(ck: &Checkpoint, n: usize, seed: u64) -> Vec<Example> {
    let mut rng_seed = seed;
    (0..n)
        .map(|i| {
            rng_seed = rng_seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let v = ck.config.vocab_size;
            let pick = |k: u64| 6 + ((rng_seed >> (k * 5)) as usize % (v - 6));
            Example {
                src: vec![4, pick(1), pick(2), pick(3), EOS_ID],
                tgt_tag: 5,
                tgt: (0..(i % 3 + 1) as u64).map(|k| pick(k + 4)).collect(),
            }
        })
        .collect()
}
