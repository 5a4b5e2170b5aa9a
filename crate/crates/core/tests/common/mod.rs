#![allow(dead_code)]

use arena_pref::ingest::{Label, PreferenceRecord};
use arena_pref::model::{LoraConfig, LoraTarget, ModelConfig};
use arena_pref::tokenizer::{format_input, Batch, TokenSequence, VOCAB_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy_config(n_layers: usize, max_len: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB_SIZE,
        d_model: 16,
        n_layers,
        n_heads: 2,
        d_ff: 32,
        max_len,
    }
}

pub fn lora(rank: usize, alpha: f64, frozen_layers: usize) -> LoraConfig {
    LoraConfig {
        rank,
        alpha,
        dropout: 0.0,
        frozen_layers,
        targets: vec![LoraTarget::AttnQ, LoraTarget::AttnV],
    }
}

fn random_text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(1..=max);
    (0..n)
        .map(|_| rng.random_range(b'a'..=b'z') as char)
        .collect()
}

pub fn random_records(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| PreferenceRecord {
            id: format!("x{i}"),
            prompt: random_text(&mut rng, 12),
            response_a: random_text(&mut rng, 30),
            response_b: random_text(&mut rng, 30),
            label: Label::ALL[rng.random_range(0..3)],
        })
        .collect()
}

pub fn random_sequences(n: usize, seed: u64, max_len: usize) -> Vec<TokenSequence> {
    random_records(n, seed)
        .iter()
        .map(|r| format_input(r, max_len).unwrap())
        .collect()
}

pub fn full_batch(seqs: &[TokenSequence]) -> Batch {
    let idx: Vec<usize> = (0..seqs.len()).collect();
    Batch::from_sequences(seqs, &idx)
}

/// Records labelled A iff response A is longer, B iff shorter, Tie otherwise.
pub fn separable_records(n: usize, seed: u64) -> Vec<PreferenceRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let la = rng.random_range(2..=30);
            let lb = rng.random_range(2..=30);
            let label = match la.cmp(&lb) {
                std::cmp::Ordering::Greater => Label::A,
                std::cmp::Ordering::Less => Label::B,
                std::cmp::Ordering::Equal => Label::Tie,
            };
            PreferenceRecord {
                id: format!("s{i}"),
                prompt: "q".repeat(rng.random_range(2..8)),
                response_a: "a".repeat(la),
                response_b: "b".repeat(lb),
                label,
            }
        })
        .collect()
}
