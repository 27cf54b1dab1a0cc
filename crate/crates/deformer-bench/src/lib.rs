//! Shared fixtures for the criterion benchmarks: deterministic models and
//! token streams at two scales, so numbers are comparable across runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use deformer_core::decomposed::{transfer_weights, DeformerModel};
use deformer_core::encoder::{EncoderWeights, ModelConfig};

/// Model shape paired with ready-made inputs.
pub struct Fixture {
    pub name: &'static str,
    pub config: ModelConfig,
    pub weights: EncoderWeights,
    pub model: DeformerModel,
    pub question: Vec<u32>,
    pub passage: Vec<u32>,
}

/// The pipeline's own desk-scale shape and a 4× wider one, both split in
/// the middle.
pub fn fixtures() -> Vec<Fixture> {
    [
        ("desk_d32_n4", 4, 32, 4, 64, 4, 24, 2),
        ("wide_d64_n6", 6, 64, 8, 128, 8, 48, 3),
    ]
    .into_iter()
    .map(|(name, n_layers, hidden_dim, n_heads, ffn_dim, q_max, p_max, split)| {
        let config = ModelConfig {
            n_layers,
            hidden_dim,
            n_heads,
            ffn_dim,
            vocab_size: 64,
            max_positions: q_max + p_max + 3,
            q_max,
            p_max,
            layer_norm_eps: 1e-12,
            seed: 7,
        };
        let weights = EncoderWeights::init(&config).unwrap();
        let model = transfer_weights(&weights, split).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let question = tokens(&mut rng, q_max, config.vocab_size);
        let passage = tokens(&mut rng, p_max, config.vocab_size);
        Fixture { name, config, weights, model, question, passage }
    })
    .collect()
}

/// `count` ids drawn above the reserved range.
pub fn tokens(rng: &mut ChaCha8Rng, count: usize, vocab: usize) -> Vec<u32> {
    (0..count).map(|_| rng.gen_range(4..vocab as u32)).collect()
}

/// A deterministic batch of distinct passages for cache benchmarks.
pub fn passage_batch(count: usize, len: usize, vocab: usize) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    (0..count).map(|_| tokens(&mut rng, len, vocab)).collect()
}
