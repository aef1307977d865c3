#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sheaf_core::model::{init_model, Activation};
use sheaf_core::{Array, ModelConfig, Parameters};

/// Random model with every weight multiplied by `gain`, so activations are
/// far from the near-linear regime of the default init.
pub fn random_model(layers: usize, heads: usize, d: usize, vocab: usize, seed: u64, gain: f64) -> Parameters {
    let config = ModelConfig::new(layers, heads, d, vocab, 8, seed);
    let p = init_model(&config, seed).unwrap();
    rescale(&p, gain)
}

pub fn rescale(p: &Parameters, gain: f64) -> Parameters {
    let arrays: Vec<Array> = p.named_arrays().into_iter().map(|(_, a)| a.map(|x| x * gain)).collect();
    Parameters::from_arrays(p.config.clone(), arrays).unwrap()
}

/// Identity MLPs and zero query weights, so attention is uniform over the
/// causal prefix and every component is linear in its input.
pub fn linear_model(layers: usize, heads: usize, d: usize, vocab: usize, seed: u64) -> Parameters {
    let mut config = ModelConfig::new(layers, heads, d, vocab, 8, seed);
    config.activation = Activation::Identity;
    let mut p = rescale(&init_model(&config, seed).unwrap(), 20.0);
    for h in &mut p.heads {
        h.w_q = h.w_q.map(|_| 0.0);
    }
    p
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> Vec<usize> {
    let n = rng.random_range(1..=max_len);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
