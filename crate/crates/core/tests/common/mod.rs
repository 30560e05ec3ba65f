#![allow(dead_code)]

use rand::Rng;
use umbc::encoder::mlp::MlpConfig;
use umbc::encoder::stack::{ModelSpec, PoolingSpec};
use umbc::{Activation, Matrix, UmbcConfig};

pub fn phi(hidden: &[usize]) -> MlpConfig {
    MlpConfig {
        input_dim: 2,
        hidden: hidden.to_vec(),
    }
}

pub fn spec(phi_hidden: &[usize], pooling: PoolingSpec, attention_blocks: usize, components: usize) -> ModelSpec {
    ModelSpec {
        phi: phi(phi_hidden),
        pooling,
        attention_blocks,
        decoder_hidden: vec![],
        components,
        outputs_per_component: 5,
    }
}

/// Slot pooling with `k` slots, all widths `d`.
pub fn umbc(k: usize, d: usize, activation: Activation) -> PoolingSpec {
    PoolingSpec::Umbc(UmbcConfig::new(k, d, d, 0, activation))
}

/// The small slot-attention + attention-block + mixture-head stack used by
/// the gradient oracles.
pub fn fixture_spec(activation: Activation) -> ModelSpec {
    spec(&[6], umbc(2, 4, activation), 1, 2)
}

pub fn gaussian_set<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix {
    Matrix::random_normal(n, 2, 1.5, rng)
}

/// Random partition of `0..n` into chunks of random sizes in `1..=max`.
pub fn ragged_chunks<R: Rng + ?Sized>(n: usize, max: usize, rng: &mut R) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let len = rng.random_range(1..=max).min(n - start);
        chunks.push(order[start..start + len].to_vec());
        start += len;
    }
    chunks
}

pub fn report(criterion: &str, pass: bool, detail: &str) {
    println!("criterion {criterion}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
}
