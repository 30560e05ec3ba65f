//! Fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use umbc::encoder::mlp::MlpConfig;
use umbc::encoder::stack::{ModelSpec, PoolingSpec};
use umbc::{Activation, Matrix, Model, UmbcConfig};

/// A slot-attention stack at the clustering experiment's width: 64 hidden
/// units, `k` slots, one attention block.
pub fn slot_model(k: usize, activation: Activation) -> Model {
    let spec = ModelSpec {
        phi: MlpConfig {
            input_dim: 2,
            hidden: vec![64],
        },
        pooling: PoolingSpec::Umbc(UmbcConfig::new(k, 64, 64, 0, activation)),
        attention_blocks: 1,
        decoder_hidden: vec![64],
        components: k,
        outputs_per_component: 5,
    };
    Model::new(&spec, 0).expect("valid benchmark spec")
}

pub fn points(n: usize, seed: u64) -> Matrix {
    Matrix::random_normal(n, 2, 1.5, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Consecutive chunks of `chunk` indices covering `0..n`.
pub fn contiguous_chunks(n: usize, chunk: usize) -> Vec<Vec<usize>> {
    (0..n).step_by(chunk).map(|s| (s..(s + chunk).min(n)).collect()).collect()
}
