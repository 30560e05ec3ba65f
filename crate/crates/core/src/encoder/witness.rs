//! A set encoder that is not mini-batch consistent: self-attention over the
//! elements of a chunk before mean pooling. Chunk encodings are averaged
//! ("pseudo-consistent" evaluation), which depends on the partition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::mlp::{FeatureExtractor, MlpConfig};
use crate::encoder::sab::SetAttentionBlock;
use crate::encoder::SetEncoder;
use crate::error::Result;
use crate::harness::variance::chunk_mean;
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};

#[derive(Clone, Debug)]
pub struct ChunkAttentionEncoder {
    store: ParamStore,
    phi: FeatureExtractor,
    block: SetAttentionBlock,
}

impl ChunkAttentionEncoder {
    pub fn new(phi: &MlpConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let phi = FeatureExtractor::new(&mut store, "phi", phi, ParamGroup::Encoder, &mut rng)?;
        let block = SetAttentionBlock::new(&mut store, "sab", phi.output_dim(), ParamGroup::Encoder, &mut rng)?;
        Ok(Self { store, phi, block })
    }

    /// Encoding of a single chunk, `1 x d_h`.
    pub fn encode_chunk(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.phi.forward(&self.store, x)?;
        let z = self.block.forward(&self.store, &h)?;
        Ok(z.sum_cols().scale(1.0 / z.rows() as f64))
    }
}

impl SetEncoder for ChunkAttentionEncoder {
    fn is_mbc(&self) -> bool {
        false
    }

    fn encode_chunks(&self, x: &Matrix, chunks: &[Vec<usize>]) -> Result<Matrix> {
        chunk_mean(x, chunks, |c| self.encode_chunk(c))
    }
}
