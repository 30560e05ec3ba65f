//! Consistent set encoders and the pieces they are built from.

pub mod accumulator;
pub mod config;
pub mod deepsets;
pub mod mlp;
pub mod sab;
pub mod sse;
pub mod stack;
pub mod umbc;
pub mod witness;

use crate::error::Result;
use crate::matrix::Matrix;

pub use accumulator::AccumulatorState;
pub use config::{Activation, SlotMode, UmbcConfig};
pub use deepsets::{deepsets_encode, SetPooling, SumAccumulator};
pub use mlp::{FeatureExtractor, Linear, MlpConfig};
pub use sab::SetAttentionBlock;
pub use sse::{sse_encode, RowPooling};
pub use stack::{slot_permute_check, EncoderStack, Frozen, Model, ModelSpec, PoolingSpec, SetStream};
pub use umbc::{SlotSample, UmbcLayer};
pub use witness::ChunkAttentionEncoder;

/// Anything that encodes a set presented as a list of chunks.
pub trait SetEncoder {
    /// Whether the encoding is independent of the chunking.
    fn is_mbc(&self) -> bool;

    fn encode_chunks(&self, x: &Matrix, chunks: &[Vec<usize>]) -> Result<Matrix>;
}
