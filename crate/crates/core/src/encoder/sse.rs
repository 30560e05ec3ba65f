//! Slot-sigmoid pooling followed by a pooling over the `k` slot rows.

use serde::{Deserialize, Serialize};

use crate::encoder::config::Activation;
use crate::encoder::mlp::FeatureExtractor;
use crate::encoder::umbc::{SlotSample, UmbcLayer};
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowPooling {
    Sum,
    Mean,
    Min,
    Max,
}

/// Pools the rows of a `k x d` matrix into `1 x d`.
pub fn pool_rows(z: &Matrix, pooling: RowPooling) -> Matrix {
    match pooling {
        RowPooling::Sum => z.sum_cols(),
        RowPooling::Mean => z.sum_cols().scale(1.0 / z.rows() as f64),
        RowPooling::Max => z.max_cols(),
        RowPooling::Min => z.map(|v| -v).max_cols().map(|v| -v),
    }
}

pub fn pool_rows_tape(tape: &mut Tape, z: Var, pooling: RowPooling) -> Var {
    match pooling {
        RowPooling::Sum => tape.sum_cols(z),
        RowPooling::Mean => {
            let k = tape.shape(z).0 as f64;
            let s = tape.sum_cols(z);
            tape.scale(s, 1.0 / k)
        }
        RowPooling::Max => tape.max_cols(z),
        RowPooling::Min => {
            let n = tape.neg(z);
            let m = tape.max_cols(n);
            tape.neg(m)
        }
    }
}

pub(crate) fn check_sse_layer(layer: &UmbcLayer) -> Result<()> {
    ensure!(
        layer.activation() == Activation::SlotSigmoid && !layer.config().normalizes_over_set(),
        "slot-set pooling needs the slot-sigmoid activation without set normalization, got {}",
        layer.activation()
    );
    Ok(())
}

/// `1 x d` encoding of `x` consumed chunk by chunk with one slot sample.
pub fn sse_encode(
    store: &ParamStore,
    phi: &FeatureExtractor,
    layer: &UmbcLayer,
    x: &Matrix,
    chunks: &[Vec<usize>],
    sample: &SlotSample,
    pooling: RowPooling,
) -> Result<Matrix> {
    check_sse_layer(layer)?;
    ensure!(!chunks.is_empty(), "empty set");
    let q = layer.queries(store, sample)?;
    let mut state = layer.empty_state();
    for chunk in chunks {
        ensure!(!chunk.is_empty(), "empty partition cell");
        let h = phi.forward(store, &x.select_rows(chunk)?)?;
        layer.accumulate(store, &q, &h, &mut state)?;
    }
    Ok(pool_rows(&layer.finalize(&state)?, pooling))
}
