//! Sum / mean pooling of per-element features.

use serde::{Deserialize, Serialize};

use crate::encoder::mlp::FeatureExtractor;
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SetPooling {
    Sum,
    Mean,
}

/// Running feature sum and element count.
#[derive(Clone, Debug, PartialEq)]
pub struct SumAccumulator {
    sum: Matrix,
    count: usize,
}

impl SumAccumulator {
    pub fn empty(dim: usize) -> Self {
        Self {
            sum: Matrix::zeros(1, dim),
            count: 0,
        }
    }

    pub fn add_chunk(&mut self, features: &Matrix) -> Result<()> {
        ensure!(features.rows() > 0, "empty chunk");
        self.sum.add_assign(&features.sum_cols())?;
        self.count += features.rows();
        Ok(())
    }

    pub fn merge(&self, other: &SumAccumulator) -> Result<SumAccumulator> {
        Ok(SumAccumulator {
            sum: self.sum.add(&other.sum)?,
            count: self.count + other.count,
        })
    }

    pub fn sum(&self) -> &Matrix {
        &self.sum
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finalize(&self, pooling: SetPooling) -> Result<Matrix> {
        ensure!(self.count > 0, "finalize on an empty accumulator");
        Ok(match pooling {
            SetPooling::Sum => self.sum.clone(),
            SetPooling::Mean => self.sum.scale(1.0 / self.count as f64),
        })
    }
}

/// `1 x d_h` pooled features of `x` consumed chunk by chunk.
pub fn deepsets_encode(
    store: &ParamStore,
    phi: &FeatureExtractor,
    x: &Matrix,
    chunks: &[Vec<usize>],
    pooling: SetPooling,
) -> Result<Matrix> {
    ensure!(!chunks.is_empty(), "empty set");
    let mut acc = SumAccumulator::empty(phi.output_dim());
    for chunk in chunks {
        ensure!(!chunk.is_empty(), "empty partition cell");
        acc.add_chunk(&phi.forward(store, &x.select_rows(chunk)?)?)?;
    }
    acc.finalize(pooling)
}

/// Pooling on the tape with live features and a constant frozen sum.
pub fn pool_tape(
    tape: &mut Tape,
    live: Option<Var>,
    frozen: &SumAccumulator,
    pooling: SetPooling,
) -> Result<Var> {
    let (mut total, mut count) = (None, frozen.count());
    if let Some(h) = live {
        count += tape.shape(h).0;
        total = Some(tape.sum_cols(h));
    }
    if frozen.count() > 0 {
        let c = tape.constant(frozen.sum().clone());
        total = Some(match total {
            Some(t) => tape.add(t, c)?,
            None => c,
        });
    }
    let total = total.ok_or_else(|| crate::error::contract!("pooling over an empty set"))?;
    Ok(match pooling {
        SetPooling::Sum => total,
        SetPooling::Mean => tape.scale(total, 1.0 / count as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::mlp::MlpConfig;
    use crate::params::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(store: &mut ParamStore, dim: usize) -> FeatureExtractor {
        let config = MlpConfig {
            input_dim: dim,
            hidden: vec![],
        };
        FeatureExtractor::new(store, "phi", &config, ParamGroup::Encoder, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn mean_of_one_and_three() {
        let mut store = ParamStore::new();
        let phi = identity(&mut store, 1);
        let x = Matrix::col_vector(&[1.0, 3.0]);
        let out = deepsets_encode(&store, &phi, &x, &[vec![0, 1]], SetPooling::Mean).unwrap();
        assert_eq!(out, Matrix::scalar(2.0));
    }

    #[test]
    fn streamed_mean_matches_monolithic() {
        let mut store = ParamStore::new();
        let phi = identity(&mut store, 3);
        let x = Matrix::random_normal(4, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let whole = deepsets_encode(&store, &phi, &x, &[vec![0, 1, 2, 3]], SetPooling::Mean).unwrap();
        let split = deepsets_encode(&store, &phi, &x, &[vec![2], vec![0, 3, 1]], SetPooling::Mean).unwrap();
        assert!(whole.max_abs_diff(&split).unwrap() <= 1e-15);
    }

    #[test]
    fn sum_of_integers_is_exact_over_any_partition() {
        let mut store = ParamStore::new();
        let phi = identity(&mut store, 2);
        let x = Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.0], [5.0, 6.0], [-7.0, 8.0], [9.0, 10.0]]).unwrap();
        let whole = deepsets_encode(&store, &phi, &x, &[(0..5).collect()], SetPooling::Sum).unwrap();
        for chunks in [vec![vec![4], vec![0, 1], vec![2, 3]], vec![vec![3, 1, 0, 2], vec![4]]] {
            assert_eq!(deepsets_encode(&store, &phi, &x, &chunks, SetPooling::Sum).unwrap(), whole);
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let mut store = ParamStore::new();
        let phi = identity(&mut store, 1);
        let x = Matrix::col_vector(&[1.0]);
        assert!(deepsets_encode(&store, &phi, &x, &[], SetPooling::Mean).is_err());
        assert!(deepsets_encode(&store, &phi, &x, &[vec![0], vec![]], SetPooling::Mean).is_err());
        assert!(SumAccumulator::empty(1).finalize(SetPooling::Sum).is_err());
    }

    #[test]
    fn tape_pooling_matches_plain() {
        let x = Matrix::random_normal(5, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let mut frozen = SumAccumulator::empty(2);
        frozen.add_chunk(&x.select_rows(&[3, 4]).unwrap()).unwrap();
        let mut tape = Tape::new();
        let live = tape.constant(x.select_rows(&[0, 1, 2]).unwrap());
        let out = pool_tape(&mut tape, Some(live), &frozen, SetPooling::Mean).unwrap();
        let expected = x.sum_cols().scale(0.2);
        assert!(tape.value(out).max_abs_diff(&expected).unwrap() <= 1e-15);
    }
}
