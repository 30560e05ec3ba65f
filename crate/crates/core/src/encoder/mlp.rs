//! Per-element feature extractor: a stack of `Linear + ReLU` layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// `x @ w + b`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.insert_weight(&format!("{name}.weight"), fan_in, fan_out, group, rng)?;
        let bias = if bias {
            Some(store.insert(&format!("{name}.bias"), Matrix::zeros(1, fan_out), group)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.value(self.weight).cols()
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(store.value(self.weight))?;
        if let Some(b) = self.bias {
            let b = store.value(b);
            for r in 0..y.rows() {
                for (v, bi) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bi;
                }
            }
        }
        Ok(y)
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.affine(x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Output width of each layer; the last entry is the feature dimension.
    pub hidden: Vec<usize>,
}

impl MlpConfig {
    pub fn output_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }
}

/// Applied row by row, so any chunking of the input gives the same rows.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    layers: Vec<Linear>,
    input_dim: usize,
    output_dim: usize,
}

impl FeatureExtractor {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: &MlpConfig,
        group: ParamGroup,
        rng: &mut R,
    ) -> Result<Self> {
        ensure!(config.input_dim > 0, "feature extractor input dimension must be positive");
        ensure!(config.hidden.iter().all(|&h| h > 0), "hidden widths must be positive");
        let mut layers = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{prefix}.{i}"), fan_in, h, true, group, rng)?);
            fan_in = h;
        }
        Ok(Self {
            layers,
            input_dim: config.input_dim,
            output_dim: fan_in,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        ensure!(
            x.cols() == self.input_dim,
            "input has {} columns, feature extractor expects {}",
            x.cols(),
            self.input_dim
        );
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(store, &h)?.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        ensure!(
            tape.shape(x).1 == self.input_dim,
            "input has {} columns, feature extractor expects {}",
            tape.shape(x).1,
            self.input_dim
        );
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward_tape(tape, store, h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn extractor(store: &mut ParamStore) -> FeatureExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let config = MlpConfig {
            input_dim: 3,
            hidden: vec![5, 4],
        };
        FeatureExtractor::new(store, "phi", &config, ParamGroup::Encoder, &mut rng).unwrap()
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut store = ParamStore::new();
        let phi = extractor(&mut store);
        let x = Matrix::random_normal(6, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let plain = phi.forward(&store, &x).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let h = phi.forward_tape(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(h), &plain);
        assert_eq!(plain.shape(), (6, 4));
        assert!(plain.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let mut store = ParamStore::new();
        let phi = extractor(&mut store);
        let x = Matrix::random_normal(5, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let whole = phi.forward(&store, &x).unwrap();
        let part = phi.forward(&store, &x.select_rows(&[3, 1]).unwrap()).unwrap();
        assert_eq!(part.row(0), whole.row(3));
        assert_eq!(part.row(1), whole.row(1));
    }

    #[test]
    fn rejects_wrong_width() {
        let mut store = ParamStore::new();
        let phi = extractor(&mut store);
        assert!(phi.forward(&store, &Matrix::zeros(2, 4)).is_err());
    }

    #[test]
    fn empty_hidden_is_identity() {
        let mut store = ParamStore::new();
        let config = MlpConfig {
            input_dim: 2,
            hidden: vec![],
        };
        let phi = FeatureExtractor::new(&mut store, "id", &config, ParamGroup::Encoder, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        let x = Matrix::from_rows(&[[1.0, -3.0]]).unwrap();
        assert_eq!(phi.forward(&store, &x).unwrap(), x);
        assert!(store.is_empty());
    }
}
