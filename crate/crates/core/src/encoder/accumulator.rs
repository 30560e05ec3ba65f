//! Streaming accumulation of slot attention over chunks of a set.
//!
//! A set's slot encoding is `diag(f_bar)^-1 f_hat` where both `f_hat`
//! (`k x d`) and `f_bar` (`k`) are sums over set elements. An
//! [`AccumulatorState`] holds those partial sums for any subset already
//! consumed, so chunks can be folded in one at a time or reduced in a tree
//! with [`AccumulatorState::merge`].
//!
//! For exp-based activations the stored sums are kept relative to a running
//! per-slot maximum `m_i`: the state stores `e^{-m_i} f_hat_i` and
//! `e^{-m_i} f_bar_i`. The shift cancels in [`AccumulatorState::finalize`].

use crate::encoder::config::Activation;
use crate::error::{ensure, Error, Result};
use crate::matrix::{sigmoid, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatorState {
    activation: Activation,
    f_hat: Matrix,
    f_bar: Vec<f64>,
    row_max: Vec<f64>,
    count: usize,
}

impl AccumulatorState {
    /// The identity element for [`merge`](Self::merge).
    pub fn empty(activation: Activation, slots: usize, dim: usize) -> Self {
        let start = if activation.row_shifted() { f64::NEG_INFINITY } else { 0.0 };
        Self {
            activation,
            f_hat: Matrix::zeros(slots, dim),
            f_bar: vec![0.0; slots],
            row_max: vec![start; slots],
            count: 0,
        }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn slots(&self) -> usize {
        self.f_hat.rows()
    }

    pub fn dim(&self) -> usize {
        self.f_hat.cols()
    }

    /// Number of set elements folded in so far.
    pub fn count(&self) -> usize {
        self.count
    }

    /// Stored (shifted) numerator sums.
    pub fn f_hat(&self) -> &Matrix {
        &self.f_hat
    }

    /// Stored (shifted) per-slot normalizer sums.
    pub fn f_bar(&self) -> &[f64] {
        &self.f_bar
    }

    /// Per-slot shift of the stored sums (all zero for unshifted activations).
    pub fn row_max(&self) -> &[f64] {
        &self.row_max
    }

    /// Adds one chunk: applies the activation to the `k x n` logits, then
    /// adds `weights * values` (`values` is `n x d`) and the per-slot weight
    /// sums.
    pub fn activate_and_accumulate(&mut self, logits: &Matrix, values: &Matrix) -> Result<()> {
        let (k, n) = logits.shape();
        ensure!(k == self.slots(), "logits have {k} slot rows, state has {}", self.slots());
        ensure!(n > 0, "empty chunk");
        ensure!(
            values.shape() == (n, self.dim()),
            "values are {}x{}, expected {n}x{}",
            values.rows(),
            values.cols(),
            self.dim()
        );
        if !logits.is_finite() {
            return Err(Error::Domain("non-finite attention logits".into()));
        }

        let effective = effective_logits(logits, self.activation);
        if self.activation.row_shifted() {
            let chunk_max = effective.max_rows();
            for i in 0..k {
                let new_max = self.row_max[i].max(chunk_max[(i, 0)]);
                if new_max > self.row_max[i] {
                    let rescale = (self.row_max[i] - new_max).exp();
                    self.f_bar[i] *= rescale;
                    for v in self.f_hat.row_mut(i) {
                        *v *= rescale;
                    }
                    self.row_max[i] = new_max;
                }
            }
        }
        let weights = activation_weights(&effective, self.activation, &self.row_max);
        let contribution = weights.matmul(values)?;
        self.f_hat.add_assign(&contribution)?;
        for (b, s) in self.f_bar.iter_mut().zip(weights.sum_rows().data()) {
            *b += s;
        }
        self.count += n;
        Ok(())
    }

    /// Combines two partial states. Commutative, associative (up to
    /// rounding), with [`empty`](Self::empty) as identity.
    pub fn merge(&self, other: &AccumulatorState) -> Result<AccumulatorState> {
        ensure!(
            self.activation == other.activation,
            "cannot merge {} state with {} state",
            self.activation,
            other.activation
        );
        ensure!(
            self.f_hat.shape() == other.f_hat.shape(),
            "cannot merge states of shape {:?} and {:?}",
            self.f_hat.shape(),
            other.f_hat.shape()
        );
        let (k, d) = self.f_hat.shape();
        let mut out = AccumulatorState::empty(self.activation, k, d);
        for i in 0..k {
            let m = self.row_max[i].max(other.row_max[i]);
            let sa = shift_factor(self.row_max[i], m);
            let sb = shift_factor(other.row_max[i], m);
            out.row_max[i] = m;
            out.f_bar[i] = sa * self.f_bar[i] + sb * other.f_bar[i];
            for ((o, a), b) in out.f_hat.row_mut(i).iter_mut().zip(self.f_hat.row(i)).zip(other.f_hat.row(i)) {
                *o = sa * a + sb * b;
            }
        }
        out.count = self.count + other.count;
        Ok(out)
    }

    /// The `k x d` slot encoding of everything consumed so far.
    pub fn finalize(&self, normalize_over_set: bool) -> Result<Matrix> {
        ensure!(self.count > 0, "finalize on an empty accumulator");
        let mut out = self.f_hat.clone();
        if normalize_over_set {
            for (i, &b) in self.f_bar.iter().enumerate() {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(Error::DegenerateNormalizer { slot: i, value: b });
                }
                for v in out.row_mut(i) {
                    *v /= b;
                }
            }
        } else if self.activation.row_shifted() {
            for (i, &m) in self.row_max.iter().enumerate() {
                let s = m.exp();
                for v in out.row_mut(i) {
                    *v *= s;
                }
            }
        }
        Ok(out)
    }
}

/// `exp(from - to)`, treating an empty (`-inf`) side as contributing nothing.
fn shift_factor(from: f64, to: f64) -> f64 {
    if from == f64::NEG_INFINITY {
        0.0
    } else {
        (from - to).exp()
    }
}

/// Logits after any column-local shift the activation prescribes:
/// slot-exp subtracts each column's max over slots.
pub fn effective_logits(logits: &Matrix, activation: Activation) -> Matrix {
    match activation {
        Activation::SlotExp => {
            let col_max = logits.max_cols();
            let mut out = logits.clone();
            for r in 0..out.rows() {
                for (v, m) in out.row_mut(r).iter_mut().zip(col_max.data()) {
                    *v -= m;
                }
            }
            out
        }
        _ => logits.clone(),
    }
}

/// Attention weights `nu(sigma(A))` for a chunk of effective logits. For
/// row-shifted activations row `i` is scaled by `exp(-shift[i])`.
pub fn activation_weights(effective: &Matrix, activation: Activation, shift: &[f64]) -> Matrix {
    let (k, n) = effective.shape();
    match activation {
        Activation::Sigmoid => effective.map(sigmoid),
        Activation::Softmax | Activation::SlotExp => {
            let mut w = effective.clone();
            for i in 0..k {
                for v in w.row_mut(i) {
                    *v = (*v - shift[i]).exp();
                }
            }
            w
        }
        Activation::SlotSigmoid => normalize_columns(effective.map(sigmoid)),
        Activation::SlotSoftmax => {
            let col_max = effective.max_cols();
            let mut w = Matrix::zeros(k, n);
            for i in 0..k {
                for (j, (o, &a)) in w.row_mut(i).iter_mut().zip(effective.row(i)).enumerate() {
                    *o = (a - col_max[(0, j)]).exp();
                }
            }
            normalize_columns(w)
        }
    }
}

fn normalize_columns(mut w: Matrix) -> Matrix {
    let sums = w.sum_cols();
    for i in 0..w.rows() {
        for (v, s) in w.row_mut(i).iter_mut().zip(sums.data()) {
            *v /= s;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_chunk(rng: &mut ChaCha8Rng, k: usize, n: usize, d: usize, scale: f64) -> (Matrix, Matrix) {
        let logits = Matrix::random_normal(k, n, scale, rng);
        let values = Matrix::random_normal(n, d, 1.0, rng);
        (logits, values)
    }

    #[test]
    fn sigmoid_at_zero_adds_half_per_element() {
        let mut s = AccumulatorState::empty(Activation::Sigmoid, 2, 3);
        s.activate_and_accumulate(&Matrix::zeros(2, 2), &Matrix::ones(2, 3)).unwrap();
        assert_eq!(s.f_hat(), &Matrix::ones(2, 3));
        assert_eq!(s.f_bar(), &[1.0, 1.0]);
    }

    #[test]
    fn slot_softmax_symmetric_column_splits_evenly() {
        for a in [-300.0, 0.0, 7.5, 450.0] {
            let w = activation_weights(&Matrix::col_vector(&[a, a]), Activation::SlotSoftmax, &[0.0, 0.0]);
            assert_eq!(w.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn slot_normalized_columns_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::SlotSigmoid, Activation::SlotSoftmax] {
            let logits = Matrix::random_normal(5, 9, 20.0, &mut rng);
            let w = activation_weights(&effective_logits(&logits, act), act, &[0.0; 5]);
            for s in w.sum_cols().data() {
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn two_point_softmax_by_definition() {
        let (l1, l2, v1, v2) = (0.3, -1.2, 2.0, -5.0);
        let mut s = AccumulatorState::empty(Activation::Softmax, 1, 1);
        s.activate_and_accumulate(&Matrix::row_vector(&[l1, l2]), &Matrix::col_vector(&[v1, v2]))
            .unwrap();
        let out = s.finalize(true).unwrap();
        let expected = (l1.exp() * v1 + l2.exp() * v2) / (l1.exp() + l2.exp());
        assert!((out[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_logits_give_mean_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values = Matrix::random_normal(6, 3, 1.0, &mut rng);
        let mut s = AccumulatorState::empty(Activation::Softmax, 2, 3);
        s.activate_and_accumulate(&Matrix::zeros(2, 6), &values).unwrap();
        let out = s.finalize(true).unwrap();
        let mean = values.sum_cols().scale(1.0 / 6.0);
        for i in 0..2 {
            for j in 0..3 {
                assert!((out[(i, j)] - mean[(0, j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn chunkings_of_four_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (logits, values) = random_chunk(&mut rng, 3, 4, 2, 3.0);
        for act in Activation::ALL {
            let mut whole = AccumulatorState::empty(act, 3, 2);
            whole.activate_and_accumulate(&logits, &values).unwrap();
            let norm = act.normalizes_over_set();
            let expected = whole.finalize(norm).unwrap();
            for split in [1, 2, 3] {
                let mut s = AccumulatorState::empty(act, 3, 2);
                s.activate_and_accumulate(
                    &logits.transpose().select_rows(&(0..split).collect::<Vec<_>>()).unwrap().transpose(),
                    &values.select_rows(&(0..split).collect::<Vec<_>>()).unwrap(),
                )
                .unwrap();
                s.activate_and_accumulate(
                    &logits.transpose().select_rows(&(split..4).collect::<Vec<_>>()).unwrap().transpose(),
                    &values.select_rows(&(split..4).collect::<Vec<_>>()).unwrap(),
                )
                .unwrap();
                let got = s.finalize(norm).unwrap();
                assert!(got.max_abs_diff(&expected).unwrap() <= 1e-10, "{act} split {split}");
            }
        }
    }

    #[test]
    fn merge_identity_and_commutativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for act in Activation::ALL {
            let (l, v) = random_chunk(&mut rng, 4, 5, 3, 50.0);
            let (l2, v2) = random_chunk(&mut rng, 4, 2, 3, 50.0);
            let mut a = AccumulatorState::empty(act, 4, 3);
            a.activate_and_accumulate(&l, &v).unwrap();
            let mut b = AccumulatorState::empty(act, 4, 3);
            b.activate_and_accumulate(&l2, &v2).unwrap();
            let e = AccumulatorState::empty(act, 4, 3);
            assert_eq!(e.merge(&a).unwrap(), a);
            assert_eq!(a.merge(&e).unwrap(), a);
            let ab = a.merge(&b).unwrap().finalize(act.normalizes_over_set()).unwrap();
            let ba = b.merge(&a).unwrap().finalize(act.normalizes_over_set()).unwrap();
            assert!(ab.max_abs_diff(&ba).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn merge_rejects_mismatched_states() {
        let a = AccumulatorState::empty(Activation::Softmax, 2, 3);
        assert!(a.merge(&AccumulatorState::empty(Activation::Sigmoid, 2, 3)).is_err());
        assert!(a.merge(&AccumulatorState::empty(Activation::Softmax, 3, 3)).is_err());
    }

    #[test]
    fn errors() {
        let mut s = AccumulatorState::empty(Activation::Softmax, 2, 1);
        assert!(s.finalize(true).is_err());
        let bad = Matrix::from_rows(&[[f64::NAN], [0.0]]).unwrap();
        assert!(matches!(
            s.activate_and_accumulate(&bad, &Matrix::ones(1, 1)),
            Err(Error::Domain(_))
        ));
        assert!(s.activate_and_accumulate(&Matrix::zeros(2, 0), &Matrix::zeros(0, 1)).is_err());
        assert!(s.activate_and_accumulate(&Matrix::zeros(3, 1), &Matrix::ones(1, 1)).is_err());
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = AccumulatorState::empty(Activation::Softmax, 2, 2);
        for _ in 0..10 {
            let n = rng.random_range(1..5);
            let (l, v) = random_chunk(&mut rng, 2, n, 2, 700.0);
            s.activate_and_accumulate(&l, &v).unwrap();
        }
        assert!(s.finalize(true).unwrap().is_finite());
    }

    #[test]
    fn unnormalized_finalize_undoes_shift() {
        // Without set normalization the shifted sums are scaled back.
        let mut s = AccumulatorState::empty(Activation::Softmax, 1, 1);
        s.activate_and_accumulate(&Matrix::row_vector(&[1.0, 2.0]), &Matrix::col_vector(&[1.0, 1.0]))
            .unwrap();
        let out = s.finalize(false).unwrap();
        assert!((out[(0, 0)] - (1f64.exp() + 2f64.exp())).abs() < 1e-12);
    }
}
