//! The slot-attention pooling layer.
//!
//! `k` slots `S` (`k x d_s`) attend over the per-element features `H`
//! (`n x d_h`) of a set:
//!
//! ```text
//! Q = LN(S W_q)     K = H W_k     V = H W_v     A = Q K^T / sqrt(d)
//! ```
//!
//! The activation turns `A` into weights `W` (`k x n`), and the output is
//! `diag(f_bar)^-1 f_hat` with `f_hat = W V` and `f_bar = W 1`, both sums
//! over set elements. Everything per element is independent of the other
//! elements of its chunk, which is what makes the layer streamable.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::encoder::accumulator::AccumulatorState;
use crate::encoder::config::{Activation, SlotMode, UmbcConfig};
use crate::error::{ensure, Error, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// The slot draw used for one encode call. Stochastic slots are
/// `mu + sqrt(softplus(v)) * eps`; `eps` is drawn once and reused for every
/// chunk of the set, which is what keeps stochastic slots consistent.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotSample {
    Deterministic,
    Stochastic { eps: Matrix },
}

impl SlotSample {
    /// The same draw with slot rows reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SlotSample> {
        Ok(match self {
            SlotSample::Deterministic => SlotSample::Deterministic,
            SlotSample::Stochastic { eps } => SlotSample::Stochastic {
                eps: eps.select_rows(perm)?,
            },
        })
    }
}

#[derive(Clone, Debug)]
enum SlotParams {
    Deterministic { slots: ParamId },
    Stochastic { mu: ParamId, v: ParamId },
}

#[derive(Clone, Debug)]
pub struct UmbcLayer {
    config: UmbcConfig,
    slots: SlotParams,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    qkv_bias: Option<[ParamId; 3]>,
    ln: Option<(ParamId, ParamId)>,
}

impl UmbcLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, config: &UmbcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let g = ParamGroup::Encoder;
        let (k, ds, d, dh) = (config.slots, config.slot_dim, config.attn_dim, config.feature_dim);
        let slots = match config.slot_mode {
            SlotMode::Deterministic => SlotParams::Deterministic {
                slots: store.insert(&format!("{prefix}.slots"), Matrix::random_normal(k, ds, 1.0, rng), g)?,
            },
            SlotMode::StochasticIid | SlotMode::StochasticPerSlot => {
                let rows = if config.slot_mode == SlotMode::StochasticIid { 1 } else { k };
                SlotParams::Stochastic {
                    mu: store.insert(&format!("{prefix}.slot_mu"), Matrix::random_normal(rows, ds, 1.0, rng), g)?,
                    v: store.insert(&format!("{prefix}.slot_v"), Matrix::zeros(rows, ds), g)?,
                }
            }
        };
        let w_q = store.insert_weight(&format!("{prefix}.w_q"), ds, d, g, rng)?;
        let w_k = store.insert_weight(&format!("{prefix}.w_k"), dh, d, g, rng)?;
        let w_v = store.insert_weight(&format!("{prefix}.w_v"), dh, d, g, rng)?;
        let qkv_bias = if config.qkv_bias {
            let mut ids = [w_q; 3];
            for (id, name) in ids.iter_mut().zip(["b_q", "b_k", "b_v"]) {
                *id = store.insert(&format!("{prefix}.{name}"), Matrix::zeros(1, d), g)?;
            }
            Some(ids)
        } else {
            None
        };
        let ln = if config.ln_affine {
            Some((
                store.insert(&format!("{prefix}.ln_gain"), Matrix::ones(1, d), g)?,
                store.insert(&format!("{prefix}.ln_bias"), Matrix::zeros(1, d), g)?,
            ))
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            slots,
            w_q,
            w_k,
            w_v,
            qkv_bias,
            ln,
        })
    }

    pub fn config(&self) -> &UmbcConfig {
        &self.config
    }

    pub fn slots(&self) -> usize {
        self.config.slots
    }

    pub fn attn_dim(&self) -> usize {
        self.config.attn_dim
    }

    pub fn activation(&self) -> Activation {
        self.config.activation
    }

    /// Draws the per-set slot sample (a no-op for deterministic slots).
    pub fn sample_slots<R: Rng + ?Sized>(&self, rng: &mut R) -> SlotSample {
        match self.slots {
            SlotParams::Deterministic { .. } => SlotSample::Deterministic,
            SlotParams::Stochastic { .. } => {
                let (k, ds) = (self.config.slots, self.config.slot_dim);
                let eps = (0..k * ds).map(|_| rng.sample(StandardNormal)).collect();
                SlotSample::Stochastic {
                    eps: Matrix::from_vec(k, ds, eps).expect("length matches"),
                }
            }
        }
    }

    /// Reorders the slot parameters so that new slot `i` is old slot
    /// `perm[i]`. Shared (i.i.d.) slot parameters are left alone; their
    /// order lives in the [`SlotSample`].
    pub fn permute_slots(&self, store: &mut ParamStore, perm: &[usize]) -> Result<()> {
        check_permutation(perm, self.config.slots)?;
        let ids: Vec<ParamId> = match self.slots {
            SlotParams::Deterministic { slots } => vec![slots],
            SlotParams::Stochastic { mu, v } => {
                if store.value(mu).rows() == 1 {
                    vec![]
                } else {
                    vec![mu, v]
                }
            }
        };
        for id in ids {
            let permuted = store.value(id).select_rows(perm)?;
            *store.value_mut(id) = permuted;
        }
        Ok(())
    }

    /// `k x d_s` slot matrix on the tape.
    pub fn slot_matrix_tape(&self, tape: &mut Tape, store: &ParamStore, sample: &SlotSample) -> Result<Var> {
        match (&self.slots, sample) {
            (SlotParams::Deterministic { slots }, SlotSample::Deterministic) => Ok(tape.param(store, *slots)),
            (SlotParams::Stochastic { mu, v }, SlotSample::Stochastic { eps }) => {
                let k = self.config.slots;
                ensure!(
                    eps.shape() == (k, self.config.slot_dim),
                    "slot sample is {}x{}, expected {k}x{}",
                    eps.rows(),
                    eps.cols(),
                    self.config.slot_dim
                );
                let mut mu = tape.param(store, *mu);
                let mut v = tape.param(store, *v);
                if tape.shape(mu).0 == 1 {
                    mu = tape.broadcast_row(mu, k)?;
                    v = tape.broadcast_row(v, k)?;
                }
                let var = tape.softplus(v);
                let std = tape.sqrt(var)?;
                let eps = tape.constant(eps.clone());
                let noise = tape.mul(std, eps)?;
                tape.add(mu, noise)
            }
            _ => Err(Error::Contract("slot sample does not match the slot mode".into())),
        }
    }

    /// `Q = LN(S W_q)` on the tape, `k x d`.
    pub fn queries_tape(&self, tape: &mut Tape, store: &ParamStore, sample: &SlotSample) -> Result<Var> {
        let s = self.slot_matrix_tape(tape, store, sample)?;
        let w = tape.param(store, self.w_q);
        let b = self.qkv_bias.map(|b| tape.param(store, b[0]));
        let q = tape.affine(s, w, b)?;
        let q = tape.layernorm_rows(q);
        match self.ln {
            Some((gain, bias)) => {
                let k = self.config.slots;
                let gain = tape.param(store, gain);
                let gain = tape.broadcast_row(gain, k)?;
                let q = tape.mul(q, gain)?;
                let bias = tape.param(store, bias);
                let bias = tape.broadcast_row(bias, k)?;
                tape.add(q, bias)
            }
            None => Ok(q),
        }
    }

    /// Plain-matrix queries; evaluated on a scratch tape so the value is
    /// identical to the one used in training.
    pub fn queries(&self, store: &ParamStore, sample: &SlotSample) -> Result<Matrix> {
        let mut tape = Tape::new();
        let q = self.queries_tape(&mut tape, store, sample)?;
        Ok(tape.value(q).clone())
    }

    fn check_features(&self, shape: (usize, usize)) -> Result<()> {
        ensure!(shape.0 > 0, "empty chunk");
        ensure!(
            shape.1 == self.config.feature_dim,
            "features have {} columns, slot layer expects {}",
            shape.1,
            self.config.feature_dim
        );
        Ok(())
    }

    /// Keys and values `(n x d, n x d)` of per-element features.
    pub fn keys_values(&self, store: &ParamStore, features: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_features(features.shape())?;
        let mut keys = features.matmul(store.value(self.w_k))?;
        let mut values = features.matmul(store.value(self.w_v))?;
        if let Some([_, bk, bv]) = self.qkv_bias {
            keys = keys.add(&store.value(bk).broadcast_row(keys.rows())?)?;
            values = values.add(&store.value(bv).broadcast_row(values.rows())?)?;
        }
        Ok((keys, values))
    }

    pub fn keys_values_tape(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<(Var, Var)> {
        self.check_features(tape.shape(features))?;
        let wk = tape.param(store, self.w_k);
        let wv = tape.param(store, self.w_v);
        let (bk, bv) = match self.qkv_bias {
            Some([_, bk, bv]) => (Some(tape.param(store, bk)), Some(tape.param(store, bv))),
            None => (None, None),
        };
        let keys = tape.affine(features, wk, bk)?;
        let values = tape.affine(features, wv, bv)?;
        Ok((keys, values))
    }

    fn inv_sqrt_d(&self) -> f64 {
        1.0 / (self.config.attn_dim as f64).sqrt()
    }

    /// `k x n` logits `Q K^T / sqrt(d)`.
    pub fn logits(&self, queries: &Matrix, keys: &Matrix) -> Result<Matrix> {
        Ok(queries.matmul_t(keys)?.scale(self.inv_sqrt_d()))
    }

    /// Logits for one chunk of per-element features.
    pub fn attention_logits(&self, store: &ParamStore, queries: &Matrix, features: &Matrix) -> Result<Matrix> {
        let (keys, _) = self.keys_values(store, features)?;
        self.logits(queries, &keys)
    }

    pub fn empty_state(&self) -> AccumulatorState {
        AccumulatorState::empty(self.config.activation, self.config.slots, self.config.attn_dim)
    }

    /// Folds one chunk of features into `state`.
    pub fn accumulate(&self, store: &ParamStore, queries: &Matrix, features: &Matrix, state: &mut AccumulatorState) -> Result<()> {
        let (keys, values) = self.keys_values(store, features)?;
        let logits = self.logits(queries, &keys)?;
        state.activate_and_accumulate(&logits, &values)
    }

    pub fn finalize(&self, state: &AccumulatorState) -> Result<Matrix> {
        state.finalize(self.config.normalizes_over_set())
    }

    /// Output on the tape for a set whose elements split into `live`
    /// features (recorded, gradients flow) and a `frozen` accumulator of
    /// the remaining elements (a constant on the tape). The value equals
    /// the plain streaming encoding of the whole set.
    pub fn pool_tape(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        live: Option<Var>,
        frozen: &AccumulatorState,
    ) -> Result<Var> {
        let (k, d) = (self.config.slots, self.config.attn_dim);
        ensure!(
            frozen.activation() == self.config.activation && frozen.slots() == k && frozen.dim() == d,
            "frozen accumulator does not match the slot layer"
        );
        ensure!(tape.shape(queries) == (k, d), "queries must be {k}x{d}");
        let activation = self.config.activation;
        let mut row_max = frozen.row_max().to_vec();

        let live_sums = match live {
            Some(features) => {
                let (keys, values) = self.keys_values_tape(tape, store, features)?;
                let kt = tape.transpose(keys);
                let raw = tape.matmul(queries, kt)?;
                let logits = tape.scale(raw, self.inv_sqrt_d());
                if !tape.value(logits).is_finite() {
                    return Err(Error::Domain("non-finite attention logits".into()));
                }
                let weights = self.weights_tape(tape, logits, &mut row_max)?;
                let f_hat = tape.matmul(weights, values)?;
                let f_bar = tape.sum_rows(weights);
                Some((f_hat, f_bar))
            }
            None => None,
        };

        let frozen_sums = if frozen.count() > 0 {
            let mut f_hat = frozen.f_hat().clone();
            let mut f_bar = Matrix::col_vector(frozen.f_bar());
            if activation.row_shifted() {
                for i in 0..k {
                    let s = (frozen.row_max()[i] - row_max[i]).exp();
                    f_bar[(i, 0)] *= s;
                    for v in f_hat.row_mut(i) {
                        *v *= s;
                    }
                }
            }
            Some((tape.constant(f_hat), tape.constant(f_bar)))
        } else {
            None
        };

        let (f_hat, f_bar) = match (live_sums, frozen_sums) {
            (Some((lh, lb)), Some((fh, fb))) => (tape.add(lh, fh)?, tape.add(lb, fb)?),
            (Some(l), None) => l,
            (None, Some(f)) => f,
            (None, None) => return Err(Error::Contract("slot pooling over an empty set".into())),
        };
        if !self.config.normalizes_over_set() {
            return Ok(f_hat);
        }
        for (slot, &value) in tape.value(f_bar).data().iter().enumerate() {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::DegenerateNormalizer { slot, value });
            }
        }
        let f_bar = tape.broadcast_col(f_bar, d)?;
        tape.div(f_hat, f_bar)
    }

    /// Attention weights for live logits. For row-shifted activations the
    /// shift `row_max` is raised to cover the live logits and used as a
    /// constant.
    fn weights_tape(&self, tape: &mut Tape, logits: Var, row_max: &mut [f64]) -> Result<Var> {
        let (k, n) = tape.shape(logits);
        match self.config.activation {
            Activation::Sigmoid => Ok(tape.sigmoid(logits)),
            Activation::SlotSigmoid => {
                let s = tape.sigmoid(logits);
                let col = tape.sum_cols(s);
                let col = tape.broadcast_row(col, k)?;
                tape.div(s, col)
            }
            Activation::SlotSoftmax => {
                let t = tape.transpose(logits);
                let w = tape.softmax_rows(t)?;
                Ok(tape.transpose(w))
            }
            Activation::Softmax | Activation::SlotExp => {
                let effective = if self.config.activation == Activation::SlotExp {
                    let col_max = tape.max_cols(logits);
                    let col_max = tape.broadcast_row(col_max, k)?;
                    tape.sub(logits, col_max)?
                } else {
                    logits
                };
                let live_max = tape.value(effective).max_rows();
                for (m, l) in row_max.iter_mut().zip(live_max.data()) {
                    *m = m.max(*l);
                }
                let shift = tape.constant(Matrix::col_vector(row_max).broadcast_col(n)?);
                let shifted = tape.sub(effective, shift)?;
                Ok(tape.exp(shifted))
            }
        }
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    ensure!(perm.len() == n, "permutation has length {}, expected {n}", perm.len());
    for &p in perm {
        ensure!(p < n && !seen[p], "{perm:?} is not a permutation of 0..{n}");
        seen[p] = true;
    }
    Ok(())
}
