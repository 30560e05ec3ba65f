//! Single-head self-attention block over the rows of a small matrix:
//!
//! ```text
//! H   = LN(Z + softmax_rows(Q K^T / sqrt(d)) V)     Q, K, V = Z W_q, Z W_k, Z W_v
//! out = H + relu(H W_1 + b_1) W_2 + b_2
//! ```
//!
//! Used after slot pooling (on `k` rows, which is not mini-batch consistent
//! by itself but sees only the pooled output) and, for the variance
//! witness, directly on chunk elements.

use rand::Rng;

use crate::encoder::mlp::Linear;
use crate::error::{ensure, Result};
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct SetAttentionBlock {
    dim: usize,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    ff1: Linear,
    ff2: Linear,
}

impl SetAttentionBlock {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dim: usize, group: ParamGroup, rng: &mut R) -> Result<Self> {
        ensure!(dim > 0, "attention block width must be positive");
        Ok(Self {
            dim,
            w_q: store.insert_weight(&format!("{prefix}.w_q"), dim, dim, group, rng)?,
            w_k: store.insert_weight(&format!("{prefix}.w_k"), dim, dim, group, rng)?,
            w_v: store.insert_weight(&format!("{prefix}.w_v"), dim, dim, group, rng)?,
            ln_gain: store.insert(&format!("{prefix}.ln_gain"), Matrix::ones(1, dim), group)?,
            ln_bias: store.insert(&format!("{prefix}.ln_bias"), Matrix::zeros(1, dim), group)?,
            ff1: Linear::new(store, &format!("{prefix}.ff1"), dim, dim, true, group, rng)?,
            ff2: Linear::new(store, &format!("{prefix}.ff2"), dim, dim, true, group, rng)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (rows, cols) = tape.shape(z);
        ensure!(cols == self.dim, "attention block expects width {}, got {cols}", self.dim);
        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let wv = tape.param(store, self.w_v);
        let q = tape.matmul(z, wq)?;
        let k = tape.matmul(z, wk)?;
        let v = tape.matmul(z, wv)?;
        let kt = tape.transpose(k);
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, v)?;
        let res = tape.add(z, mixed)?;
        let h = tape.layernorm_rows(res);
        let gain = tape.param(store, self.ln_gain);
        let gain = tape.broadcast_row(gain, rows)?;
        let h = tape.mul(h, gain)?;
        let bias = tape.param(store, self.ln_bias);
        let bias = tape.broadcast_row(bias, rows)?;
        let h = tape.add(h, bias)?;
        let f = self.ff1.forward_tape(tape, store, h)?;
        let f = tape.relu(f);
        let f = self.ff2.forward_tape(tape, store, f)?;
        tape.add(h, f)
    }

    /// Plain forward through a scratch tape.
    pub fn forward(&self, store: &ParamStore, z: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.forward_tape(&mut tape, store, zv)?;
        Ok(tape.value(out).clone())
    }
}
