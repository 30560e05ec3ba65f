//! Masked forward passes and the three training regimes.
//!
//! * `unbiased`: each set is partitioned, a few cells stay live and the rest
//!   are stop-gradded. Two losses share one forward pass: the encoder loss
//!   scaled by `|cells| / |live|` updates encoder parameters, the decoder
//!   loss scaled by `1 / |live|` updates decoder parameters.
//! * `biased`: the model sees one random cell; all parameters follow the
//!   plain gradient of that loss.
//! * `full`: every cell live, plain gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::stack::{EncoderStack, Frozen};
use crate::encoder::umbc::SlotSample;
use crate::error::{ensure, Error, Result};
use crate::estimator::optim::Optimizer;
use crate::estimator::partition::{make_partition, GradPlan, Partition};
use crate::estimator::SetLoss;
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Gradients, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Unbiased,
    Biased,
    Full,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::Full, EstimatorKind::Unbiased, EstimatorKind::Biased];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Unbiased => "unbiased",
            EstimatorKind::Biased => "biased",
            EstimatorKind::Full => "full",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOptions {
    pub estimator: EstimatorKind,
    pub chunk_size: usize,
    /// Live cells per set for the unbiased estimator.
    pub grad_subsets: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean unscaled loss over the batch.
    pub loss: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_lambda: f64,
    /// Nodes on the training tape. Stop-gradded cells are forwarded off the
    /// tape and add a fixed number of constant nodes.
    pub live_tape_nodes: usize,
    /// Partition cells across the batch.
    pub chunks: usize,
}

/// Pooled output of `x` on the tape: live cells recorded, all other cells
/// streamed off the tape and added as constants. The value equals the plain
/// streaming encoding; only gradients differ.
pub fn masked_forward(
    stack: &EncoderStack,
    store: &ParamStore,
    tape: &mut Tape,
    x: &Matrix,
    plan: &GradPlan,
    sample: &SlotSample,
) -> Result<Var> {
    ensure!(
        plan.partition().set_size() == x.rows(),
        "plan covers {} elements, set has {}",
        plan.partition().set_size(),
        x.rows()
    );
    let frozen = stack.accumulate_cells(store, x, plan.frozen_cells(), sample)?;
    stack.pool_tape(tape, store, x, &plan.live_rows(), &frozen, sample)
}

/// Pooled output of a single cell, as if it were the whole set.
pub fn subset_forward(
    stack: &EncoderStack,
    store: &ParamStore,
    tape: &mut Tape,
    x: &Matrix,
    cell: &[usize],
    sample: &SlotSample,
) -> Result<Var> {
    ensure!(!cell.is_empty(), "empty partition cell");
    let empty: Frozen = stack.accumulate_cells(store, x, std::iter::empty(), sample)?;
    stack.pool_tape(tape, store, x, cell, &empty, sample)
}

/// Adds the gradients of `grads` for parameters in `group` (all parameters
/// when `None`) into the store.
pub(crate) fn add_grads(grads: &Gradients, store: &mut ParamStore, group: Option<ParamGroup>) -> Result<()> {
    for (id, g) in grads.params() {
        if group.is_none_or(|gr| store.group(id) == gr) {
            store.grad_mut(id).add_assign(g)?;
        }
    }
    Ok(())
}

pub(crate) fn check_finite_loss(tape: &Tape, loss: Var, what: &str) -> Result<f64> {
    let v = tape.value(loss).item()?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("non-finite {what} loss {v}")));
    }
    Ok(v)
}

/// One set's contribution: the loss node and its two scale factors.
struct SetTerm {
    loss: Var,
    scale_encoder: f64,
    scale_decoder: f64,
}

fn set_term<R: Rng + ?Sized>(
    stack: &EncoderStack,
    store: &ParamStore,
    tape: &mut Tape,
    x: &Matrix,
    loss: &dyn SetLoss,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<(SetTerm, usize)> {
    let partition = make_partition(x.rows(), opts.chunk_size, rng)?;
    let cells = partition.len();
    let sample = stack.sample_slots(rng);
    // Regime-specific draws come from a side stream so every regime consumes
    // the main stream identically.
    let mut side = ChaCha8Rng::seed_from_u64(rng.random());
    let (pooled, scale_encoder, scale_decoder) = match opts.estimator {
        EstimatorKind::Unbiased => {
            let plan = GradPlan::sample(partition, opts.grad_subsets, &mut side)?;
            let pooled = masked_forward(stack, store, tape, x, &plan, &sample)?;
            (pooled, plan.scale_encoder, plan.scale_decoder)
        }
        EstimatorKind::Full => {
            let plan = GradPlan::full(partition);
            (masked_forward(stack, store, tape, x, &plan, &sample)?, 1.0, 1.0)
        }
        EstimatorKind::Biased => {
            let cell = &partition.cells()[side.random_range(0..cells)];
            (subset_forward(stack, store, tape, x, cell, &sample)?, 1.0, 1.0)
        }
    };
    let out = stack.decode_tape(tape, store, pooled)?;
    let l = loss.loss(tape, out, x)?;
    Ok((
        SetTerm {
            loss: l,
            scale_encoder,
            scale_decoder,
        },
        cells,
    ))
}

fn weighted_sum(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in terms {
        let s = tape.scale(v, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    acc.ok_or_else(|| Error::Contract("empty batch".into()))
}

/// Computes the regime's gradients for a batch and leaves them in the
/// store's gradient slots (previous gradients are cleared).
pub fn estimate_gradients<R: Rng + ?Sized>(
    stack: &EncoderStack,
    store: &mut ParamStore,
    batch: &[&Matrix],
    loss: &dyn SetLoss,
    opts: &StepOptions,
    rng: &mut R,
) -> Result<StepReport> {
    ensure!(!batch.is_empty(), "empty batch");
    ensure!(opts.chunk_size > 0, "chunk size must be positive");
    ensure!(opts.grad_subsets > 0, "need at least one gradient cell");
    store.zero_grads();
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(batch.len());
    let mut chunks = 0;
    for x in batch {
        let (term, cells) = set_term(stack, store, &mut tape, x, loss, opts, rng)?;
        terms.push(term);
        chunks += cells;
    }
    let m = batch.len() as f64;
    let mut loss_sum = 0.0;
    for t in &terms {
        loss_sum += check_finite_loss(&tape, t.loss, "training")?;
    }
    let enc: Vec<(Var, f64)> = terms.iter().map(|t| (t.loss, t.scale_encoder / m)).collect();
    let dec: Vec<(Var, f64)> = terms.iter().map(|t| (t.loss, t.scale_decoder / m)).collect();
    let l_enc = weighted_sum(&mut tape, &enc)?;
    if enc == dec {
        let live_tape_nodes = tape.len();
        let grads = tape.backward(l_enc)?;
        add_grads(&grads, store, None)?;
        return Ok(report(store, loss_sum / m, live_tape_nodes, chunks));
    }
    let l_dec = weighted_sum(&mut tape, &dec)?;
    let live_tape_nodes = tape.len();
    let g_enc = tape.backward(l_enc)?;
    add_grads(&g_enc, store, Some(ParamGroup::Encoder))?;
    drop(g_enc);
    let g_dec = tape.backward(l_dec)?;
    add_grads(&g_dec, store, Some(ParamGroup::Decoder))?;
    Ok(report(store, loss_sum / m, live_tape_nodes, chunks))
}

fn report(store: &ParamStore, loss: f64, live_tape_nodes: usize, chunks: usize) -> StepReport {
    StepReport {
        loss,
        grad_norm_theta: store.grad_norm(ParamGroup::Encoder),
        grad_norm_lambda: store.grad_norm(ParamGroup::Decoder),
        live_tape_nodes,
        chunks,
    }
}

/// Gradient estimate plus one optimizer update.
pub fn train_step<R: Rng + ?Sized>(
    stack: &EncoderStack,
    store: &mut ParamStore,
    batch: &[&Matrix],
    loss: &dyn SetLoss,
    opts: &StepOptions,
    optimizer: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    let report = estimate_gradients(stack, store, batch, loss, opts, rng)?;
    optimizer.step(store)?;
    Ok(report)
}

/// The single-cell baseline: [`train_step`] with [`EstimatorKind::Biased`].
pub fn biased_step<R: Rng + ?Sized>(
    stack: &EncoderStack,
    store: &mut ParamStore,
    batch: &[&Matrix],
    loss: &dyn SetLoss,
    chunk_size: usize,
    optimizer: &mut Optimizer,
    rng: &mut R,
) -> Result<StepReport> {
    let opts = StepOptions {
        estimator: EstimatorKind::Biased,
        chunk_size,
        grad_subsets: 1,
    };
    train_step(stack, store, batch, loss, &opts, optimizer, rng)
}

/// Loss of the model's full-set output (no gradients).
pub fn full_set_loss(stack: &EncoderStack, store: &ParamStore, x: &Matrix, loss: &dyn SetLoss, sample: &SlotSample) -> Result<f64> {
    let chunks = Partition::contiguous(x.rows(), x.rows())?;
    let pooled = stack.pool(store, x, chunks.cells(), sample)?;
    let mut tape = Tape::new();
    let p = tape.constant(pooled);
    let out = stack.decode_tape(&mut tape, store, p)?;
    let l = loss.loss(&mut tape, out, x)?;
    check_finite_loss(&tape, l, "evaluation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::mlp::MlpConfig;
    use crate::encoder::stack::{ModelSpec, PoolingSpec};
    use crate::encoder::{Activation, UmbcConfig};
    use crate::estimator::oracle::full_gradient;
    use crate::mog::MixtureNll;

    fn setup(seed: u64) -> (EncoderStack, ParamStore) {
        let spec = ModelSpec {
            phi: MlpConfig {
                input_dim: 2,
                hidden: vec![6],
            },
            pooling: PoolingSpec::Umbc(UmbcConfig::new(3, 4, 4, 6, Activation::Softmax)),
            attention_blocks: 1,
            decoder_hidden: vec![],
            components: 3,
            outputs_per_component: 5,
        };
        let mut store = ParamStore::new();
        let stack = EncoderStack::new(&mut store, &spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (stack, store)
    }

    fn opts(estimator: EstimatorKind, chunk_size: usize, grad_subsets: usize) -> StepOptions {
        StepOptions {
            estimator,
            chunk_size,
            grad_subsets,
        }
    }

    #[test]
    fn tape_size_does_not_grow_with_the_set() {
        let (stack, mut store) = setup(1);
        let mut nodes = Vec::new();
        for n in [64, 256, 1024] {
            let x = Matrix::random_normal(n, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(n as u64));
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let r = estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Unbiased, 8, 1), &mut rng)
                .unwrap();
            assert_eq!(r.chunks, n / 8);
            nodes.push(r.live_tape_nodes);
        }
        assert!(nodes.windows(2).all(|w| w[0] == w[1]), "{nodes:?}");
    }

    fn store_grads(store: &ParamStore) -> Vec<Matrix> {
        store.ids().map(|id| store.grad(id).clone()).collect()
    }

    #[test]
    fn full_regime_is_the_plain_gradient() {
        let (stack, mut store) = setup(2);
        let x = Matrix::random_normal(12, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Full, 12, 1), &mut rng).unwrap();
        let got = store_grads(&store);
        let partition = Partition::contiguous(12, 12).unwrap();
        let sample = stack.sample_slots(&mut rng);
        let want = full_gradient(&stack, &store, &x, &MixtureNll, &partition, &sample).unwrap();
        for (a, b) in got.iter().zip(&want) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn every_cell_live_scales_only_the_decoder() {
        let (stack, mut store) = setup(5);
        let x = Matrix::random_normal(12, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Full, 4, 1), &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        let full = store_grads(&store);
        estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Unbiased, 4, 3), &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        for (id, (g, f)) in store.ids().zip(store_grads(&store).iter().zip(&full)) {
            let want = match store.group(id) {
                ParamGroup::Encoder => f.clone(),
                ParamGroup::Decoder => f.scale(1.0 / 3.0),
            };
            assert!(g.max_abs_diff(&want).unwrap() <= 1e-12, "{}", store.name(id));
        }
    }

    #[test]
    fn batch_gradient_is_the_mean_over_sets() {
        let (stack, mut store) = setup(8);
        let xs: Vec<Matrix> = (0..2)
            .map(|i| Matrix::random_normal(8, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(10 + i)))
            .collect();
        let o = opts(EstimatorKind::Full, 8, 1);
        let mut singles = Vec::new();
        for x in &xs {
            estimate_gradients(&stack, &mut store, &[x], &MixtureNll, &o, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            singles.push(store_grads(&store));
        }
        let r = estimate_gradients(&stack, &mut store, &[&xs[0], &xs[1]], &MixtureNll, &o, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.loss.is_finite());
        for (i, g) in store_grads(&store).iter().enumerate() {
            let mut want = singles[0][i].clone();
            want.add_assign(&singles[1][i]).unwrap();
            assert!(g.max_abs_diff(&want.scale(0.5)).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn biased_step_updates_parameters() {
        let (stack, mut store) = setup(9);
        let before = store.to_checkpoint();
        let x = Matrix::random_normal(16, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut opt = Optimizer::new(Default::default(), 1e-2, Default::default(), 10);
        let r = biased_step(&stack, &mut store, &[&x], &MixtureNll, 4, &mut opt, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(r.chunks, 4);
        assert!(r.grad_norm_theta > 0.0 && r.grad_norm_lambda > 0.0);
        assert_ne!(before, store.to_checkpoint());
    }

    #[test]
    fn bad_options_are_rejected() {
        let (stack, mut store) = setup(1);
        let x = Matrix::random_normal(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(estimate_gradients(&stack, &mut store, &[], &MixtureNll, &opts(EstimatorKind::Full, 2, 1), &mut rng).is_err());
        assert!(estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Full, 0, 1), &mut rng).is_err());
        assert!(estimate_gradients(&stack, &mut store, &[&x], &MixtureNll, &opts(EstimatorKind::Unbiased, 2, 0), &mut rng).is_err());
    }
}
