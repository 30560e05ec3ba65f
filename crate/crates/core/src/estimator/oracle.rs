//! Exact expectations of the gradient estimators by enumeration.

use crate::encoder::stack::EncoderStack;
use crate::encoder::umbc::SlotSample;
use crate::error::{ensure, Result};
use crate::estimator::partition::{binomial, combinations, GradPlan, Partition};
use crate::estimator::step::{check_finite_loss, masked_forward, subset_forward};
use crate::estimator::SetLoss;
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Gradients, Tape, Var};

/// Largest number of subset draws the oracles will enumerate.
pub const MAX_ENUMERATION: usize = 10_000;

/// Per-parameter gradients aligned with [`ParamStore::ids`].
pub type GradVec = Vec<Matrix>;

fn zero_grads(store: &ParamStore) -> GradVec {
    store
        .ids()
        .map(|id| {
            let (r, c) = store.value(id).shape();
            Matrix::zeros(r, c)
        })
        .collect()
}

fn collect(grads: &Gradients, store: &ParamStore) -> Result<GradVec> {
    let mut out = zero_grads(store);
    for (id, g) in grads.params() {
        out[id.index()].add_assign(g)?;
    }
    Ok(out)
}

fn max_abs_diff_in(store: &ParamStore, a: &GradVec, b: &GradVec, group: ParamGroup) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for id in store.ids().filter(|&id| store.group(id) == group) {
        worst = worst.max(a[id.index()].max_abs_diff(&b[id.index()])?);
    }
    Ok(worst)
}

fn max_abs_in(store: &ParamStore, a: &GradVec, group: ParamGroup) -> f64 {
    store
        .ids()
        .filter(|&id| store.group(id) == group)
        .map(|id| a[id.index()].max_abs())
        .fold(0.0, f64::max)
}

/// Expected estimator gradient against the full-set gradient.
#[derive(Clone, Debug)]
pub struct GradientComparison {
    /// Number of equally likely draws averaged.
    pub draws: usize,
    /// `max |E[estimate] - full|` over encoder parameters.
    pub theta_max_abs_diff: f64,
    /// Same over decoder parameters.
    pub lambda_max_abs_diff: f64,
    /// `max |full|` per group, for scale.
    pub theta_full_max_abs: f64,
    pub lambda_full_max_abs: f64,
    pub mean: GradVec,
    pub full: GradVec,
}

impl GradientComparison {
    fn new(store: &ParamStore, draws: usize, mean: GradVec, full: GradVec) -> Result<Self> {
        Ok(Self {
            draws,
            theta_max_abs_diff: max_abs_diff_in(store, &mean, &full, ParamGroup::Encoder)?,
            lambda_max_abs_diff: max_abs_diff_in(store, &mean, &full, ParamGroup::Decoder)?,
            theta_full_max_abs: max_abs_in(store, &full, ParamGroup::Encoder),
            lambda_full_max_abs: max_abs_in(store, &full, ParamGroup::Decoder),
            mean,
            full,
        })
    }
}

fn loss_of_pooled(stack: &EncoderStack, store: &ParamStore, tape: &mut Tape, pooled: Var, x: &Matrix, loss: &dyn SetLoss) -> Result<Var> {
    let out = stack.decode_tape(tape, store, pooled)?;
    let l = loss.loss(tape, out, x)?;
    check_finite_loss(tape, l, "oracle")?;
    Ok(l)
}

/// Gradient of the plain full-set loss for every parameter.
pub fn full_gradient(
    stack: &EncoderStack,
    store: &ParamStore,
    x: &Matrix,
    loss: &dyn SetLoss,
    partition: &Partition,
    sample: &SlotSample,
) -> Result<GradVec> {
    let plan = GradPlan::full(partition.clone());
    let mut tape = Tape::new();
    let pooled = masked_forward(stack, store, &mut tape, x, &plan, sample)?;
    let l = loss_of_pooled(stack, store, &mut tape, pooled, x, loss)?;
    collect(&tape.backward(l)?, store)
}

/// Encoder gradient of the encoder-scaled loss and decoder gradient of the
/// decoder-scaled loss for one plan, combined into one vector.
pub fn plan_gradient(
    stack: &EncoderStack,
    store: &ParamStore,
    x: &Matrix,
    loss: &dyn SetLoss,
    plan: &GradPlan,
    sample: &SlotSample,
) -> Result<GradVec> {
    let mut tape = Tape::new();
    let pooled = masked_forward(stack, store, &mut tape, x, plan, sample)?;
    let l = loss_of_pooled(stack, store, &mut tape, pooled, x, loss)?;
    let l_enc = tape.scale(l, plan.scale_encoder);
    let l_dec = tape.scale(l, plan.scale_decoder);
    let g_enc = collect(&tape.backward(l_enc)?, store)?;
    let g_dec = collect(&tape.backward(l_dec)?, store)?;
    Ok(store
        .ids()
        .map(|id| match store.group(id) {
            ParamGroup::Encoder => g_enc[id.index()].clone(),
            ParamGroup::Decoder => g_dec[id.index()].clone(),
        })
        .collect())
}

/// Averages [`plan_gradient`] over every choice of `grad_subsets` live
/// cells of a fixed partition (all equally likely) and compares with the
/// full-set gradient.
pub fn unbiasedness_oracle(
    stack: &EncoderStack,
    store: &ParamStore,
    x: &Matrix,
    loss: &dyn SetLoss,
    partition: &Partition,
    grad_subsets: usize,
    sample: &SlotSample,
) -> Result<GradientComparison> {
    ensure!(
        grad_subsets >= 1 && grad_subsets <= partition.len(),
        "need 1 <= grad subsets <= {} cells, got {grad_subsets}",
        partition.len()
    );
    let count = binomial(partition.len(), grad_subsets);
    ensure!(
        count <= MAX_ENUMERATION as f64,
        "{count} subset choices exceed the enumeration limit {MAX_ENUMERATION}"
    );
    let full = full_gradient(stack, store, x, loss, partition, sample)?;
    let combos = combinations(partition.len(), grad_subsets);
    let mut mean = zero_grads(store);
    for cells in &combos {
        let plan = GradPlan::new(partition.clone(), cells.clone())?;
        let g = plan_gradient(stack, store, x, loss, &plan, sample)?;
        for (m, g) in mean.iter_mut().zip(&g) {
            m.add_assign(g)?;
        }
    }
    let w = 1.0 / combos.len() as f64;
    let mean = mean.into_iter().map(|m| m.scale(w)).collect();
    GradientComparison::new(store, combos.len(), mean, full)
}

/// Averages the plain gradient of the loss of each single cell (encoded as
/// if it were the whole set) over all cells and compares with the full-set
/// gradient.
pub fn biased_expectation(
    stack: &EncoderStack,
    store: &ParamStore,
    x: &Matrix,
    loss: &dyn SetLoss,
    partition: &Partition,
    sample: &SlotSample,
) -> Result<GradientComparison> {
    ensure!(partition.len() <= MAX_ENUMERATION, "too many cells to enumerate");
    let full = full_gradient(stack, store, x, loss, partition, sample)?;
    let mut mean = zero_grads(store);
    for cell in partition.cells() {
        let mut tape = Tape::new();
        let pooled = subset_forward(stack, store, &mut tape, x, cell, sample)?;
        let l = loss_of_pooled(stack, store, &mut tape, pooled, x, loss)?;
        for (m, g) in mean.iter_mut().zip(&collect(&tape.backward(l)?, store)?) {
            m.add_assign(g)?;
        }
    }
    let w = 1.0 / partition.len() as f64;
    let mean = mean.into_iter().map(|m| m.scale(w)).collect();
    GradientComparison::new(store, partition.len(), mean, full)
}

/// The sum-decomposable linear counterexample: per-element encodings
/// `features` (`n x d`), `z = lambda^T sum_j f_j`, loss `(z - y)^2 / 2`, with
/// singleton cells. Returns `(expected single-element gradient, full
/// gradient)` with respect to `lambda` (`d x 1`).
pub fn linear_counterexample(features: &Matrix, lambda: &Matrix, y: f64) -> Result<(Matrix, Matrix)> {
    let (n, d) = features.shape();
    ensure!(n > 0, "empty set");
    ensure!(lambda.shape() == (d, 1), "lambda must be {d}x1");
    let grad = |rows: &[usize]| -> Result<Matrix> {
        let mut store = ParamStore::new();
        let id = store.insert("lambda", lambda.clone(), ParamGroup::Decoder)?;
        let mut tape = Tape::new();
        let f = tape.constant(features.select_rows(rows)?);
        let pooled = tape.sum_cols(f);
        let lam = tape.param(&store, id);
        let z = tape.matmul(pooled, lam)?;
        let target = tape.constant(Matrix::scalar(y));
        let r = tape.sub(z, target)?;
        let sq = tape.mul(r, r)?;
        let l = tape.scale(sq, 0.5);
        let g = tape.backward(l)?;
        Ok(g.param(id).cloned().unwrap_or_else(|| Matrix::zeros(d, 1)))
    };
    let full = grad(&(0..n).collect::<Vec<_>>())?;
    let mut mean = Matrix::zeros(d, 1);
    for j in 0..n {
        mean.add_assign(&grad(&[j])?)?;
    }
    Ok((mean.scale(1.0 / n as f64), full))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_counterexample_matches_closed_forms() {
        let f = Matrix::from_rows(&[[1.0, 0.5], [-2.0, 1.0], [0.25, 3.0]]).unwrap();
        let lambda = Matrix::col_vector(&[0.3, -0.7]);
        let y = 1.5;
        let (biased, full) = linear_counterexample(&f, &lambda, y).unwrap();
        // Full: (lambda^T sum f - y) sum f.
        let s = f.sum_cols();
        let z = s[(0, 0)] * 0.3 + s[(0, 1)] * -0.7;
        for c in 0..2 {
            assert!((full[(c, 0)] - (z - y) * s[(0, c)]).abs() < 1e-14);
        }
        // Single element: mean_j (lambda^T f_j - y) f_j.
        for c in 0..2 {
            let expected: f64 = (0..3)
                .map(|j| (f[(j, 0)] * 0.3 + f[(j, 1)] * -0.7 - y) * f[(j, c)])
                .sum::<f64>()
                / 3.0;
            assert!((biased[(c, 0)] - expected).abs() < 1e-14);
        }
        assert!(biased.max_abs_diff(&full).unwrap() > 1e-3);
    }
}
