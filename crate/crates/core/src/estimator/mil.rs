//! Max pooling of instance scores with stop-gradded cells, for
//! multiple-instance learning.
//!
//! Each instance gets a score `h(x) = w^T phi(x) + b`; the bag score is the
//! max over instances. With one live cell the masked max is
//! `max(live max, StopGrad(frozen max))`, so the gradient reaches the
//! parameters only when the maximizing instance is in the live cell.
//! Scaling the bag loss by the number of cells makes the expected gradient
//! equal to the full max-pool gradient when the max is unique.

use rand::Rng;

use crate::encoder::mlp::{FeatureExtractor, Linear, MlpConfig};
use crate::error::{ensure, Result};
use crate::estimator::oracle::GradVec;
use crate::estimator::partition::GradPlan;
use crate::matrix::Matrix;
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct MilScorer {
    phi: FeatureExtractor,
    score: Linear,
}

impl MilScorer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, phi: &MlpConfig, rng: &mut R) -> Result<Self> {
        let phi = FeatureExtractor::new(store, "mil.phi", phi, ParamGroup::Encoder, rng)?;
        let score = Linear::new(store, "mil.score", phi.output_dim(), 1, true, ParamGroup::Encoder, rng)?;
        Ok(Self { phi, score })
    }

    /// `n x 1` instance scores.
    pub fn scores(&self, store: &ParamStore, x: &Matrix) -> Result<Matrix> {
        self.score.forward(store, &self.phi.forward(store, x)?)
    }

    fn scores_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.phi.forward_tape(tape, store, x)?;
        self.score.forward_tape(tape, store, h)
    }
}

/// `1 x 1` bag score `max(live max, StopGrad(frozen max))`; ties go to the
/// live cell.
pub fn mil_masked_max(tape: &mut Tape, store: &ParamStore, scorer: &MilScorer, x: &Matrix, plan: &GradPlan) -> Result<Var> {
    ensure!(
        plan.grad_cells().len() == 1,
        "masked max needs exactly one live cell, got {}",
        plan.grad_cells().len()
    );
    ensure!(plan.partition().set_size() == x.rows(), "plan does not match the bag size");
    let live = tape.constant(x.select_rows(&plan.live_rows())?);
    let scores = scorer.scores_tape(tape, store, live)?;
    let live_max = tape.max_cols(scores);
    let frozen_max = plan
        .frozen_cells()
        .map(|cell| Ok(scorer.scores(store, &x.select_rows(cell)?)?.max_cols()[(0, 0)]))
        .collect::<Result<Vec<f64>>>()?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    if frozen_max == f64::NEG_INFINITY {
        return Ok(live_max);
    }
    // max(a, b) = a + relu(b - a); relu'(0) = 0 keeps ties on the live side.
    let b = tape.constant(Matrix::scalar(frozen_max));
    let gap = tape.sub(b, live_max)?;
    let gap = tape.relu(gap);
    tape.add(live_max, gap)
}

/// Logistic loss `softplus(z) - y z` of a bag score `z` and label `y`.
pub fn bag_loss(tape: &mut Tape, z: Var, label: f64) -> Result<Var> {
    let sp = tape.softplus(z);
    let yz = tape.scale(z, label);
    tape.sub(sp, yz)
}

/// Mean of the cell-count-scaled masked-max gradients over every choice of
/// the live cell, and the gradient of the unmasked max-pool loss.
pub fn mil_unbiasedness(
    scorer: &MilScorer,
    store: &ParamStore,
    x: &Matrix,
    label: f64,
    partition: &crate::estimator::partition::Partition,
) -> Result<(GradVec, GradVec)> {
    let grads_for = |plan: &GradPlan, scale: f64| -> Result<GradVec> {
        let mut tape = Tape::new();
        let z = mil_masked_max(&mut tape, store, scorer, x, plan)?;
        let l = bag_loss(&mut tape, z, label)?;
        let l = tape.scale(l, scale);
        let g = tape.backward(l)?;
        Ok(store
            .ids()
            .map(|id| {
                g.param(id).cloned().unwrap_or_else(|| {
                    let (r, c) = store.value(id).shape();
                    Matrix::zeros(r, c)
                })
            })
            .collect())
    };
    let cells = partition.len();
    let mut mean: Option<GradVec> = None;
    for c in 0..cells {
        let plan = GradPlan::new(partition.clone(), vec![c])?;
        let g = grads_for(&plan, plan.scale_encoder)?;
        match &mut mean {
            Some(m) => {
                for (a, b) in m.iter_mut().zip(&g) {
                    a.add_assign(b)?;
                }
            }
            None => mean = Some(g),
        }
    }
    let mean = mean
        .expect("a partition has at least one cell")
        .into_iter()
        .map(|m| m.scale(1.0 / cells as f64))
        .collect();
    // The full max-pool gradient: one cell covering the bag.
    let whole = crate::estimator::partition::Partition::new(x.rows(), vec![(0..x.rows()).collect()])?;
    let full = grads_for(&GradPlan::full(whole), 1.0)?;
    Ok((mean, full))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::partition::Partition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore, MilScorer, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let scorer = MilScorer::new(
            &mut store,
            &MlpConfig {
                input_dim: 3,
                hidden: vec![5],
            },
            &mut rng,
        )
        .unwrap();
        let x = Matrix::random_normal(8, 3, 1.0, &mut rng);
        (store, scorer, x)
    }

    fn argmax_cell(store: &ParamStore, scorer: &MilScorer, x: &Matrix, p: &Partition) -> usize {
        let s = scorer.scores(store, x).unwrap();
        let (_, arg) = s.max_cols_with_arg();
        p.cells().iter().position(|c| c.contains(&arg[0])).unwrap()
    }

    #[test]
    fn gradient_flows_only_through_the_argmax_cell() {
        let (store, scorer, x) = setup();
        let p = Partition::contiguous(8, 2).unwrap();
        let winner = argmax_cell(&store, &scorer, &x, &p);
        let whole = GradPlan::full(Partition::new(8, vec![(0..8).collect()]).unwrap());
        let grad = |plan: &GradPlan| {
            let mut t = Tape::new();
            let z = mil_masked_max(&mut t, &store, &scorer, &x, plan).unwrap();
            let value = t.value(z)[(0, 0)];
            let g = t.backward(z).unwrap();
            let w = store.id("mil.score.weight").unwrap();
            (value, g.param(w).cloned())
        };
        let (v_full, g_full) = grad(&whole);
        for c in 0..p.len() {
            let (v, g) = grad(&GradPlan::new(p.clone(), vec![c]).unwrap());
            assert_eq!(v, v_full);
            if c == winner {
                assert_eq!(g, g_full);
            } else {
                assert!(g.is_none_or(|g| g.max_abs() == 0.0));
            }
        }
    }

    #[test]
    fn requires_one_live_cell() {
        let (store, scorer, x) = setup();
        let p = Partition::contiguous(8, 2).unwrap();
        let mut t = Tape::new();
        let plan = GradPlan::new(p, vec![0, 1]).unwrap();
        assert!(mil_masked_max(&mut t, &store, &scorer, &x, &plan).is_err());
    }

    #[test]
    fn enumerated_mean_matches_full_gradient() {
        let (store, scorer, x) = setup();
        let p = Partition::contiguous(8, 3).unwrap();
        let (mean, full) = mil_unbiasedness(&scorer, &store, &x, 1.0, &p).unwrap();
        for (a, b) in mean.iter().zip(&full) {
            assert!(a.max_abs_diff(b).unwrap() <= 1e-12);
        }
    }
}
