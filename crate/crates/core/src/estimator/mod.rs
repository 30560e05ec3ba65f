//! Training on large sets: partitions, stop-gradient masking and the
//! gradient estimators.

pub mod mil;
pub mod optim;
pub mod oracle;
pub mod partition;
pub mod step;

use crate::error::Result;
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

pub use mil::{bag_loss, mil_masked_max, MilScorer};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use oracle::{biased_expectation, unbiasedness_oracle, GradientComparison};
pub use partition::{make_partition, GradPlan, Partition};
pub use step::{
    biased_step, estimate_gradients, full_set_loss, masked_forward, train_step, EstimatorKind, StepOptions, StepReport,
};

/// A scalar training loss computed from a model output and its input set.
pub trait SetLoss {
    fn loss(&self, tape: &mut Tape, output: Var, x: &Matrix) -> Result<Var>;
}
