//! Mini-batch consistent set encoders and an unbiased full-set gradient
//! estimator for training them on large sets.
//!
//! * [`matrix`], [`tape`], [`params`]: dense `f64` matrices and reverse-mode
//!   autodiff with a stop-gradient barrier.
//! * [`encoder`]: slot-attention pooling with streaming accumulators,
//!   DeepSets and slot-set special cases, attention blocks on pooled slots.
//! * [`estimator`]: partitions, masked forward passes and the training steps.
//! * [`mog`]: mixture-of-Gaussians amortized clustering.
//! * [`harness`]: partition variance and experiment runs.

pub mod encoder;
pub mod error;
pub mod estimator;
pub mod gradcheck;
pub mod harness;
pub mod matrix;
pub mod mog;
pub mod params;
pub mod tape;

pub use encoder::{
    AccumulatorState, Activation, EncoderStack, Model, ModelSpec, SetEncoder, SlotMode, SlotSample, UmbcConfig,
};
pub use error::{Error, Result};
pub use estimator::{EstimatorKind, GradPlan, Partition, SetLoss, StepOptions, StepReport};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use harness::{encoding_variance, run_experiment, ExperimentConfig, ExperimentSummary, VarianceReport};
pub use matrix::Matrix;
pub use mog::{MixtureNll, MixtureParams, MoGTask, StreamScenario};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
