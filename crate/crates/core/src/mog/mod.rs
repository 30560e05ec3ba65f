//! Amortized clustering of 2-D Gaussian mixtures.

pub mod nll;
pub mod task;

pub use nll::{decode_mixture, mixture_nll_tape, mog_nll, MixtureNll, MixtureParams, VARIANCE_FLOOR};
pub use task::{make_stream, sample_task, MoGTask, StreamScenario};
