//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::stack::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::estimator::{EstimatorKind, OptimizerKind, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub components: usize,
    pub max_n: usize,
}

fn default_lr() -> f64 {
    1e-3
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub chunk_size: usize,
    #[serde(default = "one")]
    pub grad_subsets: usize,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorKind,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub steps: usize,
    /// Seeds parameter initialization and the training task stream.
    pub seed: u64,
    #[serde(default = "one")]
    pub batch_size: usize,
}

fn default_estimator() -> EstimatorKind {
    EstimatorKind::Unbiased
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Steps between evaluations.
    pub interval: usize,
    /// Held-out tasks per periodic evaluation.
    pub tasks: usize,
    /// Held-out tasks for the final evaluation.
    pub final_tasks: usize,
    /// Seeds the held-out task stream.
    pub seed: u64,
}

fn all_regimes() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    /// Each regime is trained from the same seeds with its own estimator;
    /// `training.estimator` is used by single-regime runs.
    #[serde(default = "all_regimes")]
    pub regimes: Vec<EstimatorKind>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let t = &self.training;
        if self.task.components == 0 || self.task.max_n < 2 {
            return bad("task needs at least one component and max_n >= 2".into());
        }
        if self.model.components != self.task.components {
            return bad(format!(
                "model outputs {} components, task has {}",
                self.model.components, self.task.components
            ));
        }
        if self.model.phi.input_dim != 2 || self.model.outputs_per_component != 5 {
            return bad("clustering models take 2-D points and output 5 values per component".into());
        }
        if t.chunk_size == 0 || t.grad_subsets == 0 || t.batch_size == 0 || t.steps == 0 {
            return bad("chunk_size, grad_subsets, batch_size and steps must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", t.lr));
        }
        t.schedule.validate()?;
        Model::new(&self.model, 0).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("model: {m}")),
            other => Error::Config(format!("model: {other}")),
        })?;
        let e = &self.eval;
        if e.interval == 0 || e.tasks == 0 || e.final_tasks == 0 {
            return bad("eval interval and task counts must be positive".into());
        }
        if !t.steps.is_multiple_of(e.interval) {
            return bad(format!("steps ({}) must be a multiple of the eval interval ({})", t.steps, e.interval));
        }
        if self.regimes.is_empty() {
            return bad("no regimes to run".into());
        }
        let mut seen = self.regimes.clone();
        seen.sort_by_key(|r| r.name());
        seen.dedup();
        if seen.len() != self.regimes.len() {
            return bad("duplicate regime".into());
        }
        Ok(())
    }

    /// The configuration of a single regime.
    pub fn for_regime(&self, regime: EstimatorKind) -> Self {
        let mut c = self.clone();
        c.training.estimator = regime;
        c.regimes = vec![regime];
        c
    }
}
