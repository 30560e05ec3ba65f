//! Training runs on the clustering task and their artifacts.
//!
//! `run_experiment` writes into the output directory:
//!
//! * `<regime>.csv`: one row at step 0 and one every `eval.interval` steps,
//!   columns `step,loss,full_set_nll,grad_norm_theta,grad_norm_lambda,live_tape_nodes`.
//!   The training columns of row 0 are `NaN` (loss, norms) and `0` (nodes).
//!   `loss` and the norms are those of the step itself; `full_set_nll` is
//!   the mean per-point NLL over the held-out evaluation tasks.
//! * `<regime>.checkpoint.json`: final parameters.
//! * `summary.json`: final held-out NLL per regime.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::stack::Model;
use crate::encoder::umbc::SlotSample;
use crate::error::{Error, Result};
use crate::estimator::{full_set_loss, train_step, EstimatorKind, Optimizer, StepOptions};
use crate::harness::config::ExperimentConfig;
use crate::mog::{make_stream, sample_task, MixtureNll, MoGTask, StreamScenario};

pub const CSV_HEADER: &str = "step,loss,full_set_nll,grad_norm_theta,grad_norm_lambda,live_tape_nodes";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub full_set_nll: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_lambda: f64,
    pub live_tape_nodes: usize,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            self.step, self.loss, self.full_set_nll, self.grad_norm_theta, self.grad_norm_lambda, self.live_tape_nodes
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeSummary {
    pub regime: EstimatorKind,
    pub steps: usize,
    /// Mean per-point NLL over the final evaluation tasks.
    pub final_nll: f64,
    /// Standard error of `final_nll`.
    pub final_nll_sem: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seed: u64,
    pub regimes: Vec<RegimeSummary>,
}

impl ExperimentSummary {
    pub fn final_nll(&self, regime: EstimatorKind) -> Option<f64> {
        self.regimes.iter().find(|r| r.regime == regime).map(|r| r.final_nll)
    }
}

/// A trained model and its metrics.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub rows: Vec<MetricsRow>,
    pub summary: RegimeSummary,
}

/// `count` tasks from stream `stream` of `seed`.
pub fn held_out_tasks(config: &ExperimentConfig, seed: u64, stream: u64, count: usize) -> Result<Vec<MoGTask>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..count)
        .map(|_| sample_task(&mut rng, config.task.components, config.task.max_n))
        .collect()
}

/// Slot draw used for evaluation.
pub fn eval_sample(model: &Model, seed: u64) -> SlotSample {
    model.stack.sample_slots(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-task per-point NLL of the model's full-set output.
pub fn evaluate(model: &Model, tasks: &[MoGTask], sample: &SlotSample) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|t| full_set_loss(&model.stack, &model.store, &t.points, &MixtureNll, sample))
        .collect()
}

fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Trains one regime: parameters from `training.seed`, training tasks from
/// stream 1 of the same seed, so regimes differ only in their estimator.
pub fn train_regime(config: &ExperimentConfig, regime: EstimatorKind) -> Result<TrainOutcome> {
    config.validate()?;
    let t = &config.training;
    let mut model = Model::new(&config.model, t.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
    rng.set_stream(1);
    let eval_tasks = held_out_tasks(config, config.eval.seed, 0, config.eval.tasks)?;
    let sample = eval_sample(&model, config.eval.seed);
    let opts = StepOptions {
        estimator: regime,
        chunk_size: t.chunk_size,
        grad_subsets: t.grad_subsets,
    };
    let mut optimizer = Optimizer::new(t.optimizer, t.lr, t.schedule, t.steps);
    let eval_nll = |model: &Model| -> Result<f64> { Ok(mean_sem(&evaluate(model, &eval_tasks, &sample)?).0) };
    let mut rows = vec![MetricsRow {
        step: 0,
        loss: f64::NAN,
        full_set_nll: eval_nll(&model)?,
        grad_norm_theta: f64::NAN,
        grad_norm_lambda: f64::NAN,
        live_tape_nodes: 0,
    }];
    for step in 1..=t.steps {
        let result = (|| {
            let tasks = (0..t.batch_size)
                .map(|_| sample_task(&mut rng, config.task.components, config.task.max_n))
                .collect::<Result<Vec<_>>>()?;
            let batch: Vec<_> = tasks.iter().map(|task| &task.points).collect();
            let Model { stack, store } = &mut model;
            train_step(stack, store, &batch, &MixtureNll, &opts, &mut optimizer, &mut rng)
        })();
        let report = result.map_err(|e| Error::Step {
            step,
            source: Box::new(e),
        })?;
        if step % config.eval.interval == 0 {
            rows.push(MetricsRow {
                step,
                loss: report.loss,
                full_set_nll: eval_nll(&model)?,
                grad_norm_theta: report.grad_norm_theta,
                grad_norm_lambda: report.grad_norm_lambda,
                live_tape_nodes: report.live_tape_nodes,
            });
        }
    }
    let final_tasks = held_out_tasks(config, config.eval.seed, 1, config.eval.final_tasks)?;
    let (final_nll, final_nll_sem) = mean_sem(&evaluate(&model, &final_tasks, &sample)?);
    Ok(TrainOutcome {
        model,
        rows,
        summary: RegimeSummary {
            regime,
            steps: t.steps,
            final_nll,
            final_nll_sem,
        },
    })
}

/// Trains every configured regime and writes the artifacts into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("config.json"), config.to_json()?)?;
    let mut regimes = Vec::with_capacity(config.regimes.len());
    for &regime in &config.regimes {
        let outcome = train_regime(config, regime)?;
        fs::write(out.join(format!("{regime}.csv")), metrics_csv(&outcome.rows))?;
        outcome.model.store.save_json(&out.join(format!("{regime}.checkpoint.json")))?;
        regimes.push(outcome.summary);
    }
    let summary = ExperimentSummary {
        seed: config.training.seed,
        regimes,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: StreamScenario,
    /// Mean per-point NLL after streaming the scenario's chunks.
    pub nll: f64,
    /// Largest `|streamed - single-chunk|` NLL difference over the tasks.
    pub max_abs_diff: f64,
}

/// Streams each task under every scenario and compares the NLL with the
/// single-chunk encoding.
pub fn scenario_table(model: &Model, tasks: &[MoGTask], sample: &SlotSample, seed: u64) -> Result<Vec<ScenarioRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let monolithic = evaluate(model, tasks, sample)?;
    let mut rows = Vec::with_capacity(StreamScenario::ALL.len());
    for scenario in StreamScenario::ALL {
        let mut total = 0.0;
        let mut worst: f64 = 0.0;
        for (task, &mono) in tasks.iter().zip(&monolithic) {
            let chunks = make_stream(task, scenario, &mut rng)?;
            let out = model.stack.forward(&model.store, &task.points, &chunks, sample)?;
            let nll = crate::mog::mog_nll(&crate::mog::decode_mixture(&out)?, &task.points)?;
            total += nll;
            worst = worst.max((nll - mono).abs());
        }
        rows.push(ScenarioRow {
            scenario,
            nll: total / tasks.len() as f64,
            max_abs_diff: worst,
        });
    }
    Ok(rows)
}
