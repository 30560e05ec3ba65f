//! Synthetic 2-D mixture-of-Gaussians clustering tasks and the orders in
//! which their points can be streamed.

use rand::distr::weighted::WeightedIndex;
use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::estimator::partition::make_partition;
use crate::matrix::Matrix;

pub const MEAN_RANGE: (f64, f64) = (-4.0, 4.0);
pub const VARIANCE_RANGE: (f64, f64) = (0.3, 0.6);
/// Points per chunk of the `chunk` stream.
pub const STREAM_CHUNK: usize = 8;

/// One clustering problem: the points plus the hidden mixture that
/// generated them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoGTask {
    /// `n x 2`.
    pub points: Matrix,
    pub weights: Vec<f64>,
    /// `K x 2`.
    pub means: Matrix,
    /// `K x 2` diagonal covariance entries.
    pub variances: Matrix,
    pub labels: Vec<usize>,
}

impl MoGTask {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let task: MoGTask = serde_json::from_str(text)?;
        let (n, k) = (task.points.rows(), task.weights.len());
        ensure!(task.labels.len() == n, "task has {n} points but {} labels", task.labels.len());
        ensure!(task.means.rows() == k && task.variances.rows() == k, "task parameters disagree on K");
        ensure!(task.labels.iter().all(|&z| z < k), "label out of range");
        Ok(task)
    }
}

/// Draws a task: `n ~ U{max_n/2, ..., max_n}`, `pi ~ Dirichlet(1, ..., 1)`,
/// `z ~ Cat(pi)`, means `~ U(-4, 4)`, diagonal variances `~ U(0.3, 0.6)`,
/// `x ~ N(mu_z, diag(var_z))`.
pub fn sample_task<R: Rng + ?Sized>(rng: &mut R, components: usize, max_n: usize) -> Result<MoGTask> {
    ensure!(components >= 1, "need at least one component");
    ensure!(max_n >= 1, "max set size must be positive");
    let n = rng.random_range((max_n / 2).max(1)..=max_n);
    let gammas: Vec<f64> = (0..components).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = gammas.iter().sum();
    let weights: Vec<f64> = gammas.iter().map(|g| g / total).collect();
    let categorical = WeightedIndex::new(&weights).map_err(|e| Error::Domain(format!("mixture weights: {e}")))?;
    let labels: Vec<usize> = (0..n).map(|_| categorical.sample(rng)).collect();
    let mean_dist = Uniform::new(MEAN_RANGE.0, MEAN_RANGE.1).expect("valid range");
    let var_dist = Uniform::new(VARIANCE_RANGE.0, VARIANCE_RANGE.1).expect("valid range");
    let means = Matrix::from_vec(components, 2, (0..2 * components).map(|_| mean_dist.sample(rng)).collect())?;
    let variances = Matrix::from_vec(components, 2, (0..2 * components).map(|_| var_dist.sample(rng)).collect())?;
    let mut points = Matrix::zeros(n, 2);
    for (i, &z) in labels.iter().enumerate() {
        for d in 0..2 {
            let eps: f64 = StandardNormal.sample(rng);
            points[(i, d)] = means[(z, d)] + variances[(z, d)].sqrt() * eps;
        }
    }
    Ok(MoGTask {
        points,
        weights,
        means,
        variances,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamScenario {
    /// One point at a time, in index order.
    SinglePoint,
    /// One chunk per ground-truth class.
    Class,
    /// Random chunks of 8 points.
    Chunk,
    /// Repeated chunks holding one point of each class.
    OneEach,
}

impl StreamScenario {
    pub const ALL: [StreamScenario; 4] = [
        StreamScenario::SinglePoint,
        StreamScenario::Class,
        StreamScenario::Chunk,
        StreamScenario::OneEach,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamScenario::SinglePoint => "single-point",
            StreamScenario::Class => "class",
            StreamScenario::Chunk => "chunk",
            StreamScenario::OneEach => "one-each",
        }
    }
}

impl std::fmt::Display for StreamScenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for StreamScenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamScenario::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stream scenario {s:?}")))
    }
}

fn class_members(task: &MoGTask) -> Vec<Vec<usize>> {
    let mut members = vec![Vec::new(); task.components()];
    for (i, &z) in task.labels.iter().enumerate() {
        members[z].push(i);
    }
    members
}

/// Chunk sequence for a scenario. Classes without points are skipped.
pub fn make_stream<R: Rng + ?Sized>(task: &MoGTask, kind: StreamScenario, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    let n = task.len();
    ensure!(n > 0, "empty task");
    Ok(match kind {
        StreamScenario::SinglePoint => (0..n).map(|i| vec![i]).collect(),
        StreamScenario::Class => class_members(task).into_iter().filter(|c| !c.is_empty()).collect(),
        StreamScenario::Chunk => make_partition(n, STREAM_CHUNK, rng)?.cells().to_vec(),
        StreamScenario::OneEach => {
            let mut members = class_members(task);
            for m in &mut members {
                m.shuffle(rng);
            }
            let rounds = members.iter().map(Vec::len).max().unwrap_or(0);
            (0..rounds)
                .map(|r| members.iter().filter_map(|m| m.get(r).copied()).collect())
                .collect()
        }
    })
}
