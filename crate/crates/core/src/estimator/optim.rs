//! First-order optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply the rate by `factor` once `at_fraction` of the steps are done.
    Step { at_fraction: f64, factor: f64 },
    /// `lr * t^-exponent` for step `t = 1, 2, ...`.
    Power { exponent: f64 },
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule::Step {
            at_fraction: 0.7,
            factor: 0.1,
        }
    }
}

impl Schedule {
    /// Rate for 1-based step `t` of `total`.
    pub fn rate(&self, base: f64, t: usize, total: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { at_fraction, factor } => {
                if (t as f64) > at_fraction * total as f64 {
                    base * factor
                } else {
                    base
                }
            }
            Schedule::Power { exponent } => base * (t.max(1) as f64).powf(-exponent),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Schedule::Constant => true,
            Schedule::Step { at_fraction, factor } => (0.0..=1.0).contains(&at_fraction) && factor > 0.0,
            Schedule::Power { exponent } => exponent >= 0.0 && exponent.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid schedule {self:?}")))
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Applies the gradients stored in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    schedule: Schedule,
    total_steps: usize,
    t: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, schedule: Schedule, total_steps: usize) -> Self {
        Self {
            kind,
            lr,
            schedule,
            total_steps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Rate the next update will use.
    pub fn current_lr(&self) -> f64 {
        self.schedule.rate(self.lr, self.t + 1, self.total_steps)
    }

    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let lr = self.current_lr();
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        if self.m.len() != ids.len() {
            self.m = ids.iter().map(|&id| zeros_like(store.value(id))).collect();
            self.v = self.m.clone();
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let g = store.grad(id).clone();
                    store.value_mut(id).axpy(-lr, &g)?;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (i, id) in ids.into_iter().enumerate() {
                    let g = store.grad(id).clone();
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    let value = store.value_mut(id);
                    for (((p, &g), m), v) in value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn schedules() {
        let s = Schedule::default();
        assert_eq!(s.rate(1e-3, 70, 100), 1e-3);
        assert!((s.rate(1e-3, 71, 100) - 1e-4).abs() < 1e-18);
        let p = Schedule::Power { exponent: 0.6 };
        assert_eq!(p.rate(0.5, 1, 10), 0.5);
        assert!((p.rate(0.5, 32, 10) - 0.5 * 32f64.powf(-0.6)).abs() < 1e-15);
        assert!(Schedule::Step { at_fraction: 2.0, factor: 0.1 }.validate().is_err());
        let json: Schedule = serde_json::from_str(r#"{"kind":"power","exponent":0.6}"#).unwrap();
        assert_eq!(json, p);
    }

    #[test]
    fn sgd_step() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::row_vector(&[1.0, 2.0]), ParamGroup::Encoder).unwrap();
        *store.grad_mut(id) = Matrix::row_vector(&[0.5, -1.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, Schedule::Constant, 10);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[0.95, 2.1]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::row_vector(&[1.0, 2.0]), ParamGroup::Encoder).unwrap();
        *store.grad_mut(id) = Matrix::row_vector(&[3.0, -0.01]);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, Schedule::Constant, 10);
        opt.step(&mut store).unwrap();
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-8);
        assert!((v[1] - 2.01).abs() < 1e-6);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Matrix::row_vector(&[3.0, -2.0]), ParamGroup::Encoder).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.05, Schedule::Constant, 2000);
        for _ in 0..2000 {
            let g = store.value(id).scale(2.0);
            *store.grad_mut(id) = g;
            opt.step(&mut store).unwrap();
        }
        assert!(store.value(id).max_abs() < 1e-3);
    }
}
