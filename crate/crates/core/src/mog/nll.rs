//! Mixture parameters decoded from a model output and the per-point
//! negative log-likelihood.

use crate::error::{ensure, Result};
use crate::estimator::SetLoss;
use crate::matrix::{softplus, Matrix};
use crate::tape::{Tape, Var};

/// Floor added to decoded variances.
pub const VARIANCE_FLOOR: f64 = 0.01;

/// Diagonal Gaussian mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    pub weights: Vec<f64>,
    /// `K x D`.
    pub means: Matrix,
    /// `K x D`, strictly positive.
    pub variances: Matrix,
}

impl MixtureParams {
    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        ensure!(k > 0, "mixture has no components");
        ensure!(
            self.means.rows() == k && self.variances.shape() == self.means.shape(),
            "mixture parameter shapes disagree"
        );
        ensure!(
            self.weights.iter().all(|&w| w > 0.0 && w.is_finite()),
            "mixture weights must be positive"
        );
        ensure!(
            (self.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9,
            "mixture weights must sum to one"
        );
        ensure!(
            self.variances.data().iter().all(|&v| v > 0.0 && v.is_finite()),
            "covariance entries must be positive"
        );
        Ok(())
    }
}

/// Maps a `K x (1 + 2D)` output to a mixture: softmax over the first column
/// for the weights, the next `D` columns as means, and
/// `softplus(raw) + 0.01` for the variances.
pub fn decode_mixture(raw: &Matrix) -> Result<MixtureParams> {
    let (k, c) = raw.shape();
    ensure!(k > 0 && c >= 3 && c % 2 == 1, "mixture output must be K x (1 + 2D), got {k}x{c}");
    let d = (c - 1) / 2;
    let logits: Vec<f64> = (0..k).map(|j| raw[(j, 0)]).collect();
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(MixtureParams {
        weights: e.iter().map(|v| v / s).collect(),
        means: raw.slice_cols(1, 1 + d)?,
        variances: raw.slice_cols(1 + d, c)?.map(|v| softplus(v) + VARIANCE_FLOOR),
    })
}

fn log_two_pi() -> f64 {
    (2.0 * std::f64::consts::PI).ln()
}

/// Per-point negative log-likelihood `-(1/n) sum_i log sum_j pi_j N(x_i)`.
pub fn mog_nll(params: &MixtureParams, x: &Matrix) -> Result<f64> {
    params.validate()?;
    let (n, d) = x.shape();
    ensure!(n > 0, "empty set");
    ensure!(d == params.means.cols(), "points have {d} dims, mixture has {}", params.means.cols());
    let k = params.components();
    let mut total = 0.0;
    let mut logp = vec![0.0; k];
    for i in 0..n {
        for (j, lp) in logp.iter_mut().enumerate() {
            let mut acc = params.weights[j].ln() - 0.5 * d as f64 * log_two_pi();
            for c in 0..d {
                let v = params.variances[(j, c)];
                let r = x[(i, c)] - params.means[(j, c)];
                acc -= 0.5 * (r * r / v + v.ln());
            }
            *lp = acc;
        }
        let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total -= m + logp.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    }
    Ok(total / n as f64)
}

/// [`decode_mixture`] followed by [`mog_nll`] on the tape. The quadratic
/// forms for all points and components are computed with three matrix
/// products.
pub fn mixture_nll_tape(tape: &mut Tape, raw: Var, x: &Matrix) -> Result<Var> {
    let (k, c) = tape.shape(raw);
    let (n, d) = x.shape();
    ensure!(n > 0, "empty set");
    ensure!(c == 1 + 2 * d, "mixture output must be K x {}, got {k}x{c}", 1 + 2 * d);

    let logits = tape.slice_cols(raw, 0, 1)?;
    let lse = tape.logsumexp_cols(logits)?;
    let lse = tape.broadcast_row(lse, k)?;
    let log_pi = tape.sub(logits, lse)?;

    let mu = tape.slice_cols(raw, 1, 1 + d)?;
    let v_raw = tape.slice_cols(raw, 1 + d, c)?;
    let v = tape.softplus(v_raw);
    let floor = tape.constant(Matrix::filled(k, d, VARIANCE_FLOOR));
    let var = tape.add(v, floor)?;
    let ones = tape.constant(Matrix::ones(k, d));
    let inv = tape.div(ones, var)?;

    // ||x - mu||^2_{1/var} = (x*x) inv^T - 2 x (mu*inv)^T + sum(mu*mu*inv)
    let xx = tape.constant(x.map(|v| v * v));
    let xc = tape.constant(x.clone());
    let inv_t = tape.transpose(inv);
    let t1 = tape.matmul(xx, inv_t)?;
    let mu_inv = tape.mul(mu, inv)?;
    let mu_inv_t = tape.transpose(mu_inv);
    let t2 = tape.matmul(xc, mu_inv_t)?;
    let t2 = tape.scale(t2, -2.0);
    let mu_sq = tape.mul(mu, mu_inv)?;
    let t3 = tape.sum_rows(mu_sq);
    let t3 = tape.transpose(t3);
    let t3 = tape.broadcast_row(t3, n)?;
    let quad = tape.add(t1, t2)?;
    let quad = tape.add(quad, t3)?;

    let log_var = tape.log(var)?;
    let log_det = tape.sum_rows(log_var);
    let half_det = tape.scale(log_det, -0.5);
    let comp = tape.add(log_pi, half_det)?;
    let comp = tape.transpose(comp);
    let comp = tape.broadcast_row(comp, n)?;
    let half_quad = tape.scale(quad, -0.5);
    let logp = tape.add(comp, half_quad)?;
    let logp_t = tape.transpose(logp);
    let per_point = tape.logsumexp_cols(logp_t)?;
    let mean = tape.mean_all(per_point);
    let nll = tape.neg(mean);
    let constant = tape.constant(Matrix::scalar(0.5 * d as f64 * log_two_pi()));
    tape.add(nll, constant)
}

/// Per-point mixture NLL of the set itself under the decoded mixture.
#[derive(Clone, Copy, Debug, Default)]
pub struct MixtureNll;

impl SetLoss for MixtureNll {
    fn loss(&self, tape: &mut Tape, output: Var, x: &Matrix) -> Result<Var> {
        mixture_nll_tape(tape, output, x)
    }
}
