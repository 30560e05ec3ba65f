//! Central-difference validation of [`Tape::backward`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Parameter and flat coordinate of the worst relative error.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn eval_loss<F>(store: &ParamStore, build: &F) -> Result<(Tape, Var)>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = build(store, &mut tape)?;
    let v = tape.value(root).item()?;
    if !v.is_finite() {
        return Err(Error::Domain(format!("non-finite loss {v}")));
    }
    Ok((tape, root))
}

/// Compares analytic gradients of the loss built by `build` against central
/// differences `(L(p + eps) - L(p - eps)) / (2 eps)` for every coordinate of
/// every parameter in `store`. The builder must be deterministic given the
/// store contents.
pub fn finite_diff_check<F>(store: &mut ParamStore, eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let (tape, root) = eval_loss(store, &build)?;
    let grads = tape.backward(root)?;
    drop(tape);

    let ids: Vec<ParamId> = store.ids().collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + eps;
            let plus = eval_loss(store, &build).map(|(t, r)| t.value(r)[(0, 0)]);
            store.value_mut(id).data_mut()[i] = orig - eps;
            let minus = eval_loss(store, &build).map(|(t, r)| t.value(r)[(0, 0)]);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
            report.coordinates += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_owned(), i));
            }
        }
    }
    Ok(report)
}
