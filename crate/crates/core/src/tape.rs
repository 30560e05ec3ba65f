//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records primitive operations in topological order; every op
//! computes its forward value eagerly. [`Tape::backward`] walks the tape in
//! reverse from a scalar root. [`Tape::stop_grad`] forwards its input's value
//! but never propagates an adjoint, so anything reachable only through it
//! receives an exactly-zero gradient.

use crate::error::{ensure, Error, Result};
use crate::matrix::{self, shape_error, Matrix};
use crate::params::{ParamId, ParamStore};

/// Epsilon inside the variance square root of [`Tape::layernorm_rows`].
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    Relu(Var),
    LayerNormRows { x: Var, normalized: Matrix, inv_std: Vec<f64> },
    SumRows(Var),
    SumCols(Var),
    MaxCols { x: Var, arg: Vec<usize> },
    BroadcastRow(Var),
    BroadcastCol(Var),
    Scale(Var, f64),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    StopGrad,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant)
    }

    /// A non-parameter leaf whose adjoint can be read back from
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Input)
    }

    /// A leaf bound to a trainable parameter; its adjoint is collected per
    /// [`ParamId`] by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let id = store.id(name)?;
        Ok(self.param(store, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .add(self.value(b))
            .map_err(|_| shape_error("add", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .sub(self.value(b))
            .map_err(|_| shape_error("sub", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self
            .value(a)
            .mul(self.value(b))
            .map_err(|_| shape_error("mul", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let value = self
            .value(a)
            .div(self.value(b))
            .map_err(|_| shape_error("div", self.value(a), self.value(b)))?;
        Ok(self.push(value, Op::Div(a, b)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.value(x).data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        let value = self.value(x).map(f64::ln);
        Ok(self.push(value, Op::Log(x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(matrix::sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(matrix::softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layernorm_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.shape();
        let mut normalized = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = input.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            for (o, v) in normalized.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(
            normalized.clone(),
            Op::LayerNormRows {
                x,
                normalized,
                inv_std,
            },
        )
    }

    /// Row sums, `rows x 1`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_rows();
        self.push(value, Op::SumRows(x))
    }

    /// Column sums, `1 x cols`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_cols();
        self.push(value, Op::SumCols(x))
    }

    /// Column maxima, `1 x cols`. The adjoint goes to the first maximizing row.
    pub fn max_cols(&mut self, x: Var) -> Var {
        let (value, arg) = self.value(x).max_cols_with_arg();
        self.push(value, Op::MaxCols { x, arg })
    }

    /// Repeats a `1 x c` row `rows` times.
    pub fn broadcast_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        let value = self.value(x).broadcast_row(rows)?;
        Ok(self.push(value, Op::BroadcastRow(x)))
    }

    /// Repeats an `r x 1` column `cols` times.
    pub fn broadcast_col(&mut self, x: Var, cols: usize) -> Result<Var> {
        let value = self.value(x).broadcast_col(cols)?;
        Ok(self.push(value, Op::BroadcastCol(x)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scale(factor);
        self.push(value, Op::Scale(x, factor))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, end)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Identity in the forward pass, zero derivative in the backward pass.
    pub fn stop_grad(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGrad)
    }

    // Composites built from the primitives above.

    pub fn sum_all(&mut self, x: Var) -> Var {
        let rows = self.sum_rows(x);
        self.sum_cols(rows)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// `sqrt(x)` as `exp(0.5 * log(x))`.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let l = self.log(x)?;
        let h = self.scale(l, 0.5);
        Ok(self.exp(h))
    }

    /// `x @ w + b` with `b` a `1 x out` row broadcast over the rows of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let rows = self.shape(y).0;
                let bb = self.broadcast_row(b, rows)?;
                self.add(y, bb)
            }
            None => Ok(y),
        }
    }

    /// Log-sum-exp over each column, `1 x cols`. The max shift is stop-gradded,
    /// which is exact because the result does not depend on it.
    pub fn logsumexp_cols(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x).0;
        let m = self.max_cols(x);
        let m = self.stop_grad(m);
        let mb = self.broadcast_row(m, rows)?;
        let shifted = self.sub(x, mb)?;
        let e = self.exp(shifted);
        let s = self.sum_cols(e);
        let l = self.log(s)?;
        self.add(l, m)
    }

    /// Softmax over each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let cols = self.shape(x).1;
        let xt = self.transpose(x);
        let m = self.max_cols(xt);
        let m = self.stop_grad(m);
        let mt = self.transpose(m);
        let mb = self.broadcast_col(mt, cols)?;
        let shifted = self.sub(x, mb)?;
        let e = self.exp(shifted);
        let s = self.sum_rows(e);
        let sb = self.broadcast_col(s, cols)?;
        self.div(e, sb)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        ensure!(root.0 < self.nodes.len(), "root {root:?} is not on this tape");
        let root_shape = self.shape(root);
        ensure!(
            root_shape == (1, 1),
            "backward needs a scalar root, got {}x{}",
            root_shape.0,
            root_shape.1
        );
        let mut adj: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Matrix::scalar(1.0));
        let mut params: Vec<(ParamId, Matrix)> = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::StopGrad => {}
                Op::Input => {
                    adj[i] = Some(g);
                }
                Op::Param(id) => {
                    match params.iter_mut().find(|(p, _)| p == id) {
                        Some((_, acc)) => acc.add_assign(&g)?,
                        None => params.push((*id, g.clone())),
                    }
                    adj[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b))?;
                    let gb = self.value(*a).t_matmul(&g)?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone())?;
                    accumulate(&mut adj, *b, g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0))?;
                    accumulate(&mut adj, *a, g)?;
                }
                Op::Mul(a, b) => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let ga = g.div(bv)?;
                    // d(a/b)/db = -(a/b)/b
                    let gb = g.mul(&node.value)?.div(bv)?.scale(-1.0);
                    accumulate(&mut adj, *a, ga)?;
                    accumulate(&mut adj, *b, gb)?;
                }
                Op::Exp(x) => {
                    let gx = g.mul(&node.value)?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Log(x) => {
                    let gx = g.div(self.value(*x))?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&node.value, |g, s| g * s * (1.0 - s))?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Softplus(x) => {
                    let gx = g.zip_map(self.value(*x), |g, v| g * matrix::sigmoid(v))?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(self.value(*x), |g, v| if v > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::LayerNormRows {
                    x,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = normalized.shape();
                    let n = cols as f64;
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = normalized.row(r);
                        let mean_g = gr.iter().sum::<f64>() / n;
                        let mean_gx = matrix::dot(gr, xh) / n;
                        for ((o, &gi), &xi) in gx.row_mut(r).iter_mut().zip(gr).zip(xh) {
                            *o = inv_std[r] * (gi - mean_g - xi * mean_gx);
                        }
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::SumRows(x) => {
                    let cols = self.shape(*x).1;
                    accumulate(&mut adj, *x, g.broadcast_col(cols)?)?;
                }
                Op::SumCols(x) => {
                    let rows = self.shape(*x).0;
                    accumulate(&mut adj, *x, g.broadcast_row(rows)?)?;
                }
                Op::MaxCols { x, arg } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    for (c, &r) in arg.iter().enumerate() {
                        gx[(r, c)] = g[(0, c)];
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::BroadcastRow(x) => accumulate(&mut adj, *x, g.sum_cols())?,
                Op::BroadcastCol(x) => accumulate(&mut adj, *x, g.sum_rows())?,
                Op::Scale(x, f) => accumulate(&mut adj, *x, g.scale(*f))?,
                Op::Transpose(x) => accumulate(&mut adj, *x, g.transpose())?,
                Op::SliceCols { x, start } => {
                    let (rows, cols) = self.shape(*x);
                    let mut gx = Matrix::zeros(rows, cols);
                    let width = g.cols();
                    for r in 0..rows {
                        gx.row_mut(r)[*start..*start + width].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut adj, *x, gx)?;
                }
                Op::Reshape(x) => {
                    let (rows, cols) = self.shape(*x);
                    accumulate(&mut adj, *x, g.reshape(rows, cols)?)?;
                }
            }
        }
        Ok(Gradients { adj, params })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], v: Var, g: Matrix) -> Result<()> {
    match &mut adj[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Result of a reverse sweep: per-parameter gradients plus the adjoints of
/// leaf nodes.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Matrix)>,
}

impl Gradients {
    /// Adjoint of a leaf (`input` or `param`) node; `None` when no gradient
    /// reached it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.grad_mut(*id).add_assign(g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    fn store_with(name: &str, m: Matrix) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert(name, m, ParamGroup::Encoder).unwrap();
        (store, id)
    }

    #[test]
    fn exp_of_zero_is_one() {
        let mut t = Tape::new();
        let z = t.constant(Matrix::zeros(2, 2));
        let e = t.exp(z);
        assert_eq!(t.value(e), &Matrix::ones(2, 2));
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[3.0, 3.0, 3.0]));
        let y = t.layernorm_rows(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_form_gradient() {
        let x = Matrix::row_vector(&[1.5, -2.0, 0.25]);
        let (mut store, id) = store_with("w", Matrix::row_vector(&[0.3, 0.1, -0.7]));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let xc = t.constant(x.clone());
        let p = t.mul(w, xc).unwrap();
        let s = t.sum_all(p);
        t.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(id), &x);
    }

    #[test]
    fn stop_grad_blocks_everything() {
        let (mut store, id) = store_with("w", Matrix::row_vector(&[1.0, 2.0]));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let sw = t.stop_grad(w);
        assert_eq!(t.value(sw), t.value(w));
        let s = t.sum_all(sw);
        t.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(id), &Matrix::zeros(1, 2));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let (mut store, id) = store_with("w", Matrix::scalar(0.0));
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let s = t.sigmoid(w);
        let s = t.sum_all(s);
        t.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(id).item().unwrap(), 0.25);
    }

    #[test]
    fn only_live_branch_contributes() {
        // d/dx sum(x + StopGrad(x)) = 1
        let mut t = Tape::new();
        let x = t.input(Matrix::row_vector(&[1.0, -3.0, 2.0]));
        let sx = t.stop_grad(x);
        let y = t.add(x, sx).unwrap();
        let s = t.sum_all(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &Matrix::ones(1, 3));
    }

    #[test]
    fn product_with_frozen_factor() {
        // d/dx sum(StopGrad(x) * x) at x = 3 is 3
        let mut t = Tape::new();
        let x = t.input(Matrix::scalar(3.0));
        let sx = t.stop_grad(x);
        let y = t.mul(sx, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 3.0);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.input(Matrix::zeros(2, 1));
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn domain_errors() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::row_vector(&[1.0, 0.0]));
        assert!(matches!(t.log(x), Err(Error::Domain(_))));
        let one = t.constant(Matrix::row_vector(&[1.0, 1.0]));
        assert!(matches!(t.div(one, x), Err(Error::Domain(_))));
        let y = t.constant(Matrix::zeros(3, 2));
        assert!(matches!(t.matmul(x, y), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::from_rows(&[[1.0, 2.0, 3.0], [500.0, -500.0, 0.0]]).unwrap());
        let s = t.softmax_rows(x).unwrap();
        for r in t.value(s).sum_rows().data() {
            assert!((r - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn parameter_used_twice_accumulates() {
        let (mut store, id) = store_with("w", Matrix::scalar(2.0));
        let mut t = Tape::new();
        let a = t.param(&store, id);
        let b = t.param(&store, id);
        let y = t.mul(a, b).unwrap();
        t.backward(y).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.grad(id).item().unwrap(), 4.0);
    }
}
