//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every forward op appends a node holding its output value and enough
//! information to push gradients back to its inputs. `Var` is an index into
//! the tape; tapes are cheap and meant to be rebuilt per mini-batch.

use std::sync::Arc;

use super::store::{ParamId, ParameterStore};
use super::{gemm, NumericsError, SparseAdjacency, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Square(Var),
    DotRows(Var, Var),
    GatherRows(Var, Vec<u32>),
    Propagate(Arc<SparseAdjacency>, Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient of a scalar with respect to every node on a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient for `v`; zeros are reported as `None` when `v` does not feed the loss.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow for large |x|.
fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; gradients are still tracked for it (see [`Tape::gradients`]).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumericsError> {
        self.push("leaf", value, Op::Leaf)
    }

    /// Reads a parameter's current value; [`Tape::backward`] routes its gradient
    /// into the store.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Result<Var, NumericsError> {
        self.push("param", store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, ta.data(), false, tb.data(), false, &mut out, false);
        self.push("matmul", Tensor::matrix(n, m, out)?, Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &'static str, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, value, op)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var, NumericsError> {
        self.map("scale", a, |x| c * x, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.map("square", a, |x| x * x, Op::Square(a))
    }

    /// `x: [n, d]` plus a bias `b: [d]` added to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.shape().len() != 2 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let d = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, bb) in row.iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", value, Op::AddBias(x, b))
    }

    /// `[n, a] ‖ [n, b] → [n, a + b]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (n, ca, cb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(&ta.data()[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data()[r * cb..(r + 1) * cb]);
        }
        let value = Tensor::matrix(n, ca + cb, data)?;
        self.push("concat_cols", value, Op::ConcatCols(a, b))
    }

    /// `[n, d]` over `[m, d]` → `[n + m, d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::matrix(ta.shape()[0] + tb.shape()[0], ta.shape()[1], data)?;
        self.push("concat_rows", value, Op::ConcatRows(a, b))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.shape().len() != 2 || start + len > t.shape()[0] {
            return Err(NumericsError::Shape {
                op: "slice_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let d = t.shape()[1];
        let value = Tensor::matrix(len, d, t.data()[start * d..(start + len) * d].to_vec())?;
        self.push("slice_rows", value, Op::SliceRows(a, start))
    }

    /// Row-wise dot product of two `[n, d]` matrices → `[n]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || ta.shape() != tb.shape() {
            return Err(shape_err("dot_rows", ta, tb));
        }
        let d = ta.shape()[1];
        let data: Vec<f32> = if d == 0 {
            vec![0.0; ta.shape()[0]]
        } else {
            ta.data()
                .chunks(d)
                .zip(tb.data().chunks(d))
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
                .collect()
        };
        self.push("dot_rows", Tensor::vector(data), Op::DotRows(a, b))
    }

    /// Selects rows by index; repeated indices are allowed.
    pub fn gather_rows(&mut self, a: Var, rows: &[u32]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(NumericsError::Shape {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![rows.len()],
            });
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r as usize >= n {
                return Err(NumericsError::IndexOutOfRange {
                    index: r as usize,
                    rows: n,
                });
            }
            data.extend_from_slice(&t.data()[r as usize * d..(r as usize + 1) * d]);
        }
        let value = Tensor::matrix(rows.len(), d, data)?;
        self.push("gather_rows", value, Op::GatherRows(a, rows.to_vec()))
    }

    /// `Â · x` for node embeddings `x: [num_nodes, d]`.
    pub fn propagate(&mut self, adj: &Arc<SparseAdjacency>, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.shape()[0] != adj.num_nodes() {
            return Err(NumericsError::Shape {
                op: "propagate",
                lhs: t.shape().to_vec(),
                rhs: vec![adj.num_nodes()],
            });
        }
        let d = t.shape()[1];
        let mut out = vec![0.0; t.len()];
        adj.propagate(t.data(), d, &mut out);
        let value = Tensor::matrix(adj.num_nodes(), d, out)?;
        self.push("propagate", value, Op::Propagate(Arc::clone(adj), x))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum(a))
    }

    /// Mean of all elements; 0 for an empty tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        let n = t.len().max(1);
        let s: f64 = t.data().iter().map(|&x| x as f64).sum();
        self.push("mean", Tensor::scalar((s / n as f64) as f32), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.len() {
            return Err(NumericsError::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// `λ · Σ x²` over every element of every listed tensor.
    pub fn l2_penalty(&mut self, lambda: f32, vars: &[Var]) -> Result<Var, NumericsError> {
        let mut total: Option<Var> = None;
        for &v in vars {
            let sq = self.square(v)?;
            let s = self.sum(sq)?;
            total = Some(match total {
                Some(t) => self.add(t, s)?,
                None => s,
            });
        }
        match total {
            Some(t) => self.scale(t, lambda),
            None => self.leaf(Tensor::scalar(0.0)),
        }
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    let ga = acc(&mut grads, *a, n * k);
                    gemm(n, m, k, &g, false, tb.data(), true, ga, true);
                    let gb = acc(&mut grads, *b, k * m);
                    gemm(k, n, m, ta.data(), true, &g, false, gb, true);
                }
                Op::Add(a, b) => {
                    for (x, d) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += d;
                    }
                    for (x, d) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *x += d;
                    }
                }
                Op::Sub(a, b) => {
                    for (x, d) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += d;
                    }
                    for (x, d) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *x -= d;
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    for ((x, d), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(tb.data()) {
                        *x += d * y;
                    }
                    for ((x, d), y) in acc(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(ta.data()) {
                        *x += d * y;
                    }
                }
                Op::Scale(a, c) => {
                    for (x, d) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += c * d;
                    }
                }
                Op::AddBias(x, b) => {
                    let d = self.value(*b).len();
                    for (v, dd) in acc(&mut grads, *x, g.len()).iter_mut().zip(&g) {
                        *v += dd;
                    }
                    let gb = acc(&mut grads, *b, d);
                    for row in g.chunks(d.max(1)) {
                        for (v, dd) in gb.iter_mut().zip(row) {
                            *v += dd;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(*a).shape()[1], self.value(*b).shape()[1]);
                    let n = self.value(*a).shape()[0];
                    let ga = acc(&mut grads, *a, n * ca);
                    for r in 0..n {
                        for c in 0..ca {
                            ga[r * ca + c] += g[r * (ca + cb) + c];
                        }
                    }
                    let gb = acc(&mut grads, *b, n * cb);
                    for r in 0..n {
                        for c in 0..cb {
                            gb[r * cb + c] += g[r * (ca + cb) + ca + c];
                        }
                    }
                }
                Op::ConcatRows(a, b) => {
                    let la = self.value(*a).len();
                    let lb = self.value(*b).len();
                    for (x, d) in acc(&mut grads, *a, la).iter_mut().zip(&g[..la]) {
                        *x += d;
                    }
                    for (x, d) in acc(&mut grads, *b, lb).iter_mut().zip(&g[la..]) {
                        *x += d;
                    }
                }
                Op::SliceRows(a, start) => {
                    let ta = self.value(*a);
                    let d = ta.shape()[1];
                    let ga = acc(&mut grads, *a, ta.len());
                    for (x, dd) in ga[start * d..start * d + g.len()].iter_mut().zip(&g) {
                        *x += dd;
                    }
                }
                Op::Relu(a) => {
                    let ta = self.value(*a);
                    for ((x, d), v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(ta.data()) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    for ((x, d), s) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(node.value.data()) {
                        *x += d * s * (1.0 - s);
                    }
                }
                Op::Softplus(a) => {
                    let ta = self.value(*a);
                    for ((x, d), v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(ta.data()) {
                        *x += d * sigmoid(*v);
                    }
                }
                Op::Square(a) => {
                    let ta = self.value(*a);
                    for ((x, d), v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(ta.data()) {
                        *x += 2.0 * v * d;
                    }
                }
                Op::DotRows(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let d = ta.shape()[1];
                    let ga = acc(&mut grads, *a, ta.len());
                    for (r, gr) in g.iter().enumerate() {
                        for c in 0..d {
                            ga[r * d + c] += gr * tb.data()[r * d + c];
                        }
                    }
                    let gb = acc(&mut grads, *b, tb.len());
                    for (r, gr) in g.iter().enumerate() {
                        for c in 0..d {
                            gb[r * d + c] += gr * ta.data()[r * d + c];
                        }
                    }
                }
                Op::GatherRows(a, rows) => {
                    let ta = self.value(*a);
                    let d = ta.shape()[1];
                    let ga = acc(&mut grads, *a, ta.len());
                    for (j, &r) in rows.iter().enumerate() {
                        let dst = &mut ga[r as usize * d..(r as usize + 1) * d];
                        for (x, dd) in dst.iter_mut().zip(&g[j * d..(j + 1) * d]) {
                            *x += dd;
                        }
                    }
                }
                Op::Propagate(adj, a) => {
                    // Â is symmetric, so the adjoint is another propagation.
                    let d = self.value(*a).shape()[1];
                    let mut back = vec![0.0; g.len()];
                    adj.propagate(&g, d, &mut back);
                    for (x, dd) in acc(&mut grads, *a, g.len()).iter_mut().zip(&back) {
                        *x += dd;
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    let share = g[0] / n.max(1) as f32;
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += share;
                    }
                }
                Op::Reshape(a) => {
                    for (x, d) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += d;
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates `loss` and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<(), NumericsError> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[idx].as_ref()) {
                if let Some(index) = g.iter().position(|x| !x.is_finite()) {
                    return Err(NumericsError::NonFiniteGrad {
                        name: store.name(*id).to_string(),
                        index,
                    });
                }
                for (dst, src) in store.grad_mut(*id).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }
}
