//! Eager computation graph with reverse-mode gradients.
//!
//! Every operator computes its value when it is recorded. `backward` walks
//! the recorded nodes in reverse order and accumulates adjoints, so repeated
//! runs over the same inputs are bit-identical.

use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Guard added inside the cross-entropy logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ConstSub(Var),
    MulScalar(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Hinge(Var),
    VecMat(Var, Var),
    Dot(Var, Var),
    Outer(Var, Var),
    Softmax(Var),
    RatioNorm(Var),
    Concat(Vec<Var>),
    Sum(Var),
    AddN(Vec<Var>),
    Mean(Vec<Var>),
    Gather(Var, Vec<usize>),
    SquaredError(Var, Var),
    CrossEntropy(Var, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints for every node of a graph after [`Graph::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn check_same(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn check_vector(t: &Tensor, op: &str) -> Result<()> {
    if t.rank() != 1 {
        return Err(Error::shape(format!("{op}: expected a vector, got {:?}", t.shape())));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, name: &str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::from_op(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect(), name)?;
        Ok(self.push(out, op))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_op(ta.shape().to_vec(), data, name)?;
        Ok(self.push(out, op))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Records the current value of a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store.position(name)?;
        let value = store.by_index(idx).value().clone();
        Ok(self.push(value, Op::Param(idx)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", |v| c * v, Op::Scale(x, c))
    }

    /// `c - x`, elementwise.
    pub fn const_sub(&mut self, c: f64, x: Var) -> Result<Var> {
        self.unary(x, "const_sub", |v| c - v, Op::ConstSub(x))
    }

    /// Multiplies every entry of `x` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let st = self.value(s);
        if st.len() != 1 {
            return Err(Error::shape(format!(
                "mul_scalar: scalar operand has shape {:?}",
                st.shape()
            )));
        }
        let c = st.item();
        self.unary(x, "mul_scalar", |v| c * v, Op::MulScalar(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", sigmoid, Op::Sigmoid(x))
    }

    /// `max(x, 0)` elementwise; the subgradient at 0 is 0.
    pub fn hinge(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "hinge", |v| v.max(0.0), Op::Hinge(x))
    }

    /// Row vector times matrix: `[k] x [k, n] -> [n]`.
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (tv, tm) = (self.value(v), self.value(m));
        check_vector(tv, "vecmat")?;
        if tm.rank() != 2 || tm.shape()[0] != tv.len() {
            return Err(Error::shape(format!(
                "vecmat: cannot multiply {:?} by {:?}",
                tv.shape(),
                tm.shape()
            )));
        }
        let (k, n) = (tm.shape()[0], tm.shape()[1]);
        let mut out = vec![0.0; n];
        let md = tm.data();
        for (i, &vi) in tv.data().iter().enumerate().take(k) {
            let row = &md[i * n..(i + 1) * n];
            for (o, &mij) in out.iter_mut().zip(row) {
                *o += vi * mij;
            }
        }
        let out = Tensor::from_op(vec![n], out, "vecmat")?;
        Ok(self.push(out, Op::VecMat(v, m)))
    }

    /// Inner product of two vectors, as a `[1]` tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_vector(ta, "dot")?;
        check_same(ta, tb, "dot")?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let out = Tensor::from_op(vec![1], vec![s], "dot")?;
        Ok(self.push(out, Op::Dot(a, b)))
    }

    /// `[m] x [n] -> [m, n]` with `out[i, j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_vector(ta, "outer")?;
        check_vector(tb, "outer")?;
        let mut data = Vec::with_capacity(ta.len() * tb.len());
        for &x in ta.data() {
            data.extend(tb.data().iter().map(|&y| x * y));
        }
        let out = Tensor::from_op(vec![ta.len(), tb.len()], data, "outer")?;
        Ok(self.push(out, Op::Outer(a, b)))
    }

    /// Softmax over a vector, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_vector(t, "softmax")?;
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = t.data().iter().map(|&v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let out = Tensor::from_op(vec![t.len()], exps.iter().map(|e| e / z).collect(), "softmax")?;
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// `x / sum(x)`. Fails unless the sum is strictly positive.
    pub fn ratio_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check_vector(t, "ratio_norm")?;
        let z = t.sum();
        if z <= 0.0 {
            return Err(Error::Numerics(format!(
                "ratio normalization needs a positive logit sum, got {z}"
            )));
        }
        let out = Tensor::from_op(vec![t.len()], t.data().iter().map(|v| v / z).collect(), "ratio_norm")?;
        Ok(self.push(out, Op::RatioNorm(x)))
    }

    /// Concatenates vectors in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat: no operands"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            check_vector(t, "concat")?;
            data.extend_from_slice(t.data());
        }
        let n = data.len();
        let out = Tensor::from_op(vec![n], data, "concat")?;
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let out = Tensor::from_op(vec![1], vec![s], "sum")?;
        Ok(self.push(out, Op::Sum(x)))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let acc = self.accumulate(xs, "add_n")?;
        let shape = self.value(xs[0]).shape().to_vec();
        let out = Tensor::from_op(shape, acc, "add_n")?;
        Ok(self.push(out, Op::AddN(xs.to_vec())))
    }

    /// Elementwise mean of equally shaped tensors (the batch mean).
    pub fn mean(&mut self, xs: &[Var]) -> Result<Var> {
        let acc = self.accumulate(xs, "mean")?;
        let n = xs.len() as f64;
        let shape = self.value(xs[0]).shape().to_vec();
        let out = Tensor::from_op(shape, acc.into_iter().map(|v| v / n).collect(), "mean")?;
        Ok(self.push(out, Op::Mean(xs.to_vec())))
    }

    fn accumulate(&self, xs: &[Var], op: &str) -> Result<Vec<f64>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape(format!("{op}: no operands")))?;
        let mut acc = self.value(*first).data().to_vec();
        for &x in &xs[1..] {
            let t = self.value(x);
            check_same(self.value(*first), t, op)?;
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        Ok(acc)
    }

    /// Picks entries by flat row-major index into a vector.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(Error::shape("gather: no indices"));
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= t.len() {
                return Err(Error::shape(format!(
                    "gather: index {i} out of range for {:?}",
                    t.shape()
                )));
            }
            data.push(t.data()[i]);
        }
        let out = Tensor::from_op(vec![indices.len()], data, "gather")?;
        Ok(self.push(out, Op::Gather(x, indices.to_vec())))
    }

    /// `sum((a - b)^2)`, as a `[1]` tensor.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        check_same(ta, tb, "squared_error")?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::from_op(vec![1], vec![s], "squared_error")?;
        Ok(self.push(out, Op::SquaredError(a, b)))
    }

    /// `-ln(p[label] + LOG_EPS)` for a probability vector `p`.
    pub fn cross_entropy(&mut self, p: Var, label: usize) -> Result<Var> {
        let t = self.value(p);
        check_vector(t, "cross_entropy")?;
        if label >= t.len() {
            return Err(Error::shape(format!(
                "cross_entropy: label {label} out of range for {} classes",
                t.len()
            )));
        }
        let v = -(t.data()[label] + LOG_EPS).ln();
        let out = Tensor::from_op(vec![1], vec![v], "cross_entropy")?;
        Ok(self.push(out, Op::CrossEntropy(p, label)))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        if self.value(root).len() != 1 {
            return Err(Error::shape(format!(
                "backward: root must be scalar, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(&[1], 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::Add(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, g.clone());
                    accum(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accum(&mut grads, *a, zip_map(&g, tb, |gv, bv| gv * bv));
                    accum(&mut grads, *b, zip_map(&g, ta, |gv, av| gv * av));
                }
                Op::Scale(x, c) => accum(&mut grads, *x, g.map(|v| c * v)),
                Op::ConstSub(x) => accum(&mut grads, *x, g.map(|v| -v)),
                Op::MulScalar(x, s) => {
                    let c = self.value(*s).item();
                    let tx = self.value(*x);
                    let ds: f64 = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    accum(&mut grads, *x, g.map(|v| c * v));
                    accum(&mut grads, *s, Tensor::filled(&[1], ds));
                }
                Op::Tanh(x) => accum(&mut grads, *x, zip_map(&g, y, |gv, yv| gv * (1.0 - yv * yv))),
                Op::Sigmoid(x) => {
                    accum(&mut grads, *x, zip_map(&g, y, |gv, yv| gv * yv * (1.0 - yv)))
                }
                Op::Hinge(x) => {
                    let tx = self.value(*x);
                    accum(&mut grads, *x, zip_map(&g, tx, |gv, xv| if xv > 0.0 { gv } else { 0.0 }))
                }
                Op::VecMat(v, m) => {
                    let (tv, tm) = (self.value(*v), self.value(*m));
                    let (k, n) = (tm.shape()[0], tm.shape()[1]);
                    let gd = g.data();
                    let md = tm.data();
                    let dv: Vec<f64> = (0..k)
                        .map(|i| md[i * n..(i + 1) * n].iter().zip(gd).map(|(a, b)| a * b).sum())
                        .collect();
                    let mut dm = Vec::with_capacity(k * n);
                    for &vi in tv.data() {
                        dm.extend(gd.iter().map(|&gj| vi * gj));
                    }
                    accum(&mut grads, *v, raw(vec![k], dv));
                    accum(&mut grads, *m, raw(vec![k, n], dm));
                }
                Op::Dot(a, b) => {
                    let gs = g.item();
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    accum(&mut grads, *a, tb.map(|v| gs * v));
                    accum(&mut grads, *b, ta.map(|v| gs * v));
                }
                Op::Outer(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let n = tb.len();
                    let gd = g.data();
                    let da: Vec<f64> = (0..ta.len())
                        .map(|i| gd[i * n..(i + 1) * n].iter().zip(tb.data()).map(|(x, y)| x * y).sum())
                        .collect();
                    let mut db = vec![0.0; n];
                    for (i, &ai) in ta.data().iter().enumerate() {
                        for (j, d) in db.iter_mut().enumerate() {
                            *d += gd[i * n + j] * ai;
                        }
                    }
                    accum(&mut grads, *a, raw(vec![ta.len()], da));
                    accum(&mut grads, *b, raw(vec![n], db));
                }
                Op::Softmax(x) => {
                    let gy: f64 = g.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
                    accum(&mut grads, *x, zip_map(&g, y, |gv, yv| yv * (gv - gy)));
                }
                Op::RatioNorm(x) => {
                    let tx = self.value(*x);
                    let z = tx.sum();
                    let gx: f64 = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    accum(&mut grads, *x, g.map(|gv| gv / z - gx / (z * z)));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accum(&mut grads, p, raw(vec![n], g.data()[offset..offset + n].to_vec()));
                        offset += n;
                    }
                }
                Op::Sum(x) => {
                    let gs = g.item();
                    accum(&mut grads, *x, Tensor::filled(self.value(*x).shape(), gs));
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        accum(&mut grads, x, g.clone());
                    }
                }
                Op::Mean(xs) => {
                    let n = xs.len() as f64;
                    let share = g.map(|v| v / n);
                    for &x in xs {
                        accum(&mut grads, x, share.clone());
                    }
                }
                Op::Gather(x, indices) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (k, &i) in indices.iter().enumerate() {
                        dx.data_mut()[i] += g.data()[k];
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::SquaredError(a, b) => {
                    let gs = g.item();
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let da = zip_map(ta, tb, |x, y| 2.0 * gs * (x - y));
                    accum(&mut grads, *b, da.map(|v| -v));
                    accum(&mut grads, *a, da);
                }
                Op::CrossEntropy(p, label) => {
                    let tp = self.value(*p);
                    let mut dp = Tensor::zeros(tp.shape());
                    dp.data_mut()[*label] = -g.item() / (tp.data()[*label] + LOG_EPS);
                    accum(&mut grads, *p, dp);
                }
            }
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numerics(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Adjoints { grads })
    }

    /// Parameter gradients from `adjoints`, summed over every leaf that
    /// references the same parameter. Keys are store indices.
    pub fn param_grads(&self, adjoints: &Adjoints) -> BTreeMap<usize, Tensor> {
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate().take(adjoints.grads.len()) {
            if let (Op::Param(p), Some(g)) = (&node.op, &adjoints.grads[i]) {
                match out.get_mut(p) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        out.insert(*p, g.clone());
                    }
                }
            }
        }
        out
    }
}

fn raw(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::from_raw(shape, data)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_raw(a.shape().to_vec(), data)
}

fn accum(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
