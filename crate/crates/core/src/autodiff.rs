//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] owns every value computed during one differentiable
//! computation. Operations append nodes; a [`Var`] is a handle into the tape.
//! [`Graph::grad`] walks the tape backwards and expresses every
//! vector-Jacobian product with the same primitive operations, appending them
//! to the tape. The gradients it returns are therefore ordinary nodes that
//! can be differentiated again, which is what unrolled bi-level optimization
//! needs.
//!
//! There is no implicit broadcasting. The only exception is that `add`,
//! `sub` and `mul` accept a single-element operand against a tensor of any
//! shape. Row and column broadcasts are explicit ops.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::Numeric`] instead of propagating a poisoned value.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Recip(Var),
    Sum(Var),
    Mean(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Reshape(Var),
    BroadcastScalar(Var),
    SumAxis0(Var),
    SumAxis1(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Softmax(Var),
    SoftmaxCrossEntropy(Var, Arc<[usize]>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Matmul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Recip(_) => "recip",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Reshape(_) => "reshape",
            Op::BroadcastScalar(_) => "broadcast_scalar",
            Op::SumAxis0(_) => "sum_axis0",
            Op::SumAxis1(_) => "sum_axis1",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::BroadcastCols(_) => "broadcast_cols",
            Op::Softmax(_) => "softmax",
            Op::SoftmaxCrossEntropy(..) => "softmax_cross_entropy",
        }
    }

    pub fn parents(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Recip(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Reshape(a)
            | Op::BroadcastScalar(a)
            | Op::SumAxis0(a)
            | Op::SumAxis1(a)
            | Op::BroadcastRows(a)
            | Op::BroadcastCols(a)
            | Op::Softmax(a)
            | Op::SoftmaxCrossEntropy(a, _) => vec![a],
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that gradients may be taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(format!("non-finite value produced by {}", op.name())));
        }
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::shape(format!(
                "{}: {:?} vs {:?}",
                op.name(),
                ta.shape(),
                tb.shape()
            )));
        };
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::numeric("log of a non-positive value"));
        }
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().contains(&0.0) {
            return Err(Error::numeric("reciprocal of zero"));
        }
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    // ---------------------------------------------------------------------
    // reductions and explicit broadcasts

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::shape("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Fills `shape` with the value of a single-element tensor.
    pub fn broadcast_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if !t.is_scalar() {
            return Err(Error::shape(format!(
                "broadcast_scalar: operand has shape {:?}",
                t.shape()
            )));
        }
        let v = Tensor::filled(shape, t.item());
        self.push(v, Op::BroadcastScalar(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        self.push(v, Op::Reshape(a))
    }

    /// `(n, d) -> (d)`: sum over rows.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.dims2(a, "sum_axis0")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &x) in out.iter_mut().zip(&src[i * d..(i + 1) * d]) {
                *o += x;
            }
        }
        self.push(Tensor::from_vec(out), Op::SumAxis0(a))
    }

    /// `(n, d) -> (n)`: sum within each row.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (_, d) = self.dims2(a, "sum_axis1")?;
        let out = self.value(a).data().chunks(d.max(1)).map(|r| r.iter().sum()).collect();
        self.push(Tensor::from_vec(out), Op::SumAxis1(a))
    }

    /// `(d) -> (n, d)`: repeat a vector as every row.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 {
            return Err(Error::shape(format!("broadcast_rows: {:?}", t.shape())));
        }
        let d = t.numel();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![n, d], data)?;
        self.push(v, Op::BroadcastRows(a))
    }

    /// `(n) -> (n, d)`: repeat each element across its row.
    pub fn broadcast_cols(&mut self, a: Var, d: usize) -> Result<Var> {
        let t = self.value(a);
        if t.ndim() != 1 {
            return Err(Error::shape(format!("broadcast_cols: {:?}", t.shape())));
        }
        let n = t.numel();
        let mut data = Vec::with_capacity(n * d);
        for &x in t.data() {
            data.extend(std::iter::repeat_n(x, d));
        }
        let v = Tensor::new(vec![n, d], data)?;
        self.push(v, Op::BroadcastCols(a))
    }

    /// `x + b` with `b` of shape `(d)` added to every row of `x` `(n, d)`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, _) = self.dims2(x, "add_row")?;
        let rows = self.broadcast_rows(b, n)?;
        self.add(x, rows)
    }

    // ---------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul lhs")?;
        let (k2, n) = self.dims2(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul: ({m}, {k}) x ({k2}, {n})")));
        }
        let v = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::new(vec![m, n], v)?, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a))
    }

    // ---------------------------------------------------------------------
    // classification

    /// Row-wise softmax of `(n, k)` logits.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, k) = self.dims2(a, "softmax")?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(k.max(1)) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(a))
    }

    /// Per-sample cross-entropy of `(n, k)` logits against integer labels.
    /// Returns a vector of shape `(n)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = self.dims2(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape(format!(
                "softmax_cross_entropy: {} labels for {} rows",
                labels.len(),
                n
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        let src = self.value(logits).data();
        let losses = src
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .collect();
        self.push(Tensor::from_vec(losses), Op::SoftmaxCrossEntropy(logits, labels.into()))
    }

    /// Mean cross-entropy over the batch.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let per_sample = self.softmax_cross_entropy(logits, labels)?;
        self.mean(per_sample)
    }

    fn dims2(&self, a: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(a) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(format!("{what}: expected rank 2, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------------
    // backward

    /// Gradients of a single-element `output` with respect to `wrt`.
    ///
    /// The backward pass is recorded on this graph, so the returned nodes
    /// are themselves differentiable. Inputs that `output` does not depend
    /// on get a zero gradient.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if !self.value(output).is_scalar() {
            return Err(Error::contract(format!(
                "grad needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let n = output.0 + 1;

        // Only nodes on a path from some `wrt` to `output` need gradients.
        let mut live = vec![false; n];
        for w in wrt {
            if w.0 < n {
                live[w.0] = true;
            }
        }
        for i in 0..n {
            if !live[i] {
                live[i] = self.nodes[i].op.parents().iter().any(|p| live[p.0]);
            }
        }

        let mut grads: Vec<Option<Var>> = vec![None; n];
        if live[output.0] {
            let ones = Tensor::filled(self.shape(output), 1.0);
            grads[output.0] = Some(self.constant(ones));
        }

        for i in (0..n).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let op = self.nodes[i].op.clone();
            for (parent, contrib) in self.vjp(Var(i), &op, g, &live)? {
                grads[parent.0] = Some(match grads[parent.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match grads.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let z = Tensor::zeros(self.shape(w));
                    Ok(self.constant(z))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of `node = op(...)` for its live parents.
    fn vjp(&mut self, node: Var, op: &Op, g: Var, live: &[bool]) -> Result<Vec<(Var, Var)>> {
        let is_live = |v: Var| live[v.0];
        let mut out = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if is_live(a) {
                    out.push((a, self.reduce_to(g, a)?));
                }
                if is_live(b) {
                    out.push((b, self.reduce_to(g, b)?));
                }
            }
            Op::Sub(a, b) => {
                if is_live(a) {
                    out.push((a, self.reduce_to(g, a)?));
                }
                if is_live(b) {
                    let neg = self.scale(g, -1.0)?;
                    out.push((b, self.reduce_to(neg, b)?));
                }
            }
            Op::Mul(a, b) => {
                if is_live(a) {
                    let t = self.mul(g, b)?;
                    out.push((a, self.reduce_to(t, a)?));
                }
                if is_live(b) {
                    let t = self.mul(g, a)?;
                    out.push((b, self.reduce_to(t, b)?));
                }
            }
            Op::Matmul(a, b) => {
                if is_live(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if is_live(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::Sigmoid(a) => {
                // s * (1 - s)
                let one_minus = self.scale(node, -1.0)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let ds = self.mul(node, one_minus)?;
                out.push((a, self.mul(g, ds)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, node)?)),
            Op::Log(a) => {
                let r = self.recip(a)?;
                out.push((a, self.mul(g, r)?));
            }
            Op::Recip(a) => {
                let sq = self.mul(node, node)?;
                let d = self.scale(sq, -1.0)?;
                out.push((a, self.mul(g, d)?));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.broadcast_scalar(g, &shape)?));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).numel() as f64;
                let b = self.broadcast_scalar(g, &shape)?;
                out.push((a, self.scale(b, 1.0 / n)?));
            }
            Op::Scale(a, c) => out.push((a, self.scale(g, c)?)),
            Op::AddScalar(a, _) => out.push((a, g)),
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::BroadcastScalar(a) => out.push((a, self.reduce_to(g, a)?)),
            Op::SumAxis0(a) => {
                let n = self.shape(a)[0];
                out.push((a, self.broadcast_rows(g, n)?));
            }
            Op::SumAxis1(a) => {
                let d = self.shape(a)[1];
                out.push((a, self.broadcast_cols(g, d)?));
            }
            Op::BroadcastRows(a) => out.push((a, self.sum_axis0(g)?)),
            Op::BroadcastCols(a) => out.push((a, self.sum_axis1(g)?)),
            Op::Softmax(a) => {
                // y * (g - rowsum(g * y))
                let k = self.shape(a)[1];
                let gy = self.mul(g, node)?;
                let s = self.sum_axis1(gy)?;
                let s = self.broadcast_cols(s, k)?;
                let centered = self.sub(g, s)?;
                out.push((a, self.mul(node, centered)?));
            }
            Op::SoftmaxCrossEntropy(logits, ref labels) => {
                // g_i * (softmax(x_i) - onehot(y_i))
                let (n, k) = self.dims2(logits, "softmax_cross_entropy")?;
                let p = self.softmax(logits)?;
                let mut onehot = Tensor::zeros(&[n, k]);
                for (i, &y) in labels.iter().enumerate() {
                    onehot.data_mut()[i * k + y] = 1.0;
                }
                let onehot = self.constant(onehot);
                let diff = self.sub(p, onehot)?;
                let gb = self.broadcast_cols(g, k)?;
                out.push((logits, self.mul(gb, diff)?));
            }
        }
        Ok(out)
    }

    /// Sums a broadcast gradient back down to the shape of `target`.
    fn reduce_to(&mut self, g: Var, target: Var) -> Result<Var> {
        if self.shape(g) == self.shape(target) {
            return Ok(g);
        }
        let s = self.sum(g)?;
        let shape = self.shape(target).to_vec();
        if self.shape(s) == shape.as_slice() {
            Ok(s)
        } else {
            self.reshape(s, &shape)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row-major `(m, k) x (k, n)`.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides describe dense row-major layouts of those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}
