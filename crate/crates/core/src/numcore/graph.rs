//! Value arena plus reverse-mode tape.
//!
//! Every operation stores its output in the arena. An operation is also
//! appended to the tape when at least one of its inputs requires a
//! gradient, so a graph built only from constants records nothing.

use super::tensor::{gemm, Layout, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug)]
enum Op<S> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: Conv2dGeometry },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Reshape(Var),
    Softmax(Var),
    Log(Var),
    Mean(Var),
    Sum(Var),
    RowL2Dist(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<S> },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Mix { weights: Var, parts: Vec<Var> },
}

#[derive(Debug)]
struct Entry<S> {
    out: Var,
    op: Op<S>,
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    tape: Vec<Entry<S>>,
}

fn shape_error(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::contract(op, format!("incompatible shapes {a:?} and {b:?}"))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), tape: Vec::new() }
    }

    /// Number of recorded tape entries.
    pub fn tape_len(&self) -> usize {
        self.tape.len()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf node. Parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, rg: bool, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::numeric(name, "non-finite output"));
        }
        self.nodes.push(Node { value, requires_grad: rg });
        let out = Var(self.nodes.len() - 1);
        if rg {
            self.tape.push(Entry { out, op });
        }
        Ok(out)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_error(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(name, value, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::from_f64(c);
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|&v| v * c).collect())?;
        let rg = self.rg(&[x]);
        self.push("scale", value, rg, Op::Scale(x, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_error("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(ta.data(), m, k, Layout::Normal, tb.data(), k, n, Layout::Normal, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        self.push("matmul", value, rg, Op::MatMul(a, b))
    }

    /// Affine map `x w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
            return Err(shape_error("linear", tx.shape(), tw.shape()));
        }
        let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
        if tb.shape() != [dout] {
            return Err(shape_error("linear", tw.shape(), tb.shape()));
        }
        let mut out = vec![S::zero(); n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(tb.data());
        }
        gemm(tx.data(), n, din, Layout::Normal, tw.data(), dout, din, Layout::Transposed, &mut out, true);
        let value = Tensor::new(vec![n, dout], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push("linear", value, rg, Op::Linear { x, w, b })
    }

    /// 2-D convolution over `x: [n, c_in, h, w]` with `w: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeometry) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 4 || tw.rank() != 4 || tx.shape()[1] != tw.shape()[1] {
            return Err(shape_error("conv2d", tx.shape(), tw.shape()));
        }
        if tb.shape() != [tw.shape()[0]] || geom.stride == 0 {
            return Err(shape_error("conv2d", tw.shape(), tb.shape()));
        }
        let dims = ConvDims::new(tx.shape(), tw.shape(), geom)
            .ok_or_else(|| shape_error("conv2d", tx.shape(), tw.shape()))?;
        let n = tx.shape()[0];
        let ohw = dims.oh * dims.ow;
        let in_len = dims.cin * dims.h * dims.w;
        let mut out = vec![S::zero(); n * dims.cout * ohw];
        let mut cols = vec![S::zero(); dims.patch() * ohw];
        for i in 0..n {
            dims.im2col(&tx.data()[i * in_len..(i + 1) * in_len], &mut cols);
            let dst = &mut out[i * dims.cout * ohw..(i + 1) * dims.cout * ohw];
            for (c, row) in dst.chunks_mut(ohw).enumerate() {
                row.iter_mut().for_each(|v| *v = tb.data()[c]);
            }
            gemm(tw.data(), dims.cout, dims.patch(), Layout::Normal, &cols, dims.patch(), ohw, Layout::Normal, dst, true);
        }
        let value = Tensor::new(vec![n, dims.cout, dims.oh, dims.ow], out)?;
        let rg = self.rg(&[x, w, b]);
        self.push("conv2d", value, rg, Op::Conv2d { x, w, b, geom })
    }

    /// Non-overlapping max pooling with a square window of `size`.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 4 || size == 0 || tx.shape()[2] < size || tx.shape()[3] < size {
            return Err(Error::contract("max_pool2d", format!("cannot pool {:?} by {size}", tx.shape())));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (oh, ow) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = tx.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        self.push("max_pool2d", value, rg, Op::MaxPool2d { x, argmax })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push("relu", value, rg, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push("reshape", value, rg, Op::Reshape(x))
    }

    /// Collapse everything after the batch dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.rows(), t.row_len()];
        self.reshape(x, &shape)
    }

    /// Row-wise softmax over the last dimension of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::contract("softmax", format!("expected 2-D input, got {:?}", tx.shape())));
        }
        let cols = tx.shape()[1];
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            softmax_row(row, &mut out);
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        self.push("softmax", value, rg, Op::Softmax(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.ln()).collect())?;
        let rg = self.rg(&[x]);
        self.push("log", value, rg, Op::Log(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = S::from_f64(tx.numel() as f64);
        let total: S = tx.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("mean", Tensor::scalar(total / n), rg, Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(total), rg, Op::Sum(x))
    }

    /// Per-row Euclidean distance `||a_i - b_i||_2` of two `[n, d]` tensors.
    pub fn row_l2_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.rank() != 2 {
            return Err(shape_error("row_l2_dist", ta.shape(), tb.shape()));
        }
        let d = ta.shape()[1];
        let out: Vec<S> = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>().sqrt())
            .collect();
        let value = Tensor::new(vec![ta.shape()[0]], out)?;
        let rg = self.rg(&[a, b]);
        self.push("row_l2_dist", value, rg, Op::RowL2Dist(a, b))
    }

    /// Per-row cross-entropy of softmax(logits) against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::contract(
                "cross_entropy",
                format!("logits {:?} against {} labels", tl.shape(), labels.len()),
            ));
        }
        let classes = tl.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::contract("cross_entropy", format!("label {bad} outside [0, {classes})")));
        }
        let mut probs = Vec::with_capacity(tl.numel());
        let mut out = Vec::with_capacity(labels.len());
        for (row, &y) in tl.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
            out.push(lse - row[y]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let value = Tensor::new(vec![labels.len()], out)?;
        let rg = self.rg(&[logits]);
        self.push("cross_entropy", value, rg, Op::CrossEntropy { logits, labels: labels.to_vec(), probs })
    }

    /// Concatenate along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(shape_error("concat", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        self.push("concat", value, rg, Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start + len` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if len == 0 || start + len > tx.rows() {
            return Err(Error::contract(
                "slice_rows",
                format!("rows {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let w = tx.row_len();
        let mut shape = tx.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, tx.data()[start * w..(start + len) * w].to_vec())?;
        let rg = self.rg(&[x]);
        self.push("slice_rows", value, rg, Op::SliceRows { x, start })
    }

    /// Per-row convex mix `out_i = sum_k weights[i, k] * parts[k]_i`.
    pub fn mix(&mut self, weights: Var, parts: &[Var]) -> Result<Var> {
        let tw = self.value(weights);
        if tw.rank() != 2 || tw.shape()[1] != parts.len() || parts.is_empty() {
            return Err(Error::contract(
                "mix",
                format!("weights {:?} for {} parts", tw.shape(), parts.len()),
            ));
        }
        let n = tw.shape()[0];
        let shape = self.value(parts[0]).shape().to_vec();
        if shape.len() != 2 || shape[0] != n {
            return Err(shape_error("mix", tw.shape(), &shape));
        }
        let d = shape[1];
        let mut out = vec![S::zero(); n * d];
        for (k, &p) in parts.iter().enumerate() {
            let tp = self.value(p);
            if tp.shape() != shape.as_slice() {
                return Err(shape_error("mix", &shape, tp.shape()));
            }
            for i in 0..n {
                let wk = tw.data()[i * parts.len() + k];
                for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(tp.row(i)) {
                    *o += wk * v;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let mut inputs = parts.to_vec();
        inputs.push(weights);
        let rg = self.rg(&inputs);
        self.push("mix", value, rg, Op::Mix { weights, parts: parts.to_vec() })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let tl = self.value(loss);
        if tl.numel() != 1 {
            return Err(Error::contract("backward", format!("loss of shape {:?} is not scalar", tl.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(tl.shape(), S::one()));
        for entry in self.tape.iter().rev() {
            let Some(g) = grads[entry.out.0].take() else { continue };
            self.backward_entry(entry, &g, &mut grads)?;
            grads[entry.out.0] = Some(g);
        }
        // Only leaves are interesting to callers, but intermediate gradients
        // stay available for inspection.
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], var: Var, g: Tensor<S>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_entry(&self, entry: &Entry<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let out = self.value(entry.out);
        match &entry.op {
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, map(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, zip_map(g, tb, |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, zip_map(g, ta, |x, y| x * y));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, map(g, |v| v * c));
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(g.data(), m, n, Layout::Normal, tb.data(), k, n, Layout::Transposed, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(ta.data(), m, k, Layout::Transposed, g.data(), m, n, Layout::Normal, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); n * din];
                    gemm(g.data(), n, dout, Layout::Normal, tw.data(), dout, din, Layout::Normal, &mut dx, false);
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx)?);
                }
                if self.requires_grad(*w) {
                    let mut dw = vec![S::zero(); dout * din];
                    gemm(g.data(), n, dout, Layout::Transposed, tx.data(), n, din, Layout::Normal, &mut dw, false);
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![S::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![dout], db)?);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let dims = ConvDims::new(tx.shape(), tw.shape(), *geom).expect("validated in forward");
                let n = tx.shape()[0];
                let ohw = dims.oh * dims.ow;
                let in_len = dims.cin * dims.h * dims.w;
                let patch = dims.patch();
                let (need_x, need_w, need_b) =
                    (self.requires_grad(*x), self.requires_grad(*w), self.requires_grad(*b));
                let mut dx = if need_x { vec![S::zero(); tx.numel()] } else { Vec::new() };
                let mut dw = vec![S::zero(); if need_w { tw.numel() } else { 0 }];
                let mut db = vec![S::zero(); dims.cout];
                let mut cols = vec![S::zero(); patch * ohw];
                let mut dcols = vec![S::zero(); if need_x { patch * ohw } else { 0 }];
                for i in 0..n {
                    let gi = &g.data()[i * dims.cout * ohw..(i + 1) * dims.cout * ohw];
                    if need_w {
                        dims.im2col(&tx.data()[i * in_len..(i + 1) * in_len], &mut cols);
                        gemm(gi, dims.cout, ohw, Layout::Normal, &cols, patch, ohw, Layout::Transposed, &mut dw, true);
                    }
                    if need_b {
                        for (c, row) in gi.chunks(ohw).enumerate() {
                            db[c] += row.iter().copied().sum::<S>();
                        }
                    }
                    if need_x {
                        gemm(tw.data(), dims.cout, patch, Layout::Transposed, gi, dims.cout, ohw, Layout::Normal, &mut dcols, false);
                        dims.col2im(&dcols, &mut dx[i * in_len..(i + 1) * in_len]);
                    }
                }
                if need_x {
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
                }
                if need_w {
                    self.accumulate(grads, *w, Tensor::new(tw.shape().to_vec(), dw)?);
                }
                if need_b {
                    self.accumulate(grads, *b, Tensor::new(vec![dims.cout], db)?);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let tx = self.value(*x);
                let mut dx = vec![S::zero(); tx.numel()];
                for (&src, &v) in argmax.iter().zip(g.data()) {
                    dx[src] += v;
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::Relu(x) => {
                self.accumulate(grads, *x, zip_map(g, out, |gv, o| if o > S::zero() { gv } else { S::zero() }));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::Softmax(x) => {
                let cols = out.shape()[1];
                let mut dx = Vec::with_capacity(out.numel());
                for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: S = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                    dx.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::Log(x) => {
                self.accumulate(grads, *x, zip_map(g, self.value(*x), |gv, v| gv / v));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let v = g.data()[0] / S::from_f64(tx.numel() as f64);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), v));
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, Tensor::full(tx.shape(), g.data()[0]));
            }
            Op::RowL2Dist(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let d = ta.shape()[1];
                let mut da = Vec::with_capacity(ta.numel());
                for (i, (ra, rb)) in ta.data().chunks(d).zip(tb.data().chunks(d)).enumerate() {
                    let norm = out.data()[i];
                    // Subgradient 0 where the two rows coincide.
                    let s = if norm > S::zero() { g.data()[i] / norm } else { S::zero() };
                    da.extend(ra.iter().zip(rb).map(|(&x, &y)| s * (x - y)));
                }
                let da = Tensor::new(ta.shape().to_vec(), da)?;
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, map(&da, |v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let tl = self.value(*logits);
                let classes = tl.shape()[1];
                let mut dl = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let gi = g.data()[i];
                    let row = &mut dl[i * classes..(i + 1) * classes];
                    row[y] = row[y] - S::one();
                    row.iter_mut().for_each(|v| *v = *v * gi);
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), dl)?);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let len = tp.numel();
                    if self.requires_grad(p) {
                        let slice = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), slice)?);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = self.value(*x);
                let mut dx = vec![S::zero(); tx.numel()];
                let off = start * tx.row_len();
                dx[off..off + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), dx)?);
            }
            Op::Mix { weights, parts } => {
                let tw = self.value(*weights);
                let k_count = parts.len();
                let n = tw.shape()[0];
                let d = out.shape()[1];
                let mut dw = vec![S::zero(); n * k_count];
                for (k, &p) in parts.iter().enumerate() {
                    let tp = self.value(p);
                    let mut dp = Vec::with_capacity(n * d);
                    for i in 0..n {
                        let gi = g.row(i);
                        let wk = tw.data()[i * k_count + k];
                        dw[i * k_count + k] = gi.iter().zip(tp.row(i)).map(|(&a, &b)| a * b).sum();
                        dp.extend(gi.iter().map(|&v| v * wk));
                    }
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), dp)?);
                    }
                }
                self.accumulate(grads, *weights, Tensor::new(tw.shape().to_vec(), dw)?);
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_row<S: Scalar>(row: &[S], out: &mut Vec<S>) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let start = out.len();
    let mut total = S::zero();
    for &v in row {
        let e = (v - max).exp();
        total += e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v = *v / total;
    }
}

fn map<S: Scalar>(t: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvDims {
    fn new(x: &[usize], w: &[usize], geom: Conv2dGeometry) -> Option<Self> {
        let (cin, h, wd) = (x[1], x[2], x[3]);
        let (cout, kh, kw) = (w[0], w[2], w[3]);
        let (ph, pw) = (h + 2 * geom.padding, wd + 2 * geom.padding);
        if ph < kh || pw < kw {
            return None;
        }
        Some(ConvDims {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh: (ph - kh) / geom.stride + 1,
            ow: (pw - kw) / geom.stride + 1,
            stride: geom.stride,
            pad: geom.padding,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Source column for output column `ox` at kernel offset `kx`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    fn im2col<S: Scalar>(&self, img: &[S], cols: &mut [S]) {
        let ohw = self.oh * self.ow;
        for c in 0..self.cin {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let seg = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match self.src(oy, ky, self.h) {
                            None => seg.iter_mut().for_each(|v| *v = S::zero()),
                            Some(iy) => {
                                let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, v) in seg.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.w) {
                                        Some(ix) => src_row[ix],
                                        None => S::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, cols: &[S], img: &mut [S]) {
        let ohw = self.oh * self.ow;
        for c in 0..self.cin {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * ohw..(row + 1) * ohw];
                    for oy in 0..self.oh {
                        let Some(iy) = self.src(oy, ky, self.h) else { continue };
                        for ox in 0..self.ow {
                            if let Some(ix) = self.src(ox, kx, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
