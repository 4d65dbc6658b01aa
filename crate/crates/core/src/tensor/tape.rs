use super::{check_shape, matmul_dims, matmul_into, split_axis, transpose_data, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Sigmoid(Var),
    Softmax { x: Var, axis: usize },
    Ln { x: Var, floor: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Select { x: Var, axis: usize, index: usize },
    Transpose(Var),
    ReduceSum { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[cfg(test)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Fault {
    /// Drops the `(1 - y)` factor from the sigmoid derivative.
    SigmoidRule,
}

/// Records operations in execution order so the chain rule can be replayed.
///
/// Nodes are appended as ops run, which keeps them topologically ordered:
/// every input precedes its consumers. [`Tape::backward`] visits each node
/// reachable from the loss exactly once, in reverse.
///
/// Gradients on leaves *accumulate* across calls to `backward`; call
/// [`Tape::zero_grad`] between steps when that is not wanted. The graph is
/// kept after `backward`, so the same loss may be differentiated again.
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    #[cfg(test)]
    pub(crate) fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Sums after sorting ascending; the result depends only on the multiset.
fn sorted_sum<T: Scalar>(terms: &mut [T]) -> T {
    terms.sort_unstable_by(|a, b| a.as_f64().total_cmp(&b.as_f64()));
    terms.iter().fold(T::zero(), |acc, &t| acc + t)
}

impl<T: Scalar> Tape<T> {
    /// New tape with NaN/Inf checks enabled.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
            #[cfg(test)]
            fault: None,
        }
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn finite_checks(&self) -> bool {
        self.check_finite
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input: gradients are accumulated for it by `backward`.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<T>> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad matches value"))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_axis(&self, op: &'static str, v: Var, axis: usize) -> Result<()> {
        let rank = self.shape(v).len();
        if axis >= rank {
            return Err(Error::dim(op, format!("axis {axis} out of range for shape {:?}", self.shape(v))));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg, "matmul")
    }

    /// Matrix product whose inner sums add terms in ascending order, so
    /// permuting the contracted axis leaves every output bit-identical.
    pub fn matmul_sorted(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut terms = Vec::with_capacity(k);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                terms.clear();
                terms.extend((0..k).map(|p| da[i * k + p] * db[p * n + j]));
                out[i * n + j] = sorted_sum(&mut terms);
            }
        }
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::Matmul(a, b), rg, "matmul")
    }

    fn zip_same(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shapes(op_name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add(a, b), rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub(a, b), rg, "sub")
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul(a, b), rg, "mul")
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.value(x).map(|v| s * v + b);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Affine { x, scale }, rg, "affine")
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| {
            // Branch on sign so exp never overflows.
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sigmoid(x), rg, "sigmoid")
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![T::zero(); src.len()];
        let data = src.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// Softmax along `axis` with the normaliser summed in ascending order, so
    /// permuting the axis permutes the output bit for bit.
    pub fn softmax_sorted(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![T::zero(); src.len()];
        let data = src.data();
        let mut terms = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(T::neg_infinity(), T::max);
                terms.clear();
                terms.extend((0..len).map(|j| (data[at(j)] - max).exp()));
                for (j, &e) in terms.iter().enumerate() {
                    out[at(j)] = e;
                }
                let total = sorted_sum(&mut terms);
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let out = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Softmax { x, axis }, rg, "softmax")
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Result<Var> {
        let f = T::from_f64(floor);
        let out = self.value(x).map(|v| v.max(f).ln());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Ln { x, floor }, rg, "ln")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shapes("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// The `len` entries starting at `start` along `axis`; rank is kept.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let src = self.value(x);
        if len == 0 || start + len > src.shape()[axis] {
            return Err(Error::dim(
                "narrow",
                format!("range {start}..{} out of bounds for {:?} axis {axis}", start + len, src.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(src.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src.data()[base..base + len * inner]);
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = len;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg, "narrow")
    }

    /// Selects `index` along `axis`, dropping that axis (a rank-1 input yields shape `[1]`).
    pub fn slice(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        self.check_axis("slice", x, axis)?;
        let src = self.value(x);
        if index >= src.shape()[axis] {
            return Err(Error::dim(
                "slice",
                format!("index {index} out of bounds for {:?} axis {axis}", src.shape()),
            ));
        }
        let (outer, full, inner) = split_axis(src.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * full * inner + index * inner;
            out.extend_from_slice(&src.data()[base..base + inner]);
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::Select { x, axis, index }, rg, "slice")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Transpose(x), rg, "transpose")
    }

    /// Sums out `axis` (a rank-1 input yields shape `[1]`).
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("reduce_sum", x, axis)?;
        let src = self.value(x);
        let (outer, len, inner) = split_axis(src.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = o * len * inner + j * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src.data()[base + i];
                }
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.any_grad(&[x]);
        self.push(Tensor::new(shape, out)?, Op::ReduceSum { x, axis }, rg, "reduce_sum")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg, "sum_all")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape)?;
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Reshape(x), rg, "reshape")
    }

    /// Propagates d(loss)/d(node) back to every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut adj, &mut leaf_grads, i);
        }

        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        if self.check_finite
            && self
                .nodes
                .iter()
                .filter_map(|n| n.grad.as_ref())
                .any(|g| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite("backward"));
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Vec<T>,
        adj: &mut [Option<Vec<T>>],
        leaf_grads: &mut Vec<(usize, Vec<T>)>,
        index: usize,
    ) {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf => leaf_grads.push((index, g)),
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.nodes[a.0].requires_grad {
                    // g · bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // aᵀ · g
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            let gb_row = &mut gb[p * n..(p + 1) * n];
                            for (o, &gv) in gb_row.iter_mut().zip(g_row) {
                                *o = *o + av * gv;
                            }
                        }
                    }
                    send(*b, gb);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.iter().map(|&v| -v).collect());
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(tb).map(|(&gv, &bv)| gv * bv).collect());
                send(*b, g.iter().zip(ta).map(|(&gv, &av)| gv * av).collect());
            }
            Op::Affine { x, scale } => {
                let s = T::from_f64(*scale);
                send(*x, g.into_iter().map(|v| v * s).collect());
            }
            Op::Sigmoid(x) => {
                #[cfg(test)]
                let faulty = self.fault == Some(Fault::SigmoidRule);
                #[cfg(not(test))]
                let faulty = false;
                let gx = g
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| if faulty { gv * yv } else { gv * yv * (T::one() - yv) })
                    .collect();
                send(*x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Ln { x, floor } => {
                let f = T::from_f64(*floor);
                let src = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(src)
                    .map(|(&gv, &xv)| if xv > f { gv / xv } else { T::zero() })
                    .collect();
                send(*x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut start = 0;
                for &v in inputs {
                    let part = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * part * inner);
                    for o in 0..outer {
                        let base = o * total * inner + start * inner;
                        gv.extend_from_slice(&g[base..base + part * inner]);
                    }
                    send(v, gv);
                    start += part;
                }
            }
            Op::Narrow { x, axis, start } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, gx);
            }
            Op::Select { x, axis, index } => {
                let src_shape = self.shape(*x);
                let (outer, full, inner) = split_axis(src_shape, *axis);
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    let dst = o * full * inner + index * inner;
                    gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
                send(*x, gx);
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                send(*x, transpose_data(&g, s[0], s[1]));
            }
            Op::ReduceSum { x, axis } => {
                let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        let base = o * len * inner + j * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                send(*x, vec![g[0]; n]);
            }
            Op::Reshape(x) => send(*x, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn sorted_variants_match_plain_ops_and_commute_with_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (a, b) = (random(&[5, 7], &mut rng), random(&[7, 3], &mut rng));
        let perm = [3usize, 0, 6, 2, 5, 1, 4];
        // Permute the contracted axis of both operands.
        let a_p = Tensor::from_fn(&[5, 7], |i| a.data()[i / 7 * 7 + perm[i % 7]]).unwrap();
        let b_p = Tensor::from_fn(&[7, 3], |i| b.data()[perm[i / 3] * 3 + i % 3]).unwrap();
        let mut tape = Tape::<f64>::new();
        let (va, vb, vap, vbp) = (
            tape.leaf(a).unwrap(),
            tape.leaf(b).unwrap(),
            tape.constant(a_p).unwrap(),
            tape.constant(b_p).unwrap(),
        );
        let plain = tape.matmul(va, vb).unwrap();
        let sorted = tape.matmul_sorted(va, vb).unwrap();
        let sorted_p = tape.matmul_sorted(vap, vbp).unwrap();
        assert!(tape.value(plain).max_abs_diff(tape.value(sorted)).unwrap() < 1e-14);
        assert_eq!(tape.value(sorted), tape.value(sorted_p));

        let sm = tape.softmax(va, 1).unwrap();
        let sm_sorted = tape.softmax_sorted(va, 1).unwrap();
        let sm_p = tape.softmax_sorted(vap, 1).unwrap();
        assert!(tape.value(sm).max_abs_diff(tape.value(sm_sorted)).unwrap() < 1e-15);
        for r in 0..5 {
            for (j, &pj) in perm.iter().enumerate() {
                assert_eq!(tape.value(sm_p).data()[r * 7 + j], tape.value(sm_sorted).data()[r * 7 + pj]);
            }
        }
    }

    #[test]
    fn sorted_variants_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        let err = grad_check(
            |tape, v| {
                let m = tape.matmul_sorted(v[0], v[1])?;
                let s = tape.softmax_sorted(m, 0)?;
                let sq = tape.mul(s, m)?;
                tape.sum_all(sq)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(Tensor::eye(2).unwrap()).unwrap();
        let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t64(&[1, 2], &[1.0, 2.0])).unwrap();
        let c = tape.constant(t64(&[2, 1], &[3.0, 4.0])).unwrap();
        let out = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(out).shape(), &[1, 1]);
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        let err = grad_check(
            |tape, vars| {
                let p = tape.matmul(vars[0], vars[1])?;
                tape.sum_all(p)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap()).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[4], &[0.0; 4])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.25; 4]);

        let x = tape.constant(t64(&[2], &[0.0, 3f64.ln()])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let x = tape.constant(t64(&[2], &[1000.0, 1000.0])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[2, 2], &[0.0, 1.0, 0.0, 1.0])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn sigmoid_symmetry_saturation_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[2], &[0.0, -800.0])).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let v = tape.value(s).data();
        assert_eq!(v[0], 0.5);
        assert!(v[1] >= 0.0 && v[1] <= 1e-6 && v[1].is_finite());

        let err = grad_check(
            |tape, vars| {
                let s = tape.sigmoid(vars[0])?;
                tape.sum_all(s)
            },
            &[t64(&[1], &[0.0])],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-8);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[0.0])).unwrap();
        let s = tape.sigmoid(x).unwrap();
        let l = tape.sum_all(s).unwrap();
        tape.backward(l).unwrap();
        assert!((tape.grad(x).unwrap()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t64(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t64(&[1, 2], &[3.0, 4.0])).unwrap();
        let c = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.shape(c), &[2, 2]);
        let back = tape.slice(c, 0, 1).unwrap();
        assert_eq!(tape.value(back).data(), &[3.0, 4.0]);
        let n = tape.narrow(c, 0, 0, 1).unwrap();
        assert_eq!(tape.value(n), tape.value(a));
        let cols = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(cols).data(), &[1.0, 2.0, 3.0, 4.0]);
        let col = tape.narrow(cols, 1, 2, 2).unwrap();
        assert_eq!(tape.value(col), tape.value(b));
    }

    #[test]
    fn add_passes_gradient_unchanged() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = tape.leaf(t64(&[3], &[4.0, 5.0, 6.0])).unwrap();
        let s = tape.add(a, b).unwrap();
        let w = tape.constant(t64(&[3], &[1.0, -2.0, 0.5])).unwrap();
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum_all(p).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, -2.0, 0.5]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn square_sum_gradient_and_accumulation() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0])).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let l = tape.sum_all(sq).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[2.0, 4.0]);
        // Repeated backward accumulates.
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap(), &[4.0, 8.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t64(&[2], &[1.0, 2.0])).unwrap();
        let s = tape.sigmoid(w).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn sigmoid_of_matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![random(&[2, 3], &mut rng), random(&[3, 4], &mut rng)];
        let err = grad_check(
            |tape, v| {
                let m = tape.matmul(v[0], v[1])?;
                let s = tape.sigmoid(m)?;
                tape.sum_all(s)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn every_op_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            random(&[3, 4], &mut rng),
            random(&[3, 4], &mut rng),
            random(&[4, 3], &mut rng),
        ];
        let weights = random(&[4, 3], &mut rng);
        let err = grad_check(
            |tape, v| {
                let w = tape.constant(weights.clone())?;
                let a = tape.add(v[0], v[1])?;
                let b = tape.sub(a, v[1])?;
                let c = tape.mul(b, v[0])?;
                let t = tape.transpose(v[2])?;
                let d = tape.mul(c, t)?;
                let e = tape.softmax(d, 1)?;
                let f = tape.softmax(e, 0)?;
                let g = tape.matmul(f, v[2])?;
                let h = tape.sigmoid(g)?;
                let cat = tape.concat(&[h, v[0]], 1)?;
                let nar = tape.narrow(cat, 1, 1, 4)?;
                let sl = tape.slice(nar, 0, 2)?;
                let r = tape.reshape(sl, &[2, 2])?;
                let rs = tape.reduce_sum(r, 0)?;
                let ln = tape.ln_clamped(rs, 1e-12)?;
                let lin = tape.affine(ln, -0.7, 0.3)?;
                let rs2 = tape.reduce_sum(d, 1)?;
                let m2 = tape.matmul(w, e)?;
                let s2 = tape.sum_all(m2)?;
                let s1 = tape.sum_all(lin)?;
                let s3 = tape.sum_all(rs2)?;
                let x = tape.add(s1, s2)?;
                tape.add(x, s3)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t64(&[1], &[3.0])).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.scale(x, 5.0).unwrap();
        let s = tape.add(a, b).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn finite_checks_toggle() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.constant(t64(&[1], &[f64::NAN])),
            Err(Error::NonFinite(_))
        ));
        let mut tape = Tape::<f64>::new().with_finite_checks(false);
        let x = tape.constant(t64(&[1], &[f64::INFINITY])).unwrap();
        assert!(tape.value(x).data()[0].is_infinite());
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t64(&[1], &[1e300])).unwrap();
        let y = tape.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn corrupted_rule_is_caught_by_grad_check() {
        let params = vec![t64(&[3], &[0.3, -1.2, 2.0])];
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            tape.fault = Some(Fault::SigmoidRule);
            let s = tape.sigmoid(v[0])?;
            tape.sum_all(s)
        };
        let err = grad_check(f, &params, 1e-6).unwrap();
        assert!(err > 1e-2, "fault went unnoticed: {err}");
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6,
            cols in 1usize..9,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.gen_range(-50.0..50.0)).unwrap();
            let mut tape = Tape::new();
            let v = tape.constant(x).unwrap();
            let s = tape.softmax(v, 1).unwrap();
            let out = tape.value(s);
            for r in 0..rows {
                let row = out.row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn mismatched_shapes_are_rejected(
            a in (1usize..5, 1usize..5),
            b in (1usize..5, 1usize..5),
        ) {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(Tensor::zeros(&[a.0, a.1]).unwrap()).unwrap();
            let y = tape.constant(Tensor::zeros(&[b.0, b.1]).unwrap()).unwrap();
            prop_assert_eq!(tape.matmul(x, y).is_ok(), a.1 == b.0);
            prop_assert_eq!(tape.add(x, y).is_ok(), a == b);
            prop_assert_eq!(tape.mul(x, y).is_ok(), a == b);
            prop_assert_eq!(tape.concat(&[x, y], 0).is_ok(), a.1 == b.1);
            prop_assert_eq!(tape.concat(&[x, y], 1).is_ok(), a.0 == b.0);
            prop_assert!(tape.slice(x, 0, a.0).is_err());
            prop_assert!(tape.slice(x, 2, 0).is_err());
            prop_assert!(tape.narrow(x, 1, 0, a.1 + 1).is_err());
        }

        #[test]
        fn identical_inputs_give_identical_outputs(seed in any::<u64>()) {
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut tape = Tape::<f32>::new();
                let a = tape.leaf(Tensor::from_fn(&[3, 5], |_| rng.gen_range(-1.0..1.0)).unwrap()).unwrap();
                let b = tape.leaf(Tensor::from_fn(&[5, 2], |_| rng.gen_range(-1.0..1.0)).unwrap()).unwrap();
                let m = tape.matmul(a, b).unwrap();
                let s = tape.softmax(m, 1).unwrap();
                let l = tape.sum_all(s).unwrap();
                tape.backward(l).unwrap();
                (tape.value(s).clone(), tape.grad(a).unwrap().to_vec())
            };
            prop_assert_eq!(run(), run());
        }
    }
}
