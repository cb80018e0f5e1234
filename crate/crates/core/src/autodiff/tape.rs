use std::collections::HashMap;

use super::tensor::{matmul_grad_lhs, matmul_grad_rhs, matmul_kernel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles are only meaningful for the tape that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a user-supplied operation.
///
/// Receives the output gradient and the input values, returns one gradient
/// per input (same shapes as the inputs).
pub type CustomBackward = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Reduce { input: Var, op: Reduction, axis: Option<usize>, argmax: Vec<usize> },
    AddBias(Var, Var),
    Reshape(Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    NormalizeRows(Var, Vec<f64>),
    Custom(Vec<Var>, CustomBackward),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a define-by-run computation.
///
/// Every operation appends one node; node ids are therefore a topological
/// order and [`Tape::backward`] walks them in strict reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every gradient-requiring leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_node.get(&var.0)
    }

    /// Removes and returns a gradient, or zeros of `shape` if absent.
    pub fn take_or_zeros(&mut self, var: Var, shape: &[usize]) -> Tensor {
        self.by_node.remove(&var.0).unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_node.keys().copied()
    }
}

fn describe(a: &[usize], b: &[usize]) -> String {
    format!("{a:?} vs {b:?}")
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies a value into a fresh constant; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", describe(sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product: slice `i` of the result is `a[i] · b[i]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", describe(sa, sb)));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            matmul_kernel(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![batch, m, n], out)?, Op::Bmm(a, b), rg))
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Elementwise::Add => x + y,
            Elementwise::Sub => x - y,
            _ => x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.numel() == 1 {
            let y = tb.data()[0];
            ta.map(|x| f(x, y))
        } else if ta.numel() == 1 {
            let x = ta.data()[0];
            tb.map(|y| f(x, y))
        } else {
            return Err(Error::dim("elementwise", describe(ta.shape(), tb.shape())));
        };
        let op = match kind {
            Elementwise::Add => Op::Add(a, b),
            Elementwise::Sub => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, kind: Elementwise, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (value, op) = match kind {
            Elementwise::Relu => (ta.map(|x| x.max(0.0)), Op::Relu(a)),
            Elementwise::Exp => (ta.map(f64::exp), Op::Exp(a)),
            Elementwise::Square => (ta.map(|x| x * x), Op::Square(a)),
            Elementwise::Log => {
                if let Some(bad) = ta.data().iter().find(|&&x| x.is_nan() || x <= 0.0) {
                    return Err(Error::domain("log", format!("non-positive input {bad}")));
                }
                (ta.map(f64::ln), Op::Log(a))
            }
            _ => unreachable!("binary op routed to unary"),
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, op, rg))
    }

    /// Applies an elementwise operation. Binary ops take two operands of equal
    /// shape, or one operand with a single element which is broadcast.
    pub fn elementwise(&mut self, op: Elementwise, operands: &[Var]) -> Result<Var> {
        match (op, operands) {
            (Elementwise::Add | Elementwise::Sub | Elementwise::Mul, &[a, b]) => self.binary(op, a, b),
            (Elementwise::Relu | Elementwise::Exp | Elementwise::Log | Elementwise::Square, &[a]) => self.unary(op, a),
            _ => Err(Error::Contract(format!("{op:?} called with {} operands", operands.len()))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, a, b)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Elementwise::Square, a)
    }

    /// Multiplies by a compile-time constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    /// Reduces over one axis (dropping it) or over everything when `axis` is `None`.
    ///
    /// `Max` sends the gradient to the first maximal element along the axis.
    pub fn reduce(&mut self, op: Reduction, t: Var, axis: Option<usize>) -> Result<Var> {
        let tv = self.value(t);
        let shape = tv.shape().to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, tv.numel(), 1, Vec::new()),
            Some(ax) => {
                if ax >= shape.len() {
                    return Err(Error::dim("reduce", format!("axis {ax} out of range for shape {shape:?}")));
                }
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (outer, shape[ax], inner, out_shape)
            }
        };
        if len == 0 {
            return Err(Error::domain("reduce", format!("empty reduction over shape {shape:?}")));
        }
        let data = tv.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if op == Reduction::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| data[(o * len + j) * inner + i];
                let slot = o * inner + i;
                out[slot] = match op {
                    Reduction::Sum => (0..len).map(at).sum(),
                    Reduction::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduction::Max => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let rg = self.any_grad(&[t]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { input: t, op, axis, argmax }, rg))
    }

    pub fn sum(&mut self, t: Var) -> Result<Var> {
        self.reduce(Reduction::Sum, t, None)
    }

    pub fn mean(&mut self, t: Var) -> Result<Var> {
        self.reduce(Reduction::Mean, t, None)
    }

    /// Adds a bias vector `[O]` to every row of `x[..., O]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Error::dim("add_bias", describe(sx, sb)));
        }
        let o = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(o) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn reshape(&mut self, t: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(t).clone().reshape(shape)?;
        let rg = self.any_grad(&[t]);
        Ok(self.push(value, Op::Reshape(t), rg))
    }

    pub fn transpose(&mut self, t: Var) -> Result<Var> {
        let tv = self.value(t);
        if tv.rank() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {:?}", tv.shape())));
        }
        let (r, c) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = tv.data()[i * c + j];
            }
        }
        let rg = self.any_grad(&[t]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(t), rg))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_cols of nothing".into()));
        };
        let rows = self.shape(first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat_cols", describe(self.shape(first), s)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row-wise log-softmax of `x[B, C]`, stabilised by the row maximum.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[1] == 0 {
            return Err(Error::dim("log_softmax", format!("expected [B, C>0], got {:?}", xv.shape())));
        }
        let c = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Selects `x[i, idx[i]]` for every row, producing a vector.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != idx.len() {
            return Err(Error::dim("pick", format!("{:?} with {} indices", xv.shape(), idx.len())));
        }
        let c = xv.shape()[1];
        if let Some(bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::domain("pick", format!("index {bad} out of range 0..{c}")));
        }
        let out: Vec<f64> = idx.iter().enumerate().map(|(r, &j)| xv.data()[r * c + j]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(out), Op::Pick(x, idx.to_vec()), rg))
    }

    /// Scales each row of `x[B, F]` to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("normalize_rows", format!("expected a matrix, got {:?}", xv.shape())));
        }
        let f = xv.shape()[1];
        let mut norms = Vec::with_capacity(xv.shape()[0]);
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(f.max(1)).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_nan() || norm <= 0.0 {
                return Err(Error::domain("normalize_rows", format!("row {r} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NormalizeRows(x, norms), rg))
    }

    /// Records an operation whose forward value was computed by the caller
    /// and whose backward rule is `backward`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Var {
        let rg = self.any_grad(inputs);
        self.push(value, Op::Custom(inputs.to_vec(), backward), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The result holds a gradient for every leaf created with
    /// `requires_grad = true`; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // Keep the buffer in case the caller asks for an intermediate.
            grads[id] = Some(g);
        }

        let mut by_node = HashMap::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads.get_mut(id).and_then(Option::take);
                let g = match g {
                    Some(data) => Tensor::new(node.value.shape().to_vec(), data)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                by_node.insert(id, g);
            }
        }
        Ok(Gradients { by_node })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &mut |s| matmul_grad_lhs(g, val(*b), m, k, n, s));
                acc(*b, &mut |s| matmul_grad_rhs(val(*a), g, m, k, n, s));
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                acc(*a, &mut |s| {
                    for i in 0..batch {
                        matmul_grad_lhs(
                            &g[i * m * n..(i + 1) * m * n],
                            &val(*b)[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                            &mut s[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..batch {
                        matmul_grad_rhs(
                            &val(*a)[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut s[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, sgn) in [(*a, 1.0), (*b, sign)] {
                    acc(v, &mut |s| {
                        if s.len() == g.len() {
                            for (x, gv) in s.iter_mut().zip(g) {
                                *x += sgn * gv;
                            }
                        } else {
                            s[0] += sgn * g.iter().sum::<f64>();
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    let ov = val(other);
                    acc(v, &mut |s| {
                        let other_at = |i: usize| if ov.len() == 1 { ov[0] } else { ov[i] };
                        if s.len() == g.len() {
                            for (i, x) in s.iter_mut().enumerate() {
                                *x += g[i] * other_at(i);
                            }
                        } else {
                            s[0] += g.iter().enumerate().map(|(i, gv)| gv * other_at(i)).sum::<f64>();
                        }
                    });
                }
            }
            Op::Scale(a, f) => acc(*a, &mut |s| {
                for (x, gv) in s.iter_mut().zip(g) {
                    *x += f * gv;
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(a) => {
                let out = node.value.data();
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i];
                    }
                })
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / av[i];
                    }
                })
            }
            Op::Square(a) => {
                let av = val(*a);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * av[i] * g[i];
                    }
                })
            }
            Op::Reduce { input, op, axis, argmax } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = match axis {
                    None => (1, shape.iter().product(), 1),
                    Some(ax) => (shape[..*ax].iter().product(), shape[*ax], shape[ax + 1..].iter().product()),
                };
                acc(*input, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            match op {
                                Reduction::Sum | Reduction::Mean => {
                                    let gv = if *op == Reduction::Mean { g[slot] / len as f64 } else { g[slot] };
                                    for j in 0..len {
                                        s[(o * len + j) * inner + i] += gv;
                                    }
                                }
                                Reduction::Max => {
                                    s[(o * len + argmax[slot]) * inner + i] += g[slot];
                                }
                            }
                        }
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let o = self.shape(*bias)[0];
                acc(*x, &mut |s| {
                    for (x, gv) in s.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                acc(*bias, &mut |s| {
                    for row in g.chunks(o) {
                        for (x, gv) in s.iter_mut().zip(row) {
                            *x += gv;
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| {
                for (x, gv) in s.iter_mut().zip(g) {
                    *x += gv;
                }
            }),
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..w {
                                s[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::LogSoftmax(x) => {
                let c = self.shape(*x)[1];
                let out = node.value.data();
                acc(*x, &mut |s| {
                    for (r, (srow, grow)) in s.chunks_mut(c).zip(g.chunks(c)).enumerate() {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..c {
                            srow[j] += grow[j] - out[r * c + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::Pick(x, idx) => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |s| {
                    for (r, &j) in idx.iter().enumerate() {
                        s[r * c + j] += g[r];
                    }
                });
            }
            Op::NormalizeRows(x, norms) => {
                let f = self.shape(*x)[1];
                let y = node.value.data();
                acc(*x, &mut |s| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = &y[r * f..(r + 1) * f];
                        let gr = &g[r * f..(r + 1) * f];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..f {
                            s[r * f + j] += (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                });
            }
            Op::Custom(inputs, backward) => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec()).expect("gradient matches node shape");
                let in_vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = backward(&gt, &in_vals);
                for (v, contrib) in inputs.iter().zip(contribs) {
                    acc(*v, &mut |s| {
                        for (x, cv) in s.iter_mut().zip(contrib.data()) {
                            *x += cv;
                        }
                    });
                }
            }
        }
    }
}
