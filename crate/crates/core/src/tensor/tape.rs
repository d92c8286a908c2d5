use std::cell::RefCell;
use std::fmt;

use super::array::{broadcast_map, broadcast_shape};
use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{Array, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Relu,
    Softplus,
    Log,
    Exp,
    Square,
    Sqrt,
    Abs,
}

/// Operation record kept on the tape for the backward pass. Inputs are node
/// ids; input and output values stay on their nodes, so only non-tensor
/// attributes are stored here.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(usize, Unary),
    Softmax(usize, usize),
    Sum { input: usize, axis: usize },
    SumAll(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Permute { input: usize, perm: Vec<usize> },
    Reshape(usize),
    Gather { input: usize, rows: Vec<usize> },
    Pick { input: usize, cols: Vec<usize> },
    MaskedFill { input: usize, mask: Vec<bool> },
}

struct Node {
    value: Array,
    requires_grad: bool,
    op: Op,
    grad: Option<Vec<f64>>,
}

/// Arena recording one differentiable computation.
///
/// A tape is confined to a single thread. Independent tapes may be built in
/// parallel over a shared read-only parameter store.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf tensor; gradients accumulate on it when `requires_grad`.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Tensor<'_> {
        let id = self.push(value, Op::Leaf, requires_grad);
        Tensor { tape: self, id }
    }

    pub fn constant(&self, value: Array) -> Tensor<'_> {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array, op: Op, requires_grad: bool) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        // constants carry no lineage
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        nodes.len() - 1
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes[loss].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss].value.shape().to_vec()));
        }
        if !nodes[loss].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss + 1];
        grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            backward_op(&nodes, id, &g, &mut grads);
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut nodes[id];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => node.grad = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Reduce a gradient of `out_shape` down to a broadcast input of `in_shape`.
fn reduce_to(g: &[f64], in_shape: &[usize], out_shape: &[usize], dst: &mut [f64]) {
    if in_shape == out_shape {
        dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        return;
    }
    let map = broadcast_map(in_shape, out_shape);
    for (i, &m) in map.iter().enumerate() {
        dst[m] += g[i];
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

struct MatDims {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        shapes: vec![a.to_vec(), b.to_vec()],
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let na: usize = ab.iter().product();
    let nb: usize = bb.iter().product();
    let mut out_shape = if na == 1 && nb == 1 {
        if ab.len() >= bb.len() { ab.to_vec() } else { bb.to_vec() }
    } else if nb == 1 {
        ab.to_vec()
    } else if na == 1 {
        bb.to_vec()
    } else if ab == bb {
        ab.to_vec()
    } else {
        return Err(err());
    };
    out_shape.extend([m, n]);
    Ok(MatDims {
        batch: na.max(nb),
        a_batched: na > 1,
        b_batched: nb > 1,
        m,
        k,
        n,
        out_shape,
    })
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if nd == 0 || n == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    let inner = out_shape[nd - 1];
    let step = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let mut off = 0usize;
    for _ in 0..n / inner {
        if step == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| data[off + j * step]));
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn backward_op(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let rg = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if rg(*a) {
                let sa = val(*a).shape().to_vec();
                accumulate(grads, *a, val(*a).len(), |d| reduce_to(g, &sa, out.shape(), d));
            }
            if rg(*b) {
                let sb = val(*b).shape().to_vec();
                let gb: Vec<f64> = g.iter().map(|v| sign * v).collect();
                accumulate(grads, *b, val(*b).len(), |d| reduce_to(&gb, &sb, out.shape(), d));
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let is_div = matches!(node.op, Op::Div(..));
            let (va, vb) = (val(*a), val(*b));
            let ma = broadcast_map(va.shape(), out.shape());
            let mb = broadcast_map(vb.shape(), out.shape());
            if rg(*a) {
                accumulate(grads, *a, va.len(), |d| {
                    for i in 0..g.len() {
                        let bv = vb.data()[mb[i]];
                        d[ma[i]] += if is_div { g[i] / bv } else { g[i] * bv };
                    }
                });
            }
            if rg(*b) {
                accumulate(grads, *b, vb.len(), |d| {
                    for i in 0..g.len() {
                        let av = va.data()[ma[i]];
                        let bv = vb.data()[mb[i]];
                        d[mb[i]] += if is_div { -g[i] * av / (bv * bv) } else { g[i] * av };
                    }
                });
            }
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let dims = matmul_dims(va.shape(), vb.shape()).expect("validated in forward");
            let MatDims { m, k, n, .. } = dims;
            if rg(*a) {
                accumulate(grads, *a, va.len(), |d| {
                    for bi in 0..dims.batch {
                        let ao = if dims.a_batched { bi * m * k } else { 0 };
                        let bo = if dims.b_batched { bi * k * n } else { 0 };
                        let go = bi * m * n;
                        gemm_nt(&g[go..go + m * n], &vb.data()[bo..bo + k * n], &mut d[ao..ao + m * k], m, n, k);
                    }
                });
            }
            if rg(*b) {
                accumulate(grads, *b, vb.len(), |d| {
                    for bi in 0..dims.batch {
                        let ao = if dims.a_batched { bi * m * k } else { 0 };
                        let bo = if dims.b_batched { bi * k * n } else { 0 };
                        let go = bi * m * n;
                        gemm_tn(&va.data()[ao..ao + m * k], &g[go..go + m * n], &mut d[bo..bo + k * n], k, m, n);
                    }
                });
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += c * v));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            accumulate(grads, *a, g.len(), |d| d.iter_mut().zip(g).for_each(|(x, v)| *x += v));
        }
        Op::Unary(a, kind) => {
            let x = val(*a).data();
            let y = out.data();
            accumulate(grads, *a, g.len(), |d| {
                for i in 0..g.len() {
                    let local = match kind {
                        Unary::Tanh => 1.0 - y[i] * y[i],
                        Unary::Sigmoid => y[i] * (1.0 - y[i]),
                        Unary::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Softplus => sigmoid(x[i]),
                        Unary::Log => 1.0 / x[i],
                        Unary::Exp => y[i],
                        Unary::Square => 2.0 * x[i],
                        Unary::Sqrt => 0.5 / y[i],
                        Unary::Abs => {
                            if x[i] > 0.0 {
                                1.0
                            } else if x[i] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                    };
                    d[i] += g[i] * local;
                }
            });
        }
        Op::Softmax(a, axis) => {
            let y = out.data();
            let (outer, len, inner) = axis_split(out.shape(), *axis);
            accumulate(grads, *a, g.len(), |d| {
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let mut dot = 0.0;
                        for t in 0..len {
                            let i = base + t * inner;
                            dot += g[i] * y[i];
                        }
                        for t in 0..len {
                            let i = base + t * inner;
                            d[i] += y[i] * (g[i] - dot);
                        }
                    }
                }
            });
        }
        Op::Sum { input, axis } => {
            let sh = val(*input).shape().to_vec();
            let (outer, len, inner) = axis_split(&sh, *axis);
            accumulate(grads, *input, val(*input).len(), |d| {
                for o in 0..outer {
                    for t in 0..len {
                        for j in 0..inner {
                            d[(o * len + t) * inner + j] += g[o * inner + j];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => {
            let g0 = g[0];
            accumulate(grads, *a, val(*a).len(), |d| d.iter_mut().for_each(|x| *x += g0));
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            for &inp in inputs {
                let len = val(inp).shape()[*axis];
                if rg(inp) {
                    accumulate(grads, inp, val(inp).len(), |d| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                d[dst + j] += g[src + j];
                            }
                        }
                    });
                }
                offset += len;
            }
        }
        Op::Slice { input, axis, start } => {
            let sh = val(*input).shape().to_vec();
            let (outer, total, inner) = axis_split(&sh, *axis);
            let len = out.shape()[*axis];
            accumulate(grads, *input, val(*input).len(), |d| {
                for o in 0..outer {
                    let dst = (o * total + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        d[dst + j] += g[src + j];
                    }
                }
            });
        }
        Op::Permute { input, perm } => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (back, _) = permute_data(g, out.shape(), &inv);
            accumulate(grads, *input, back.len(), |d| d.iter_mut().zip(&back).for_each(|(x, v)| *x += v));
        }
        Op::Gather { input, rows } => {
            let row_len: usize = val(*input).shape()[1..].iter().product();
            accumulate(grads, *input, val(*input).len(), |d| {
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..row_len {
                        d[r * row_len + j] += g[i * row_len + j];
                    }
                }
            });
        }
        Op::Pick { input, cols } => {
            let c = *val(*input).shape().last().unwrap();
            accumulate(grads, *input, val(*input).len(), |d| {
                for (i, &j) in cols.iter().enumerate() {
                    d[i * c + j] += g[i];
                }
            });
        }
        Op::MaskedFill { input, mask } => {
            accumulate(grads, *input, g.len(), |d| {
                for i in 0..g.len() {
                    if !mask[i] {
                        d[i] += g[i];
                    }
                }
            });
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    /// True when the tensor was produced by a recorded operation.
    pub fn has_lineage(&self) -> bool {
        !matches!(self.tape.nodes.borrow()[self.id].op, Op::Leaf)
    }

    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.data()[0]
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self) -> Option<Array> {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        node.grad
            .as_ref()
            .map(|g| Array::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Reverse-mode sweep from this scalar.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn unary_op(self, kind: Unary) -> Tensor<'t> {
        let v = self.with_value(|a| {
            a.map(|x| match kind {
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
                Unary::Relu => x.max(0.0),
                Unary::Softplus => softplus(x),
                Unary::Log => x.ln(),
                Unary::Exp => x.exp(),
                Unary::Square => x * x,
                Unary::Sqrt => x.sqrt(),
                Unary::Abs => x.abs(),
            })
        });
        self.wrap(v, Op::Unary(self.id, kind), self.requires_grad())
    }

    fn wrap(self, value: Array, op: Op, rg: bool) -> Tensor<'t> {
        let id = self.tape.push(value, op, rg);
        Tensor { tape: self.tape, id }
    }

    pub fn tanh(self) -> Tensor<'t> {
        self.unary_op(Unary::Tanh)
    }
    pub fn sigmoid(self) -> Tensor<'t> {
        self.unary_op(Unary::Sigmoid)
    }
    pub fn relu(self) -> Tensor<'t> {
        self.unary_op(Unary::Relu)
    }
    pub fn softplus(self) -> Tensor<'t> {
        self.unary_op(Unary::Softplus)
    }
    pub fn log(self) -> Tensor<'t> {
        self.unary_op(Unary::Log)
    }
    pub fn exp(self) -> Tensor<'t> {
        self.unary_op(Unary::Exp)
    }
    pub fn square(self) -> Tensor<'t> {
        self.unary_op(Unary::Square)
    }
    pub fn sqrt(self) -> Tensor<'t> {
        self.unary_op(Unary::Sqrt)
    }
    pub fn abs(self) -> Tensor<'t> {
        self.unary_op(Unary::Abs)
    }

    pub fn scale(self, c: f64) -> Tensor<'t> {
        let v = self.with_value(|a| a.map(|x| c * x));
        self.wrap(v, Op::Scale(self.id, c), self.requires_grad())
    }

    pub fn neg(self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        let v = self.with_value(|a| a.map(|x| x + c));
        self.wrap(v, Op::AddScalar(self.id), self.requires_grad())
    }

    fn binary(self, other: Tensor<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Array, bool)> {
        let nodes = self.tape.nodes.borrow();
        let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            shapes: vec![a.shape().to_vec(), b.shape().to_vec()],
        })?;
        let data: Vec<f64> = if a.shape() == b.shape() {
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(a.shape(), &out_shape);
            let mb = broadcast_map(b.shape(), &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(a.data()[i], b.data()[j])).collect()
        };
        let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
        Ok((Array::new(out_shape, data)?, rg))
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (v, rg) = self.binary(other, "add", |x, y| x + y)?;
        Ok(self.wrap(v, Op::Add(self.id, other.id), rg))
    }

    pub fn sub(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (v, rg) = self.binary(other, "sub", |x, y| x - y)?;
        Ok(self.wrap(v, Op::Sub(self.id, other.id), rg))
    }

    pub fn mul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (v, rg) = self.binary(other, "mul", |x, y| x * y)?;
        Ok(self.wrap(v, Op::Mul(self.id, other.id), rg))
    }

    pub fn div(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (v, rg) = self.binary(other, "div", |x, y| x / y)?;
        Ok(self.wrap(v, Op::Div(self.id, other.id), rg))
    }

    /// Matrix product over the last two axes. Leading batch axes must match,
    /// or one side may have none (or only size-1 ones) and is shared.
    pub fn matmul(self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let dims = matmul_dims(a.shape(), b.shape())?;
            let MatDims { m, k, n, .. } = dims;
            let mut out = vec![0.0; dims.batch * m * n];
            if dims.a_batched && !dims.b_batched {
                // a shared right operand folds the batch into the rows, so a
                // row's result does not depend on how its input was shaped
                gemm_nn(a.data(), b.data(), &mut out, dims.batch * m, k, n);
            } else {
                for bi in 0..dims.batch {
                    let ao = if dims.a_batched { bi * m * k } else { 0 };
                    let bo = if dims.b_batched { bi * k * n } else { 0 };
                    gemm_nn(
                        &a.data()[ao..ao + m * k],
                        &b.data()[bo..bo + k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            let rg = nodes[self.id].requires_grad || nodes[other.id].requires_grad;
            (Array::new(dims.out_shape, out)?, rg)
        };
        Ok(self.wrap(v, Op::MatMul(self.id, other.id), rg))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op,
                axis,
                ndim: shape.len(),
            });
        }
        Ok(shape)
    }

    pub fn softmax(self, axis: usize) -> Result<Tensor<'t>> {
        let shape = self.check_axis("softmax", axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut y = self.value().into_data();
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(y[base + t * inner]);
                }
                let mut s = 0.0;
                for t in 0..len {
                    let e = (y[base + t * inner] - mx).exp();
                    y[base + t * inner] = e;
                    s += e;
                }
                for t in 0..len {
                    y[base + t * inner] /= s;
                }
            }
        }
        let v = Array::new(shape, y)?;
        Ok(self.wrap(v, Op::Softmax(self.id, axis), self.requires_grad()))
    }

    fn reduce_axis(self, axis: usize, keepdim: bool, op: &'static str) -> Result<Tensor<'t>> {
        let shape = self.check_axis(op, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        self.with_value(|a| {
            let x = a.data();
            for o in 0..outer {
                for t in 0..len {
                    for j in 0..inner {
                        out[o * inner + j] += x[(o * len + t) * inner + j];
                    }
                }
            }
        });
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let v = Array::new(out_shape, out)?;
        Ok(self.wrap(v, Op::Sum { input: self.id, axis }, self.requires_grad()))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Tensor<'t>> {
        self.reduce_axis(axis, false, "sum")
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_keepdim(self, axis: usize) -> Result<Tensor<'t>> {
        self.reduce_axis(axis, true, "sum")
    }

    pub fn mean_axis(self, axis: usize) -> Result<Tensor<'t>> {
        let len = self.check_axis("mean", axis)?[axis];
        Ok(self.reduce_axis(axis, false, "mean")?.scale(1.0 / len as f64))
    }

    pub fn mean_keepdim(self, axis: usize) -> Result<Tensor<'t>> {
        let len = self.check_axis("mean", axis)?[axis];
        Ok(self.reduce_axis(axis, true, "mean")?.scale(1.0 / len as f64))
    }

    pub fn sum(self) -> Tensor<'t> {
        let s: f64 = self.with_value(|a| a.data().iter().sum());
        self.wrap(Array::scalar(s), Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean(self) -> Tensor<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn concat(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?;
        let tape = first.tape;
        let base = first.check_axis("concat", axis)?;
        let nodes = tape.nodes.borrow();
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    shapes: parts.iter().map(|p| nodes[p.id].value.shape().to_vec()).collect(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let len = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let mut shape = base;
        shape[axis] = total;
        let v = Array::new(shape, out)?;
        let op = Op::Concat {
            inputs: parts.iter().map(|p| p.id).collect(),
            axis,
        };
        Ok(first.wrap(v, op, rg))
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Tensor<'t>> {
        let shape = self.check_axis("slice", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: start + len,
                bound: shape[axis],
            });
        }
        let (outer, total, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        self.with_value(|a| {
            for o in 0..outer {
                let s = (o * total + start) * inner;
                out.extend_from_slice(&a.data()[s..s + len * inner]);
            }
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        let v = Array::new(out_shape, out)?;
        Ok(self.wrap(
            v,
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<'t>>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn permute(self, perm: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::InvalidArgument(format!(
                "permutation {perm:?} invalid for shape {shape:?}"
            )));
        }
        let (data, out_shape) = self.with_value(|a| permute_data(a.data(), a.shape(), perm));
        let v = Array::new(out_shape, data)?;
        Ok(self.wrap(
            v,
            Op::Permute {
                input: self.id,
                perm: perm.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Tensor<'t>> {
        let nd = self.shape().len();
        if nd < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                ndim: nd,
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.wrap(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Embedding lookup: selects rows along axis 0.
    pub fn gather_rows(self, rows: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if rows.is_empty() {
            return Err(TensorError::InvalidArgument("gather of no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= shape[0]) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: shape[0],
            });
        }
        let row_len: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * row_len);
        self.with_value(|a| {
            for &r in rows {
                out.extend_from_slice(&a.data()[r * row_len..(r + 1) * row_len]);
            }
        });
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let v = Array::new(out_shape, out)?;
        Ok(self.wrap(
            v,
            Op::Gather {
                input: self.id,
                rows: rows.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Picks one entry of the last axis per leading position.
    pub fn pick(self, cols: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let c = *shape.last().unwrap();
        let rows = self.len() / c;
        if cols.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "pick",
                shapes: vec![shape, vec![cols.len()]],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::IndexOutOfRange {
                op: "pick",
                index: bad,
                bound: c,
            });
        }
        let out: Vec<f64> = self.with_value(|a| cols.iter().enumerate().map(|(i, &j)| a.data()[i * c + j]).collect());
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let v = Array::new(out_shape, out)?;
        Ok(self.wrap(
            v,
            Op::Pick {
                input: self.id,
                cols: cols.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Replaces entries where `mask` is true by `value`. `mask` has a shape
    /// broadcastable to this tensor.
    pub fn masked_fill(self, mask: &[bool], mask_shape: &[usize], value: f64) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let ok = mask.len() == mask_shape.iter().product::<usize>()
            && broadcast_shape(mask_shape, &shape).as_deref() == Some(&shape[..]);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                shapes: vec![shape, mask_shape.to_vec()],
            });
        }
        let full: Vec<bool> = if mask_shape == shape.as_slice() {
            mask.to_vec()
        } else {
            broadcast_map(mask_shape, &shape).into_iter().map(|i| mask[i]).collect()
        };
        let mut v = self.value();
        for (x, &m) in v.data_mut().iter_mut().zip(&full) {
            if m {
                *x = value;
            }
        }
        Ok(self.wrap(
            v,
            Op::MaskedFill {
                input: self.id,
                mask: full,
            },
            self.requires_grad(),
        ))
    }
}
