//! Reverse-mode tape over rank-2 tensors.
//!
//! A [`Tape`] records every primitive application; [`Var`] is a cheap
//! handle into the tape. Backpropagation walks the record in reverse,
//! accumulating gradients only through nodes that (transitively) depend
//! on a `requires_grad` leaf. Replaying the record reproduces forward
//! values bit-identically.

use std::cell::RefCell;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Identifiers for the primitive set understood by [`Tape::apply`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    Transpose,
    Add,
    Mul,
    ScalarMultiply,
    Exp,
    Log,
    Maximum,
    Relu,
    RowSoftmax,
    LayerNorm,
    RowMean,
    RowMax,
    ConcatRows,
    ConcatCols,
    Cosine,
}

impl FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "add" => Primitive::Add,
            "mul" | "multiply" => Primitive::Mul,
            "scalar-multiply" => Primitive::ScalarMultiply,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "maximum" | "max" => Primitive::Maximum,
            "relu" => Primitive::Relu,
            "row-softmax" | "softmax" => Primitive::RowSoftmax,
            "layer-norm" => Primitive::LayerNorm,
            "row-mean" => Primitive::RowMean,
            "row-max" => Primitive::RowMax,
            "concat-rows" | "concat" => Primitive::ConcatRows,
            "concat-cols" => Primitive::ConcatCols,
            "cosine" => Primitive::Cosine,
            other => return Err(Error::UnknownPrimitive(other.to_string())),
        })
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Exp(usize),
    Ln(usize),
    Maximum(usize, usize),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNormRows(usize),
    MeanRows(usize),
    MaxRows(usize),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    Cosine(usize, usize),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scalar-multiply",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "log",
        Op::Maximum(..) => "maximum",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "row-softmax",
        Op::LayerNormRows(..) => "layer-norm",
        Op::MeanRows(..) => "row-mean",
        Op::MaxRows(..) => "row-max",
        Op::ConcatRows(..) => "concat-rows",
        Op::ConcatCols(..) => "concat-cols",
        Op::Cosine(..) => "cosine",
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::LayerNormRows(a)
        | Op::MeanRows(a)
        | Op::MaxRows(a) => vec![a],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Mul(a, b)
        | Op::Maximum(a, b)
        | Op::ConcatRows(a, b)
        | Op::ConcatCols(a, b)
        | Op::Cosine(a, b) => vec![a, b],
    }
}

/// Output rows/cols of each operand under two-way broadcasting, or a
/// shape-mismatch error. Each dimension must agree or be 1.
fn broadcast_dims(
    primitive: &'static str,
    sa: &[usize],
    sb: &[usize],
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (ra, ca) = rank2(primitive, sa)?;
    let (rb, cb) = rank2(primitive, sb)?;
    let mismatch = || Error::ShapeMismatch {
        primitive,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    let r = if ra == rb {
        ra
    } else if ra == 1 {
        rb
    } else if rb == 1 {
        ra
    } else {
        return Err(mismatch());
    };
    let c = if ca == cb {
        ca
    } else if ca == 1 {
        cb
    } else if cb == 1 {
        ca
    } else {
        return Err(mismatch());
    };
    Ok((r, c, ra, ca, rb, cb))
}

fn rank2(primitive: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::InvalidShape {
            primitive,
            shape: shape.to_vec(),
            expected: "rank-2 tensor",
        }),
    }
}

fn broadcast_binary(
    primitive: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let (r, c, ra, ca, rb, cb) = broadcast_dims(primitive, a.shape(), b.shape())?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = Tensor::zeros(r, c);
    let od = out.data_mut();
    for i in 0..r {
        let ia = if ra == 1 { 0 } else { i };
        let ib = if rb == 1 { 0 } else { i };
        for j in 0..c {
            let ja = if ca == 1 { 0 } else { j };
            let jb = if cb == 1 { 0 } else { j };
            od[i * c + j] = f(ad[ia * ca + ja], bd[ib * cb + jb]);
        }
    }
    Ok(out)
}

/// Sum `grad` down to `shape` along any dimension the operand
/// broadcast over.
fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    let (r, c) = (grad.shape()[0], grad.shape()[1]);
    let (rt, ct) = (shape[0], shape[1]);
    if (r, c) == (rt, ct) {
        return grad.clone();
    }
    let mut out = Tensor::zeros(rt, ct);
    for i in 0..r {
        let it = if rt == 1 { 0 } else { i };
        for j in 0..c {
            let jt = if ct == 1 { 0 } else { j };
            let v = grad.get(i, j);
            out.set(it, jt, out.get(it, jt) + v);
        }
    }
    out
}

fn eval_op(op: &Op, vals: &[Tensor]) -> Result<Tensor> {
    match *op {
        Op::Leaf => unreachable!("leaves are never re-evaluated"),
        Op::MatMul(a, b) => {
            let (m, k) = rank2("matmul", vals[a].shape())?;
            let (k2, n) = rank2("matmul", vals[b].shape())?;
            if k != k2 {
                return Err(Error::ShapeMismatch {
                    primitive: "matmul",
                    lhs: vals[a].shape().to_vec(),
                    rhs: vals[b].shape().to_vec(),
                });
            }
            let mut out = Tensor::zeros(m, n);
            gemm_nn(m, k, n, vals[a].data(), vals[b].data(), out.data_mut());
            Ok(out)
        }
        Op::Transpose(a) => vals[a].transposed(),
        Op::Add(a, b) => broadcast_binary("add", &vals[a], &vals[b], |x, y| x + y),
        Op::Mul(a, b) => broadcast_binary("mul", &vals[a], &vals[b], |x, y| x * y),
        Op::Scale(a, s) => {
            let mut out = vals[a].clone();
            out.scale_in_place(s);
            Ok(out)
        }
        Op::Exp(a) => {
            let mut out = vals[a].clone();
            for v in out.data_mut() {
                *v = v.exp();
            }
            Ok(out)
        }
        Op::Ln(a) => {
            let mut out = vals[a].clone();
            for v in out.data_mut() {
                *v = v.ln();
            }
            Ok(out)
        }
        Op::Maximum(a, b) => {
            if vals[a].shape() != vals[b].shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "maximum",
                    lhs: vals[a].shape().to_vec(),
                    rhs: vals[b].shape().to_vec(),
                });
            }
            let mut out = vals[a].clone();
            for (x, &y) in out.data_mut().iter_mut().zip(vals[b].data()) {
                // Ties keep the first argument.
                if y > *x {
                    *x = y;
                }
            }
            Ok(out)
        }
        Op::Relu(a) => {
            let mut out = vals[a].clone();
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            Ok(out)
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = rank2("row-softmax", vals[a].shape())?;
            let mut out = vals[a].clone();
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Ok(out)
        }
        Op::LayerNormRows(a) => {
            let (r, c) = rank2("layer-norm", vals[a].shape())?;
            let mut out = vals[a].clone();
            for i in 0..r {
                let row = &mut out.data_mut()[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Ok(out)
        }
        Op::MeanRows(a) => {
            let (r, c) = rank2("row-mean", vals[a].shape())?;
            let mut out = Tensor::zeros(r, 1);
            for i in 0..r {
                out.data_mut()[i] = vals[a].row_slice(i).iter().sum::<f64>() / c as f64;
            }
            Ok(out)
        }
        Op::MaxRows(a) => {
            let (r, _) = rank2("row-max", vals[a].shape())?;
            let mut out = Tensor::zeros(r, 1);
            for i in 0..r {
                out.data_mut()[i] = vals[a]
                    .row_slice(i)
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            Ok(out)
        }
        Op::ConcatRows(a, b) => {
            let (ra, ca) = rank2("concat-rows", vals[a].shape())?;
            let (rb, cb) = rank2("concat-rows", vals[b].shape())?;
            if ca != cb {
                return Err(Error::ShapeMismatch {
                    primitive: "concat-rows",
                    lhs: vals[a].shape().to_vec(),
                    rhs: vals[b].shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity((ra + rb) * ca);
            data.extend_from_slice(vals[a].data());
            data.extend_from_slice(vals[b].data());
            Tensor::matrix(ra + rb, ca, data)
        }
        Op::ConcatCols(a, b) => {
            let (ra, ca) = rank2("concat-cols", vals[a].shape())?;
            let (rb, cb) = rank2("concat-cols", vals[b].shape())?;
            if ra != rb {
                return Err(Error::ShapeMismatch {
                    primitive: "concat-cols",
                    lhs: vals[a].shape().to_vec(),
                    rhs: vals[b].shape().to_vec(),
                });
            }
            let mut data = Vec::with_capacity(ra * (ca + cb));
            for i in 0..ra {
                data.extend_from_slice(vals[a].row_slice(i));
                data.extend_from_slice(vals[b].row_slice(i));
            }
            Tensor::matrix(ra, ca + cb, data)
        }
        Op::Cosine(a, b) => {
            if vals[a].shape() != vals[b].shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "cosine",
                    lhs: vals[a].shape().to_vec(),
                    rhs: vals[b].shape().to_vec(),
                });
            }
            let (dot, na2, nb2) = cosine_parts(vals[a].data(), vals[b].data());
            if na2 == 0.0 || nb2 == 0.0 {
                return Err(Error::ZeroNorm);
            }
            Ok(Tensor::scalar(dot / (na2.sqrt() * nb2.sqrt())))
        }
    }
}

fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na2 = 0.0;
    let mut nb2 = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    (dot, na2, nb2)
}

#[derive(Default)]
struct TapeInner {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    requires_grad: Vec<bool>,
}

/// An append-only record of primitive applications.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// A handle to one node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Introduces a leaf. Only `requires_grad` leaves receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.ops.len();
        inner.ops.push(Op::Leaf);
        inner.values.push(value);
        inner.requires_grad.push(requires_grad);
        Var { tape: self, id }
    }

    /// A non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn push(&self, op: Op) -> Result<Var<'_>> {
        let mut inner = self.inner.borrow_mut();
        let value = eval_op(&op, &inner.values)?;
        let rg = op_inputs(&op).iter().any(|&i| inner.requires_grad[i]);
        let id = inner.ops.len();
        inner.ops.push(op);
        inner.values.push(value);
        inner.requires_grad.push(rg);
        Ok(Var { tape: self, id })
    }

    /// Applies a primitive by name; the programmatic entry point used by
    /// the typed [`Var`] methods underneath.
    pub fn apply<'t>(&'t self, primitive: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        let need = match primitive {
            Primitive::Transpose
            | Primitive::Exp
            | Primitive::Log
            | Primitive::Relu
            | Primitive::RowSoftmax
            | Primitive::LayerNorm
            | Primitive::RowMean
            | Primitive::RowMax => 1,
            _ => 2,
        };
        if inputs.len() != need {
            return Err(Error::InvalidArgument(format!(
                "primitive {primitive:?} takes {need} inputs, got {}",
                inputs.len()
            )));
        }
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::InvalidArgument(
                    "inputs must belong to this tape".into(),
                ));
            }
        }
        let a = inputs[0].id;
        let op = match primitive {
            Primitive::MatMul => Op::MatMul(a, inputs[1].id),
            Primitive::Transpose => Op::Transpose(a),
            Primitive::Add => Op::Add(a, inputs[1].id),
            Primitive::Mul => Op::Mul(a, inputs[1].id),
            Primitive::ScalarMultiply => {
                let b = inputs[1];
                if b.value().numel() != 1 {
                    return Err(Error::InvalidShape {
                        primitive: "scalar-multiply",
                        shape: b.shape(),
                        expected: "1 x 1 scalar as second input",
                    });
                }
                Op::Mul(a, b.id)
            }
            Primitive::Exp => Op::Exp(a),
            Primitive::Log => Op::Ln(a),
            Primitive::Maximum => Op::Maximum(a, inputs[1].id),
            Primitive::Relu => Op::Relu(a),
            Primitive::RowSoftmax => Op::SoftmaxRows(a),
            Primitive::LayerNorm => Op::LayerNormRows(a),
            Primitive::RowMean => Op::MeanRows(a),
            Primitive::RowMax => Op::MaxRows(a),
            Primitive::ConcatRows => Op::ConcatRows(a, inputs[1].id),
            Primitive::ConcatCols => Op::ConcatCols(a, inputs[1].id),
            Primitive::Cosine => Op::Cosine(a, inputs[1].id),
        };
        self.push(op)
    }

    /// Applies a primitive by operation-id string (e.g. `"row-softmax"`).
    pub fn apply_named<'t>(&'t self, name: &str, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(name.parse()?, inputs)
    }

    /// Recomputes every non-leaf value from the recorded trace.
    /// The result is bit-identical to the original forward pass.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let inner = self.inner.borrow();
        let mut vals: Vec<Tensor> = Vec::with_capacity(inner.ops.len());
        for (op, original) in inner.ops.iter().zip(&inner.values) {
            let v = match op {
                Op::Leaf => original.clone(),
                _ => eval_op(op, &vals)?,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Backpropagates from explicitly seeded output nodes. Used to chain
    /// gradients across tapes; `Var::backward` is the scalar front door.
    pub fn backward_seeded(&self, seeds: &[(Var<'_>, Tensor)]) -> Result<Gradients<'_>> {
        let ids: Vec<(usize, Tensor)> = seeds.iter().map(|(v, t)| (v.id, t.clone())).collect();
        self.backward_seeded_ids(&ids)
    }

    /// As [`Tape::backward_seeded`], addressing output nodes by id.
    pub fn backward_seeded_ids(&self, seeds: &[(usize, Tensor)]) -> Result<Gradients<'_>> {
        let inner = self.inner.borrow();
        let n = inner.ops.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        for (id, seed) in seeds {
            if seed.shape() != inner.values[*id].shape() {
                return Err(Error::ShapeMismatch {
                    primitive: "backward-seed",
                    lhs: seed.shape().to_vec(),
                    rhs: inner.values[*id].shape().to_vec(),
                });
            }
            match &mut grads[*id] {
                Some(g) => g.add_assign(seed)?,
                slot => *slot = Some(seed.clone()),
            }
        }

        for id in (0..n).rev() {
            if !inner.requires_grad[id] {
                continue;
            }
            let Some(grad) = grads[id].clone() else {
                continue;
            };
            backprop_op(&inner.ops[id], id, &grad, &inner.values, &mut grads)?;
        }
        drop(inner);
        Ok(Gradients { tape: self, grads })
    }
}

/// Accumulates `delta` into `grads[id]`.
fn accum(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<()> {
    match &mut grads[id] {
        Some(g) => g.add_assign(&delta),
        slot => {
            *slot = Some(delta);
            Ok(())
        }
    }
}

fn backprop_op(
    op: &Op,
    id: usize,
    grad: &Tensor,
    values: &[Tensor],
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    match *op {
        Op::Leaf => Ok(()),
        Op::MatMul(a, b) => {
            let (m, k) = values[a].dims2()?;
            let n = values[b].shape()[1];
            let mut da = Tensor::zeros(m, k);
            gemm_nt(m, n, k, grad.data(), values[b].data(), da.data_mut());
            accum(grads, a, da)?;
            let mut db = Tensor::zeros(k, n);
            gemm_tn(k, m, n, values[a].data(), grad.data(), db.data_mut());
            accum(grads, b, db)
        }
        Op::Transpose(a) => accum(grads, a, grad.transposed()?),
        Op::Add(a, b) => {
            accum(grads, a, reduce_to_shape(grad, values[a].shape()))?;
            accum(grads, b, reduce_to_shape(grad, values[b].shape()))
        }
        Op::Mul(a, b) => {
            let da = broadcast_binary("mul", grad, &values[b], |g, y| g * y)?;
            accum(grads, a, reduce_to_shape(&da, values[a].shape()))?;
            let db = broadcast_binary("mul", grad, &values[a], |g, x| g * x)?;
            accum(grads, b, reduce_to_shape(&db, values[b].shape()))
        }
        Op::Scale(a, s) => {
            let mut d = grad.clone();
            d.scale_in_place(s);
            accum(grads, a, d)
        }
        Op::Exp(a) => {
            // d/dx e^x = e^x, reuse the stored output.
            let mut d = grad.clone();
            for (g, &y) in d.data_mut().iter_mut().zip(values[id].data()) {
                *g *= y;
            }
            accum(grads, a, d)
        }
        Op::Ln(a) => {
            let mut d = grad.clone();
            for (g, &x) in d.data_mut().iter_mut().zip(values[a].data()) {
                *g /= x;
            }
            accum(grads, a, d)
        }
        Op::Maximum(a, b) => {
            let mut da = grad.clone();
            let mut db = grad.clone();
            for ((ga, gb), (&x, &y)) in da
                .data_mut()
                .iter_mut()
                .zip(db.data_mut())
                .zip(values[a].data().iter().zip(values[b].data()))
            {
                // Exact ties route to the first argument.
                if x >= y {
                    *gb = 0.0;
                } else {
                    *ga = 0.0;
                }
            }
            accum(grads, a, da)?;
            accum(grads, b, db)
        }
        Op::Relu(a) => {
            let mut d = grad.clone();
            for (g, &x) in d.data_mut().iter_mut().zip(values[a].data()) {
                if x <= 0.0 {
                    *g = 0.0;
                }
            }
            accum(grads, a, d)
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = values[id].dims2()?;
            let mut d = grad.clone();
            for i in 0..r {
                let y = values[id].row_slice(i);
                let row = &mut d.data_mut()[i * c..(i + 1) * c];
                let dot: f64 = row.iter().zip(y).map(|(g, v)| g * v).sum();
                for (g, &v) in row.iter_mut().zip(y) {
                    *g = v * (*g - dot);
                }
            }
            accum(grads, a, d)
        }
        Op::LayerNormRows(a) => {
            let (r, c) = values[id].dims2()?;
            let mut d = grad.clone();
            for i in 0..r {
                let x = values[a].row_slice(i);
                let y = values[id].row_slice(i);
                let mean = x.iter().sum::<f64>() / c as f64;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                let row = &mut d.data_mut()[i * c..(i + 1) * c];
                let g_mean: f64 = row.iter().sum::<f64>() / c as f64;
                let gy_mean: f64 = row.iter().zip(y).map(|(g, v)| g * v).sum::<f64>() / c as f64;
                for (g, &v) in row.iter_mut().zip(y) {
                    *g = inv * (*g - g_mean - v * gy_mean);
                }
            }
            accum(grads, a, d)
        }
        Op::MeanRows(a) => {
            let (r, c) = values[a].dims2()?;
            let mut d = Tensor::zeros(r, c);
            for i in 0..r {
                let g = grad.data()[i] / c as f64;
                for v in &mut d.data_mut()[i * c..(i + 1) * c] {
                    *v = g;
                }
            }
            accum(grads, a, d)
        }
        Op::MaxRows(a) => {
            let (r, _) = values[a].dims2()?;
            let mut d = Tensor::zeros(r, values[a].shape()[1]);
            for i in 0..r {
                let row = values[a].row_slice(i);
                // First occurrence of the row maximum receives the gradient.
                let mut arg = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = j;
                    }
                }
                d.set(i, arg, grad.data()[i]);
            }
            accum(grads, a, d)
        }
        Op::ConcatRows(a, b) => {
            let (ra, ca) = values[a].dims2()?;
            let rb = values[b].shape()[0];
            let da = Tensor::matrix(ra, ca, grad.data()[..ra * ca].to_vec())?;
            let db = Tensor::matrix(rb, ca, grad.data()[ra * ca..].to_vec())?;
            accum(grads, a, da)?;
            accum(grads, b, db)
        }
        Op::ConcatCols(a, b) => {
            let (ra, ca) = values[a].dims2()?;
            let cb = values[b].shape()[1];
            let mut da = Tensor::zeros(ra, ca);
            let mut db = Tensor::zeros(ra, cb);
            for i in 0..ra {
                let g = grad.row_slice(i);
                da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&g[..ca]);
                db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&g[ca..]);
            }
            accum(grads, a, da)?;
            accum(grads, b, db)
        }
        Op::Cosine(a, b) => {
            let g = grad.data()[0];
            let (dot, na2, nb2) = cosine_parts(values[a].data(), values[b].data());
            let (na, nb) = (na2.sqrt(), nb2.sqrt());
            let cos = dot / (na * nb);
            let mut da = values[a].clone();
            let mut db = values[b].clone();
            for ((x, y), (&av, &bv)) in da
                .data_mut()
                .iter_mut()
                .zip(db.data_mut())
                .zip(values[a].data().iter().zip(values[b].data()))
            {
                *x = g * (bv / (na * nb) - cos * av / na2);
                *y = g * (av / (na * nb) - cos * bv / nb2);
            }
            accum(grads, a, da)?;
            accum(grads, b, db)
        }
    }
}

/// Gradients produced by a backward pass.
pub struct Gradients<'t> {
    tape: &'t Tape,
    grads: Vec<Option<Tensor>>,
}

impl Gradients<'_> {
    /// Gradient of the seeded output with respect to `var`. Leaves not on
    /// the path to the output get an explicit zero gradient.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    /// As [`Gradients::get`], addressed by node id.
    pub fn get_id(&self, id: usize) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => {
                let inner = self.tape.inner.borrow();
                let shape = inner.values[id].shape();
                Tensor::zeros(shape[0], shape[1])
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.id].shape().to_vec()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        self.tape.inner.borrow().values[self.id].as_scalar()
    }

    /// Backpropagates from this scalar output through the whole record.
    pub fn backward(&self) -> Result<Gradients<'t>> {
        let shape = self.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput { shape });
        }
        self.tape
            .backward_seeded(&[(*self, Tensor::scalar(1.0))])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::MatMul(self.id, rhs.id))
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.tape.push(Op::Transpose(self.id))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Add(self.id, rhs.id))
    }

    /// `self - rhs`, composed from add and scalar-multiply.
    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let neg = rhs.scale(-1.0)?;
        self.add(neg)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.tape.push(Op::Scale(self.id, factor))
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.push(Op::Exp(self.id))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.tape.push(Op::Ln(self.id))
    }

    pub fn maximum(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Maximum(self.id, rhs.id))
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.push(Op::Relu(self.id))
    }

    pub fn softmax_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::SoftmaxRows(self.id))
    }

    pub fn layer_norm_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::LayerNormRows(self.id))
    }

    pub fn mean_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::MeanRows(self.id))
    }

    pub fn max_rows(self) -> Result<Var<'t>> {
        self.tape.push(Op::MaxRows(self.id))
    }

    pub fn concat_rows(self, below: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::ConcatRows(self.id, below.id))
    }

    pub fn concat_cols(self, right: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::ConcatCols(self.id, right.id))
    }

    pub fn cosine(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.tape.push(Op::Cosine(self.id, rhs.id))
    }
}
