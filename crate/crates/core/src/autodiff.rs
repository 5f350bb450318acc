//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates adjoints. Nodes
//! built only from constants carry no gradient and are skipped.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{gemm, Broadcast, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Abs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary(BinaryOp, usize, usize, Broadcast),
    Unary(UnaryOp, usize),
    Scale(usize, f64),
    Sum(usize),
    /// Per-entry multiplier: 0 for dropped, `1/(1-rate)` for kept.
    Dropout(usize, Vec<f64>),
    Transpose(usize),
    Reshape(usize),
    ConcatLast(Vec<usize>),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
    ClampAwayFromZero(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of the primitives applied during one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss, one per registered parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn len(&self) -> usize {
        self.by_name.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_name.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    pub fn from_map(by_name: BTreeMap<String, Tensor>) -> Self {
        Gradients { by_name }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "{name} produced a non-finite value"
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            index: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var {
            index,
            tape: self.id,
        }
    }

    /// Records a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Usage(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf, true, name)?;
        self.params.push((name.to_string(), v.index));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let value = crate::tensor::matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        let g = self.needs(ia) || self.needs(ib);
        self.push(value, Op::MatMul(ia, ib), g, "matmul")
    }

    /// Pointwise binary op; `b` may broadcast onto `a`'s shape.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let av = &self.nodes[ia].value;
        let bv = &self.nodes[ib].value;
        let plan = Broadcast::plan(av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(ad.len());
        match op {
            BinaryOp::Add => out.extend(ad.iter().enumerate().map(|(i, x)| x + bd[plan.index(i)])),
            BinaryOp::Sub => out.extend(ad.iter().enumerate().map(|(i, x)| x - bd[plan.index(i)])),
            BinaryOp::Mul => out.extend(ad.iter().enumerate().map(|(i, x)| x * bd[plan.index(i)])),
            BinaryOp::Div => {
                if bd.contains(&0.0) {
                    return Err(Error::Numerical("division by zero".into()));
                }
                out.extend(ad.iter().enumerate().map(|(i, x)| x / bd[plan.index(i)]))
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let g = self.needs(ia) || self.needs(ib);
        self.push(value, Op::Binary(op, ia, ib, plan), g, "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = match op {
            UnaryOp::Sigmoid => self.nodes[ia].value.map(sigmoid),
            UnaryOp::Abs => self.nodes[ia].value.map(f64::abs),
        };
        let g = self.needs(ia);
        self.push(value, Op::Unary(op, ia), g, "unary op")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|x| c * x);
        let g = self.needs(ia);
        self.push(value, Op::Scale(ia, c), g, "scale")
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let g = self.needs(ia);
        self.push(value, Op::Sum(ia), g, "sum")
    }

    /// Inverted dropout. Identity when `training` is false or `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let ia = self.idx(a)?;
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let x = &self.nodes[ia].value;
        let mult: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.uniform() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = x.data().iter().zip(&mult).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let g = self.needs(ia);
        self.push(value, Op::Dropout(ia, mult), g, "dropout")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.transpose()?;
        let g = self.needs(ia);
        self.push(value, Op::Transpose(ia), g, "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        let g = self.needs(ia);
        self.push(value, Op::Reshape(ia), g, "reshape")
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&v| self.idx(v)).collect::<Result<_>>()?;
        let first = idx
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let lead = {
            let s = self.nodes[*first].value.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != lead.len() + 1 || s[..s.len() - 1] != lead[..] {
                return Err(Error::Dimension(format!(
                    "concat of {:?} with leading dims {:?}",
                    s, lead
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        let g = idx.iter().any(|&i| self.needs(i));
        self.push(value, Op::ConcatLast(idx), g, "concat")
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let shape = x.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow axis {axis} [{start}, {}) of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let g = self.needs(ia);
        self.push(
            value,
            Op::Narrow {
                input: ia,
                axis,
                start,
            },
            g,
            "narrow",
        )
    }

    /// Row lookup into a `V×C` table; result is `n×C`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = &self.nodes[it].value;
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "gather needs a 2-D table, got {:?}",
                t.shape()
            )));
        }
        let (v, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::Usage(format!(
                "index {bad} out of range for table of {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], data)?;
        let g = self.needs(it);
        self.push(
            value,
            Op::Gather {
                table: it,
                indices: indices.to_vec(),
            },
            g,
            "gather",
        )
    }

    /// Replaces entries with `|x| < floor` by `sign(x)·floor` (sign(0) = +1).
    /// Clamped entries pass no gradient.
    pub fn clamp_away_from_zero(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let value = self.nodes[ia].value.map(|x| clamp_away(x, floor));
        let g = self.needs(ia);
        self.push(value, Op::ClampAwayFromZero(ia, floor), g, "clamp")
    }

    /// Gradients of the scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(il + 1);
        grads.resize_with(il + 1, || None);
        grads[il] = Some(Tensor::filled(self.nodes[il].value.shape(), 1.0));

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            // Leaves keep their adjoint for collection below.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, i) in &self.params {
            let g = grads
                .get_mut(*i)
                .and_then(Option::take)
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*i].value.shape()));
            by_name.insert(name.clone(), g);
        }
        Ok(Gradients { by_name })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(ia, ib) => {
                let a = &self.nodes[*ia].value;
                let b = &self.nodes[*ib].value;
                let (m, k) = a.as_matrix_dims();
                let n = b.shape()[1];
                if self.needs(*ia) {
                    // dA = G · Bᵀ
                    let acc = accum(grads, *ia, a.shape());
                    gemm(m, n, k, 1.0, gd, false, b.data(), true, 1.0, acc.data_mut());
                }
                if self.needs(*ib) {
                    // dB = Aᵀ · G
                    let acc = accum(grads, *ib, b.shape());
                    gemm(k, m, n, 1.0, a.data(), true, gd, false, 1.0, acc.data_mut());
                }
            }
            Op::Binary(op, ia, ib, plan) => {
                let a = self.nodes[*ia].value.data();
                let b = self.nodes[*ib].value.data();
                if self.needs(*ia) {
                    let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                    let ad = acc.data_mut();
                    match op {
                        BinaryOp::Add | BinaryOp::Sub => {
                            ad.iter_mut().zip(gd).for_each(|(x, g)| *x += g)
                        }
                        BinaryOp::Mul => {
                            for (j, x) in ad.iter_mut().enumerate() {
                                *x += gd[j] * b[plan.index(j)];
                            }
                        }
                        BinaryOp::Div => {
                            for (j, x) in ad.iter_mut().enumerate() {
                                *x += gd[j] / b[plan.index(j)];
                            }
                        }
                    }
                }
                if self.needs(*ib) {
                    let acc = accum(grads, *ib, self.nodes[*ib].value.shape());
                    let bd = acc.data_mut();
                    for j in 0..gd.len() {
                        let k = plan.index(j);
                        bd[k] += match op {
                            BinaryOp::Add => gd[j],
                            BinaryOp::Sub => -gd[j],
                            BinaryOp::Mul => gd[j] * a[j],
                            BinaryOp::Div => -gd[j] * a[j] / (b[k] * b[k]),
                        };
                    }
                }
            }
            Op::Unary(op, ia) => {
                let x = self.nodes[*ia].value.data();
                let y = node.value.data();
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                let ad = acc.data_mut();
                match op {
                    UnaryOp::Sigmoid => {
                        for j in 0..ad.len() {
                            ad[j] += gd[j] * y[j] * (1.0 - y[j]);
                        }
                    }
                    UnaryOp::Abs => {
                        for j in 0..ad.len() {
                            let s = if x[j] > 0.0 {
                                1.0
                            } else if x[j] < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            ad[j] += gd[j] * s;
                        }
                    }
                }
            }
            Op::Scale(ia, c) => {
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                acc.data_mut()
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(x, g)| *x += c * g);
            }
            Op::Sum(ia) => {
                let s = gd[0];
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                acc.data_mut().iter_mut().for_each(|x| *x += s);
            }
            Op::Dropout(ia, mult) => {
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                for ((x, g), m) in acc.data_mut().iter_mut().zip(gd).zip(mult) {
                    *x += g * m;
                }
            }
            Op::Transpose(ia) => {
                let back = g.transpose()?;
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                acc.data_mut()
                    .iter_mut()
                    .zip(back.data())
                    .for_each(|(x, g)| *x += g);
            }
            Op::Reshape(ia) => {
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                acc.data_mut().iter_mut().zip(gd).for_each(|(x, g)| *x += g);
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.nodes[p].value.shape().last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = gd.len().checked_div(total).unwrap_or(0);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let acc = accum(grads, p, self.nodes[p].value.shape());
                        let ad = acc.data_mut();
                        for r in 0..rows {
                            let src = &gd[r * total + offset..r * total + offset + w];
                            for (x, g) in ad[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += g;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.nodes[*input].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let dim = shape[*axis];
                let len = node.value.shape()[*axis];
                let acc = accum(grads, *input, &shape);
                let ad = acc.data_mut();
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    for (x, g) in ad[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&gd[src..src + len * inner])
                    {
                        *x += g;
                    }
                }
            }
            Op::Gather { table, indices } => {
                let c = self.nodes[*table].value.shape()[1];
                let acc = accum(grads, *table, self.nodes[*table].value.shape());
                let ad = acc.data_mut();
                for (r, &row) in indices.iter().enumerate() {
                    for j in 0..c {
                        ad[row * c + j] += gd[r * c + j];
                    }
                }
            }
            Op::ClampAwayFromZero(ia, floor) => {
                let x = self.nodes[*ia].value.data();
                let acc = accum(grads, *ia, self.nodes[*ia].value.shape());
                for (j, a) in acc.data_mut().iter_mut().enumerate() {
                    if x[j].abs() >= *floor {
                        *a += gd[j];
                    }
                }
            }
        }
        Ok(())
    }
}

fn accum<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_away(x: f64, floor: f64) -> f64 {
    if x.abs() >= floor {
        x
    } else if x < 0.0 {
        -floor
    } else {
        floor
    }
}
