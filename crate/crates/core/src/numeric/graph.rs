//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node holding its forward value; `backward`
//! walks the tape once in reverse. Forward FLOPs are recorded at dispatch.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tensor::{matmul_acc, matmul_raw};
use super::{FlopCounter, OpKind, ParamId, ParamSet, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MulConst(usize, Tensor<T>),
    Gelu(usize),
    Silu(usize),
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<T> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { table: usize, idx: Vec<usize> },
    Sum(usize),
    Reshape(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape plus FLOP counter. One writer at a time.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    flops: FlopCounter,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a trainable parameter that took part in the forward pass.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Gradient for any parameter: frozen or unused tensors get exact zeros.
    pub fn param_or_zero(&self, ps: &ParamSet<T>, id: ParamId) -> Tensor<T> {
        match self.param(id) {
            Some(g) if !ps.is_frozen(id) => g.clone(),
            _ => Tensor::zeros(ps.get(id).shape()),
        }
    }

    /// Trainable parameters that received a gradient.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> =
            self.params.iter().filter(|(_, v)| self.wrt(**v).is_some()).map(|(id, _)| *id).collect();
        ids.sort();
        ids
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

fn slot_or_zeros<'a, T: Scalar>(slot: &'a mut Option<Tensor<T>>, shape: &[usize]) -> &'a mut Tensor<T> {
    slot.get_or_insert_with(|| Tensor::zeros(shape))
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), flops: FlopCounter::new(), params: HashMap::new() }
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops.reset();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn pointwise(&mut self, n: usize) {
        self.flops.record(OpKind::Pointwise, n as u64);
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf not backed by a parameter set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(ps.get(id).clone(), Op::Leaf, !ps.is_frozen(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) @ op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = matmul_raw(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb)?;
        let (m, n) = (out.shape()[0], out.shape()[1]);
        let av = &self.nodes[a.0].value;
        let k = if ta { av.shape()[0] } else { av.shape()[1] };
        self.flops.record(OpKind::MatMul, 2 * (m * k * n) as u64);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if x.shape() != y.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let out = x.zip_map(y, f)?;
        self.pointwise(out.len());
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::Mul(a.0, b.0), rg))
    }

    fn row_check(&self, x: Var, v: Var, name: &'static str) -> Result<usize> {
        let n = self.nodes[x.0].value.cols();
        let vlen = self.nodes[v.0].value.len();
        if vlen != n || self.nodes[x.0].value.rank() != 2 {
            return Err(Error::shape(
                name,
                format!("{:?} with row vector {:?}", self.shape(x), self.shape(v)),
            ));
        }
        Ok(n)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.row_check(x, v, "add_row")?;
        let mut out = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vv) {
                *o = *o + b;
            }
        }
        self.pointwise(out.len());
        let rg = self.rg(&[x.0, v.0]);
        Ok(self.push(out, Op::AddRow(x.0, v.0), rg))
    }

    /// Multiplies every row of an `m×n` matrix elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let n = self.row_check(x, v, "mul_row")?;
        let mut out = self.nodes[x.0].value.clone();
        let vv = self.nodes[v.0].value.data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(vv) {
                *o = *o * b;
            }
        }
        self.pointwise(out.len());
        let rg = self.rg(&[x.0, v.0]);
        Ok(self.push(out, Op::MulRow(x.0, v.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.nodes[x.0].value.map(|v| v * c);
        self.pointwise(out.len());
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Scale(x.0, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.nodes[x.0].value.map(|v| v + c);
        self.pointwise(out.len());
        let rg = self.rg(&[x.0]);
        self.push(out, Op::AddScalar(x.0), rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, k: Tensor<T>) -> Result<Var> {
        let out = self.nodes[x.0].value.zip_map(&k, |a, b| a * b)?;
        self.pointwise(out.len());
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::MulConst(x.0, k), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| T::from_f64(gelu_parts(v.as_f64()).0));
        self.flops.record(OpKind::Activation, OpKind::NONLINEAR_COST * out.len() as u64);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Gelu(x.0), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.map(|v| {
            let f = v.as_f64();
            T::from_f64(f * sigmoid(f))
        });
        self.flops.record(OpKind::Activation, OpKind::NONLINEAR_COST * out.len() as u64);
        let rg = self.rg(&[x.0]);
        self.push(out, Op::Silu(x.0), rg)
    }

    /// Row softmax, optionally after adding a constant mask (`-inf` blocks an entry).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if xv.rank() != 2 {
            return Err(Error::shape("softmax_rows", format!("rank {}", xv.rank())));
        }
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape("softmax_rows", format!("mask {:?} vs {:?}", m.shape(), xv.shape())));
            }
        }
        let n = xv.cols();
        let mut out = xv.clone();
        if let Some(m) = mask {
            for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
                *o = *o + mv;
            }
        }
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                return Err(Error::FullyMaskedRow { row: r });
            }
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let len = out.len() as u64;
        if mask.is_some() {
            self.flops.record(OpKind::Pointwise, len);
        }
        self.flops.record(OpKind::Softmax, OpKind::NONLINEAR_COST * len);
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Softmax(x.0), rg))
    }

    /// Zero-mean unit-variance normalization over the last axis (ε = 1e-5), no affine.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d < 2 {
            return Err(Error::shape("layer_norm", format!("last axis {d} < 2")));
        }
        let mut out = xv.clone();
        let mut rstds = Vec::with_capacity(out.rows());
        let eps = T::from_f64(LN_EPS);
        let dn = T::from_f64(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.flops.record(OpKind::Norm, OpKind::NONLINEAR_COST * out.len() as u64);
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::LayerNorm { x: x.0, rstd: rstds }, rg))
    }

    /// Normalization followed by a per-feature gain and bias.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.layer_norm(x)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = xv.cols();
        if xv.rank() != 2 || start + len > c {
            return Err(Error::shape("slice_cols", format!("{}..{} of {:?}", start, start + len, xv.shape())));
        }
        let rows = xv.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat_cols(&ts)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatCols(ids), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = Tensor::concat_rows(&ts)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    /// Table lookup; the gradient scatter-adds into the selected rows.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let out = self.nodes[table.0].value.gather_rows(idx)?;
        let rg = self.rg(&[table.0]);
        Ok(self.push(out, Op::GatherRows { table: table.0, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let s: T = xv.data().iter().copied().sum();
        self.flops.record(OpKind::Reduce, xv.len() as u64);
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x.0]);
        Ok(self.push(out, Op::Reshape(x.0), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(loss.0));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                if needs(a) {
                    let shape = val(a).shape().to_vec();
                    let slot = slot_or_zeros(&mut grads[a], &shape);
                    match (ta, tb) {
                        (false, false) => matmul_acc(g, val(b), false, true, slot),
                        (true, false) => matmul_acc(val(b), g, false, true, slot),
                        (false, true) => matmul_acc(g, val(b), false, false, slot),
                        (true, true) => matmul_acc(val(b), g, true, true, slot),
                    }
                }
                if needs(b) {
                    let shape = val(b).shape().to_vec();
                    let slot = slot_or_zeros(&mut grads[b], &shape);
                    match (ta, tb) {
                        (false, false) => matmul_acc(val(a), g, true, false, slot),
                        (true, false) => matmul_acc(val(a), g, false, false, slot),
                        (false, true) => matmul_acc(g, val(a), true, false, slot),
                        (true, true) => matmul_acc(g, val(a), true, true, slot),
                    }
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[*a], g.clone());
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(&mut grads[*a], g.zip_map(val(*b), |x, y| x * y).expect("shape"));
                }
                if needs(*b) {
                    accumulate(&mut grads[*b], g.zip_map(val(*a), |x, y| x * y).expect("shape"));
                }
            }
            Op::AddRow(x, v) => {
                if needs(*x) {
                    accumulate(&mut grads[*x], g.clone());
                }
                if needs(*v) {
                    let shape = val(*v).shape().to_vec();
                    let n = g.cols();
                    let mut dv = Tensor::zeros(&shape);
                    for row in g.data().chunks(n) {
                        for (d, &r) in dv.data_mut().iter_mut().zip(row) {
                            *d = *d + r;
                        }
                    }
                    accumulate(&mut grads[*v], dv);
                }
            }
            Op::MulRow(x, v) => {
                let n = g.cols();
                if needs(*x) {
                    let vv = val(*v).data();
                    let mut dx = g.clone();
                    for row in dx.data_mut().chunks_mut(n) {
                        for (d, &s) in row.iter_mut().zip(vv) {
                            *d = *d * s;
                        }
                    }
                    accumulate(&mut grads[*x], dx);
                }
                if needs(*v) {
                    let shape = val(*v).shape().to_vec();
                    let mut dv = Tensor::zeros(&shape);
                    for (grow, xrow) in g.data().chunks(n).zip(val(*x).data().chunks(n)) {
                        for ((d, &gr), &xr) in dv.data_mut().iter_mut().zip(grow).zip(xrow) {
                            *d = *d + gr * xr;
                        }
                    }
                    accumulate(&mut grads[*v], dv);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(&mut grads[*x], g.map(|v| v * c));
            }
            Op::AddScalar(x) => accumulate(&mut grads[*x], g.clone()),
            Op::MulConst(x, k) => {
                accumulate(&mut grads[*x], g.zip_map(k, |a, b| a * b).expect("shape"));
            }
            Op::Gelu(x) => {
                let dx = g
                    .zip_map(val(*x), |gv, xv| gv * T::from_f64(gelu_parts(xv.as_f64()).1))
                    .expect("shape");
                accumulate(&mut grads[*x], dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .zip_map(val(*x), |gv, xv| {
                        let f = xv.as_f64();
                        let s = sigmoid(f);
                        gv * T::from_f64(s * (1.0 + f * (1.0 - s)))
                    })
                    .expect("shape");
                accumulate(&mut grads[*x], dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut dx = g.clone();
                for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (d, &yv) in drow.iter_mut().zip(yrow) {
                        *d = yv * (*d - dot);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let d = y.cols();
                let dn = T::from_f64(d as f64);
                let mut dx = g.clone();
                for ((drow, yrow), &rs) in dx.data_mut().chunks_mut(d).zip(y.data().chunks(d)).zip(rstd) {
                    let mg = drow.iter().copied().sum::<T>() / dn;
                    let mgy = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for (dv, &yv) in drow.iter_mut().zip(yrow) {
                        *dv = rs * (*dv - mg - yv * mgy);
                    }
                }
                accumulate(&mut grads[*x], dx);
            }
            Op::SliceCols { x, start } => {
                let shape = val(*x).shape().to_vec();
                let c = shape[1];
                let len = g.cols();
                let slot = slot_or_zeros(&mut grads[*x], &shape);
                for r in 0..g.rows() {
                    let dst = &mut slot.data_mut()[r * c + start..r * c + start + len];
                    for (d, &s) in dst.iter_mut().zip(g.row(r)) {
                        *d = *d + s;
                    }
                }
            }
            Op::ConcatCols(ids) => {
                let mut off = 0;
                for &p in ids {
                    let pc = val(p).cols();
                    if needs(p) {
                        let shape = val(p).shape().to_vec();
                        let total = g.cols();
                        let slot = slot_or_zeros(&mut grads[p], &shape);
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + off..r * total + off + pc];
                            for (d, &s) in slot.row_mut(r).iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &p in ids {
                    let n = val(p).len();
                    if needs(p) {
                        let part = Tensor::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())
                            .expect("shape");
                        accumulate(&mut grads[p], part);
                    }
                    off += n;
                }
            }
            Op::GatherRows { table, idx } => {
                let shape = val(*table).shape().to_vec();
                let slot = slot_or_zeros(&mut grads[*table], &shape);
                for (r, &src) in idx.iter().enumerate() {
                    let grow = g.row(r);
                    for (d, &s) in slot.row_mut(src).iter_mut().zip(grow) {
                        *d = *d + s;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g.item();
                accumulate(&mut grads[*x], Tensor::full(val(*x).shape(), s));
            }
            Op::Reshape(x) => {
                let r = g.clone().reshape(val(*x).shape()).expect("shape");
                accumulate(&mut grads[*x], r);
            }
        }
    }
}
