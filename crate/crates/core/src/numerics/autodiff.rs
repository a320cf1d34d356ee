//! Tape-based reverse-mode differentiation over dense f64 tensors.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so the reverse sweep is a single backwards walk over the
//! tape. Parameter leaves borrow their storage from the [`ParameterSet`] they
//! were bound from; only intermediate results own memory.
//!
//! Matrix products skip zero entries of the left operand. Observations are
//! sparse one-hot patches, which makes the first layers of every network
//! several times cheaper without changing a single bit of the result.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{ParameterSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    BatchMatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Relu(usize),
    Elu(usize),
    Sigmoid(usize),
    Abs(usize),
    Clamp01(usize),
    Powf(usize, f64),
    FloorAt(usize, f64),
    SoftmaxRows(usize),
    L2Norm(usize),
    Concat(Vec<usize>),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Gather(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Parameter name to graph variable.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Result of a reverse sweep: gradients of every grad-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Writes gradients into `params.grad`; parameters off the loss path get
    /// zeros.
    pub fn write_into(&self, bindings: &Bindings, params: &mut ParameterSet) -> Result<()> {
        for (name, t) in params.iter_mut() {
            let var = bindings.get(name)?;
            t.grad = Some(match self.get(var) {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.len()],
            });
        }
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

/// `out[r×c] += a[r×k] · b[k×c]`, skipping zero entries of `a`.
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * c..(kk + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×k] += g[r×c] · b[k×c]ᵀ`.
fn mm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * c..(kk + 1) * c];
            *o += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · g[r×c]`, skipping zero entries of `a`.
fn mm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * c..(i + 1) * c];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * c..(kk + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn transpose_into(src: &[f64], dst: &mut [f64], batch: usize, r: usize, c: usize) {
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let d = &mut dst[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                d[j * r + i] = s[i * c + j];
            }
        }
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let c = *shape.last().unwrap_or(&1);
    let total: usize = shape.iter().product();
    (if c == 0 { 0 } else { total / c }, c)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Leaf owning its data, optionally tracked.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad)
    }

    /// Borrowed leaf.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers every parameter as a borrowed leaf. With `track` false the
    /// whole forward pass carries no gradient bookkeeping.
    pub fn bind(&mut self, params: &'a ParameterSet, track: bool) -> Bindings {
        let vars = params
            .iter()
            .map(|(name, t)| (name.clone(), self.leaf_ref(t, track && t.requires_grad)))
            .collect();
        Bindings { vars }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("consistent node")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        same_shape(name, &na.shape, &nb.shape)?;
        let value = na.value.iter().zip(nb.value.iter()).map(|(x, y)| f(*x, *y)).collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(shape, value, op, rg))
    }

    fn map_op(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|x| f(*x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    /// `a[.., C] + bias[C]` broadcast over leading dimensions.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[bias.0]);
        let (_, c) = split_last(&na.shape);
        if nb.value.len() != c {
            return Err(Error::dim("add_row", &na.shape, &nb.shape));
        }
        let value = na
            .value
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(nb.value.iter()).map(|(x, y)| x + y))
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a.0, bias.0]);
        Ok(self.push(shape, value, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map_op(a, |x| x * c, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(Error::dim("matmul", &na.shape, &nb.shape));
        }
        let (r, k, c) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; r * c];
        mm_acc(&na.value, &nb.value, &mut out, r, k, c);
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![r, c], out, Op::MatMul(a.0, b.0), rg))
    }

    /// Batched product `[B,R,K] · [B,K,C] -> [B,R,C]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 3
            || nb.shape.len() != 3
            || na.shape[0] != nb.shape[0]
            || na.shape[2] != nb.shape[1]
        {
            return Err(Error::dim("bmm", &na.shape, &nb.shape));
        }
        let (bs, r, k, c) = (na.shape[0], na.shape[1], na.shape[2], nb.shape[2]);
        let mut out = vec![0.0; bs * r * c];
        for i in 0..bs {
            mm_acc(
                &na.value[i * r * k..(i + 1) * r * k],
                &nb.value[i * k * c..(i + 1) * k * c],
                &mut out[i * r * c..(i + 1) * r * c],
                r,
                k,
                c,
            );
        }
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(vec![bs, r, c], out, Op::BatchMatMul(a.0, b.0), rg))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let n = &self.nodes[a.0];
        let (batch, r, c) = match n.shape[..] {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => return Err(Error::dim("transpose", &n.shape, &[])),
        };
        let mut out = vec![0.0; n.value.len()];
        transpose_into(&n.value, &mut out, batch, r, c);
        let mut shape = n.shape.clone();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let rg = n.requires_grad;
        Ok(self.push(shape, out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::dim("reshape", &n.shape, shape));
        }
        let value = n.value.to_vec();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a.0), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a.0))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map_op(a, |x| if x > 0.0 { x } else { x.exp_m1() }, Op::Elu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_op(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map_op(a, f64::abs, Op::Abs(a.0))
    }

    /// Clamp to `[0, 1]`; gradient is zero outside the interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        self.map_op(a, |x| x.clamp(0.0, 1.0), Op::Clamp01(a.0))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.map_op(a, |x| x.powf(p), Op::Powf(a.0, p))
    }

    /// `max(a, lo)` elementwise; gradient is zero where the floor is active.
    pub fn floor_at(&mut self, a: Var, lo: f64) -> Var {
        self.map_op(a, |x| x.max(lo), Op::FloorAt(a.0, lo))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (_, c) = split_last(&n.shape);
        let mut out = n.value.to_vec();
        for row in out.chunks_mut(c.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, Op::SoftmaxRows(a.0), rg)
    }

    /// Euclidean norm over the last axis; a 1-D input yields shape `[1]`.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (rows, c) = split_last(&n.shape);
        let out: Vec<f64> = n
            .value
            .chunks(c.max(1))
            .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let shape = if n.shape.len() <= 1 {
            vec![1]
        } else {
            n.shape[..n.shape.len() - 1].to_vec()
        };
        debug_assert_eq!(out.len(), rows.max(1));
        let rg = n.requires_grad;
        self.push(shape, out, Op::L2Norm(a.0), rg)
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let rows = self.nodes[first.0].shape[0];
        let mut cols = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[0] != rows {
                return Err(Error::dim("concat", &self.nodes[first.0].shape, s));
            }
            cols.push(s[1]);
        }
        let total: usize = cols.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, &c) in parts.iter().zip(&cols) {
                out.extend_from_slice(&self.nodes[p.0].value[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(vec![rows, total], out, Op::Concat(ids), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum();
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().sum::<f64>() / n.value.len() as f64;
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], Op::Mean(a.0), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let (_, c) = split_last(&n.shape);
        let out = n.value.chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let shape = if n.shape.len() <= 1 {
            vec![1]
        } else {
            n.shape[..n.shape.len() - 1].to_vec()
        };
        let rg = n.requires_grad;
        self.push(shape, out, Op::SumLast(a.0), rg)
    }

    /// Picks flat elements of `a` into a tensor of `shape`.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[a.0];
        if shape.iter().product::<usize>() != indices.len() {
            return Err(Error::dim("gather", shape, &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n.value.len()) {
            return Err(Error::dim("gather", &n.shape, &[bad]));
        }
        let out = indices.iter().map(|&i| n.value[i]).collect();
        let rg = n.requires_grad;
        Ok(self.push(shape.to_vec(), out, Op::Gather(a.0, indices), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let y = &node.value;
        let wants = |i: usize| nodes[i].requires_grad;
        // Accumulator for parent `i`, created lazily.
        fn acc<'g>(grads: &'g mut [Option<Vec<f64>>], i: usize, len: usize) -> &'g mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }
        let elementwise = |grads: &mut [Option<Vec<f64>>], i: usize, f: &dyn Fn(usize) -> f64| {
            let x = &nodes[i].value;
            let dst = acc(grads, i, x.len());
            for (j, d) in dst.iter_mut().enumerate() {
                *d += g[j] * f(j);
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for p in [a, b] {
                    if wants(p) {
                        elementwise(grads, p, &|_| 1.0);
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    elementwise(grads, a, &|_| 1.0);
                }
                if wants(b) {
                    elementwise(grads, b, &|_| -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                if wants(a) {
                    elementwise(grads, a, &|j| vb[j]);
                }
                if wants(b) {
                    elementwise(grads, b, &|j| va[j]);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (&nodes[a].value, &nodes[b].value);
                if wants(a) {
                    elementwise(grads, a, &|j| 1.0 / vb[j]);
                }
                if wants(b) {
                    elementwise(grads, b, &|j| -va[j] / (vb[j] * vb[j]));
                }
            }
            Op::AddRow(a, bias) => {
                if wants(a) {
                    elementwise(grads, a, &|_| 1.0);
                }
                if wants(bias) {
                    let c = nodes[bias].value.len();
                    let dst = acc(grads, bias, c);
                    for row in g.chunks(c.max(1)) {
                        for (d, v) in dst.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(a) {
                    elementwise(grads, a, &|_| c);
                }
            }
            Op::MatMul(a, b) => {
                let (r, k) = (nodes[a].shape[0], nodes[a].shape[1]);
                let c = nodes[b].shape[1];
                if wants(a) {
                    let dst = acc(grads, a, r * k);
                    mm_bt_acc(g, &nodes[b].value, dst, r, k, c);
                }
                if wants(b) {
                    let dst = acc(grads, b, k * c);
                    mm_at_acc(&nodes[a].value, g, dst, r, k, c);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (bs, r, k) = (nodes[a].shape[0], nodes[a].shape[1], nodes[a].shape[2]);
                let c = nodes[b].shape[2];
                if wants(a) {
                    let vb = &nodes[b].value;
                    let dst = acc(grads, a, bs * r * k);
                    for i in 0..bs {
                        mm_bt_acc(
                            &g[i * r * c..(i + 1) * r * c],
                            &vb[i * k * c..(i + 1) * k * c],
                            &mut dst[i * r * k..(i + 1) * r * k],
                            r,
                            k,
                            c,
                        );
                    }
                }
                if wants(b) {
                    let va = &nodes[a].value;
                    let dst = acc(grads, b, bs * k * c);
                    for i in 0..bs {
                        mm_at_acc(
                            &va[i * r * k..(i + 1) * r * k],
                            &g[i * r * c..(i + 1) * r * c],
                            &mut dst[i * k * c..(i + 1) * k * c],
                            r,
                            k,
                            c,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    // node shape is the transposed one: [.., c, r]
                    let s = &node.shape;
                    let (batch, c, r) = match s[..] {
                        [c, r] => (1, c, r),
                        [b, c, r] => (b, c, r),
                        _ => unreachable!(),
                    };
                    let mut back = vec![0.0; g.len()];
                    transpose_into(g, &mut back, batch, c, r);
                    let dst = acc(grads, a, back.len());
                    for (d, v) in dst.iter_mut().zip(&back) {
                        *d += v;
                    }
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    elementwise(grads, a, &|_| 1.0);
                }
            }
            Op::Relu(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| if x[j] > 0.0 { 1.0 } else { 0.0 });
                }
            }
            Op::Elu(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| if x[j] > 0.0 { 1.0 } else { y[j] + 1.0 });
                }
            }
            Op::Sigmoid(a) => {
                if wants(a) {
                    elementwise(grads, a, &|j| y[j] * (1.0 - y[j]));
                }
            }
            Op::Abs(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| {
                        if x[j] > 0.0 {
                            1.0
                        } else if x[j] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::Clamp01(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| {
                        if (0.0..=1.0).contains(&x[j]) {
                            1.0
                        } else {
                            0.0
                        }
                    });
                }
            }
            Op::Powf(a, p) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| p * x[j].powf(p - 1.0));
                }
            }
            Op::FloorAt(a, lo) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    elementwise(grads, a, &|j| if x[j] > lo { 1.0 } else { 0.0 });
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(a) {
                    let (_, c) = split_last(&node.shape);
                    let dst = acc(grads, a, y.len());
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dst.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::L2Norm(a) => {
                if wants(a) {
                    let x = &nodes[a].value;
                    let (_, c) = split_last(&nodes[a].shape);
                    let dst = acc(grads, a, x.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        let r = j / c.max(1);
                        if y[r] > 0.0 {
                            *d += g[r] * x[j] / y[r];
                        }
                    }
                }
            }
            Op::Concat(ref ids) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in ids {
                    let c = nodes[p].shape[1];
                    if wants(p) {
                        let dst = acc(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                dst[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                if wants(a) {
                    let dst = acc(grads, a, nodes[a].value.len());
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if wants(a) {
                    let n = nodes[a].value.len() as f64;
                    let dst = acc(grads, a, nodes[a].value.len());
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::SumLast(a) => {
                if wants(a) {
                    let (_, c) = split_last(&nodes[a].shape);
                    let dst = acc(grads, a, nodes[a].value.len());
                    for (j, d) in dst.iter_mut().enumerate() {
                        *d += g[j / c.max(1)];
                    }
                }
            }
            Op::Gather(a, ref idx) => {
                if wants(a) {
                    let dst = acc(grads, a, nodes[a].value.len());
                    for (gv, &i) in g.iter().zip(idx) {
                        dst[i] += gv;
                    }
                }
            }
        }
    }
}

/// Operation selector for [`tensor_arith`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArithKind {
    Add,
    Sub,
    Mul,
    MatMul,
    Relu,
    Sigmoid,
    SoftmaxRows,
    L2Norm,
    Concat,
    Scale(f64),
    Clamp01,
}

/// Uniform entry point over the basic operations. Unary kinds ignore `b`.
pub fn tensor_arith(g: &mut Graph<'_>, kind: ArithKind, a: Var, b: Option<Var>) -> Result<Var> {
    let need_b = |name: &'static str| {
        b.ok_or_else(|| Error::Contract(format!("{name} needs a second operand")))
    };
    match kind {
        ArithKind::Add => g.add(a, need_b("add")?),
        ArithKind::Sub => g.sub(a, need_b("sub")?),
        ArithKind::Mul => g.mul(a, need_b("mul")?),
        ArithKind::MatMul => g.matmul(a, need_b("matmul")?),
        ArithKind::Concat => g.concat(&[a, need_b("concat")?]),
        ArithKind::Relu => Ok(g.relu(a)),
        ArithKind::Sigmoid => Ok(g.sigmoid(a)),
        ArithKind::SoftmaxRows => Ok(g.softmax_rows(a)),
        ArithKind::L2Norm => Ok(g.l2_norm(a)),
        ArithKind::Scale(c) => Ok(g.scale(a, c)),
        ArithKind::Clamp01 => Ok(g.clamp01(a)),
    }
}
