//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only record of primitive applications. Every node
//! refers only to nodes created before it, so the record is already in
//! topological order and the backward pass is a single reverse sweep.
//!
//! ```
//! use rlfat_core::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let x = g.param(Tensor::from_f64(&[3], &[1.0, -2.0, 3.0]).unwrap());
//! let sq = g.pow(x, 2.0).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use super::kernels::{self, ConvGeometry};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Attributes travel inside the variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    /// Elementwise (Hadamard) product of equal-shape tensors.
    Mul,
    Scale(f64),
    AddScalar(f64),
    /// `[m, k] x [k, n]`.
    MatMul,
    /// NCHW input, OIHW weights.
    Conv2d { stride: usize, padding: usize },
    /// Adds a `[C]` bias along axis 1 of a `[N, C, ...]` tensor.
    BiasAdd,
    Relu,
    Tanh,
    MaxPool { size: usize },
    /// `[N, C, H, W] -> [N, C]` spatial mean.
    GlobalAvgPool,
    Mean,
    Sum,
    Sign,
    Clamp { lo: f64, hi: f64 },
    Pow(f64),
    LogSoftmax,
    Softmax,
    /// `out[i] = in[indices[i]]` over flattened storage.
    Gather { indices: Vec<usize>, shape: Vec<usize> },
    Reshape(Vec<usize>),
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "multiply",
            Primitive::Scale(_) => "scale",
            Primitive::AddScalar(_) => "add_scalar",
            Primitive::MatMul => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::BiasAdd => "bias_add",
            Primitive::Relu => "relu",
            Primitive::Tanh => "tanh",
            Primitive::MaxPool { .. } => "max_pool",
            Primitive::GlobalAvgPool => "global_avg_pool",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::Sign => "sign",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Pow(_) => "pow",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Softmax => "softmax",
            Primitive::Gather { .. } => "gather",
            Primitive::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::MatMul
            | Primitive::Conv2d { .. }
            | Primitive::BiasAdd => 2,
            _ => 1,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<Primitive>,
    parents: Vec<Var>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    /// Argmax indices saved by max pooling.
    saved: Vec<usize>,
}

/// Computation record for one forward/backward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            parents: Vec::new(),
            requires_grad,
            grad: None,
            saved: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Applies `prim` to `inputs`, records it, and returns the output node.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != prim.arity() {
            return Err(Error::invalid(format!(
                "{} takes {} inputs, got {}",
                prim.name(),
                prim.arity(),
                inputs.len()
            )));
        }
        let (value, saved) = self.forward(&prim, inputs)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(prim.name()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(prim),
            parents: inputs.to_vec(),
            requires_grad,
            grad: None,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn forward(&self, prim: &Primitive, inputs: &[Var]) -> Result<(Tensor<T>, Vec<usize>)> {
        let a = &self.nodes[inputs[0].0].value;
        let b = inputs.get(1).map(|v| &self.nodes[v.0].value);
        let name = prim.name();
        let same_shape = |b: &Tensor<T>| -> Result<()> {
            if a.shape() != b.shape() {
                return Err(Error::shape(name, format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            Ok(())
        };
        let out = match prim {
            Primitive::Add => {
                let b = b.unwrap();
                same_shape(b)?;
                a.zip_map(b, |x, y| x + y)?
            }
            Primitive::Sub => {
                let b = b.unwrap();
                same_shape(b)?;
                a.zip_map(b, |x, y| x - y)?
            }
            Primitive::Mul => {
                let b = b.unwrap();
                same_shape(b)?;
                a.zip_map(b, |x, y| x * y)?
            }
            Primitive::Scale(s) => {
                let s = T::lit(*s);
                a.map(|x| x * s)
            }
            Primitive::AddScalar(s) => {
                let s = T::lit(*s);
                a.map(|x| x + s)
            }
            Primitive::MatMul => {
                let b = b.unwrap();
                let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
                Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))?
            }
            Primitive::Conv2d { stride, padding } => {
                let w = b.unwrap();
                let geom = ConvGeometry::new(a.shape(), w.shape(), *stride, *padding)
                    .ok_or_else(|| {
                        Error::shape(name, format!("input {:?}, kernel {:?}", a.shape(), w.shape()))
                    })?;
                Tensor::new(geom.out_shape(), kernels::conv2d_forward(a.data(), w.data(), &geom))?
            }
            Primitive::BiasAdd => {
                let bias = b.unwrap();
                let (channels, inner) = bias_dims(a.shape(), bias.shape())?;
                let mut out = a.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    *v = *v + bias.data()[(i / inner) % channels];
                }
                out
            }
            Primitive::Relu => a.map(|x| if x > T::zero() { x } else { T::zero() }),
            Primitive::Tanh => a.map(|x| x.tanh()),
            Primitive::MaxPool { size } => {
                if a.rank() != 4 || *size == 0 || a.shape()[2] < *size || a.shape()[3] < *size {
                    return Err(Error::shape(name, format!("{:?} with window {size}", a.shape())));
                }
                let (vals, arg) = kernels::max_pool(a.data(), a.shape(), *size);
                let s = a.shape();
                let out = Tensor::new(vec![s[0], s[1], s[2] / size, s[3] / size], vals)?;
                return Ok((out, arg));
            }
            Primitive::GlobalAvgPool => {
                if a.rank() != 4 {
                    return Err(Error::shape(name, format!("{:?}", a.shape())));
                }
                let s = a.shape();
                let area = s[2] * s[3];
                let inv = T::lit(1.0 / area as f64);
                let data = a.data().chunks(area).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                Tensor::new(vec![s[0], s[1]], data)?
            }
            Primitive::Mean => {
                let n = T::lit(a.len() as f64);
                Tensor::scalar(a.data().iter().copied().sum::<T>() / n)
            }
            Primitive::Sum => Tensor::scalar(a.data().iter().copied().sum::<T>()),
            Primitive::Sign => a.map(|x| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Primitive::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(Error::invalid(format!("clamp bounds {lo} > {hi}")));
                }
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                a.map(|x| x.max(lo).min(hi))
            }
            Primitive::Pow(p) => {
                let p = T::lit(*p);
                a.map(|x| x.powf(p))
            }
            Primitive::LogSoftmax | Primitive::Softmax => {
                if a.rank() != 2 || a.shape()[1] == 0 {
                    return Err(Error::shape(name, format!("expected [rows, cols], got {:?}", a.shape())));
                }
                let cols = a.shape()[1];
                let data = if matches!(prim, Primitive::LogSoftmax) {
                    kernels::log_softmax_rows(a.data(), cols)
                } else {
                    kernels::softmax_rows(a.data(), cols)
                };
                Tensor::new(a.shape().to_vec(), data)?
            }
            Primitive::Gather { indices, shape } => {
                if shape.iter().product::<usize>() != indices.len() {
                    return Err(Error::shape(name, format!("{} indices for shape {shape:?}", indices.len())));
                }
                if let Some(&bad) = indices.iter().find(|&&i| i >= a.len()) {
                    return Err(Error::shape(name, format!("index {bad} >= {}", a.len())));
                }
                Tensor::new(shape.clone(), indices.iter().map(|&i| a.data()[i]).collect())?
            }
            Primitive::Reshape(shape) => a.clone().reshape(shape)?,
        };
        Ok((out, Vec::new()))
    }

    /// Back-propagates from a scalar `loss`, filling `grad` on every node that
    /// requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let contributions = self.local_grads(idx, op, &upstream)?;
                for (parent, contrib) in node.parents.iter().zip(contributions) {
                    debug_assert!(parent.0 < idx, "computation record out of order");
                    let Some(contrib) = contrib else { continue };
                    match &mut grads[parent.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                                *a = *a + *c;
                            }
                        }
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            self.nodes[idx].grad = Some(upstream);
        }
        Ok(())
    }

    fn local_grads(&self, idx: usize, op: &Primitive, dy: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[idx];
        let need = |k: usize| self.nodes[node.parents[k].0].requires_grad;
        let input = |k: usize| &self.nodes[node.parents[k].0].value;
        let y = &node.value;
        let x = input(0);

        let grads = match op {
            Primitive::Add => vec![need(0).then(|| dy.clone()), need(1).then(|| dy.clone())],
            Primitive::Sub => vec![need(0).then(|| dy.clone()), need(1).then(|| dy.map(|v| -v))],
            Primitive::Mul => {
                let b = input(1);
                vec![
                    need(0).then(|| dy.zip_map(b, |d, bv| d * bv)).transpose()?,
                    need(1).then(|| dy.zip_map(x, |d, av| d * av)).transpose()?,
                ]
            }
            Primitive::Scale(s) => {
                let s = T::lit(*s);
                vec![Some(dy.map(|d| d * s))]
            }
            Primitive::AddScalar(_) | Primitive::Reshape(_) => {
                vec![Some(Tensor::new(x.shape().to_vec(), dy.data().to_vec())?)]
            }
            Primitive::MatMul => {
                let b = input(1);
                let dims = matmul_dims(x.shape(), b.shape())?;
                let (da, db) = kernels::matmul_backward(x.data(), b.data(), dy.data(), dims, need(0), need(1));
                vec![
                    da.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    db.map(|d| Tensor::new(b.shape().to_vec(), d)).transpose()?,
                ]
            }
            Primitive::Conv2d { stride, padding } => {
                let w = input(1);
                let geom = ConvGeometry::new(x.shape(), w.shape(), *stride, *padding)
                    .expect("geometry validated in forward");
                let (dx, dw) = kernels::conv2d_backward(x.data(), w.data(), dy.data(), &geom, need(0), need(1));
                vec![
                    dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
                    dw.map(|d| Tensor::new(w.shape().to_vec(), d)).transpose()?,
                ]
            }
            Primitive::BiasAdd => {
                let bias = input(1);
                let (channels, inner) = bias_dims(x.shape(), bias.shape())?;
                let db = need(1).then(|| {
                    let mut db = Tensor::zeros(bias.shape());
                    for (i, &d) in dy.data().iter().enumerate() {
                        let c = (i / inner) % channels;
                        db.data_mut()[c] = db.data()[c] + d;
                    }
                    db
                });
                vec![need(0).then(|| dy.clone()), db]
            }
            Primitive::Relu => vec![Some(dy.zip_map(x, |d, v| if v > T::zero() { d } else { T::zero() })?)],
            Primitive::Tanh => vec![Some(dy.zip_map(y, |d, t| d * (T::one() - t * t))?)],
            Primitive::MaxPool { .. } => {
                let mut dx = Tensor::zeros(x.shape());
                for (&src, &d) in node.saved.iter().zip(dy.data()) {
                    dx.data_mut()[src] = dx.data()[src] + d;
                }
                vec![Some(dx)]
            }
            Primitive::GlobalAvgPool => {
                let s = x.shape();
                let area = s[2] * s[3];
                let inv = T::lit(1.0 / area as f64);
                vec![Some(Tensor::from_fn(s, |i| dy.data()[i / area] * inv))]
            }
            Primitive::Mean => {
                let g = dy.item() / T::lit(x.len() as f64);
                vec![Some(Tensor::full(x.shape(), g))]
            }
            Primitive::Sum => vec![Some(Tensor::full(x.shape(), dy.item()))],
            Primitive::Sign => vec![Some(Tensor::zeros(x.shape()))],
            Primitive::Clamp { lo, hi } => {
                let (lo, hi) = (T::lit(*lo), T::lit(*hi));
                vec![Some(dy.zip_map(x, |d, v| if v > lo && v < hi { d } else { T::zero() })?)]
            }
            Primitive::Pow(p) => {
                let (p, pm1) = (T::lit(*p), T::lit(*p - 1.0));
                vec![Some(dy.zip_map(x, |d, v| d * p * v.powf(pm1))?)]
            }
            Primitive::LogSoftmax => {
                let cols = x.shape()[1];
                let mut dx = Vec::with_capacity(x.len());
                for (d_row, y_row) in dy.data().chunks(cols).zip(y.data().chunks(cols)) {
                    let total: T = d_row.iter().copied().sum();
                    dx.extend(d_row.iter().zip(y_row).map(|(&d, &ly)| d - ly.exp() * total));
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Primitive::Softmax => {
                let cols = x.shape()[1];
                let mut dx = Vec::with_capacity(x.len());
                for (d_row, y_row) in dy.data().chunks(cols).zip(y.data().chunks(cols)) {
                    let inner: T = d_row.iter().zip(y_row).map(|(&d, &p)| d * p).sum();
                    dx.extend(d_row.iter().zip(y_row).map(|(&d, &p)| p * (d - inner)));
                }
                vec![Some(Tensor::new(x.shape().to_vec(), dx)?)]
            }
            Primitive::Gather { indices, .. } => {
                let mut dx = Tensor::zeros(x.shape());
                for (&src, &d) in indices.iter().zip(dy.data()) {
                    dx.data_mut()[src] = dx.data()[src] + d;
                }
                vec![Some(dx)]
            }
        };
        Ok(grads)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Primitive::AddScalar(s), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, padding }, &[x, w])
    }

    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::BiasAdd, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Tanh, &[x])
    }

    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        self.apply(Primitive::MaxPool { size }, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::GlobalAvgPool, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[x])
    }

    pub fn sign(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sign, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clamp { lo, hi }, &[x])
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var> {
        self.apply(Primitive::Pow(p), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[x])
    }

    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Gather { indices, shape }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape(shape), &[x])
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = vec![v.batch(), v.row_len()];
        self.reshape(x, shape)
    }
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::shape("matmul", format!("{a:?} x {b:?}")));
    }
    Ok((a[0], a[1], b[1]))
}

/// Returns (channel count, elements per channel slice) for a bias along axis 1.
fn bias_dims(x: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    if x.len() < 2 || b.len() != 1 || b[0] != x[1] {
        return Err(Error::shape("bias_add", format!("{x:?} + {b:?}")));
    }
    Ok((x[1], x[2..].iter().product()))
}
