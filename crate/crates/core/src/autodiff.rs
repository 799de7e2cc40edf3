//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Parameters are registered
//! with [`Tape::param`] in a fixed order, and [`Tape::backward`] returns
//! one flat [`GradientVector`] laid out in that registry order.
//!
//! ```
//! use stenograph::autodiff::Tape;
//! use stenograph::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let theta = tape.param(Tensor::scalar(3.0));
//! let loss = tape.mul(theta, theta).unwrap();
//! let grad = tape.backward(loss).unwrap();
//! assert_eq!(grad.as_slice(), &[6.0]);
//! ```
//!
//! Batched convolution and dense kernels split work across samples with
//! rayon; per-sample partial gradients are always reduced in sample order,
//! so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param,
    Conv1d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    GlobalAvgPool(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, f64),
    Mean(Var),
    Sum(Var),
    Column {
        input: Var,
        index: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Flat gradient in parameter-registry order.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Output length of a 1-D cross-correlation.
pub fn conv1d_output_len(
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv1d stride must be >= 1".into()));
    }
    if kernel == 0 || kernel > len + 2 * padding {
        return Err(Error::Shape(format!(
            "conv1d kernel {kernel} does not fit length {len} with padding {padding}"
        )));
    }
    Ok((len + 2 * padding - kernel) / stride + 1)
}

/// Record of primitive operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Registered parameters in registry order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| self.nodes[p.0].value.len())
            .sum()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Signs of every relu input recorded so far (`true` where input > 0).
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            Op::Conv1d { input, kernel, .. } => self.rg(*input) || self.rg(*kernel),
            Op::ChannelBias { input, bias } => self.rg(*input) || self.rg(*bias),
            Op::Dense {
                input,
                weight,
                bias,
            } => self.rg(*input) || self.rg(*weight) || self.rg(*bias),
            Op::Relu(x)
            | Op::Sigmoid(x)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::GlobalAvgPool(x)
            | Op::MulScalar(x, _)
            | Op::Mean(x)
            | Op::Sum(x) => self.rg(*x),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => self.rg(*a) || self.rg(*b),
            Op::Column { input, .. } | Op::SliceRows { input, .. } => self.rg(*input),
            Op::BceWithLogits { logits, .. } => self.rg(*logits),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable parameter; registry order defines gradient layout.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push(v);
        v
    }

    /// Cross-correlation of `[C_in, L]` or `[B, C_in, L]` input with
    /// `[C_out, C_in, K]` kernels.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(kernel);
        let geom = ConvGeom::new(x.shape(), w.shape(), stride, padding)?;
        let mut out = vec![0.0; geom.batch * geom.c_out * geom.l_out];
        let (xd, wd) = (x.data(), w.data());
        out.par_chunks_mut(geom.c_out * geom.l_out)
            .enumerate()
            .for_each_init(
                || vec![0.0; geom.cols_len()],
                |cols, (b, out_b)| {
                    geom.im2col(&xd[b * geom.in_stride()..(b + 1) * geom.in_stride()], cols);
                    geom.forward_sample(wd, cols, out_b);
                },
            );
        let shape = if x.rank() == 2 {
            vec![geom.c_out, geom.l_out]
        } else {
            vec![geom.batch, geom.c_out, geom.l_out]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                stride,
                padding,
            },
            "conv1d",
        )
    }

    /// Adds a per-channel bias `[C]` to `[C, L]` or `[B, C, L]`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let b = self.value(bias);
        let (c, l) = channel_dims(x.shape())?;
        if b.shape() != [c] {
            return Err(Error::Shape(format!(
                "channel bias {:?} does not match {c} channels",
                b.shape()
            )));
        }
        let mut out = x.data().to_vec();
        for (row, chunk) in out.chunks_mut(l).enumerate() {
            let bias = b.data()[row % c];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        self.push(value, Op::ChannelBias { input, bias }, "channel_bias")
    }

    /// Affine map `x W^T + b` for `x` of shape `[in]` or `[B, in]`,
    /// `W` of shape `[out, in]`, `b` of shape `[out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (batch, n_in) = rows_cols(x.shape())?;
        if w.rank() != 2 || w.shape()[1] != n_in {
            return Err(Error::Shape(format!(
                "dense weight {:?} incompatible with input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        let n_out = w.shape()[0];
        if b.shape() != [n_out] {
            return Err(Error::Shape(format!(
                "dense bias {:?} incompatible with {n_out} outputs",
                b.shape()
            )));
        }
        let mut out = vec![0.0; batch * n_out];
        for (r, out_row) in out.chunks_mut(n_out).enumerate() {
            let x_row = &x.data()[r * n_in..(r + 1) * n_in];
            for (o, y) in out_row.iter_mut().enumerate() {
                let w_row = &w.data()[o * n_in..(o + 1) * n_in];
                *y = b.data()[o] + dot(w_row, x_row);
            }
        }
        let shape = if x.rank() == 1 {
            vec![n_out]
        } else {
            vec![batch, n_out]
        };
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
            },
            "dense",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| if a > 0.0 { a } else { 0.0 });
        self.push(v, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x), "sigmoid")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|&a| a <= 0.0) {
            return Err(Error::NonFinite("log of non-positive value".into()));
        }
        let v = t.map(f64::ln);
        self.push(v, Op::Log(x), "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x), "exp")
    }

    /// Mean over the last axis of `[C, L]` or `[B, C, L]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, l) = channel_dims(t.shape())?;
        let data: Vec<f64> = t
            .data()
            .chunks(l)
            .map(|row| row.iter().sum::<f64>() / l as f64)
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{name}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * c);
        self.push(v, Op::MulScalar(x, c), "mul_scalar")
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::Shape("mean of empty tensor".into()));
        }
        let v = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(v, Op::Sum(x), "sum")
    }

    /// Column `index` of a `[B, T]` tensor, as `[B]`.
    pub fn column(&mut self, input: Var, index: usize) -> Result<Var> {
        let t = self.value(input);
        let (rows, cols) = rows_cols(t.shape())?;
        if t.rank() != 2 || index >= cols {
            return Err(Error::Shape(format!(
                "column {index} of tensor {:?}",
                t.shape()
            )));
        }
        let data = (0..rows).map(|r| t.data()[r * cols + index]).collect();
        self.push(
            Tensor::from_vec(data),
            Op::Column { input, index },
            "column",
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(input);
        if t.rank() == 0 || start >= end || end > t.shape()[0] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of tensor {:?}",
                t.shape()
            )));
        }
        let row: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * row..end * row].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::SliceRows { input, start }, "slice_rows")
    }

    /// Elementwise binary cross-entropy on logits, computed in log space:
    /// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(Error::Shape(format!(
                "bce targets {:?} vs logits {:?}",
                targets.shape(),
                z.shape()
            )));
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::InvalidArgument(format!(
                "binary target expected, got {bad}"
            )));
        }
        let data = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| bce_logit(z, y))
            .collect();
        let value = Tensor::new(z.shape().to_vec(), data)?;
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            "bce_with_logits",
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients start from zero on
    /// every call, so repeated calls are independent.
    pub fn backward(&self, loss: Var) -> Result<GradientVector> {
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Param) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
        }

        let mut flat = Vec::with_capacity(self.parameter_count());
        for p in &self.params {
            match grads.get(p.0).and_then(|g| g.as_ref()) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat_n(0.0, self.nodes[p.0].value.len())),
            }
        }
        Ok(GradientVector(flat))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, contribution: Tensor) {
        if !self.rg(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv1d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let geom = ConvGeom::new(x.shape(), w.shape(), *stride, *padding)?;
                let need_dx = self.rg(*input);
                let need_dw = self.rg(*kernel);
                let mut dx = vec![0.0; if need_dx { x.len() } else { 0 }];
                let (xd, wd, gd) = (x.data(), w.data(), g.data());
                let per_sample = |b: usize, dx_b: Option<&mut [f64]>| -> Vec<f64> {
                    let mut cols = vec![0.0; geom.cols_len()];
                    let g_b = &gd[b * geom.c_out * geom.l_out..(b + 1) * geom.c_out * geom.l_out];
                    let mut dw_b = Vec::new();
                    if need_dw {
                        geom.im2col(
                            &xd[b * geom.in_stride()..(b + 1) * geom.in_stride()],
                            &mut cols,
                        );
                        dw_b = vec![0.0; wd.len()];
                        geom.weight_grad(g_b, &cols, &mut dw_b);
                    }
                    if let Some(dx_b) = dx_b {
                        geom.cols_grad(wd, g_b, &mut cols);
                        geom.col2im(&cols, dx_b);
                    }
                    dw_b
                };
                let partial: Vec<Vec<f64>> = if need_dx {
                    dx.par_chunks_mut(geom.in_stride())
                        .enumerate()
                        .map(|(b, dx_b)| per_sample(b, Some(dx_b)))
                        .collect()
                } else {
                    (0..geom.batch)
                        .into_par_iter()
                        .map(|b| per_sample(b, None))
                        .collect()
                };
                if need_dw {
                    let mut dw = vec![0.0; wd.len()];
                    for p in &partial {
                        for (a, b) in dw.iter_mut().zip(p) {
                            *a += b;
                        }
                    }
                    self.accumulate(grads, *kernel, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if need_dx {
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
            }
            Op::ChannelBias { input, bias } => {
                let b = self.value(*bias);
                let (c, l) = channel_dims(out.shape())?;
                let mut db = vec![0.0; c];
                for (row, chunk) in g.data().chunks(l).enumerate() {
                    db[row % c] += chunk.iter().sum::<f64>();
                }
                self.accumulate(grads, *bias, Tensor::new(b.shape().to_vec(), db)?);
                self.accumulate(grads, *input, g.clone());
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (batch, n_in) = rows_cols(x.shape())?;
                let n_out = w.shape()[0];
                if self.rg(*weight) || self.rg(*bias) {
                    let mut dw = vec![0.0; w.len()];
                    let mut db = vec![0.0; n_out];
                    for r in 0..batch {
                        let x_row = &x.data()[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g.data()[r * n_out + o];
                            db[o] += go;
                            axpy(go, x_row, &mut dw[o * n_in..(o + 1) * n_in]);
                        }
                    }
                    self.accumulate(grads, *weight, Tensor::new(w.shape().to_vec(), dw)?);
                    self.accumulate(grads, *bias, Tensor::new(vec![n_out], db)?);
                }
                if self.rg(*input) {
                    let mut dx = vec![0.0; x.len()];
                    for r in 0..batch {
                        let dx_row = &mut dx[r * n_in..(r + 1) * n_in];
                        for o in 0..n_out {
                            let go = g.data()[r * n_out + o];
                            axpy(go, &w.data()[o * n_in..(o + 1) * n_in], dx_row);
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(x.shape().to_vec(), dx)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&s, &gi)| gi * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&a, &gi)| gi / a)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Exp(x) => {
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&e, &gi)| gi * e)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), data)?);
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (_, l) = channel_dims(xv.shape())?;
                let mut data = Vec::with_capacity(xv.len());
                for &gi in g.data() {
                    data.extend(std::iter::repeat_n(gi / l as f64, l));
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = g
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(gi, y)| gi * y)
                    .collect();
                let db = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(gi, x)| gi * x)
                    .collect();
                self.accumulate(grads, *a, Tensor::new(va.shape().to_vec(), da)?);
                self.accumulate(grads, *b, Tensor::new(vb.shape().to_vec(), db)?);
            }
            Op::MulScalar(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gi = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), gi));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, Tensor::filled(xv.shape(), g.data()[0]));
            }
            Op::Column { input, index } => {
                let xv = self.value(*input);
                let cols = xv.shape()[1];
                let mut data = vec![0.0; xv.len()];
                for (r, &gi) in g.data().iter().enumerate() {
                    data[r * cols + index] = gi;
                }
                self.accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::SliceRows { input, start } => {
                let xv = self.value(*input);
                let row: usize = xv.shape()[1..].iter().product();
                let mut data = vec![0.0; xv.len()];
                data[start * row..start * row + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let data = z
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(g.data())
                    .map(|((&zi, &y), &gi)| gi * (sigmoid(zi) - y))
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(z.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a single logit.
pub fn bce_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn channel_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [c, l] | [_, c, l] => Ok((*c, *l)),
        _ => Err(Error::Shape(format!(
            "expected [C, L] or [B, C, L], got {shape:?}"
        ))),
    }
}

fn rows_cols(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("expected rank 1 or 2, got {shape:?}"))),
    }
}

/// Geometry of one batched convolution, with im2col helpers.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    l_out: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (batch, c_in, len) = match x {
            [c, l] => (1, *c, *l),
            [b, c, l] => (*b, *c, *l),
            _ => {
                return Err(Error::Shape(format!(
                    "conv1d input must be [C, L] or [B, C, L], got {x:?}"
                )))
            }
        };
        let [c_out, wc_in, k] = *w else {
            return Err(Error::Shape(format!(
                "conv1d kernel must be [C_out, C_in, K], got {w:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "conv1d kernel expects {wc_in} input channels, input has {c_in}"
            )));
        }
        let l_out = conv1d_output_len(len, k, stride, padding)?;
        Ok(Self {
            batch,
            c_in,
            len,
            c_out,
            k,
            stride,
            padding,
            l_out,
        })
    }

    fn in_stride(&self) -> usize {
        self.c_in * self.len
    }

    fn cols_len(&self) -> usize {
        self.c_in * self.k * self.l_out
    }

    /// Valid output range `o` for tap `k`: `0 <= o*stride + k - padding < len`.
    fn valid_range(&self, k: usize) -> (usize, usize) {
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi = if self.len + self.padding > k {
            ((self.len + self.padding - k - 1) / self.stride + 1).min(self.l_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        for ci in 0..self.c_in {
            let x_row = &x[ci * self.len..(ci + 1) * self.len];
            for k in 0..self.k {
                let row =
                    &mut cols[(ci * self.k + k) * self.l_out..(ci * self.k + k + 1) * self.l_out];
                let (lo, hi) = self.valid_range(k);
                row[..lo].iter_mut().for_each(|v| *v = 0.0);
                row[hi..].iter_mut().for_each(|v| *v = 0.0);
                for (o, slot) in row.iter_mut().enumerate().take(hi).skip(lo) {
                    *slot = x_row[o * self.stride + k - self.padding];
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        for ci in 0..self.c_in {
            let dx_row = &mut dx[ci * self.len..(ci + 1) * self.len];
            for k in 0..self.k {
                let row = &cols[(ci * self.k + k) * self.l_out..(ci * self.k + k + 1) * self.l_out];
                let (lo, hi) = self.valid_range(k);
                for (o, &v) in row.iter().enumerate().take(hi).skip(lo) {
                    dx_row[o * self.stride + k - self.padding] += v;
                }
            }
        }
    }

    /// `out[c_out, l_out] = W[c_out, ck] * cols[ck, l_out]`.
    fn forward_sample(&self, w: &[f64], cols: &[f64], out: &mut [f64]) {
        let ck = self.c_in * self.k;
        gemm(
            (self.c_out, ck, self.l_out),
            (w, ck, 1),
            (cols, self.l_out, 1),
            0.0,
            (out, self.l_out),
        );
    }

    /// `dW[c_out, ck] += g[c_out, l_out] * cols^T`.
    fn weight_grad(&self, g: &[f64], cols: &[f64], dw: &mut [f64]) {
        let ck = self.c_in * self.k;
        gemm(
            (self.c_out, self.l_out, ck),
            (g, self.l_out, 1),
            (cols, 1, self.l_out),
            1.0,
            (dw, ck),
        );
    }

    /// `dcols[ck, l_out] = W^T * g`.
    fn cols_grad(&self, w: &[f64], g: &[f64], dcols: &mut [f64]) {
        let ck = self.c_in * self.k;
        gemm(
            (ck, self.c_out, self.l_out),
            (w, 1, ck),
            (g, self.l_out, 1),
            0.0,
            (dcols, self.l_out),
        );
    }
}

/// Row-major `C = A B + beta C` for `(m, k, n)`; A and B carry their own
/// (row, column) strides so transposes are free.
fn gemm(
    (m, k, n): (usize, usize, usize),
    (a, rsa, csa): (&[f64], usize, usize),
    (b, rsb, csb): (&[f64], usize, usize),
    beta: f64,
    (c, rsc): (&mut [f64], usize),
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m == 0 || n == 0 || (m - 1) * rsc + n <= c.len());
    // SAFETY: the asserts above keep every strided access inside its slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// Per-parameter outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param_index: usize,
    pub max_rel_error: f64,
    /// Elements whose central difference crossed a relu kink.
    pub kink_elements: usize,
    pub checked_elements: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub kink_elements: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Finite-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
pub const GRAD_CHECK_ABS_FLOOR: f64 = 1e-6;

/// Compares reverse-mode gradients of `build` against central differences.
///
/// `build` receives a fresh tape with `params` already registered (in order)
/// and must return a scalar loss. Elements whose `±h` evaluations change
/// the sign of any relu input are reported as kinks and excluded from the
/// pass/fail decision.
pub fn grad_check<F>(params: &[Tensor], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, loss))
    };
    let (tape, loss) = eval(params)?;
    let analytic = tape.backward(loss)?;

    let h = GRAD_CHECK_STEP;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    let mut offset = 0;
    for p in 0..params.len() {
        let mut check = ParamCheck {
            param_index: p,
            max_rel_error: 0.0,
            kink_elements: 0,
            checked_elements: 0,
        };
        for e in 0..params[p].len() {
            let base = params[p].data()[e];
            work[p].data_mut()[e] = base + h;
            let (tp, lp) = eval(&work)?;
            work[p].data_mut()[e] = base - h;
            let (tm, lm) = eval(&work)?;
            work[p].data_mut()[e] = base;
            if tp.relu_pattern() != tm.relu_pattern() {
                check.kink_elements += 1;
                continue;
            }
            let numeric = (tp.value(lp).item()? - tm.value(lm).item()?) / (2.0 * h);
            let a = analytic.as_slice()[offset + e];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_ABS_FLOOR);
            check.max_rel_error = check.max_rel_error.max((a - numeric).abs() / denom);
            check.checked_elements += 1;
        }
        offset += params[p].len();
        checks.push(check);
    }
    let max_rel_error = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let kink_elements = checks.iter().map(|c| c.kink_elements).sum();
    Ok(GradCheckReport {
        params: checks,
        max_rel_error,
        kink_elements,
        tolerance,
        passed: max_rel_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 1], &[1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_difference_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let k = tape.constant(t(&[1, 1, 3], &[1.0, 0.0, -1.0]));
        let y = tape.conv1d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1]);
        assert_eq!(tape.value(y).data(), &[-2.0]);
    }

    #[test]
    fn conv_output_length_formula() {
        assert_eq!(conv1d_output_len(10, 3, 2, 1).unwrap(), 5);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 10]));
        let k = tape.constant(Tensor::zeros(&[4, 2, 3]));
        let y = tape.conv1d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 5]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let wrong_channels = tape.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(
            tape.conv1d(x, wrong_channels, 1, 0),
            Err(Error::Shape(_))
        ));
        let too_long = tape.constant(Tensor::zeros(&[1, 2, 9]));
        assert!(matches!(
            tape.conv1d(x, too_long, 1, 0),
            Err(Error::Shape(_))
        ));
        let k = tape.constant(Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(tape.conv1d(x, k, 0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn scalar_primitives() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![-3.0, 0.0, 3.0]));
        let r = tape.relu(z).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.5);
        let zero = tape.constant(Tensor::from_vec(vec![0.0]));
        let l = tape
            .bce_with_logits(zero, &Tensor::from_vec(vec![1.0]))
            .unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        for &(z, y) in &[(50.0, 1.0), (-50.0, 0.0), (50.0, 0.0), (-50.0, 1.0)] {
            let v = bce_logit(z, y);
            assert!(v.is_finite());
            if (z > 0.0) == (y == 1.0) {
                assert!(v <= 1e-20, "bce({z},{y}) = {v}");
            } else {
                assert!((v - 50.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_rejects_non_binary_targets() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![0.0]));
        let err = tape.bce_with_logits(z, &Tensor::from_vec(vec![0.5]));
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let th = tape.param(Tensor::scalar(3.0));
        let loss = tape.mul(th, th).unwrap();
        assert_eq!(tape.backward(loss).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let th = tape.param(Tensor::scalar(0.0));
        let loss = tape.sigmoid(th).unwrap();
        assert_eq!(tape.backward(loss).unwrap().as_slice(), &[0.25]);
    }

    #[test]
    fn backward_is_idempotent() {
        let mut tape = Tape::new();
        let th = tape.param(Tensor::from_vec(vec![0.3, -1.2]));
        let e = tape.exp(th).unwrap();
        let loss = tape.sum(e).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let th = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(th), Err(Error::Shape(_))));
    }

    #[test]
    fn unreached_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(2.0));
        let _b = tape.param(Tensor::from_vec(vec![1.0, 1.0]));
        let loss = tape.mul_scalar(a, 4.0).unwrap();
        assert_eq!(tape.backward(loss).unwrap().as_slice(), &[4.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::NonFinite(_))));
        let zero = tape.constant(Tensor::scalar(0.0));
        assert!(tape.log(zero).is_err());
    }

    #[test]
    fn grad_check_dense_identity() {
        let w = t(&[1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        let report = grad_check(
            &[w, b],
            |tape, p| {
                let x = tape.constant(t(&[1], &[0.7]));
                let y = tape.dense(x, p[0], p[1])?;
                let y2 = tape.mul(y, y)?;
                tape.sum(y2)
            },
            1e-7,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.max_rel_error <= 1e-7);
    }

    #[test]
    fn grad_check_flags_relu_kink() {
        let report = grad_check(
            &[Tensor::from_vec(vec![0.0, 1.0])],
            |tape, p| {
                let r = tape.relu(p[0])?;
                tape.sum(r)
            },
            1e-7,
        )
        .unwrap();
        assert_eq!(report.kink_elements, 1);
        assert_eq!(report.params[0].checked_elements, 1);
        assert!(report.passed);
    }
}
