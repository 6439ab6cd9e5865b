//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its output value and
//! whatever the backward pass needs. Nodes are appended in evaluation order,
//! so walking them in reverse is a valid topological order. A fresh graph is
//! built for every forward pass and dropped afterwards.

use super::conv::{col2im, im2col, ConvGeom, Conv1dSpec};
use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Square(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    MaxScalar(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    RowSum(Var),
    ColMean(Var),
    SliceCols { x: Var, start: usize },
    SumHalves(Var),
    BroadcastCols(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, col: Vec<f64> },
    ConvTranspose { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, batch_stats: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zero when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn slice(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

fn matrix_dims(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::Shape(format!("{what} expects a 2-D input, got {shape:?}"))),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = &self.nodes[x.0].value;
        let out = Tensor::new(value.shape().to_vec(), value.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        same_shape(self, a, b, what)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + s)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the input is clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    /// `max(x, floor)` elementwise.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::MaxScalar(x, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// `[B, n] -> [B]`, summing each row.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "row_sum")?;
        let data = self.value(x).data().chunks(cols.max(1)).take(rows).map(|r| r.iter().sum()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows], data)?, Op::RowSum(x), rg))
    }

    /// `[B, n] -> [n]`, averaging over rows.
    pub fn col_mean(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "col_mean")?;
        let mut data = vec![0.0; cols];
        for row in self.value(x).data().chunks(cols.max(1)).take(rows) {
            for (d, v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows.max(1) as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![cols], data)?, Op::ColMean(x), rg))
    }

    /// Columns `start..start + len` of a `[B, n]` input.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "slice_cols")?;
        if start + len > cols {
            return Err(Error::Shape(format!("columns {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, len], data)?, Op::SliceCols { x, start }, rg))
    }

    /// `[B, 2m] -> [B, m]`: `out[:, j] = x[:, j] + x[:, m + j]`.
    pub fn sum_halves(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "sum_halves")?;
        if cols % 2 != 0 {
            return Err(Error::Shape(format!("sum_halves needs an even width, got {cols}")));
        }
        let m = cols / 2;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            data.extend((0..m).map(|j| row[j] + row[m + j]));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, m], data)?, Op::SumHalves(x), rg))
    }

    /// `[B, 1] -> [B, n]` by repetition.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let (rows, cols) = matrix_dims(self.shape(x), "broadcast_cols")?;
        if cols != 1 {
            return Err(Error::Shape(format!("broadcast_cols needs [B, 1], got [{rows}, {cols}]")));
        }
        let data = self.value(x).data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::BroadcastCols(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `y = x W^T + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, fan_in) = matrix_dims(self.shape(x), "linear")?;
        let (fan_out, w_in) = matrix_dims(self.shape(w), "linear weight")?;
        if w_in != fan_in || self.shape(b) != [fan_out] {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            1.0,
            Mat::rows(self.value(x).data(), fan_in),
            Mat::rows_t(self.value(w).data(), fan_in),
            1.0,
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, fan_out], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Cross-correlation of `x: [B, Cin, L]` with `w: [Cout, Cin, K]` plus
    /// bias `b: [Cout]`, zero padded.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: &Conv1dSpec) -> Result<Var> {
        let geom = ConvGeom::forward(spec, self.shape(x))?;
        geom.check_params(
            self.shape(w),
            self.shape(b),
            &[spec.out_channels, spec.in_channels, spec.kernel_size],
            spec.out_channels,
        )?;
        let col = im2col(self.value(x).data(), &geom);
        let n = geom.batch * geom.l_out;
        let mut out2 = vec![0.0; geom.c_out * n];
        gemm(
            geom.c_out,
            geom.c_in * geom.kernel,
            n,
            1.0,
            Mat::rows(self.value(w).data(), geom.c_in * geom.kernel),
            Mat::rows(&col, n),
            0.0,
            &mut out2,
        );
        let out = geom.channel_major_to_batch(&out2, geom.c_out, geom.l_out, Some(self.value(b).data()));
        let rg = self.rg(&[x, w, b]);
        let value = Tensor::new(vec![geom.batch, geom.c_out, geom.l_out], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom, col }, rg))
    }

    /// Transposed convolution: the adjoint of [`Graph::conv1d`] for the same
    /// geometry. `x: [B, Cin, L]`, `w: [Cin, Cout, K]`, `b: [Cout]`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Var, spec: &Conv1dSpec) -> Result<Var> {
        // geometry of the forward convolution this operator is the adjoint of
        let geom = ConvGeom::transposed(spec, self.shape(x))?;
        geom.check_params(
            self.shape(w),
            self.shape(b),
            &[spec.in_channels, spec.out_channels, spec.kernel_size],
            spec.out_channels,
        )?;
        let n = geom.batch * geom.l_out;
        let x2 = geom.batch_to_channel_major(self.value(x).data(), geom.c_out, geom.l_out);
        let rows = geom.c_in * geom.kernel;
        let mut col = vec![0.0; rows * n];
        gemm(
            rows,
            geom.c_out,
            n,
            1.0,
            Mat::rows_t(self.value(w).data(), rows),
            Mat::rows(&x2, n),
            0.0,
            &mut col,
        );
        let mut out = vec![0.0; geom.batch * geom.c_in * geom.l_in];
        col2im(&col, &geom, &mut out);
        let bias = self.value(b).data();
        for (i, chunk) in out.chunks_mut(geom.l_in).enumerate() {
            let c = bias[i % geom.c_in];
            chunk.iter_mut().for_each(|v| *v += c);
        }
        let rg = self.rg(&[x, w, b]);
        let value = Tensor::new(vec![geom.batch, geom.c_in, geom.l_in], out)?;
        Ok(self.push(value, Op::ConvTranspose { x, w, b, geom }, rg))
    }

    /// Batch normalization of `x: [B, C, L]` (or `[B, C]`) with batch
    /// statistics. Returns the output and the statistics used.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (batch, channels, len) = bn_dims(self.shape(x))?;
        if batch < 2 {
            return Err(Error::Shape("batch norm in train mode needs a batch of at least 2".into()));
        }
        check_affine(self, gamma, beta, channels)?;
        let n = (batch * len) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for (i, &v) in xv.iter().enumerate() {
            mean[(i / len) % channels] += v;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / len) % channels;
            var[c] += (v - mean[c]).powi(2);
        }
        let var_unbiased = var.iter().map(|s| s / (n - 1.0)).collect();
        let var_biased: Vec<f64> = var.iter().map(|s| s / n).collect();
        let stats = BatchStats { mean, var_unbiased };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &stats.mean, inv_std, true, channels, len)?;
        Ok((out, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, channels, len) = bn_dims(self.shape(x))?;
        check_affine(self, gamma, beta, channels)?;
        if mean.len() != channels || var.len() != channels {
            return Err(Error::Shape("running statistics do not match channel count".into()));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.normalize(x, gamma, beta, mean, inv_std, false, channels, len)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
        channels: usize,
        len: usize,
    ) -> Result<Var> {
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, &v) in xv.iter().enumerate() {
            let c = (i / len) % channels;
            let h = (v - mean[c]) * inv_std[c];
            xhat.push(h);
            out.push(g[c] * h + bt[c]);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &gout, &mut grads);
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| add_into(g, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gout));
                acc(*b, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * vb[i];
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * va[i];
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |g| g.iter_mut().zip(gout).for_each(|(g, d)| *g += s * d)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_into(g, gout)),
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i];
                    }
                });
            }
            Op::Square(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * vx[i] * gout[i];
                    }
                });
            }
            Op::Relu(x) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Clamp(x, lo, hi) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if vx[i] >= *lo && vx[i] <= *hi {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::MaxScalar(x, floor) => {
                let vx = val(*x);
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        if vx[i] > *floor {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0])),
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.len().max(1) as f64;
                acc(*x, &mut |g| g.iter_mut().for_each(|g| *g += gout[0] / n));
            }
            Op::RowSum(x) => {
                let cols = self.nodes[x.0].value.shape()[1];
                acc(*x, &mut |g| {
                    for (i, v) in g.iter_mut().enumerate() {
                        *v += gout[i / cols];
                    }
                });
            }
            Op::ColMean(x) => {
                let shape = self.nodes[x.0].value.shape();
                let (rows, cols) = (shape[0] as f64, shape[1]);
                acc(*x, &mut |g| {
                    for (i, v) in g.iter_mut().enumerate() {
                        *v += gout[i % cols] / rows;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.nodes[x.0].value.shape()[1];
                let len = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, row) in gout.chunks(len.max(1)).enumerate() {
                        add_into(&mut g[r * cols + start..r * cols + start + len], row);
                    }
                });
            }
            Op::SumHalves(x) => {
                let m = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, row) in gout.chunks(m.max(1)).enumerate() {
                        add_into(&mut g[r * 2 * m..r * 2 * m + m], row);
                        add_into(&mut g[r * 2 * m + m..(r + 1) * 2 * m], row);
                    }
                });
            }
            Op::BroadcastCols(x) => {
                let n = node.value.shape()[1];
                acc(*x, &mut |g| {
                    for (r, row) in gout.chunks(n.max(1)).enumerate() {
                        g[r] += row.iter().sum::<f64>();
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let shape = self.nodes[w.0].value.shape();
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let batch = node.value.shape()[0];
                acc(*x, &mut |g| {
                    gemm(batch, fan_out, fan_in, 1.0, Mat::rows(gout, fan_out), Mat::rows(val(*w), fan_in), 1.0, g)
                });
                acc(*w, &mut |g| {
                    gemm(fan_out, batch, fan_in, 1.0, Mat::rows_t(gout, fan_out), Mat::rows(val(*x), fan_in), 1.0, g)
                });
                acc(*b, &mut |g| {
                    for row in gout.chunks(fan_out) {
                        add_into(g, row);
                    }
                });
            }
            Op::Conv { x, w, b, geom, col } => {
                let n = geom.batch * geom.l_out;
                let rows = geom.c_in * geom.kernel;
                let gout2 = geom.batch_to_channel_major(gout, geom.c_out, geom.l_out);
                acc(*w, &mut |g| gemm(geom.c_out, n, rows, 1.0, Mat::rows(&gout2, n), Mat::rows_t(col, n), 1.0, g));
                acc(*b, &mut |g| {
                    for (c, row) in gout2.chunks(n).enumerate() {
                        g[c] += row.iter().sum::<f64>();
                    }
                });
                acc(*x, &mut |g| {
                    let mut dcol = vec![0.0; rows * n];
                    gemm(rows, geom.c_out, n, 1.0, Mat::rows_t(val(*w), rows), Mat::rows(&gout2, n), 0.0, &mut dcol);
                    col2im(&dcol, geom, g);
                });
            }
            Op::ConvTranspose { x, w, b, geom } => {
                // output of this op lives in the forward conv's input space
                let n = geom.batch * geom.l_out;
                let rows = geom.c_in * geom.kernel;
                let dcol = im2col(gout, geom);
                acc(*b, &mut |g| {
                    for (i, chunk) in gout.chunks(geom.l_in).enumerate() {
                        g[i % geom.c_in] += chunk.iter().sum::<f64>();
                    }
                });
                acc(*w, &mut |g| {
                    let x2 = geom.batch_to_channel_major(val(*x), geom.c_out, geom.l_out);
                    gemm(geom.c_out, n, rows, 1.0, Mat::rows(&x2, n), Mat::rows_t(&dcol, n), 1.0, g);
                });
                acc(*x, &mut |g| {
                    let mut dx2 = vec![0.0; geom.c_out * n];
                    gemm(geom.c_out, rows, n, 1.0, Mat::rows(val(*w), rows), Mat::rows(&dcol, n), 0.0, &mut dx2);
                    let dx = geom.channel_major_to_batch(&dx2, geom.c_out, geom.l_out, None);
                    add_into(g, &dx);
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (_, channels, len) = bn_dims(node.value.shape()).expect("bn shape");
                let gam = val(*gamma);
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for i in 0..gout.len() {
                    let c = (i / len) % channels;
                    sum_g[c] += gout[i];
                    sum_gx[c] += gout[i] * xhat[i];
                }
                acc(*gamma, &mut |g| add_into(g, &sum_gx));
                acc(*beta, &mut |g| add_into(g, &sum_g));
                let count = (gout.len() / channels) as f64;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let c = (i / len) % channels;
                        let scale = gam[c] * inv_std[c];
                        g[i] += if *batch_stats {
                            scale * (gout[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count)
                        } else {
                            scale * gout[i]
                        };
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn bn_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, c] => Ok((b, c, 1)),
        [b, c, l] => Ok((b, c, l)),
        _ => Err(Error::Shape(format!("batch norm expects [B, C] or [B, C, L], got {shape:?}"))),
    }
}

fn check_affine(g: &Graph, gamma: Var, beta: Var, channels: usize) -> Result<()> {
    if g.shape(gamma) != [channels] || g.shape(beta) != [channels] {
        return Err(Error::Shape(format!(
            "batch norm affine parameters {:?}/{:?} for {channels} channels",
            g.shape(gamma),
            g.shape(beta)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_sum_gradient_is_the_data() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4], vec![1.0, -2.0, 3.5, 0.25]).unwrap());
        let w = g.param(Tensor::new(vec![4], vec![0.3, 0.1, -0.7, 2.0]).unwrap());
        let unused = g.param(Tensor::filled(&[3], 1.0));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).data(), g.value(x).data());
        assert_eq!(grads.get(unused).data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::filled(&[2], 1.0));
        let y = g.square(w);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::zeros(&[2]));
        let b = g.param(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn single_sample_train_batch_norm_fails() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4]));
        let gamma = g.param(Tensor::filled(&[2], 1.0));
        let beta = g.param(Tensor::zeros(&[2]));
        assert!(g.batch_norm_train(x, gamma, beta, 1e-5).is_err());
    }
}
