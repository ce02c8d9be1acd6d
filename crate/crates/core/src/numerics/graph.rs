//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Graph::backward`] walks it in reverse.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::real::gemm;
use super::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        kernel: usize,
        stride: usize,
        pad: usize,
        /// im2col buffer, only kept when a gradient is needed.
        cols: Option<Vec<T>>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    AddPerBatch(Var, Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// Normalized input and per-(batch, group) reciprocal std.
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        input: Var,
        index: Arc<[usize]>,
    },
    ScatterAdd {
        input: Var,
        index: Arc<[usize]>,
    },
    Upsample2(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Expression graph recording every operation applied to its variables.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// In checked mode every op verifies that its output is finite.
    pub fn with_checks(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of {} (node {})",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            false,
            false,
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            T::zero(),
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// 1-D convolution over the middle axis of a channels-last tensor.
    ///
    /// `input: [batch, len, c_in]`, `weight: [kernel, c_in, c_out]`,
    /// `bias: [c_out]`; output is `[batch, floor((len + 2 pad - kernel) / stride) + 1, c_out]`.
    pub fn conv1d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 3 || si[2] != sw[1] {
            return Err(shape_err("conv1d", &si, &sw));
        }
        let (batch, len, c_in) = (si[0], si[1], si[2]);
        let (kernel, c_out) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(shape_err("conv1d bias", self.shape(b), &[c_out]));
            }
        }
        let out_len = conv_out_len(len, kernel, stride, pad)
            .ok_or_else(|| shape_err("conv1d length", &si, &sw))?;

        let rows = batch * out_len;
        let width = kernel * c_in;
        let x = self.value(input).data();
        let cols = im2col(x, batch, len, c_in, kernel, stride, pad, out_len);

        let mut out = Tensor::zeros(&[batch, out_len, c_out]);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_exact_mut(c_out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        gemm(
            false,
            false,
            rows,
            width,
            c_out,
            &cols,
            self.value(weight).data(),
            beta,
            out.data_mut(),
        );
        let rg = self.rg(input) || self.rg(weight) || bias.map(|b| self.rg(b)).unwrap_or(false);
        let cols = if self.rg(weight) { Some(cols) } else { None };
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
                pad,
                cols,
            },
            rg,
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same(name, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds `b: [c]` along the last axis of `x: [..., c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().unwrap_or(&0);
        if sb != [c] {
            return Err(shape_err("add_bias", sx, sb));
        }
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &v) in row.iter_mut().zip(bv) {
                *o += v;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias(x, b), rg)
    }

    /// Adds `e: [batch, c]` to every position of `x: [batch, len, c]`.
    pub fn add_per_batch(&mut self, x: Var, e: Var) -> Result<Var> {
        let (sx, se) = (self.shape(x), self.shape(e));
        if sx.len() != 3 || se != [sx[0], sx[2]] {
            return Err(shape_err("add_per_batch", sx, se));
        }
        let (batch, len, c) = (sx[0], sx[1], sx[2]);
        let mut out = self.value(x).clone();
        let ev = self.value(e).data();
        let od = out.data_mut();
        for b in 0..batch {
            let erow = &ev[b * c..(b + 1) * c];
            for t in 0..len {
                let base = (b * len + t) * c;
                for (o, &v) in od[base..base + c].iter_mut().zip(erow) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x) || self.rg(e);
        self.push(out, Op::AddPerBatch(x, e), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x < T::zero() { T::zero() } else { x });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Group normalization of `x: [batch, len, c]` with per-channel affine
    /// `gamma, beta: [c]`. Statistics are taken per (batch, group) over the
    /// time axis and the group's channels.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || groups == 0 || sx[2] % groups != 0 {
            return Err(shape_err("group_norm", &sx, &[groups]));
        }
        let (batch, len, c) = (sx[0], sx[1], sx[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm affine", self.shape(gamma), &[c]));
        }
        let cg = c / groups;
        let count = (len * cg) as f64;
        let eps = 1e-5;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); batch * groups];
        let mut out = Tensor::zeros(&sx);
        let od = out.data_mut();
        for b in 0..batch {
            for g in 0..groups {
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for t in 0..len {
                    let base = (b * len + t) * c + g * cg;
                    for &v in &xv[base..base + cg] {
                        let v = v.as_f64();
                        sum += v;
                        sumsq += v * v;
                    }
                }
                let mean = sum / count;
                let var = (sumsq / count - mean * mean).max(0.0);
                let r = 1.0 / (var + eps).sqrt();
                rstd[b * groups + g] = T::from_f64_lossy(r);
                for t in 0..len {
                    let base = (b * len + t) * c + g * cg;
                    for j in 0..cg {
                        let i = base + j;
                        let h = T::from_f64_lossy((xv[i].as_f64() - mean) * r);
                        xhat[i] = h;
                        od[i] = h * gv[g * cg + j] + bv[g * cg + j];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::GroupNorm {
                input: x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.numel().max(1) as f64;
        let s: f64 = v.data().iter().map(|x| x.as_f64()).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::Mean(a), rg)
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same("mse", vb)?;
        let n = va.numel().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(T::from_f64_lossy(s / n)), Op::Mse(a, b), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || start + len > sa[axis] {
            return Err(shape_err("slice", &sa, &[axis, start, len]));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * sa[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = sa.clone();
        shape[axis] = len;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::Slice { input: a, axis, start }, rg)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| shape_err("concat", &[], &[]))?
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err("concat axis", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `out[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if n != index.len() || index.iter().any(|&i| i >= src.len()) {
            return Err(shape_err("gather", self.shape(a), shape));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape.to_vec(), data)?,
            Op::Gather { input: a, index },
            rg,
        )
    }

    /// `out.flat[index[i]] += a.flat[i]` into a zero tensor of `shape`.
    pub fn scatter_add(&mut self, a: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let src = self.value(a).data();
        if src.len() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(shape_err("scatter_add", self.shape(a), shape));
        }
        let mut out = Tensor::zeros(shape);
        let od = out.data_mut();
        for (&i, &v) in index.iter().zip(src) {
            od[i] += v;
        }
        let rg = self.rg(a);
        self.push(out, Op::ScatterAdd { input: a, index }, rg)
    }

    /// Nearest-neighbour upsampling by 2 along the middle axis of `[batch, len, c]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 {
            return Err(shape_err("upsample2", &sa, &[3]));
        }
        let (batch, len, c) = (sa[0], sa[1], sa[2]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(batch * len * 2 * c);
        for b in 0..batch {
            for t in 0..len {
                let row = &src[(b * len + t) * c..(b * len + t + 1) * c];
                data.extend_from_slice(row);
                data.extend_from_slice(row);
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![batch, 2 * len, c], data)?, Op::Upsample2(a), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: lv.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        if self.checked {
            for (i, g) in grads.iter().enumerate() {
                if let Some(g) = g {
                    if !g.is_finite() {
                        return Err(Error::NonFinite(format!("gradient of node {i}")));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
        if !self.rg(var) {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let mut da = Tensor::zeros(sa);
                    gemm(false, true, m, n, k, g.data(), self.value(b).data(), T::zero(), da.data_mut());
                    self.accumulate(grads, a, da)?;
                }
                if self.rg(b) {
                    let mut db = Tensor::zeros(sb);
                    gemm(true, false, k, m, n, self.value(a).data(), g.data(), T::zero(), db.data_mut());
                    self.accumulate(grads, b, db)?;
                }
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                kernel,
                stride,
                pad,
                cols,
            } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (batch, len, c_in) = (si[0], si[1], si[2]);
                let c_out = sw[2];
                let out_len = g.shape()[1];
                let rows = batch * out_len;
                let width = kernel * c_in;
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut db = vec![0.0f64; c_out];
                        for row in g.data().chunks_exact(c_out) {
                            for (acc, &v) in db.iter_mut().zip(row) {
                                *acc += v.as_f64();
                            }
                        }
                        let db = db.into_iter().map(T::from_f64_lossy).collect();
                        self.accumulate(grads, *b, Tensor::new(vec![c_out], db)?)?;
                    }
                }
                if self.rg(*weight) {
                    let cols = cols.as_ref().expect("im2col saved for weight gradient");
                    let mut dw = Tensor::zeros(sw);
                    gemm(true, false, width, rows, c_out, cols, g.data(), T::zero(), dw.data_mut());
                    self.accumulate(grads, *weight, dw)?;
                }
                if self.rg(*input) {
                    let mut dcols = vec![T::zero(); rows * width];
                    gemm(false, true, rows, c_out, width, g.data(), self.value(*weight).data(), T::zero(), &mut dcols);
                    let dx = col2im(&dcols, batch, len, c_in, *kernel, *stride, *pad, out_len);
                    self.accumulate(grads, *input, Tensor::new(si.to_vec(), dx)?)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let d = zip_map(g, self.value(b), |gv, bv| gv * bv);
                    self.accumulate(grads, a, d)?;
                }
                if self.rg(b) {
                    let d = zip_map(g, self.value(a), |gv, av| gv * av);
                    self.accumulate(grads, b, d)?;
                }
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.map(|v| v * f))?,
            &Op::AddBias(x, b) => {
                self.accumulate(grads, x, g.clone())?;
                if self.rg(b) {
                    let c = self.shape(b)[0];
                    let mut db = vec![0.0f64; c];
                    for row in g.data().chunks_exact(c) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v.as_f64();
                        }
                    }
                    let db = db.into_iter().map(T::from_f64_lossy).collect();
                    self.accumulate(grads, b, Tensor::new(vec![c], db)?)?;
                }
            }
            &Op::AddPerBatch(x, e) => {
                self.accumulate(grads, x, g.clone())?;
                if self.rg(e) {
                    let s = g.shape();
                    let (batch, len, c) = (s[0], s[1], s[2]);
                    let mut de = vec![0.0f64; batch * c];
                    for b in 0..batch {
                        for t in 0..len {
                            let row = &g.data()[(b * len + t) * c..(b * len + t + 1) * c];
                            for (acc, &v) in de[b * c..(b + 1) * c].iter_mut().zip(row) {
                                *acc += v.as_f64();
                            }
                        }
                    }
                    let de = de.into_iter().map(T::from_f64_lossy).collect();
                    self.accumulate(grads, e, Tensor::new(vec![batch, c], de)?)?;
                }
            }
            &Op::Relu(a) => {
                let d = zip_map(g, self.value(a), |gv, x| if x > T::zero() { gv } else { T::zero() });
                self.accumulate(grads, a, d)?;
            }
            &Op::Silu(a) => {
                let d = zip_map(g, self.value(a), |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (T::one() - s))
                });
                self.accumulate(grads, a, d)?;
            }
            &Op::Sigmoid(a) => {
                let d = zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y));
                self.accumulate(grads, a, d)?;
            }
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let s = g.shape();
                let (batch, len, c) = (s[0], s[1], s[2]);
                let cg = c / groups;
                let gd = g.data();
                let gv = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dgamma = vec![0.0f64; c];
                    let mut dbeta = vec![0.0f64; c];
                    for (row, hrow) in gd.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dgamma[j] += (row[j] * hrow[j]).as_f64();
                            dbeta[j] += row[j].as_f64();
                        }
                    }
                    let to_t = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
                    self.accumulate(grads, *gamma, Tensor::new(vec![c], to_t(dgamma))?)?;
                    self.accumulate(grads, *beta, Tensor::new(vec![c], to_t(dbeta))?)?;
                }
                if self.rg(*input) {
                    let count = (len * cg) as f64;
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..batch {
                        for grp in 0..*groups {
                            let mut mean_d = 0.0f64;
                            let mut mean_dh = 0.0f64;
                            for t in 0..len {
                                let base = (b * len + t) * c + grp * cg;
                                for j in 0..cg {
                                    let dh = (gd[base + j] * gv[grp * cg + j]).as_f64();
                                    mean_d += dh;
                                    mean_dh += dh * xhat[base + j].as_f64();
                                }
                            }
                            mean_d /= count;
                            mean_dh /= count;
                            let r = rstd[b * groups + grp].as_f64();
                            for t in 0..len {
                                let base = (b * len + t) * c + grp * cg;
                                for j in 0..cg {
                                    let dh = (gd[base + j] * gv[grp * cg + j]).as_f64();
                                    let h = xhat[base + j].as_f64();
                                    dx[base + j] = T::from_f64_lossy(r * (dh - mean_d - h * mean_dh));
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, Tensor::new(s.to_vec(), dx)?)?;
                }
            }
            &Op::Sum(a) => {
                let gv = g.item();
                self.accumulate(grads, a, Tensor::full(self.shape(a), gv))?;
            }
            &Op::Mean(a) => {
                let n = self.value(a).numel().max(1) as f64;
                let gv = g.item() / T::from_f64_lossy(n);
                self.accumulate(grads, a, Tensor::full(self.shape(a), gv))?;
            }
            &Op::Mse(a, b) => {
                let n = self.value(a).numel().max(1) as f64;
                let f = g.item() * T::from_f64_lossy(2.0 / n);
                let diff = zip_map(self.value(a), self.value(b), |x, y| (x - y) * f);
                if self.rg(b) {
                    self.accumulate(grads, b, diff.map(|v| -v))?;
                }
                self.accumulate(grads, a, diff)?;
            }
            &Op::Reshape(a) => {
                let d = g.clone().reshape(self.shape(a))?;
                self.accumulate(grads, a, d)?;
            }
            &Op::Slice { input, axis, start } => {
                let sa = self.shape(input);
                let len = g.shape()[axis];
                let outer: usize = sa[..axis].iter().product();
                let inner: usize = sa[axis + 1..].iter().product();
                let mut d = Tensor::zeros(sa);
                let dd = d.data_mut();
                for o in 0..outer {
                    let dst = (o * sa[axis] + start) * inner;
                    let src = o * len * inner;
                    dd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, input, d)?;
            }
            Op::Concat { parts, axis } => {
                let s = g.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis] * inner;
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            let base = o * total + offset;
                            data.extend_from_slice(&g.data()[base..base + n]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), data)?)?;
                    }
                    offset += n;
                }
            }
            Op::Gather { input, index } => {
                let mut d = Tensor::zeros(self.shape(*input));
                let dd = d.data_mut();
                for (&i, &v) in index.iter().zip(g.data()) {
                    dd[i] += v;
                }
                self.accumulate(grads, *input, d)?;
            }
            Op::ScatterAdd { input, index } => {
                let data = index.iter().map(|&i| g.data()[i]).collect();
                let d = Tensor::new(self.shape(*input).to_vec(), data)?;
                self.accumulate(grads, *input, d)?;
            }
            &Op::Upsample2(a) => {
                let sa = self.shape(a);
                let (batch, len, c) = (sa[0], sa[1], sa[2]);
                let gd = g.data();
                let mut d = Tensor::zeros(sa);
                let dd = d.data_mut();
                for b in 0..batch {
                    for t in 0..len {
                        let dst = (b * len + t) * c;
                        let s0 = (b * 2 * len + 2 * t) * c;
                        for j in 0..c {
                            dd[dst + j] = gd[s0 + j] + gd[s0 + c + j];
                        }
                    }
                }
                self.accumulate(grads, a, d)?;
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    batch: usize,
    len: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<T> {
    let width = kernel * c_in;
    let mut cols = vec![T::zero(); batch * out_len * width];
    for b in 0..batch {
        for o in 0..out_len {
            let row = &mut cols[(b * out_len + o) * width..(b * out_len + o + 1) * width];
            for k in 0..kernel {
                let t = (o * stride + k) as isize - pad as isize;
                if t < 0 || t as usize >= len {
                    continue;
                }
                let src = (b * len + t as usize) * c_in;
                row[k * c_in..(k + 1) * c_in].copy_from_slice(&x[src..src + c_in]);
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    batch: usize,
    len: usize,
    c_in: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_len: usize,
) -> Vec<T> {
    let width = kernel * c_in;
    let mut x = vec![T::zero(); batch * len * c_in];
    for b in 0..batch {
        for o in 0..out_len {
            let row = &cols[(b * out_len + o) * width..(b * out_len + o + 1) * width];
            for k in 0..kernel {
                let t = (o * stride + k) as isize - pad as isize;
                if t < 0 || t as usize >= len {
                    continue;
                }
                let dst = (b * len + t as usize) * c_in;
                for (xv, &cv) in x[dst..dst + c_in].iter_mut().zip(&row[k * c_in..(k + 1) * c_in]) {
                    *xv += cv;
                }
            }
        }
    }
    x
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Conv1d { .. } => "conv1d",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddBias(..) => "add_bias",
        Op::AddPerBatch(..) => "add_per_batch",
        Op::Relu(..) => "relu",
        Op::Silu(..) => "silu",
        Op::Sigmoid(..) => "sigmoid",
        Op::GroupNorm { .. } => "group_norm",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::Mse(..) => "mse",
        Op::Reshape(..) => "reshape",
        Op::Slice { .. } => "slice",
        Op::Concat { .. } => "concat",
        Op::Gather { .. } => "gather",
        Op::ScatterAdd { .. } => "scatter_add",
        Op::Upsample2(..) => "upsample2",
    }
}
