//! Reverse-mode tape. Every forward call appends one node; `backward` walks
//! the tape once in reverse and accumulates gradients into the leaf tensors.
//!
//! The op set is deliberately narrow: exactly what a conv encoder/decoder
//! with ELU activations, mean-pool downsampling, nearest-neighbour
//! upsampling, affine heads and L1/KL/cross-entropy losses requires.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};

/// Handle to a node in one specific [`Graph`]. Ids from different graphs are
/// not interchangeable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum Op<T> {
    Leaf,
    Conv2d { input: VarId, kernel: VarId, stride: usize, padding: usize },
    ChannelBias { input: VarId, bias: VarId },
    Linear { input: VarId, weight: VarId, bias: VarId },
    Elu { input: VarId },
    Sigmoid { input: VarId },
    Exp { input: VarId },
    Clamp { input: VarId, lo: T, hi: T },
    Downsample2 { input: VarId },
    Upsample2 { input: VarId },
    Reshape { input: VarId },
    Add { lhs: VarId, rhs: VarId },
    Sub { lhs: VarId, rhs: VarId },
    Mul { lhs: VarId, rhs: VarId },
    Scale { input: VarId, factor: T },
    L1Mean { lhs: VarId, rhs: VarId },
    GaussianKl { mean: VarId, log_var: VarId },
    SoftmaxCrossEntropy { logits: VarId, classes: Vec<usize> },
}

struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Installs a tensor as a graph input. Gradients accumulate into it only
    /// when `requires_grad` is set on the tensor.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> VarId {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Installs a tensor that never receives gradients (inputs, noise draws,
    /// detached values).
    pub fn constant(&mut self, tensor: Tensor<T>) -> VarId {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: VarId) -> &[T] {
        self.nodes[id.0].tensor.data()
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].tensor.shape()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: VarId) -> T {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.data()[0]
    }

    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.nodes[id.0].tensor.grad()
    }

    /// Moves the accumulated gradient out of a leaf, leaving it cleared.
    pub fn take_grad(&mut self, id: VarId) -> Option<Vec<T>> {
        self.nodes[id.0].tensor.take_grad()
    }

    /// Clears every accumulated gradient in the graph.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    // ---- forward ops -----------------------------------------------------

    pub fn conv2d(&mut self, input: VarId, kernel: VarId, stride: usize, padding: usize) -> Result<VarId> {
        let x = self.tensor(input);
        let k = self.tensor(kernel);
        if x.rank() != 4 || k.rank() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d wants [B,C,H,W] input and [F,C,k,k] kernel, got {:?} and {:?}",
                x.shape(),
                k.shape()
            )));
        }
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (f, kc, kh, kw) = (k.dim(0), k.dim(1), k.dim(2), k.dim(3));
        if kc != c {
            return Err(Error::Dimension(format!(
                "conv2d input has {c} channels but kernel expects {kc}"
            )));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d kernel must be square, got {kh}×{kw}")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be at least 1".into()));
        }
        let oh = kernels::conv_out_dim(h, kh, stride, padding);
        let ow = kernels::conv_out_dim(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::Dimension(format!(
                "conv2d kernel {kh}×{kw} exceeds padded input {h}×{w} (padding {padding})"
            )));
        };
        let out = kernels::conv2d_forward(
            x.data(),
            b,
            c,
            h,
            w,
            k.data(),
            f,
            kh,
            stride,
            padding,
            oh,
            ow,
        );
        check_finite(&out, "conv2d")?;
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push_op(vec![b, f, oh, ow], out, Op::Conv2d { input, kernel, stride, padding }, needs))
    }

    /// Adds a per-channel bias to a `[B,C,H,W]` tensor.
    pub fn channel_bias(&mut self, input: VarId, bias: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        let b = self.tensor(bias);
        if x.rank() != 4 || b.rank() != 1 || b.dim(0) != x.dim(1) {
            return Err(Error::Dimension(format!(
                "channel_bias wants [B,C,H,W] and [C], got {:?} and {:?}",
                x.shape(),
                b.shape()
            )));
        }
        let plane = x.dim(2) * x.dim(3);
        let channels = x.dim(1);
        let mut out = x.data().to_vec();
        for image in out.chunks_exact_mut(channels * plane) {
            for (ci, chunk) in image.chunks_exact_mut(plane).enumerate() {
                let bv = b.data()[ci];
                for v in chunk {
                    *v += bv;
                }
            }
        }
        check_finite(&out, "channel_bias")?;
        let needs = self.needs(input) || self.needs(bias);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::ChannelBias { input, bias }, needs))
    }

    /// `[B,K] · [K,M] + [M]`.
    pub fn linear(&mut self, input: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        let w = self.tensor(weight);
        let bv = self.tensor(bias);
        if x.rank() != 2 || w.rank() != 2 || bv.rank() != 1 {
            return Err(Error::Dimension(format!(
                "linear wants [B,K], [K,M], [M], got {:?}, {:?}, {:?}",
                x.shape(),
                w.shape(),
                bv.shape()
            )));
        }
        if x.dim(1) != w.dim(0) || w.dim(1) != bv.dim(0) {
            return Err(Error::Dimension(format!(
                "linear shape mismatch: input {:?}, weight {:?}, bias {:?}",
                x.shape(),
                w.shape(),
                bv.shape()
            )));
        }
        let (b, k, m) = (x.dim(0), x.dim(1), w.dim(1));
        let out = kernels::linear_forward(x.data(), b, k, w.data(), m, bv.data());
        check_finite(&out, "linear")?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push_op(vec![b, m], out, Op::Linear { input, weight, bias }, needs))
    }

    pub fn elu(&mut self, input: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { v.exp() - T::one() })
            .collect();
        check_finite(&out, "elu")?;
        let needs = self.needs(input);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::Elu { input }, needs))
    }

    pub fn sigmoid(&mut self, input: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| {
                if v >= T::zero() {
                    T::one() / (T::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (T::one() + e)
                }
            })
            .collect();
        check_finite(&out, "sigmoid")?;
        let needs = self.needs(input);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::Sigmoid { input }, needs))
    }

    pub fn exp(&mut self, input: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        let out: Vec<T> = x.data().iter().map(|&v| v.exp()).collect();
        check_finite(&out, "exp")?;
        let needs = self.needs(input);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::Exp { input }, needs))
    }

    /// Element-wise clamp. The gradient passes through strictly inside
    /// `(lo, hi)` and is 0 at and beyond the bounds.
    pub fn clamp(&mut self, input: VarId, lo: T, hi: T) -> Result<VarId> {
        if lo >= hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::Usage(format!("clamp bounds must satisfy lo < hi, got {lo} .. {hi}")));
        }
        let x = self.tensor(input);
        let out: Vec<T> = x.data().iter().map(|&v| v.min(hi).max(lo)).collect();
        check_finite(&out, "clamp")?;
        let needs = self.needs(input);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::Clamp { input, lo, hi }, needs))
    }

    /// 2×2 mean pooling; spatial dims must be even.
    pub fn downsample2(&mut self, input: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        if x.rank() != 4 {
            return Err(Error::Dimension(format!("downsample wants [B,C,H,W], got {:?}", x.shape())));
        }
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("downsample needs even spatial size, got {h}×{w}")));
        }
        let out = kernels::downsample2_forward(x.data(), b * c, h, w);
        check_finite(&out, "downsample")?;
        let needs = self.needs(input);
        Ok(self.push_op(vec![b, c, h / 2, w / 2], out, Op::Downsample2 { input }, needs))
    }

    /// Nearest-neighbour 2× replication.
    pub fn upsample2(&mut self, input: VarId) -> Result<VarId> {
        let x = self.tensor(input);
        if x.rank() != 4 {
            return Err(Error::Dimension(format!("upsample wants [B,C,H,W], got {:?}", x.shape())));
        }
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let out = kernels::upsample2_forward(x.data(), b * c, h, w);
        check_finite(&out, "upsample")?;
        let needs = self.needs(input);
        Ok(self.push_op(vec![b, c, 2 * h, 2 * w], out, Op::Upsample2 { input }, needs))
    }

    pub fn reshape(&mut self, input: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let shape = shape.into();
        let x = self.tensor(input);
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != x.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                x.shape(),
                x.numel(),
                shape
            )));
        }
        let out = x.data().to_vec();
        let needs = self.needs(input);
        Ok(self.push_op(shape, out, Op::Reshape { input }, needs))
    }

    pub fn add(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_op(lhs, rhs, "add", |a, b| a + b, Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_op(lhs, rhs, "sub", |a, b| a - b, Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        self.zip_op(lhs, rhs, "mul", |a, b| a * b, Op::Mul { lhs, rhs })
    }

    pub fn scale(&mut self, input: VarId, factor: T) -> Result<VarId> {
        let x = self.tensor(input);
        let out: Vec<T> = x.data().iter().map(|&v| v * factor).collect();
        check_finite(&out, "scale")?;
        let needs = self.needs(input);
        let shape = x.shape().to_vec();
        Ok(self.push_op(shape, out, Op::Scale { input, factor }, needs))
    }

    /// Mean over all elements of `|a - b|`; the subgradient at ties is 0.
    pub fn l1_mean(&mut self, lhs: VarId, rhs: VarId) -> Result<VarId> {
        let a = self.tensor(lhs);
        let b = self.tensor(rhs);
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "l1_mean shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let n = T::from_usize(a.numel());
        let sum: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum();
        let out = vec![sum / n];
        check_finite(&out, "l1_mean")?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push_op(vec![1], out, Op::L1Mean { lhs, rhs }, needs))
    }

    /// KL divergence of `N(mean, exp(log_var))` from the standard normal,
    /// summed over latent dimensions and averaged over the batch:
    /// `0.5/B · Σ (μ² + σ² − log σ² − 1)`.
    pub fn gaussian_kl(&mut self, mean: VarId, log_var: VarId) -> Result<VarId> {
        let mu = self.tensor(mean);
        let lv = self.tensor(log_var);
        if mu.shape() != lv.shape() || mu.rank() != 2 {
            return Err(Error::Dimension(format!(
                "gaussian_kl wants matching [B,N] tensors, got {:?} and {:?}",
                mu.shape(),
                lv.shape()
            )));
        }
        let batch = T::from_usize(mu.dim(0));
        let half = T::from_f64(0.5);
        let mut sum = T::zero();
        for (&m, &l) in mu.data().iter().zip(lv.data()) {
            sum += m * m + l.exp() - l - T::one();
        }
        let out = vec![half * sum / batch];
        check_finite(&out, "gaussian_kl")?;
        let needs = self.needs(mean) || self.needs(log_var);
        Ok(self.push_op(vec![1], out, Op::GaussianKl { mean, log_var }, needs))
    }

    /// Mean softmax cross-entropy of `[B,C]` logits against integer classes.
    pub fn softmax_cross_entropy(&mut self, logits: VarId, classes: &[usize]) -> Result<VarId> {
        let x = self.tensor(logits);
        if x.rank() != 2 {
            return Err(Error::Dimension(format!("cross-entropy wants [B,C] logits, got {:?}", x.shape())));
        }
        let (b, c) = (x.dim(0), x.dim(1));
        if classes.len() != b {
            return Err(Error::Dimension(format!(
                "{} class labels for a batch of {b}",
                classes.len()
            )));
        }
        if let Some(&bad) = classes.iter().find(|&&y| y >= c) {
            return Err(Error::Usage(format!("class index {bad} out of range for {c} classes")));
        }
        let mut sum = T::zero();
        for (row, &y) in x.data().chunks_exact(c).zip(classes) {
            let max = row.iter().cloned().fold(row[0], T::max);
            let lse: T = row.iter().map(|&v| (v - max).exp()).sum();
            sum += max + lse.ln() - row[y];
        }
        let out = vec![sum / T::from_usize(b)];
        check_finite(&out, "softmax_cross_entropy")?;
        let needs = self.needs(logits);
        Ok(self.push_op(vec![1], out, Op::SoftmaxCrossEntropy { logits, classes: classes.to_vec() }, needs))
    }

    // ---- backward ----------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    /// Repeated calls keep adding (two passes double the result).
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        self.backward_stopping(loss, &[])
    }

    /// Like [`Graph::backward`], but treats every node in `barriers` as a
    /// constant: gradient flow stops there and never reaches its ancestors.
    pub fn backward_stopping(&mut self, loss: VarId, barriers: &[VarId]) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward starts from a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // nothing upstream requires gradients
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if barriers.iter().any(|b| b.0 == i) {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].tensor.requires_grad() {
                    self.nodes[i].tensor.accumulate_grad(&g);
                }
                continue;
            }
            self.push_adjoints(i, &g, &mut adj);
        }
        Ok(())
    }

    /// Distributes the adjoint `g` of node `i` onto the node's inputs.
    fn push_adjoints(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        match &self.nodes[i].op {
            Op::Leaf => unreachable!("handled by caller"),
            Op::Conv2d { input, kernel, stride, padding } => {
                let x = self.tensor(*input);
                let k = self.tensor(*kernel);
                let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                let (f, kk) = (k.dim(0), k.dim(2));
                let (oh, ow) = (self.nodes[i].tensor.dim(2), self.nodes[i].tensor.dim(3));
                let want_x = self.needs(*input);
                let want_k = self.needs(*kernel);
                if input == kernel {
                    // Degenerate self-convolution: run the two halves
                    // separately so the shared slot accumulates both.
                    for pick in 0..2 {
                        let slot = Self::slot(adj, input.0, x.numel());
                        if pick == 0 {
                            kernels::conv2d_backward(
                                x.data(), b, c, h, w, k.data(), f, kk, *stride, *padding, oh, ow,
                                g, Some(slot), None,
                            );
                        } else {
                            kernels::conv2d_backward(
                                x.data(), b, c, h, w, k.data(), f, kk, *stride, *padding, oh, ow,
                                g, None, Some(slot),
                            );
                        }
                    }
                    return;
                }
                let (dx, dk) = Self::two_slots(
                    adj,
                    (input.0, x.numel(), want_x),
                    (kernel.0, k.numel(), want_k),
                );
                kernels::conv2d_backward(
                    x.data(), b, c, h, w, k.data(), f, kk, *stride, *padding, oh, ow, g, dx, dk,
                );
            }
            Op::ChannelBias { input, bias } => {
                let x = self.tensor(*input);
                let channels = x.dim(1);
                let plane = x.dim(2) * x.dim(3);
                if self.needs(*input) {
                    let slot = Self::slot(adj, input.0, x.numel());
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if self.needs(*bias) {
                    let slot = Self::slot(adj, bias.0, channels);
                    for image in g.chunks_exact(channels * plane) {
                        for (ci, chunk) in image.chunks_exact(plane).enumerate() {
                            let mut acc = T::zero();
                            for &gv in chunk {
                                acc += gv;
                            }
                            slot[ci] += acc;
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.tensor(*input);
                let w = self.tensor(*weight);
                let (b, k, m) = (x.dim(0), x.dim(1), w.dim(1));
                // The three parameter ids are distinct by shape except in
                // contrived square cases; fall back to one-at-a-time updates.
                let distinct = input != weight && weight != bias && input != bias;
                if distinct {
                    let (dx, dw, db) = Self::three_slots(
                        adj,
                        (input.0, x.numel(), self.needs(*input)),
                        (weight.0, w.numel(), self.needs(*weight)),
                        (bias.0, m, self.needs(*bias)),
                    );
                    kernels::linear_backward(x.data(), b, k, w.data(), m, g, dx, dw, db);
                } else {
                    for pick in 0..3 {
                        let (id, len, want) = match pick {
                            0 => (input.0, x.numel(), self.needs(*input)),
                            1 => (weight.0, w.numel(), self.needs(*weight)),
                            _ => (bias.0, m, self.needs(*bias)),
                        };
                        if !want {
                            continue;
                        }
                        let slot = Self::slot(adj, id, len);
                        match pick {
                            0 => kernels::linear_backward(x.data(), b, k, w.data(), m, g, Some(slot), None, None),
                            1 => kernels::linear_backward(x.data(), b, k, w.data(), m, g, None, Some(slot), None),
                            _ => kernels::linear_backward(x.data(), b, k, w.data(), m, g, None, None, Some(slot)),
                        }
                    }
                }
            }
            Op::Elu { input } => {
                if self.needs(*input) {
                    let x = self.tensor(*input);
                    let y = self.nodes[i].tensor.data();
                    let slot = Self::slot(adj, input.0, x.numel());
                    for (((s, &gv), &xv), &yv) in slot.iter_mut().zip(g).zip(x.data()).zip(y) {
                        // For x ≤ 0 the local slope exp(x) equals y + 1.
                        *s += if xv > T::zero() { gv } else { gv * (yv + T::one()) };
                    }
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    let y = self.nodes[i].tensor.data();
                    let slot = Self::slot(adj, input.0, y.len());
                    for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(y) {
                        *s += gv * yv * (T::one() - yv);
                    }
                }
            }
            Op::Exp { input } => {
                if self.needs(*input) {
                    let y = self.nodes[i].tensor.data();
                    let slot = Self::slot(adj, input.0, y.len());
                    for ((s, &gv), &yv) in slot.iter_mut().zip(g).zip(y) {
                        *s += gv * yv;
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                if self.needs(*input) {
                    let x = self.tensor(*input);
                    let slot = Self::slot(adj, input.0, x.numel());
                    for ((s, &gv), &xv) in slot.iter_mut().zip(g).zip(x.data()) {
                        if xv > *lo && xv < *hi {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Downsample2 { input } => {
                if self.needs(*input) {
                    let x = self.tensor(*input);
                    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let slot = Self::slot(adj, input.0, x.numel());
                    kernels::downsample2_backward(g, b * c, h, w, slot);
                }
            }
            Op::Upsample2 { input } => {
                if self.needs(*input) {
                    let x = self.tensor(*input);
                    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
                    let slot = Self::slot(adj, input.0, x.numel());
                    kernels::upsample2_backward(g, b * c, h, w, slot);
                }
            }
            Op::Reshape { input } => {
                if self.needs(*input) {
                    let n = self.tensor(*input).numel();
                    let slot = Self::slot(adj, input.0, n);
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for id in [lhs, rhs] {
                    if self.needs(*id) {
                        let n = self.tensor(*id).numel();
                        let slot = Self::slot(adj, id.0, n);
                        for (s, &gv) in slot.iter_mut().zip(g) {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Sub { lhs, rhs } => {
                if self.needs(*lhs) {
                    let n = self.tensor(*lhs).numel();
                    let slot = Self::slot(adj, lhs.0, n);
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv;
                    }
                }
                if self.needs(*rhs) {
                    let n = self.tensor(*rhs).numel();
                    let slot = Self::slot(adj, rhs.0, n);
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s -= gv;
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                // Read both operands up front so an aliased lhs == rhs still
                // sees the original values while the slot accumulates.
                if self.needs(*lhs) {
                    let r = self.tensor(*rhs).data().to_vec();
                    let slot = Self::slot(adj, lhs.0, r.len());
                    for ((s, &gv), rv) in slot.iter_mut().zip(g).zip(&r) {
                        *s += gv * *rv;
                    }
                }
                if self.needs(*rhs) {
                    let l = self.tensor(*lhs).data().to_vec();
                    let slot = Self::slot(adj, rhs.0, l.len());
                    for ((s, &gv), lv) in slot.iter_mut().zip(g).zip(&l) {
                        *s += gv * *lv;
                    }
                }
            }
            Op::Scale { input, factor } => {
                if self.needs(*input) {
                    let n = self.tensor(*input).numel();
                    let slot = Self::slot(adj, input.0, n);
                    for (s, &gv) in slot.iter_mut().zip(g) {
                        *s += gv * *factor;
                    }
                }
            }
            Op::L1Mean { lhs, rhs } => {
                let g0 = g[0];
                let a = self.tensor(*lhs);
                let b = self.tensor(*rhs);
                let unit = g0 / T::from_usize(a.numel());
                if self.needs(*lhs) {
                    let slot = Self::slot(adj, lhs.0, a.numel());
                    for ((s, &av), &bv) in slot.iter_mut().zip(a.data()).zip(b.data()) {
                        *s += sign(av - bv) * unit;
                    }
                }
                if self.needs(*rhs) {
                    let slot = Self::slot(adj, rhs.0, b.numel());
                    for ((s, &av), &bv) in slot.iter_mut().zip(a.data()).zip(b.data()) {
                        *s -= sign(av - bv) * unit;
                    }
                }
            }
            Op::GaussianKl { mean, log_var } => {
                let g0 = g[0];
                let mu = self.tensor(*mean);
                let lv = self.tensor(*log_var);
                let inv_b = T::one() / T::from_usize(mu.dim(0));
                let half = T::from_f64(0.5);
                if self.needs(*mean) {
                    let slot = Self::slot(adj, mean.0, mu.numel());
                    for (s, &m) in slot.iter_mut().zip(mu.data()) {
                        *s += g0 * m * inv_b;
                    }
                }
                if self.needs(*log_var) {
                    let slot = Self::slot(adj, log_var.0, lv.numel());
                    for (s, &l) in slot.iter_mut().zip(lv.data()) {
                        *s += g0 * half * (l.exp() - T::one()) * inv_b;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, classes } => {
                if self.needs(*logits) {
                    let g0 = g[0];
                    let x = self.tensor(*logits);
                    let c = x.dim(1);
                    let inv_b = T::one() / T::from_usize(x.dim(0));
                    let slot = Self::slot(adj, logits.0, x.numel());
                    for ((row, srow), &y) in
                        x.data().chunks_exact(c).zip(slot.chunks_exact_mut(c)).zip(classes)
                    {
                        let max = row.iter().cloned().fold(row[0], T::max);
                        let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
                        for (ci, (s, &v)) in srow.iter_mut().zip(row).enumerate() {
                            let p = (v - max).exp() / denom;
                            let target = if ci == y { T::one() } else { T::zero() };
                            *s += g0 * (p - target) * inv_b;
                        }
                    }
                }
            }
        }
    }

    /// Smallest distance of any recorded kinked-op input to its kink:
    /// ELU inputs to 0, L1 operands to each other, clamp inputs to a bound.
    /// Infinity when the graph has no kinked ops. The gradient-check
    /// harness uses this to reject configurations where a finite-difference
    /// probe could cross a kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Elu { input } => {
                    for &v in self.tensor(*input).data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::L1Mean { lhs, rhs } => {
                    let a = self.tensor(*lhs);
                    let b = self.tensor(*rhs);
                    for (&x, &y) in a.data().iter().zip(b.data()) {
                        margin = margin.min((x.as_f64() - y.as_f64()).abs());
                    }
                }
                Op::Clamp { input, lo, hi } => {
                    for &v in self.tensor(*input).data() {
                        let v = v.as_f64();
                        margin = margin
                            .min((v - lo.as_f64()).abs())
                            .min((v - hi.as_f64()).abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---- internals ---------------------------------------------------------

    fn tensor(&self, id: VarId) -> &Tensor<T> {
        &self.nodes[id.0].tensor
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>, needs_grad: bool) -> VarId {
        self.nodes.push(Node { tensor, op, needs_grad });
        VarId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let tensor = Tensor::new(shape, data).expect("op output shape is consistent");
        self.push(tensor, op, needs_grad)
    }

    fn zip_op(
        &mut self,
        lhs: VarId,
        rhs: VarId,
        name: &str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<VarId> {
        let a = self.tensor(lhs);
        let b = self.tensor(rhs);
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "{name} shape mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(&out, name)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        let shape = a.shape().to_vec();
        Ok(self.push_op(shape, out, op, needs))
    }

    /// Mutable access to one adjoint buffer, zero-initialized on first use.
    fn slot(adj: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut [T] {
        adj[id].get_or_insert_with(|| vec![T::zero(); len])
    }

    /// Two distinct adjoint buffers at once (for ops with two inputs).
    fn two_slots(
        adj: &mut [Option<Vec<T>>],
        (ia, na, wa): (usize, usize, bool),
        (ib, nb, wb): (usize, usize, bool),
    ) -> (Option<&mut [T]>, Option<&mut [T]>) {
        debug_assert_ne!(ia, ib);
        let (lo, hi, lo_spec, hi_spec, swapped) = if ia < ib {
            (ia, ib, (na, wa), (nb, wb), false)
        } else {
            (ib, ia, (nb, wb), (na, wa), true)
        };
        let (left, right) = adj.split_at_mut(hi);
        let lo_slot = lo_spec
            .1
            .then(|| left[lo].get_or_insert_with(|| vec![T::zero(); lo_spec.0]).as_mut_slice());
        let hi_slot = hi_spec
            .1
            .then(|| right[0].get_or_insert_with(|| vec![T::zero(); hi_spec.0]).as_mut_slice());
        if swapped {
            (hi_slot, lo_slot)
        } else {
            (lo_slot, hi_slot)
        }
    }

    /// Three distinct adjoint buffers at once (for the affine op).
    #[allow(clippy::type_complexity)]
    fn three_slots(
        adj: &mut [Option<Vec<T>>],
        a: (usize, usize, bool),
        b: (usize, usize, bool),
        c: (usize, usize, bool),
    ) -> (Option<&mut [T]>, Option<&mut [T]>, Option<&mut [T]>) {
        let mut order = [a, b, c];
        order.sort_by_key(|s| s.0);
        debug_assert!(order[0].0 < order[1].0 && order[1].0 < order[2].0);
        let (left, rest) = adj.split_at_mut(order[1].0);
        let (mid, right) = rest.split_at_mut(order[2].0 - order[1].0);
        let mut slots = [
            order[0].2.then(|| {
                left[order[0].0].get_or_insert_with(|| vec![T::zero(); order[0].1]).as_mut_slice()
            }),
            order[1].2.then(|| mid[0].get_or_insert_with(|| vec![T::zero(); order[1].1]).as_mut_slice()),
            order[2].2.then(|| right[0].get_or_insert_with(|| vec![T::zero(); order[2].1]).as_mut_slice()),
        ]
        .map(Some);
        // Map the sorted slots back to (a, b, c) order.
        let mut take = |target: usize| {
            let pos = order.iter().position(|s| s.0 == target).unwrap();
            slots[pos].take().unwrap()
        };
        (take(a.0), take(b.0), take(c.0))
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Debug-mode fail-fast scan for NaN/Inf escaping an op.
fn check_finite<T: Scalar>(data: &[T], op: &str) -> Result<()> {
    if cfg!(debug_assertions) {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced a non-finite value at flat index {pos}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf4(g: &mut Graph<f64>, shape: [usize; 4], data: Vec<f64>) -> VarId {
        g.leaf(Tensor::new(shape.to_vec(), data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn conv_identity_kernel_passes_value_through() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 1, 1, 1], vec![5.0]);
        let k = leaf4(&mut g, [1, 1, 1, 1], vec![1.0]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.data(y), &[5.0]);
    }

    #[test]
    fn conv_ones_kernel_sums_the_window() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let k = leaf4(&mut g, [1, 1, 2, 2], vec![1.0; 4]);
        let y = g.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(g.data(y), &[10.0]);
    }

    #[test]
    fn conv_zero_input_gives_zero_output() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [2, 1, 4, 4], vec![0.0; 32]);
        let k = leaf4(&mut g, [3, 1, 3, 3], vec![0.7; 27]);
        let y = g.conv2d(x, k, 1, 1).unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_is_a_dimension_error() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 2, 4, 4], vec![1.0; 32]);
        let k = leaf4(&mut g, [1, 3, 3, 3], vec![1.0; 27]);
        let err = g.conv2d(x, k, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }

    #[test]
    fn elu_matches_hand_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.0f64, 1.0, -1.0]).unwrap());
        let y = g.elu(x).unwrap();
        assert_eq!(g.data(y)[0], 0.0);
        assert_eq!(g.data(y)[1], 1.0);
        assert!((g.data(y)[2] - (-0.632_120_6)).abs() < 1e-6);
    }

    #[test]
    fn downsample_means_windows() {
        let mut g = Graph::new();
        let a = leaf4(&mut g, [1, 1, 2, 2], vec![1.0; 4]);
        let y = g.downsample2(a).unwrap();
        assert_eq!(g.data(y), &[1.0]);

        let b = leaf4(&mut g, [1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let z = g.downsample2(b).unwrap();
        assert_eq!(g.data(z), &[2.5]);
    }

    #[test]
    fn downsample_rejects_odd_extent() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 1, 3, 2], vec![1.0; 6]);
        let err = g.downsample2(x).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }

    #[test]
    fn upsample_replicates() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 1, 1, 1], vec![7.0]);
        let y = g.upsample2(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.data(y), &[7.0; 4]);
    }

    #[test]
    fn l1_mean_hand_values_and_mismatch() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let same = g.l1_mean(a, a).unwrap();
        assert_eq!(g.scalar(same), 0.0);
        let half = g.l1_mean(a, b).unwrap();
        assert_eq!(g.scalar(half), 0.5);

        let c = g.leaf(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
        let d = g.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let two = g.l1_mean(c, d).unwrap();
        assert_eq!(g.scalar(two), 2.0);

        let e = g.leaf(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let err = g.l1_mean(a, e).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)), "got {err:?}");
    }

    #[test]
    fn gaussian_kl_hand_values() {
        let mut g = Graph::new();
        // Standard normal: zero divergence.
        let mu0 = g.leaf(Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap());
        let lv0 = g.leaf(Tensor::new(vec![1, 2], vec![0.0f64, 0.0]).unwrap());
        let zero = g.gaussian_kl(mu0, lv0).unwrap();
        assert_eq!(g.scalar(zero), 0.0);

        // Unit mean offset in one of two coordinates: 0.5·(1) = 0.5.
        let mu1 = g.leaf(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let half = g.gaussian_kl(mu1, lv0).unwrap();
        assert!((g.scalar(half) - 0.5).abs() < 1e-12);

        // Variance 2 in a single coordinate: 0.5·(2 − ln 2 − 1).
        let mu2 = g.leaf(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
        let lv2 = g.leaf(Tensor::new(vec![1, 1], vec![(2.0f64).ln()]).unwrap());
        let v = g.gaussian_kl(mu2, lv2).unwrap();
        assert!((g.scalar(v) - 0.5 * (1.0 - (2.0f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let mut g = Graph::new();
        let logits = g
            .leaf(Tensor::new(vec![1, 4], vec![0.0; 4]).unwrap().with_requires_grad(true));
        let loss = g.softmax_cross_entropy(logits, &[2]).unwrap();
        assert!((g.scalar(loss) - (4.0f64).ln()).abs() < 1e-12);
        g.backward(loss).unwrap();
        let grad = g.grad(logits).unwrap();
        // softmax − one-hot: 0.25 everywhere except −0.75 at the label.
        assert!((grad[2] + 0.75).abs() < 1e-12);
        assert!((grad[0] - 0.25).abs() < 1e-12);
        let total: f64 = grad.iter().sum();
        assert!(total.abs() < 1e-12, "rows of the CE gradient sum to 0");
    }

    #[test]
    fn clamp_saturates_and_masks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::new(vec![3], vec![-2.0f64, 0.5, 3.0]).unwrap().with_requires_grad(true),
        );
        let y = g.clamp(x, 0.0, 1.0).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.5, 1.0]);
        // Monotone scalar readout: mean |y − (−10)| = mean(y + 10).
        let t = g.constant(Tensor::new(vec![3], vec![-10.0; 3]).unwrap());
        let loss = g.l1_mean(y, t).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(x).unwrap();
        assert_eq!(grad[0], 0.0);
        assert!((grad[1] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(grad[2], 0.0);
    }

    #[test]
    fn two_backward_passes_double_leaf_gradients() {
        let mut g = Graph::new();
        let x = leaf4(&mut g, [1, 1, 2, 2], vec![0.3, -0.7, 1.1, 0.9]);
        let k = leaf4(&mut g, [1, 1, 2, 2], vec![0.5, -0.25, 0.75, 1.5]);
        let t = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.2]).unwrap());
        let c = g.conv2d(x, k, 1, 0).unwrap();
        let a = g.elu(c).unwrap();
        let loss = g.l1_mean(a, t).unwrap();

        g.backward(loss).unwrap();
        let once: Vec<f64> = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let twice = g.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn barriers_stop_gradient_flow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0f64).with_requires_grad(true));
        let y = g.scale(x, 3.0).unwrap();
        let through = g.mul(x, x).unwrap(); // x² path bypassing the barrier
        let blocked = g.mul(y, y).unwrap(); // (3x)² path through it
        let loss = g.add(through, blocked).unwrap();

        g.backward_stopping(loss, &[y]).unwrap();
        // Only d(x²)/dx = 2x survives.
        assert_eq!(g.grad(x).unwrap(), &[4.0]);

        g.zero_grads();
        g.backward(loss).unwrap();
        // Full gradient: 2x + 18x = 40 at x = 2.
        assert_eq!(g.grad(x).unwrap(), &[40.0]);
    }

    #[test]
    fn backward_needs_a_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true));
        let y = g.scale(x, 2.0).unwrap();
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, Error::Usage(_)), "got {err:?}");
    }

    #[test]
    fn kink_margin_tracks_closest_elu_input() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![3], vec![0.5, -0.02, 1.0]).unwrap());
        let _ = g.elu(x).unwrap();
        assert!((g.kink_margin() - 0.02).abs() < 1e-12);
    }

    fn plane_strategy() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<f32>)> {
        (1usize..3, 1usize..3, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| {
            proptest::collection::vec(-100.0f32..100.0, b * c * h * w)
                .prop_map(move |data| (b, c, h, w, data))
        })
    }

    proptest! {
        #[test]
        fn upsample_then_downsample_is_identity((b, c, h, w, data) in plane_strategy()) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::new(vec![b, c, h, w], data.clone()).unwrap());
            let up = g.upsample2(x).unwrap();
            let down = g.downsample2(up).unwrap();
            prop_assert_eq!(g.data(down), &data[..]);
        }

        #[test]
        fn conv_is_linear_in_its_input(
            (b, c, h, w, data) in plane_strategy(),
            data2_seed in any::<u64>(),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            // Second operand derived deterministically from the seed.
            let mut s = data2_seed | 1;
            let data_a: Vec<f64> = data.iter().map(|&v| v as f64).collect();
            let data_b: Vec<f64> = data_a
                .iter()
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
                })
                .collect();
            let kdata: Vec<f64> = (0..c * 9)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
                })
                .collect();

            let mut g = Graph::new();
            let k = g.leaf(Tensor::new(vec![1, c, 3, 3], kdata).unwrap());
            let xa = g.leaf(Tensor::new(vec![b, c, h, w], data_a.clone()).unwrap());
            let xb = g.leaf(Tensor::new(vec![b, c, h, w], data_b.clone()).unwrap());
            let mixed_in: Vec<f64> = data_a
                .iter()
                .zip(&data_b)
                .map(|(&x, &y)| alpha * x + beta * y)
                .collect();
            let xm = g.leaf(Tensor::new(vec![b, c, h, w], mixed_in).unwrap());

            let ya = g.conv2d(xa, k, 1, 1).unwrap();
            let yb = g.conv2d(xb, k, 1, 1).unwrap();
            let ym = g.conv2d(xm, k, 1, 1).unwrap();

            for ((&va, &vb), &vm) in g.data(ya).iter().zip(g.data(yb)).zip(g.data(ym)) {
                let expect = alpha * va + beta * vb;
                let scale = vm.abs().max(expect.abs()).max(1.0);
                prop_assert!((vm - expect).abs() / scale < 1e-6);
            }
        }
    }
}
