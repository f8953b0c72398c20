//! Define-by-run gradient tape.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append a node and return its [`Var`] handle; [`Tape::backward`] walks the
//! nodes in reverse insertion order, which is a valid reverse topological
//! order because an operation can only consume handles that already exist.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Positive-definite kernel used for Gram matrices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    /// `exp(−‖a−b‖² / scale)`
    Rbf,
    /// `scale / (scale + ‖a−b‖²)`
    Imq,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geometry: ConvGeometry },
    ConvTranspose2d { x: Var, k: Var, geometry: ConvGeometry },
    ChannelBias { x: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, mean: bool },
    Mse { a: Var, b: Var },
    KernelGram { a: Var, b: Var, kind: KernelKind, scale: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Reshape(Var),
    SelectColumn { x: Var, column: usize },
    Margin { logits: Var, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn ensure_finite<T: Real>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn check_labels(op: &'static str, labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(TensorError::shape(op, format!("{} labels for batch of {batch}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(TensorError::Index { op, index: bad, bound: classes });
    }
    Ok(())
}

/// Index of the largest entry of `row` other than `skip`; ties resolve to the lowest index.
fn argmax_excluding<T: Real>(row: &[T], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if i == skip {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input value. Gradients are only produced for leaves created
    /// with `requires_grad` and for nodes depending on them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        ensure_finite(name, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::Contract(format!("variable {} is not on this tape", v.0)))
        }
    }

    /// `out[b,o] = Σ_i x[b,i]·w[i,o] + bias[o]`
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(TensorError::shape("dense", format!("x{xs:?} · w{ws:?} + b{bs:?}")));
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); batch * outputs];
        for row in out.chunks_mut(outputs) {
            row.copy_from_slice(self.value(b).data());
        }
        kernels::matmul_acc(self.value(x).data(), self.value(w).data(), batch, inputs, outputs, &mut out);
        let value = Tensor::new(vec![batch, outputs], out)?;
        self.push("dense", value, Op::Dense { x, w, b }, &[x, w, b])
    }

    /// Cross-correlation of `x[B,C,H,W]` with `k[F,C,Kh,Kw]`.
    ///
    /// Output extents are `⌊(H + 2·padding − Kh)/stride⌋ + 1`; trailing rows
    /// and columns that do not fill a whole window are not visited.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(TensorError::shape("conv2d", format!("input {xs:?} with kernel {ks:?}")));
        }
        let geometry = ConvGeometry::new(xs[1], xs[2], xs[3], ks[2], ks[3], stride, padding).ok_or_else(|| {
            TensorError::shape(
                "conv2d",
                format!("kernel {}x{} stride {stride} padding {padding} does not fit {}x{}", ks[2], ks[3], xs[2], xs[3]),
            )
        })?;
        let (batch, filters) = (xs[0], ks[0]);
        let positions = geometry.col_cols();
        let mut cols = vec![T::zero(); geometry.col_rows() * positions];
        let mut out = vec![T::zero(); batch * filters * positions];
        let (xv, kv) = (self.value(x), self.value(k));
        for (bi, dst) in out.chunks_mut(filters * positions).enumerate() {
            kernels::im2col(xv.sample(bi), &geometry, &mut cols);
            kernels::matmul_acc(kv.data(), &cols, filters, geometry.col_rows(), positions, dst);
        }
        let value = Tensor::new(vec![batch, filters, geometry.out_h, geometry.out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, geometry }, &[x, k])
    }

    /// Adjoint of [`Tape::conv2d`] with respect to its input: maps
    /// `x[B,Cin,H,W]` through `k[Cin,Cout,Kh,Kw]` to
    /// `[B,Cout,(H−1)·stride − 2·padding + Kh + output_padding, …]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ks) = (self.value(x).shape().to_vec(), self.value(k).shape().to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] {
            return Err(TensorError::shape("conv_transpose2d", format!("input {xs:?} with kernel {ks:?}")));
        }
        if stride == 0 || output_padding >= stride {
            return Err(TensorError::Param {
                op: "conv_transpose2d",
                detail: format!("output_padding {output_padding} must be below stride {stride}"),
            });
        }
        let extent = |n: usize, kernel: usize| -> Option<usize> {
            ((n - 1) * stride + kernel + output_padding).checked_sub(2 * padding).filter(|&e| e > 0)
        };
        let geometry = extent(xs[2], ks[2])
            .zip(extent(xs[3], ks[3]))
            .and_then(|(h, w)| ConvGeometry::new(ks[1], h, w, ks[2], ks[3], stride, padding))
            .filter(|g| g.out_h == xs[2] && g.out_w == xs[3])
            .ok_or_else(|| TensorError::shape("conv_transpose2d", format!("input {xs:?} kernel {ks:?} stride {stride}")))?;
        let (batch, cin) = (xs[0], xs[1]);
        let positions = geometry.col_cols();
        let mut cols = vec![T::zero(); geometry.col_rows() * positions];
        let mut out = vec![T::zero(); batch * geometry.image_len()];
        let (xv, kv) = (self.value(x), self.value(k));
        for (bi, dst) in out.chunks_mut(geometry.image_len()).enumerate() {
            cols.iter_mut().for_each(|c| *c = T::zero());
            kernels::matmul_at_b_acc(kv.data(), xv.sample(bi), cin, geometry.col_rows(), positions, &mut cols);
            kernels::col2im_acc(&cols, &geometry, dst);
        }
        let value = Tensor::new(vec![batch, geometry.channels, geometry.height, geometry.width], out)?;
        self.push("conv_transpose2d", value, Op::ConvTranspose2d { x, k, geometry }, &[x, k])
    }

    /// Adds `b[C]` to every position of channel `c` in `x[B,C,H,W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.value(x).shape(), self.value(b).shape());
        if xs.len() != 4 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(TensorError::shape("channel_bias", format!("x{xs:?} + b{bs:?}")));
        }
        let plane = xs[2] * xs[3];
        let channels = xs[1];
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v = *v + bias[(i / plane) % channels];
        }
        self.push("channel_bias", value, Op::ChannelBias { x, b }, &[x, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(T::tanh);
        self.push("tanh", value, Op::Tanh(x), &[x])
    }

    /// Row-wise softmax of `x[B,K]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::shape("softmax", format!("expected [B,K], got {:?}", xv.shape())));
        }
        let k = xv.shape()[1];
        let mut out = vec![T::zero(); xv.numel()];
        for (src, dst) in xv.data().chunks(k).zip(out.chunks_mut(k)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
            }
            let total: T = dst.iter().copied().sum();
            dst.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(x), &[x])
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], mean: bool) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 {
            return Err(TensorError::shape("cross_entropy", format!("expected [B,K], got {:?}", lv.shape())));
        }
        let (batch, k) = (lv.shape()[0], lv.shape()[1]);
        check_labels("cross_entropy", labels, batch, k)?;
        let mut scratch = vec![T::zero(); k];
        let per_sample: Vec<T> = lv
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| {
                log_softmax_row(row, &mut scratch);
                -scratch[y]
            })
            .collect();
        let value = if mean {
            let n = T::from_usize(batch).unwrap();
            Tensor::scalar(per_sample.iter().copied().sum::<T>() / n)
        } else {
            Tensor::new(vec![batch], per_sample)?
        };
        self.push("cross_entropy", value, Op::CrossEntropy { logits, labels: labels.to_vec(), mean }, &[logits])
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, true)
    }

    /// Per-sample cross-entropy, shape `[B]`.
    pub fn cross_entropy_each(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, false)
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape("mse", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let n = T::from_usize(av.numel()).unwrap();
        let value = Tensor::scalar(kernels::sq_dist(av.data(), bv.data()) / n);
        self.push("mse", value, Op::Mse { a, b }, &[a, b])
    }

    /// Gram matrix `[N,M]` between the rows of `a[N,Z]` and `b[M,Z]`.
    pub fn kernel_gram(&mut self, a: Var, b: Var, kind: KernelKind, scale: T) -> Result<Var> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(TensorError::Param { op: "kernel_gram", detail: format!("scale must be positive, got {scale}") });
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return Err(TensorError::shape("kernel_gram", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let (n, m) = (av.shape()[0], bv.shape()[0]);
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let d = kernels::sq_dist(av.sample(i), bv.sample(j));
                out.push(match kind {
                    KernelKind::Rbf => (-d / scale).exp(),
                    KernelKind::Imq => scale / (scale + d),
                });
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("kernel_gram", value, Op::KernelGram { a, b, kind, scale }, &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(TensorError::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, Op::Scale(x, factor), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + offset);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::from_usize(xv.numel()).unwrap());
        self.push("mean", value, Op::Mean(x), &[x])
    }

    /// Sums each leading-axis slice: `[B, ...] → [B]`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() == 0 {
            return Err(TensorError::shape("sum_per_sample", "scalar input"));
        }
        let data = xv.data().chunks(xv.sample_len()).map(|c| c.iter().copied().sum()).collect();
        let value = Tensor::new(vec![xv.batch()], data)?;
        self.push("sum_per_sample", value, Op::SumPerSample(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Picks column `column` of `x[B,K]`, giving `[B]`.
    pub fn select_column(&mut self, x: Var, column: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(TensorError::shape("select_column", format!("expected [B,K], got {:?}", xv.shape())));
        }
        let k = xv.shape()[1];
        if column >= k {
            return Err(TensorError::Index { op: "select_column", index: column, bound: k });
        }
        let data = xv.data().chunks(k).map(|row| row[column]).collect();
        let value = Tensor::new(vec![xv.batch()], data)?;
        self.push("select_column", value, Op::SelectColumn { x, column }, &[x])
    }

    /// Per-sample hinge on the label margin:
    /// `max(z_y − max_{i≠y} z_i + kappa, 0)`, shape `[B]`.
    pub fn margin_loss(&mut self, logits: Var, labels: &[usize], kappa: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[1] < 2 {
            return Err(TensorError::shape("margin_loss", format!("expected [B,K≥2], got {:?}", lv.shape())));
        }
        let (batch, k) = (lv.shape()[0], lv.shape()[1]);
        check_labels("margin_loss", labels, batch, k)?;
        let data = lv
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| (row[y] - row[argmax_excluding(row, y)] + kappa).max(T::zero()))
            .collect();
        let value = Tensor::new(vec![batch], data)?;
        self.push("margin_loss", value, Op::Margin { logits, labels: labels.to_vec() }, &[logits])
    }

    /// Reverse pass from the scalar `loss`. Every node that requires a
    /// gradient and lies upstream of `loss` receives one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, delta: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inputs, outputs) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); batch * inputs];
                    kernels::matmul_a_bt_acc(g.data(), wv.data(), batch, outputs, inputs, &mut dx);
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); inputs * outputs];
                    kernels::matmul_at_b_acc(xv.data(), g.data(), batch, inputs, outputs, &mut dw);
                    acc(*w, Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); outputs];
                    for row in g.data().chunks(outputs) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    acc(*b, Tensor::new(vec![outputs], db).unwrap());
                }
            }
            Op::Conv2d { x, k, geometry } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let filters = kv.shape()[0];
                let (rows, positions) = (geometry.col_rows(), geometry.col_cols());
                let mut cols = vec![T::zero(); rows * positions];
                let mut dk = self.wants(*k).then(|| vec![T::zero(); kv.numel()]);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.numel()]);
                for (bi, gout) in g.data().chunks(filters * positions).enumerate() {
                    if let Some(dk) = dk.as_mut() {
                        kernels::im2col(xv.sample(bi), geometry, &mut cols);
                        kernels::matmul_a_bt_acc(gout, &cols, filters, positions, rows, dk);
                    }
                    if let Some(dx) = dx.as_mut() {
                        cols.iter_mut().for_each(|c| *c = T::zero());
                        kernels::matmul_at_b_acc(kv.data(), gout, filters, rows, positions, &mut cols);
                        let len = geometry.image_len();
                        kernels::col2im_acc(&cols, geometry, &mut dx[bi * len..(bi + 1) * len]);
                    }
                }
                if let Some(dk) = dk {
                    acc(*k, Tensor::new(kv.shape().to_vec(), dk).unwrap());
                }
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
            }
            Op::ConvTranspose2d { x, k, geometry } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let cin = kv.shape()[0];
                let (rows, positions) = (geometry.col_rows(), geometry.col_cols());
                let mut cols = vec![T::zero(); rows * positions];
                let mut dk = self.wants(*k).then(|| vec![T::zero(); kv.numel()]);
                let mut dx = self.wants(*x).then(|| vec![T::zero(); xv.numel()]);
                for (bi, gout) in g.data().chunks(geometry.image_len()).enumerate() {
                    kernels::im2col(gout, geometry, &mut cols);
                    if let Some(dx) = dx.as_mut() {
                        let len = cin * positions;
                        kernels::matmul_acc(kv.data(), &cols, cin, rows, positions, &mut dx[bi * len..(bi + 1) * len]);
                    }
                    if let Some(dk) = dk.as_mut() {
                        kernels::matmul_a_bt_acc(xv.sample(bi), &cols, cin, positions, rows, dk);
                    }
                }
                if let Some(dk) = dk {
                    acc(*k, Tensor::new(kv.shape().to_vec(), dk).unwrap());
                }
                if let Some(dx) = dx {
                    acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
            }
            Op::ChannelBias { x, b } => {
                if self.wants(*x) {
                    acc(*x, g.clone());
                }
                if self.wants(*b) {
                    let s = g.shape();
                    let (channels, plane) = (s[1], s[2] * s[3]);
                    let mut db = vec![T::zero(); channels];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        db[i % channels] = db[i % channels] + chunk.iter().copied().sum::<T>();
                    }
                    acc(*b, Tensor::new(vec![channels], db).unwrap());
                }
            }
            Op::Relu(x) => {
                let data = out.data().iter().zip(g.data()).map(|(&y, &d)| if y > T::zero() { d } else { T::zero() }).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Tanh(x) => {
                let data = out.data().iter().zip(g.data()).map(|(&y, &d)| d * (T::one() - y * y)).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Softmax(x) => {
                let k = out.shape()[1];
                let mut dx = Vec::with_capacity(out.numel());
                for (s, d) in out.data().chunks(k).zip(g.data().chunks(k)) {
                    let dot: T = s.iter().zip(d).map(|(&a, &b)| a * b).sum();
                    dx.extend(s.iter().zip(d).map(|(&si, &di)| si * (di - dot)));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), dx).unwrap());
            }
            Op::CrossEntropy { logits, labels, mean } => {
                let lv = self.value(*logits);
                let (batch, k) = (lv.shape()[0], lv.shape()[1]);
                let n = T::from_usize(batch).unwrap();
                let mut dx = vec![T::zero(); lv.numel()];
                for (i, (row, dst)) in lv.data().chunks(k).zip(dx.chunks_mut(k)).enumerate() {
                    let weight = if *mean { g.data()[0] / n } else { g.data()[i] };
                    log_softmax_row(row, dst);
                    for (j, v) in dst.iter_mut().enumerate() {
                        let p = v.exp();
                        let target = if j == labels[i] { T::one() } else { T::zero() };
                        *v = (p - target) * weight;
                    }
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), dx).unwrap());
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let factor = T::from_f64_lossy(2.0) * g.data()[0] / T::from_usize(av.numel()).unwrap();
                let diff: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * factor).collect();
                if self.wants(*b) {
                    acc(*b, Tensor::new(bv.shape().to_vec(), diff.iter().map(|&d| -d).collect()).unwrap());
                }
                if self.wants(*a) {
                    acc(*a, Tensor::new(av.shape().to_vec(), diff).unwrap());
                }
            }
            Op::KernelGram { a, b, kind, scale } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, z) = (av.shape()[0], bv.shape()[0], av.shape()[1]);
                let two = T::from_f64_lossy(2.0);
                let mut da = vec![T::zero(); n * z];
                let mut db = vec![T::zero(); m * z];
                for i in 0..n {
                    for j in 0..m {
                        let kij = out.data()[i * m + j];
                        // d k / d ‖a_i − b_j‖²
                        let dk_dd = match kind {
                            KernelKind::Rbf => -kij / *scale,
                            KernelKind::Imq => -kij * kij / *scale,
                        };
                        let coef = g.data()[i * m + j] * dk_dd * two;
                        let (ai, bj) = (av.sample(i), bv.sample(j));
                        for c in 0..z {
                            let d = coef * (ai[c] - bj[c]);
                            da[i * z + c] = da[i * z + c] + d;
                            db[j * z + c] = db[j * z + c] - d;
                        }
                    }
                }
                if self.wants(*a) {
                    acc(*a, Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.wants(*b) {
                    acc(*b, Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.clone());
                }
                if self.wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let data = g.data().iter().zip(bv.data()).map(|(&d, &y)| d * y).collect();
                    acc(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                if self.wants(*b) {
                    let data = g.data().iter().zip(av.data()).map(|(&d, &x)| d * x).collect();
                    acc(*b, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
            }
            Op::Scale(x, factor) => acc(*x, g.map(|v| v * *factor)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let v = g.data()[0] / T::from_usize(xv.numel()).unwrap();
                acc(*x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::SumPerSample(x) => {
                let xv = self.value(*x);
                let per = xv.sample_len();
                let data = (0..xv.numel()).map(|i| g.data()[i / per]).collect();
                acc(*x, Tensor::new(xv.shape().to_vec(), data).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.reshape(shape).unwrap());
            }
            Op::SelectColumn { x, column } => {
                let xv = self.value(*x);
                let k = xv.shape()[1];
                let mut dx = vec![T::zero(); xv.numel()];
                for (i, &d) in g.data().iter().enumerate() {
                    dx[i * k + column] = d;
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Margin { logits, labels } => {
                let lv = self.value(*logits);
                let k = lv.shape()[1];
                let mut dx = vec![T::zero(); lv.numel()];
                for (i, row) in lv.data().chunks(k).enumerate() {
                    if out.data()[i] > T::zero() {
                        let other = argmax_excluding(row, labels[i]);
                        dx[i * k + labels[i]] = g.data()[i];
                        dx[i * k + other] = -g.data()[i];
                    }
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), dx).unwrap());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.dense(z, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_rejects_mismatched_inner_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 3]));
        let w = tape.constant(Tensor::zeros(vec![2, 2]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.dense(x, w, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 1, 3, 4], |i| i as f32 * 0.5 - 2.0));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let zero = tape.constant(Tensor::zeros(vec![3, 1, 2, 2]));
        let y = tape.conv2d(x, zero, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_kernel_larger_than_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(vec![1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(TensorError::Shape { .. })));
        let k = tape.constant(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(tape.conv2d(x, k, 1, 0).is_err());
    }

    #[test]
    fn conv_transpose_restores_extent() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 7, 7]));
        let k = tape.constant(Tensor::ones(vec![2, 3, 3, 3]));
        let y = tape.conv_transpose2d(x, k, 2, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 3, 14, 14]);
        assert!(tape.conv_transpose2d(x, k, 2, 1, 2).is_err());
    }

    #[test]
    fn softmax_relu_cross_entropy_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax(x).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let r = tape.constant(t(&[3], &[-1.0, 2.0, 0.0]));
        let r = tape.relu(r).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0, 0.0]);

        let logits = tape.constant(t(&[1, 2], &[10.0, -10.0]));
        let ce = tape.cross_entropy(logits, &[0]).unwrap();
        // −log(e^10 / (e^10 + e^−10)) = ln(1 + e^−20)
        let oracle = (1.0f64 + (-20.0f64).exp()).ln();
        assert!((tape.value(ce).item().unwrap() as f64 - oracle).abs() < 1e-7);
        assert!(matches!(tape.cross_entropy(logits, &[2]), Err(TensorError::Index { .. })));
    }

    #[test]
    fn kernel_gram_limits_and_parameters() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(vec![1, 2], vec![0.5, -1.0]).unwrap());
        let far = tape.constant(Tensor::new(vec![1, 2], vec![1e6, 1e6]).unwrap());
        for kind in [KernelKind::Rbf, KernelKind::Imq] {
            let g = tape.kernel_gram(a, a, kind, 3.0).unwrap();
            assert_eq!(tape.value(g).data(), &[1.0]);
            let g = tape.kernel_gram(a, far, kind, 3.0).unwrap();
            assert!(tape.value(g).data()[0] < 1e-10);
        }
        assert!(matches!(tape.kernel_gram(a, a, KernelKind::Imq, 0.0), Err(TensorError::Param { .. })));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 3], |i| i as f32), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));

        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[1], &[2.0]), true);
        let zero = tape.constant(t(&[1], &[0.0]));
        let loss = tape.mse(x, zero).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(vec![2]), true);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
        assert!(matches!(tape.backward(Var(99)), Err(TensorError::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(t(&[1], &[f32::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn margin_loss_picks_runner_up() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(t(&[2, 3], &[3.0, 1.0, 2.0, 0.0, 5.0, 1.0]), true);
        let m = tape.margin_loss(z, &[0, 0], 0.5).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, 0.0]);
        let s = tape.sum(m).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
    }
}
