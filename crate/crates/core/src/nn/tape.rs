//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node; `backward` walks the nodes
//! in exact reverse order. Nodes that do not depend on a gradient-requiring
//! leaf are skipped on the way back.

use crate::error::{Error, Result};
use crate::nn::param::Parameter;
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with stored running statistics.
    Eval,
}

/// Per-channel statistics measured by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    Matmul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    DivScalar { x: Var, z: Var },
    Exp(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    MaxPool { x: Var, k: usize, stride: usize },
    GlobalAvgPool(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Softmax(Var),
    LogSoftmax { x: Var, mask: Option<Vec<bool>> },
    NormalizeRows { x: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    WeightedSum { x: Var, weights: Vec<T> },
    Reshape(Var),
    Transpose(Var),
    ConcatChannels(Vec<Var>),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    macs: u64,
}

/// Result of [`Tape::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Bytes held by all computed gradients.
    pub fn bytes(&self) -> u64 {
        self.grads.iter().flatten().map(|g| (g.numel() * T::DTYPE.size()) as u64).sum()
    }

    /// Adds the gradient of each bound variable into its trainable parameter.
    pub fn accumulate<'a>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>, bound: &Bound) {
        for (p, &v) in params.into_iter().zip(&bound.vars) {
            if !p.trainable {
                continue;
            }
            if let Some(g) = self.get(v) {
                p.grad.add_assign(g);
            }
        }
    }
}

/// Tape variables for a module's parameters, in `parameters()` order.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn cursor(&self) -> impl Iterator<Item = Var> + '_ {
        self.vars.iter().copied()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if k > padded || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, input: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * n;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        let dst = &mut cols[row + oy * self.wo..row + (oy + 1) * self.wo];
                        if y < 0 || y >= self.h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &input[(c * self.h + y as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            *d = if x < 0 || x >= self.w as isize { T::zero() } else { src[x as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], out: &mut [T]) {
        let n = self.cols();
        for c in 0..self.cin {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = ((c * self.kh + i) * self.kw + j) * n;
                    for oy in 0..self.ho {
                        let y = (oy * self.stride + i) as isize - self.pad as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let dst = &mut out[(c * self.h + y as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let x = (ox * self.stride + j) as isize - self.pad as isize;
                            if x >= 0 && x < self.w as isize {
                                dst[x as usize] += cols[row + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Splits `[B, C, rest..]` into (B, C, product(rest)).
fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!("need at least [B, C], got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn rows2d(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(format!("expected a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates executed by conv and matmul ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Bytes held by every recorded value (what a backward pass keeps alive).
    pub fn stored_bytes(&self) -> u64 {
        self.nodes.iter().map(|n| (n.value.numel() * T::DTYPE.size()) as u64).sum()
    }

    /// Largest input+output footprint of any single op (streaming inference).
    pub fn peak_op_bytes(&self) -> u64 {
        let size = T::DTYPE.size() as u64;
        self.nodes
            .iter()
            .map(|n| {
                let inputs: u64 = self.inputs_of(&n.op).iter().map(|v| self.nodes[v.0].value.numel() as u64).sum();
                (inputs + n.value.numel() as u64) * size
            })
            .max()
            .unwrap_or(0)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        self.leaf(p.value.clone(), p.trainable)
    }

    pub fn bind<'a>(&mut self, params: impl IntoIterator<Item = &'a Parameter<T>>) -> Bound {
        Bound { vars: params.into_iter().map(|p| self.param(p)).collect() }
    }

    /// Binds parameters as constants: no gradient flows into them.
    pub fn bind_frozen<'a>(&mut self, params: impl IntoIterator<Item = &'a Parameter<T>>) -> Bound {
        Bound { vars: params.into_iter().map(|p| self.constant(p.value.clone())).collect() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite output from {}", op_name(&op))));
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Matmul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::DivScalar { x, z } => vec![*x, *z],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale(x, _)
            | Op::Exp(x)
            | Op::Relu(x)
            | Op::LeakyRelu(x, _)
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Softmax(x)
            | Op::LogSoftmax { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumLastAxis(x)
            | Op::WeightedSum { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
            Op::ConcatChannels(parts) => parts.clone(),
        }
    }

    // ---- ops -------------------------------------------------------------

    /// Cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let ([b, cin, h, w], [cout, kcin, kh, kw]) = (
            <[usize; 4]>::try_from(xs.as_slice()).map_err(|_| Error::shape(format!("conv input {xs:?}")))?,
            <[usize; 4]>::try_from(ks.as_slice()).map_err(|_| Error::shape(format!("conv kernel {ks:?}")))?,
        );
        if kcin != cin {
            return Err(Error::shape(format!("conv channels: input {cin}, kernel {kcin}")));
        }
        let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(w, kw, stride, pad)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape(format!("kernel {kh}x{kw} stride {stride} on {h}x{w} pad {pad}"))),
        };
        let g = ConvGeom { cin, h, w, kh, kw, ho, wo, stride, pad };
        let mut out = vec![T::zero(); b * cout * g.cols()];
        let mut cols = vec![T::zero(); g.rows() * g.cols()];
        {
            let x = self.value(input).data();
            let k = self.value(kernel).data();
            for bi in 0..b {
                g.im2col(&x[bi * cin * h * w..(bi + 1) * cin * h * w], &mut cols);
                let o = &mut out[bi * cout * g.cols()..(bi + 1) * cout * g.cols()];
                T::gemm(cout, g.rows(), g.cols(), k, false, &cols, false, o, false);
            }
        }
        self.macs += (b * cout * g.rows() * g.cols()) as u64;
        self.push(Tensor::new([b, cout, ho, wo], out)?, Op::Conv2d { input, kernel, stride, pad })
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = rows2d(self.value(a).shape())?;
        let (k2, n) = rows2d(self.value(b).shape())?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.macs += (m * k * n) as u64;
        self.push(Tensor::new([m, n], out)?, Op::Matmul { a, b })
    }

    /// Adds `bias[c]` along axis 1 of `[B, C, ..]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c, inner) = channel_dims(self.value(x).shape())?;
        if self.value(bias).numel() != c {
            return Err(Error::shape(format!("bias of {} for {c} channels", self.value(bias).numel())));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        self.push(out, Op::AddBias { x, bias })
    }

    /// Affine layer: `x · weight + bias`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_bias(y, bias)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.value(a).same_shape(self.value(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let t = self.value(x).scale(c);
        self.push(t, Op::Scale(x, c))
    }

    /// Divides every element by the single element of `z`.
    pub fn div_scalar(&mut self, x: Var, z: Var) -> Result<Var> {
        if self.value(z).numel() != 1 {
            return Err(Error::shape(format!("divisor must be scalar, got {:?}", self.value(z).shape())));
        }
        let zv = self.value(z).item();
        let t = self.value(x).map(|v| v / zv);
        self.push(t, Op::DivScalar { x, z })
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.exp());
        self.push(t, Op::Exp(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(t, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(t, Op::LeakyRelu(x, slope))
    }

    /// Max over `k×k` windows of `[B, C, H, W]`; ties go to the first element.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        let [b, c, h, w] = <[usize; 4]>::try_from(s.as_slice()).map_err(|_| Error::shape(format!("maxpool input {s:?}")))?;
        let (ho, wo) = match (conv_out(h, k, stride, 0), conv_out(w, k, stride, 0)) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(Error::shape(format!("pool {k} stride {stride} on {h}x{w}"))),
        };
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let p = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    for i in 0..k {
                        for j in 0..k {
                            let v = p[(oy * stride + i) * w + ox * stride + j];
                            if v > best {
                                best = v;
                            }
                        }
                    }
                    out.push(best);
                }
            }
        }
        self.push(Tensor::new([b, c, ho, wo], out)?, Op::MaxPool { x, k, stride })
    }

    /// `[B, C, H, W]` → `[B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, inner) = channel_dims(self.value(x).shape())?;
        let n = T::c(inner as f64);
        let xd = self.value(x).data();
        let out = (0..b * c).map(|i| xd[i * inner..(i + 1) * inner].iter().copied().sum::<T>() / n).collect();
        self.push(Tensor::new([b, c], out)?, Op::GlobalAvgPool(x))
    }

    /// Batch normalization over axis 1 of `[B, C, ..]`.
    ///
    /// Train mode normalizes with the batch's own (biased) statistics and
    /// returns them; Eval mode uses `running` and returns `None`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[T], &[T]),
        mode: BnMode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (b, c, inner) = channel_dims(self.value(x).shape())?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape(format!("batch norm affine params for {c} channels")));
        }
        let xd = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Eval => {
                if running.0.len() != c || running.1.len() != c {
                    return Err(Error::shape(format!("running stats for {c} channels")));
                }
                (running.0.to_vec(), running.1.to_vec())
            }
            BnMode::Train => {
                let m = T::c((b * inner) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        mean[ch] += xd[(bi * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for bi in 0..b {
                    for ch in 0..c {
                        var[ch] += xd[(bi * c + ch) * inner..][..inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                (mean, var)
            }
        };
        let mut inv_std = Vec::with_capacity(c);
        for &v in &var {
            let d = v + eps;
            if !(d > T::zero()) {
                return Err(Error::Numerical(format!("batch norm variance + eps = {d}")));
            }
            inv_std.push(T::one() / d.sqrt());
        }
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = Vec::with_capacity(xd.len());
        for (i, &v) in xd.iter().enumerate() {
            let ch = (i / inner) % c;
            out.push(g[ch] * (v - mean[ch]) * inv_std[ch] + be[ch]);
        }
        let shape = self.value(x).shape().to_vec();
        let train = mode == BnMode::Train;
        let stats = train.then(|| BatchStats { mean: mean.clone(), var });
        let v = self.push(Tensor::new(shape, out)?, Op::BatchNorm { x, gamma, beta, mean, inv_std, train })?;
        Ok((v, stats))
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows2d(self.value(x).shape())?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in 0..c {
                out[i * c + j] = (row[j] - mx).exp();
                z += out[i * c + j];
            }
            out[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= z);
        }
        self.push(Tensor::new([r, c], out)?, Op::Softmax(x))
    }

    /// Row-wise log-softmax. With a mask, excluded entries neither enter the
    /// normalizer nor receive gradient; their output is 0.
    pub fn log_softmax(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let (r, c) = rows2d(self.value(x).shape())?;
        if let Some(m) = &mask {
            if m.len() != r * c {
                return Err(Error::shape(format!("mask of {} for {r}x{c}", m.len())));
            }
        }
        let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let mut mx = T::neg_infinity();
            for j in 0..c {
                if keep(i * c + j) {
                    mx = mx.max(xd[i * c + j]);
                }
            }
            if mx == T::neg_infinity() {
                return Err(Error::Numerical(format!("log-softmax row {i} is fully masked")));
            }
            let mut z = T::zero();
            for j in 0..c {
                if keep(i * c + j) {
                    z += (xd[i * c + j] - mx).exp();
                }
            }
            let lz = mx + z.ln();
            for j in 0..c {
                if keep(i * c + j) {
                    out[i * c + j] = xd[i * c + j] - lz;
                }
            }
        }
        self.push(Tensor::new([r, c], out)?, Op::LogSoftmax { x, mask })
    }

    /// Scales each row of a matrix to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows2d(self.value(x).shape())?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) {
                return Err(Error::Numerical(format!("cannot normalize zero row {i}")));
            }
            out.extend(row.iter().map(|&v| v / n));
            norms.push(n);
        }
        self.push(Tensor::new([r, c], out)?, Op::NormalizeRows { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.sum() / T::c(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// `[.., n]` → `[..]` (a matrix becomes a column of row sums `[r]`).
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("sum_last_axis on {s:?}")));
        }
        let n = *s.last().unwrap();
        let out = self.value(x).data().chunks(n).map(|c| c.iter().copied().sum()).collect();
        self.push(Tensor::new(s[..s.len() - 1].to_vec(), out)?, Op::SumLastAxis(x))
    }

    /// `Σ weights ⊙ x` with constant weights of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        self.value(x).same_shape(weights)?;
        let s = self.value(x).data().iter().zip(weights.data()).map(|(&a, &w)| a * w).sum();
        self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.data().to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// `[B, ..]` → `[B, prod(..)]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.batch(), t.row_len()];
        self.reshape(x, shape)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rows2d(self.value(x).shape())?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        self.push(Tensor::new([c, r], out)?, Op::Transpose(x))
    }

    /// Concatenates `[B, Ci, ..]` tensors along axis 1.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("nothing to concatenate"))?;
        let (b, _, inner) = channel_dims(self.value(*first).shape())?;
        let mut total = 0;
        for p in parts {
            let (pb, pc, pi) = channel_dims(self.value(*p).shape())?;
            if pb != b || pi != inner || self.value(*p).shape()[2..] != self.value(*first).shape()[2..] {
                return Err(Error::shape("concat_channels operands disagree"));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(b * total * inner);
        for bi in 0..b {
            for p in parts {
                let t = self.value(*p);
                let n = t.shape()[1] * inner;
                out.extend_from_slice(&t.data()[bi * n..(bi + 1) * n]);
            }
        }
        let mut shape = self.value(*first).shape().to_vec();
        shape[1] = total;
        self.push(Tensor::new(shape, out)?, Op::ConcatChannels(parts.to_vec()))
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// depends on a gradient-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!("loss must be scalar, got {:?}", self.value(loss).shape())));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            if !dy.is_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at {}", op_name(&node.op))));
            }
            for (input, g) in self.local_grads(node, &dy)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::Numerical("non-finite gradient".into()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node<T>, dy: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, pad } => {
                let xs = self.value(*input).shape();
                let ks = self.value(*kernel).shape();
                let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, kh, kw) = (ks[0], ks[2], ks[3]);
                let ys = node.value.shape();
                let g = ConvGeom { cin, h, w, kh, kw, ho: ys[2], wo: ys[3], stride: *stride, pad: *pad };
                let x = self.value(*input).data();
                let k = self.value(*kernel).data();
                let dyd = dy.data();
                let mut cols = vec![T::zero(); g.rows() * g.cols()];
                let per_out = cout * g.cols();
                let per_in = cin * h * w;
                if self.wants(*kernel) {
                    let mut dk = vec![T::zero(); k.len()];
                    for bi in 0..b {
                        g.im2col(&x[bi * per_in..(bi + 1) * per_in], &mut cols);
                        T::gemm(cout, g.cols(), g.rows(), &dyd[bi * per_out..(bi + 1) * per_out], false, &cols, true, &mut dk, true);
                    }
                    out.push((*kernel, like(*kernel, dk)?));
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); x.len()];
                    for bi in 0..b {
                        T::gemm(g.rows(), cout, g.cols(), k, true, &dyd[bi * per_out..(bi + 1) * per_out], false, &mut cols, false);
                        g.col2im(&cols, &mut dx[bi * per_in..(bi + 1) * per_in]);
                    }
                    out.push((*input, like(*input, dx)?));
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = rows2d(self.value(*a).shape())?;
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, dy.data(), false, self.value(*b).data(), true, &mut da, false);
                    out.push((*a, like(*a, da)?));
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, dy.data(), false, &mut db, false);
                    out.push((*b, like(*b, db)?));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    out.push((*x, dy.clone()));
                }
                if self.wants(*bias) {
                    let (_, c, inner) = channel_dims(dy.shape())?;
                    let mut db = vec![T::zero(); c];
                    for (i, &g) in dy.data().iter().enumerate() {
                        db[(i / inner) % c] += g;
                    }
                    out.push((*bias, like(*bias, db)?));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    out.push((*a, dy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, dy.clone()));
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, dy.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, dy.scale(-T::one())));
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    out.push((*a, like(*a, dy.data().iter().zip(bv).map(|(&g, &y)| g * y).collect())?));
                }
                if self.wants(*b) {
                    out.push((*b, like(*b, dy.data().iter().zip(av).map(|(&g, &x)| g * x).collect())?));
                }
            }
            Op::Scale(x, c) => out.push((*x, dy.scale(*c))),
            Op::DivScalar { x, z } => {
                let zv = self.value(*z).item();
                if self.wants(*x) {
                    out.push((*x, dy.scale(T::one() / zv)));
                }
                if self.wants(*z) {
                    let s: T = dy.data().iter().zip(self.value(*x).data()).map(|(&g, &v)| g * v).sum();
                    out.push((*z, Tensor::scalar(-s / (zv * zv)).reshape(self.value(*z).shape().to_vec())?));
                }
            }
            Op::Exp(x) => {
                out.push((*x, like(*x, dy.data().iter().zip(node.value.data()).map(|(&g, &y)| g * y).collect())?));
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                out.push((*x, like(*x, dy.data().iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect())?));
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                out.push((*x, like(*x, dy.data().iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }).collect())?));
            }
            Op::MaxPool { x, k, stride } => {
                let xs = self.value(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let xd = self.value(*x).data();
                let mut dx = vec![T::zero(); xd.len()];
                for plane in 0..xs[0] * xs[1] {
                    let p = &xd[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut best = T::neg_infinity();
                            let mut at = 0;
                            for i in 0..*k {
                                for j in 0..*k {
                                    let pos = (oy * stride + i) * w + ox * stride + j;
                                    if p[pos] > best {
                                        best = p[pos];
                                        at = pos;
                                    }
                                }
                            }
                            dx[plane * h * w + at] += dy.data()[(plane * ho + oy) * wo + ox];
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, inner) = channel_dims(self.value(*x).shape())?;
                let n = T::c(inner as f64);
                let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g / n, inner)).collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
                let (b, c, inner) = channel_dims(self.value(*x).shape())?;
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let dyd = dy.data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for (i, (&g, &v)) in dyd.iter().zip(xd).enumerate() {
                    let ch = (i / inner) % c;
                    sum_dy[ch] += g;
                    sum_dy_xhat[ch] += g * (v - mean[ch]) * inv_std[ch];
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(xd.len());
                    let m = T::c((b * inner) as f64);
                    for (i, (&g, &v)) in dyd.iter().zip(xd).enumerate() {
                        let ch = (i / inner) % c;
                        let scale = gd[ch] * inv_std[ch];
                        if *train {
                            let xhat = (v - mean[ch]) * inv_std[ch];
                            dx.push(scale * (g - sum_dy[ch] / m - xhat * sum_dy_xhat[ch] / m));
                        } else {
                            dx.push(scale * g);
                        }
                    }
                    out.push((*x, like(*x, dx)?));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, like(*gamma, sum_dy_xhat)?));
                }
                if self.wants(*beta) {
                    out.push((*beta, like(*beta, sum_dy)?));
                }
            }
            Op::Softmax(x) => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (i, (yr, gr)) in y.chunks(c).zip(dy.data().chunks(c)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::LogSoftmax { x, mask } => {
                let c = node.value.shape()[1];
                let keep = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                let y = node.value.data();
                let g = dy.data();
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..y.len() / c {
                    let mut gsum = T::zero();
                    for j in 0..c {
                        if keep(i * c + j) {
                            gsum += g[i * c + j];
                        }
                    }
                    for j in 0..c {
                        let at = i * c + j;
                        if keep(at) {
                            dx[at] = g[at] - y[at].exp() * gsum;
                        }
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::NormalizeRows { x, norms } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for (i, (yr, gr)) in y.chunks(c).zip(dy.data().chunks(c)).enumerate() {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::Sum(x) => {
                let g = dy.item();
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), g)));
            }
            Op::Mean(x) => {
                let n = T::c(self.value(*x).numel() as f64);
                out.push((*x, Tensor::full(self.value(*x).shape().to_vec(), dy.item() / n)));
            }
            Op::SumLastAxis(x) => {
                let n = *self.value(*x).shape().last().unwrap();
                let dx = dy.data().iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                out.push((*x, like(*x, dx)?));
            }
            Op::WeightedSum { x, weights } => {
                let g = dy.item();
                out.push((*x, like(*x, weights.iter().map(|&w| w * g).collect())?));
            }
            Op::Reshape(x) => out.push((*x, dy.reshape(self.value(*x).shape().to_vec())?)),
            Op::Transpose(x) => {
                let (r, c) = rows2d(self.value(*x).shape())?;
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy.data()[j * r + i];
                    }
                }
                out.push((*x, like(*x, dx)?));
            }
            Op::ConcatChannels(parts) => {
                let (b, total, inner) = channel_dims(dy.shape())?;
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    if self.wants(*p) {
                        let mut dx = Vec::with_capacity(b * pc * inner);
                        for bi in 0..b {
                            dx.extend_from_slice(&dy.data()[(bi * total + offset) * inner..][..pc * inner]);
                        }
                        out.push((*p, like(*p, dx)?));
                    }
                    offset += pc;
                }
            }
        }
        Ok(out)
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Matmul { .. } => "matmul",
        Op::AddBias { .. } => "add_bias",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::DivScalar { .. } => "div_scalar",
        Op::Exp(_) => "exp",
        Op::Relu(_) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::MaxPool { .. } => "maxpool2d",
        Op::GlobalAvgPool(_) => "global_avg_pool",
        Op::BatchNorm { .. } => "batch_norm",
        Op::Softmax(_) => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumLastAxis(_) => "sum_last_axis",
        Op::WeightedSum { .. } => "weighted_sum",
        Op::Reshape(_) => "reshape",
        Op::Transpose(_) => "transpose",
        Op::ConcatChannels(_) => "concat_channels",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv2d_direct_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 5.]));
        let k = tape.constant(t(&[1, 1, 2, 2], &[0., 0.5, 0.5, 0.]));
        let y = tape.conv2d(x, k, 2, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn conv2d_averaging_kernel_preserves_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([2, 1, 5, 5], 0.3));
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0 / 9.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn conv2d_counts_macs_and_rejects_bad_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32]));
        let k = tape.constant(Tensor::zeros([8, 3, 3, 3]));
        tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.macs(), 221_184);
        let bad = tape.constant(Tensor::zeros([8, 4, 3, 3]));
        assert!(matches!(tape.conv2d(x, bad, 1, 1), Err(Error::InvalidShape(_))));
        let big = tape.constant(Tensor::zeros([8, 3, 40, 40]));
        assert!(matches!(tape.conv2d(x, big, 1, 1), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1., 1.]));
        let w = tape.constant(t(&[2, 1], &[2., 3.]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5.5]);

        let x = tape.constant(t(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]));
        let eye = tape.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let zero = tape.constant(Tensor::zeros([3]));
        let y = tape.dense(x, eye, zero).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([1, 4]));
        let w = tape.constant(Tensor::zeros([4, 2]));
        tape.matmul(x, w).unwrap();
        assert_eq!(tape.macs(), 8);
        let wrong = tape.constant(Tensor::zeros([3, 2]));
        assert!(tape.matmul(x, wrong).is_err());
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1, 1], &[0., 2.]));
        let g = tape.constant(t(&[1], &[1.]));
        let b = tape.constant(t(&[1], &[0.]));
        let (y, stats) = tape.batch_norm(x, g, b, (&[0.], &[1.]), BnMode::Train, 1e-12).unwrap();
        let y = tape.value(y).data();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_affine_and_eval_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1, 1], &[5., 5.]));
        let g = tape.constant(t(&[1], &[2.]));
        let b = tape.constant(t(&[1], &[3.]));
        let (y, _) = tape.batch_norm(x, g, b, (&[0.], &[1.]), BnMode::Train, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[3., 3.]);

        let data = [0.3, -1.2, 4.0, 0.01];
        let x = tape.constant(t(&[1, 2, 2], &data));
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let (y, stats) = tape.batch_norm(x, g, b, (&[0., 0.], &[1., 1.]), BnMode::Eval, 1e-5).unwrap();
        assert!(stats.is_none());
        for (o, i) in tape.value(y).data().iter().zip(data) {
            assert!(((o - i) / i).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_of_identical_images_is_guarded_by_eps() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([4, 3, 2, 2], 0.7));
        let g = tape.constant(Tensor::full([3], 1.0));
        let b = tape.constant(Tensor::zeros([3]));
        let (y, stats) = tape.batch_norm(x, g, b, (&[0.; 3], &[1.; 3]), BnMode::Train, 1e-5).unwrap();
        assert_eq!(stats.unwrap().var, vec![0.0; 3]);
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn activations_and_pooling() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[-2., 3.]));
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(y).data(), &[-0.2, 3.]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 3.]);

        let x = tape.constant(t(&[1, 2], &[1., 0.]));
        let y = tape.softmax(x).unwrap();
        let e = std::f64::consts::E;
        assert!((tape.value(y).data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((tape.value(y).data()[0] - 0.7311).abs() < 1e-4);
        assert!((tape.value(y).data()[1] - 0.2689).abs() < 1e-4);

        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.]);
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..40).map(|i| ((i * 7919) % 97) as f64 / 5.0 - 9.0).collect();
        let x = tape.constant(t(&[5, 8], &data));
        let y = tape.softmax(x).unwrap();
        for row in tape.value(y).data().chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_log_softmax_excludes_entries() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 3], &[5., 0., 0.]));
        let y = tape.log_softmax(x, Some(vec![false, true, true])).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 0.5f64.ln()).abs() < 1e-15);
        assert!(tape.log_softmax(x, Some(vec![false; 3])).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[1], &[3.]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.]);

        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[1, 1], &[2.]), true);
        let neg = tape.scale(w, -1.0).unwrap();
        let r = tape.relu(neg).unwrap();
        let loss = tape.sum(r).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[0.]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_skips_constants() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(t(&[2], &[1., 2.]), true);
        let c = tape.constant(t(&[2], &[1., 1.]));
        let y = tape.mul(w, c).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::InvalidShape(_))));
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[1., 1.]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[1000.]));
        assert!(matches!(tape.exp(x), Err(Error::Numerical(_))));
        let z = tape.constant(t(&[1], &[0.]));
        assert!(matches!(tape.div_scalar(x, z), Err(Error::Numerical(_))));
    }

    #[test]
    fn concat_and_transpose_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1, 1, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 2, 1, 1], &[3., 4., 5., 6.]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3, 1, 1]);
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let m = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let mt = tape.transpose(m).unwrap();
        assert_eq!(tape.value(mt).data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(t(&[2, 2, 3, 3], &(0..36).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()), true);
            let k = tape.leaf(t(&[2, 2, 2, 2], &(0..16).map(|i| (i as f64 * 0.11).cos()).collect::<Vec<_>>()), true);
            let y = tape.conv2d(x, k, 1, 1).unwrap();
            let y = tape.relu(y).unwrap();
            let l = tape.mean(y).unwrap();
            let g = tape.backward(l).unwrap();
            (g.get(x).unwrap().clone(), g.get(k).unwrap().clone())
        };
        assert_eq!(run(), run());
    }
}
