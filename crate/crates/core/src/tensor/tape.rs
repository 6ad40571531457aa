use rayon::prelude::*;

use super::conv::{ConvKernels, Geometry};
use super::{conv_output_size, deconv_output_size, matmul, mismatch, MatRef, Real, Tensor, TensorError};

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Batch samples are reduced in at most this many fixed groups so parameter
/// gradients do not depend on the thread count.
const REDUCTION_GROUPS: usize = 8;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    FullyConnected { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Deconv2d { x: Var, k: Var, stride: usize, pad: usize },
    ChannelBias { x: Var, b: Var },
    LeakyRelu { x: Var, slope: T },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    SliceChannels { x: Var, start: usize },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Bce { pred: Var, targets: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    MeanFeatureDistance { x: Var, diff: Vec<T> },
    UnitPairs { x: Var, norms: Vec<T> },
    PairL1 { x: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for a single backward pass. Inputs are never
/// mutated; every op stores its output as a new node.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
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

fn dims4(t: &Tensor<impl Real>, op: &'static str) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(mismatch(op, format!("expected [B,C,H,W], got {s:?}"))),
    }
}

/// Runs `per_sample(index, out_chunk)` over the batch in parallel.
fn par_samples<T: Real>(out: &mut [T], chunk: usize, per_sample: impl Fn(usize, &mut [T], &mut Vec<T>) + Sync) {
    if chunk == 0 {
        return;
    }
    out.par_chunks_mut(chunk)
        .enumerate()
        .for_each_init(Vec::new, |scratch, (i, o)| per_sample(i, o, scratch));
}

/// Runs `per_sample(index, dx_chunk, dk_accumulator, scratch)` over the batch
/// and returns the summed parameter gradient of length `dk_len`.
fn par_backward<T: Real>(
    batch: usize,
    dx: Option<&mut [T]>,
    dx_chunk: usize,
    dk_len: usize,
    per_sample: impl Fn(usize, Option<&mut [T]>, &mut [T], &mut Vec<T>) + Sync,
) -> Vec<T> {
    let groups = batch.clamp(1, REDUCTION_GROUPS);
    let per_group = batch.div_ceil(groups);
    let mut dx_groups: Vec<Option<&mut [T]>> = match dx {
        Some(dx) => dx.chunks_mut((per_group * dx_chunk).max(1)).map(Some).collect(),
        None => (0..groups).map(|_| None).collect(),
    };
    dx_groups.resize_with(groups, || None);
    let partials: Vec<Vec<T>> = dx_groups
        .into_par_iter()
        .enumerate()
        .map(|(g, mut dx_group)| {
            let mut dk = vec![T::zero(); dk_len];
            let mut scratch = Vec::new();
            let start = g * per_group;
            for s in start..(start + per_group).min(batch) {
                let local = s - start;
                let dx_s = dx_group
                    .as_deref_mut()
                    .map(|d| &mut d[local * dx_chunk..(local + 1) * dx_chunk]);
                per_sample(s, dx_s, &mut dk, &mut scratch);
            }
            dk
        })
        .collect();
    let mut total = vec![T::zero(); dk_len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `y = x W + b` for `x: [B, in]`, `W: [in, out]`, `b: [out]`.
    pub fn fully_connected(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (&[batch, fan_in], &[w_in, fan_out], &[b_len]) = (xv.shape(), wv.shape(), bv.shape()) else {
            return Err(mismatch(
                "fully_connected",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        };
        if fan_in != w_in || fan_out != b_len {
            return Err(mismatch(
                "fully_connected",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(bv.data());
        }
        matmul(MatRef::new(xv.data(), batch, fan_in), MatRef::new(wv.data(), fan_in, fan_out), &mut out, true);
        let value = Tensor::new(vec![batch, fan_out], out)?;
        Ok(self.push(value, Op::FullyConnected { x, w, b }, &[x, w, b]))
    }

    /// Cross-correlation of `x: [B, C_in, H, W]` with `k: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [batch, c_in, h, w] = dims4(self.value(x), "conv2d")?;
        let [c_out, kc_in, kh, kw] = dims4(self.value(k), "conv2d")?;
        if kc_in != c_in || kh != kw {
            return Err(mismatch("conv2d", format!("input channels {c_in}, kernel {:?}", self.value(k).shape())));
        }
        let (Some(oh), Some(ow)) = (conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)) else {
            return Err(mismatch("conv2d", format!("kernel {kh} does not fit {h}x{w} with pad {pad}")));
        };
        let geo = Geometry { channels: c_in, large_h: h, large_w: w, small_h: oh, small_w: ow, k: kh, stride, pad };
        let mut out = vec![T::zero(); batch * c_out * oh * ow];
        {
            let xd = self.value(x).data();
            let kernels = ConvKernels { kernel: self.value(k).data(), c_in, c_out };
            let in_chunk = c_in * h * w;
            par_samples(&mut out, c_out * oh * ow, |s, y, scratch| {
                kernels.conv_forward(&geo, &xd[s * in_chunk..(s + 1) * in_chunk], y, scratch);
            });
        }
        let value = Tensor::new(vec![batch, c_out, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, stride, pad }, &[x, k]))
    }

    /// Transposed convolution of `x: [B, C_in, H, W]` with `k: [C_in, C_out, k, k]`;
    /// output side is `(s - 1) stride - 2 pad + k`.
    pub fn deconv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let [batch, c_in, h, w] = dims4(self.value(x), "deconv2d")?;
        let [kc_in, c_out, kh, kw] = dims4(self.value(k), "deconv2d")?;
        if kc_in != c_in || kh != kw {
            return Err(mismatch("deconv2d", format!("input channels {c_in}, kernel {:?}", self.value(k).shape())));
        }
        let (Some(oh), Some(ow)) = (deconv_output_size(h, kh, stride, pad), deconv_output_size(w, kw, stride, pad))
        else {
            return Err(mismatch("deconv2d", format!("degenerate output for {h}x{w}")));
        };
        let geo = Geometry { channels: c_out, large_h: oh, large_w: ow, small_h: h, small_w: w, k: kh, stride, pad };
        let mut out = vec![T::zero(); batch * c_out * oh * ow];
        {
            let xd = self.value(x).data();
            let kernels = ConvKernels { kernel: self.value(k).data(), c_in, c_out };
            let in_chunk = c_in * h * w;
            par_samples(&mut out, c_out * oh * ow, |s, y, scratch| {
                kernels.deconv_forward(&geo, &xd[s * in_chunk..(s + 1) * in_chunk], y, scratch);
            });
        }
        let value = Tensor::new(vec![batch, c_out, oh, ow], out)?;
        Ok(self.push(value, Op::Deconv2d { x, k, stride, pad }, &[x, k]))
    }

    /// Adds `b: [C]` to every spatial position of channel `c`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let [batch, c, h, w] = dims4(self.value(x), "channel_bias")?;
        if self.value(b).shape() != [c] {
            return Err(mismatch("channel_bias", format!("bias {:?} for {c} channels", self.value(b).shape())));
        }
        let mut out = self.value(x).clone();
        let bd = self.value(b).data();
        for s in 0..batch {
            for ch in 0..c {
                let base = (s * c + ch) * h * w;
                for v in &mut out.data_mut()[base..base + h * w] {
                    *v += bd[ch];
                }
            }
        }
        Ok(self.push(out, Op::ChannelBias { x, b }, &[x, b]))
    }

    /// `max(x, slope x)`; the derivative at exactly 0 is taken as `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.map(x, |v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.map(x, T::tanh);
        self.push(out, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.map(x, sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor { shape: xv.shape().to_vec(), data: xv.data().iter().map(|&v| f(v)).collect() }
    }

    /// Concatenates `[B, C_a, H, W]` and `[B, C_b, H, W]` along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let [ba, ca, ha, wa] = dims4(self.value(a), "concat_channels")?;
        let [bb, cb, hb, wb] = dims4(self.value(b), "concat_channels")?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(mismatch(
                "concat_channels",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let plane = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * plane);
        for s in 0..ba {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::Concat { a, b }, &[a, b]))
    }

    /// Channels `start..start + len` of a `[B, C, H, W]` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let [batch, c, h, w] = dims4(self.value(x), "slice_channels")?;
        if start + len > c || len == 0 {
            return Err(mismatch("slice_channels", format!("{start}..{} of {c} channels", start + len)));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(batch * len * plane);
        for s in 0..batch {
            let base = (s * c + start) * plane;
            out.extend_from_slice(&self.value(x).data()[base..base + len * plane]);
        }
        let value = Tensor::new(vec![batch, len, h, w], out)?;
        Ok(self.push(value, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(mismatch("add", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.map(x, |v| v * factor);
        self.push(out, Op::Scale { x, factor }, &[x])
    }

    /// Mean binary cross-entropy of probabilities `pred` against 0/1
    /// `targets`, with `pred` clamped to `[1e-7, 1 - 1e-7]`. The gradient is
    /// evaluated at the clamped value.
    pub fn bce_loss(&mut self, pred: Var, targets: &[T]) -> Result<Var, TensorError> {
        let pv = self.value(pred);
        if pv.numel() != targets.len() || targets.is_empty() {
            return Err(mismatch("bce_loss", format!("{} predictions, {} targets", pv.numel(), targets.len())));
        }
        let eps = T::from_f64_lossy(BCE_EPS);
        let total: T = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.max(eps).min(T::one() - eps);
                -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            })
            .sum();
        let loss = total / T::from_usize(targets.len()).unwrap();
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(value, Op::Bce { pred, targets: targets.to_vec() }, &[pred]))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed as `max(l, 0) - l t + ln(1 + exp(-|l|))` so it stays finite
    /// and keeps a non-vanishing gradient for confident logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() || targets.is_empty() {
            return Err(mismatch("bce_with_logits", format!("{} logits, {} targets", lv.numel(), targets.len())));
        }
        let total: T = lv
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .sum();
        let loss = total / T::from_usize(targets.len()).unwrap();
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(value, Op::BceLogits { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let &[batch, classes] = lv.shape() else {
            return Err(mismatch("softmax_cross_entropy", format!("logits {:?}", lv.shape())));
        };
        if batch != targets.len() || batch == 0 || targets.iter().any(|&t| t >= classes) {
            return Err(mismatch("softmax_cross_entropy", format!("{batch} rows, targets {targets:?}")));
        }
        let mut probs = Vec::with_capacity(batch * classes);
        let mut total = T::zero();
        for (row, &t) in lv.data().chunks(classes).zip(targets) {
            let p = softmax(row);
            total -= p[t].max(T::min_positive_value()).ln();
            probs.extend(p);
        }
        let loss = total / T::from_usize(batch).unwrap();
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(value, Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// `sum_f (mean_b x[b, f] - target[f])^2 / F` for `x: [B, F]`.
    pub fn mean_feature_distance(&mut self, x: Var, target: &[T]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let &[batch, features] = xv.shape() else {
            return Err(mismatch("mean_feature_distance", format!("x {:?}", xv.shape())));
        };
        if features != target.len() || batch == 0 {
            return Err(mismatch("mean_feature_distance", format!("x {:?}, {} targets", xv.shape(), target.len())));
        }
        let inv_b = T::one() / T::from_usize(batch).unwrap();
        let mut diff: Vec<T> = target.iter().map(|&t| -t).collect();
        for row in xv.data().chunks(features) {
            for (d, &v) in diff.iter_mut().zip(row) {
                *d += v * inv_b;
            }
        }
        let loss = diff.iter().map(|&d| d * d).sum::<T>() / T::from_usize(features).unwrap();
        let value = Tensor::new(vec![1], vec![loss])?;
        Ok(self.push(value, Op::MeanFeatureDistance { x, diff }, &[x]))
    }

    /// Rescales every `(x[b, 0, i, j], x[b, 1, i, j])` pair of a `[B, 2, H, W]`
    /// tensor to unit length, using `sqrt(x0^2 + x1^2 + eps)` as the norm.
    pub fn unit_pairs(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let [batch, c, h, w] = dims4(self.value(x), "unit_pairs")?;
        if c != 2 {
            return Err(mismatch("unit_pairs", format!("{c} channels")));
        }
        let plane = h * w;
        let xv = self.value(x).data();
        let mut out = xv.to_vec();
        let mut norms = Vec::with_capacity(batch * plane);
        for s in 0..batch {
            let base = s * 2 * plane;
            for i in 0..plane {
                let (a, b) = (xv[base + i], xv[base + plane + i]);
                let n = (a * a + b * b + eps).sqrt();
                out[base + i] = a / n;
                out[base + plane + i] = b / n;
                norms.push(n);
            }
        }
        let value = Tensor::new(vec![batch, 2, h, w], out)?;
        Ok(self.push(value, Op::UnitPairs { x, norms }, &[x]))
    }

    /// Mean absolute difference between samples `2i` and `2i + 1`, averaged
    /// over pairs and elements. An odd last sample is ignored.
    pub fn pair_l1(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let batch = xv.shape().first().copied().unwrap_or(0);
        if batch < 2 {
            return Err(mismatch("pair_l1", format!("x {:?}", xv.shape())));
        }
        let per = xv.numel() / batch;
        let pairs = batch / 2;
        let total: T = xv.data()[..2 * pairs * per]
            .chunks(2 * per)
            .flat_map(|p| p[..per].iter().zip(&p[per..]))
            .map(|(&a, &b)| (a - b).abs())
            .sum();
        let value = Tensor::new(vec![1], vec![total / T::from_usize(pairs * per).unwrap()])?;
        Ok(self.push(value, Op::PairL1 { x }, &[x]))
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited in exact reverse
    /// recording order; fan-out gradients accumulate additively.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            // Leaves keep their accumulated gradient for the caller.
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let send = |grads: &mut Vec<Option<Tensor<T>>>, v: Var, g: Tensor<T>| match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            };
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                &Op::FullyConnected { x, w, b } => {
                    let (xv, wv) = (self.value(x), self.value(w));
                    let (batch, fan_in, fan_out) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                    if needs(x) {
                        let mut dx = vec![T::zero(); batch * fan_in];
                        matmul(
                            MatRef::new(dy.data(), batch, fan_out),
                            MatRef::new(wv.data(), fan_in, fan_out).t(),
                            &mut dx,
                            false,
                        );
                        send(&mut grads, x, Tensor::new(vec![batch, fan_in], dx)?);
                    }
                    if needs(w) {
                        let mut dw = vec![T::zero(); fan_in * fan_out];
                        matmul(
                            MatRef::new(xv.data(), batch, fan_in).t(),
                            MatRef::new(dy.data(), batch, fan_out),
                            &mut dw,
                            false,
                        );
                        send(&mut grads, w, Tensor::new(vec![fan_in, fan_out], dw)?);
                    }
                    if needs(b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in dy.data().chunks(fan_out) {
                            for (d, &g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        send(&mut grads, b, Tensor::new(vec![fan_out], db)?);
                    }
                }
                &Op::Conv2d { x, k, stride, pad } => {
                    let [batch, c_in, h, w] = dims4(self.value(x), "conv2d")?;
                    let kshape = self.value(k).shape().to_vec();
                    let [_, c_out, oh, ow] = dims4(&node.value, "conv2d")?;
                    let geo = Geometry {
                        channels: c_in,
                        large_h: h,
                        large_w: w,
                        small_h: oh,
                        small_w: ow,
                        k: kshape[2],
                        stride,
                        pad,
                    };
                    let kernels = ConvKernels { kernel: self.value(k).data(), c_in, c_out };
                    let (xd, dyd) = (self.value(x).data(), dy.data());
                    let (in_chunk, out_chunk) = (c_in * h * w, c_out * oh * ow);
                    let mut dx = needs(x).then(|| vec![T::zero(); batch * in_chunk]);
                    let want_dk = needs(k);
                    let dk = par_backward(
                        batch,
                        dx.as_deref_mut(),
                        in_chunk,
                        if want_dk { kshape.iter().product() } else { 0 },
                        |s, dx_s, dk, scratch| {
                            kernels.conv_backward(
                                &geo,
                                &xd[s * in_chunk..(s + 1) * in_chunk],
                                &dyd[s * out_chunk..(s + 1) * out_chunk],
                                dx_s,
                                want_dk.then_some(dk),
                                scratch,
                            );
                        },
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, x, Tensor::new(vec![batch, c_in, h, w], dx)?);
                    }
                    if want_dk {
                        send(&mut grads, k, Tensor::new(kshape, dk)?);
                    }
                }
                &Op::Deconv2d { x, k, stride, pad } => {
                    let [batch, c_in, h, w] = dims4(self.value(x), "deconv2d")?;
                    let kshape = self.value(k).shape().to_vec();
                    let [_, c_out, oh, ow] = dims4(&node.value, "deconv2d")?;
                    let geo = Geometry {
                        channels: c_out,
                        large_h: oh,
                        large_w: ow,
                        small_h: h,
                        small_w: w,
                        k: kshape[2],
                        stride,
                        pad,
                    };
                    let kernels = ConvKernels { kernel: self.value(k).data(), c_in, c_out };
                    let (xd, dyd) = (self.value(x).data(), dy.data());
                    let (in_chunk, out_chunk) = (c_in * h * w, c_out * oh * ow);
                    let mut dx = needs(x).then(|| vec![T::zero(); batch * in_chunk]);
                    let want_dk = needs(k);
                    let dk = par_backward(
                        batch,
                        dx.as_deref_mut(),
                        in_chunk,
                        if want_dk { kshape.iter().product() } else { 0 },
                        |s, dx_s, dk, scratch| {
                            kernels.deconv_backward(
                                &geo,
                                &xd[s * in_chunk..(s + 1) * in_chunk],
                                &dyd[s * out_chunk..(s + 1) * out_chunk],
                                dx_s,
                                want_dk.then_some(dk),
                                scratch,
                            );
                        },
                    );
                    if let Some(dx) = dx {
                        send(&mut grads, x, Tensor::new(vec![batch, c_in, h, w], dx)?);
                    }
                    if want_dk {
                        send(&mut grads, k, Tensor::new(kshape, dk)?);
                    }
                }
                &Op::ChannelBias { x, b } => {
                    let [batch, c, h, w] = dims4(&dy, "channel_bias")?;
                    if needs(b) {
                        let mut db = vec![T::zero(); c];
                        for s in 0..batch {
                            for (ch, d) in db.iter_mut().enumerate() {
                                let base = (s * c + ch) * h * w;
                                *d += dy.data()[base..base + h * w].iter().copied().sum::<T>();
                            }
                        }
                        send(&mut grads, b, Tensor::new(vec![c], db)?);
                    }
                    if needs(x) {
                        send(&mut grads, x, dy);
                    }
                }
                &Op::LeakyRelu { x, slope } => {
                    let g = zip_map(&dy, self.value(x), |d, v| if v > T::zero() { d } else { d * slope });
                    send(&mut grads, x, g);
                }
                &Op::Tanh { x } => {
                    let g = zip_map(&dy, &node.value, |d, y| d * (T::one() - y * y));
                    send(&mut grads, x, g);
                }
                &Op::Sigmoid { x } => {
                    let g = zip_map(&dy, &node.value, |d, y| d * y * (T::one() - y));
                    send(&mut grads, x, g);
                }
                &Op::Concat { a, b } => {
                    let [batch, ca, h, w] = dims4(self.value(a), "concat_channels")?;
                    let cb = self.value(b).shape()[1];
                    let plane = h * w;
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for s in 0..batch {
                        let base = s * (ca + cb) * plane;
                        da.extend_from_slice(&dy.data()[base..base + ca * plane]);
                        db.extend_from_slice(&dy.data()[base + ca * plane..base + (ca + cb) * plane]);
                    }
                    if needs(a) {
                        send(&mut grads, a, Tensor::new(vec![batch, ca, h, w], da)?);
                    }
                    if needs(b) {
                        send(&mut grads, b, Tensor::new(vec![batch, cb, h, w], db)?);
                    }
                }
                &Op::SliceChannels { x, start } => {
                    let xshape = self.value(x).shape().to_vec();
                    let [batch, c, h, w] = [xshape[0], xshape[1], xshape[2], xshape[3]];
                    let len = dy.shape()[1];
                    let plane = h * w;
                    let mut dx = vec![T::zero(); batch * c * plane];
                    for s in 0..batch {
                        let dst = (s * c + start) * plane;
                        let src = s * len * plane;
                        dx[dst..dst + len * plane].copy_from_slice(&dy.data()[src..src + len * plane]);
                    }
                    send(&mut grads, x, Tensor::new(xshape, dx)?);
                }
                &Op::Reshape { x } => {
                    let shape = self.value(x).shape().to_vec();
                    send(&mut grads, x, dy.reshape(&shape)?);
                }
                &Op::Add { a, b } => {
                    if needs(a) {
                        send(&mut grads, a, dy.clone());
                    }
                    if needs(b) {
                        send(&mut grads, b, dy);
                    }
                }
                &Op::Scale { x, factor } => {
                    let g = Tensor { shape: dy.shape().to_vec(), data: dy.data().iter().map(|&d| d * factor).collect() };
                    send(&mut grads, x, g);
                }
                Op::Bce { pred, targets } => {
                    let pv = self.value(*pred);
                    let eps = T::from_f64_lossy(BCE_EPS);
                    let scale = dy.data()[0] / T::from_usize(targets.len()).unwrap();
                    let data = pv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&p, &t)| {
                            let p = p.max(eps).min(T::one() - eps);
                            scale * ((T::one() - t) / (T::one() - p) - t / p)
                        })
                        .collect();
                    send(&mut grads, *pred, Tensor { shape: pv.shape().to_vec(), data });
                }
                Op::BceLogits { logits, targets } => {
                    let lv = self.value(*logits);
                    let scale = dy.data()[0] / T::from_usize(targets.len()).unwrap();
                    let data = lv
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&l, &t)| scale * (sigmoid(l) - t))
                        .collect();
                    send(&mut grads, *logits, Tensor { shape: lv.shape().to_vec(), data });
                }
                Op::MeanFeatureDistance { x, diff } => {
                    let shape = self.value(*x).shape().to_vec();
                    let (batch, features) = (shape[0], shape[1]);
                    let scale = dy.data()[0] * T::from_f64_lossy(2.0) / T::from_usize(batch * features).unwrap();
                    let row: Vec<T> = diff.iter().map(|&d| d * scale).collect();
                    let data = row.iter().copied().cycle().take(batch * features).collect();
                    send(&mut grads, *x, Tensor { shape, data });
                }
                Op::PairL1 { x } => {
                    let xv = self.value(*x);
                    let per = xv.numel() / xv.shape()[0];
                    let pairs = xv.shape()[0] / 2;
                    let scale = dy.data()[0] / T::from_usize(pairs * per).unwrap();
                    let mut data = vec![T::zero(); xv.numel()];
                    let used = 2 * pairs * per;
                    for (pair, out) in xv.data()[..used].chunks(2 * per).zip(data[..used].chunks_mut(2 * per)) {
                        for i in 0..per {
                            let d = pair[i] - pair[per + i];
                            let g = if d > T::zero() { scale } else if d < T::zero() { -scale } else { T::zero() };
                            out[i] = g;
                            out[per + i] = -g;
                        }
                    }
                    send(&mut grads, *x, Tensor { shape: xv.shape().to_vec(), data });
                }
                Op::UnitPairs { x, norms } => {
                    let shape = node.value.shape().to_vec();
                    let plane = shape[2] * shape[3];
                    let y = node.value.data();
                    let mut data = vec![T::zero(); y.len()];
                    for (k, &n) in norms.iter().enumerate() {
                        let (s, i) = (k / plane, k % plane);
                        let (p, q) = (s * 2 * plane + i, s * 2 * plane + plane + i);
                        let dot = y[p] * dy.data()[p] + y[q] * dy.data()[q];
                        data[p] = (dy.data()[p] - y[p] * dot) / n;
                        data[q] = (dy.data()[q] - y[q] * dot) / n;
                    }
                    send(&mut grads, *x, Tensor { shape, data });
                }
                Op::SoftmaxCe { logits, targets, probs } => {
                    let shape = self.value(*logits).shape().to_vec();
                    let classes = shape[1];
                    let scale = dy.data()[0] / T::from_usize(targets.len()).unwrap();
                    let mut data = probs.clone();
                    for (row, &t) in data.chunks_mut(classes).zip(targets) {
                        row[t] -= T::one();
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    send(&mut grads, *logits, Tensor { shape, data });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn zip_map<T: Real>(dy: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: dy.shape().to_vec(),
        data: dy.data().iter().zip(other.data()).map(|(&d, &o)| f(d, o)).collect(),
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
