// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the tape from the loss towards the leaves, so nodes are always in
//! topological order. Intermediate gradients live only for the duration of
//! one backward pass; leaf gradients persist and accumulate until
//! [`Tape::zero_grad`] is called.

use crate::error::{Error, Result};
use crate::kernels::{self, BmmShape, ConvGeom, ConvShape};
use crate::neuron;
use crate::scalar::Scalar;
use crate::surrogate::{heaviside, SpikeMode, SurrogateSpec};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Payload-free tag of a recorded operation, for structural inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Sum,
    Reshape,
    Bmm,
    AddRowBias,
    Conv2d,
    DepthwiseConv2d,
    BatchNorm,
    Heaviside,
    SmoothStep,
    Lif,
    MeanSpatial,
    MeanLeading,
    RepeatLeading,
    WeightedCrossEntropy,
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum NormStats<'a, S> {
    /// Statistics of the current batch; gradients flow through them.
    Batch { eps: f64 },
    /// Fixed running statistics.
    Frozen {
        mean: &'a [S],
        var: &'a [S],
        eps: f64,
    },
}

/// Batch statistics observed by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Sum(Var),
    Reshape(Var),
    Bmm {
        a: Var,
        b: Var,
        shape: BmmShape,
    },
    AddRowBias(Var, Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        batch_stats: bool,
    },
    Heaviside(Var, SurrogateSpec),
    SmoothStep(Var, SurrogateSpec),
    Lif {
        x: Var,
        steps: usize,
        beta: S,
        v_th: S,
        spec: SurrogateSpec,
        mode: SpikeMode,
        u: Vec<S>,
    },
    MeanSpatial(Var),
    MeanLeading(Var, usize),
    RepeatLeading(Var),
    WeightedCe {
        logits: Var,
        dlogits: Vec<S>,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Bmm { .. } => OpKind::Bmm,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Conv { shape, .. } if shape.depthwise => OpKind::DepthwiseConv2d,
            Op::Conv { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Heaviside(..) => OpKind::Heaviside,
            Op::SmoothStep(..) => OpKind::SmoothStep,
            Op::Lif { .. } => OpKind::Lif,
            Op::MeanSpatial(..) => OpKind::MeanSpatial,
            Op::MeanLeading(..) => OpKind::MeanLeading,
            Op::RepeatLeading(..) => OpKind::RepeatLeading,
            Op::WeightedCe { .. } => OpKind::WeightedCrossEntropy,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

/// Single-threaded gradient tape. One tape per worker.
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, leaves included.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any was written.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.value.shape(), g.clone()).expect("grad matches value shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        let n = &mut self.nodes[v.0];
        let shape = n.value.shape().to_vec();
        n.grad
            .take()
            .map(|g| Tensor::new(&shape, g).expect("grad matches value shape"))
    }

    /// Operation kinds recorded at positions `[from, to)`.
    pub fn op_kinds(&self, from: usize, to: usize) -> Vec<OpKind> {
        self.nodes[from..to.min(self.nodes.len())]
            .iter()
            .map(|n| n.op.kind())
            .collect()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var], name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a], "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a], "add_scalar")
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let shape = BmmShape {
            batch: 1,
            m: sa[0],
            k: sa[1],
            n: sb[1],
            trans_a: false,
            trans_b: false,
        };
        self.bmm(a, b, shape, &[sa[0], sb[1]])
    }

    /// Batched product over flat storage; `out_shape` must hold `batch*m*n`.
    pub fn bmm(&mut self, a: Var, b: Var, shape: BmmShape, out_shape: &[usize]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let BmmShape { batch, m, k, n, .. } = shape;
        if ta.numel() != batch * m * k || tb.numel() != batch * k * n {
            return Err(Error::Shape(format!(
                "bmm: operands {:?} and {:?} do not match {shape:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        if out_shape.iter().product::<usize>() != batch * m * n {
            return Err(Error::Shape(format!("bmm: output shape {out_shape:?} does not match {shape:?}")));
        }
        let mut out = vec![S::zero(); batch * m * n];
        kernels::bmm_forward(&shape, ta.data(), tb.data(), &mut out);
        let out = Tensor::new(out_shape, out)?;
        self.push(out, Op::Bmm { a, b, shape }, &[a, b], "bmm")
    }

    /// Adds a `[n]` bias to every row of an `[m, n]` matrix.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tx.rank() != 2 || tb.numel() != tx.shape()[1] {
            return Err(Error::Shape(format!(
                "add_row_bias: bias {:?} does not fit {:?}",
                tb.shape(),
                tx.shape()
            )));
        }
        let n = tb.numel();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(tb.data()) {
                *v += bv;
            }
        }
        self.push(out, Op::AddRowBias(x, b), &[x, b], "add_row_bias")
    }

    fn conv_impl(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, depthwise: bool) -> Result<Var> {
        let shape = ConvShape::resolve(self.shape(x), self.shape(w), geom, depthwise)?;
        if let Some(b) = b {
            if self.value(b).numel() != shape.c_out {
                return Err(Error::Shape(format!(
                    "conv bias {:?} does not match {} output channels",
                    self.shape(b),
                    shape.c_out
                )));
            }
        }
        let out_shape = shape.out_shape();
        let mut out = vec![S::zero(); out_shape.iter().product()];
        let bias = b.map(|b| self.value(b).data());
        if depthwise {
            kernels::depthwise_forward(&shape, self.value(x).data(), self.value(w).data(), bias, &mut out);
        } else {
            kernels::conv2d_forward(&shape, self.value(x).data(), self.value(w).data(), bias, &mut out);
        }
        let out = Tensor::new(&out_shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let name = if depthwise { "depthwise_conv2d" } else { "conv2d" };
        self.push(out, Op::Conv { x, w, b, shape }, &inputs, name)
    }

    /// Cross-correlation of `[B, C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv_impl(x, w, b, geom, false)
    }

    /// Per-channel cross-correlation with weights `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.conv_impl(x, w, b, geom, true)
    }

    /// Per-channel affine normalization of `[N, C, ...]`.
    ///
    /// Returns the batch moments when `stats` is [`NormStats::Batch`] so
    /// the caller can update running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_, S>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(Error::Shape(format!("batch_norm: input {:?} has no channel axis", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let plane: usize = tx.shape()[2..].iter().product();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("batch_norm: affine terms do not match {c} channels")));
        }
        let m = (n * plane) as f64;
        let (mean, inv_std, moments, eps_used_batch) = match stats {
            NormStats::Batch { eps } => {
                let mut mean = vec![0.0f64; c];
                let mut var = vec![0.0f64; c];
                for img in tx.data().chunks(c * plane) {
                    for (ch, pl) in img.chunks(plane).enumerate() {
                        mean[ch] += pl.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for img in tx.data().chunks(c * plane) {
                    for (ch, pl) in img.chunks(plane).enumerate() {
                        var[ch] += pl.iter().map(|v| (v.as_f64() - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
                let unbiased = var.iter().map(|v| v / (m - 1.0).max(1.0)).collect();
                let inv: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                (
                    mean.clone(),
                    inv,
                    Some(BatchMoments { mean, var: unbiased }),
                    true,
                )
            }
            NormStats::Frozen { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!("batch_norm: running stats do not match {c} channels")));
                }
                let inv = var.iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
                (mean.iter().map(|v| v.as_f64()).collect(), inv, None, false)
            }
        };
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mean_s: Vec<S> = mean.iter().map(|&v| S::of(v)).collect();
        let inv_s: Vec<S> = inv_std.iter().map(|&v| S::of(v)).collect();
        let mut xhat = vec![S::zero(); tx.numel()];
        let mut out = vec![S::zero(); tx.numel()];
        for ((img, xh), o) in tx
            .data()
            .chunks(c * plane)
            .zip(xhat.chunks_mut(c * plane))
            .zip(out.chunks_mut(c * plane))
        {
            for ch in 0..c {
                let r = ch * plane..(ch + 1) * plane;
                for ((&v, h), y) in img[r.clone()].iter().zip(&mut xh[r.clone()]).zip(&mut o[r]) {
                    *h = (v - mean_s[ch]) * inv_s[ch];
                    *y = *h * g[ch] + bt[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let keep = self.grad_enabled;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: if keep { xhat } else { Vec::new() },
            inv_std: inv_s,
            batch_stats: eps_used_batch,
        };
        let v = self.push(out, op, &[x, gamma, beta], "batch_norm")?;
        Ok((v, moments))
    }

    /// Hard spike forward with surrogate-gradient backward.
    pub fn heaviside(&mut self, x: Var, spec: SurrogateSpec) -> Result<Var> {
        let out = self.value(x).map(heaviside);
        self.push(out, Op::Heaviside(x, spec), &[x], "heaviside")
    }

    /// Smooth primitive of the surrogate in place of the hard spike.
    pub fn smooth_step(&mut self, x: Var, spec: SurrogateSpec) -> Result<Var> {
        let out = self.value(x).map(|v| spec.primitive(v));
        self.push(out, Op::SmoothStep(x, spec), &[x], "smooth_step")
    }

    /// Leaky integrate-and-fire over the leading `steps` axis of `x`.
    ///
    /// `x` is laid out time-major: the first `numel / steps` elements are
    /// step 0. State starts at zero.
    pub fn lif(
        &mut self,
        x: Var,
        steps: usize,
        beta: S,
        v_th: S,
        spec: SurrogateSpec,
        mode: SpikeMode,
    ) -> Result<Var> {
        let tx = self.value(x);
        if steps == 0 || tx.numel() % steps != 0 {
            return Err(Error::Contract(format!(
                "lif: {} elements cannot be split into {steps} timesteps",
                tx.numel()
            )));
        }
        let keep = self.grad_enabled && self.nodes[x.0].requires_grad;
        let run = neuron::lif_kernel_forward(tx.data(), steps, beta, v_th, spec, mode, keep);
        let out = Tensor::new(tx.shape(), run.spikes)?;
        let op = Op::Lif {
            x,
            steps,
            beta,
            v_th,
            spec,
            mode,
            u: run.membrane,
        };
        self.push(out, op, &[x], "lif")
    }

    /// Mean over every axis after the first two: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() < 3 {
            return Err(Error::Shape(format!("mean_spatial: input {:?} has no spatial axes", tx.shape())));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let plane = tx.numel() / (n * c);
        let inv = S::of(1.0 / plane as f64);
        let data = tx.data().chunks(plane).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        let out = Tensor::new(&[n, c], data)?;
        self.push(out, Op::MeanSpatial(x), &[x], "mean_spatial")
    }

    /// Averages `steps` consecutive leading blocks: `[T*B, ...] -> [B, ...]`.
    pub fn mean_leading(&mut self, x: Var, steps: usize) -> Result<Var> {
        let tx = self.value(x);
        if steps == 0 || tx.shape()[0] % steps != 0 {
            return Err(Error::Shape(format!("mean_leading: leading dim {} not divisible by {steps}", tx.shape()[0])));
        }
        let block = tx.numel() / steps;
        let inv = S::of(1.0 / steps as f64);
        let mut out = vec![S::zero(); block];
        for chunk in tx.data().chunks(block) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut shape = tx.shape().to_vec();
        shape[0] /= steps;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::MeanLeading(x, steps), &[x], "mean_leading")
    }

    /// Tiles `x` `steps` times along a new leading block: `[B, ...] -> [T*B, ...]`.
    pub fn repeat_leading(&mut self, x: Var, steps: usize) -> Result<Var> {
        if steps == 0 {
            return Err(Error::Contract("repeat_leading: zero repeats".into()));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(tx.numel() * steps);
        for _ in 0..steps {
            data.extend_from_slice(tx.data());
        }
        let mut shape = tx.shape().to_vec();
        shape[0] *= steps;
        let out = Tensor::new(&shape, data)?;
        self.push(out, Op::RepeatLeading(x), &[x], "repeat_leading")
    }

    /// Class-weighted cross-entropy, reduced as a weighted mean.
    ///
    /// `loss = sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i]`
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[S]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} do not match {} labels",
                tl.shape(),
                labels.len()
            )));
        }
        let k = tl.shape()[1];
        if weights.len() != k {
            return Err(Error::Shape(format!("cross_entropy: {} class weights for {k} classes", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let wsum: f64 = labels.iter().map(|&y| weights[y].as_f64()).sum();
        let mut loss = 0.0f64;
        let mut dlogits = vec![S::zero(); tl.numel()];
        for ((row, &y), d) in tl.data().chunks(k).zip(labels).zip(dlogits.chunks_mut(k)) {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.as_f64()));
            let z: f64 = row.iter().map(|v| (v.as_f64() - mx).exp()).sum();
            let lse = mx + z.ln();
            let wy = weights[y].as_f64();
            loss += wy * (lse - row[y].as_f64());
            for (j, (dv, v)) in d.iter_mut().zip(row).enumerate() {
                let p = (v.as_f64() - lse).exp();
                let t = if j == y { 1.0 } else { 0.0 };
                *dv = S::of(wy * (p - t) / wsum);
            }
        }
        let out = Tensor::scalar(S::of(loss / wsum));
        let keep = self.grad_enabled;
        let op = Op::WeightedCe {
            logits,
            dlogits: if keep { dlogits } else { Vec::new() },
        };
        self.push(out, op, &[logits], "cross_entropy")
    }

    /// Propagates gradients from a one-element `loss` to every reachable
    /// leaf that requires them. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            for (input, gi) in self.input_grads(idx, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(gi).for_each(|(a, v)| *a += v),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += v),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn zeros_like(&self, v: Var) -> Vec<S> {
        vec![S::zero(); self.nodes[v.0].value.numel()]
    }

    fn input_grads(&self, idx: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[idx];
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(va).map(|(&x, &y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&v| v * *c).collect())),
            Op::AddScalar(a) | Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Sum(a) => out.push((*a, vec![g[0]; self.value(*a).numel()])),
            Op::Bmm { a, b, shape } => {
                let mut ga = self.wants(*a).then(|| self.zeros_like(*a));
                let mut gb = self.wants(*b).then(|| self.zeros_like(*b));
                kernels::bmm_backward(
                    shape,
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                out.extend(ga.map(|v| (*a, v)));
                out.extend(gb.map(|v| (*b, v)));
            }
            Op::AddRowBias(x, b) => {
                out.push((*x, g.to_vec()));
                if self.wants(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    out.push((*b, gb));
                }
            }
            Op::Conv { x, w, b, shape } => {
                let mut gx = self.wants(*x).then(|| self.zeros_like(*x));
                let mut gw = self.wants(*w).then(|| self.zeros_like(*w));
                let mut gb = b.filter(|b| self.wants(*b)).map(|b| self.zeros_like(b));
                let args = (self.value(*x).data(), self.value(*w).data());
                if shape.depthwise {
                    kernels::depthwise_backward(shape, args.0, args.1, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                } else {
                    kernels::conv2d_backward(shape, args.0, args.1, g, gx.as_deref_mut(), gw.as_deref_mut(), gb.as_deref_mut());
                }
                out.extend(gx.map(|v| (*x, v)));
                out.extend(gw.map(|v| (*w, v)));
                if let (Some(b), Some(v)) = (b, gb) {
                    out.push((*b, v));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (c, plane) = (shape[1], shape[2..].iter().product::<usize>());
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![S::zero(); c];
                let mut sum_gx = vec![S::zero(); c];
                for (gi, hi) in g.chunks(c * plane).zip(xhat.chunks(c * plane)) {
                    for ch in 0..c {
                        let r = ch * plane..(ch + 1) * plane;
                        for (&gv, &hv) in gi[r.clone()].iter().zip(&hi[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * hv;
                        }
                    }
                }
                if self.wants(*x) {
                    let m = S::of((g.len() / c) as f64);
                    let mut gx = vec![S::zero(); g.len()];
                    for ((gi, hi), o) in g.chunks(c * plane).zip(xhat.chunks(c * plane)).zip(gx.chunks_mut(c * plane)) {
                        for ch in 0..c {
                            let r = ch * plane..(ch + 1) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            for ((&gv, &hv), ov) in gi[r.clone()].iter().zip(&hi[r.clone()]).zip(&mut o[r]) {
                                *ov = if *batch_stats {
                                    scale * (gv - (sum_g[ch] + hv * sum_gx[ch]) / m)
                                } else {
                                    scale * gv
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, sum_gx));
                }
                if self.wants(*beta) {
                    out.push((*beta, sum_g));
                }
            }
            Op::Heaviside(x, spec) => {
                let vx = self.value(*x).data();
                out.push((*x, g.iter().zip(vx).map(|(&gv, &v)| gv * spec.derivative(v)).collect()));
            }
            Op::SmoothStep(x, spec) => {
                let vx = self.value(*x).data();
                out.push((*x, g.iter().zip(vx).map(|(&gv, &v)| gv * spec.derivative(v)).collect()));
            }
            Op::Lif {
                x,
                steps,
                beta,
                v_th,
                spec,
                mode,
                u,
            } => {
                let gx = neuron::lif_kernel_backward(u, g, *steps, *beta, *v_th, *spec, *mode);
                out.push((*x, gx));
            }
            Op::MeanSpatial(x) => {
                let numel = self.value(*x).numel();
                let plane = numel / g.len();
                let inv = S::of(1.0 / plane as f64);
                let mut gx = Vec::with_capacity(numel);
                for &gv in g {
                    gx.extend(std::iter::repeat_n(gv * inv, plane));
                }
                out.push((*x, gx));
            }
            Op::MeanLeading(x, steps) => {
                let inv = S::of(1.0 / *steps as f64);
                let mut gx = Vec::with_capacity(g.len() * steps);
                for _ in 0..*steps {
                    gx.extend(g.iter().map(|&v| v * inv));
                }
                out.push((*x, gx));
            }
            Op::RepeatLeading(x) => {
                let block = self.value(*x).numel();
                let mut gx = vec![S::zero(); block];
                for chunk in g.chunks(block) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                }
                out.push((*x, gx));
            }
            Op::WeightedCe { logits, dlogits } => {
                out.push((*logits, dlogits.iter().map(|&d| d * g[0]).collect()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]), false);
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]), false);
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let z = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let any = tape.leaf(t(&[3, 4], &(0..12).map(|v| v as f64 * 0.7 - 2.0).collect::<Vec<_>>()), false);
        let p = tape.matmul(z, any).unwrap();
        assert_eq!(tape.shape(p), &[2, 4]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.0));

        let col = tape.leaf(t(&[2, 1], &[5., 6.]), false);
        let p = tape.matmul(m, col).unwrap();
        assert_eq!(tape.value(p).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn matmul_backward_rules() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]), true);
        let b = tape.leaf(t(&[3, 2], &[0.5, -1., 2., 0., 1., 3.]), true);
        let c = tape.matmul(a, b).unwrap();
        let l = tape.sum(c).unwrap();
        tape.backward(l).unwrap();
        // dA = 1 * B^T, row sums of B
        assert_eq!(tape.grad(a).unwrap().data(), &[-0.5, 2., 4., -0.5, 2., 4.]);
        // dB = A^T * 1, column sums of A
        assert_eq!(tape.grad(b).unwrap().data(), &[5., 5., 7., 7., 9., 9.]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::new(&[3], vec![0.3, -2.0, 7.0]).unwrap(), true);
        let l = tape.sum(w).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_chain_rule() {
        // loss = sum((w*x)^2) at w=2, x=3 -> dL/dw = 2*6*3 = 36
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::scalar(2.0), true);
        let x = tape.leaf(Tensor::scalar(3.0), false);
        let y = tape.mul(w, x).unwrap();
        let y2 = tape.mul(y, y).unwrap();
        let l = tape.sum(y2).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[36.0]);
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn constant_graph_writes_no_grads() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::scalar(2.0), false);
        let b = tape.mul(a, a).unwrap();
        let l = tape.sum(b).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(a).is_none());
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn fan_out_doubles_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1.5, -0.25]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let mut tape = Tape::<f32>::new();
        let w = tape.leaf(Tensor::new(&[2], vec![1.0, 2.0]).unwrap(), true);
        let s = tape.scale(w, 3.0).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(w).unwrap().data(), &[6.0, 6.0]);
        tape.zero_grad();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_empty() {
        let mut tape = Tape::<f32>::new();
        let l = Var(0);
        assert!(matches!(tape.backward(l), Err(Error::Contract(_))));
        let w = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn heaviside_forward_and_surrogate_backward() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, 0.0, 0.5]).unwrap(), true);
        let s = tape.heaviside(x, SurrogateSpec::default()).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0, 1.0]);
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g.data()[1], 1.0);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::scalar(f32::MAX), false);
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "scale" }));
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(t(&[1, 2], &[0.0, 0.0]), true);
        let loss = tape.weighted_cross_entropy(l, &[0], &[1.0, 1.0]).unwrap();
        assert!((tape.value(loss).data()[0] - 2f64.ln()).abs() < 1e-12);

        let l = tape.leaf(t(&[1, 2], &[30.0, -30.0]), false);
        let loss = tape.weighted_cross_entropy(l, &[0], &[1.0, 1.0]).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-9);

        let l = tape.leaf(t(&[1, 2], &[0.0, 0.0]), false);
        assert!(matches!(
            tape.weighted_cross_entropy(l, &[2], &[1.0, 1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn inference_tape_records_no_grad() {
        let mut tape = Tape::<f32>::inference();
        let w = tape.leaf(Tensor::scalar(2.0), true);
        assert!(!tape.requires_grad(w));
        let y = tape.scale(w, 2.0).unwrap();
        assert_eq!(tape.op_kinds(0, 2), vec![OpKind::Leaf, OpKind::Leaf]);
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(w).is_none());
    }
}
