// SPDX-License-Identifier: Apache-2.0

//! Spiking building blocks.
//!
//! Feature maps travel as `[T*B, C, H, W]` with the simulation step as the
//! outer index. Every block spikes its real-valued input first, so each
//! costed convolution after the stem consumes binary events. Residual
//! shortcuts add the block input to the block output in the real domain.

use crate::autodiff::Var;
use crate::energy::{CostedLayer, Domain, LayerGeometry};
use crate::error::{Error, Result};
use crate::kernels::{conv_out_len, BmmShape, ConvGeom};
use crate::params::{Init, ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::session::Session;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

/// Affine normalization parameters and running statistics of one layer.
#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl NormParams {
    fn apply<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        sess.norm(x, self.gamma, self.beta, self.running_mean, self.running_var, NORM_EPS)
    }

    /// Per-channel `(scale, shift)` equivalent to the frozen normalization.
    fn affine<S: Scalar>(&self, store: &ParamStore<S>) -> (Vec<f64>, Vec<f64>) {
        let g = store.value(self.gamma).data();
        let b = store.value(self.beta).data();
        let m = store.value(self.running_mean).data();
        let v = store.value(self.running_var).data();
        let scale: Vec<f64> = g
            .iter()
            .zip(v)
            .map(|(g, v)| g.as_f64() / (v.as_f64() + NORM_EPS).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(m.iter().zip(b))
            .map(|(s, (m, b))| b.as_f64() - m.as_f64() * s)
            .collect();
        (scale, shift)
    }
}

/// Convolution with optional bias and optional normalization.
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub norm: Option<NormParams>,
    pub geom: ConvGeom,
    pub depthwise: bool,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: (usize, usize),
    pub in_hw: (usize, usize),
}

impl ConvUnit {
    pub fn out_hw(&self) -> (usize, usize) {
        let h = conv_out_len(self.in_hw.0, self.kernel.0, self.geom.stride.0, self.geom.pad.0);
        let w = conv_out_len(self.in_hw.1, self.kernel.1, self.geom.stride.1, self.geom.pad.1);
        (h.unwrap_or(0), w.unwrap_or(0))
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = sess.param(self.weight);
        let b = self.bias.map(|b| sess.param(b));
        let y = if self.depthwise {
            sess.tape.depthwise_conv2d(x, w, b, self.geom)?
        } else {
            sess.tape.conv2d(x, w, b, self.geom)?
        };
        match &self.norm {
            Some(n) => n.apply(sess, y),
            None => Ok(y),
        }
    }

    pub fn geometry(&self) -> LayerGeometry {
        let (h_out, w_out) = self.out_hw();
        if self.depthwise {
            LayerGeometry::Depthwise {
                kh: self.kernel.0,
                kw: self.kernel.1,
                channels: self.c_in,
                h_out,
                w_out,
            }
        } else {
            LayerGeometry::Conv {
                kh: self.kernel.0,
                kw: self.kernel.1,
                c_in: self.c_in,
                c_out: self.c_out,
                h_out,
                w_out,
            }
        }
    }

    fn cost(&self, rate_site: &str) -> CostedLayer {
        CostedLayer {
            name: self.name.clone(),
            geometry: self.geometry(),
            domain: Domain::Ac,
            rate_site: Some(rate_site.to_string()),
        }
    }

    /// Dense weights and bias after folding the frozen normalization, with
    /// the kernel zero-embedded at the centre of a `k x k` window.
    fn folded_dense<S: Scalar>(&self, store: &ParamStore<S>, k: usize) -> (Vec<f64>, Vec<f64>) {
        debug_assert!(!self.depthwise && self.kernel.0 <= k && self.kernel.1 <= k);
        let (kh, kw) = self.kernel;
        let (oh, ow) = ((k - kh) / 2, (k - kw) / 2);
        let src = store.value(self.weight).data();
        let mut w = vec![0.0; self.c_out * self.c_in * k * k];
        for co in 0..self.c_out {
            for ci in 0..self.c_in {
                for i in 0..kh {
                    for j in 0..kw {
                        w[((co * self.c_in + ci) * k + i + oh) * k + j + ow] =
                            src[((co * self.c_in + ci) * kh + i) * kw + j].as_f64();
                    }
                }
            }
        }
        let mut b = match self.bias {
            Some(id) => store.value(id).data().iter().map(|v| v.as_f64()).collect(),
            None => vec![0.0; self.c_out],
        };
        if let Some(n) = &self.norm {
            let (scale, shift) = n.affine(store);
            let per_out = self.c_in * k * k;
            for co in 0..self.c_out {
                w[co * per_out..(co + 1) * per_out].iter_mut().for_each(|v| *v *= scale[co]);
                b[co] = b[co] * scale[co] + shift[co];
            }
        }
        (w, b)
    }
}

/// Allocates parameters for blocks.
pub struct BlockBuilder<'a, S: Scalar = f32> {
    store: &'a mut ParamStore<S>,
    init: Init,
    /// Attach normalization after every convolution.
    pub norm: bool,
    /// Give convolutions a bias when they are not normalized.
    pub bias: bool,
}

impl<'a, S: Scalar> BlockBuilder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, seed: u64, norm: bool) -> Self {
        Self {
            store,
            init: Init::new(seed),
            norm,
            bias: true,
        }
    }

    pub fn store(&mut self) -> &mut ParamStore<S> {
        self.store
    }

    pub fn norm_params(&mut self, name: &str, c: usize) -> NormParams {
        NormParams {
            gamma: self.store.insert(format!("{name}.bn.weight"), Tensor::ones(&[c]), ParamKind::Learnable),
            beta: self.store.insert(format!("{name}.bn.bias"), Tensor::zeros(&[c]), ParamKind::Learnable),
            running_mean: self.store.insert(format!("{name}.bn.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer),
            running_var: self.store.insert(format!("{name}.bn.running_var"), Tensor::ones(&[c]), ParamKind::Buffer),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        geom: ConvGeom,
        in_hw: (usize, usize),
        depthwise: bool,
    ) -> ConvUnit {
        let (fan_in, shape) = if depthwise {
            (kernel.0 * kernel.1, [c_in, 1, kernel.0, kernel.1])
        } else {
            (c_in * kernel.0 * kernel.1, [c_out, c_in, kernel.0, kernel.1])
        };
        let w = self.init.kaiming(&shape, fan_in);
        let weight = self.store.insert(format!("{name}.weight"), w, ParamKind::Learnable);
        let bias = (!self.norm && self.bias).then(|| {
            let b = self.init.uniform(&[c_out], 1.0 / (fan_in as f64).sqrt());
            self.store.insert(format!("{name}.bias"), b, ParamKind::Learnable)
        });
        let norm = self.norm.then(|| self.norm_params(name, c_out));
        ConvUnit {
            name: name.to_string(),
            weight,
            bias,
            norm,
            geom,
            depthwise,
            c_in,
            c_out,
            kernel,
            in_hw,
        }
    }

    pub fn linear(&mut self, name: &str, c_in: usize, c_out: usize) -> Linear {
        let weight = self.init.kaiming(&[c_in, c_out], c_in);
        let bias = self.init.uniform(&[c_out], 1.0 / (c_in as f64).sqrt());
        Linear {
            name: name.to_string(),
            weight: self.store.insert(format!("{name}.weight"), weight, ParamKind::Learnable),
            bias: self.store.insert(format!("{name}.bias"), bias, ParamKind::Learnable),
            c_in,
            c_out,
        }
    }
}

/// Dense layer on `[B, C_in]` rows; weight stored `[C_in, C_out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (sess.param(self.weight), sess.param(self.bias));
        let y = sess.tape.matmul(x, w)?;
        sess.tape.add_row_bias(y, b)
    }
}

/// Multi-branch 3x3 convolution that folds into a single 3x3 for inference.
#[derive(Debug, Clone)]
pub enum RepConv {
    Branches {
        name: String,
        k3: ConvUnit,
        k1: ConvUnit,
        /// Present when input and output widths agree.
        identity: Option<Option<NormParams>>,
    },
    Folded(ConvUnit),
}

impl RepConv {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c_in: usize, c_out: usize, in_hw: (usize, usize)) -> Self {
        let k3 = b.conv(&format!("{name}.k3"), c_in, c_out, (3, 3), ConvGeom::same(3), in_hw, false);
        let k1 = b.conv(&format!("{name}.k1"), c_in, c_out, (1, 1), ConvGeom::unit(), in_hw, false);
        let identity = (c_in == c_out).then(|| b.norm.then(|| b.norm_params(&format!("{name}.id"), c_out)));
        RepConv::Branches {
            name: name.to_string(),
            k3,
            k1,
            identity,
        }
    }

    /// Folded skeleton, used when loading an already folded checkpoint.
    pub fn build_folded<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c_in: usize, c_out: usize, in_hw: (usize, usize)) -> Self {
        let (norm, bias) = (b.norm, b.bias);
        b.norm = false;
        b.bias = true;
        let unit = b.conv(&format!("{name}.fused"), c_in, c_out, (3, 3), ConvGeom::same(3), in_hw, false);
        b.norm = norm;
        b.bias = bias;
        RepConv::Folded(unit)
    }

    pub fn name(&self) -> &str {
        match self {
            RepConv::Branches { name, .. } => name,
            RepConv::Folded(u) => u.name.strip_suffix(".fused").unwrap_or(&u.name),
        }
    }

    pub fn is_folded(&self) -> bool {
        matches!(self, RepConv::Folded(_))
    }

    fn any_unit(&self) -> &ConvUnit {
        match self {
            RepConv::Branches { k3, .. } => k3,
            RepConv::Folded(u) => u,
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        match self {
            RepConv::Folded(unit) => unit.forward(sess, x),
            RepConv::Branches { k3, k1, identity, .. } => {
                let a = k3.forward(sess, x)?;
                let b = k1.forward(sess, x)?;
                let mut y = sess.tape.add(a, b)?;
                if let Some(norm) = identity {
                    let id = match norm {
                        Some(n) => n.apply(sess, x)?,
                        None => x,
                    };
                    y = sess.tape.add(y, id)?;
                }
                Ok(y)
            }
        }
    }

    /// Single-kernel weights `[C_out, C_in, 3, 3]` and bias equivalent to the
    /// branch sum under frozen statistics. A folded conv returns its own.
    pub fn fold_weights<S: Scalar>(&self, store: &ParamStore<S>) -> (Tensor<S>, Tensor<S>) {
        let unit = self.any_unit();
        let (c_in, c_out) = (unit.c_in, unit.c_out);
        let (w, b) = match self {
            RepConv::Folded(u) => u.folded_dense(store, 3),
            RepConv::Branches { k3, k1, identity, .. } => {
                let (mut w, mut b) = k3.folded_dense(store, 3);
                let (w1, b1) = k1.folded_dense(store, 3);
                w.iter_mut().zip(&w1).for_each(|(a, v)| *a += v);
                b.iter_mut().zip(&b1).for_each(|(a, v)| *a += v);
                if let Some(norm) = identity {
                    let (scale, shift) = match norm {
                        Some(n) => n.affine(store),
                        None => (vec![1.0; c_out], vec![0.0; c_out]),
                    };
                    for c in 0..c_out {
                        w[((c * c_in + c) * 3 + 1) * 3 + 1] += scale[c];
                        b[c] += shift[c];
                    }
                }
                (w, b)
            }
        };
        let w = Tensor::new(&[c_out, c_in, 3, 3], w.into_iter().map(S::of).collect()).expect("fold shape");
        let b = Tensor::new(&[c_out], b.into_iter().map(S::of).collect()).expect("fold shape");
        (w, b)
    }

    /// Replaces the branches by one biased 3x3 convolution, moving the
    /// parameters in `store`. Returns whether anything changed.
    pub fn fold_in_place<S: Scalar>(&mut self, store: &mut ParamStore<S>) -> bool {
        if self.is_folded() {
            return false;
        }
        let (w, b) = self.fold_weights(store);
        let RepConv::Branches { name, k3, k1, identity } = std::mem::replace(self, RepConv::Folded(placeholder_unit())) else {
            unreachable!()
        };
        for unit in [&k3, &k1] {
            remove_unit(store, unit);
        }
        if let Some(Some(n)) = &identity {
            remove_norm(store, n);
        }
        let fused_name = format!("{name}.fused");
        let weight = store.insert(format!("{fused_name}.weight"), w, ParamKind::Learnable);
        let bias = store.insert(format!("{fused_name}.bias"), b, ParamKind::Learnable);
        *self = RepConv::Folded(ConvUnit {
            name: fused_name,
            weight,
            bias: Some(bias),
            norm: None,
            geom: ConvGeom::same(3),
            depthwise: false,
            c_in: k3.c_in,
            c_out: k3.c_out,
            kernel: (3, 3),
            in_hw: k3.in_hw,
        });
        true
    }

    fn cost(&self, rate_site: &str) -> CostedLayer {
        let unit = self.any_unit();
        let (h_out, w_out) = unit.out_hw();
        CostedLayer {
            name: self.name().to_string(),
            geometry: LayerGeometry::Conv {
                kh: 3,
                kw: 3,
                c_in: unit.c_in,
                c_out: unit.c_out,
                h_out,
                w_out,
            },
            domain: Domain::Ac,
            rate_site: Some(rate_site.to_string()),
        }
    }
}

fn placeholder_unit() -> ConvUnit {
    ConvUnit {
        name: String::new(),
        weight: ParamId(usize::MAX),
        bias: None,
        norm: None,
        geom: ConvGeom::unit(),
        depthwise: false,
        c_in: 0,
        c_out: 0,
        kernel: (0, 0),
        in_hw: (0, 0),
    }
}

fn remove_norm<S: Scalar>(store: &mut ParamStore<S>, n: &NormParams) {
    for id in [n.gamma, n.beta, n.running_mean, n.running_var] {
        store.remove(id);
    }
}

fn remove_unit<S: Scalar>(store: &mut ParamStore<S>, unit: &ConvUnit) {
    store.remove(unit.weight);
    if let Some(b) = unit.bias {
        store.remove(b);
    }
    if let Some(n) = &unit.norm {
        remove_norm(store, n);
    }
}

fn check_channels<S: Scalar>(sess: &Session<'_, S>, x: Var, c: usize, block: &str) -> Result<()> {
    let shape = sess.tape.shape(x);
    if shape.len() != 4 || shape[1] != c {
        return Err(Error::Shape(format!(
            "{block} expects [N, {c}, H, W] input, got {shape:?}"
        )));
    }
    Ok(())
}

/// `PW(DW(SN(PW(SN(x))))) + x` with a 7x7 depthwise stage.
#[derive(Debug, Clone)]
pub struct SepConv {
    pub name: String,
    pub channels: usize,
    pub pw1: ConvUnit,
    pub dw: ConvUnit,
    pub pw2: ConvUnit,
}

impl SepConv {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c: usize, expansion: usize, hw: (usize, usize)) -> Self {
        let hidden = c * expansion;
        Self {
            name: name.to_string(),
            channels: c,
            pw1: b.conv(&format!("{name}.pw1"), c, hidden, (1, 1), ConvGeom::unit(), hw, false),
            dw: b.conv(&format!("{name}.dw"), hidden, hidden, (7, 7), ConvGeom::same(7), hw, true),
            pw2: b.conv(&format!("{name}.pw2"), hidden, c, (1, 1), ConvGeom::unit(), hw, false),
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        check_channels(sess, x, self.channels, "sepconv")?;
        let s = sess.spike(&format!("{}.sn_in", self.name), x)?;
        let a = self.pw1.forward(sess, s)?;
        let s = sess.spike(&format!("{}.sn_mid", self.name), a)?;
        let d = self.dw.forward(sess, s)?;
        let y = self.pw2.forward(sess, d)?;
        sess.tape.add(y, x)
    }

    /// The second pointwise stage is linear in the depthwise stage's spikes,
    /// so both are charged at that site's rate.
    pub fn costs(&self, out: &mut Vec<CostedLayer>) {
        out.push(self.pw1.cost(&format!("{}.sn_in", self.name)));
        out.push(self.dw.cost(&format!("{}.sn_mid", self.name)));
        out.push(self.pw2.cost(&format!("{}.sn_mid", self.name)));
    }
}

/// `Conv(SN(Conv(SN(x)))) + x` with 3x3 stride-1 convolutions.
#[derive(Debug, Clone)]
pub struct ChannelConv {
    pub name: String,
    pub channels: usize,
    pub conv1: ConvUnit,
    pub conv2: ConvUnit,
}

impl ChannelConv {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c: usize, hw: (usize, usize)) -> Self {
        Self {
            name: name.to_string(),
            channels: c,
            conv1: b.conv(&format!("{name}.conv1"), c, c, (3, 3), ConvGeom::same(3), hw, false),
            conv2: b.conv(&format!("{name}.conv2"), c, c, (3, 3), ConvGeom::same(3), hw, false),
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        check_channels(sess, x, self.channels, "channelconv")?;
        let s = sess.spike(&format!("{}.sn1", self.name), x)?;
        let a = self.conv1.forward(sess, s)?;
        let s = sess.spike(&format!("{}.sn2", self.name), a)?;
        let y = self.conv2.forward(sess, s)?;
        sess.tape.add(y, x)
    }

    pub fn costs(&self, out: &mut Vec<CostedLayer>) {
        out.push(self.conv1.cost(&format!("{}.sn1", self.name)));
        out.push(self.conv2.cost(&format!("{}.sn2", self.name)));
    }
}

/// Linear-order attention over binary tensors laid out `[N, C, tokens]`.
///
/// Per image and head, with `K` and `V` stored channel-major, computes
/// `Q (K^T V)` in token-major terms: first the `d x d` matrix `K V^T`, then
/// its transpose applied to `Q`. No softmax, no scaling.
pub fn spike_driven_attention<S: Scalar>(
    sess: &mut Session<'_, S>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
) -> Result<Var> {
    let shape = sess.tape.shape(q).to_vec();
    if shape.len() != 4 || sess.tape.shape(k) != shape.as_slice() || sess.tape.shape(v) != shape.as_slice() {
        return Err(Error::Shape(format!(
            "attention operands must share a [N, C, H, W] shape, got {shape:?}"
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    if heads == 0 || c % heads != 0 {
        return Err(Error::Shape(format!("{c} channels cannot be split into {heads} heads")));
    }
    let tokens = shape[2] * shape[3];
    let d = c / heads;
    let batch = n * heads;
    let kv = sess.tape.bmm(
        k,
        v,
        BmmShape {
            batch,
            m: d,
            k: tokens,
            n: d,
            trans_a: false,
            trans_b: true,
        },
        &[batch, d, d],
    )?;
    sess.tape.bmm(
        kv,
        q,
        BmmShape {
            batch,
            m: d,
            k: d,
            n: tokens,
            trans_a: true,
            trans_b: false,
        },
        &shape,
    )
}

/// Spike-driven self-attention with re-parameterizable projections.
#[derive(Debug, Clone)]
pub struct Sdsa {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub q: RepConv,
    pub k: RepConv,
    pub v: RepConv,
    pub out: RepConv,
}

impl Sdsa {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c: usize, heads: usize, hw: (usize, usize), folded: bool) -> Self {
        let make = |b: &mut BlockBuilder<'_, S>, part: &str| {
            let n = format!("{name}.{part}");
            if folded {
                RepConv::build_folded(b, &n, c, c, hw)
            } else {
                RepConv::build(b, &n, c, c, hw)
            }
        };
        Self {
            name: name.to_string(),
            channels: c,
            heads,
            q: make(b, "q"),
            k: make(b, "k"),
            v: make(b, "v"),
            out: make(b, "proj"),
        }
    }

    pub fn site(&self, part: &str) -> String {
        format!("{}.{part}", self.name)
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        check_channels(sess, x, self.channels, "sdsa")?;
        let s = sess.spike(&self.site("sn_in"), x)?;
        let q = self.q.forward(sess, s)?;
        let q = sess.spike(&self.site("sn_q"), q)?;
        let k = self.k.forward(sess, s)?;
        let k = sess.spike(&self.site("sn_k"), k)?;
        let v = self.v.forward(sess, s)?;
        let v = sess.spike(&self.site("sn_v"), v)?;
        let attn = spike_driven_attention(sess, q, k, v, self.heads)?;
        let a = sess.spike(&self.site("sn_attn"), attn)?;
        let y = self.out.forward(sess, a)?;
        sess.tape.add(y, x)
    }

    pub fn repconvs_mut(&mut self) -> [&mut RepConv; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.out]
    }

    pub fn costs(&self, out: &mut Vec<CostedLayer>) {
        let sn_in = self.site("sn_in");
        out.push(self.q.cost(&sn_in));
        out.push(self.k.cost(&sn_in));
        out.push(self.v.cost(&sn_in));
        let unit = self.q.any_unit();
        let (h, w) = unit.out_hw();
        let attn = LayerGeometry::Attention {
            tokens: h * w,
            channels: self.channels,
            heads: self.heads,
        };
        out.push(CostedLayer {
            name: format!("{}.attn_kv", self.name),
            geometry: attn.clone(),
            domain: Domain::Ac,
            rate_site: Some(self.site("sn_k")),
        });
        out.push(CostedLayer {
            name: format!("{}.attn_q", self.name),
            geometry: attn,
            domain: Domain::Ac,
            rate_site: Some(self.site("sn_q")),
        });
        out.push(self.out.cost(&self.site("sn_attn")));
    }
}

/// Token-wise two-layer spiking MLP `SN(SN(x) W1) W2 + x`, realised with
/// 1x1 convolutions.
#[derive(Debug, Clone)]
pub struct SpikingMlp {
    pub name: String,
    pub channels: usize,
    pub hidden: usize,
    pub fc1: ConvUnit,
    pub fc2: ConvUnit,
}

impl SpikingMlp {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c: usize, ratio: usize, hw: (usize, usize)) -> Self {
        let hidden = c * ratio;
        Self {
            name: name.to_string(),
            channels: c,
            hidden,
            fc1: b.conv(&format!("{name}.fc1"), c, hidden, (1, 1), ConvGeom::unit(), hw, false),
            fc2: b.conv(&format!("{name}.fc2"), hidden, c, (1, 1), ConvGeom::unit(), hw, false),
        }
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        check_channels(sess, x, self.channels, "mlp")?;
        let s = sess.spike(&format!("{}.sn1", self.name), x)?;
        let h = self.fc1.forward(sess, s)?;
        let s = sess.spike(&format!("{}.sn2", self.name), h)?;
        let y = self.fc2.forward(sess, s)?;
        sess.tape.add(y, x)
    }

    pub fn costs(&self, out: &mut Vec<CostedLayer>) {
        out.push(self.fc1.cost(&format!("{}.sn1", self.name)));
        out.push(self.fc2.cost(&format!("{}.sn2", self.name)));
    }
}

/// Spike, then 3x3 stride-2 convolution with normalization.
#[derive(Debug, Clone)]
pub struct Downsample {
    pub name: String,
    pub conv: ConvUnit,
}

impl Downsample {
    pub fn build<S: Scalar>(b: &mut BlockBuilder<'_, S>, name: &str, c_in: usize, c_out: usize, hw: (usize, usize)) -> Result<Self> {
        if hw.0 < 2 || hw.1 < 2 {
            return Err(Error::Shape(format!("cannot downsample a {}x{} map", hw.0, hw.1)));
        }
        Ok(Self {
            name: name.to_string(),
            conv: b.conv(&format!("{name}.conv"), c_in, c_out, (3, 3), ConvGeom::new((2, 2), (1, 1)), hw, false),
        })
    }

    pub fn out_hw(&self) -> (usize, usize) {
        self.conv.out_hw()
    }

    pub fn forward<S: Scalar>(&self, sess: &mut Session<'_, S>, x: Var) -> Result<Var> {
        check_channels(sess, x, self.conv.c_in, "downsample")?;
        let shape = sess.tape.shape(x);
        if shape[2] < 2 || shape[3] < 2 {
            return Err(Error::Shape(format!("cannot downsample a {}x{} map", shape[2], shape[3])));
        }
        let s = sess.spike(&format!("{}.sn", self.name), x)?;
        self.conv.forward(sess, s)
    }

    pub fn costs(&self, out: &mut Vec<CostedLayer>) {
        out.push(self.conv.cost(&format!("{}.sn", self.name)));
    }
}
