// SPDX-License-Identifier: Apache-2.0

//! Raw compute kernels behind the tape operations.
//!
//! Images are processed independently and in parallel. Weight-gradient
//! reductions are grouped in fixed-size image chunks and the chunk partials
//! are summed in order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const GRAD_CHUNK: usize = 4;

/// Stride and zero padding of a 2-D convolution, as (rows, cols).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub const fn unit() -> Self {
        Self {
            stride: (1, 1),
            pad: (0, 0),
        }
    }

    pub const fn same(k: usize) -> Self {
        Self {
            stride: (1, 1),
            pad: (k / 2, k / 2),
        }
    }

    pub const fn new(stride: (usize, usize), pad: (usize, usize)) -> Self {
        Self { stride, pad }
    }
}

/// Fully resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub geom: ConvGeom,
    pub h_out: usize,
    pub w_out: usize,
    pub depthwise: bool,
}

/// Output length of a strided, padded window along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || k > len + 2 * pad {
        return None;
    }
    Some((len + 2 * pad - k) / stride + 1)
}

impl ConvShape {
    pub fn resolve(x: &[usize], w: &[usize], geom: ConvGeom, depthwise: bool) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Shape(format!(
                "conv expects 4-d input and weight, got {x:?} and {w:?}"
            )));
        }
        let (n, c_in, h, wd) = (x[0], x[1], x[2], x[3]);
        let (c_out, wc, kh, kw) = (w[0], w[1], w[2], w[3]);
        if depthwise {
            if wc != 1 || c_out != c_in {
                return Err(Error::Shape(format!(
                    "depthwise weight {w:?} does not match {c_in} input channels"
                )));
            }
        } else if wc != c_in {
            return Err(Error::Shape(format!(
                "conv weight {w:?} expects {wc} input channels, input {x:?} has {c_in}"
            )));
        }
        let geometry_err = || {
            Error::Shape(format!(
                "kernel {kh}x{kw} with {geom:?} does not fit input {h}x{wd}"
            ))
        };
        let h_out = conv_out_len(h, kh, geom.stride.0, geom.pad.0).ok_or_else(geometry_err)?;
        let w_out = conv_out_len(wd, kw, geom.stride.1, geom.pad.1).ok_or_else(geometry_err)?;
        Ok(Self {
            n,
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            geom,
            h_out,
            w_out,
            depthwise,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    fn in_image(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1
            && self.kw == 1
            && self.geom.stride == (1, 1)
            && self.geom.pad == (0, 0)
    }

    /// Valid output index range along one axis for kernel tap `tap`.
    fn valid(out: usize, inp: usize, tap: usize, stride: usize, pad: usize) -> (usize, usize) {
        // input index = o * stride + tap - pad must lie in [0, inp)
        let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
        let hi = if inp + pad > tap {
            ((inp + pad - tap - 1) / stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn im2col<S: Scalar>(cs: &ConvShape, x: &[S], cols: &mut [S]) {
    let p = cs.out_plane();
    let (sh, sw) = cs.geom.stride;
    let (ph, pw) = cs.geom.pad;
    for c in 0..cs.c_in {
        let plane = &x[c * cs.h * cs.w..(c + 1) * cs.h * cs.w];
        for i in 0..cs.kh {
            let (oh_lo, oh_hi) = ConvShape::valid(cs.h_out, cs.h, i, sh, ph);
            for j in 0..cs.kw {
                let row = ((c * cs.kh + i) * cs.kw + j) * p;
                let dst = &mut cols[row..row + p];
                dst.fill(S::zero());
                let (ow_lo, ow_hi) = ConvShape::valid(cs.w_out, cs.w, j, sw, pw);
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + i - ph;
                    let src = &plane[ih * cs.w..(ih + 1) * cs.w];
                    let d = &mut dst[oh * cs.w_out..(oh + 1) * cs.w_out];
                    if sw == 1 {
                        let start = ow_lo + j - pw;
                        d[ow_lo..ow_hi].copy_from_slice(&src[start..start + (ow_hi - ow_lo)]);
                    } else {
                        for ow in ow_lo..ow_hi {
                            d[ow] = src[ow * sw + j - pw];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<S: Scalar>(cs: &ConvShape, cols: &[S], gx: &mut [S]) {
    let p = cs.out_plane();
    let (sh, sw) = cs.geom.stride;
    let (ph, pw) = cs.geom.pad;
    for c in 0..cs.c_in {
        let plane = &mut gx[c * cs.h * cs.w..(c + 1) * cs.h * cs.w];
        for i in 0..cs.kh {
            let (oh_lo, oh_hi) = ConvShape::valid(cs.h_out, cs.h, i, sh, ph);
            for j in 0..cs.kw {
                let row = ((c * cs.kh + i) * cs.kw + j) * p;
                let src = &cols[row..row + p];
                let (ow_lo, ow_hi) = ConvShape::valid(cs.w_out, cs.w, j, sw, pw);
                for oh in oh_lo..oh_hi {
                    let ih = oh * sh + i - ph;
                    let dst = &mut plane[ih * cs.w..(ih + 1) * cs.w];
                    let s = &src[oh * cs.w_out..(oh + 1) * cs.w_out];
                    for ow in ow_lo..ow_hi {
                        dst[ow * sw + j - pw] += s[ow];
                    }
                }
            }
        }
    }
}

/// Dense cross-correlation. `out` is overwritten.
pub fn conv2d_forward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    out: &mut [S],
) {
    debug_assert!(!cs.depthwise);
    let p = cs.out_plane();
    let k = cs.patch();
    out.par_chunks_mut(cs.c_out * p)
        .zip(x.par_chunks(cs.in_image()))
        .for_each(|(o, xi)| {
            if cs.is_pointwise() {
                S::gemm(cs.c_out, k, p, S::one(), w, (k, 1), xi, (p, 1), S::zero(), o, (p, 1));
            } else {
                let mut cols = vec![S::zero(); k * p];
                im2col(cs, xi, &mut cols);
                S::gemm(cs.c_out, k, p, S::one(), w, (k, 1), &cols, (p, 1), S::zero(), o, (p, 1));
            }
            if let Some(b) = bias {
                for (co, plane) in o.chunks_mut(p).enumerate() {
                    plane.iter_mut().for_each(|v| *v += b[co]);
                }
            }
        });
}

fn ordered_sum<S: Scalar>(partials: Vec<Vec<S>>, acc: &mut [S]) {
    for part in partials {
        for (a, v) in acc.iter_mut().zip(part) {
            *a += v;
        }
    }
}

fn bias_grad<S: Scalar>(gout: &[S], channels: usize, plane: usize, gb: &mut [S]) {
    for img in gout.chunks(channels * plane) {
        for (c, pl) in img.chunks(plane).enumerate() {
            gb[c] += pl.iter().copied().sum::<S>();
        }
    }
}

/// Accumulates input, weight and bias gradients of a dense convolution.
pub fn conv2d_backward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    w: &[S],
    gout: &[S],
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let p = cs.out_plane();
    let k = cs.patch();
    let out_img = cs.c_out * p;
    if let Some(gx) = gx {
        gx.par_chunks_mut(cs.in_image())
            .zip(gout.par_chunks(out_img))
            .for_each(|(gxi, gi)| {
                if cs.is_pointwise() {
                    S::gemm(k, cs.c_out, p, S::one(), w, (1, k), gi, (p, 1), S::one(), gxi, (p, 1));
                } else {
                    let mut cols = vec![S::zero(); k * p];
                    S::gemm(k, cs.c_out, p, S::one(), w, (1, k), gi, (p, 1), S::zero(), &mut cols, (p, 1));
                    col2im_add(cs, &cols, gxi);
                }
            });
    }
    if let Some(gw) = gw {
        let partials: Vec<Vec<S>> = x
            .par_chunks(cs.in_image() * GRAD_CHUNK)
            .zip(gout.par_chunks(out_img * GRAD_CHUNK))
            .map(|(xc, gc)| {
                let mut acc = vec![S::zero(); cs.c_out * k];
                let mut cols = if cs.is_pointwise() { Vec::new() } else { vec![S::zero(); k * p] };
                for (xi, gi) in xc.chunks(cs.in_image()).zip(gc.chunks(out_img)) {
                    let src: &[S] = if cs.is_pointwise() {
                        xi
                    } else {
                        im2col(cs, xi, &mut cols);
                        &cols
                    };
                    S::gemm(cs.c_out, p, k, S::one(), gi, (p, 1), src, (1, p), S::one(), &mut acc, (k, 1));
                }
                acc
            })
            .collect();
        ordered_sum(partials, gw);
    }
    if let Some(gb) = gb {
        bias_grad(gout, cs.c_out, p, gb);
    }
}

/// Per-channel cross-correlation with one filter per channel.
pub fn depthwise_forward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    w: &[S],
    bias: Option<&[S]>,
    out: &mut [S],
) {
    debug_assert!(cs.depthwise);
    let (sh, sw) = cs.geom.stride;
    let (ph, pw) = cs.geom.pad;
    let plane_in = cs.h * cs.w;
    let plane_out = cs.out_plane();
    let taps = cs.kh * cs.kw;
    out.par_chunks_mut(plane_out)
        .zip(x.par_chunks(plane_in))
        .enumerate()
        .for_each(|(idx, (o, xp))| {
            let c = idx % cs.c_in;
            let wk = &w[c * taps..(c + 1) * taps];
            o.fill(bias.map_or(S::zero(), |b| b[c]));
            for i in 0..cs.kh {
                let (oh_lo, oh_hi) = ConvShape::valid(cs.h_out, cs.h, i, sh, ph);
                for j in 0..cs.kw {
                    let wv = wk[i * cs.kw + j];
                    let (ow_lo, ow_hi) = ConvShape::valid(cs.w_out, cs.w, j, sw, pw);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + i - ph;
                        let src = &xp[ih * cs.w..(ih + 1) * cs.w];
                        let dst = &mut o[oh * cs.w_out..(oh + 1) * cs.w_out];
                        if sw == 1 {
                            let start = ow_lo + j - pw;
                            for (d, &v) in dst[ow_lo..ow_hi].iter_mut().zip(&src[start..]) {
                                *d += wv * v;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                dst[ow] += wv * src[ow * sw + j - pw];
                            }
                        }
                    }
                }
            }
        });
}

pub fn depthwise_backward<S: Scalar>(
    cs: &ConvShape,
    x: &[S],
    w: &[S],
    gout: &[S],
    gx: Option<&mut [S]>,
    gw: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let (sh, sw) = cs.geom.stride;
    let (ph, pw) = cs.geom.pad;
    let plane_in = cs.h * cs.w;
    let plane_out = cs.out_plane();
    let taps = cs.kh * cs.kw;
    if let Some(gx) = gx {
        gx.par_chunks_mut(plane_in)
            .zip(gout.par_chunks(plane_out))
            .enumerate()
            .for_each(|(idx, (gxp, gp))| {
                let c = idx % cs.c_in;
                let wk = &w[c * taps..(c + 1) * taps];
                for i in 0..cs.kh {
                    let (oh_lo, oh_hi) = ConvShape::valid(cs.h_out, cs.h, i, sh, ph);
                    for j in 0..cs.kw {
                        let wv = wk[i * cs.kw + j];
                        let (ow_lo, ow_hi) = ConvShape::valid(cs.w_out, cs.w, j, sw, pw);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * sh + i - ph;
                            let dst = &mut gxp[ih * cs.w..(ih + 1) * cs.w];
                            let src = &gp[oh * cs.w_out..(oh + 1) * cs.w_out];
                            for ow in ow_lo..ow_hi {
                                dst[ow * sw + j - pw] += wv * src[ow];
                            }
                        }
                    }
                }
            });
    }
    if let Some(gw) = gw {
        let img_in = cs.c_in * plane_in;
        let img_out = cs.c_in * plane_out;
        let partials: Vec<Vec<S>> = x
            .par_chunks(img_in * GRAD_CHUNK)
            .zip(gout.par_chunks(img_out * GRAD_CHUNK))
            .map(|(xc, gc)| {
                let mut acc = vec![S::zero(); cs.c_in * taps];
                for (xi, gi) in xc.chunks(img_in).zip(gc.chunks(img_out)) {
                    for c in 0..cs.c_in {
                        let xp = &xi[c * plane_in..(c + 1) * plane_in];
                        let gp = &gi[c * plane_out..(c + 1) * plane_out];
                        for i in 0..cs.kh {
                            let (oh_lo, oh_hi) = ConvShape::valid(cs.h_out, cs.h, i, sh, ph);
                            for j in 0..cs.kw {
                                let (ow_lo, ow_hi) = ConvShape::valid(cs.w_out, cs.w, j, sw, pw);
                                let mut s = S::zero();
                                for oh in oh_lo..oh_hi {
                                    let ih = oh * sh + i - ph;
                                    let src = &xp[ih * cs.w..(ih + 1) * cs.w];
                                    let g = &gp[oh * cs.w_out..(oh + 1) * cs.w_out];
                                    for ow in ow_lo..ow_hi {
                                        s += g[ow] * src[ow * sw + j - pw];
                                    }
                                }
                                acc[c * taps + i * cs.kw + j] += s;
                            }
                        }
                    }
                }
                acc
            })
            .collect();
        ordered_sum(partials, gw);
    }
    if let Some(gb) = gb {
        bias_grad(gout, cs.c_in, plane_out, gb);
    }
}

/// Dimensions of a batched matrix product `c[b] = op(a[b]) * op(b[b])`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BmmShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `a` is stored as `[k, m]`.
    pub trans_a: bool,
    /// `b` is stored as `[n, k]`.
    pub trans_b: bool,
}

impl BmmShape {
    fn a_strides(&self) -> (usize, usize) {
        if self.trans_a {
            (1, self.m)
        } else {
            (self.k, 1)
        }
    }

    fn b_strides(&self) -> (usize, usize) {
        if self.trans_b {
            (1, self.k)
        } else {
            (self.n, 1)
        }
    }
}

pub fn bmm_forward<S: Scalar>(bs: &BmmShape, a: &[S], b: &[S], out: &mut [S]) {
    let (sa, sb, sc) = (bs.m * bs.k, bs.k * bs.n, bs.m * bs.n);
    for i in 0..bs.batch {
        S::gemm(
            bs.m,
            bs.k,
            bs.n,
            S::one(),
            &a[i * sa..(i + 1) * sa],
            bs.a_strides(),
            &b[i * sb..(i + 1) * sb],
            bs.b_strides(),
            S::zero(),
            &mut out[i * sc..(i + 1) * sc],
            (bs.n, 1),
        );
    }
}

pub fn bmm_backward<S: Scalar>(
    bs: &BmmShape,
    a: &[S],
    b: &[S],
    gout: &[S],
    ga: Option<&mut [S]>,
    gb: Option<&mut [S]>,
) {
    let (sa, sb, sc) = (bs.m * bs.k, bs.k * bs.n, bs.m * bs.n);
    if let Some(ga) = ga {
        let (rs, cs) = bs.b_strides();
        for i in 0..bs.batch {
            // dA = dC * B^T
            S::gemm(
                bs.m,
                bs.n,
                bs.k,
                S::one(),
                &gout[i * sc..(i + 1) * sc],
                (bs.n, 1),
                &b[i * sb..(i + 1) * sb],
                (cs, rs),
                S::one(),
                &mut ga[i * sa..(i + 1) * sa],
                bs.a_strides(),
            );
        }
    }
    if let Some(gb) = gb {
        let (rs, cs) = bs.a_strides();
        for i in 0..bs.batch {
            // dB = A^T * dC
            S::gemm(
                bs.k,
                bs.m,
                bs.n,
                S::one(),
                &a[i * sa..(i + 1) * sa],
                (cs, rs),
                &gout[i * sc..(i + 1) * sc],
                (bs.n, 1),
                S::one(),
                &mut gb[i * sb..(i + 1) * sb],
                bs.b_strides(),
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for out in 1..6 {
            for inp in 1..9 {
                for tap in 0..5 {
                    for stride in 1..4 {
                        for pad in 0..4 {
                            let (lo, hi) = ConvShape::valid(out, inp, tap, stride, pad);
                            for o in 0..out {
                                let ii = (o * stride + tap) as isize - pad as isize;
                                let ok = ii >= 0 && (ii as usize) < inp;
                                assert_eq!(ok, o >= lo && o < hi, "o={o} inp={inp} tap={tap} s={stride} p={pad}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn out_len_formula() {
        assert_eq!(conv_out_len(8, 3, 2, 1), Some(4));
        assert_eq!(conv_out_len(32, 3, 2, 1), Some(16));
        assert_eq!(conv_out_len(160, 3, 2, 1), Some(80));
        assert_eq!(conv_out_len(2, 5, 1, 1), None);
    }
}
