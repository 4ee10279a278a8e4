// SPDX-License-Identifier: Apache-2.0

//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkt_core::{ParamStore, Scalar, Tensor};

/// Direct nested-loop cross-correlation on `[N, C, H, W]`.
#[allow(clippy::too_many_arguments)]
pub fn ref_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: (usize, usize),
    pad: (usize, usize),
    depthwise: bool,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = xs;
    let [co, cig, kh, kw] = ws;
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for g in 0..cig {
                        let ci = if depthwise { o } else { g };
                        for p in 0..kh {
                            for q in 0..kw {
                                let ih = (i * stride.0 + p) as isize - pad.0 as isize;
                                let iw = (j * stride.1 + q) as isize - pad.1 as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x[((b * c + ci) * h + ih as usize) * wd + iw as usize];
                                acc += xv * w[((o * cig + g) * kh + p) * kw + q];
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    (out, [n, co, ho, wo])
}

/// LIF over `steps` leading blocks: charge, fire at `v >= v_th`, hard reset.
pub fn ref_lif(seq: &[f64], steps: usize, beta: f64, v_th: f64) -> Vec<f64> {
    let width = seq.len() / steps;
    let mut v = vec![0.0; width];
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..steps {
        for i in 0..width {
            let u = beta * v[i] + seq[t * width + i];
            let s = if u >= v_th { 1.0 } else { 0.0 };
            v[i] = if s > 0.0 { 0.0 } else { u };
            out.push(s);
        }
    }
    out
}

/// `a [m x k]` times `b [k x n]`, row-major.
pub fn ref_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn binary(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    (0..n).map(|_| if rng.random_bool(p) { 1.0 } else { 0.0 }).collect()
}

pub fn tensor<S: Scalar>(shape: &[usize], v: &[f64]) -> Tensor<S> {
    Tensor::from_f64(shape, v).unwrap()
}

pub fn as_f64<S: Scalar>(t: &Tensor<S>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

pub fn set_param<S: Scalar>(store: &mut ParamStore<S>, name: &str, values: &[f64]) {
    let id = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = store.value_mut(id);
    assert_eq!(t.numel(), values.len(), "{name}");
    for (d, &v) in t.data_mut().iter_mut().zip(values) {
        *d = S::of(v);
    }
}

pub fn param<S: Scalar>(store: &ParamStore<S>, name: &str) -> Vec<f64> {
    as_f64(store.value(store.find(name).unwrap_or_else(|| panic!("no parameter {name}"))))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Single-precision scalar recurrence, one neuron at a time.
pub fn ref_lif_f32(inputs: &[f32], beta: f32, v_th: f32) -> Vec<f32> {
    let mut v = 0.0f32;
    inputs
        .iter()
        .map(|&i| {
            let u = beta * v + i;
            if u >= v_th {
                v = 0.0;
                1.0
            } else {
                v = u;
                0.0
            }
        })
        .collect()
}

pub struct GradSample {
    pub name: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    pub fn rel_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(1e-6);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Two stages with blocks: one convolutional and one transformer stage.
pub fn two_stage_config() -> spkt_core::ModelConfig {
    spkt_core::ModelConfig {
        conv_blocks: [1, 0],
        transformer_blocks: [1, 0],
        ..spkt_core::ModelConfig::minimal(3)
    }
}

/// Central-difference check of `n` random learnable scalars of a smooth,
/// double-precision copy of the two-stage model. Normalization uses running
/// statistics; batch statistics over tiny late-stage maps make the loss so
/// curved that h = 1e-3 truncation error alone exceeds 1e-3.
pub fn gradient_check(n: usize, h: f64, seed: u64) -> Vec<GradSample> {
    gradient_check_with(n, h, seed, 3, false)
}

pub fn gradient_check_with(n: usize, h: f64, seed: u64, batch: usize, batch_stats: bool) -> Vec<GradSample> {
    use spkt_core::train::batch_gradients;
    use spkt_core::{Model, RunMode, SpikeMode};

    let cfg = two_stage_config();
    let mut model: Model<f64> = Model::<f32>::build(&cfg).unwrap().cast();
    let mut r = rng(seed);
    let x: Vec<f64> = uniform(&mut r, batch * cfg.in_channels * cfg.window_samples, -2.0, 2.0);
    let x = tensor::<f64>(&[batch, cfg.in_channels, cfg.window_samples], &x);
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    let weights = [1.0f32, 1.0, 1.0];
    let smooth = RunMode {
        batch_stats,
        grad: true,
        spikes: SpikeMode::Smooth,
    };
    let forward_only = RunMode { grad: false, ..smooth };
    let (_, grads, _) = batch_gradients(&model, x.clone(), &labels, &weights, smooth).unwrap();

    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let (id, g) = &grads[r.random_range(0..grads.len())];
        let k = r.random_range(0..g.numel());
        let name = model.store.get(*id).name.clone();
        let orig = model.store.value(*id).data()[k];
        let mut loss_at = |v: f64| {
            model.store.value_mut(*id).data_mut()[k] = v;
            batch_gradients(&model, x.clone(), &labels, &weights, forward_only).unwrap().0
        };
        let numeric = (loss_at(orig + h) - loss_at(orig - h)) / (2.0 * h);
        model.store.value_mut(*id).data_mut()[k] = orig;
        samples.push(GradSample {
            name: format!("{name}[{k}]"),
            analytic: g.data()[k],
            numeric,
        });
    }
    samples
}

/// Scalar Adam on f(w) = sum(w^2), written out term by term.
pub fn ref_adam_trajectory(w0: &[f64], lr: f64, steps: usize) -> Vec<Vec<f64>> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
    let mut w = w0.to_vec();
    let mut m = vec![0.0; w.len()];
    let mut v = vec![0.0; w.len()];
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        for i in 0..w.len() {
            let g = 2.0 * w[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / (1.0 - b1.powi(t as i32));
            let v_hat = v[i] / (1.0 - b2.powi(t as i32));
            w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        out.push(w.clone());
    }
    out
}

/// Runs the library optimizer on f(w) = sum(w^2) for `steps` steps.
pub fn adam_trajectory(w0: &[f64], lr: f64, steps: usize) -> Vec<Vec<f64>> {
    use spkt_core::params::ParamKind;
    use spkt_core::train::{Adam, AdamConfig};
    let mut store = ParamStore::<f64>::new();
    let id = store.insert("w", tensor(&[w0.len()], w0), ParamKind::Learnable);
    let mut adam = Adam::new(AdamConfig { lr, ..AdamConfig::default() });
    (0..steps)
        .map(|_| {
            let g = store.value(id).map(|w| 2.0 * w);
            adam.step(&mut store, &[(id, g)]).unwrap();
            as_f64(store.value(id))
        })
        .collect()
}

/// Scripted validation losses and the learning rates a hand simulation
/// gives for patience 2, factor 0.5, min_delta 0.01, floor 0.1, start 1.0.
pub const PLATEAU_SCRIPT: [(f64, f64); 19] = [
    (1.0, 1.0),
    (0.995, 1.0),
    (0.98, 1.0),
    (0.98, 1.0),
    (0.98, 1.0),
    (0.98, 0.5),
    (0.5, 0.5),
    (0.6, 0.5),
    (0.6, 0.5),
    (0.6, 0.25),
    (0.6, 0.25),
    (0.6, 0.25),
    (0.6, 0.125),
    (0.6, 0.125),
    (0.6, 0.125),
    (0.6, 0.1),
    (0.6, 0.1),
    (0.6, 0.1),
    (0.6, 0.1),
];

pub fn plateau_lrs() -> Vec<f64> {
    use spkt_core::train::{PlateauConfig, PlateauScheduler};
    let cfg = PlateauConfig {
        factor: 0.5,
        patience: 2,
        min_delta: 0.01,
        min_lr: 0.1,
    };
    let mut s = PlateauScheduler::new(cfg, 1.0);
    PLATEAU_SCRIPT.iter().map(|&(loss, _)| s.step(loss)).collect()
}

/// Random affine and running statistics for every normalization.
pub fn randomize_norms(store: &mut ParamStore<f32>, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<_> = store.iter().map(|(_, e)| e.name.clone()).collect();
    for name in names {
        let n = store.value(store.find(&name).unwrap()).numel();
        let vals = if name.ends_with("running_var") {
            uniform(&mut r, n, 0.3, 2.0)
        } else if name.contains(".bn.") {
            uniform(&mut r, n, -0.8, 1.2)
        } else {
            continue;
        };
        set_param(store, &name, &vals);
    }
}
