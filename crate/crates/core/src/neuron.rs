// SPDX-License-Identifier: Apache-2.0

//! Leaky integrate-and-fire neurons with hard reset.
//!
//! One step of a layer:
//!
//! ```text
//! u[n]  = beta * V[n-1] + I[n]
//! s[n]  = H(u[n] - v_th)
//! V[n]  = u[n] * (1 - s[n])
//! ```
//!
//! The fused kernel here runs a whole time-major sequence. Backpropagation
//! through time keeps every path, including the reset branch, which uses the
//! surrogate derivative of the spike.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::surrogate::{heaviside, SpikeMode, SurrogateSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetMode {
    #[default]
    HardToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    pub beta: f32,
    pub v_th: f32,
    #[serde(default)]
    pub reset_mode: ResetMode,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            v_th: 1.0,
            reset_mode: ResetMode::HardToZero,
        }
    }
}

impl LifParams {
    pub fn new(beta: f32, v_th: f32) -> Result<Self> {
        let p = Self {
            beta,
            v_th,
            reset_mode: ResetMode::HardToZero,
        };
        p.validate()?;
        Ok(p)
    }

    /// `0 < beta <= 1` and `v_th > 0`. An infinite threshold is allowed and
    /// silences the layer.
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("leak factor must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.v_th > 0.0) {
            return Err(Error::Config(format!("threshold must be positive, got {}", self.v_th)));
        }
        Ok(())
    }
}

/// Membrane potentials of one layer between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState<S = f32> {
    v: Option<Tensor<S>>,
}

impl<S: Scalar> Default for LifState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> LifState<S> {
    /// Uninitialized state; the first step treats it as all zeros.
    pub fn new() -> Self {
        Self { v: None }
    }

    pub fn from_potential(v: Tensor<S>) -> Self {
        Self { v: Some(v) }
    }

    pub fn potential(&self) -> Option<&Tensor<S>> {
        self.v.as_ref()
    }
}

/// Advances a layer by one step on plain tensors.
pub fn lif_step<S: Scalar>(state: &LifState<S>, input: &Tensor<S>, p: &LifParams) -> Result<(Tensor<S>, LifState<S>)> {
    let beta = S::of(p.beta as f64);
    let v_th = S::of(p.v_th as f64);
    if let Some(v) = &state.v {
        if v.shape() != input.shape() {
            return Err(Error::Contract(format!(
                "lif_step: input {:?} does not match state {:?}",
                input.shape(),
                v.shape()
            )));
        }
    }
    let mut spikes = Vec::with_capacity(input.numel());
    let mut next = Vec::with_capacity(input.numel());
    for (i, &x) in input.data().iter().enumerate() {
        let v = state.v.as_ref().map_or(S::zero(), |t| t.data()[i]);
        let u = beta * v + x;
        let s = heaviside(u - v_th);
        spikes.push(s);
        next.push(u * (S::one() - s));
    }
    Ok((
        Tensor::new(input.shape(), spikes)?,
        LifState::from_potential(Tensor::new(input.shape(), next)?),
    ))
}

/// One step recorded on a tape from primitive operations.
///
/// Returns `(spikes, new_potential)`. Gradients flow through the spike via
/// the surrogate and through the reset term.
pub fn lif_step_var<S: Scalar>(
    tape: &mut Tape<S>,
    v: Option<Var>,
    input: Var,
    p: &LifParams,
    spec: SurrogateSpec,
) -> Result<(Var, Var)> {
    let u = match v {
        Some(v) => {
            if tape.shape(v) != tape.shape(input) {
                return Err(Error::Contract(format!(
                    "lif_step: input {:?} does not match state {:?}",
                    tape.shape(input),
                    tape.shape(v)
                )));
            }
            let leaked = tape.scale(v, S::of(p.beta as f64))?;
            tape.add(leaked, input)?
        }
        None => input,
    };
    let centred = tape.add_scalar(u, S::of(-(p.v_th as f64)))?;
    let spikes = tape.heaviside(centred, spec)?;
    let reset = tape.mul(u, spikes)?;
    let next = tape.sub(u, reset)?;
    Ok((spikes, next))
}

/// Runs a fresh layer over `[T, ...]` on a tape. Output is binary in
/// [`SpikeMode::Heaviside`].
pub fn lif_forward<S: Scalar>(
    tape: &mut Tape<S>,
    seq: Var,
    p: &LifParams,
    spec: SurrogateSpec,
    mode: SpikeMode,
) -> Result<Var> {
    let steps = tape.shape(seq).first().copied().unwrap_or(0);
    if steps == 0 || tape.shape(seq).len() < 2 {
        return Err(Error::Contract(format!(
            "lif_forward needs a leading time axis, got {:?}",
            tape.shape(seq)
        )));
    }
    tape.lif(
        seq,
        steps,
        S::of(p.beta as f64),
        S::of(p.v_th as f64),
        spec,
        mode,
    )
}

/// Plain-tensor variant of [`lif_forward`].
pub fn lif_forward_tensor<S: Scalar>(seq: &Tensor<S>, p: &LifParams) -> Result<Tensor<S>> {
    let steps = seq.shape().first().copied().unwrap_or(0);
    if steps == 0 || seq.rank() < 2 {
        return Err(Error::Contract(format!(
            "lif_forward needs a leading time axis, got {:?}",
            seq.shape()
        )));
    }
    let run = lif_kernel_forward(
        seq.data(),
        steps,
        S::of(p.beta as f64),
        S::of(p.v_th as f64),
        SurrogateSpec::default(),
        SpikeMode::Heaviside,
        false,
    );
    Tensor::new(seq.shape(), run.spikes)
}

pub(crate) struct LifRun<S> {
    pub spikes: Vec<S>,
    /// Pre-reset potentials `u`, kept only when requested.
    pub membrane: Vec<S>,
}

pub(crate) fn lif_kernel_forward<S: Scalar>(
    x: &[S],
    steps: usize,
    beta: S,
    v_th: S,
    spec: SurrogateSpec,
    mode: SpikeMode,
    keep_membrane: bool,
) -> LifRun<S> {
    let width = x.len() / steps;
    let mut v = vec![S::zero(); width];
    let mut spikes = vec![S::zero(); x.len()];
    let mut membrane = if keep_membrane { vec![S::zero(); x.len()] } else { Vec::new() };
    for t in 0..steps {
        let r = t * width..(t + 1) * width;
        let xs = &x[r.clone()];
        let out = &mut spikes[r.clone()];
        for i in 0..width {
            let u = beta * v[i] + xs[i];
            let s = match mode {
                SpikeMode::Heaviside => heaviside(u - v_th),
                SpikeMode::Smooth => spec.primitive(u - v_th),
            };
            out[i] = s;
            v[i] = u * (S::one() - s);
            if keep_membrane {
                membrane[t * width + i] = u;
            }
        }
    }
    LifRun { spikes, membrane }
}

pub(crate) fn lif_kernel_backward<S: Scalar>(
    u: &[S],
    g_spikes: &[S],
    steps: usize,
    beta: S,
    v_th: S,
    spec: SurrogateSpec,
    mode: SpikeMode,
) -> Vec<S> {
    let width = u.len() / steps;
    let mut gx = vec![S::zero(); u.len()];
    // gradient reaching V[t] from u[t+1]
    let mut g_v = vec![S::zero(); width];
    for t in (0..steps).rev() {
        let base = t * width;
        for i in 0..width {
            let ut = u[base + i];
            let d = ut - v_th;
            let sg = spec.derivative(d);
            let s = match mode {
                SpikeMode::Heaviside => heaviside(d),
                SpikeMode::Smooth => spec.primitive(d),
            };
            let g_u = g_spikes[base + i] * sg + g_v[i] * ((S::one() - s) - ut * sg);
            gx[base + i] = g_u;
            g_v[i] = beta * g_u;
        }
    }
    gx
}

/// Spike counts accumulated over elements and timesteps.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FiringStats {
    pub spikes_emitted: u64,
    pub opportunities: u64,
}

impl FiringStats {
    pub fn rate(&self) -> f64 {
        if self.opportunities == 0 {
            0.0
        } else {
            self.spikes_emitted as f64 / self.opportunities as f64
        }
    }

    pub fn merge(&mut self, other: FiringStats) {
        self.spikes_emitted += other.spikes_emitted;
        self.opportunities += other.opportunities;
    }

    /// Counts without the binarity check; callers guarantee spike input.
    pub(crate) fn count<S: Scalar>(spikes: &[S]) -> Self {
        Self {
            spikes_emitted: spikes.iter().filter(|&&v| v != S::zero()).count() as u64,
            opportunities: spikes.len() as u64,
        }
    }
}

/// Mean firing rate of a binary spike tensor over all elements and steps.
pub fn measure_firing_rate<S: Scalar>(spikes: &Tensor<S>) -> Result<FiringStats> {
    if let Some(bad) = spikes.data().iter().find(|&&v| v != S::zero() && v != S::one()) {
        return Err(Error::Contract(format!("firing rate needs binary spikes, found {bad}")));
    }
    Ok(FiringStats::count(spikes.data()))
}
