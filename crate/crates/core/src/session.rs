// SPDX-License-Identifier: Apache-2.0

//! Per-forward execution state: tape, parameter bindings, spike probes.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{BatchMoments, NormStats, Tape, Var};
use crate::error::Result;
use crate::neuron::{FiringStats, LifParams};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::surrogate::{SpikeMode, SurrogateSpec};
use crate::tensor::Tensor;

/// How a forward pass treats normalization and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    /// Normalize with batch statistics and report them for running updates.
    pub batch_stats: bool,
    /// Record backward information for learnable parameters.
    pub grad: bool,
    pub spikes: SpikeMode,
}

impl RunMode {
    pub const TRAIN: Self = Self {
        batch_stats: true,
        grad: true,
        spikes: SpikeMode::Heaviside,
    };
    pub const EVAL: Self = Self {
        batch_stats: false,
        grad: false,
        spikes: SpikeMode::Heaviside,
    };
}

/// Running-statistics update produced by one training-mode normalization.
#[derive(Debug, Clone)]
pub struct NormUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub moments: BatchMoments,
}

/// State of one forward pass over one model.
pub struct Session<'m, S: Scalar = f32> {
    pub tape: Tape<S>,
    store: &'m ParamStore<S>,
    bound: Vec<Option<Var>>,
    pub mode: RunMode,
    pub t_sim: usize,
    pub lif: LifParams,
    pub surrogate: SurrogateSpec,
    threshold_overrides: HashMap<String, f32>,
    probes: BTreeMap<String, FiringStats>,
    sites: Vec<(String, Var)>,
    norm_updates: Vec<NormUpdate>,
}

impl<'m, S: Scalar> Session<'m, S> {
    pub fn new(store: &'m ParamStore<S>, mode: RunMode, t_sim: usize, lif: LifParams, surrogate: SurrogateSpec) -> Self {
        let tape = if mode.grad { Tape::new() } else { Tape::inference() };
        Self {
            tape,
            store,
            bound: vec![None; store.capacity()],
            mode,
            t_sim,
            lif,
            surrogate,
            threshold_overrides: HashMap::new(),
            probes: BTreeMap::new(),
            sites: Vec::new(),
            norm_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'m ParamStore<S> {
        self.store
    }

    /// Replaces the firing threshold of a single spike site.
    pub fn override_threshold(&mut self, site: impl Into<String>, v_th: f32) {
        self.threshold_overrides.insert(site.into(), v_th);
    }

    /// Tape variable bound to a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.store.get(id);
        let learn = entry.kind == ParamKind::Learnable && self.mode.grad;
        let v = self.tape.leaf(entry.value.clone(), learn);
        self.bound[id.0] = Some(v);
        v
    }

    /// Variables bound so far, for gradient harvesting.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn grad(&self, id: ParamId) -> Option<Tensor<S>> {
        self.bound.get(id.0).copied().flatten().and_then(|v| self.tape.grad(v))
    }

    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.tape.leaf(value, false)
    }

    /// LIF layer over the session's time axis, recorded as spike site `name`.
    pub fn spike(&mut self, name: &str, x: Var) -> Result<Var> {
        let v_th = self.threshold_overrides.get(name).copied().unwrap_or(self.lif.v_th);
        let out = self.tape.lif(
            x,
            self.t_sim,
            S::of(self.lif.beta as f64),
            S::of(v_th as f64),
            self.surrogate,
            self.mode.spikes,
        )?;
        if self.mode.spikes == SpikeMode::Heaviside {
            let stats = FiringStats::count(self.tape.value(out).data());
            self.probes.entry(name.to_string()).or_default().merge(stats);
        }
        self.sites.push((name.to_string(), out));
        Ok(out)
    }

    pub fn norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId, eps: f64) -> Result<Var> {
        let (g, b) = (self.param(gamma), self.param(beta));
        if self.mode.batch_stats {
            let (out, moments) = self.tape.batch_norm(x, g, b, NormStats::Batch { eps })?;
            if let Some(moments) = moments {
                self.norm_updates.push(NormUpdate { mean, var, moments });
            }
            Ok(out)
        } else {
            let store = self.store;
            let stats = NormStats::Frozen {
                mean: store.value(mean).data(),
                var: store.value(var).data(),
                eps,
            };
            Ok(self.tape.batch_norm(x, g, b, stats)?.0)
        }
    }

    /// Spike outputs recorded so far, by site.
    pub fn sites(&self) -> &[(String, Var)] {
        &self.sites
    }

    /// Firing statistics per site, accumulated over this session.
    pub fn firing(&self) -> &BTreeMap<String, FiringStats> {
        &self.probes
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.norm_updates)
    }
}
