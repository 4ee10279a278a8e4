// SPDX-License-Identifier: Apache-2.0

//! Operation counts and energy estimates for spiking inference.
//!
//! Layers fed by the analog input multiply and accumulate; layers fed by
//! spikes only accumulate, and only when an input spike arrives. The report
//! costs convolutions, linear layers and attention products. Normalization,
//! pooling and membrane updates are not costed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::neuron::FiringStats;

/// Shape information needed to count dense operations of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerGeometry {
    Conv {
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        h_out: usize,
        w_out: usize,
    },
    Depthwise {
        kh: usize,
        kw: usize,
        channels: usize,
        h_out: usize,
        w_out: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
        tokens: usize,
    },
    /// One of the two chained binary matrix products of spike attention.
    Attention {
        tokens: usize,
        channels: usize,
        heads: usize,
    },
}

/// Dense multiply-accumulate count of one forward at a single timestep.
pub fn count_layer_flops(g: &LayerGeometry) -> Result<u64> {
    let dims: Vec<usize> = match *g {
        LayerGeometry::Conv { kh, kw, c_in, c_out, h_out, w_out } => vec![kh, kw, c_in, c_out, h_out, w_out],
        LayerGeometry::Depthwise { kh, kw, channels, h_out, w_out } => vec![kh, kw, channels, h_out, w_out],
        LayerGeometry::Linear { c_in, c_out, tokens } => vec![c_in, c_out, tokens],
        LayerGeometry::Attention { tokens, channels, heads } => {
            if heads == 0 || channels % heads != 0 {
                return Err(Error::Contract(format!(
                    "attention geometry splits {channels} channels into {heads} heads"
                )));
            }
            let d = channels / heads;
            vec![tokens, d, d, heads]
        }
    };
    if dims.contains(&0) {
        return Err(Error::Contract(format!("layer geometry has an unspecified dimension: {g:?}")));
    }
    Ok(dims.iter().map(|&d| d as u64).product())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// Multiply-accumulate on analog input.
    Mac,
    /// Accumulate-only on spike input.
    Ac,
}

/// A costed layer of a model and the spike site that feeds it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostedLayer {
    pub name: String,
    pub geometry: LayerGeometry,
    pub domain: Domain,
    /// `None` for analog-input layers.
    pub rate_site: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCostProfile {
    pub name: String,
    pub flops: u64,
    pub domain: Domain,
    /// Input firing rate; analog layers carry 1.
    pub rate: f64,
}

/// Energy per operation in picojoules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
}

impl Default for EnergyConstants {
    /// 32-bit floating point operations in a 45nm process.
    fn default() -> Self {
        Self {
            e_mac_pj: 4.6,
            e_ac_pj: 0.9,
        }
    }
}

impl EnergyConstants {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("e_mac_pj", self.e_mac_pj), ("e_ac_pj", self.e_ac_pj)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEnergy {
    pub name: String,
    pub flops: u64,
    pub domain: Domain,
    pub rate: f64,
    pub energy_uj: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyTotals {
    pub e_mac_uj: f64,
    pub e_ac_uj: f64,
    pub total_uj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub constants: EnergyConstants,
    pub t_sim: usize,
    pub layers: Vec<LayerEnergy>,
    pub totals: EnergyTotals,
    /// Opportunity-weighted mean over every spike site of the model.
    pub model_firing_rate: Option<f64>,
    /// Energy relative to the dense non-spiking equivalent.
    pub dense_ratio: Option<f64>,
}

const PJ_TO_UJ: f64 = 1e-6;

/// Energy of one layer in picojoules.
pub fn layer_energy_pj(p: &LayerCostProfile, t_sim: usize, c: &EnergyConstants) -> f64 {
    let flops = p.flops as f64;
    match p.domain {
        Domain::Mac => c.e_mac_pj * flops * t_sim as f64,
        Domain::Ac => c.e_ac_pj * t_sim as f64 * p.rate * flops,
    }
}

pub fn energy(profiles: &[LayerCostProfile], t_sim: usize, constants: EnergyConstants) -> Result<EnergyReport> {
    constants.validate()?;
    if t_sim == 0 {
        return Err(Error::Contract("t_sim must be at least 1".into()));
    }
    let mut layers = Vec::with_capacity(profiles.len());
    let mut totals = EnergyTotals::default();
    for p in profiles {
        if !(0.0..=1.0).contains(&p.rate) {
            return Err(Error::Contract(format!("layer {} has firing rate {} outside [0, 1]", p.name, p.rate)));
        }
        let energy_uj = layer_energy_pj(p, t_sim, &constants) * PJ_TO_UJ;
        match p.domain {
            Domain::Mac => totals.e_mac_uj += energy_uj,
            Domain::Ac => totals.e_ac_uj += energy_uj,
        }
        totals.total_uj += energy_uj;
        layers.push(LayerEnergy {
            name: p.name.clone(),
            flops: p.flops,
            domain: p.domain,
            rate: p.rate,
            energy_uj,
        });
    }
    Ok(EnergyReport {
        constants,
        t_sim,
        layers,
        totals,
        model_firing_rate: None,
        dense_ratio: None,
    })
}

/// The same layers run once as a conventional network: all MAC, rate 1.
pub fn dense_equivalent(profiles: &[LayerCostProfile], constants: EnergyConstants) -> Result<EnergyReport> {
    let dense: Vec<_> = profiles
        .iter()
        .map(|p| LayerCostProfile {
            name: p.name.clone(),
            flops: p.flops,
            domain: Domain::Mac,
            rate: 1.0,
        })
        .collect();
    energy(&dense, 1, constants)
}

/// SNN energy divided by dense energy over identical geometry.
pub fn compare_report(snn: &EnergyReport, dense: &EnergyReport) -> Result<f64> {
    let same = snn.layers.len() == dense.layers.len()
        && snn
            .layers
            .iter()
            .zip(&dense.layers)
            .all(|(a, b)| a.name == b.name && a.flops == b.flops);
    if !same {
        return Err(Error::Contract("reports cover different layer geometry".into()));
    }
    if dense.totals.total_uj <= 0.0 {
        return Err(Error::Contract("dense reference energy is zero".into()));
    }
    Ok(snn.totals.total_uj / dense.totals.total_uj)
}

/// Attaches measured rates to costed layers. Analog layers get rate 1.
pub fn profiles_from_rates(layers: &[CostedLayer], rates: &BTreeMap<String, FiringStats>) -> Result<Vec<LayerCostProfile>> {
    layers
        .iter()
        .map(|l| {
            let rate = match (&l.domain, &l.rate_site) {
                (Domain::Mac, _) => 1.0,
                (Domain::Ac, Some(site)) => rates
                    .get(site)
                    .ok_or_else(|| Error::Contract(format!("no firing probe for site {site} feeding {}", l.name)))?
                    .rate(),
                (Domain::Ac, None) => {
                    return Err(Error::Contract(format!("spike-fed layer {} names no rate site", l.name)))
                }
            };
            Ok(LayerCostProfile {
                name: l.name.clone(),
                flops: count_layer_flops(&l.geometry)?,
                domain: l.domain,
                rate,
            })
        })
        .collect()
}

/// Firing statistics of every spike site over `windows`, in batches.
pub fn measure_model_rates(
    model: &Model<f32>,
    windows: &WindowSet,
    batch_size: usize,
) -> Result<BTreeMap<String, FiringStats>> {
    if windows.is_empty() {
        return Err(Error::Contract("rate probe needs at least one window".into()));
    }
    let mut rates = BTreeMap::<String, FiringStats>::new();
    let idx: Vec<usize> = (0..windows.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = windows.batch(chunk)?;
        let (_, stats) = model.predict(&x)?;
        for (site, s) in stats {
            rates.entry(site).or_default().merge(s);
        }
    }
    Ok(rates)
}

/// Full report for a model: measured rates, per-layer energy and the ratio
/// against the dense equivalent.
pub fn model_energy_report(
    model: &Model<f32>,
    probe: &WindowSet,
    constants: EnergyConstants,
    batch_size: usize,
) -> Result<EnergyReport> {
    let rates = measure_model_rates(model, probe, batch_size)?;
    let profiles = profiles_from_rates(&model.cost_layers(), &rates)?;
    let mut report = energy(&profiles, model.cfg.t_sim, constants)?;
    let dense = dense_equivalent(&profiles, constants)?;
    let mut all = FiringStats::default();
    rates.values().for_each(|s| all.merge(*s));
    report.model_firing_rate = Some(all.rate());
    report.dense_ratio = Some(compare_report(&report, &dense)?);
    Ok(report)
}
