// SPDX-License-Identifier: Apache-2.0

//! Spiking transformer engine for EEG person identification.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod energy;
pub mod error;
pub mod kernels;
pub mod model;
pub mod neuron;
pub mod params;
pub mod scalar;
pub mod session;
pub mod surrogate;
pub mod tensor;
pub mod train;

pub use autodiff::{OpKind, Tape, Var};
pub use error::{Error, Result};
pub use neuron::{FiringStats, LifParams, LifState};
pub use scalar::Scalar;
pub use surrogate::{SpikeMode, SurrogateFamily, SurrogateSpec};
pub use tensor::Tensor;
pub use energy::{EnergyConstants, EnergyReport};
pub use model::{Model, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use session::{RunMode, Session};
pub use data::{Dataset, SplitSpec, SynthSpec, TrialRecord, WindowSet};
pub use train::{Classifier, Evaluation, TrainConfig, TrainReport};
