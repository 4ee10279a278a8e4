// SPDX-License-Identifier: Apache-2.0

//! Surrogate derivatives for the Heaviside spike nonlinearity.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateFamily {
    Arctan,
    Sigmoid,
}

/// Smooth stand-in used for the backward pass of a spike.
///
/// `alpha` controls the width: larger values give a sharper, taller bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSpec {
    pub family: SurrogateFamily,
    pub alpha: f32,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self {
            family: SurrogateFamily::Arctan,
            alpha: 2.0,
        }
    }
}

impl SurrogateSpec {
    pub fn new(family: SurrogateFamily, alpha: f32) -> Result<Self> {
        let spec = Self { family, alpha };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "surrogate width must be positive and finite, got {}",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Smooth primitive `g(x)` whose derivative is the surrogate gradient.
    pub fn primitive<S: Scalar>(&self, x: S) -> S {
        let a = self.alpha as f64;
        let x = x.as_f64();
        let y = match self.family {
            SurrogateFamily::Arctan => (PI * a * x / 2.0).atan() / PI + 0.5,
            SurrogateFamily::Sigmoid => 1.0 / (1.0 + (-a * x).exp()),
        };
        S::of(y)
    }

    /// Surrogate gradient `g'(x)`.
    pub fn derivative<S: Scalar>(&self, x: S) -> S {
        let a = self.alpha as f64;
        let x = x.as_f64();
        let d = match self.family {
            SurrogateFamily::Arctan => {
                let z = PI * a * x / 2.0;
                (a / 2.0) / (1.0 + z * z)
            }
            SurrogateFamily::Sigmoid => {
                let s = 1.0 / (1.0 + (-a * x).exp());
                a * s * (1.0 - s)
            }
        };
        S::of(d)
    }
}

/// Whether spike sites emit hard spikes or the smooth primitive.
///
/// `Smooth` exists for gradient verification: with it every spike site is
/// differentiable and backward agrees with finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    #[default]
    Heaviside,
    Smooth,
}

/// `1` where `x >= 0`, else `0`. Exact threshold equality spikes.
#[inline]
pub fn heaviside<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one()
    } else {
        S::zero()
    }
}
