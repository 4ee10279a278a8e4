// SPDX-License-Identifier: Apache-2.0

//! Run configuration: dataset-derived defaults, a JSON file merged on top,
//! then command-line flags.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use spkt_core::data::Dataset;
use spkt_core::{Error, ModelConfig, Result, SplitSpec, TrainConfig};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub samples: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitSpec,
    pub window: WindowSpec,
    pub normalize: bool,
}

impl RunConfig {
    pub fn defaults(ds: &Dataset) -> Self {
        let window = ds.default_window();
        Self {
            model: ModelConfig::desk(ds.manifest.channels, window, ds.n_subjects()),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            window: WindowSpec {
                samples: window,
                stride: window,
            },
            normalize: true,
        }
    }

    /// Defaults for `ds` with the JSON object in `file` merged over them.
    pub fn resolve(ds: &Dataset, file: Option<&Path>) -> Result<Self> {
        let base = Self::defaults(ds);
        let Some(path) = file else { return Ok(base) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text)?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        let mut merged = serde_json::to_value(&base)?;
        merge(&mut merged, patch);
        serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.model.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.window.samples == 0 || self.window.stride == 0 {
            return Err(Error::Config("window samples and stride must be positive".into()));
        }
        if self.model.window_samples != self.window.samples {
            return Err(Error::Config(format!(
                "model expects {}-sample windows but the window spec cuts {}",
                self.model.window_samples, self.window.samples
            )));
        }
        if self.model.in_channels != ds.manifest.channels {
            return Err(Error::Config(format!(
                "model expects {} channels, dataset has {}",
                self.model.in_channels, ds.manifest.channels
            )));
        }
        if self.model.n_classes != ds.n_subjects() {
            return Err(Error::Config(format!(
                "model has {} classes, dataset has {} subjects",
                self.model.n_classes,
                ds.n_subjects()
            )));
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(CONFIG_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }
}

/// Recursive object merge; anything that is not an object replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_is_deep() {
        let mut a = json!({"train": {"epochs": 50, "adam": {"lr": 0.001}}, "normalize": true});
        merge(&mut a, json!({"train": {"adam": {"lr": 0.01}}, "normalize": false}));
        assert_eq!(a, json!({"train": {"epochs": 50, "adam": {"lr": 0.01}}, "normalize": false}));
    }
}
