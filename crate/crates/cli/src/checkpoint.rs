//! JSON checkpoints: every parameter as a named f64 array with its shape,
//! plus the run configuration that produced it.

use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sliceocc::numerics::{ParamStore, Tensor};

use crate::config::RunConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub run_config: RunConfig,
    pub step: usize,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn from_store(run_config: &RunConfig, step: usize, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| NamedArray {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Self {
            run_config: run_config.clone(),
            step,
            params,
        }
    }

    /// Copies saved values into a store built from the same configuration.
    /// Names and shapes must match one to one.
    pub fn restore(&self, store: &mut ParamStore) -> anyhow::Result<()> {
        if self.params.len() != store.len() {
            bail!("checkpoint has {} parameters, model has {}", self.params.len(), store.len());
        }
        for p in &self.params {
            let id = store.find(&p.name).with_context(|| format!("checkpoint parameter {} not in model", p.name))?;
            if store.get(id).shape() != p.shape.as_slice() {
                bail!("parameter {}: checkpoint shape {:?}, model shape {:?}", p.name, p.shape, store.get(id).shape());
            }
            let t = Tensor::new(p.shape.clone(), p.data.clone()).with_context(|| format!("parameter {}", p.name))?;
            *store.get_mut(id) = t;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        if self.params.iter().any(|p| p.data.iter().any(|v| !v.is_finite())) {
            bail!("refusing to save a checkpoint with non-finite parameters");
        }
        std::fs::write(path, serde_json::to_string(self)?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
