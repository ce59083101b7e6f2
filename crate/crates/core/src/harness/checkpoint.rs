//! Model checkpoints stored in the binary array container.
//!
//! Entries: `param/<name>` for every parameter (trainable or frozen, `f64`),
//! `adam/m/<name>` and `adam/v/<name>` when optimizer state is present, and `meta`,
//! a JSON document with the model config, epoch, optimizer step, training config and
//! metric history.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Array, ArrayFile};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::optim::{Adam, AdamConfig};
use crate::harness::train::EpochMetrics;
use crate::model::{ModelConfig, SegModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    epoch: usize,
    adam: Option<(AdamConfig, f64, u64)>,
    config: Option<TrainConfig>,
    history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
    /// Epochs completed.
    pub epoch: usize,
    pub config: Option<TrainConfig>,
    pub history: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn from_model(model: &SegModel) -> Self {
        let store = model.store();
        Checkpoint {
            model_config: model.config().clone(),
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.value(id).clone()))
                .collect(),
            optimizer: None,
            epoch: 0,
            config: None,
            history: Vec::new(),
        }
    }

    /// Rebuilds the model and overwrites every parameter with the stored value.
    pub fn to_model(&self) -> Result<SegModel> {
        let mut model = SegModel::new(self.model_config.clone())?;
        if model.store().len() != self.params.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store().len()
            )));
        }
        for (name, value) in &self.params {
            let id = model
                .store()
                .find(name)
                .ok_or_else(|| Error::invalid(format!("model has no parameter {name}")))?;
            model.store_mut().set(id, value.clone())?;
        }
        Ok(model)
    }

    pub fn to_container(&self) -> Result<ArrayFile> {
        let mut f = ArrayFile::new();
        for (name, value) in &self.params {
            f.insert(format!("param/{name}"), Array::f64(value));
        }
        if let Some(adam) = &self.optimizer {
            for (i, (name, _)) in self.params.iter().enumerate() {
                f.insert(format!("adam/m/{name}"), Array::f64(&adam.m[i]));
                f.insert(format!("adam/v/{name}"), Array::f64(&adam.v[i]));
            }
        }
        let meta = Meta {
            model: self.model_config.clone(),
            epoch: self.epoch,
            adam: self
                .optimizer
                .as_ref()
                .map(|a| (a.config, a.weight_decay, a.step)),
            config: self.config.clone(),
            history: self.history.clone(),
        };
        f.insert("meta", Array::bytes(serde_json::to_string(&meta)?.as_bytes()));
        Ok(f)
    }

    pub fn from_container(f: &ArrayFile) -> Result<Self> {
        let meta: Meta = serde_json::from_slice(
            f.get("meta")
                .and_then(|a| a.as_bytes())
                .ok_or_else(|| Error::invalid("checkpoint has no metadata"))?,
        )?;
        let params: Vec<(String, Tensor)> = f
            .names()
            .filter_map(|n| n.strip_prefix("param/"))
            .map(|n| Ok((n.to_string(), f.tensor(&format!("param/{n}"))?)))
            .collect::<Result<_>>()?;
        let optimizer = match meta.adam {
            None => None,
            Some((config, weight_decay, step)) => {
                let moment = |kind: &str| {
                    params
                        .iter()
                        .map(|(n, _)| f.tensor(&format!("adam/{kind}/{n}")))
                        .collect::<Result<Vec<_>>>()
                };
                Some(Adam {
                    config,
                    weight_decay,
                    step,
                    m: moment("m")?,
                    v: moment("v")?,
                })
            }
        };
        Ok(Checkpoint {
            model_config: meta.model,
            params,
            optimizer,
            epoch: meta.epoch,
            config: meta.config,
            history: meta.history,
        })
    }

    /// Writes the checkpoint; builds with debug assertions re-read it and check that
    /// every stored array survived bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = self.to_container()?;
        file.write(path)?;
        if cfg!(debug_assertions) {
            let back = ArrayFile::read(path)?;
            assert!(back == file, "checkpoint {} did not round-trip", path.display());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&ArrayFile::read(path)?)
    }
}

pub fn load_model(path: &Path) -> Result<SegModel> {
    Checkpoint::load(path)?.to_model()
}
