use std::path::Path;

use super::archive::{Archive, DType};
use crate::autodiff::{ParameterSet, Tensor};
use crate::error::{Error, Result};
use crate::models::{ExtractorModel, NetworkSpec};
use crate::objectives::LossKind;

/// Model parameters with optimizer state and run bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ExtractorModel,
    /// Training speakers in classifier order.
    pub speakers: Vec<String>,
    pub loss: LossKind,
    /// Optimizer steps taken.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub val_eer: Option<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct LossHolder {
    loss: LossKind,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new("checkpoint");
        a.meta.insert("spec".into(), self.model.spec().to_string());
        a.meta.insert("speakers".into(), self.speakers.join("\n"));
        let loss = toml::to_string(&LossHolder { loss: self.loss }).map_err(|e| Error::Format(e.to_string()))?;
        a.meta.insert("loss".into(), loss);
        a.meta.insert("step".into(), self.step.to_string());
        a.meta.insert("epoch".into(), self.epoch.to_string());
        a.meta.insert("config_hash".into(), self.config_hash.clone());
        if let Some(e) = self.val_eer {
            a.meta.insert("val_eer".into(), e.to_string());
        }
        for p in self.model.params().iter() {
            a.push(format!("param:{}", p.name), DType::F64, p.value.shape().to_vec(), p.value.data().to_vec())?;
        }
        for p in self.model.params().iter() {
            a.push(format!("momentum:{}", p.name), DType::F64, p.value.shape().to_vec(), p.momentum.clone())?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind("checkpoint")?;
        let spec = NetworkSpec::from_text(a.meta_value("spec")?)?;
        let mut params = ParameterSet::new();
        for t in &a.tensors {
            if let Some(name) = t.name.strip_prefix("param:") {
                params.insert(name, Tensor::new(t.shape.clone(), t.data.clone())?)?;
            }
        }
        for t in &a.tensors {
            if let Some(name) = t.name.strip_prefix("momentum:") {
                let p = params.get_mut(name).ok_or_else(|| Error::Format(format!("momentum for unknown parameter {name}")))?;
                if t.data.len() != p.momentum.len() {
                    return Err(Error::Format(format!("momentum shape mismatch for {name}")));
                }
                p.momentum.clone_from(&t.data);
            }
        }
        let model = ExtractorModel::from_parts(spec, params)?;
        let speakers: Vec<String> = a.meta_value("speakers")?.lines().map(str::to_string).collect();
        if speakers.len() != model.spec().n_spk() {
            return Err(Error::Format(format!("{} speakers for a {}-way classifier", speakers.len(), model.spec().n_spk())));
        }
        let loss: LossHolder = toml::from_str(a.meta_value("loss")?).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self {
            model,
            speakers,
            loss: loss.loss,
            step: a.meta_parse("step")?,
            epoch: a.meta_parse("epoch")?,
            config_hash: a.meta_value("config_hash")?.to_string(),
            val_eer: a.meta.get("val_eer").map(|v| v.parse()).transpose().map_err(|_| Error::Format("bad val_eer".into()))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}
