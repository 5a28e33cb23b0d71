//! Self-describing checkpoints: a safetensors file whose header carries the
//! model config (including normalisation stats), class spec, loss config and
//! training step. Model variables are stored as `model.<name>`, extra
//! training state (e.g. loss log-variances) as `extra.<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use super::{KongNet, ModelConfig};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::types::ClassSpec;

const FORMAT: &str = "kongnet-checkpoint-1";
const MODEL_PREFIX: &str = "model.";
const EXTRA_PREFIX: &str = "extra.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model_config: ModelConfig,
    pub classes: ClassSpec,
    pub loss_config: LossConfig,
    pub step: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: KongNet,
    pub extra: BTreeMap<String, Tensor>,
}

pub fn save(path: impl AsRef<Path>, model: &KongNet, meta: &CheckpointMeta, extra: &[(&str, &Tensor)]) -> Result<()> {
    if &meta.model_config != model.config() {
        return Err(Error::Checkpoint("metadata config differs from the model's".into()));
    }
    if meta.classes.len() != model.config().n_classes {
        return Err(Error::Checkpoint(format!(
            "{} classes in metadata, model predicts {}",
            meta.classes.len(),
            model.config().n_classes
        )));
    }
    let mut tensors: Vec<(String, Tensor)> = model
        .named_vars()
        .into_iter()
        .map(|(name, var)| (format!("{MODEL_PREFIX}{name}"), var.as_tensor().clone()))
        .collect();
    for (name, t) in extra {
        tensors.push((format!("{EXTRA_PREFIX}{name}"), (*t).clone()));
    }
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert("model_config".to_string(), serde_json::to_string(&meta.model_config)?);
    header.insert("classes".to_string(), serde_json::to_string(&meta.classes)?);
    header.insert("loss_config".to_string(), serde_json::to_string(&meta.loss_config)?);
    header.insert("step".to_string(), meta.step.to_string());
    safetensors::serialize_to_file(tensors, Some(header), path.as_ref()).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn field<'a>(header: &'a HashMap<String, String>, key: &str) -> Result<&'a str> {
    header
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata field `{key}`")))
}

fn parse_meta(header: &HashMap<String, String>) -> Result<CheckpointMeta> {
    let format = field(header, "format")?;
    if format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{format}`")));
    }
    fn json<T: serde::de::DeserializeOwned>(header: &HashMap<String, String>, key: &str) -> Result<T> {
        serde_json::from_str(field(header, key)?).map_err(|e| Error::Checkpoint(format!("field `{key}`: {e}")))
    }
    let model_config: ModelConfig = json(header, "model_config")?;
    let classes: ClassSpec = json(header, "classes")?;
    let loss_config: LossConfig = json(header, "loss_config")?;
    let step = field(header, "step")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("field `step`: {e}")))?;
    classes.validate()?;
    if classes.len() != model_config.n_classes {
        return Err(Error::Checkpoint("class spec does not match model config".into()));
    }
    Ok(CheckpointMeta {
        model_config,
        classes,
        loss_config,
        step,
    })
}

/// Reads only the metadata.
pub fn read_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata header".into()))?;
    parse_meta(header)
}

pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, metadata) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header = metadata
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("no metadata header".into()))?;
    let meta = parse_meta(header)?;
    let mut tensors = candle_core::safetensors::load_buffer(&bytes, device)?;

    let model = KongNet::build(meta.model_config.clone(), dtype, device)?;
    for (name, var) in model.named_vars() {
        let key = format!("{MODEL_PREFIX}{name}");
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
        if t.dims() != var.dims() {
            return Err(Error::Checkpoint(format!(
                "tensor `{key}` has shape {:?}, expected {:?}",
                t.dims(),
                var.dims()
            )));
        }
        var.set(&t.to_dtype(dtype)?)?;
    }
    let mut extra = BTreeMap::new();
    for (key, t) in tensors {
        match key.strip_prefix(EXTRA_PREFIX) {
            Some(name) => {
                extra.insert(name.to_string(), t);
            }
            None => return Err(Error::Checkpoint(format!("unexpected tensor `{key}`"))),
        }
    }
    Ok(Checkpoint { meta, model, extra })
}
