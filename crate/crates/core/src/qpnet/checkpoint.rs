//! Checkpoint directory: `manifest.json` (config, seed, group tags, tensor
//! index) and `tensors.bin` (little-endian `f32`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, QpNet};
use crate::diffcore::{ParamGroup, Tensor};
use crate::error::{Error, Result};
use crate::files;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    group: Option<ParamGroup>,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    blob_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &QpNet, dir: &Path) -> Result<()> {
    files::create_dir(dir)?;
    let mut values: Vec<f64> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, kind, group, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorEntry {
            name,
            kind,
            group,
            shape,
            offset: values.len(),
            len: data.len(),
        });
        values.extend_from_slice(data);
    };
    for (_, p) in model.params().iter() {
        let v = p.value();
        push(
            p.name().to_string(),
            TensorKind::Param,
            Some(p.group()),
            v.shape().to_vec(),
            v.data(),
        );
    }
    for layer in &model.bn {
        let c = layer.running.channels();
        push(
            layer.name.clone(),
            TensorKind::RunningMean,
            None,
            vec![c],
            &layer.running.mean,
        );
        push(
            layer.name.clone(),
            TensorKind::RunningVar,
            None,
            vec![c],
            &layer.running.var,
        );
    }
    let blob = files::f32_bytes(&values);
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        blob_sha256: files::sha256_hex(&blob),
        tensors,
    };
    files::write_bytes(&dir.join(BLOB), &blob)?;
    files::write_json(&dir.join(MANIFEST), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<QpNet> {
    let manifest: Manifest = files::read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            manifest.format_version
        )));
    }
    let blob = files::read_bytes(&dir.join(BLOB))?;
    if files::sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Format(format!(
            "checksum mismatch in {}",
            dir.join(BLOB).display()
        )));
    }
    let mut model = QpNet::new(manifest.config, manifest.seed)?;
    let mut seen_params = 0;
    let mut seen_stats = 0;
    for entry in &manifest.tensors {
        let data = files::read_f32s(&blob, entry.offset, entry.len)?;
        let err = |what: &str| Error::Format(format!("checkpoint tensor {}: {what}", entry.name));
        match entry.kind {
            TensorKind::Param => {
                let id = model
                    .params()
                    .find(&entry.name)
                    .ok_or_else(|| err("unknown parameter"))?;
                let param = model.params_mut().get_mut(id);
                if entry.group != Some(param.group()) {
                    return Err(err("group tag does not match the architecture"));
                }
                param
                    .set_value(Tensor::new(&entry.shape, data)?)
                    .map_err(|_| err("shape does not match the architecture"))?;
                seen_params += 1;
            }
            TensorKind::RunningMean | TensorKind::RunningVar => {
                let layer = model
                    .bn
                    .iter_mut()
                    .find(|l| l.name == entry.name)
                    .ok_or_else(|| err("unknown batch-norm layer"))?;
                let target = if entry.kind == TensorKind::RunningMean {
                    &mut layer.running.mean
                } else {
                    &mut layer.running.var
                };
                if target.len() != data.len() {
                    return Err(err("running statistics have the wrong length"));
                }
                *target = data;
                seen_stats += 1;
            }
        }
    }
    if seen_params != model.params().len() || seen_stats != 2 * model.bn.len() {
        return Err(Error::Format(format!(
            "checkpoint in {} is incomplete: {seen_params} parameters, {seen_stats} statistics",
            dir.display()
        )));
    }
    Ok(model)
}
