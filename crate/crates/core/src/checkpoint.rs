//! Model checkpoints in the scene-file container: a JSON manifest naming
//! every parameter tensor, followed by little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::nn::HasParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    schema_version: u32,
    model: ModelSpec,
    params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let params = model.params();
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model: model.spec,
        params: params
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    for p in &params {
        container::push_f32(&mut payload, p.value.data());
    }
    container::write(path.as_ref(), &manifest, &payload)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let path = path.as_ref();
    let (m, payload): (CheckpointManifest, _) = container::read(path)?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason,
    };
    if m.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(malformed(format!("unsupported schema version {}", m.schema_version)));
    }
    let mut model = Model::<f32>::new(m.model, 0);
    let mut params = model.params_mut();
    if params.len() != m.params.len() {
        return Err(malformed(format!(
            "{} parameters listed, model has {}",
            m.params.len(),
            params.len()
        )));
    }
    for (p, e) in params.iter().zip(&m.params) {
        if p.name != e.name || p.value.shape() != e.shape.as_slice() {
            return Err(Error::DimensionMismatch(format!(
                "{}: parameter {} {:?} does not match model parameter {} {:?}",
                path.display(),
                e.name,
                e.shape,
                p.name,
                p.value.shape()
            )));
        }
    }
    let expected = 4 * m.params.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>();
    let mut reader = PayloadReader::new(path, &payload, expected)?;
    for (p, e) in params.iter_mut().zip(&m.params) {
        let values = reader.f32s(e.shape.iter().product())?;
        p.value = Tensor::from_vec(&e.shape, values)?;
    }
    Ok(model)
}
