//! Scene files and dataset directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, ClassSet, GeneratorConfig, GridSpec, RgbdFrame, SceneSample, SceneVolume, Visibility};
use crate::container::{self, PayloadReader};
use crate::error::{Error, Result};

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(&self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneManifest {
    schema_version: u32,
    scene_id: u64,
    seed: u64,
    class_names: Vec<String>,
    intrinsics: CameraIntrinsics,
    grid: GridSpec,
    tensors: Vec<TensorEntry>,
}

const TENSOR_ORDER: [(&str, Dtype); 4] = [
    ("rgb", Dtype::F32),
    ("depth", Dtype::F32),
    ("labels", Dtype::U8),
    ("visibility", Dtype::U8),
];

fn expected_shape(name: &str, intr: &CameraIntrinsics, grid: &GridSpec) -> Vec<usize> {
    match name {
        "rgb" => vec![3, intr.height, intr.width],
        "depth" => vec![intr.height, intr.width],
        _ => grid.dims.to_vec(),
    }
}

pub fn save_sample(sample: &SceneSample, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let intr = sample.frame.intrinsics;
    let grid = sample.volume.grid;
    let manifest = SceneManifest {
        schema_version: SCENE_SCHEMA_VERSION,
        scene_id: sample.scene_id,
        seed: sample.seed,
        class_names: sample.classes.labels().to_vec(),
        intrinsics: intr,
        grid,
        tensors: TENSOR_ORDER
            .iter()
            .map(|(name, dtype)| TensorEntry {
                name: name.to_string(),
                dtype: dtype.clone(),
                shape: expected_shape(name, &intr, &grid),
            })
            .collect(),
    };
    let mut payload = Vec::new();
    container::push_f32(&mut payload, &sample.frame.rgb);
    container::push_f32(&mut payload, &sample.frame.depth);
    payload.extend_from_slice(&sample.volume.labels);
    payload.extend(sample.volume.visibility.iter().map(|&v| v as u8));
    container::write(path, &manifest, &payload)
}

pub fn load_sample(path: impl AsRef<Path>) -> Result<SceneSample> {
    let path = path.as_ref();
    let (m, payload): (SceneManifest, _) = container::read(path)?;
    let malformed = |reason: String| Error::MalformedManifest {
        path: path.to_path_buf(),
        reason,
    };
    if m.schema_version != SCENE_SCHEMA_VERSION {
        return Err(malformed(format!("unsupported schema version {}", m.schema_version)));
    }
    let classes = ClassSet::new(m.class_names.clone()).map_err(|e| malformed(e.to_string()))?;
    m.intrinsics.validate().map_err(|e| malformed(e.to_string()))?;
    if m.tensors.len() != TENSOR_ORDER.len() {
        return Err(malformed(format!("expected 4 tensors, found {}", m.tensors.len())));
    }
    for entry in &m.tensors {
        let Some((_, dtype)) = TENSOR_ORDER.iter().find(|(n, _)| *n == entry.name) else {
            return Err(malformed(format!("unknown tensor {:?}", entry.name)));
        };
        if m.tensors.iter().filter(|t| t.name == entry.name).count() != 1 {
            return Err(malformed(format!("duplicate tensor {:?}", entry.name)));
        }
        if entry.dtype != *dtype {
            return Err(malformed(format!("tensor {:?} has dtype {:?}", entry.name, entry.dtype)));
        }
        let want = expected_shape(&entry.name, &m.intrinsics, &m.grid);
        if entry.shape != want {
            return Err(Error::DimensionMismatch(format!(
                "{}: tensor {:?} has shape {:?}, header implies {want:?}",
                path.display(),
                entry.name,
                entry.shape
            )));
        }
    }

    let expected: usize = m
        .tensors
        .iter()
        .map(|t| t.dtype.size() * t.shape.iter().product::<usize>())
        .sum();
    let mut reader = PayloadReader::new(path, &payload, expected)?;
    let (mut rgb, mut depth, mut labels, mut vis) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for entry in &m.tensors {
        let n: usize = entry.shape.iter().product();
        match entry.name.as_str() {
            "rgb" => rgb = reader.f32s(n)?,
            "depth" => depth = reader.f32s(n)?,
            "labels" => labels = reader.u8s(n)?,
            _ => vis = reader.u8s(n)?,
        }
    }
    let corrupt = |reason: String| Error::CorruptPayload {
        path: path.to_path_buf(),
        reason,
    };
    let visibility = vis
        .iter()
        .map(|&b| Visibility::from_u8(b).ok_or_else(|| corrupt(format!("visibility code {b}"))))
        .collect::<Result<Vec<_>>>()?;
    let sample = SceneSample {
        frame: RgbdFrame {
            rgb,
            depth,
            intrinsics: m.intrinsics,
        },
        volume: SceneVolume {
            labels,
            visibility,
            grid: m.grid,
        },
        classes,
        scene_id: m.scene_id,
        seed: m.seed,
    };
    sample.frame.validate().map_err(|e| corrupt(e.to_string()))?;
    sample.volume.validate(&sample.classes).map_err(|e| corrupt(e.to_string()))?;
    Ok(sample)
}

/// Contents of `index.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub schema_version: u32,
    pub scene_ids: Vec<u64>,
    pub base_seed: u64,
    pub grid_dims: [usize; 3],
    pub intrinsics: CameraIntrinsics,
    pub num_object_classes: usize,
    pub generator: GeneratorConfig,
}

pub fn scene_path(dir: &Path, scene_id: u64) -> PathBuf {
    dir.join(format!("{scene_id}.scene"))
}

pub fn save_dataset(dir: impl AsRef<Path>, index: &DatasetIndex, samples: &[SceneSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in samples {
        save_sample(s, scene_path(dir, s.scene_id))?;
    }
    let path = dir.join("index.json");
    let json = serde_json::to_string_pretty(index).expect("index serializes");
    fs::write(&path, json).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetIndex, Vec<SceneSample>)> {
    let dir = dir.as_ref();
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let samples = index
        .scene_ids
        .iter()
        .map(|&id| load_sample(scene_path(dir, id)))
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}
