//! Run configuration: one flat TOML file that pins data locations, scene
//! dimensions, the class set, optimizer settings and the ablation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone3dKind, DepthEncoding};
use crate::error::{Error, Result};
use crate::model::AblationLabel;
use crate::scene::{CameraIntrinsics, DatasetIndex};
use crate::trainer::{PhaseOrder, TrainConfig};

/// Default focal length per pixel of image width (40 px at 64 px wide).
pub const FOCAL_PER_WIDTH: f64 = 0.625;

/// Camera for a `width x height` image with the default field of view.
pub fn intrinsics_for_image(width: usize, height: usize) -> CameraIntrinsics {
    CameraIntrinsics::centered(width, height, FOCAL_PER_WIDTH * width as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_dir: PathBuf,
    /// Held-out scenes; metrics fall back to the training set when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub grid_dims: [usize; 3],
    pub image_dims: [usize; 2],
    pub num_object_classes: usize,
    #[serde(default = "default_ablation")]
    pub ablation: AblationLabel,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub epochs_per_phase: usize,
    pub seed: u64,
    #[serde(default)]
    pub phase_order: PhaseOrder,
    #[serde(default = "default_backbone3d")]
    pub backbone3d: Backbone3dKind,
    #[serde(default)]
    pub encoding: DepthEncoding,
}

fn default_ablation() -> AblationLabel {
    AblationLabel::E
}

fn default_backbone3d() -> Backbone3dKind {
    Backbone3dKind::Dilated
}

impl RunConfig {
    /// Default optimizer settings over the given directories.
    pub fn new(train_dir: impl Into<PathBuf>, eval_dir: Option<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let t = TrainConfig::default();
        let intr = CameraIntrinsics::default();
        RunConfig {
            train_dir: train_dir.into(),
            eval_dir,
            out_dir: out_dir.into(),
            grid_dims: crate::scene::DEFAULT_GRID_DIMS,
            image_dims: [intr.width, intr.height],
            num_object_classes: crate::scene::ClassSet::default().num_object_classes(),
            ablation: AblationLabel::E,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            iterations: t.iterations,
            epochs_per_phase: t.epochs_per_phase,
            seed: t.seed,
            phase_order: t.phase_order,
            backbone3d: t.backbone3d,
            encoding: t.encoding,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train_config().validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.train_dir);
        if let Some(p) = cfg.eval_dir.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            iterations: self.iterations,
            epochs_per_phase: self.epochs_per_phase,
            seed: self.seed,
            phase_order: self.phase_order,
            backbone3d: self.backbone3d,
            encoding: self.encoding,
        }
    }

    /// Rejects a dataset whose dimensions or class count differ from the config.
    pub fn check_dataset(&self, index: &DatasetIndex) -> Result<()> {
        let image = [index.intrinsics.width, index.intrinsics.height];
        if index.grid_dims != self.grid_dims
            || image != self.image_dims
            || index.num_object_classes != self.num_object_classes
        {
            return Err(Error::DimensionMismatch(format!(
                "dataset has grid {:?}, image {:?}, {} object classes; config expects grid {:?}, image {:?}, {}",
                index.grid_dims,
                image,
                index.num_object_classes,
                self.grid_dims,
                self.image_dims,
                self.num_object_classes
            )));
        }
        Ok(())
    }
}
