//! Scene and frame types, the synthetic scene generator, and the on-disk
//! scene format.
//!
//! Camera frame: +z forward, +x right, +y down. Grid axes are aligned with the
//! camera axes and voxels are indexed `(x * H + y) * D + z`.

mod generate;
mod io;

pub use generate::{generate_corpus, generate_scene, generate_scene_with, scene_seed, GeneratorConfig, DEFAULT_GRID_DIMS, MIN_GRID_DIMS};
pub use io::{load_dataset, load_sample, save_dataset, save_sample, scene_path, DatasetIndex, SCENE_SCHEMA_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Names for `K + 1` labels; index 0 is always the empty class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    labels: Vec<String>,
}

pub const NYU_CLASSES: [&str; 12] = [
    "empty",
    "ceiling",
    "floor",
    "wall",
    "window",
    "chair",
    "bed",
    "sofa",
    "table",
    "tvs",
    "furniture",
    "objects",
];

impl ClassSet {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::InvalidClassSet("need at least one object class".into()));
        }
        if labels[0] != "empty" {
            return Err(Error::InvalidClassSet(format!(
                "label 0 must be \"empty\", got {:?}",
                labels[0]
            )));
        }
        if labels.len() > 256 {
            return Err(Error::InvalidClassSet("labels must fit in a byte".into()));
        }
        Ok(ClassSet { labels })
    }

    /// `K` object classes; the first eleven use the indoor names above.
    pub fn with_objects(k: usize) -> Result<Self> {
        let labels = (0..=k)
            .map(|i| {
                NYU_CLASSES
                    .get(i)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class{i}"))
            })
            .collect();
        Self::new(labels)
    }

    pub fn num_object_classes(&self) -> usize {
        self.labels.len() - 1
    }

    /// `K + 1`, the channel count of every prediction.
    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, label: usize) -> &str {
        &self.labels[label]
    }
}

impl Default for ClassSet {
    fn default() -> Self {
        ClassSet {
            labels: NYU_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    /// Pinhole camera for a `width x height` image with the given focal length
    /// and the principal point at the image centre.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: (width / 2) as f64,
            cy: (height / 2) as f64,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }
}

impl Default for CameraIntrinsics {
    /// 64x48 image; focal length chosen so the frustum sees floor, ceiling
    /// and side walls of the default room.
    fn default() -> Self {
        CameraIntrinsics::centered(64, 48, 40.0)
    }
}

/// Placement of the voxel grid in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    /// Camera-frame position of the `(0, 0, 0)` voxel corner.
    pub origin: [f64; 3],
}

impl GridSpec {
    /// Grid centred on the optical axis, starting `near` metres in front of the camera.
    pub fn centered(dims: [usize; 3], voxel_size: f64, near: f64) -> Self {
        GridSpec {
            dims,
            voxel_size,
            origin: [
                -(dims[0] as f64) * voxel_size / 2.0,
                -(dims[1] as f64) * voxel_size / 2.0,
                near,
            ],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn flat(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn unflat(&self, v: usize) -> [usize; 3] {
        let z = v % self.dims[2];
        let y = (v / self.dims[2]) % self.dims[1];
        let x = v / (self.dims[2] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, v: usize) -> [f64; 3] {
        let idx = self.unflat(v);
        [0, 1, 2].map(|a| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size)
    }

    /// Voxel containing a camera-frame point, if inside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<usize> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(self.flat(idx[0], idx[1], idx[2]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Visibility {
    VisibleFree = 0,
    Surface = 1,
    Occluded = 2,
    OutsideFrustum = 3,
}

impl Visibility {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Visibility::VisibleFree),
            1 => Some(Visibility::Surface),
            2 => Some(Visibility::Occluded),
            3 => Some(Visibility::OutsideFrustum),
            _ => None,
        }
    }

    /// Voxels that are trained on and evaluated: observed surface plus
    /// occluded space inside the frustum.
    pub fn is_evaluated(self) -> bool {
        matches!(self, Visibility::Surface | Visibility::Occluded)
    }
}

/// Colour image (`3 x H x W`, values in `[0, 1]`) plus metric depth (`H x W`,
/// 0 marks an invalid pixel).
#[derive(Clone, Debug, PartialEq)]
pub struct RgbdFrame {
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let n = self.intrinsics.num_pixels();
        if self.rgb.len() != 3 * n || self.depth.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "frame buffers ({} rgb, {} depth) do not match {}x{} image",
                self.rgb.len(),
                self.depth.len(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        if self.rgb.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::NonFinite("rgb outside [0, 1]".into()));
        }
        if self.depth.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
            return Err(Error::NonFinite("negative or non-finite depth".into()));
        }
        Ok(())
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.depth.iter().map(|&d| d > 0.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneVolume {
    pub labels: Vec<u8>,
    pub visibility: Vec<Visibility>,
    pub grid: GridSpec,
}

impl SceneVolume {
    pub fn validate(&self, classes: &ClassSet) -> Result<()> {
        let n = self.grid.num_voxels();
        if self.labels.len() != n || self.visibility.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "volume buffers ({}, {}) do not match grid {:?}",
                self.labels.len(),
                self.visibility.len(),
                self.grid.dims
            )));
        }
        let k = classes.num_object_classes();
        for (&l, &vis) in self.labels.iter().zip(&self.visibility) {
            if l as usize > k {
                return Err(Error::LabelOutOfRange {
                    label: l as usize,
                    num_classes: k + 1,
                });
            }
            if (vis == Visibility::Surface && l == 0) || (vis == Visibility::VisibleFree && l != 0) {
                return Err(Error::DimensionMismatch(format!(
                    "visibility {vis:?} inconsistent with label {l}"
                )));
            }
        }
        Ok(())
    }

    /// Mask of voxels included in the loss and the metrics.
    pub fn eval_mask(&self) -> Vec<bool> {
        self.visibility.iter().map(|v| v.is_evaluated()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub frame: RgbdFrame,
    pub volume: SceneVolume,
    pub classes: ClassSet,
    pub scene_id: u64,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_classes_have_eleven_objects() {
        let c = ClassSet::default();
        assert_eq!(c.num_object_classes(), 11);
        assert_eq!(c.name(0), "empty");
        assert_eq!(ClassSet::with_objects(11).unwrap(), c);
    }

    #[test]
    fn class_set_rejects_bad_first_label() {
        assert!(ClassSet::new(vec!["wall".into(), "floor".into()]).is_err());
        assert!(ClassSet::new(vec!["empty".into()]).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::default().validate().is_ok());
        let mut bad = CameraIntrinsics::default();
        bad.cx = 64.0;
        assert!(bad.validate().is_err());
        bad = CameraIntrinsics::default();
        bad.fy = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_flat_roundtrip_and_locate() {
        let g = GridSpec::centered([4, 3, 5], 0.5, 1.0);
        for v in 0..g.num_voxels() {
            let [x, y, z] = g.unflat(v);
            assert_eq!(g.flat(x, y, z), v);
            assert_eq!(g.locate(g.center(v)), Some(v));
        }
        assert_eq!(g.locate([0.0, 0.0, 0.5]), None);
    }
}
