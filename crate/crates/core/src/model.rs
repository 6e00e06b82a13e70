//! The two-branch network and per-sample precomputed inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{encode_depth_volume, rgb_tensor, Backbone, Backbone2d, Backbone3d, Backbone3dKind, DepthEncoding};
use crate::dcp::Dcp;
use crate::dda::Dda;
use crate::error::{Error, Result};
use crate::geometry::{backproject_frame, build_projection_table, project_3d_to_2d, ProjectionTable};
use crate::nn::{HasParams, Param};
use crate::scene::{SceneSample, Visibility};
use crate::tensor::{argmax_channels, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationLabel {
    A,
    B,
    C,
    D,
    E,
}

impl AblationLabel {
    pub const ALL: [AblationLabel; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn config(self) -> AblationConfig {
        let (il, dcp, dda) = match self {
            Self::A => (false, false, false),
            Self::B => (true, false, false),
            Self::C => (true, true, false),
            Self::D => (true, false, true),
            Self::E => (true, true, true),
        };
        AblationConfig {
            label: self,
            iterative: il,
            dcp,
            dda,
        }
    }
}

impl std::str::FromStr for AblationLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Self::A),
            "B" => Ok(Self::B),
            "C" => Ok(Self::C),
            "D" => Ok(Self::D),
            "E" => Ok(Self::E),
            other => Err(Error::Config(format!("unknown ablation label {other:?} (expected A-E)"))),
        }
    }
}

impl std::fmt::Display for AblationLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Which parts of the pipeline are active: iterative learning, the 2D
/// refinement module and the 3D refinement module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub label: AblationLabel,
    pub iterative: bool,
    pub dcp: bool,
    pub dda: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationLabel::E.config()
    }
}

/// Network inputs, ground truth and masks derived once per scene.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub scene_id: u64,
    pub rgb: Tensor<f32>,
    pub depth_volume: Tensor<f32>,
    /// Correspondences derived from depth alone (no ground truth).
    pub table: ProjectionTable,
    pub gt3d: Vec<u8>,
    pub mask3d: Vec<bool>,
    pub gt2d: Vec<u8>,
    pub mask2d: Vec<bool>,
    pub image_dims: [usize; 2],
    pub grid_dims: [usize; 3],
}

/// Projection table built from the depth image only: a pixel's voxel is
/// wherever its back-projection lands. Equals [`build_projection_table`] on
/// generated scenes, whose surface voxels are exactly these hits.
pub fn table_from_depth(sample: &SceneSample) -> ProjectionTable {
    let mut volume = sample.volume.clone();
    volume.visibility.iter_mut().for_each(|v| *v = Visibility::VisibleFree);
    for v in backproject_frame(&sample.frame, &volume.grid).into_iter().filter(|&v| v >= 0) {
        volume.visibility[v as usize] = Visibility::Surface;
    }
    build_projection_table(&volume, &sample.frame)
}

impl PreparedSample {
    pub fn new(sample: &SceneSample, encoding: DepthEncoding) -> Result<Self> {
        let k = sample.classes.num_labels();
        sample.volume.validate(&sample.classes)?;
        let intr = sample.frame.intrinsics;
        let gt_table = build_projection_table(&sample.volume, &sample.frame);
        let gt2d = project_3d_to_2d(&sample.volume.labels, &gt_table)?;
        let mask2d: Vec<bool> = gt_table.pixel_to_voxel.iter().map(|&v| v >= 0).collect();
        if gt2d.iter().any(|&l| l as usize >= k) {
            return Err(Error::LabelOutOfRange {
                label: k,
                num_classes: k,
            });
        }
        Ok(PreparedSample {
            scene_id: sample.scene_id,
            rgb: rgb_tensor(&sample.frame),
            depth_volume: encode_depth_volume(&sample.frame, &sample.volume.grid, encoding),
            table: table_from_depth(sample),
            gt3d: sample.volume.labels.clone(),
            mask3d: sample.volume.eval_mask(),
            gt2d,
            mask2d,
            image_dims: [intr.width, intr.height],
            grid_dims: sample.volume.grid.dims,
        })
    }

    pub fn prepare_all(samples: &[SceneSample], encoding: DepthEncoding) -> Result<Vec<Self>> {
        samples.iter().map(|s| Self::new(s, encoding)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// 2D semantic segmentation: 2D backbone plus 2D refinement.
    Ss,
    /// 3D semantic scene completion: 3D backbone plus 3D refinement.
    Ssc,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Ss => "ss",
            Branch::Ssc => "ssc",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub num_labels: usize,
    pub backbone3d: Backbone3dKind,
    pub encoding: DepthEncoding,
}

/// Both branches. Refinement modules always exist (so initialization does
/// not depend on the ablation); the flags decide whether they are used.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub bb2d: Backbone2d<T>,
    pub bb3d: Backbone3d<T>,
    pub dcp: Dcp<T>,
    pub dda: Dda<T>,
}

impl<T: Real> Model<T> {
    pub fn new(spec: ModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.num_labels;
        Model {
            spec,
            bb2d: Backbone2d::new(k, &mut rng),
            bb3d: Backbone3d::new(spec.backbone3d, k, &mut rng),
            dcp: Dcp::new(k, &mut rng),
            dda: Dda::new(k, &mut rng),
        }
    }

    pub fn branch_params(&self, branch: Branch) -> Vec<&Param<T>> {
        match branch {
            Branch::Ss => {
                let mut v = self.bb2d.params();
                v.extend(self.dcp.params());
                v
            }
            Branch::Ssc => {
                let mut v = self.bb3d.params();
                v.extend(self.dda.params());
                v
            }
        }
    }

    pub fn branch_params_mut(&mut self, branch: Branch) -> Vec<&mut Param<T>> {
        match branch {
            Branch::Ss => {
                let mut v = self.bb2d.params_mut();
                v.extend(self.dcp.params_mut());
                v
            }
            Branch::Ssc => {
                let mut v = self.bb3d.params_mut();
                v.extend(self.dda.params_mut());
                v
            }
        }
    }
}

impl<T: Real> HasParams<T> for Model<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.branch_params(Branch::Ss);
        v.extend(self.branch_params(Branch::Ssc));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let Model { bb2d, bb3d, dcp, dda, .. } = self;
        let mut v = bb2d.params_mut();
        v.extend(dcp.params_mut());
        v.extend(bb3d.params_mut());
        v.extend(dda.params_mut());
        v
    }
}

impl Model<f32> {
    pub fn coarse_2d(&self, s: &PreparedSample) -> Result<Tensor<f32>> {
        self.bb2d.infer(&s.rgb)
    }

    pub fn coarse_3d(&self, s: &PreparedSample) -> Result<Tensor<f32>> {
        self.bb3d.infer(&s.depth_volume)
    }

    /// Refined 2D labels given the other branch's latest voxel labels
    /// (`None`, or a disabled module, falls back to the coarse argmax).
    pub fn predict_2d(&self, s: &PreparedSample, f3d_labels: Option<&[u8]>, use_dcp: bool) -> Result<Vec<u8>> {
        let f2d = self.coarse_2d(s)?;
        match f3d_labels {
            Some(l) if use_dcp => Ok(argmax_channels(&self.dcp.infer(&f2d, l, &s.table)?)),
            _ => Ok(argmax_channels(&f2d)),
        }
    }

    pub fn predict_3d(&self, s: &PreparedSample, f2d_labels: Option<&[u8]>, use_dda: bool) -> Result<Vec<u8>> {
        let f3d = self.coarse_3d(s)?;
        match f2d_labels {
            Some(l) if use_dda => Ok(argmax_channels(&self.dda.infer(&f3d, l, &s.table)?)),
            _ => Ok(argmax_channels(&f3d)),
        }
    }

    /// Full inference: coarse predictions, then `rounds` alternations of 3D
    /// and 2D refinement, each consuming the other branch's latest labels.
    pub fn predict(&self, s: &PreparedSample, ablation: &AblationConfig, rounds: usize) -> Result<(Vec<u8>, Vec<u8>)> {
        let mut f2d = self.predict_2d(s, None, false)?;
        let mut f3d = self.predict_3d(s, None, false)?;
        if ablation.iterative {
            for _ in 0..rounds {
                f3d = self.predict_3d(s, Some(&f2d), ablation.dda)?;
                f2d = self.predict_2d(s, Some(&f3d), ablation.dcp)?;
            }
        }
        Ok((f2d, f3d))
    }
}
