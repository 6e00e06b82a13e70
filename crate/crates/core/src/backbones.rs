//! Coarse per-branch predictors: an RGB encoder-decoder for the image and a
//! dilated 3D CNN over an encoded depth volume.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{backproject_frame, project_to_pixel};
use crate::nn::layers::{
    avg_pool2, avg_pool2_backward, concat_channels, relu, relu_backward, split_channels, upsample2,
    upsample2_backward,
};
use crate::nn::{Conv, ConvGeometry, GroupNorm, HasParams, Param};
use crate::scene::{GridSpec, RgbdFrame};
use crate::tensor::{Real, Tensor};

/// Shared interface of both backbones: logits from an input tensor, with a
/// cached training forward and its backward pass.
pub trait Backbone<T: Real>: HasParams<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
    /// Accumulates parameter gradients for the last `forward`.
    fn backward(&mut self, dy: &Tensor<T>);
    fn out_channels(&self) -> usize;
}

/// Channels per normalization group.
pub const NORM_GROUP_WIDTH: usize = 4;

/// Conv, group norm and ReLU, remembering its output for the backward pass.
#[derive(Clone, Debug)]
struct ConvRelu<T> {
    conv: Conv<T>,
    norm: GroupNorm<T>,
    out: Option<Tensor<T>>,
}

impl<T: Real> ConvRelu<T> {
    fn new<R: Rng + ?Sized>(name: &str, cin: usize, cout: usize, geom: ConvGeometry, rng: &mut R) -> Self {
        ConvRelu {
            conv: Conv::new(name, cin, cout, geom, rng),
            norm: GroupNorm::new(&format!("{name}.norm"), cout, cout.div_ceil(NORM_GROUP_WIDTH)),
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = relu(&self.norm.forward(&self.conv.forward(x)?)?);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(&self.norm.infer(&self.conv.infer(x)?)?))
    }

    fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let y = self.out.take().expect("ConvRelu::backward without forward");
        let dz = self.norm.backward(&relu_backward(&y, dy));
        self.conv.backward(&dz, need_dx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv.params();
        v.extend(self.norm.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv.params_mut();
        v.extend(self.norm.params_mut());
        v
    }
}

/// Three-level encoder-decoder (16, 32, 64 channels) with average-pool
/// downsampling, nearest upsampling and skip connections. Image sides must
/// be divisible by 4.
#[derive(Clone, Debug)]
pub struct Backbone2d<T> {
    enc1: ConvRelu<T>,
    enc2: ConvRelu<T>,
    enc3: ConvRelu<T>,
    dec2: ConvRelu<T>,
    dec1: ConvRelu<T>,
    head: Conv<T>,
}

pub const DOWNSAMPLE_2D: usize = 4;

impl<T: Real> Backbone2d<T> {
    pub fn new<R: Rng + ?Sized>(num_labels: usize, rng: &mut R) -> Self {
        let g3 = ConvGeometry::same_2d(3, 1);
        Backbone2d {
            enc1: ConvRelu::new("bb2d.enc1", 3, 16, g3, rng),
            enc2: ConvRelu::new("bb2d.enc2", 16, 32, g3, rng),
            enc3: ConvRelu::new("bb2d.enc3", 32, 64, g3, rng),
            dec2: ConvRelu::new("bb2d.dec2", 96, 32, g3, rng),
            dec1: ConvRelu::new("bb2d.dec1", 48, 16, g3, rng),
            head: Conv::new("bb2d.head", 16, num_labels, ConvGeometry::same_2d(1, 1), rng),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let [s0, h, w] = x.spatial();
        if x.channels() != 3 || s0 != 1 || h % DOWNSAMPLE_2D != 0 || w % DOWNSAMPLE_2D != 0 {
            return Err(Error::ShapeMismatch(format!(
                "2D backbone expects [3, 1, H, W] with H, W divisible by {DOWNSAMPLE_2D}, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Backbone<T> for Backbone2d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let a1 = self.enc1.forward(x)?;
        let a2 = self.enc2.forward(&avg_pool2(&a1)?)?;
        let a3 = self.enc3.forward(&avg_pool2(&a2)?)?;
        let a4 = self.dec2.forward(&concat_channels(&upsample2(&a3), &a2)?)?;
        let a5 = self.dec1.forward(&concat_channels(&upsample2(&a4), &a1)?)?;
        self.head.forward(&a5)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let a1 = self.enc1.infer(x)?;
        let a2 = self.enc2.infer(&avg_pool2(&a1)?)?;
        let a3 = self.enc3.infer(&avg_pool2(&a2)?)?;
        let a4 = self.dec2.infer(&concat_channels(&upsample2(&a3), &a2)?)?;
        let a5 = self.dec1.infer(&concat_channels(&upsample2(&a4), &a1)?)?;
        self.head.infer(&a5)
    }

    fn backward(&mut self, dy: &Tensor<T>) {
        let da5 = self.head.backward(dy, true).expect("dx");
        let dk1 = self.dec1.backward(&da5, true).expect("dx");
        let (du4, mut da1) = split_channels(&dk1, 32);
        let dk2 = self.dec2.backward(&upsample2_backward(&du4), true).expect("dx");
        let (du3, mut da2) = split_channels(&dk2, 64);
        let dp2 = self.enc3.backward(&upsample2_backward(&du3), true).expect("dx");
        da2.add_assign(&avg_pool2_backward(&dp2));
        let dp1 = self.enc2.backward(&da2, true).expect("dx");
        da1.add_assign(&avg_pool2_backward(&dp1));
        self.enc1.backward(&da1, false);
    }

    fn out_channels(&self) -> usize {
        self.head.out_channels()
    }
}

impl<T: Real> HasParams<T> for Backbone2d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for c in [&self.enc1, &self.enc2, &self.enc3, &self.dec2, &self.dec1] {
            v.extend(c.params());
        }
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for c in [&mut self.enc1, &mut self.enc2, &mut self.enc3, &mut self.dec2, &mut self.dec1] {
            v.extend(c.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone3dKind {
    /// Four 3x3x3 blocks (8, 16, 16, 16 channels; dilations 1, 1, 2, 2),
    /// the last two residual.
    Dilated,
    /// Two-block lightweight variant used to exercise backbone swapping.
    Compact,
}

/// Full-resolution 3D CNN over a one-channel depth encoding.
#[derive(Clone, Debug)]
pub struct Backbone3d<T> {
    kind: Backbone3dKind,
    blocks: Vec<ConvRelu<T>>,
    /// Index of the first block wrapped in a residual connection.
    residual_from: usize,
    head: Conv<T>,
}

impl<T: Real> Backbone3d<T> {
    pub fn new<R: Rng + ?Sized>(kind: Backbone3dKind, num_labels: usize, rng: &mut R) -> Self {
        let spec: &[(usize, usize, usize)] = match kind {
            Backbone3dKind::Dilated => &[(1, 8, 1), (8, 16, 1), (16, 16, 2), (16, 16, 2)],
            Backbone3dKind::Compact => &[(1, 8, 1), (8, 12, 2)],
        };
        let blocks: Vec<_> = spec
            .iter()
            .enumerate()
            .map(|(i, &(cin, cout, d))| {
                ConvRelu::new(&format!("bb3d.block{i}"), cin, cout, ConvGeometry::same_3d(3, d), rng)
            })
            .collect();
        let width = spec.last().expect("blocks").1;
        Backbone3d {
            kind,
            residual_from: match kind {
                Backbone3dKind::Dilated => 2,
                Backbone3dKind::Compact => blocks.len(),
            },
            blocks,
            head: Conv::new("bb3d.head", width, num_labels, ConvGeometry::same_3d(1, 1), rng),
        }
    }

    pub fn kind(&self) -> Backbone3dKind {
        self.kind
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "3D backbone expects a [1, W, H, D] volume, got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }
}

impl<T: Real> Backbone<T> for Backbone3d<T> {
    fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = standardize_depth(x);
        for i in 0..self.blocks.len() {
            let y = self.blocks[i].forward(&h)?;
            if i >= self.residual_from {
                h.add_assign(&y);
            } else {
                h = y;
            }
        }
        self.head.forward(&h)
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let mut h = standardize_depth(x);
        for (i, b) in self.blocks.iter().enumerate() {
            let y = b.infer(&h)?;
            if i >= self.residual_from {
                h.add_assign(&y);
            } else {
                h = y;
            }
        }
        self.head.infer(&h)
    }

    fn backward(&mut self, dy: &Tensor<T>) {
        let mut dh = self.head.backward(dy, true).expect("dx");
        for i in (0..self.blocks.len()).rev() {
            let need_dx = i > 0;
            let dx = self.blocks[i].backward(&dh, need_dx);
            match dx {
                Some(dx) if i >= self.residual_from => dh.add_assign(&dx),
                Some(dx) => dh = dx,
                None => {}
            }
        }
    }

    fn out_channels(&self) -> usize {
        self.head.out_channels()
    }
}

impl<T: Real> HasParams<T> for Backbone3d<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<_> = self.blocks.iter().flat_map(|b| b.params()).collect();
        v.extend(self.head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<_> = self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.head.params_mut());
        v
    }
}

/// Fixed affine map applied to the depth encoding inside the 3D backbone.
pub const DEPTH_MEAN: f64 = 0.25;
pub const DEPTH_STD: f64 = 0.25;

fn standardize_depth<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (m, s) = (T::lit(DEPTH_MEAN), T::lit(1.0 / DEPTH_STD));
    let data = x.data().iter().map(|&v| (v - m) * s).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthEncoding {
    /// Observed surface 1, occluded 0.5, free space and unobserved 0.
    #[default]
    Occupancy,
    /// Truncated distance to the observed surface along the viewing axis,
    /// flipped so the surface is 1 and values decay to 0 at the truncation.
    FlippedTsdf,
}

/// Truncation of the flipped TSDF, in voxels.
pub const TSDF_TRUNCATION: f64 = 3.0;

/// One-channel `[1, W, H, D]` encoding of the depth map. Uses only the depth
/// image and camera geometry: surface voxels are those hit by back-projected
/// pixels; every other voxel is classified by comparing its centre with the
/// depth at the pixel its centre projects to.
pub fn encode_depth_volume<T: Real>(frame: &RgbdFrame, grid: &GridSpec, encoding: DepthEncoding) -> Tensor<T> {
    let [w, h, d] = grid.dims;
    let mut out = Tensor::zeros(&[1, w, h, d]);
    let mut surface = vec![false; grid.num_voxels()];
    for v in backproject_frame(frame, grid).into_iter().filter(|&v| v >= 0) {
        surface[v as usize] = true;
    }
    let data = out.data_mut();
    for v in 0..grid.num_voxels() {
        if surface[v] {
            data[v] = T::one();
            continue;
        }
        let c = grid.center(v);
        let Some(q) = project_to_pixel(&frame.intrinsics, c) else {
            continue;
        };
        let depth = frame.depth[q] as f64;
        if depth <= 0.0 {
            continue;
        }
        data[v] = match encoding {
            DepthEncoding::Occupancy => {
                if c[2] < depth {
                    T::zero()
                } else {
                    T::lit(0.5)
                }
            }
            DepthEncoding::FlippedTsdf => {
                let dist = (c[2] - depth).abs() / grid.voxel_size;
                T::lit((1.0 - dist / TSDF_TRUNCATION).max(0.0))
            }
        };
    }
    out
}

/// Input standardization applied to colour values in `[0, 1]`.
pub const RGB_MEAN: f64 = 0.5;
pub const RGB_STD: f64 = 0.25;

/// Standardized rgb buffer as a `[3, 1, H, W]` tensor.
pub fn rgb_tensor<T: Real>(frame: &RgbdFrame) -> Tensor<T> {
    let (w, h) = (frame.intrinsics.width, frame.intrinsics.height);
    let data = frame.rgb.iter().map(|&v| T::lit((v as f64 - RGB_MEAN) / RGB_STD)).collect();
    Tensor::from_vec(&[3, 1, h, w], data).expect("rgb buffer matches intrinsics")
}
