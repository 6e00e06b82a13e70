//! Label transfer between the image and the voxel grid.
//!
//! A valid depth pixel is back-projected to a camera-frame point and
//! quantized into the grid; the resulting pixel/voxel correspondence drives
//! both the 3D-to-2D projection and the 2D-to-3D reprojection. Labels cross
//! between branches as hard class indices and are lifted back to channels
//! with [`one_hot`].

use crate::error::{Error, Result};
use crate::scene::{CameraIntrinsics, GridSpec, RgbdFrame, SceneVolume, Visibility};
use crate::tensor::{Real, Tensor};

/// Back-projected points are pushed this fraction of a voxel further along
/// the viewing direction, so points lying exactly on a face quantize into
/// the observed surface rather than the free voxel in front of it.
pub const SURFACE_NUDGE: f64 = 1e-3;

pub fn backproject(intr: &CameraIntrinsics, u: usize, v: usize, depth: f64) -> [f64; 3] {
    [
        depth * (u as f64 - intr.cx) / intr.fx,
        depth * (v as f64 - intr.cy) / intr.fy,
        depth,
    ]
}

/// Continuous image coordinates of a camera-frame point (`None` behind the camera).
pub fn project_point(intr: &CameraIntrinsics, p: [f64; 3]) -> Option<(f64, f64)> {
    (p[2] > 0.0).then(|| (intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy))
}

/// Nearest pixel to a camera-frame point, if it falls inside the image.
pub fn project_to_pixel(intr: &CameraIntrinsics, p: [f64; 3]) -> Option<usize> {
    let (u, v) = project_point(intr, p)?;
    let (ui, vi) = (u.round(), v.round());
    (ui >= 0.0 && vi >= 0.0 && ui < intr.width as f64 && vi < intr.height as f64)
        .then(|| vi as usize * intr.width + ui as usize)
}

/// Voxel observed by pixel `(u, v)` at the given depth, if inside the grid.
pub fn pixel_voxel(intr: &CameraIntrinsics, grid: &GridSpec, u: usize, v: usize, depth: f32) -> Option<usize> {
    if depth <= 0.0 {
        return None;
    }
    let z = depth as f64 + SURFACE_NUDGE * grid.voxel_size;
    grid.locate(backproject(intr, u, v, z))
}

/// Voxel hit by every pixel of the frame (`-1` where depth is invalid or the
/// point leaves the grid). Uses depth only.
pub fn backproject_frame(frame: &RgbdFrame, grid: &GridSpec) -> Vec<i32> {
    let intr = &frame.intrinsics;
    (0..intr.num_pixels())
        .map(|q| {
            pixel_voxel(intr, grid, q % intr.width, q / intr.width, frame.depth[q])
                .map_or(-1, |v| v as i32)
        })
        .collect()
}

/// Precomputed pixel/voxel correspondence for one frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionTable {
    /// Per pixel (row-major `H x W`): flat voxel index or -1.
    pub pixel_to_voxel: Vec<i32>,
    /// Per voxel: flat pixel index or -1.
    pub voxel_to_pixel: Vec<i32>,
    pub image_dims: [usize; 2],
    pub grid_dims: [usize; 3],
}

impl ProjectionTable {
    pub fn num_pixels(&self) -> usize {
        self.pixel_to_voxel.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.voxel_to_pixel.len()
    }
}

/// Builds the correspondence table. A pixel maps to the voxel containing its
/// back-projected point when that voxel is a surface voxel; each surface
/// voxel maps back to the pixel, among those that see it, nearest its
/// projected centre (ties to the lowest pixel index).
pub fn build_projection_table(volume: &SceneVolume, frame: &RgbdFrame) -> ProjectionTable {
    let intr = &frame.intrinsics;
    let grid = &volume.grid;
    let mut pixel_to_voxel = backproject_frame(frame, grid);
    for pv in pixel_to_voxel.iter_mut() {
        if *pv >= 0 && volume.visibility[*pv as usize] != Visibility::Surface {
            *pv = -1;
        }
    }
    let mut voxel_to_pixel = vec![-1i32; grid.num_voxels()];
    let mut best = vec![f64::INFINITY; grid.num_voxels()];
    for (q, &v) in pixel_to_voxel.iter().enumerate() {
        if v < 0 {
            continue;
        }
        let v = v as usize;
        let Some((pu, pv)) = project_point(intr, grid.center(v)) else {
            continue;
        };
        let du = (q % intr.width) as f64 - pu;
        let dv = (q / intr.width) as f64 - pv;
        let d2 = du * du + dv * dv;
        if d2 < best[v] {
            best[v] = d2;
            voxel_to_pixel[v] = q as i32;
        }
    }
    ProjectionTable {
        pixel_to_voxel,
        voxel_to_pixel,
        image_dims: [intr.width, intr.height],
        grid_dims: grid.dims,
    }
}

/// 3D-to-2D label projection: each pixel takes its voxel's label, 0 elsewhere.
pub fn project_3d_to_2d(volume_labels: &[u8], table: &ProjectionTable) -> Result<Vec<u8>> {
    if volume_labels.len() != table.num_voxels() {
        return Err(Error::DimensionMismatch(format!(
            "label volume has {} voxels, table expects {}",
            volume_labels.len(),
            table.num_voxels()
        )));
    }
    Ok(table
        .pixel_to_voxel
        .iter()
        .map(|&v| if v >= 0 { volume_labels[v as usize] } else { 0 })
        .collect())
}

/// 2D-to-3D reprojection: surface voxels with a pixel take that pixel's
/// label; every other voxel is 0, so the result is deliberately incomplete.
pub fn reproject_2d_to_3d(label_map: &[u8], table: &ProjectionTable) -> Result<Vec<u8>> {
    if label_map.len() != table.num_pixels() {
        return Err(Error::DimensionMismatch(format!(
            "label map has {} pixels, table expects {}",
            label_map.len(),
            table.num_pixels()
        )));
    }
    Ok(table
        .voxel_to_pixel
        .iter()
        .map(|&q| if q >= 0 { label_map[q as usize] } else { 0 })
        .collect())
}

/// Lifts integer labels to a `[num_classes, s0, s1, s2]` indicator tensor.
pub fn one_hot<T: Real>(labels: &[u8], num_classes: usize, spatial: [usize; 3]) -> Result<Tensor<T>> {
    let n: usize = spatial.iter().product();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for spatial extent {spatial:?}",
            labels.len()
        )));
    }
    let mut t = Tensor::zeros(&[num_classes, spatial[0], spatial[1], spatial[2]]);
    let data = t.data_mut();
    for (p, &l) in labels.iter().enumerate() {
        let l = l as usize;
        if l >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes,
            });
        }
        data[l * n + p] = T::one();
    }
    Ok(t)
}
