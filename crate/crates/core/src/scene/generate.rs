//! Deterministic synthetic rooms with exact voxel ground truth.
//!
//! A closed room (floor, ceiling, back wall, two side walls) is filled with a
//! handful of voxel-aligned boxes. Depth is rendered by intersecting each
//! pixel ray with the room and box slabs; the surface voxel of each pixel is
//! the one containing its back-projected depth point, so depth, surface
//! labels and the projection tables can never disagree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CameraIntrinsics, ClassSet, GridSpec, RgbdFrame, SceneSample, SceneVolume, Visibility};
use crate::error::{Error, Result};
use crate::geometry::{pixel_voxel, project_point};

/// Smallest grid that still fits walls plus some free interior.
pub const MIN_GRID_DIMS: [usize; 3] = [6, 6, 6];

pub const DEFAULT_GRID_DIMS: [usize; 3] = [20, 12, 20];

const CEILING: u8 = 1;
const FLOOR: u8 = 2;
const WALL: u8 = 3;
/// First label used for furniture boxes; lower labels are room structure.
const FIRST_BOX_CLASS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub voxel_size: f64,
    /// Distance from the camera to the front face of the grid.
    pub near: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub rgb_noise_std: f64,
    /// Fraction of depth pixels zeroed to mimic sensor holes.
    pub depth_dropout: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            voxel_size: 0.15,
            near: 0.3,
            min_boxes: 1,
            max_boxes: 6,
            rgb_noise_std: 0.02,
            depth_dropout: 0.0,
        }
    }
}

/// Half-open voxel box `[lo, hi)`.
#[derive(Clone, Copy, Debug)]
struct VoxelBox {
    lo: [usize; 3],
    hi: [usize; 3],
}

impl VoxelBox {
    fn overlaps(&self, other: &VoxelBox) -> bool {
        (0..3).all(|a| self.lo[a] < other.hi[a] && other.lo[a] < self.hi[a])
    }

    fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.lo[0]..self.hi[0]).flat_map(move |x| {
            (self.lo[1]..self.hi[1]).flat_map(move |y| (self.lo[2]..self.hi[2]).map(move |z| [x, y, z]))
        })
    }

    /// Entry distance of the ray `t * dir` (origin at the camera), if hit.
    fn ray_entry(&self, grid: &GridSpec, dir: [f64; 3]) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let lo = grid.origin[a] + self.lo[a] as f64 * grid.voxel_size;
            let hi = grid.origin[a] + self.hi[a] as f64 * grid.voxel_size;
            if dir[a] == 0.0 {
                if !(lo <= 0.0 && 0.0 <= hi) {
                    return None;
                }
                continue;
            }
            let (a0, a1) = (lo / dir[a], hi / dir[a]);
            t0 = t0.max(a0.min(a1));
            t1 = t1.min(a0.max(a1));
        }
        (t0 <= t1 && t0 > 0.0).then_some(t0)
    }
}

fn base_color(label: u8) -> [f32; 3] {
    match label {
        0 => [0.0, 0.0, 0.0],
        CEILING => [0.85, 0.85, 0.80],
        FLOOR => [0.55, 0.40, 0.25],
        WALL => [0.75, 0.70, 0.60],
        l => match (l as usize - FIRST_BOX_CLASS) % 8 {
            0 => [0.55, 0.75, 0.95],
            // chair and table share a colour, as do tvs and furniture
            1 | 4 => [0.60, 0.30, 0.15],
            2 => [0.90, 0.60, 0.70],
            3 => [0.20, 0.50, 0.30],
            5 | 6 => [0.15, 0.15, 0.18],
            _ => [0.95, 0.85, 0.20],
        },
    }
}

/// Maps a structural label onto `1..=k` when there are fewer than three object classes.
fn structural(label: u8, k: usize) -> u8 {
    ((label as usize - 1) % k + 1) as u8
}

struct Room {
    dims: [usize; 3],
    /// Side wall thickness along x, ceiling/floor thickness along y.
    side: usize,
    slab: usize,
    /// First z index of the back wall.
    back: usize,
}

impl Room {
    fn interior_lo(&self) -> [usize; 3] {
        [self.side, self.slab, 0]
    }

    fn interior_hi(&self) -> [usize; 3] {
        [self.dims[0] - self.side, self.dims[1] - self.slab, self.back]
    }

    fn slabs(&self) -> Vec<(VoxelBox, u8)> {
        let [w, h, _] = self.dims;
        let back_hi = (self.back + self.side).min(self.dims[2]);
        vec![
            (VoxelBox { lo: [0, 0, 0], hi: [w, self.slab, back_hi] }, CEILING),
            (VoxelBox { lo: [0, h - self.slab, 0], hi: [w, h, back_hi] }, FLOOR),
            (VoxelBox { lo: [0, 0, self.back], hi: [w, h, back_hi] }, WALL),
            (VoxelBox { lo: [0, 0, 0], hi: [self.side, h, back_hi] }, WALL),
            (VoxelBox { lo: [w - self.side, 0, 0], hi: [w, h, back_hi] }, WALL),
        ]
    }
}

/// Extent `(w, h, d)` along `(x, y, z)` and placement for one box class.
enum Placement {
    Floor,
    AgainstBackWall,
    Elevated,
    InBackWall,
}

fn template<R: Rng>(class: usize, rng: &mut R) -> ([usize; 3], Placement) {
    let mut r = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    match (class - FIRST_BOX_CLASS) % 8 {
        0 => ([r(3, 5), r(2, 4), 1], Placement::InBackWall),
        1 => ([2, r(3, 4), 2], Placement::Floor),
        2 => ([r(4, 5), r(1, 2), r(5, 6)], Placement::Floor),
        3 => ([r(5, 6), r(2, 3), 2], Placement::AgainstBackWall),
        4 => ([r(3, 4), 2, 3], Placement::Floor),
        5 => ([r(2, 3), 2, 1], Placement::Elevated),
        6 => ([r(3, 4), r(4, 6), 2], Placement::AgainstBackWall),
        _ => ([1, r(1, 2), 1], Placement::Floor),
    }
}

const PLACEMENT_ATTEMPTS: usize = 24;

fn place_box<R: Rng>(room: &Room, class: usize, placed: &[VoxelBox], rng: &mut R) -> Option<VoxelBox> {
    let (size, placement) = template(class, rng);
    let ilo = room.interior_lo();
    let ihi = room.interior_hi();
    let span = |a: usize| ihi[a] - ilo[a];
    let size = [0, 1, 2].map(|a| size[a].clamp(1, span(a)));
    // keep furniture away from the camera so it does not fill the view
    let z_min = (room.dims[2] / 5).min(ihi[2] - size[2]);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let x0 = rng.random_range(ilo[0]..=ihi[0] - size[0]);
        let (y0, z0) = match placement {
            Placement::Floor => (ihi[1] - size[1], rng.random_range(z_min..=ihi[2] - size[2])),
            Placement::AgainstBackWall => (ihi[1] - size[1], ihi[2] - size[2]),
            Placement::Elevated => {
                let top = ihi[1] - size[1];
                (rng.random_range(ilo[1]..=top.max(ilo[1])), ihi[2] - size[2])
            }
            Placement::InBackWall => {
                let top = ihi[1] - size[1];
                (rng.random_range(ilo[1]..=top.max(ilo[1])), room.back)
            }
        };
        let b = VoxelBox {
            lo: [x0, y0, z0],
            hi: [x0 + size[0], y0 + size[1], z0 + size[2]],
        };
        if b.hi[2] <= room.dims[2] && !placed.iter().any(|p| p.overlaps(&b)) {
            return Some(b);
        }
    }
    None
}

/// Generates a scene with the default generator settings.
pub fn generate_scene(
    seed: u64,
    classes: &ClassSet,
    grid_dims: [usize; 3],
    intrinsics: CameraIntrinsics,
) -> Result<SceneSample> {
    generate_scene_with(seed, classes, grid_dims, intrinsics, &GeneratorConfig::default())
}

pub fn generate_scene_with(
    seed: u64,
    classes: &ClassSet,
    grid_dims: [usize; 3],
    intrinsics: CameraIntrinsics,
    cfg: &GeneratorConfig,
) -> Result<SceneSample> {
    if (0..3).any(|a| grid_dims[a] < MIN_GRID_DIMS[a]) {
        return Err(Error::DegenerateScene(format!(
            "grid {grid_dims:?} is smaller than the minimum room {MIN_GRID_DIMS:?}"
        )));
    }
    intrinsics.validate()?;
    if cfg.min_boxes > cfg.max_boxes || !(0.0..1.0).contains(&cfg.depth_dropout) || cfg.voxel_size <= 0.0 {
        return Err(Error::Config(format!("invalid generator config {cfg:?}")));
    }
    let k = classes.num_object_classes();
    let grid = GridSpec::centered(grid_dims, cfg.voxel_size, cfg.near);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let thick = |n: usize| if n >= 10 { 2 } else { 1 };
    let side = thick(grid_dims[0]);
    let back_inset = rng.random_range(0..=grid_dims[2] / 5);
    let room = Room {
        dims: grid_dims,
        side,
        slab: 1,
        back: grid_dims[2] - thick(grid_dims[2]) - back_inset,
    };

    let mut labels = vec![0u8; grid.num_voxels()];
    let mut solids = Vec::new();
    for (b, label) in room.slabs() {
        let label = structural(label, k);
        for [x, y, z] in b.voxels() {
            labels[grid.flat(x, y, z)] = label;
        }
        solids.push(b);
    }

    let n_boxes = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut placed = Vec::new();
    for _ in 0..n_boxes {
        let class = if k >= FIRST_BOX_CLASS {
            rng.random_range(FIRST_BOX_CLASS..=k)
        } else {
            rng.random_range(1..=k)
        };
        let template_class = if k >= FIRST_BOX_CLASS { class } else { FIRST_BOX_CLASS + 7 };
        if let Some(b) = place_box(&room, template_class, &placed, &mut rng) {
            for [x, y, z] in b.voxels() {
                labels[grid.flat(x, y, z)] = class as u8;
            }
            placed.push(b);
            solids.push(b);
        }
    }

    let first_hit = |dir: [f64; 3]| {
        solids
            .iter()
            .filter_map(|b| b.ray_entry(&grid, dir))
            .fold(f64::INFINITY, f64::min)
    };

    let (w, h) = (intrinsics.width, intrinsics.height);
    let mut depth = vec![0f32; w * h];
    let mut visibility = vec![Visibility::VisibleFree; grid.num_voxels()];
    let mut surface = vec![false; grid.num_voxels()];
    let mut pixel_label = vec![0u8; w * h];
    for v in 0..h {
        for u in 0..w {
            let q = v * w + u;
            let dir = [
                (u as f64 - intrinsics.cx) / intrinsics.fx,
                (v as f64 - intrinsics.cy) / intrinsics.fy,
                1.0,
            ];
            let t = first_hit(dir);
            if !t.is_finite() {
                continue;
            }
            let d = t as f32;
            // grazing hits on box edges can quantize into empty space; drop them
            match pixel_voxel(&intrinsics, &grid, u, v, d) {
                Some(vox) if labels[vox] != 0 => {
                    depth[q] = d;
                    surface[vox] = true;
                    pixel_label[q] = labels[vox];
                }
                _ => {}
            }
        }
    }

    for vox in 0..grid.num_voxels() {
        visibility[vox] = if surface[vox] {
            Visibility::Surface
        } else {
            let c = grid.center(vox);
            match project_point(&intrinsics, c) {
                Some((pu, pv))
                    if (-0.5..w as f64 - 0.5).contains(&pu) && (-0.5..h as f64 - 0.5).contains(&pv) =>
                {
                    if c[2] < first_hit([c[0] / c[2], c[1] / c[2], 1.0]) {
                        Visibility::VisibleFree
                    } else {
                        Visibility::Occluded
                    }
                }
                _ => Visibility::OutsideFrustum,
            }
        };
    }

    let noise = Normal::new(0.0f64, cfg.rgb_noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("rgb noise: {e}")))?;
    let mut rgb = vec![0f32; 3 * w * h];
    for ch in 0..3 {
        for q in 0..w * h {
            let base = base_color(pixel_label[q])[ch] as f64;
            rgb[ch * w * h + q] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32;
        }
    }

    if cfg.depth_dropout > 0.0 {
        for d in depth.iter_mut() {
            if rng.random::<f64>() < cfg.depth_dropout {
                *d = 0.0;
            }
        }
    }

    Ok(SceneSample {
        frame: RgbdFrame {
            rgb,
            depth,
            intrinsics,
        },
        volume: SceneVolume {
            labels,
            visibility,
            grid,
        },
        classes: classes.clone(),
        scene_id: 0,
        seed,
    })
}

/// Seed of the `index`-th scene of a corpus (SplitMix64 of the pair), so
/// corpora with different base seeds do not share scenes.
pub fn scene_seed(base_seed: u64, index: u64) -> u64 {
    let mut z = base_seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` scenes with ids `0..n` and per-scene seeds from [`scene_seed`].
pub fn generate_corpus(
    n: usize,
    base_seed: u64,
    classes: &ClassSet,
    grid_dims: [usize; 3],
    intrinsics: CameraIntrinsics,
    cfg: &GeneratorConfig,
) -> Result<Vec<SceneSample>> {
    (0..n as u64)
        .map(|i| {
            let mut s = generate_scene_with(scene_seed(base_seed, i), classes, grid_dims, intrinsics, cfg)?;
            s.scene_id = i;
            Ok(s)
        })
        .collect()
}
