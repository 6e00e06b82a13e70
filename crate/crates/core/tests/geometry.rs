mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use duoscene::geometry::{backproject, build_projection_table, one_hot, reproject_2d_to_3d, SURFACE_NUDGE};
use duoscene::scene::{CameraIntrinsics, ClassSet, GridSpec, RgbdFrame, SceneVolume, Visibility};
use duoscene::tensor::argmax_channels;

/// A 6x4x6 grid seen by an 8x6 camera, with random depths and random
/// visibility; every voxel is labeled 1 so surface voxels are legal.
fn random_frame_and_volume(seed: u64) -> (RgbdFrame, SceneVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let intrinsics = CameraIntrinsics::centered(8, 6, 5.0);
    let grid = GridSpec::centered([6, 4, 6], 0.2, 0.4);
    let depth = (0..48)
        .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.3f32..1.8) })
        .collect();
    let visibility = (0..144)
        .map(|_| if rng.random_bool(0.7) { Visibility::Surface } else { Visibility::Occluded })
        .collect();
    let frame = RgbdFrame {
        rgb: vec![0.5; 3 * 48],
        depth,
        intrinsics,
    };
    let volume = SceneVolume {
        labels: vec![1; 144],
        visibility,
        grid,
    };
    (frame, volume)
}

/// Loops over every voxel and returns the one whose closed-open box
/// `[origin + i*s, origin + (i+1)*s)` holds `p`.
fn containing_voxel(grid: &GridSpec, p: [f64; 3]) -> Option<usize> {
    (0..grid.num_voxels()).find(|&v| {
        let idx = grid.unflat(v);
        (0..3).all(|a| {
            let lo = grid.origin[a] + idx[a] as f64 * grid.voxel_size;
            let hi = grid.origin[a] + (idx[a] + 1) as f64 * grid.voxel_size;
            p[a] >= lo && p[a] < hi
        })
    })
}

#[test]
fn table_matches_exhaustive_containment_oracle() {
    for seed in 0..20 {
        let (frame, volume) = random_frame_and_volume(seed);
        let table = build_projection_table(&volume, &frame);
        let intr = &frame.intrinsics;
        for q in 0..48 {
            let d = frame.depth[q] as f64;
            let want = if d > 0.0 {
                let p = backproject(intr, q % 8, q / 8, d + SURFACE_NUDGE * volume.grid.voxel_size);
                containing_voxel(&volume.grid, p).filter(|&v| volume.visibility[v] == Visibility::Surface)
            } else {
                None
            };
            assert_eq!(table.pixel_to_voxel[q], want.map_or(-1, |v| v as i32), "seed {seed} pixel {q}");
        }
        for (v, &q) in table.voxel_to_pixel.iter().enumerate() {
            let seen_by: Vec<usize> = (0..48).filter(|&q| table.pixel_to_voxel[q] == v as i32).collect();
            assert_eq!(q >= 0, !seen_by.is_empty());
            if q >= 0 {
                assert!(seen_by.contains(&(q as usize)));
            }
        }
    }
}

#[test]
fn reprojection_matches_scatter_oracle() {
    for seed in 0..20 {
        let (frame, volume) = random_frame_and_volume(seed);
        let table = build_projection_table(&volume, &frame);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let map: Vec<u8> = (0..48).map(|_| rng.random_range(0..12)).collect();
        let mut want = vec![0u8; 144];
        for q in 0..48 {
            let v = table.pixel_to_voxel[q];
            if v >= 0 && table.voxel_to_pixel[v as usize] == q as i32 {
                want[v as usize] = map[q];
            }
        }
        assert_eq!(reproject_2d_to_3d(&map, &table).unwrap(), want);
    }
}

#[test]
fn back_projected_points_stay_within_half_a_voxel_diagonal() {
    let scenes = common::corpus(10, 3);
    for s in &scenes {
        let table = build_projection_table(&s.volume, &s.frame);
        let grid = &s.volume.grid;
        let half_diag = grid.voxel_size * 3f64.sqrt() / 2.0;
        let w = s.frame.intrinsics.width;
        for (q, &v) in table.pixel_to_voxel.iter().enumerate() {
            if v < 0 {
                continue;
            }
            let p = backproject(&s.frame.intrinsics, q % w, q / w, s.frame.depth[q] as f64);
            let c = grid.center(v as usize);
            let dist = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= half_diag + SURFACE_NUDGE * grid.voxel_size, "pixel {q}: {dist}");
        }
    }
}

#[test]
fn generated_scenes_agree_with_ray_marching() {
    // March each pixel ray in 1/100-voxel steps until it enters a labeled voxel;
    // the rendered depth must agree within one voxel and the hit must be surface.
    let classes = ClassSet::default();
    for s in common::corpus(6, 11) {
        let grid = &s.volume.grid;
        let intr = &s.frame.intrinsics;
        let step = grid.voxel_size / 100.0;
        for q in 0..intr.num_pixels() {
            let d = s.frame.depth[q] as f64;
            if d == 0.0 {
                continue;
            }
            let (u, v) = (q % intr.width, q / intr.width);
            let mut z = step;
            let hit = loop {
                let p = backproject(intr, u, v, z);
                if let Some(vox) = grid.locate(p) {
                    if s.volume.labels[vox] != 0 {
                        break Some((z, vox));
                    }
                }
                z += step;
                if z > 20.0 {
                    break None;
                }
            };
            let (z, _) = hit.expect("every ray hits the closed room");
            assert!((z - d).abs() <= grid.voxel_size, "scene {} pixel {q}: marched {z}, rendered {d}", s.scene_id);
            let vox = grid.locate(backproject(intr, u, v, d + SURFACE_NUDGE * grid.voxel_size)).unwrap();
            assert_eq!(s.volume.visibility[vox], Visibility::Surface);
            assert!((1..=classes.num_object_classes()).contains(&(s.volume.labels[vox] as usize)));
        }
        for (vox, vis) in s.volume.visibility.iter().enumerate() {
            if *vis == Visibility::VisibleFree {
                assert_eq!(s.volume.labels[vox], 0);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_hot_partitions_unity_and_inverts_argmax(labels in prop::collection::vec(0u8..12, 1..40)) {
        let n = labels.len();
        let h = one_hot::<f32>(&labels, 12, [1, 1, n]).unwrap();
        for p in 0..n {
            let s: f32 = (0..12).map(|c| h.channel(c)[p]).sum();
            prop_assert_eq!(s, 1.0);
        }
        prop_assert_eq!(argmax_channels(&h), labels);
    }

    #[test]
    fn table_inverse_invariant_on_random_frames(seed in any::<u64>()) {
        let (frame, volume) = random_frame_and_volume(seed);
        let t = build_projection_table(&volume, &frame);
        for (v, &q) in t.voxel_to_pixel.iter().enumerate() {
            if q >= 0 {
                prop_assert_eq!(t.pixel_to_voxel[q as usize], v as i32);
            }
        }
        for &v in t.pixel_to_voxel.iter().filter(|v| **v >= 0) {
            prop_assert_eq!(volume.visibility[v as usize], Visibility::Surface);
        }
    }
}
