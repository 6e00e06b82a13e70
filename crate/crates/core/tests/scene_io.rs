mod common;

use std::fs;
use std::path::Path;

use duoscene::scene::{load_sample, save_sample, Visibility};
use duoscene::Error;

/// Manifest for a 2x1 image over a 2x2x2 grid with two object classes.
fn manifest(grid: [usize; 3]) -> String {
    format!(
        r#"{{"schema_version":1,"scene_id":42,"seed":9,
        "class_names":["empty","wall","chair"],
        "intrinsics":{{"fx":2.0,"fy":2.0,"cx":1.0,"cy":0.0,"width":2,"height":1}},
        "grid":{{"dims":[{},{},{}],"voxel_size":0.5,"origin":[-0.5,-0.5,1.0]}},
        "tensors":[
          {{"name":"rgb","dtype":"f32","shape":[3,1,2]}},
          {{"name":"depth","dtype":"f32","shape":[1,2]}},
          {{"name":"labels","dtype":"u8","shape":[{},{},{}]}},
          {{"name":"visibility","dtype":"u8","shape":[{},{},{}]}}]}}"#,
        grid[0], grid[1], grid[2], grid[0], grid[1], grid[2], grid[0], grid[1], grid[2]
    )
}

fn write_file(path: &Path, manifest: &str, payload: &[u8]) {
    let mut bytes = (manifest.len() as u32).to_le_bytes().to_vec();
    bytes.extend_from_slice(manifest.as_bytes());
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).unwrap();
}

fn golden_payload() -> Vec<u8> {
    let mut p = Vec::new();
    for v in [0.25f32, 0.5, 1.0, 0.0, 0.75, 0.125] {
        p.extend_from_slice(&v.to_le_bytes());
    }
    for d in [1.25f32, 0.0] {
        p.extend_from_slice(&d.to_le_bytes());
    }
    // voxel order (x*2 + y)*2 + z
    p.extend_from_slice(&[0, 1, 0, 2, 0, 0, 1, 2]);
    p.extend_from_slice(&[0, 1, 3, 2, 0, 3, 2, 1]);
    p
}

#[test]
fn hand_written_file_loads_to_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("golden.scene");
    write_file(&path, &manifest([2, 2, 2]), &golden_payload());
    let s = load_sample(&path).unwrap();
    assert_eq!(s.scene_id, 42);
    assert_eq!(s.seed, 9);
    assert_eq!(s.classes.labels(), ["empty", "wall", "chair"]);
    assert_eq!(s.frame.rgb, [0.25, 0.5, 1.0, 0.0, 0.75, 0.125]);
    assert_eq!(s.frame.depth, [1.25, 0.0]);
    assert_eq!(s.volume.labels, [0, 1, 0, 2, 0, 0, 1, 2]);
    use Visibility::*;
    assert_eq!(
        s.volume.visibility,
        [VisibleFree, Surface, OutsideFrustum, Occluded, VisibleFree, OutsideFrustum, Occluded, Surface]
    );
    assert_eq!(s.volume.grid.origin, [-0.5, -0.5, 1.0]);
    assert_eq!(s.frame.intrinsics.cx, 1.0);

    // saving reproduces a file that loads back to the same sample
    let again = dir.path().join("again.scene");
    save_sample(&s, &again).unwrap();
    assert_eq!(load_sample(&again).unwrap(), s);
}

#[test]
fn short_payload_is_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("short.scene");
    // 4x4x4 grid needs 64 label bytes; supply 63 and no visibility
    let mut p = golden_payload()[..32].to_vec();
    p.extend(std::iter::repeat_n(0u8, 63));
    write_file(&path, &manifest([4, 4, 4]), &p);
    assert!(matches!(load_sample(&path), Err(Error::TruncatedPayload { .. })));
}

#[test]
fn distinct_errors_for_each_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.scene");

    write_file(&path, "{not json", &golden_payload());
    assert!(matches!(load_sample(&path), Err(Error::MalformedManifest { .. })));

    let wrong_shape = manifest([2, 2, 2]).replace(r#""shape":[1,2]"#, r#""shape":[2,1]"#);
    write_file(&path, &wrong_shape, &golden_payload());
    assert!(matches!(load_sample(&path), Err(Error::DimensionMismatch(_))));

    let mut bad_vis = golden_payload();
    *bad_vis.last_mut().unwrap() = 9;
    write_file(&path, &manifest([2, 2, 2]), &bad_vis);
    assert!(matches!(load_sample(&path), Err(Error::CorruptPayload { .. })));

    let mut long = golden_payload();
    long.push(0);
    write_file(&path, &manifest([2, 2, 2]), &long);
    assert!(matches!(load_sample(&path), Err(Error::CorruptPayload { .. })));
}

#[test]
fn generated_scenes_round_trip_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    for s in common::corpus(3, 21) {
        let path = dir.path().join(format!("{}.scene", s.scene_id));
        save_sample(&s, &path).unwrap();
        let back = load_sample(&path).unwrap();
        assert_eq!(back, s);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.frame.rgb), bits(&s.frame.rgb));
        assert_eq!(bits(&back.frame.depth), bits(&s.frame.depth));
    }
}
