//! Straight-line reference implementations used as test oracles, plus
//! small fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;

use duoscene::geometry::ProjectionTable;
use duoscene::model::PreparedSample;
use duoscene::nn::{DeformConv, HasParams};
use duoscene::scene::{generate_corpus, CameraIntrinsics, ClassSet, GeneratorConfig, SceneSample};
use duoscene::Tensor;

pub fn at(x: &Tensor<f64>, c: usize, p: [usize; 3]) -> f64 {
    let [_, s1, s2] = x.spatial();
    x.channel(c)[(p[0] * s1 + p[1]) * s2 + p[2]]
}

/// Direct nested-loop convolution with zero padding.
pub fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, dil: [usize; 3], pad: [usize; 3]) -> Tensor<f64> {
    let (o_n, c_n) = (w.shape()[0], w.shape()[1]);
    let k = [w.shape()[2], w.shape()[3], w.shape()[4]];
    let dims = x.spatial();
    let out_dims: [usize; 3] = [0, 1, 2].map(|a| dims[a] + 2 * pad[a] - dil[a] * (k[a] - 1));
    let mut y = Tensor::zeros(&[o_n, out_dims[0], out_dims[1], out_dims[2]]);
    for o in 0..o_n {
        for p0 in 0..out_dims[0] {
            for p1 in 0..out_dims[1] {
                for p2 in 0..out_dims[2] {
                    let mut acc = b.data()[o];
                    for c in 0..c_n {
                        for a in 0..k[0] {
                            for bb in 0..k[1] {
                                for cc in 0..k[2] {
                                    let q = [
                                        p0 as isize + (a * dil[0]) as isize - pad[0] as isize,
                                        p1 as isize + (bb * dil[1]) as isize - pad[1] as isize,
                                        p2 as isize + (cc * dil[2]) as isize - pad[2] as isize,
                                    ];
                                    if (0..3).any(|i| q[i] < 0 || q[i] >= dims[i] as isize) {
                                        continue;
                                    }
                                    let wi = (((o * c_n + c) * k[0] + a) * k[1] + bb) * k[2] + cc;
                                    acc += w.data()[wi] * at(x, c, q.map(|v| v as usize));
                                }
                            }
                        }
                    }
                    let i = (p0 * out_dims[1] + p1) * out_dims[2] + p2;
                    y.data_mut()[o * out_dims.iter().product::<usize>() + i] = acc;
                }
            }
        }
    }
    y
}

/// Value of channel `c` at a fractional location: product of hat weights
/// `max(0, 1 - |q - i|)` over every integer grid point, zero outside.
pub fn interpolate(x: &Tensor<f64>, c: usize, q: [f64; 3]) -> f64 {
    let dims = x.spatial();
    let mut acc = 0.0;
    for i0 in 0..dims[0] {
        let w0 = (1.0 - (q[0] - i0 as f64).abs()).max(0.0);
        if w0 == 0.0 {
            continue;
        }
        for i1 in 0..dims[1] {
            let w1 = (1.0 - (q[1] - i1 as f64).abs()).max(0.0);
            if w1 == 0.0 {
                continue;
            }
            for i2 in 0..dims[2] {
                let w2 = (1.0 - (q[2] - i2 as f64).abs()).max(0.0);
                acc += w0 * w1 * w2 * at(x, c, [i0, i1, i2]);
            }
        }
    }
    acc
}

/// Deformable convolution from first principles: offsets from the oracle
/// convolution, every tap read by [`interpolate`].
pub fn deform_oracle(x: &Tensor<f64>, layer: &DeformConv<f64>) -> Tensor<f64> {
    let g = layer.geom;
    let offsets = conv_oracle(x, &layer.offset.weight.value, &layer.offset.bias.value, g.dilation, g.padding);
    let axes: &[usize] = if layer.rank == 2 { &[1, 2] } else { &[0, 1, 2] };
    let w = &layer.weight.value;
    let (o_n, c_n) = (w.shape()[0], w.shape()[1]);
    let k = g.kernel;
    let dims = x.spatial();
    let n = x.spatial_len();
    let mut y = Tensor::zeros(&[o_n, dims[0], dims[1], dims[2]]);
    for p in 0..n {
        let pos = [p / (dims[1] * dims[2]), (p / dims[2]) % dims[1], p % dims[2]];
        let mut tap = 0;
        for a in 0..k[0] {
            for b in 0..k[1] {
                for cc in 0..k[2] {
                    let kk = [a, b, cc];
                    let mut q = [0.0; 3];
                    for ax in 0..3 {
                        q[ax] = pos[ax] as f64 + (kk[ax] * g.dilation[ax]) as f64 - g.padding[ax] as f64;
                    }
                    for (j, &ax) in axes.iter().enumerate() {
                        q[ax] += offsets.channel(tap * layer.rank + j)[p];
                    }
                    for c in 0..c_n {
                        let v = interpolate(x, c, q);
                        for o in 0..o_n {
                            let wi = (((o * c_n + c) * k[0] + a) * k[1] + b) * k[2] + cc;
                            y.data_mut()[o * n + p] += w.data()[wi] * v;
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
    for o in 0..o_n {
        let bias = layer.bias.value.data()[o];
        y.channel_mut(o).iter_mut().for_each(|v| *v += bias);
    }
    y
}

/// Depth attention by explicit double loop over (j, i).
pub fn attention_oracle(x: &Tensor<f64>) -> (Tensor<f64>, Vec<f64>) {
    let [c_n, w, h, d] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let slab = |i: usize| -> Vec<f64> {
        let mut s = Vec::with_capacity(c_n * w * h);
        for c in 0..c_n {
            for a in 0..w {
                for b in 0..h {
                    s.push(at(x, c, [a, b, i]));
                }
            }
        }
        s
    };
    let slabs: Vec<Vec<f64>> = (0..d).map(slab).collect();
    let mut map = vec![0.0; d * d];
    for j in 0..d {
        let scores: Vec<f64> = (0..d)
            .map(|i| slabs[i].iter().zip(&slabs[j]).map(|(a, b)| a * b).sum())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
        for i in 0..d {
            map[j * d + i] = (scores[i] - m).exp() / z;
        }
    }
    let mut y = Tensor::zeros(x.shape());
    for j in 0..d {
        let mut out = slabs[j].clone();
        for i in 0..d {
            for (o, s) in out.iter_mut().zip(&slabs[i]) {
                *o += map[j * d + i] * s;
            }
        }
        let mut r = 0;
        for c in 0..c_n {
            for a in 0..w {
                for b in 0..h {
                    let idx = c * w * h * d + (a * h + b) * d + j;
                    y.data_mut()[idx] = out[r];
                    r += 1;
                }
            }
        }
    }
    (y, map)
}

/// Masked mean cross-entropy by log-sum-exp at each included position.
pub fn ce_oracle(logits: &Tensor<f64>, labels: &[u8], mask: &[bool]) -> f64 {
    let n = logits.spatial_len();
    let mut total = 0.0;
    let mut count = 0;
    for p in 0..n {
        if !mask[p] {
            continue;
        }
        let z: Vec<f64> = (0..logits.channels()).map(|c| logits.channel(c)[p]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[labels[p] as usize];
        count += 1;
    }
    total / count as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn corpus(n: usize, seed: u64) -> Vec<SceneSample> {
    generate_corpus(
        n,
        seed,
        &ClassSet::default(),
        duoscene::scene::DEFAULT_GRID_DIMS,
        CameraIntrinsics::default(),
        &GeneratorConfig::default(),
    )
    .unwrap()
}

/// A small grid and image for tests that train.
pub fn small_corpus(n: usize, seed: u64) -> Vec<SceneSample> {
    generate_corpus(
        n,
        seed,
        &ClassSet::default(),
        [10, 8, 10],
        CameraIntrinsics::centered(16, 12, 10.0),
        &GeneratorConfig::default(),
    )
    .unwrap()
}

pub fn prepared(samples: &[SceneSample]) -> Vec<PreparedSample> {
    PreparedSample::prepare_all(samples, Default::default()).unwrap()
}

pub fn flat_params<M: HasParams<f64>>(m: &M) -> Vec<f64> {
    m.params().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

pub fn flat_grads<M: HasParams<f64>>(m: &M) -> Vec<f64> {
    m.params().iter().flat_map(|p| p.grad.data().to_vec()).collect()
}

pub fn set_flat_params<M: HasParams<f64>>(m: &mut M, values: &[f64]) {
    let mut rest = values;
    for p in m.params_mut() {
        let n = p.numel();
        p.value.data_mut().copy_from_slice(&rest[..n]);
        rest = &rest[n..];
    }
    assert!(rest.is_empty(), "parameter vector length");
}

/// Randomizes every parameter (zero-initialized offsets and fuse convs included).
pub fn randomize_params<M: HasParams<f64>, R: Rng>(m: &mut M, std: f64, rng: &mut R) {
    for p in m.params_mut() {
        p.value = Tensor::normal(p.value.shape(), std, rng);
    }
}

/// A random one-to-one correspondence between `n` pixels and `n` voxels.
pub fn random_table<R: Rng>(image_dims: [usize; 2], grid_dims: [usize; 3], n: usize, rng: &mut R) -> ProjectionTable {
    let pixels = image_dims[0] * image_dims[1];
    let voxels: usize = grid_dims.iter().product();
    let mut ps: Vec<usize> = (0..pixels).collect();
    let mut vs: Vec<usize> = (0..voxels).collect();
    ps.shuffle(rng);
    vs.shuffle(rng);
    let mut table = ProjectionTable {
        pixel_to_voxel: vec![-1; pixels],
        voxel_to_pixel: vec![-1; voxels],
        image_dims,
        grid_dims,
    };
    for (&p, &v) in ps.iter().zip(&vs).take(n) {
        table.pixel_to_voxel[p] = v as i32;
        table.voxel_to_pixel[v] = p as i32;
    }
    table
}

pub fn random_labels<R: Rng>(n: usize, num_labels: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..num_labels) as u8).collect()
}

/// Small offset-predictor weights and half-integer offset biases, so every
/// deformable sample point sits mid-cell, away from the kinks of bilinear
/// interpolation at integer coordinates. Finite differences are only valid there.
pub fn mid_cell_offsets<M: HasParams<f64>, R: Rng>(m: &mut M, rng: &mut R) {
    for p in m.params_mut() {
        if p.name.ends_with(".offset.weight") {
            p.value = Tensor::normal(p.value.shape(), 0.02, rng);
        } else if p.name.ends_with(".offset.bias") {
            for b in p.value.data_mut() {
                *b = rng.random_range(-2..2) as f64 + 0.5;
            }
        }
    }
}
