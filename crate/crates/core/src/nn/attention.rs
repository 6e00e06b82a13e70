//! Self-attention over the depth axis of a `[C, W, H, D]` volume.
//!
//! Slab `i` is the flattened `C*W*H` vector at depth index `i`. The attention
//! map `X` (D x D) holds `softmax_i(s_i . s_j)` in row `j`, and output slab `j`
//! is `sum_i X[j, i] s_i + s_j`. Scores are max-shifted per row before
//! exponentiation.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

/// Gathers the volume into a `D x n` slab matrix.
fn to_slabs<T: Real>(x: &Tensor<T>) -> (Vec<T>, usize, usize) {
    let d = x.shape()[3];
    let n = x.len() / d;
    let mut s = vec![T::zero(); d * n];
    for (r, chunk) in x.data().chunks_exact(d).enumerate() {
        for (i, &v) in chunk.iter().enumerate() {
            s[i * n + r] = v;
        }
    }
    (s, d, n)
}

fn from_slabs<T: Real>(s: &[T], shape: &[usize]) -> Tensor<T> {
    let d = shape[3];
    let n = s.len() / d;
    let mut data = vec![T::zero(); s.len()];
    for (r, chunk) in data.chunks_exact_mut(d).enumerate() {
        for (i, v) in chunk.iter_mut().enumerate() {
            *v = s[i * n + r];
        }
    }
    Tensor::from_vec(shape, data).expect("shape preserved")
}

/// Row-stochastic depth attention map for `x`.
pub fn attention_map<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    validate(x)?;
    let (s, d, n) = to_slabs(x);
    Ok(softmax_scores(&s, d, n))
}

fn softmax_scores<T: Real>(s: &[T], d: usize, n: usize) -> Vec<T> {
    let mut scores = vec![T::zero(); d * d];
    gemm(false, true, d, d, n, s, s, &mut scores, false);
    // Normalizer accumulated in f64 so the result does not depend on slab order.
    for row in scores.chunks_exact_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).to_f64().unwrap().exp()).collect();
        let z: f64 = e.iter().sum();
        for (v, e) in row.iter_mut().zip(e) {
            *v = T::lit(e / z);
        }
    }
    scores
}

fn validate<T: Real>(x: &Tensor<T>) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[3] == 0 {
        return Err(Error::ShapeMismatch(format!(
            "depth attention expects a non-empty [C, W, H, D] volume, got {:?}",
            x.shape()
        )));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("depth attention input".into()));
    }
    Ok(())
}

/// Forward pass; returns the output volume and the attention map.
pub fn depth_attention<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    validate(x)?;
    let (s, d, n) = to_slabs(x);
    let map = softmax_scores(&s, d, n);
    // Per-element f64 accumulation: permuting the slabs permutes the output exactly.
    let mut out = vec![T::zero(); d * n];
    let mut acc = vec![0.0f64; n];
    for j in 0..d {
        acc.iter_mut().zip(&s[j * n..(j + 1) * n]).for_each(|(a, v)| *a = v.to_f64().unwrap());
        for i in 0..d {
            let w = map[j * d + i].to_f64().unwrap();
            for (a, v) in acc.iter_mut().zip(&s[i * n..(i + 1) * n]) {
                *a += w * v.to_f64().unwrap();
            }
        }
        out[j * n..(j + 1) * n].iter_mut().zip(&acc).for_each(|(o, &a)| *o = T::lit(a));
    }
    Ok((from_slabs(&out, x.shape()), map))
}

/// Gradient of the attention output w.r.t. its input.
pub fn depth_attention_backward<T: Real>(x: &Tensor<T>, map: &[T], dy: &Tensor<T>) -> Tensor<T> {
    let (s, d, n) = to_slabs(x);
    let (g, _, _) = to_slabs(dy);
    // dX = G S^T
    let mut dmap = vec![T::zero(); d * d];
    gemm(false, true, d, d, n, &g, &s, &mut dmap, false);
    // Softmax backward, row by row.
    let mut dscore = vec![T::zero(); d * d];
    for j in 0..d {
        let row = &map[j * d..(j + 1) * d];
        let drow = &dmap[j * d..(j + 1) * d];
        let dot: T = row.iter().zip(drow).map(|(&a, &b)| a * b).sum();
        for i in 0..d {
            dscore[j * d + i] = row[i] * (drow[i] - dot);
        }
    }
    // Scores are symmetric in the slabs: dS += (dScore + dScore^T) S.
    let mut sym = vec![T::zero(); d * d];
    for j in 0..d {
        for i in 0..d {
            sym[j * d + i] = dscore[j * d + i] + dscore[i * d + j];
        }
    }
    let mut ds = g.clone();
    gemm(true, false, d, n, d, map, &g, &mut ds, true);
    gemm(false, false, d, n, d, &sym, &s, &mut ds, true);
    from_slabs(&ds, x.shape())
}

/// Stateful wrapper caching the forward input and map.
#[derive(Clone, Debug, Default)]
pub struct DepthAttention<T> {
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Real> DepthAttention<T> {
    pub fn new() -> Self {
        DepthAttention { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, map) = depth_attention(x)?;
        self.cache = Some((x.clone(), map));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (x, map) = self.cache.take().expect("DepthAttention::backward without forward");
        depth_attention_backward(&x, &map, dy)
    }
}
