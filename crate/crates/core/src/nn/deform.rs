//! Deformable convolution (v1) in two and three spatial dimensions.
//!
//! A plain convolution predicts, for every output position and kernel tap, a
//! displacement of the sampling location. Inputs are then read at the
//! displaced (fractional) locations by bilinear (rank 2) or trilinear
//! (rank 3) interpolation; reads outside the grid contribute zero.
//!
//! Offset channel layout: channel `tap * rank + j`, where `j` runs over the
//! active spatial axes in order (`[1, 2]` for rank 2, `[0, 1, 2]` for rank 3).

use rand::Rng;

use super::conv::{apply_columns, columns_backward, Conv, ConvGeometry};
use super::param::{HasParams, Param};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Deformable convolution layer: rank, geometry, main weight and bias, and
/// the offset predictor.
#[derive(Clone, Debug)]
pub struct DeformConv<T> {
    pub rank: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub offset: Conv<T>,
    pub geom: ConvGeometry,
    cache: Option<DeformCache<T>>,
}

pub type DeformableConvSpec<T> = DeformConv<T>;

#[derive(Clone, Debug)]
struct DeformCache<T> {
    input: Tensor<T>,
    offsets: Tensor<T>,
    cols: Vec<T>,
}

/// Interpolation support along one axis: up to two (index, weight, d weight / d pos).
#[derive(Clone, Copy)]
struct AxisSupport<T> {
    n: usize,
    idx: [usize; 2],
    w: [T; 2],
    dw: [T; 2],
}

impl<T: Real> AxisSupport<T> {
    fn integer(i: isize, len: usize) -> Self {
        let mut s = AxisSupport {
            n: 0,
            idx: [0; 2],
            w: [T::zero(); 2],
            dw: [T::zero(); 2],
        };
        if i >= 0 && (i as usize) < len {
            s.n = 1;
            s.idx[0] = i as usize;
            s.w[0] = T::one();
        }
        s
    }

    fn fractional(q: T, len: usize) -> Self {
        let fl = q.floor();
        let f = q - fl;
        let i0 = fl.to_isize().unwrap_or(isize::MIN / 2);
        let mut s = AxisSupport {
            n: 0,
            idx: [0; 2],
            w: [T::zero(); 2],
            dw: [T::zero(); 2],
        };
        for (i, w, dw) in [(i0, T::one() - f, -T::one()), (i0 + 1, f, T::one())] {
            if i >= 0 && (i as usize) < len {
                s.idx[s.n] = i as usize;
                s.w[s.n] = w;
                s.dw[s.n] = dw;
                s.n += 1;
            }
        }
        s
    }
}

fn active_axes(rank: usize) -> &'static [usize] {
    if rank == 2 {
        &[1, 2]
    } else {
        &[0, 1, 2]
    }
}

/// Per (tap, position) interpolation supports along the three axes.
fn supports<T: Real>(
    offsets: &Tensor<T>,
    rank: usize,
    dims: [usize; 3],
    k: usize,
    tap: [isize; 3],
    p: usize,
) -> [AxisSupport<T>; 3] {
    let o2 = p % dims[2];
    let o1 = (p / dims[2]) % dims[1];
    let o0 = p / (dims[2] * dims[1]);
    let base = [o0 as isize + tap[0], o1 as isize + tap[1], o2 as isize + tap[2]];
    let mut s = [0, 1, 2].map(|a| AxisSupport::integer(base[a], dims[a]));
    let n = offsets.spatial_len();
    for (j, &a) in active_axes(rank).iter().enumerate() {
        let d = offsets.data()[(k * rank + j) * n + p];
        s[a] = AxisSupport::fractional(T::lit(base[a] as f64) + d, dims[a]);
    }
    s
}

/// Builds the deformable column matrix `(C * taps) x P`.
fn sample_columns<T: Real>(x: &Tensor<T>, offsets: &Tensor<T>, geom: &ConvGeometry, rank: usize) -> Vec<T> {
    let c = x.channels();
    let dims = x.spatial();
    let p_len = x.spatial_len();
    let taps = geom.tap_offsets();
    let mut cols = vec![T::zero(); c * taps.len() * p_len];
    let xd = x.data();
    let (s1, s0) = (dims[2], dims[1] * dims[2]);
    for (k, tap) in taps.iter().enumerate() {
        for p in 0..p_len {
            let [a, b, d] = supports(offsets, rank, dims, k, *tap, p);
            // Flattened corners: (linear index, weight).
            let mut corners = [(0usize, T::zero()); 8];
            let mut nc = 0;
            for i in 0..a.n {
                for j in 0..b.n {
                    for l in 0..d.n {
                        corners[nc] = (a.idx[i] * s0 + b.idx[j] * s1 + d.idx[l], a.w[i] * b.w[j] * d.w[l]);
                        nc += 1;
                    }
                }
            }
            for ch in 0..c {
                let src = &xd[ch * p_len..(ch + 1) * p_len];
                let mut acc = T::zero();
                for &(idx, w) in &corners[..nc] {
                    acc += src[idx] * w;
                }
                cols[(ch * taps.len() + k) * p_len + p] = acc;
            }
        }
    }
    cols
}

/// Gradient of the sampled columns w.r.t. the input and the offsets.
fn sample_backward<T: Real>(
    x: &Tensor<T>,
    offsets: &Tensor<T>,
    geom: &ConvGeometry,
    rank: usize,
    dcols: &[T],
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>) {
    let c = x.channels();
    let dims = x.spatial();
    let p_len = x.spatial_len();
    let taps = geom.tap_offsets();
    let xd = x.data();
    let (s1, s0) = (dims[2], dims[1] * dims[2]);
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut doff = Tensor::zeros(offsets.shape());
    let axes = active_axes(rank);
    for (k, tap) in taps.iter().enumerate() {
        for p in 0..p_len {
            let sup = supports(offsets, rank, dims, k, *tap, p);
            let [a, b, d] = sup;
            // For each corner: index, weight and d weight / d q along each axis.
            let mut corners = [(0usize, T::zero(), [T::zero(); 3]); 8];
            let mut nc = 0;
            for i in 0..a.n {
                for j in 0..b.n {
                    for l in 0..d.n {
                        let w = a.w[i] * b.w[j] * d.w[l];
                        let dq = [
                            a.dw[i] * b.w[j] * d.w[l],
                            a.w[i] * b.dw[j] * d.w[l],
                            a.w[i] * b.w[j] * d.dw[l],
                        ];
                        corners[nc] = (a.idx[i] * s0 + b.idx[j] * s1 + d.idx[l], w, dq);
                        nc += 1;
                    }
                }
            }
            let mut dq_acc = [T::zero(); 3];
            for ch in 0..c {
                let g = dcols[(ch * taps.len() + k) * p_len + p];
                if g == T::zero() {
                    continue;
                }
                let src = &xd[ch * p_len..(ch + 1) * p_len];
                for &(idx, _, dq) in &corners[..nc] {
                    let v = src[idx] * g;
                    for ax in axes {
                        dq_acc[*ax] += v * dq[*ax];
                    }
                }
                if let Some(dx) = dx.as_mut() {
                    let dst = dx.channel_mut(ch);
                    for &(idx, w, _) in &corners[..nc] {
                        dst[idx] += g * w;
                    }
                }
            }
            let n = doff.spatial_len();
            for (j, &ax) in axes.iter().enumerate() {
                doff.data_mut()[(k * rank + j) * n + p] += dq_acc[ax];
            }
        }
    }
    (dx, doff)
}

impl<T: Real> DeformConv<T> {
    /// Main weights He-initialized; the offset predictor starts at exactly
    /// zero so the layer initially behaves as a standard convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        rank: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        let geom = match rank {
            2 => ConvGeometry::same_2d(kernel, dilation),
            3 => ConvGeometry::same_3d(kernel, dilation),
            _ => panic!("deformable convolution rank must be 2 or 3, got {rank}"),
        };
        let [k0, k1, k2] = geom.kernel;
        let weight = Tensor::he_normal(&[out_channels, in_channels, k0, k1, k2], in_channels * geom.taps(), rng);
        let offset = Conv::zeros(&format!("{name}.offset"), in_channels, rank * geom.taps(), geom);
        DeformConv {
            rank,
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            offset,
            geom,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn offset_channels(&self) -> usize {
        self.rank * self.geom.taps()
    }

    fn validate(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.channels() != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "deformable conv expects {} input channels, got shape {:?}",
                self.in_channels(),
                x.shape()
            )));
        }
        if self.geom.output_dims(x.spatial())? != x.spatial() {
            return Err(Error::ShapeMismatch("deformable conv requires same padding".into()));
        }
        if self.rank == 2 && self.geom.kernel[0] != 1 {
            return Err(Error::ShapeMismatch("rank-2 kernel must be flat along axis 0".into()));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, offsets: &Tensor<T>) -> (Vec<T>, Tensor<T>) {
        let cols = sample_columns(x, offsets, &self.geom, self.rank);
        let y = apply_columns(&cols, &self.weight.value, &self.bias.value, x.spatial());
        (cols, y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate(x)?;
        let offsets = self.offset.forward(x)?;
        let (cols, y) = self.run(x, &offsets);
        self.cache = Some(DeformCache {
            input: x.clone(),
            offsets,
            cols,
        });
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate(x)?;
        let offsets = self.offset.infer(x)?;
        Ok(self.run(x, &offsets).1)
    }

    /// Offsets the predictor produces for `x` (diagnostics and tests).
    pub fn predict_offsets(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.validate(x)?;
        self.offset.infer(x)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let cache = self.cache.take().expect("DeformConv::backward without forward");
        let dcols = columns_backward(
            &cache.cols,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            true,
        )
        .expect("column gradient requested");
        let (dx_sample, doff) = sample_backward(&cache.input, &cache.offsets, &self.geom, self.rank, &dcols, need_dx);
        let dx_offset = self.offset.backward(&doff, need_dx);
        match (dx_sample, dx_offset) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                Some(a)
            }
            _ => None,
        }
    }
}

impl<T: Real> HasParams<T> for DeformConv<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias, &self.offset.weight, &self.offset.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.weight,
            &mut self.bias,
            &mut self.offset.weight,
            &mut self.offset.bias,
        ]
    }
}

/// Stateless deformable convolution with the layer's current parameters.
pub fn deformable_conv<T: Real>(input: &Tensor<T>, spec: &DeformableConvSpec<T>) -> Result<Tensor<T>> {
    spec.infer(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::conv::conv;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_offsets_reproduce_standard_conv_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for rank in [2, 3] {
            let layer = DeformConv::<f32>::new("d", rank, 3, 4, 3, 2, &mut rng);
            let x = if rank == 2 {
                Tensor::normal(&[3, 1, 6, 7], 1.0, &mut rng)
            } else {
                Tensor::normal(&[3, 5, 4, 6], 1.0, &mut rng)
            };
            let got = deformable_conv(&x, &layer).unwrap();
            let want = conv(&x, &layer.weight.value, &layer.bias.value, layer.geom.dilation, layer.geom.padding).unwrap();
            assert_eq!(got, want, "rank {rank}");
        }
    }

    #[test]
    fn offset_channel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(DeformConv::<f32>::new("a", 2, 1, 1, 3, 1, &mut rng).offset_channels(), 18);
        assert_eq!(DeformConv::<f32>::new("b", 3, 1, 1, 3, 1, &mut rng).offset_channels(), 81);
    }

    #[test]
    fn constant_field_is_offset_invariant_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut layer = DeformConv::<f64>::new("d", 2, 2, 3, 3, 1, &mut rng);
        layer.offset.weight.value = Tensor::normal(layer.offset.weight.value.shape(), 0.05, &mut rng);
        let x = Tensor::full(&[2, 1, 12, 12], 0.7);
        let off = layer.predict_offsets(&x).unwrap();
        assert!(off.data().iter().all(|v| v.abs() < 1.0));
        let y = layer.infer(&x).unwrap();
        let zero = {
            let mut l = layer.clone();
            l.offset.weight.value.fill(0.0);
            l.infer(&x).unwrap()
        };
        // Interior positions whose displaced taps stay inside the grid.
        for c in 0..3 {
            for v in 3..9 {
                for u in 3..9 {
                    let i = v * 12 + u;
                    assert!((y.channel(c)[i] - zero.channel(c)[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn wrong_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = DeformConv::<f32>::new("d", 2, 3, 3, 3, 1, &mut rng);
        assert!(layer.infer(&Tensor::zeros(&[2, 1, 4, 4])).is_err());
    }
}
