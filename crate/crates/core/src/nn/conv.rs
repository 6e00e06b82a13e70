//! Standard (dilated, stride-1) convolution over three spatial axes.
//!
//! Rank-2 convolutions are expressed with a singleton first spatial axis and
//! a kernel extent of 1 along it. The kernel is applied as cross-correlation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{HasParams, Param};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeometry {
    /// Same-padding geometry; every kernel extent must be odd.
    pub fn same(kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "same padding needs odd kernels");
        let padding = [0, 1, 2].map(|a| dilation[a] * (kernel[a] - 1) / 2);
        ConvGeometry {
            kernel,
            dilation,
            padding,
        }
    }

    /// Square 2D kernel on `[C, 1, H, W]` tensors.
    pub fn same_2d(kernel: usize, dilation: usize) -> Self {
        Self::same([1, kernel, kernel], [1, dilation, dilation])
    }

    /// Cubic 3D kernel on `[C, W, H, D]` tensors.
    pub fn same_3d(kernel: usize, dilation: usize) -> Self {
        Self::same([kernel; 3], [dilation; 3])
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let span = self.dilation[a] * (self.kernel[a] - 1);
            let padded = input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || padded <= span {
                return Err(Error::ShapeMismatch(format!(
                    "input extent {} too small for kernel {} dilation {} padding {}",
                    input[a], self.kernel[a], self.dilation[a], self.padding[a]
                )));
            }
            out[a] = padded - span;
        }
        Ok(out)
    }

    /// Displacement of each tap relative to the output position, in tap order.
    pub fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let mut taps = Vec::with_capacity(self.taps());
        for k0 in 0..self.kernel[0] {
            for k1 in 0..self.kernel[1] {
                for k2 in 0..self.kernel[2] {
                    let k = [k0, k1, k2];
                    taps.push([0, 1, 2].map(|a| {
                        (self.dilation[a] * k[a]) as isize - self.padding[a] as isize
                    }));
                }
            }
        }
        taps
    }
}

/// Output positions along one axis for which `o + shift` is inside `[0, len)`.
fn valid_range(shift: isize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, out_len as isize) as usize;
    (lo.min(hi), hi)
}

/// Unfolds `input` into a `(C * taps) x P_out` column matrix.
pub fn im2col<T: Real>(input: &Tensor<T>, geom: &ConvGeometry) -> Result<(Vec<T>, [usize; 3])> {
    let c = input.channels();
    let dims = input.spatial();
    let out = geom.output_dims(dims)?;
    let p_out: usize = out.iter().product();
    let taps = geom.tap_offsets();
    let mut cols = vec![T::zero(); c * taps.len() * p_out];
    for ch in 0..c {
        let src = input.channel(ch);
        for (k, off) in taps.iter().enumerate() {
            let row = &mut cols[(ch * taps.len() + k) * p_out..][..p_out];
            let (a0, b0) = valid_range(off[0], dims[0], out[0]);
            let (a1, b1) = valid_range(off[1], dims[1], out[1]);
            let (a2, b2) = valid_range(off[2], dims[2], out[2]);
            if a2 >= b2 {
                continue;
            }
            for o0 in a0..b0 {
                let i0 = (o0 as isize + off[0]) as usize;
                for o1 in a1..b1 {
                    let i1 = (o1 as isize + off[1]) as usize;
                    let dst = (o0 * out[1] + o1) * out[2];
                    let s = (i0 * dims[1] + i1) * dims[2];
                    let i2 = (a2 as isize + off[2]) as usize;
                    row[dst + a2..dst + b2].copy_from_slice(&src[s + i2..s + i2 + (b2 - a2)]);
                }
            }
        }
    }
    Ok((cols, out))
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Real>(
    cols: &[T],
    channels: usize,
    dims: [usize; 3],
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let out = geom.output_dims(dims)?;
    let p_out: usize = out.iter().product();
    let taps = geom.tap_offsets();
    let mut dx = Tensor::zeros(&[channels, dims[0], dims[1], dims[2]]);
    for ch in 0..channels {
        let dst = dx.channel_mut(ch);
        for (k, off) in taps.iter().enumerate() {
            let row = &cols[(ch * taps.len() + k) * p_out..][..p_out];
            let (a0, b0) = valid_range(off[0], dims[0], out[0]);
            let (a1, b1) = valid_range(off[1], dims[1], out[1]);
            let (a2, b2) = valid_range(off[2], dims[2], out[2]);
            if a2 >= b2 {
                continue;
            }
            for o0 in a0..b0 {
                let i0 = (o0 as isize + off[0]) as usize;
                for o1 in a1..b1 {
                    let i1 = (o1 as isize + off[1]) as usize;
                    let src = (o0 * out[1] + o1) * out[2];
                    let d = (i0 * dims[1] + i1) * dims[2] + (a2 as isize + off[2]) as usize;
                    for (t, &g) in dst[d..d + (b2 - a2)].iter_mut().zip(&row[src + a2..src + b2]) {
                        *t += g;
                    }
                }
            }
        }
    }
    Ok(dx)
}

fn check_weight<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<usize> {
    if input.shape().len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv input must be rank 4, got {:?}",
            input.shape()
        )));
    }
    let w = weight.shape();
    if w.len() != 5 || w[1] != input.channels() || w[2..] != geom.kernel {
        return Err(Error::ShapeMismatch(format!(
            "conv weight {w:?} incompatible with input {:?} and kernel {:?}",
            input.shape(),
            geom.kernel
        )));
    }
    if bias.len() != w[0] {
        return Err(Error::ShapeMismatch(format!(
            "bias length {} != out channels {}",
            bias.len(),
            w[0]
        )));
    }
    Ok(w[0])
}

/// Applies `weight` to an unfolded column matrix and adds the bias.
pub(crate) fn apply_columns<T: Real>(
    cols: &[T],
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    out_dims: [usize; 3],
) -> Tensor<T> {
    let o = weight.shape()[0];
    let ck = weight.len() / o;
    let p: usize = out_dims.iter().product();
    let mut y = Tensor::zeros(&[o, out_dims[0], out_dims[1], out_dims[2]]);
    for (oc, &b) in bias.data().iter().enumerate() {
        y.channel_mut(oc).fill(b);
    }
    gemm(false, false, o, p, ck, weight.data(), cols, y.data_mut(), true);
    y
}

/// Gradients of `y = W * cols + b`: accumulates into `grad_w`/`grad_b` and
/// returns the column gradient when requested.
pub(crate) fn columns_backward<T: Real>(
    cols: &[T],
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    grad_w: &mut Tensor<T>,
    grad_b: &mut Tensor<T>,
    need_dcols: bool,
) -> Option<Vec<T>> {
    let o = weight.shape()[0];
    let ck = weight.len() / o;
    let p = dy.spatial_len();
    gemm(false, true, o, ck, p, dy.data(), cols, grad_w.data_mut(), true);
    for (oc, gb) in grad_b.data_mut().iter_mut().enumerate() {
        *gb += dy.channel(oc).iter().copied().sum::<T>();
    }
    need_dcols.then(|| {
        let mut dcols = vec![T::zero(); ck * p];
        gemm(true, false, ck, p, o, weight.data(), dy.data(), &mut dcols, false);
        dcols
    })
}

/// Stateless convolution: `weight` is `[O, C, k0, k1, k2]`, `bias` is `[O]`.
pub fn conv<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    let w = weight.shape();
    if w.len() != 5 {
        return Err(Error::ShapeMismatch(format!("conv weight must be rank 5, got {w:?}")));
    }
    let geom = ConvGeometry {
        kernel: [w[2], w[3], w[4]],
        dilation,
        padding,
    };
    check_weight(input, weight, bias, &geom)?;
    let (cols, out) = im2col(input, &geom)?;
    Ok(apply_columns(&cols, weight, bias, out))
}

/// Convolution layer with learnable weight and bias.
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub geom: ConvGeometry,
    cache: Option<(Vec<T>, [usize; 3])>,
}

impl<T: Real> Conv<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let shape = [out_channels, in_channels, k0, k1, k2];
        let weight = Tensor::he_normal(&shape, in_channels * geom.taps(), rng);
        Self::from_tensors(name, weight, Tensor::zeros(&[out_channels]), geom)
    }

    pub fn zeros(name: &str, in_channels: usize, out_channels: usize, geom: ConvGeometry) -> Self {
        let [k0, k1, k2] = geom.kernel;
        let weight = Tensor::zeros(&[out_channels, in_channels, k0, k1, k2]);
        Self::from_tensors(name, weight, Tensor::zeros(&[out_channels]), geom)
    }

    pub fn from_tensors(name: &str, weight: Tensor<T>, bias: Tensor<T>, geom: ConvGeometry) -> Self {
        Conv {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
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

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_weight(x, &self.weight.value, &self.bias.value, &self.geom)?;
        let (cols, out) = im2col(x, &self.geom)?;
        let y = apply_columns(&cols, &self.weight.value, &self.bias.value, out);
        self.cache = Some((cols, x.spatial()));
        Ok(y)
    }

    /// Inference-only forward that keeps no cache.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_weight(x, &self.weight.value, &self.bias.value, &self.geom)?;
        let (cols, out) = im2col(x, &self.geom)?;
        Ok(apply_columns(&cols, &self.weight.value, &self.bias.value, out))
    }

    /// Consumes the forward cache. Returns the input gradient if `need_dx`.
    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (cols, in_dims) = self.cache.take().expect("Conv::backward without forward");
        let dcols = columns_backward(
            &cols,
            &self.weight.value,
            dy,
            &mut self.weight.grad,
            &mut self.bias.grad,
            need_dx,
        )?;
        Some(col2im(&dcols, self.in_channels(), in_dims, &self.geom).expect("forward validated dims"))
    }
}

impl<T: Real> HasParams<T> for Conv<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::normal(&[3, 1, 4, 5], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 1, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let y = conv(&x, &w, &Tensor::zeros(&[3]), [1; 3], [0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::normal(&[2, 3, 3, 3], 1.0, &mut rng);
        let w = Tensor::zeros(&[4, 2, 3, 3, 3]);
        let b = Tensor::from_vec(&[4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv(&x, &w, &b, [1; 3], [1; 3]).unwrap();
        for oc in 0..4 {
            assert!(y.channel(oc).iter().all(|&v| v == b.data()[oc]));
        }
    }

    #[test]
    fn same_padding_preserves_dims() {
        let g = ConvGeometry::same_3d(3, 2);
        assert_eq!(g.padding, [2, 2, 2]);
        assert_eq!(g.output_dims([5, 4, 7]).unwrap(), [5, 4, 7]);
        let g2 = ConvGeometry::same_2d(3, 4);
        assert_eq!(g2.output_dims([1, 6, 8]).unwrap(), [1, 6, 8]);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        let w = Tensor::zeros(&[1, 3, 1, 3, 3]);
        assert!(conv(&x, &w, &Tensor::zeros(&[1]), [1; 3], [0, 1, 1]).is_err());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::same_3d(3, 2);
        let x = Tensor::<f64>::normal(&[2, 4, 3, 5], 1.0, &mut rng);
        let (cols, out) = im2col(&x, &g).unwrap();
        let r = Tensor::<f64>::normal(&[cols.len()], 1.0, &mut rng);
        let lhs: f64 = cols.iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let back = col2im(r.data(), 2, x.spatial(), &g).unwrap();
        let rhs: f64 = back.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert_eq!(out, [4, 3, 5]);
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
