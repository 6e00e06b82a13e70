//! 3D refinement with the reprojected 2D prediction: a rank-3 context
//! pyramid over `h(r(F_2d))` with the same residual form as the 2D module,
//! followed by parameter-free self-attention across depth slabs.

use rand::Rng;

use crate::dcp::{lifted_labels, ContextPyramid};
use crate::error::Result;
use crate::geometry::{reproject_2d_to_3d, ProjectionTable};
use crate::nn::{DepthAttention, HasParams, Param};
use crate::tensor::{argmax_channels, Real, Tensor};

/// Depth is the shortest default grid axis, so dilations stop at 3.
pub const DDA_DILATIONS: [usize; 3] = [1, 2, 3];

#[derive(Clone, Debug)]
pub struct Dda<T> {
    pub pyramid: ContextPyramid<T>,
    attention: DepthAttention<T>,
}

impl<T: Real> Dda<T> {
    pub fn new<R: Rng + ?Sized>(num_labels: usize, rng: &mut R) -> Self {
        Self::with_dilations(num_labels, &DDA_DILATIONS, rng)
    }

    pub fn with_dilations<R: Rng + ?Sized>(num_labels: usize, dilations: &[usize], rng: &mut R) -> Self {
        Dda {
            pyramid: ContextPyramid::new("dda", 3, num_labels, dilations, rng),
            attention: DepthAttention::new(),
        }
    }

    fn inputs(&self, f3d: &Tensor<T>, f2d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let rep = reproject_2d_to_3d(f2d_labels, table)?;
        lifted_labels(f3d, &rep, "dda")
    }

    /// The pyramid stage: `f_3d + h(r(F_2d)) + C(relu(sum_i D_i(h(r(F_2d)))))`.
    pub fn pyramid_infer(&self, f3d: &Tensor<T>, f2d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let h = self.inputs(f3d, f2d_labels, table)?;
        let mut out = self.pyramid.infer(&h)?;
        out.add_assign(f3d);
        out.add_assign(&h);
        Ok(out)
    }

    pub fn forward(&mut self, f3d: &Tensor<T>, f2d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let h = self.inputs(f3d, f2d_labels, table)?;
        let mut f3 = self.pyramid.forward(&h)?;
        f3.add_assign(f3d);
        f3.add_assign(&h);
        self.attention.forward(&f3)
    }

    pub fn infer(&self, f3d: &Tensor<T>, f2d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let f3 = self.pyramid_infer(f3d, f2d_labels, table)?;
        Ok(crate::nn::depth_attention(&f3)?.0)
    }

    /// Returns the gradient w.r.t. the coarse 3D logits.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let df3 = self.attention.backward(dy);
        self.pyramid.backward(&df3);
        df3
    }
}

impl<T: Real> HasParams<T> for Dda<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.pyramid.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.pyramid.params_mut()
    }
}

/// Per-voxel argmax of refined logits, ties to the lowest class.
pub fn complete_to_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    argmax_channels(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_table(dims: [usize; 3]) -> ProjectionTable {
        let n: usize = dims.iter().product();
        ProjectionTable {
            pixel_to_voxel: (0..n as i32).collect(),
            voxel_to_pixel: (0..n as i32).collect(),
            image_dims: [n, 1],
            grid_dims: dims,
        }
    }

    #[test]
    fn zero_module_with_empty_prediction_adds_e0_before_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dda = Dda::<f64>::new(12, &mut rng);
        for p in dda.params_mut() {
            p.value.fill(0.0);
        }
        let dims = [2, 3, 4];
        let f3d = Tensor::normal(&[12, 2, 3, 4], 1.0, &mut rng);
        let out = dda.pyramid_infer(&f3d, &[0; 24], &identity_table(dims)).unwrap();
        for c in 0..12 {
            for (o, i) in out.channel(c).iter().zip(f3d.channel(c)) {
                assert_eq!(*o, if c == 0 { i + 1.0 } else { *i });
            }
        }
    }

    #[test]
    fn forward_matches_infer() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut dda = Dda::<f64>::new(4, &mut rng);
        let f3d = Tensor::normal(&[4, 2, 3, 4], 0.3, &mut rng);
        let labels: Vec<u8> = (0..24).map(|i| (i % 4) as u8).collect();
        let t = identity_table([2, 3, 4]);
        let a = dda.infer(&f3d, &labels, &t).unwrap();
        let b = dda.forward(&f3d, &labels, &t).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}
