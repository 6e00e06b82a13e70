//! 2D refinement with the projected 3D prediction:
//! `f'_2d = f_2d + h(p(F_3d)) + C(relu(sum_i D_i(h(p(F_3d)))))`, where `p`
//! projects voxel labels to pixels, `h` is one-hot lifting, `D_i` are
//! dilated deformable convolutions and `C` is a 1x1 fuse convolution.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{one_hot, project_3d_to_2d, ProjectionTable};
use crate::nn::layers::{relu, relu_backward};
use crate::nn::{Conv, ConvGeometry, DeformConv, HasParams, Param};
use crate::tensor::{argmax_channels, Real, Tensor};

pub const DCP_DILATIONS: [usize; 3] = [1, 2, 4];
pub const PYRAMID_KERNEL: usize = 3;

/// Parallel deformable branches over a one-hot label field, summed,
/// rectified and fused. Shared by the 2D and 3D refinement modules.
#[derive(Clone, Debug)]
pub struct ContextPyramid<T> {
    pub branches: Vec<DeformConv<T>>,
    pub fuse: Conv<T>,
    rectified: Option<Tensor<T>>,
}

impl<T: Real> ContextPyramid<T> {
    /// Branches are He-initialized with zero offset predictors; the fuse
    /// convolution starts at zero so a fresh module only adds the one-hot term.
    pub fn new<R: Rng + ?Sized>(name: &str, rank: usize, channels: usize, dilations: &[usize], rng: &mut R) -> Self {
        assert!(!dilations.is_empty(), "context pyramid needs at least one branch");
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| DeformConv::new(&format!("{name}.branch{i}"), rank, channels, channels, PYRAMID_KERNEL, d, rng))
            .collect();
        let geom = if rank == 2 {
            ConvGeometry::same_2d(1, 1)
        } else {
            ConvGeometry::same_3d(1, 1)
        };
        ContextPyramid {
            branches,
            fuse: Conv::zeros(&format!("{name}.fuse"), channels, channels, geom),
            rectified: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.fuse.out_channels()
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut sum = self.branches[0].forward(x)?;
        for b in &mut self.branches[1..] {
            sum.add_assign(&b.forward(x)?);
        }
        let r = relu(&sum);
        let y = self.fuse.forward(&r)?;
        self.rectified = Some(r);
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut sum = self.branches[0].infer(x)?;
        for b in &self.branches[1..] {
            sum.add_assign(&b.infer(x)?);
        }
        self.fuse.infer(&relu(&sum))
    }

    /// Parameter gradients only: the pyramid input is a detached label field.
    pub fn backward(&mut self, dy: &Tensor<T>) {
        let r = self.rectified.take().expect("ContextPyramid::backward without forward");
        let dr = self.fuse.backward(dy, true).expect("dx");
        let dsum = relu_backward(&r, &dr);
        for b in &mut self.branches {
            b.backward(&dsum, false);
        }
    }
}

impl<T: Real> HasParams<T> for ContextPyramid<T> {
    fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<_> = self.branches.iter().flat_map(|b| b.params()).collect();
        v.extend(self.fuse.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<_> = self.branches.iter_mut().flat_map(|b| b.params_mut()).collect();
        v.extend(self.fuse.params_mut());
        v
    }
}

/// Checks refinement inputs and returns the one-hot cross-branch field.
pub(crate) fn lifted_labels<T: Real>(logits: &Tensor<T>, labels: &[u8], what: &str) -> Result<Tensor<T>> {
    if logits.shape().len() != 4 || logits.spatial_len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: logits {:?} vs {} cross-branch labels",
            logits.shape(),
            labels.len()
        )));
    }
    one_hot(labels, logits.channels(), logits.spatial())
}

/// The 2D refinement module.
#[derive(Clone, Debug)]
pub struct Dcp<T> {
    pub pyramid: ContextPyramid<T>,
}

impl<T: Real> Dcp<T> {
    pub fn new<R: Rng + ?Sized>(num_labels: usize, rng: &mut R) -> Self {
        Self::with_dilations(num_labels, &DCP_DILATIONS, rng)
    }

    pub fn with_dilations<R: Rng + ?Sized>(num_labels: usize, dilations: &[usize], rng: &mut R) -> Self {
        Dcp {
            pyramid: ContextPyramid::new("dcp", 2, num_labels, dilations, rng),
        }
    }

    fn inputs(&self, f2d: &Tensor<T>, f3d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let proj = project_3d_to_2d(f3d_labels, table)?;
        lifted_labels(f2d, &proj, "dcp")
    }

    pub fn forward(&mut self, f2d: &Tensor<T>, f3d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let h = self.inputs(f2d, f3d_labels, table)?;
        let mut out = self.pyramid.forward(&h)?;
        out.add_assign(f2d);
        out.add_assign(&h);
        Ok(out)
    }

    pub fn infer(&self, f2d: &Tensor<T>, f3d_labels: &[u8], table: &ProjectionTable) -> Result<Tensor<T>> {
        let h = self.inputs(f2d, f3d_labels, table)?;
        let mut out = self.pyramid.infer(&h)?;
        out.add_assign(f2d);
        out.add_assign(&h);
        Ok(out)
    }

    /// Returns the gradient w.r.t. the coarse logits (the residual path).
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        self.pyramid.backward(dy);
        dy.clone()
    }
}

impl<T: Real> HasParams<T> for Dcp<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.pyramid.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.pyramid.params_mut()
    }
}

/// Per-pixel argmax of refined logits, ties to the lowest class.
pub fn refine_to_labels<T: Real>(logits: &Tensor<T>) -> Vec<u8> {
    argmax_channels(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(w: usize, h: usize) -> ProjectionTable {
        // pixel q sees voxel q of a 1 x 1 x (w*h) grid
        let n = w * h;
        ProjectionTable {
            pixel_to_voxel: (0..n as i32).collect(),
            voxel_to_pixel: (0..n as i32).collect(),
            image_dims: [w, h],
            grid_dims: [1, 1, n],
        }
    }

    #[test]
    fn zero_module_with_empty_prediction_adds_e0() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut dcp = Dcp::<f32>::new(12, &mut rng);
        for p in dcp.params_mut() {
            p.value.fill(0.0);
        }
        let f2d = Tensor::normal(&[12, 1, 3, 4], 1.0, &mut rng);
        let out = dcp.infer(&f2d, &[0; 12], &table(4, 3)).unwrap();
        for c in 0..12 {
            for (o, i) in out.channel(c).iter().zip(f2d.channel(c)) {
                assert_eq!(*o, if c == 0 { i + 1.0 } else { *i });
            }
        }
    }

    #[test]
    fn fresh_module_adds_one_hot_of_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dcp = Dcp::<f32>::new(12, &mut rng);
        let labels: Vec<u8> = (0..12).map(|i| (i % 12) as u8).collect();
        let out = dcp.infer(&Tensor::zeros(&[12, 1, 3, 4]), &labels, &table(4, 3)).unwrap();
        assert_eq!(refine_to_labels(&out), labels);
        assert_eq!(out.data().iter().sum::<f32>(), 12.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dcp = Dcp::<f32>::new(12, &mut rng);
        assert!(dcp.infer(&Tensor::zeros(&[12, 1, 3, 3]), &[0; 12], &table(4, 3)).is_err());
    }

    #[test]
    fn all_equal_logits_pick_class_zero() {
        assert_eq!(refine_to_labels(&Tensor::<f32>::full(&[12, 1, 2, 2], 0.3)), vec![0; 4]);
    }
}
