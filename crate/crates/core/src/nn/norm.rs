//! Group normalization over a single sample.

use crate::error::{Error, Result};
use crate::nn::{HasParams, Param};
use crate::tensor::{Real, Tensor};

pub const NORM_EPS: f64 = 1e-5;

/// Normalizes each group of channels to zero mean and unit variance over
/// the group's channels and all spatial positions, then applies a
/// per-channel scale and shift.
#[derive(Clone, Debug)]
pub struct GroupNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    groups: usize,
    cache: Option<NormCache<T>>,
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub fn new(name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels in {groups} groups");
        GroupNorm {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(&[channels], T::one())),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups,
            cache: None,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn normalize(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
        let c = x.channels();
        if c != self.gamma.numel() {
            return Err(Error::ShapeMismatch(format!(
                "group norm over {} channels got {:?}",
                self.gamma.numel(),
                x.shape()
            )));
        }
        let per = c / self.groups;
        let n = per * x.spatial_len();
        let stride = x.spatial_len();
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let block = &mut xhat.data_mut()[g * per * stride..(g + 1) * per * stride];
            let mean = block.iter().copied().sum::<T>() / T::lit(n as f64);
            let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / T::lit(n as f64);
            let inv = T::one() / (var + T::lit(NORM_EPS)).sqrt();
            block.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let mut y = xhat.clone();
        for ch in 0..c {
            let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            y.channel_mut(ch).iter_mut().for_each(|v| *v = *v * gm + bt);
        }
        Ok((y, xhat, inv_std))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, xhat, inv_std) = self.normalize(x)?;
        self.cache = Some(NormCache { xhat, inv_std });
        Ok(y)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.normalize(x)?.0)
    }

    /// Accumulates `gamma`/`beta` gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let NormCache { xhat, inv_std } = self.cache.take().expect("GroupNorm::backward without forward");
        let c = xhat.channels();
        let stride = xhat.spatial_len();
        let per = c / self.groups;
        let n = T::lit((per * stride) as f64);
        let mut dxhat = dy.clone();
        for ch in 0..c {
            let (xs, ds) = (xhat.channel(ch), dy.channel(ch));
            let dg: T = xs.iter().zip(ds).map(|(&a, &b)| a * b).sum();
            let db: T = ds.iter().copied().sum();
            self.gamma.grad.data_mut()[ch] += dg;
            self.beta.grad.data_mut()[ch] += db;
            let gm = self.gamma.value.data()[ch];
            dxhat.channel_mut(ch).iter_mut().for_each(|v| *v *= gm);
        }
        for (g, &inv) in inv_std.iter().enumerate() {
            let range = g * per * stride..(g + 1) * per * stride;
            let xs = &xhat.data()[range.clone()];
            let block = &mut dxhat.data_mut()[range];
            let sum_d: T = block.iter().copied().sum();
            let sum_dx: T = block.iter().zip(xs).map(|(&d, &x)| d * x).sum();
            for (d, &x) in block.iter_mut().zip(xs) {
                *d = inv / n * (n * *d - sum_d - x * sum_dx);
            }
        }
        dxhat
    }
}

impl<T: Real> HasParams<T> for GroupNorm<T> {
    fn params(&self) -> Vec<&Param<T>> {
        vec![&self.gamma, &self.beta]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn output_is_standardized_per_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::normal(&[4, 3, 2, 2], 3.0, &mut rng);
        let y = GroupNorm::new("n", 4, 2).infer(&x).unwrap();
        for g in 0..2 {
            let block = &y.data()[g * 24..(g + 1) * 24];
            let mean = block.iter().sum::<f64>() / 24.0;
            let var = block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 24.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [4, 1, 3, 3];
        let x0 = Tensor::<f64>::normal(&shape, 1.0, &mut rng);
        let w = Tensor::<f64>::normal(&shape, 1.0, &mut rng);
        let mut norm = GroupNorm::<f64>::new("n", 4, 2);
        norm.gamma.value = Tensor::normal(&[4], 1.0, &mut rng);
        norm.beta.value = Tensor::normal(&[4], 1.0, &mut rng);
        let f = |v: &[f64]| {
            let mut n = norm.clone();
            let x = Tensor::from_vec(&shape, v.to_vec()).unwrap();
            let y = n.forward(&x).unwrap();
            let loss = y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
            (loss, n.backward(&w).into_data())
        };
        let r = check_gradients(f, x0.data(), 1e-5, 1e-5);
        assert!(r.passed(), "{r:?}");
    }
}
