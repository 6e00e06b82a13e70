//! Parameter-free layers on `[C, 1, H, W]` images and `[C, W, H, D]` volumes.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

/// Gradient through a ReLU given its *output*.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.shape(), data).expect("same shape")
}

/// 2x2 average pooling over the last two axes.
pub fn avg_pool2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [s0, h, w] = x.spatial();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::ShapeMismatch(format!("avg_pool2 needs even extents, got {h}x{w}")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let c = x.channels();
    let mut y = Tensor::zeros(&[c, s0, ho, wo]);
    let q = T::lit(0.25);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for z in 0..s0 {
            for i in 0..ho {
                for j in 0..wo {
                    let b = (z * h + 2 * i) * w + 2 * j;
                    dst[(z * ho + i) * wo + j] = (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]) * q;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [s0, ho, wo] = dy.spatial();
    let (h, w) = (2 * ho, 2 * wo);
    let c = dy.channels();
    let mut dx = Tensor::zeros(&[c, s0, h, w]);
    let q = T::lit(0.25);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for z in 0..s0 {
            for i in 0..ho {
                for j in 0..wo {
                    let g = src[(z * ho + i) * wo + j] * q;
                    let b = (z * h + 2 * i) * w + 2 * j;
                    dst[b] = g;
                    dst[b + 1] = g;
                    dst[b + w] = g;
                    dst[b + w + 1] = g;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling over the last two axes.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [s0, h, w] = x.spatial();
    let (ho, wo) = (2 * h, 2 * w);
    let c = x.channels();
    let mut y = Tensor::zeros(&[c, s0, ho, wo]);
    for ch in 0..c {
        let src = x.channel(ch);
        let dst = y.channel_mut(ch);
        for z in 0..s0 {
            for i in 0..ho {
                for j in 0..wo {
                    dst[(z * ho + i) * wo + j] = src[(z * h + i / 2) * w + j / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [s0, ho, wo] = dy.spatial();
    let (h, w) = (ho / 2, wo / 2);
    let c = dy.channels();
    let mut dx = Tensor::zeros(&[c, s0, h, w]);
    for ch in 0..c {
        let src = dy.channel(ch);
        let dst = dx.channel_mut(ch);
        for z in 0..s0 {
            for i in 0..ho {
                for j in 0..wo {
                    dst[(z * h + i / 2) * w + j / 2] += src[(z * ho + i) * wo + j];
                }
            }
        }
    }
    dx
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.spatial() != b.spatial() {
        return Err(Error::ShapeMismatch(format!(
            "concat: spatial {:?} vs {:?}",
            a.spatial(),
            b.spatial()
        )));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    let [s0, s1, s2] = a.spatial();
    Tensor::from_vec(&[a.channels() + b.channels(), s0, s1, s2], data)
}

/// Splits a channel-concatenated gradient back into its two parts.
pub fn split_channels<T: Real>(x: &Tensor<T>, first: usize) -> (Tensor<T>, Tensor<T>) {
    let [s0, s1, s2] = x.spatial();
    let n = x.spatial_len();
    let (a, b) = x.data().split_at(first * n);
    (
        Tensor::from_vec(&[first, s0, s1, s2], a.to_vec()).expect("split"),
        Tensor::from_vec(&[x.channels() - first, s0, s1, s2], b.to_vec()).expect("split"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn pool_and_upsample_backwards_are_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::<f64>::normal(&[2, 1, 4, 6], 1.0, &mut rng);
        let r = Tensor::<f64>::normal(&[2, 1, 2, 3], 1.0, &mut rng);
        assert!((dot(&avg_pool2(&x).unwrap(), &r) - dot(&x, &avg_pool2_backward(&r))).abs() < 1e-12);
        let r2 = Tensor::<f64>::normal(&[2, 1, 8, 12], 1.0, &mut rng);
        assert!((dot(&upsample2(&x), &r2) - dot(&x, &upsample2_backward(&r2))).abs() < 1e-12);
    }

    #[test]
    fn odd_pool_rejected() {
        assert!(avg_pool2(&Tensor::<f32>::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::<f32>::full(&[2, 1, 2, 2], 1.0);
        let b = Tensor::<f32>::full(&[3, 1, 2, 2], 2.0);
        let c = concat_channels(&a, &b).unwrap();
        let (x, y) = split_channels(&c, 2);
        assert_eq!((x, y), (a, b));
    }
}
