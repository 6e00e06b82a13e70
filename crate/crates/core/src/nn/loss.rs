use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Mean softmax cross-entropy over the positions where `mask` is set.
///
/// `logits` is `[C, ...]`, `labels` and `mask` have one entry per spatial
/// position. Returns the loss and its gradient w.r.t. the logits; masked-out
/// positions receive exactly zero gradient and never influence the value.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    mask: &[bool],
) -> Result<(T, Tensor<T>)> {
    let c = logits.channels();
    let n = logits.spatial_len();
    if labels.len() != n || mask.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "loss: {n} positions but {} labels and {} mask entries",
            labels.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyMask("no positions contribute to the loss".into()));
    }
    let inv = T::one() / T::lit(count as f64);
    let data = logits.data();
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = T::zero();
    let mut probs = vec![T::zero(); c];
    for p in (0..n).filter(|&p| mask[p]) {
        let y = labels[p] as usize;
        if y >= c {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: c,
            });
        }
        let m = (0..c).map(|ch| data[ch * n + p]).fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (ch, pr) in probs.iter_mut().enumerate() {
            *pr = (data[ch * n + p] - m).exp();
            z += *pr;
        }
        total += z.ln() + m - data[y * n + p];
        let g = grad.data_mut();
        for (ch, pr) in probs.iter().enumerate() {
            let onehot = if ch == y { T::one() } else { T::zero() };
            g[ch * n + p] = (*pr / z - onehot) * inv;
        }
    }
    let loss = total * inv;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_c() {
        let logits = Tensor::<f64>::zeros(&[12, 1, 2, 3]);
        let (l, _) = softmax_cross_entropy(&logits, &[3; 6], &[true; 6]).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_near_zero() {
        let mut logits = Tensor::<f32>::zeros(&[4, 1, 1, 2]);
        logits.data_mut()[2 * 2] = 10.0;
        logits.data_mut()[2 * 2 + 1] = 10.0;
        let (l, _) = softmax_cross_entropy(&logits, &[2, 2], &[true, true]).unwrap();
        assert!(l < 0.01);
    }

    #[test]
    fn empty_mask_and_bad_label() {
        let logits = Tensor::<f32>::zeros(&[2, 1, 1, 2]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 0], &[false, false]),
            Err(Error::EmptyMask(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 5], &[true, true]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }
}
