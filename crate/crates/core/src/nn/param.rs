use crate::tensor::{Real, Tensor};

/// A trainable tensor with its accumulated gradient and momentum buffer.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub velocity: Tensor<T>,
    pub frozen: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        let velocity = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
            velocity,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Anything that owns parameters, in a stable order.
pub trait HasParams<T> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn zero_grad(&mut self)
    where
        T: Real,
    {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    fn set_frozen(&mut self, frozen: bool) {
        for p in self.params_mut() {
            p.frozen = frozen;
        }
    }

    /// Adds another instance's gradients into ours; both must share a layout.
    fn accumulate_grads_from(&mut self, other: &Self)
    where
        T: Real,
        Self: Sized,
    {
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.grad.add_assign(&src.grad);
        }
    }

    fn num_params(&self) -> usize
    where
        T: Real,
    {
        self.params().iter().map(|p| p.numel()).sum()
    }
}
