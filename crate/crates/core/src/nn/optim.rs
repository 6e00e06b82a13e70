use serde::{Deserialize, Serialize};

use super::param::Param;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v <- momentum * v + grad + weight_decay * value; value <- value - lr * v`.
/// Frozen parameters keep both their value and velocity.
pub fn sgd_step<'a, T: Real>(params: impl IntoIterator<Item = &'a mut Param<T>>, cfg: &SgdConfig) {
    let lr = T::lit(cfg.lr);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for p in params {
        if p.frozen {
            continue;
        }
        let value = p.value.data_mut();
        let vel = p.velocity.data_mut();
        for ((x, v), &g) in value.iter_mut().zip(vel.iter_mut()).zip(p.grad.data()) {
            *v = mu * *v + g + wd * *x;
            *x -= lr * *v;
        }
    }
}
