//! Minimal differentiable layer library.
//!
//! Every layer caches what it needs during `forward` and consumes that cache
//! in `backward`, accumulating parameter gradients into its [`Param`]s and
//! returning the gradient with respect to its input.

pub mod attention;
pub mod conv;
pub mod deform;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod param;

pub use attention::{attention_map, depth_attention, depth_attention_backward, DepthAttention};
pub use conv::{conv, Conv, ConvGeometry};
pub use deform::{deformable_conv, DeformConv, DeformableConvSpec};
pub use gradcheck::{check_gradients, GradCheckReport};
pub use loss::softmax_cross_entropy;
pub use norm::GroupNorm;
pub use optim::{sgd_step, SgdConfig};
pub use param::{HasParams, Param};
