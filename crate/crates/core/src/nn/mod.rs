//! Dense binary classifier with ReLU hidden layers, inverted dropout and a
//! sigmoid head, plus the cross-entropy / mutual-learning losses and their
//! analytic gradients.

mod grad;
mod loss;
mod model;

pub use grad::{
    compute_gradients, evaluate_loss, finite_difference_check, sgd_step, GradientSet, LossValue,
};
pub use loss::{
    bce_loss, kl_divergence, kld_avg, mutual_loss, BinaryDist, KlDirection, LossMode, LossSpec,
    DEFAULT_EPSILON,
};
pub use model::{
    forward, sample_masks, Architecture, DenseLayer, ForwardPass, Mode, ModelParameters,
};
