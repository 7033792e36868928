//! Dense network core: parameter containers, MLP forward/backward, losses and
//! SGD with momentum. Everything is `f64` and row-major.

mod loss;
mod net;
mod param;

pub use loss::{
    contrastive_loss, cross_entropy_loss, log_softmax_rows, softmax_rows,
};
pub use net::{Activation, ActivationTrace, Batch, Dense, MlpNet, MlpSpec, NetShape};
pub use param::{sgd_step, ParamMatrix};
