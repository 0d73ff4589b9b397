//! Dense numeric kernel: matrices, a fixed-topology MLP with exact
//! gradients, the optimizers used for training, and a finite-difference
//! gradient checker.

mod gradcheck;
mod matrix;
mod mlp;
mod optim;

pub use gradcheck::{grad_check, GradCheck};
pub use matrix::{axpy, cosine_similarity, dot, log_sigmoid, norm2, sigmoid, Matrix2D};
pub use mlp::{Activation, MlpCache, MlpParams};
pub use optim::{adam_step, cosine_lr, sgd_momentum_step, AdamHyper, AdamState, MomentumState};
