//! Stage losses, one-step virtual updates, finite-difference hypergradients
//! and the outer training loop.

mod hypergrad;
mod losses;
mod settings;
mod train;

pub use hypergrad::{
    fd_alpha, fd_cross_hvp, fd_hvp_at, fd_hvp_ts, hypergrad_a, sgd_virtual, virtual_step_s, virtual_step_t, FdHvp,
    HypergradReport, FD_SCALE, ZERO_DIRECTION_EPS,
};
pub use losses::{
    loss_matching, loss_siamese, loss_validation, predict, Inference, LossContext, MatchLoss, Noise, SiameseLoss,
    LIKELIHOOD_FLOOR, PROB_CLAMP,
};
pub use settings::{AdamConfig, LbeConfig, LossMode, PredictMode, SgdConfig, SimInit, Variant, XiPolicy};
pub use train::{
    argmax, evaluate, mean_pair_prob, metrics_csv, predict_dataset, retrieve, run_episode, similarity_snapshot,
    snapshot_rows, train_lbe, train_lbe_with, EpochMetrics, EvalOptions, EvalReport, LbeState, Retrieved,
    METRICS_HEADER,
};
