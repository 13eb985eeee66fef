//! Losses, analytic gradients and the optimiser.

mod adam;
mod grad;
mod loss;

pub use adam::{adam_step, Adam, AdamConfig, AdamTable};
pub use grad::{
    compute_gradients, evaluate_loss, ContrastTerm, DeltaBundle, GradientBundle, LossBreakdown,
    LossSpec, Trainable,
};
pub use loss::{
    bpr_loss, bpr_triple_grad, combined_loss, cosine_sim, cosine_with_grad, info_nce_with_grad,
    infonce_loss, l2_penalty, mending_link_grad, mending_loss, neg_log_sigmoid, BprGrad,
    InfoNceGrad,
};
