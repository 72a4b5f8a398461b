//! Attacks run by an honest-but-curious server over its [`ServerTap`](crate::protocol::ServerTap).

mod inversion;
mod labels;

pub use inversion::{
    default_lambda, input_update_step, invert_targets, model_update_step, unsplit_invert, AttackState, Inversion,
    InversionConfig, RoundMetrics, TvScale,
};
pub use labels::{infer_label, GradScope, tail_param_grads, train_clone_with_inferred_labels, LabelInferenceResult};
