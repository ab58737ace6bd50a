//! Residual separation, the residual-entropy objective, λ annealing,
//! baseline consistency losses, and the order/information meters.

mod losses;
mod metrics;
mod schedule;

pub use losses::{
    argmax_rows, cross_entropy, mean_softmax_entropy, ocr_loss, pred_consistency_from_logits,
    pred_consistency_loss, recompose, rep_consistency_loss, residual, residual_entropy_loss,
    total_loss, BatchParts, ConsistencyKind, ConsistencyMethod, LossParts, RepNorm,
};
pub use metrics::{
    kendall_tau, mi_labels_residual, mutual_information, order_preservation_score,
    softmax_entropies, MutualInformation,
};
pub use schedule::{LambdaPolicy, LambdaSchedule, ScheduleStrategy, LAMBDA_CAP};
