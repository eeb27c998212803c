//! Task metrics, convergence measurement, metric logs and analytic
//! compute/communication cost models.

mod cost;
mod eval;
mod log;
mod metrics;

pub use cost::{
    block_flops, client_trainable_params, comm_model, cost_report, cost_row, fedclip_adapter_params, flops_model,
    reference_rounds_per_epoch, param_counts, param_specs, tokenizer_flops, write_cost_csv, CommCost, CommScenario,
    CostRow, Method, ParamCounts, ParamSpec, Role, LOSS_FRAME_BYTES, REFERENCE_CLIENT_BATCH, REFERENCE_SHARD,
};
pub use eval::{embeddings, evaluate, export_embeddings, import_embeddings, EmbeddingRow, Embeddings, Evaluation};
pub use log::{MetricLog, MetricRecord};
pub use metrics::{accuracy, argmax, epoch_curve, recall_at_k, rounds_to_fraction_of_peak, Recall};
