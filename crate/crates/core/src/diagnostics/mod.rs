//! Measurements: Fréchet distance between Gaussian feature fits, relative
//! per-class FID, the empirical generalization gap of a quantized model, the
//! gradient-norm bound proxy, embedding export and strategy comparison reports.

mod compare;
mod embed;
mod fid;
mod gap;

pub use compare::{ComparisonReport, GroupValues, Metric, PairwiseOrdering, RunRecord, StrategySummary};
pub use embed::export_embeddings;
pub use fid::{features, fid, rpc_fid, RpcFidConfig, RpcFidReport, RpcFidRow};
pub use gap::{
    block_mse_gap, bound_integrand, empirical_gap, gap_bound, gap_bound_groups, mean_loss, Classifier, GapReport,
};
