//! Experiment configuration and the strategy comparison runner.
//!
//! A run fixes the world, then for every seed samples real train/test data,
//! trains a reference model, builds one calibration set per strategy,
//! quantizes and measures. Every random draw comes from a stream labelled by
//! seed and purpose, so stages can be recomputed independently.

mod config;
mod runner;

pub use config::{ExperimentConfig, Strategy};
pub use runner::{
    calibration_set, compare, evaluate_strategy, measure, prepare_seed, prompts_for, real_calibration, rpc_fid_report,
    run_strategy, sample_seed_data, seed_model_spec, train_seed_reference, SeedContext, SeedData, Setup,
};
