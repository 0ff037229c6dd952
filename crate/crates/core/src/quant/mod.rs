//! Blockwise post-training quantization.
//!
//! Weights use symmetric per-channel quantizers with learnable soft rounding
//! (rectified sigmoid offsets, annealed rounding regularizer); activations
//! entering each block use a per-tensor quantizer whose scale is learned
//! through a straight-through estimator. Each block is fitted to its
//! full-precision output with Adam, and the squared gradient norms of the
//! three parameter groups are recorded at every step.

mod calibrate;
mod model;
mod quantizer;

pub use calibrate::{
    block_output, calibrate_block, calibrate_block_with, grad_sq_norms, hard_mse, init_block_quantizers, soft_loss,
    soft_loss_grad, BlockProblem, BlockQuantizers, CalibrationOutcome, GradStep, GradTrace, ParamGroup, QuantConfig,
};
pub use model::{
    eval_quantized, load_quantized, quantize_model, save_quantized, write_traces_csv, BlockReport, Quantization,
    QuantizedModel,
};
pub use quantizer::{
    init_act_quantizer, init_weight_quantizer, inverse_rect_sigmoid, percentile, quantize_dequantize, rect_sigmoid,
    round_reg, signed_range, soft_round, unsigned_range, ActQuantizer, WeightQuantizer, FINAL_V, SCALE_FLOOR,
};
