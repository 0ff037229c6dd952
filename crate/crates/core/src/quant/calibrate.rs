use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quantizer::{
    init_act_quantizer, init_weight_quantizer, rect_sigmoid, rect_sigmoid_grad, round_reg_grad_h, ActQuantizer,
    WeightQuantizer,
};
use crate::error::{Error, Result};
use crate::model::BlockKind;
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Keep the first and the last block at 8 bits.
    pub keep_first_last_8bit: bool,
    /// Steps per block.
    pub steps: usize,
    pub batch_size: usize,
    /// Initial Adam step size; decays to zero on a cosine.
    pub lr: f64,
    pub reg_weight: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Fraction of steps run without the rounding regularizer.
    pub warmup: f64,
    /// Gradient-noise level assumed by the bound proxy.
    pub sigma: f64,
    pub act_percentile: f64,
    /// One weight scale per output channel instead of one per block.
    pub per_channel: bool,
    pub learn_weight_scale: bool,
    pub learn_act_scale: bool,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_bits: 2,
            act_bits: 4,
            keep_first_last_8bit: true,
            steps: 1000,
            batch_size: 32,
            lr: 1e-3,
            reg_weight: 0.01,
            beta_start: 20.0,
            beta_end: 2.0,
            warmup: 0.2,
            sigma: 1.0,
            act_percentile: 0.999,
            per_channel: true,
            learn_weight_scale: true,
            learn_act_scale: true,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<()> {
        for (what, b) in [("weight", self.weight_bits), ("activation", self.act_bits)] {
            if !(2..=8).contains(&b) {
                return Err(Error::config(format!("{what} bits {b} outside [2, 8]")));
            }
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch_size must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.sigma > 0.0) || self.reg_weight < 0.0 {
            return Err(Error::config("lr and sigma must be positive, reg_weight non-negative"));
        }
        if !(self.beta_start > 0.0 && self.beta_end > 0.0) || !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::config("beta must be positive and warmup in [0, 1)"));
        }
        if !(0.5 < self.act_percentile && self.act_percentile <= 1.0) {
            return Err(Error::config("act_percentile must lie in (0.5, 1]"));
        }
        Ok(())
    }

    /// Bit widths `(weight, activation)` used for block `index` of `count`.
    pub fn bits_for(&self, index: usize, count: usize) -> (u32, u32) {
        if self.keep_first_last_8bit && (index == 0 || index + 1 == count) {
            (8, 8)
        } else {
            (self.weight_bits, self.act_bits)
        }
    }

    pub fn step_size(&self, t: usize) -> f64 {
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t as f64 / self.steps as f64).cos())
    }

    /// `None` during warm-up, then β decaying linearly from start to end.
    pub fn beta(&self, t: usize) -> Option<f64> {
        let warm = (self.warmup * self.steps as f64).round() as usize;
        if t < warm {
            return None;
        }
        let span = (self.steps - warm).max(1) as f64;
        Some(self.beta_start + (self.beta_end - self.beta_start) * (t - warm) as f64 / span)
    }
}

/// The three groups of quantization parameters whose gradients are traced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    ActScale,
    WeightRounding,
    WeightScale,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::ActScale, ParamGroup::WeightRounding, ParamGroup::WeightScale];

    pub fn name(self) -> &'static str {
        match self {
            Self::ActScale => "act_scale",
            Self::WeightRounding => "weight_rounding",
            Self::WeightScale => "weight_scale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

/// Mean over the mini-batch of the per-sample squared gradient norm of each
/// group, plus the step size and noise level of that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradStep {
    pub step: usize,
    pub act_scale: f64,
    pub weight_rounding: f64,
    pub weight_scale: f64,
    pub gamma: f64,
    pub sigma: f64,
    pub n: usize,
}

impl GradStep {
    pub fn group(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::ActScale => self.act_scale,
            ParamGroup::WeightRounding => self.weight_rounding,
            ParamGroup::WeightScale => self.weight_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTrace {
    pub block: usize,
    pub steps: Vec<GradStep>,
}

impl GradTrace {
    pub fn mean(&self, g: ParamGroup) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.group(g)).sum::<f64>() / self.steps.len() as f64
    }

    /// `Σ_t γ_t² g(t) / σ_t²` for one group.
    pub fn bound_integrand(&self, g: ParamGroup) -> f64 {
        self.steps.iter().map(|s| s.gamma * s.gamma * s.group(g) / (s.sigma * s.sigma)).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockQuantizers {
    pub weight: WeightQuantizer,
    pub act: ActQuantizer,
}

/// One block's reconstruction problem: inputs arrive through the quantized
/// prefix of the network, targets are the full-precision block outputs.
#[derive(Debug, Clone, Copy)]
pub struct BlockProblem<'a> {
    pub kind: BlockKind,
    pub weight: &'a [f64],
    pub bias: &'a [f64],
    pub inputs: &'a [Vec<f64>],
    pub targets: &'a [Vec<f64>],
}

impl BlockProblem<'_> {
    fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::pre("calibration set is empty"));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Shape(format!("{} inputs vs {} targets", self.inputs.len(), self.targets.len())));
        }
        let (ni, no) = (self.kind.input_len(), self.kind.output_len());
        if self.inputs.iter().any(|x| x.len() != ni) || self.targets.iter().any(|y| y.len() != no) {
            return Err(Error::Shape("calibration sample size does not match the block".into()));
        }
        Ok(())
    }
}

/// Scales from the block's weights and its calibration inputs.
pub fn init_block_quantizers(
    problem: &BlockProblem,
    weight_bits: u32,
    act_bits: u32,
    p: f64,
    per_channel: bool,
) -> Result<BlockQuantizers> {
    problem.validate()?;
    let channels = if per_channel { problem.kind.channels() } else { 1 };
    let weight = init_weight_quantizer(problem.weight, channels, weight_bits)?;
    let samples: Vec<f64> = problem.inputs.iter().flatten().copied().collect();
    let act = init_act_quantizer(&samples, act_bits, p)?;
    Ok(BlockQuantizers { weight, act })
}

/// Per-sample reconstruction loss is the squared error summed over channels
/// and averaged over spatial positions; this is the factor `1/positions`.
pub fn position_weight(kind: BlockKind) -> f64 {
    kind.channels() as f64 / kind.output_len() as f64
}

/// Forward output of the quantized block with explicit weights.
pub fn block_output(kind: BlockKind, act: &ActQuantizer, w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let xq: Vec<f64> = x.iter().map(|&v| act.apply(v)).collect();
    kind.forward(w, b, &xq).out
}

/// Mean over samples of the reconstruction loss with thresholded rounding.
pub fn hard_mse(problem: &BlockProblem, q: &BlockQuantizers) -> f64 {
    let w = q.weight.hard_weights(problem.weight);
    let pw = position_weight(problem.kind);
    let total: f64 = problem
        .inputs
        .iter()
        .zip(problem.targets)
        .map(|(x, y)| {
            let out = block_output(problem.kind, &q.act, &w, problem.bias, x);
            pw * out.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum();
    total / problem.inputs.len() as f64
}

/// Soft-path quantities shared by all samples of a step.
struct SoftWeights {
    w: Vec<f64>,
    /// `∂ŵ/∂V`.
    dv: Vec<f64>,
}

fn soft_weights(problem: &BlockProblem, q: &WeightQuantizer) -> SoftWeights {
    let per = problem.weight.len() / q.channels();
    let mut w = Vec::with_capacity(problem.weight.len());
    let mut dv = Vec::with_capacity(problem.weight.len());
    for (k, (&wk, &vk)) in problem.weight.iter().zip(&q.v).enumerate() {
        let c = k / per;
        let s = q.scale[c];
        let raw = (wk / q.base[c]).floor() + rect_sigmoid(vk);
        let clamped = raw.clamp(q.qmin, q.qmax);
        w.push(s * clamped);
        dv.push(if raw > q.qmin && raw < q.qmax { s * rect_sigmoid_grad(vk) } else { 0.0 });
    }
    SoftWeights { w, dv }
}

/// Gradients of one sample's reconstruction loss.
/// Scale gradients are taken with respect to the log-scales.
struct SampleGrad {
    loss: f64,
    v: Vec<f64>,
    log_ws: Vec<f64>,
    log_as: f64,
}

fn sample_grad(problem: &BlockProblem, q: &BlockQuantizers, soft: &SoftWeights, i: usize) -> SampleGrad {
    let kind = problem.kind;
    let x = &problem.inputs[i];
    let xq: Vec<f64> = x.iter().map(|&v| q.act.apply(v)).collect();
    let cache = kind.forward(&soft.w, problem.bias, &xq);
    let resid: Vec<f64> = cache.out.iter().zip(&problem.targets[i]).map(|(a, b)| a - b).collect();
    let pw = position_weight(kind);
    let loss = pw * resid.iter().map(|r| r * r).sum::<f64>();
    let dout: Vec<f64> = resid.iter().map(|r| 2.0 * pw * r).collect();
    let mut dw = vec![0.0; soft.w.len()];
    let mut db = vec![0.0; problem.bias.len()];
    let dx = kind.backward(&soft.w, &xq, &cache, &dout, &mut dw, &mut db, true).expect("input gradient");
    let per = dw.len() / q.weight.channels();
    let v = dw.iter().zip(&soft.dv).map(|(g, d)| g * d).collect();
    let log_ws = (0..q.weight.channels())
        .map(|c| (c * per..(c + 1) * per).map(|k| dw[k] * soft.w[k]).sum())
        .collect();
    let log_as = q.act.scale * dx.iter().zip(x).map(|(g, &xv)| g * q.act.scale_grad(xv)).sum::<f64>();
    SampleGrad { loss, v, log_ws, log_as }
}

fn sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Per-group mean over `idx` of the per-sample squared gradient norms, in the
/// order (activation scale, weight rounding, weight scale).
pub fn grad_sq_norms(problem: &BlockProblem, q: &BlockQuantizers, idx: &[usize]) -> [f64; 3] {
    let soft = soft_weights(problem, &q.weight);
    let mut acc = [0.0; 3];
    for &i in idx {
        let g = sample_grad(problem, q, &soft, i);
        acc[0] += g.log_as * g.log_as;
        acc[1] += sq(&g.v);
        acc[2] += sq(&g.log_ws);
    }
    acc.map(|a| a / idx.len() as f64)
}

/// Mean soft-path loss over `idx` plus `reg_weight ·` regularizer when `beta`
/// is set. Used by gradient checks.
pub fn soft_loss(problem: &BlockProblem, q: &BlockQuantizers, idx: &[usize], reg: Option<(f64, f64)>) -> f64 {
    let soft = soft_weights(problem, &q.weight);
    let pw = position_weight(problem.kind);
    let data: f64 = idx
        .iter()
        .map(|&i| {
            let out = block_output(problem.kind, &q.act, &soft.w, problem.bias, &problem.inputs[i]);
            pw * out.iter().zip(&problem.targets[i]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / idx.len() as f64;
    data + reg.map_or(0.0, |(lambda, beta)| lambda * q.weight.regularizer(beta))
}

/// Analytic gradient of [`soft_loss`] with respect to `(V, log weight scales,
/// log activation scale)`.
pub fn soft_loss_grad(
    problem: &BlockProblem,
    q: &BlockQuantizers,
    idx: &[usize],
    reg: Option<(f64, f64)>,
) -> (Vec<f64>, Vec<f64>, f64) {
    let soft = soft_weights(problem, &q.weight);
    let mut gv = vec![0.0; q.weight.v.len()];
    let mut gs = vec![0.0; q.weight.channels()];
    let mut ga = 0.0;
    let inv = 1.0 / idx.len() as f64;
    for &i in idx {
        let g = sample_grad(problem, q, &soft, i);
        gv.iter_mut().zip(&g.v).for_each(|(a, b)| *a += inv * b);
        gs.iter_mut().zip(&g.log_ws).for_each(|(a, b)| *a += inv * b);
        ga += inv * g.log_as;
    }
    if let Some((lambda, beta)) = reg {
        for (a, &v) in gv.iter_mut().zip(&q.weight.v) {
            *a += lambda * round_reg_grad_h(rect_sigmoid(v), beta) * rect_sigmoid_grad(v);
        }
    }
    (gv, gs, ga)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOutcome {
    pub quantizers: BlockQuantizers,
    pub trace: GradTrace,
    /// Hard-rounded reconstruction MSE with the initial quantizers.
    pub init_mse: f64,
    /// Hard-rounded reconstruction MSE of the returned quantizers.
    pub final_mse: f64,
    /// True when optimisation made things worse and the initial quantizers were kept.
    pub reverted: bool,
}

/// Learns rounding and scales of one block; see [`calibrate_block_with`].
pub fn calibrate_block(
    problem: &BlockProblem,
    init: BlockQuantizers,
    cfg: &QuantConfig,
    block: usize,
    rng: &mut RngStream,
) -> Result<CalibrationOutcome> {
    calibrate_block_with(problem, init, cfg, block, rng, |_, _, _| {})
}

/// Adam on the soft-rounding loss plus the annealed rounding regularizer.
/// `observe(step, quantizers, batch)` runs before each update with the
/// parameters the step's gradients are evaluated at. Rounding is finalised
/// by thresholding; if the result reconstructs worse than the initial
/// nearest-rounding quantizers, those are returned instead.
pub fn calibrate_block_with(
    problem: &BlockProblem,
    init: BlockQuantizers,
    cfg: &QuantConfig,
    block: usize,
    rng: &mut RngStream,
    mut observe: impl FnMut(usize, &BlockQuantizers, &[usize]),
) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    problem.validate()?;
    let n_total = problem.inputs.len();
    let n = cfg.batch_size.min(n_total);
    let init_mse = hard_mse(problem, &init);
    let mut q = init.clone();
    // scales are learned as log-multipliers of their initial values
    let (ws0, as0) = (init.weight.scale.clone(), init.act.scale);
    let mut log_ws = vec![0.0; ws0.len()];
    let mut log_as = [0.0];
    let mut adam_v = Adam::new(q.weight.v.len());
    let mut adam_ws = Adam::new(log_ws.len());
    let mut adam_as = Adam::new(1);
    let mut steps = Vec::with_capacity(cfg.steps);

    for t in 0..cfg.steps {
        let idx = rng.choose_distinct(n_total, n);
        observe(t, &q, &idx);
        let soft = soft_weights(problem, &q.weight);
        let mut gv = vec![0.0; q.weight.v.len()];
        let mut gs = vec![0.0; log_ws.len()];
        let mut ga = 0.0;
        let mut norms = [0.0; 3];
        let mut loss = 0.0;
        let grads: Vec<SampleGrad> = idx.par_iter().map(|&i| sample_grad(problem, &q, &soft, i)).collect();
        for g in grads {
            loss += g.loss;
            norms[0] += g.log_as * g.log_as;
            norms[1] += sq(&g.v);
            norms[2] += sq(&g.log_ws);
            gv.iter_mut().zip(&g.v).for_each(|(a, b)| *a += b);
            gs.iter_mut().zip(&g.log_ws).for_each(|(a, b)| *a += b);
            ga += g.log_as;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t });
        }
        let inv = 1.0 / n as f64;
        gv.iter_mut().for_each(|a| *a *= inv);
        gs.iter_mut().for_each(|a| *a *= inv);
        ga *= inv;
        let gamma = cfg.step_size(t);
        steps.push(GradStep {
            step: t,
            act_scale: norms[0] * inv,
            weight_rounding: norms[1] * inv,
            weight_scale: norms[2] * inv,
            gamma,
            sigma: cfg.sigma,
            n,
        });
        if let Some(beta) = cfg.beta(t) {
            for (a, &v) in gv.iter_mut().zip(&q.weight.v) {
                *a += cfg.reg_weight * round_reg_grad_h(rect_sigmoid(v), beta) * rect_sigmoid_grad(v);
            }
        }
        adam_v.step(&mut q.weight.v, &gv, gamma);
        if cfg.learn_weight_scale {
            adam_ws.step(&mut log_ws, &gs, gamma);
            for ((s, s0), l) in q.weight.scale.iter_mut().zip(&ws0).zip(&log_ws) {
                *s = s0 * l.exp();
            }
        }
        if cfg.learn_act_scale {
            adam_as.step(&mut log_as, &[ga], gamma);
            q.act.scale = as0 * log_as[0].exp();
        }
    }

    q.weight.finalize();
    let final_mse = hard_mse(problem, &q);
    if !final_mse.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }
    let trace = GradTrace { block, steps };
    if final_mse > init_mse {
        let mut kept = init;
        kept.weight.finalize();
        let kept_mse = hard_mse(problem, &kept);
        return Ok(CalibrationOutcome { quantizers: kept, trace, init_mse, final_mse: kept_mse, reverted: true });
    }
    Ok(CalibrationOutcome { quantizers: q, trace, init_mse, final_mse, reverted: false })
}
