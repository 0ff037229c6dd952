use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stretch constants of the rectified sigmoid.
pub const ZETA: f64 = 1.1;
pub const GAMMA: f64 = -0.1;
/// Smallest admissible scale; all-zero channels get exactly this.
pub const SCALE_FLOOR: f64 = 1e-8;
/// Magnitude written into finalized rounding variables, far enough out that
/// `h(V)` is exactly 0 or 1.
pub const FINAL_V: f64 = 1e3;

/// `x̂ = s·(clamp(round(x/s) + z, q_min, q_max) − z)`.
pub fn quantize_dequantize(x: f64, scale: f64, zero_point: f64, qmin: f64, qmax: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::pre(format!("quantizer scale must be positive, got {scale}")));
    }
    Ok(fake_quant(x, scale, zero_point, qmin, qmax))
}

#[inline]
pub(crate) fn fake_quant(x: f64, scale: f64, zero_point: f64, qmin: f64, qmax: f64) -> f64 {
    scale * (((x / scale).round() + zero_point).clamp(qmin, qmax) - zero_point)
}

/// `[−2^{b−1}, 2^{b−1} − 1]`.
pub fn signed_range(bits: u32) -> (f64, f64) {
    let half = (1u64 << (bits - 1)) as f64;
    (-half, half - 1.0)
}

/// `[0, 2^b − 1]`.
pub fn unsigned_range(bits: u32) -> (f64, f64) {
    (0.0, ((1u64 << bits) - 1) as f64)
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Rectified stretched sigmoid `clamp(σ(V)(ζ − γ) + γ, 0, 1)`.
pub fn rect_sigmoid(v: f64) -> f64 {
    // centred form keeps V = 0 at exactly 1/2, since (ζ + γ)/2 = 1/2
    ((sigmoid(v) - 0.5) * (ZETA - GAMMA) + 0.5).clamp(0.0, 1.0)
}

/// Derivative of [`rect_sigmoid`]; zero where the clamp is active.
pub fn rect_sigmoid_grad(v: f64) -> f64 {
    let s = sigmoid(v);
    let raw = s * (ZETA - GAMMA) + GAMMA;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        (ZETA - GAMMA) * s * (1.0 - s)
    }
}

/// `V` with `h(V) = h` for `h ∈ [0, 1)`.
pub fn inverse_rect_sigmoid(h: f64) -> f64 {
    let p = (h - GAMMA) / (ZETA - GAMMA);
    (p / (1.0 - p)).ln()
}

/// `1 − |2h − 1|^β`, zero at `h ∈ {0, 1}`.
pub fn round_reg(h: f64, beta: f64) -> f64 {
    1.0 - (2.0 * h - 1.0).abs().powf(beta)
}

pub fn round_reg_grad_h(h: f64, beta: f64) -> f64 {
    let d = 2.0 * h - 1.0;
    if d == 0.0 {
        return 0.0;
    }
    -beta * d.abs().powf(beta - 1.0) * 2.0 * d.signum()
}

/// Per-channel symmetric weight quantizer with learnable rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightQuantizer {
    pub bits: u32,
    /// One scale per output channel.
    pub scale: Vec<f64>,
    /// Scales at initialisation; the integer part `floor(w/base)` is taken
    /// against these so that learning `scale` does not move it.
    pub base: Vec<f64>,
    /// Rounding variables, same layout as the weight.
    pub v: Vec<f64>,
    pub qmin: f64,
    pub qmax: f64,
}

impl WeightQuantizer {
    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    /// Rounding offsets `h(V)`.
    pub fn offsets(&self) -> Vec<f64> {
        self.v.iter().map(|&v| rect_sigmoid(v)).collect()
    }

    /// `s·clamp(floor(w/s₀) + h(V), q_min, q_max)` per element.
    pub fn soft_weights(&self, w: &[f64]) -> Vec<f64> {
        let per = w.len() / self.channels();
        w.iter()
            .zip(&self.v)
            .enumerate()
            .map(|(k, (&wk, &vk))| {
                let c = k / per;
                self.scale[c] * ((wk / self.base[c]).floor() + rect_sigmoid(vk)).clamp(self.qmin, self.qmax)
            })
            .collect()
    }

    /// Weights with each offset thresholded at 0.5.
    pub fn hard_weights(&self, w: &[f64]) -> Vec<f64> {
        let per = w.len() / self.channels();
        w.iter()
            .zip(&self.v)
            .enumerate()
            .map(|(k, (&wk, &vk))| {
                let c = k / per;
                let h = if rect_sigmoid(vk) >= 0.5 { 1.0 } else { 0.0 };
                self.scale[c] * ((wk / self.base[c]).floor() + h).clamp(self.qmin, self.qmax)
            })
            .collect()
    }

    /// `Σ (1 − |2h − 1|^β)` over all weights.
    pub fn regularizer(&self, beta: f64) -> f64 {
        self.v.iter().map(|&v| round_reg(rect_sigmoid(v), beta)).sum()
    }

    /// Snaps every rounding variable to the thresholded decision.
    pub fn finalize(&mut self) {
        for v in &mut self.v {
            *v = if rect_sigmoid(*v) >= 0.5 { FINAL_V } else { -FINAL_V };
        }
    }

    pub fn is_final(&self) -> bool {
        self.v.iter().all(|&v| {
            let h = rect_sigmoid(v);
            h == 0.0 || h == 1.0
        })
    }
}

/// Soft-rounded weights and the rounding regularizer at temperature `beta`.
pub fn soft_round(w: &[f64], q: &WeightQuantizer, beta: f64) -> Result<(Vec<f64>, f64)> {
    if !(beta > 0.0) {
        return Err(Error::pre(format!("beta must be positive, got {beta}")));
    }
    if w.len() != q.v.len() || w.len() % q.channels() != 0 {
        return Err(Error::Shape(format!("{} weights vs {} rounding variables", w.len(), q.v.len())));
    }
    Ok((q.soft_weights(w), q.regularizer(beta)))
}

/// Per-tensor asymmetric activation quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActQuantizer {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
    pub qmin: f64,
    pub qmax: f64,
}

impl ActQuantizer {
    pub fn apply(&self, x: f64) -> f64 {
        fake_quant(x, self.scale, self.zero_point, self.qmin, self.qmax)
    }

    /// Straight-through derivative of [`ActQuantizer::apply`] with respect to the scale.
    pub fn scale_grad(&self, x: f64) -> f64 {
        let t = x / self.scale;
        let q = t.round() + self.zero_point;
        if q < self.qmin {
            self.qmin - self.zero_point
        } else if q > self.qmax {
            self.qmax - self.zero_point
        } else {
            t.round() - t
        }
    }
}

/// Scale per channel minimising the nearest-rounding MSE over the grid
/// `(max|w|/q_max)·f`, `f` in 100 evenly spaced points of `[0.4, 1.2]` plus
/// `f = 1`. Also returns `V` initialised to the fractional parts of `w/s`, so
/// thresholding reproduces nearest rounding.
pub fn init_weight_quantizer(w: &[f64], channels: usize, bits: u32) -> Result<WeightQuantizer> {
    if !(2..=8).contains(&bits) {
        return Err(Error::config(format!("weight bits {bits} outside [2, 8]")));
    }
    if channels == 0 || w.len() % channels != 0 {
        return Err(Error::Shape(format!("{} weights do not split into {channels} channels", w.len())));
    }
    let (qmin, qmax) = signed_range(bits);
    let per = w.len() / channels;
    let mut scale = Vec::with_capacity(channels);
    for c in 0..channels {
        let row = &w[c * per..(c + 1) * per];
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m == 0.0 {
            scale.push(SCALE_FLOOR);
            continue;
        }
        let base = m / qmax;
        let mut best = (f64::INFINITY, base);
        let grid = (0..100).map(|k| 0.4 + 0.8 * k as f64 / 99.0).chain(std::iter::once(1.0));
        for f in grid {
            let s = (base * f).max(SCALE_FLOOR);
            let err: f64 = row.iter().map(|&x| (x - fake_quant(x, s, 0.0, qmin, qmax)).powi(2)).sum();
            if err < best.0 {
                best = (err, s);
            }
        }
        scale.push(best.1);
    }
    let v = w
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let t = x / scale[k / per];
            inverse_rect_sigmoid(t - t.floor())
        })
        .collect();
    Ok(WeightQuantizer { bits, base: scale.clone(), scale, v, qmin, qmax })
}

/// Nearest-rank percentile of `values` (`p` in `(0, 1]`).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Unsigned quantizer whose range ends at the `p`-percentile of `|a|`; when
/// activations go negative the range starts at the `(1 − p)`-percentile and
/// the zero point shifts accordingly.
pub fn init_act_quantizer(samples: &[f64], bits: u32, p: f64) -> Result<ActQuantizer> {
    if !(2..=8).contains(&bits) {
        return Err(Error::config(format!("activation bits {bits} outside [2, 8]")));
    }
    if samples.is_empty() {
        return Err(Error::pre("no activation samples"));
    }
    let (qmin, qmax) = unsigned_range(bits);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    if lo >= 0.0 {
        let abs: Vec<f64> = samples.iter().map(|v| v.abs()).collect();
        let hi = percentile(&abs, p);
        let scale = if hi > 0.0 { hi / qmax } else { SCALE_FLOOR };
        return Ok(ActQuantizer { bits, scale, zero_point: 0.0, qmin, qmax });
    }
    let hi = percentile(samples, p).max(0.0);
    let lo = percentile(samples, 1.0 - p).min(0.0);
    let scale = ((hi - lo) / qmax).max(SCALE_FLOOR);
    let zero_point = (-lo / scale).round().clamp(qmin, qmax);
    Ok(ActQuantizer { bits, scale, zero_point, qmin, qmax })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_value() {
        let (lo, hi) = signed_range(4);
        assert_eq!((lo, hi), (-8.0, 7.0));
        let y = quantize_dequantize(0.26, 0.1, 0.0, lo, hi).unwrap();
        assert!((y - 0.3).abs() < 1e-15);
        assert!(quantize_dequantize(0.26, 0.0, 0.0, lo, hi).is_err());
        assert!(quantize_dequantize(0.26, -1.0, 0.0, lo, hi).is_err());
    }

    #[test]
    fn out_of_range_clamps() {
        let (lo, hi) = signed_range(4);
        assert_eq!(quantize_dequantize(5.0, 0.1, 0.0, lo, hi).unwrap(), 0.1 * 7.0);
        assert_eq!(quantize_dequantize(-5.0, 0.1, 0.0, lo, hi).unwrap(), -0.8);
    }

    proptest! {
        #[test]
        fn lattice_points_are_fixed(k in -8i32..=7, s in 1e-3f64..10.0) {
            let x = s * k as f64;
            let y = quantize_dequantize(x, s, 0.0, -8.0, 7.0).unwrap();
            prop_assert_eq!(y, x);
        }

        #[test]
        fn in_range_error_is_half_step(x in -7.9f64..6.9, s in 0.05f64..2.0) {
            let x = x * s;
            let y = quantize_dequantize(x, s, 0.0, -8.0, 7.0).unwrap();
            prop_assert!((y - x).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn rectified_sigmoid_values() {
        assert_eq!(rect_sigmoid(0.0), 0.5);
        assert_eq!(rect_sigmoid(FINAL_V), 1.0);
        assert_eq!(rect_sigmoid(-FINAL_V), 0.0);
        for h in [0.0, 0.1, 0.37, 0.5, 0.9] {
            assert!((rect_sigmoid(inverse_rect_sigmoid(h)) - h).abs() < 1e-12);
        }
        let v = 0.3;
        let fd = (rect_sigmoid(v + 1e-6) - rect_sigmoid(v - 1e-6)) / 2e-6;
        assert!((fd - rect_sigmoid_grad(v)).abs() < 1e-8);
        assert_eq!(rect_sigmoid_grad(50.0), 0.0);
    }

    #[test]
    fn regularizer_vanishes_on_binary_offsets() {
        let mut q = init_weight_quantizer(&[0.3, -0.7, 0.11, 0.5], 2, 4).unwrap();
        assert!(q.regularizer(2.0) > 0.0);
        q.finalize();
        assert!(q.is_final());
        assert_eq!(q.regularizer(2.0), 0.0);
        for h in [0.2, 0.6, 0.9] {
            let fd = (round_reg(h + 1e-6, 3.0) - round_reg(h - 1e-6, 3.0)) / 2e-6;
            assert!((fd - round_reg_grad_h(h, 3.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn soft_round_saturation() {
        let w = [0.26, -0.13];
        let mut q = WeightQuantizer { bits: 4, scale: vec![0.1], base: vec![0.1], v: vec![FINAL_V, -FINAL_V], qmin: -8.0, qmax: 7.0 };
        let (soft, reg) = soft_round(&w, &q, 2.0).unwrap();
        assert!((soft[0] - 0.3).abs() < 1e-15, "rounds up");
        assert!((soft[1] + 0.2).abs() < 1e-15, "rounds down");
        assert_eq!(reg, 0.0);
        assert!(soft_round(&w, &q, 0.0).is_err());
        q.v = vec![0.0, 0.0];
        let (soft, _) = soft_round(&w, &q, 2.0).unwrap();
        assert!((soft[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn weight_init_reproduces_nearest_rounding() {
        let w = [0.31, -0.52, 0.07, 0.94, -0.18, 0.66];
        let q = init_weight_quantizer(&w, 2, 4).unwrap();
        let soft = q.soft_weights(&w);
        for (a, b) in soft.iter().zip(&w) {
            assert!((a - b).abs() < 1e-12, "soft path starts at the FP weight");
        }
        let hard = q.hard_weights(&w);
        for (k, (&h, &x)) in hard.iter().zip(&w).enumerate() {
            let s = q.scale[k / 3];
            assert!((h - fake_quant(x, s, 0.0, q.qmin, q.qmax)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_on_lattice_get_exact_scale() {
        let s = 0.05;
        let w: Vec<f64> = [7, -3, 0, 2, -6, 5, 1, -7].iter().map(|&k| k as f64 * s).collect();
        let q = init_weight_quantizer(&w, 1, 4).unwrap();
        assert!((q.scale[0] - s).abs() < 1e-15);
        let err: f64 = q.hard_weights(&w).iter().zip(&w).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err < 1e-28);
    }

    #[test]
    fn zero_channel_gets_floor_scale() {
        let q = init_weight_quantizer(&[0.0, 0.0, 0.2, -0.4], 2, 2).unwrap();
        assert_eq!(q.scale[0], SCALE_FLOOR);
        assert!(q.soft_weights(&[0.0, 0.0, 0.2, -0.4]).iter().all(|v| v.is_finite()));
        assert_eq!(q.hard_weights(&[0.0, 0.0, 0.2, -0.4])[0], 0.0);
    }

    #[test]
    fn constant_activation_scale() {
        let a = vec![0.6; 500];
        let q = init_act_quantizer(&a, 4, 0.999).unwrap();
        assert!((q.scale - 0.6 / 15.0).abs() < 1e-15);
        assert_eq!(q.zero_point, 0.0);
        assert!((q.apply(0.6) - 0.6).abs() < 1e-12);
        let z = init_act_quantizer(&[0.0; 10], 4, 0.999).unwrap();
        assert_eq!(z.scale, SCALE_FLOOR);
        let signed = init_act_quantizer(&[-1.0, -0.5, 0.0, 0.5, 1.0, 2.0], 4, 0.999).unwrap();
        assert!(signed.zero_point > 0.0);
        assert!((signed.apply(-1.0) + 1.0).abs() <= signed.scale);
    }

    #[test]
    fn act_scale_ste_gradient() {
        let q = ActQuantizer { bits: 4, scale: 0.1, zero_point: 0.0, qmin: 0.0, qmax: 15.0 };
        assert!((q.scale_grad(0.26) - (3.0 - 2.6)).abs() < 1e-12);
        assert_eq!(q.scale_grad(3.0), 15.0);
        assert_eq!(q.scale_grad(-1.0), 0.0);
    }
}
