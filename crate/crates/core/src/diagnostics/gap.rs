use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Loss, ModelParams};
use crate::numerics::Tensor;
use crate::quant::{GradTrace, ParamGroup, QuantizedModel};
use crate::world::{LabeledSet, Provenance};

/// Anything that maps an image batch to logits.
pub trait Classifier {
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;
}

impl Classifier for ModelParams {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        ModelParams::logits(self, batch)
    }
}

impl Classifier for QuantizedModel {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        QuantizedModel::logits(self, batch)
    }
}

/// Mean per-sample loss of `model` on `set` against the set's own labels.
pub fn mean_loss(model: &impl Classifier, set: &LabeledSet, loss: Loss) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::pre("loss of an empty set"));
    }
    let z = model.logits(&set.images)?;
    let total: f64 = set.labels.iter().enumerate().map(|(i, y)| loss.value_and_grad(z.row(i), y).0).sum();
    Ok(total / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Test loss minus calibration loss.
    pub gap: f64,
    pub calibration_loss: f64,
    pub test_loss: f64,
    pub bound: Option<f64>,
    pub provenance: Provenance,
}

/// Empirical generalization gap: mean test loss minus mean calibration loss.
pub fn empirical_gap(model: &impl Classifier, calib: &LabeledSet, test: &LabeledSet, loss: Loss) -> Result<GapReport> {
    let calibration_loss = mean_loss(model, calib, loss)?;
    let test_loss = mean_loss(model, test, loss)?;
    Ok(GapReport { gap: test_loss - calibration_loss, calibration_loss, test_loss, bound: None, provenance: calib.provenance })
}

/// `Σ_t γ_t² g(t) / σ_t²` over the given groups of every trace.
pub fn bound_integrand(traces: &[GradTrace], groups: &[ParamGroup]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::pre("no gradient traces"));
    }
    let mut total = 0.0;
    for t in traces {
        for s in &t.steps {
            for &g in groups {
                let v = s.group(g);
                if v < 0.0 || !v.is_finite() {
                    return Err(Error::Data(format!("block {} step {}: invalid squared norm {v}", t.block, s.step)));
                }
                if !(s.sigma > 0.0) {
                    return Err(Error::Data(format!("block {} step {}: sigma must be positive", t.block, s.step)));
                }
                total += s.gamma * s.gamma * v / (s.sigma * s.sigma);
            }
        }
    }
    Ok(total)
}

/// Gradient-norm bound proxy `(1/N)·sqrt(Σ_t γ_t² g(t) / σ_t²)`, accumulated
/// over all groups and blocks, for a calibration set of size `n`.
pub fn gap_bound(traces: &[GradTrace], n: usize) -> Result<f64> {
    gap_bound_groups(traces, n, &ParamGroup::ALL)
}

pub fn gap_bound_groups(traces: &[GradTrace], n: usize, groups: &[ParamGroup]) -> Result<f64> {
    if n == 0 {
        return Err(Error::pre("calibration set size must be positive"));
    }
    Ok(bound_integrand(traces, groups)?.sqrt() / n as f64)
}

/// Block-reconstruction variant of the gap: mean reconstruction error of
/// `block` on the test images minus that on the calibration images, both
/// measured against the full-precision block fed with full-precision inputs.
pub fn block_mse_gap(model: &QuantizedModel, calib: &LabeledSet, test: &LabeledSet, block: usize) -> Result<f64> {
    if block >= model.fp.blocks.len() {
        return Err(Error::pre(format!("block {block} out of range")));
    }
    let err = |set: &LabeledSet| -> Result<f64> {
        if set.is_empty() {
            return Err(Error::pre("loss of an empty set"));
        }
        let total: f64 = (0..set.len())
            .map(|i| {
                let x = set.images.row(i);
                let a = model.fp.forward_prefix(x, block);
                let b = model.forward_prefix(x, block);
                a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
            })
            .sum();
        Ok(total / set.len() as f64)
    };
    Ok(err(test)? - err(calib)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{train_reference, ModelSpec, TrainConfig};
    use crate::numerics::RngStream;
    use crate::quant::{quantize_model, GradStep, QuantConfig};
    use crate::world::{SoftLabel};

    fn trace(gs: &[f64]) -> GradTrace {
        GradTrace {
            block: 0,
            steps: gs
                .iter()
                .enumerate()
                .map(|(t, &g)| GradStep { step: t, act_scale: g, weight_rounding: 0.0, weight_scale: 0.0, gamma: 1.0, sigma: 1.0, n: 1 })
                .collect(),
        }
    }

    #[test]
    fn bound_hand_values() {
        assert_eq!(gap_bound(&[trace(&[0.0, 0.0])], 5).unwrap(), 0.0);
        assert!((gap_bound(&[trace(&[4.0])], 2).unwrap() - 1.0).abs() < 1e-15);
        let a = gap_bound(&[trace(&[1.0, 2.0, 3.0])], 7).unwrap();
        let b = gap_bound(&[trace(&[2.0, 4.0, 6.0])], 7).unwrap();
        assert!((b / a - 2f64.sqrt()).abs() < 1e-12);
        assert!(gap_bound(&[trace(&[1.0, 2.5, 3.0])], 7).unwrap() >= a);
        assert!(matches!(gap_bound(&[trace(&[-1.0])], 1), Err(Error::Data(_))));
        assert!(gap_bound(&[], 1).is_err());
    }

    fn micro() -> (ModelParams, LabeledSet, LabeledSet) {
        let spec = ModelSpec { input: [1, 4, 4], conv_channels: vec![2], d_feat: 4, num_classes: 2, init_seed: 4 };
        let mut r = RngStream::new(3, 0);
        let make = |r: &mut RngStream, n: usize| {
            let images = Tensor::from_fn(&[n, 1, 4, 4], |_| r.uniform());
            let labels = (0..n).map(|_| SoftLabel::hard(r.below(2))).collect();
            LabeledSet::new(images, labels, Provenance::Real).unwrap()
        };
        let calib = make(&mut r, 8);
        let test = make(&mut r, 200);
        let cfg = TrainConfig { epochs: 300, batch_size: 8, lr: 0.1, ..TrainConfig::default() };
        let (params, _) = train_reference(&calib, None, &spec, &cfg, &mut RngStream::new(1, 0)).unwrap();
        (params, calib, test)
    }

    #[test]
    fn gap_is_difference_of_means() {
        let (params, calib, test) = micro();
        let r = empirical_gap(&params, &calib, &test, Loss::CE).unwrap();
        assert_eq!(r.gap, r.test_loss - r.calibration_loss);
        assert_eq!(r.calibration_loss, params.mean_loss(&calib.images, &calib.labels, Loss::CE).unwrap());
        let same = empirical_gap(&params, &calib, &calib, Loss::CE).unwrap();
        assert_eq!(same.gap, 0.0);
        let scaled = empirical_gap(&params, &calib, &test, Loss::CrossEntropy { scale: 3.0 }).unwrap();
        assert!((scaled.gap - 3.0 * r.gap).abs() < 1e-12 * r.gap.abs().max(1.0));
    }

    #[test]
    fn memorised_calibration_set_has_positive_gap() {
        // random labels on 8 samples can only be memorised
        let (params, calib, test) = micro();
        let q = quantize_model(&params, &calib, &QuantConfig { weight_bits: 8, act_bits: 8, steps: 50, ..QuantConfig::default() }, &RngStream::new(2, 0)).unwrap();
        let r = empirical_gap(&q.model, &calib, &test, Loss::CE).unwrap();
        assert!(r.gap > 0.0, "{r:?}");
        assert!(block_mse_gap(&q.model, &calib, &test, 0).is_ok());
    }
}
