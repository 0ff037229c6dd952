use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::calibrate::{
    block_output, calibrate_block, init_block_quantizers, BlockProblem, BlockQuantizers, GradTrace, ParamGroup,
    QuantConfig,
};
use super::quantizer::{signed_range, unsigned_range, ActQuantizer, WeightQuantizer, FINAL_V};
use crate::error::{Error, Result};
use crate::model::checkpoint::{fp_header, layer_tensors, params_from_tensors, read_checkpoint, write_checkpoint};
use crate::model::{argmax, ModelParams};
use crate::numerics::{RngStream, Tensor};
use crate::world::LabeledSet;

/// Full-precision model plus finalized quantizers for every block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub fp: ModelParams,
    pub quantizers: Vec<BlockQuantizers>,
    hard: Vec<Vec<f64>>,
}

/// Per-block calibration summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub weight_bits: u32,
    pub act_bits: u32,
    pub init_mse: f64,
    pub final_mse: f64,
    pub reverted: bool,
}

impl QuantizedModel {
    pub fn new(fp: ModelParams, quantizers: Vec<BlockQuantizers>) -> Result<Self> {
        if quantizers.len() != fp.layers.len() {
            return Err(Error::Shape(format!("{} quantizers for {} blocks", quantizers.len(), fp.layers.len())));
        }
        for (i, (q, l)) in quantizers.iter().zip(&fp.layers).enumerate() {
            let n = l.weight.len();
            if q.weight.v.len() != n || q.weight.channels() == 0 || n % q.weight.channels() != 0 {
                return Err(Error::Shape(format!("block {i}: quantizer does not match the weight")));
            }
            if q.weight.scale.iter().chain([&q.act.scale]).any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Data(format!("block {i}: non-positive scale")));
            }
        }
        let hard = quantizers.iter().zip(&fp.layers).map(|(q, l)| q.weight.hard_weights(l.weight.data())).collect();
        Ok(Self { fp, quantizers, hard })
    }

    pub fn hard_weights(&self, block: usize) -> &[f64] {
        &self.hard[block]
    }

    /// Output of quantized blocks `0..=block` for one sample.
    pub fn forward_prefix(&self, x: &[f64], block: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (b, kind) in self.fp.blocks.iter().enumerate().take(block + 1) {
            cur = block_output(*kind, &self.quantizers[b].act, &self.hard[b], self.fp.layers[b].bias.data(), &cur);
        }
        cur
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        let want = self.fp.spec.input;
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::Shape(format!("batch {:?} does not match input {want:?}", batch.shape())));
        }
        let last = self.fp.blocks.len() - 1;
        let n = batch.rows();
        let data = (0..n).flat_map(|i| self.forward_prefix(batch.row(i), last)).collect();
        Tensor::new(vec![n, self.fp.spec.num_classes], data)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let z = self.logits(batch)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }
}

/// Top-1 accuracy of the quantized model against the dominant label class.
pub fn eval_quantized(model: &QuantizedModel, set: &LabeledSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::pre("accuracy of an empty set"));
    }
    let pred = model.predict(&set.images)?;
    let hits = pred.iter().zip(set.hard_labels()).filter(|(p, t)| **p == *t).count();
    Ok(hits as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantization {
    pub model: QuantizedModel,
    pub traces: Vec<GradTrace>,
    pub blocks: Vec<BlockReport>,
}

/// Genie-M-style blockwise PTQ: blocks are calibrated in order, each on the
/// outputs of the already quantized blocks before it, against the
/// full-precision outputs of the same block.
pub fn quantize_model(
    params: &ModelParams,
    calib: &LabeledSet,
    cfg: &QuantConfig,
    rng: &RngStream,
) -> Result<Quantization> {
    cfg.validate()?;
    if calib.is_empty() {
        return Err(Error::pre("calibration set is empty"));
    }
    if calib.image_shape() != params.spec.input {
        return Err(Error::Shape(format!("calibration images {:?} vs model input {:?}", calib.image_shape(), params.spec.input)));
    }
    let count = params.blocks.len();
    let mut fp_in: Vec<Vec<f64>> = (0..calib.len()).map(|i| calib.images.row(i).to_vec()).collect();
    let mut q_in = fp_in.clone();
    let mut quantizers = Vec::with_capacity(count);
    let mut traces = Vec::with_capacity(count);
    let mut blocks = Vec::with_capacity(count);
    for (b, kind) in params.blocks.iter().copied().enumerate() {
        let layer = &params.layers[b];
        let (w, bias) = (layer.weight.data(), layer.bias.data());
        let targets: Vec<Vec<f64>> = fp_in.iter().map(|x| kind.forward(w, bias, x).out).collect();
        let problem = BlockProblem { kind, weight: w, bias, inputs: &q_in, targets: &targets };
        let (wb, ab) = cfg.bits_for(b, count);
        let init = init_block_quantizers(&problem, wb, ab, cfg.act_percentile, cfg.per_channel)?;
        let out = calibrate_block(&problem, init, cfg, b, &mut rng.substream(b as u64))?;
        let hard = out.quantizers.weight.hard_weights(w);
        q_in = q_in.iter().map(|x| block_output(kind, &out.quantizers.act, &hard, bias, x)).collect();
        fp_in = targets;
        blocks.push(BlockReport {
            block: b,
            weight_bits: wb,
            act_bits: ab,
            init_mse: out.init_mse,
            final_mse: out.final_mse,
            reverted: out.reverted,
        });
        quantizers.push(out.quantizers);
        traces.push(out.trace);
    }
    let mut fp = params.clone();
    fp.frozen = true;
    Ok(Quantization { model: QuantizedModel::new(fp, quantizers)?, traces, blocks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QuantizerMeta {
    weight_bits: u32,
    act_bits: u32,
}

/// Writes the FP checkpoint followed by, per block, the weight scales (rows:
/// learned, initial), the binary rounding offsets and `[act scale, act zero point]`.
pub fn save_quantized(path: &Path, model: &QuantizedModel, seed: u64) -> Result<()> {
    let mut header = fp_header(&model.fp, seed);
    header.kind = "quantized".into();
    let meta: Vec<QuantizerMeta> =
        model.quantizers.iter().map(|q| QuantizerMeta { weight_bits: q.weight.bits, act_bits: q.act.bits }).collect();
    header.extra = serde_json::json!({ "quantizers": meta });
    let mut extra = Vec::new();
    for (i, q) in model.quantizers.iter().enumerate() {
        header.tensors.extend([format!("block{i}.weight_scale"), format!("block{i}.rounding"), format!("block{i}.act")]);
        let scales = q.weight.scale.iter().chain(&q.weight.base).copied().collect();
        extra.push(Tensor::new(vec![2, q.weight.channels()], scales)?);
        extra.push(Tensor::new(vec![q.weight.v.len()], q.weight.offsets().iter().map(|h| h.round()).collect())?);
        extra.push(Tensor::new(vec![2], vec![q.act.scale, q.act.zero_point])?);
    }
    let mut tensors = layer_tensors(&model.fp);
    tensors.extend(extra.iter());
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, &header, &tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_quantized(path: &Path) -> Result<(QuantizedModel, u64)> {
    let mut r = BufReader::new(File::open(path)?);
    let (header, tensors) = read_checkpoint(&mut r)?;
    if header.kind != "quantized" {
        return Err(Error::Format(format!("expected a quantized checkpoint, found {:?}", header.kind)));
    }
    let fp = params_from_tensors(&header.spec, &tensors)?;
    let meta: Vec<QuantizerMeta> = serde_json::from_value(
        header.extra.get("quantizers").cloned().ok_or_else(|| Error::Format("quantized checkpoint lacks quantizer metadata".into()))?,
    )?;
    let n = fp.layers.len();
    if meta.len() != n || tensors.len() != 5 * n {
        return Err(Error::Format("quantizer section does not match the model".into()));
    }
    let mut quantizers = Vec::with_capacity(n);
    for (i, m) in meta.iter().enumerate() {
        let t = &tensors[2 * n + 3 * i..2 * n + 3 * i + 3];
        if t[0].rank() != 2 || t[0].rows() != 2 || t[2].len() != 2 || t[1].data().iter().any(|&h| h != 0.0 && h != 1.0) {
            return Err(Error::Format(format!("block {i}: malformed quantizer tensors")));
        }
        let (qmin, qmax) = signed_range(m.weight_bits);
        let (aqmin, aqmax) = unsigned_range(m.act_bits);
        let v = t[1].data().iter().map(|&h| if h == 1.0 { FINAL_V } else { -FINAL_V }).collect();
        quantizers.push(BlockQuantizers {
            weight: WeightQuantizer {
                bits: m.weight_bits,
                scale: t[0].row(0).to_vec(),
                base: t[0].row(1).to_vec(),
                v,
                qmin,
                qmax,
            },
            act: ActQuantizer {
                bits: m.act_bits,
                scale: t[2].data()[0],
                zero_point: t[2].data()[1],
                qmin: aqmin,
                qmax: aqmax,
            },
        });
    }
    Ok((QuantizedModel::new(fp, quantizers)?, header.seed))
}

/// One row per (block, step, group) with columns
/// `block, step, group, grad_sq_norm, gamma_t, sigma_t, n`.
pub fn write_traces_csv<W: Write>(w: W, traces: &[GradTrace]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["block", "step", "group", "grad_sq_norm", "gamma_t", "sigma_t", "n"])
        .map_err(csv_err)?;
    for t in traces {
        for s in &t.steps {
            for g in ParamGroup::ALL {
                out.write_record([
                    t.block.to_string(),
                    s.step.to_string(),
                    g.name().to_string(),
                    s.group(g).to_string(),
                    s.gamma.to_string(),
                    s.sigma.to_string(),
                    s.n.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;
    use crate::world::{Provenance, SoftLabel};

    fn micro() -> (ModelParams, LabeledSet) {
        let spec = ModelSpec { input: [1, 4, 4], conv_channels: vec![2], d_feat: 3, num_classes: 3, init_seed: 4 };
        let params = ModelParams::init(&spec).unwrap();
        let mut r = RngStream::new(3, 0);
        let images = Tensor::from_fn(&[12, 1, 4, 4], |_| r.uniform());
        let labels = (0..12).map(|i| SoftLabel::hard(i % 3)).collect();
        let set = LabeledSet::new(images, labels, Provenance::Real).unwrap();
        (params, set)
    }

    #[test]
    fn eight_bit_tracks_full_precision_logits() {
        let (params, set) = micro();
        let cfg = QuantConfig { weight_bits: 8, act_bits: 8, steps: 20, ..QuantConfig::default() };
        let q = quantize_model(&params, &set, &cfg, &RngStream::new(1, 0)).unwrap();
        let a = params.logits(&set.images).unwrap();
        let b = q.model.logits(&set.images).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() < 0.05 * a.max_abs().max(1.0));
        assert_eq!(q.traces.len(), 3);
        assert!(q.blocks.iter().all(|r| r.final_mse <= r.init_mse));
        assert!(q.model.quantizers.iter().all(|b| b.weight.is_final()));
    }

    #[test]
    fn size_one_calibration_runs() {
        let (params, set) = micro();
        let one = set.select(&[0]);
        let cfg = QuantConfig { steps: 5, ..QuantConfig::default() };
        let q = quantize_model(&params, &one, &cfg, &RngStream::new(1, 0)).unwrap();
        assert!(eval_quantized(&q.model, &set).is_ok());
    }

    #[test]
    fn checkpoint_round_trip_and_csv() {
        let (params, set) = micro();
        let cfg = QuantConfig { steps: 8, keep_first_last_8bit: false, ..QuantConfig::default() };
        let q = quantize_model(&params, &set, &cfg, &RngStream::new(2, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.ckpt");
        save_quantized(&path, &q.model, 9).unwrap();
        let (back, seed) = load_quantized(&path).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(back.logits(&set.images).unwrap(), q.model.logits(&set.images).unwrap());
        assert!(crate::model::checkpoint::load_model(&path).is_ok());

        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &q.traces).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "block,step,group,grad_sq_norm,gamma_t,sigma_t,n");
        assert_eq!(lines.count(), 3 * 8 * 3);
    }

    #[test]
    fn fp_checkpoint_is_not_quantized() {
        let (params, _) = micro();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fp.ckpt");
        crate::model::checkpoint::save_model(&path, &params, 1).unwrap();
        assert!(matches!(load_quantized(&path), Err(Error::Format(_))));
    }

    #[test]
    fn mismatched_calibration_shape_is_rejected() {
        let (params, _) = micro();
        let images = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 / 18.0);
        let set = LabeledSet::new(images, vec![SoftLabel::hard(0); 2], Provenance::Real).unwrap();
        assert!(matches!(quantize_model(&params, &set, &QuantConfig::default(), &RngStream::new(0, 0)), Err(Error::Shape(_))));
    }
}
