//! The desk-scale classifier: two conv blocks, a penultimate dense layer whose
//! ReLU output is the feature vector, and a linear classifier. Forward and
//! backward passes are written out by hand in `f64`.

pub mod checkpoint;
mod layers;
mod train;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::world::{LabeledSet, SoftLabel};

pub use layers::{BlockCache, BlockKind};
pub use train::{train_reference, TrainConfig, TrainLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Input `channels × height × width`.
    pub input: [usize; 3],
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    pub d_feat: usize,
    pub num_classes: usize,
    pub init_seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self { input: [1, 16, 16], conv_channels: vec![4, 8], d_feat: 16, num_classes: 10, init_seed: 7 }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, mut h, mut w] = self.input;
        if c == 0 || self.d_feat == 0 || self.num_classes < 2 || self.conv_channels.iter().any(|&k| k == 0) {
            return Err(Error::config("model widths must be positive and num_classes >= 2"));
        }
        for _ in &self.conv_channels {
            if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                return Err(Error::config(format!("spatial size {h}×{w} cannot be pooled by 2")));
            }
            h /= 2;
            w /= 2;
        }
        Ok(())
    }

    /// Block layout; the second-to-last block produces the features.
    pub fn blocks(&self) -> Vec<BlockKind> {
        let [mut c, mut h, mut w] = self.input;
        let mut out = Vec::with_capacity(self.conv_channels.len() + 2);
        for &k in &self.conv_channels {
            out.push(BlockKind::Conv { in_ch: c, out_ch: k, height: h, width: w });
            c = k;
            h /= 2;
            w /= 2;
        }
        out.push(BlockKind::Linear { inputs: c * h * w, outputs: self.d_feat, relu: true });
        out.push(BlockKind::Linear { inputs: self.d_feat, outputs: self.num_classes, relu: false });
        out
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn feature_block(&self) -> usize {
        self.conv_channels.len()
    }

    pub fn spec_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("model spec serializes")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub spec: ModelSpec,
    pub blocks: Vec<BlockKind>,
    pub layers: Vec<LayerParams>,
    /// Set once training is done; frozen parameters reject updates.
    pub frozen: bool,
}

/// Per-layer gradients, laid out like [`ModelParams::layers`].
pub type Gradients = Vec<LayerParams>;

impl ModelParams {
    /// He-normal weights, zero biases.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let blocks = spec.blocks();
        let mut rng = RngStream::labeled(spec.init_seed, "model-init");
        let layers = blocks
            .iter()
            .map(|b| {
                let std = (2.0 / b.fan_in() as f64).sqrt();
                let shape = b.weight_shape();
                LayerParams {
                    weight: Tensor::from_fn(&shape, |_| std * rng.normal()),
                    bias: Tensor::zeros(&[b.channels()]),
                }
            })
            .collect();
        Ok(Self { spec: spec.clone(), blocks, layers, frozen: false })
    }

    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        let mut p = Self::init(spec)?;
        for l in &mut p.layers {
            l.weight = Tensor::zeros(l.weight.shape());
            l.bias = Tensor::zeros(l.bias.shape());
        }
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    pub fn zero_grads(&self) -> Gradients {
        self.layers
            .iter()
            .map(|l| LayerParams { weight: Tensor::zeros(l.weight.shape()), bias: Tensor::zeros(l.bias.shape()) })
            .collect()
    }

    /// `θ ← θ + c·g`.
    pub fn axpy(&mut self, c: f64, g: &Gradients) -> Result<()> {
        if self.frozen {
            return Err(Error::pre("parameters are frozen"));
        }
        for (l, d) in self.layers.iter_mut().zip(g) {
            for (a, b) in l.weight.data_mut().iter_mut().zip(d.weight.data()) {
                *a += c * b;
            }
            for (a, b) in l.bias.data_mut().iter_mut().zip(d.bias.data()) {
                *a += c * b;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let want = self.spec.input;
        if batch.rank() != 4 || batch.shape()[1..] != want {
            return Err(Error::Shape(format!("batch {:?} does not match input {want:?}", batch.shape())));
        }
        Ok(())
    }

    /// Runs one sample through every block and returns the per-block caches.
    pub fn forward_sample(&self, x: &[f64]) -> Vec<BlockCache> {
        let mut caches: Vec<BlockCache> = Vec::with_capacity(self.blocks.len());
        for (b, l) in self.blocks.iter().zip(&self.layers) {
            let input = caches.last().map_or(x, |c| c.out.as_slice());
            caches.push(b.forward(l.weight.data(), l.bias.data(), input));
        }
        caches
    }

    /// Output of blocks `0..=block` for one sample.
    pub fn forward_prefix(&self, x: &[f64], block: usize) -> Vec<f64> {
        let mut cur = x.to_vec();
        for (b, l) in self.blocks.iter().zip(&self.layers).take(block + 1) {
            cur = b.forward(l.weight.data(), l.bias.data(), &cur).out;
        }
        cur
    }

    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Vec<Vec<BlockCache>>)> {
        self.check_batch(batch)?;
        let n = batch.rows();
        let k = self.spec.num_classes;
        let mut logits = Vec::with_capacity(n * k);
        let mut caches = Vec::with_capacity(n);
        for i in 0..n {
            let c = self.forward_sample(batch.row(i));
            logits.extend_from_slice(&c.last().expect("at least one block").out);
            caches.push(c);
        }
        Ok((Tensor::new(vec![n, k], logits)?, caches))
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }

    /// Backpropagates `dlogits` (one row per sample) through the cached forward
    /// pass, accumulating into `grads`.
    pub fn backward_sample(&self, x: &[f64], caches: &[BlockCache], dlogits: &[f64], grads: &mut Gradients) {
        let mut dout = dlogits.to_vec();
        for bi in (0..self.blocks.len()).rev() {
            let input = if bi == 0 { x } else { caches[bi - 1].out.as_slice() };
            let g = &mut grads[bi];
            let (dw, db) = (g.weight.data_mut(), g.bias.data_mut());
            let dx = self.blocks[bi].backward(self.layers[bi].weight.data(), input, &caches[bi], &dout, dw, db, bi > 0);
            if let Some(dx) = dx {
                dout = dx;
            }
        }
    }

    /// Mean loss over the batch and its gradient.
    pub fn loss_and_grad(&self, batch: &Tensor, targets: &[SoftLabel], loss: Loss) -> Result<(f64, Gradients)> {
        self.check_batch(batch)?;
        if targets.len() != batch.rows() {
            return Err(Error::Shape(format!("{} samples but {} targets", batch.rows(), targets.len())));
        }
        let n = batch.rows();
        let mut grads = self.zero_grads();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let x = batch.row(i);
            let caches = self.forward_sample(x);
            let z = &caches.last().expect("blocks").out;
            let (l, mut dz) = loss.value_and_grad(z, t);
            total += l;
            dz.iter_mut().for_each(|v| *v /= n as f64);
            self.backward_sample(x, &caches, &dz, &mut grads);
        }
        Ok((total / n as f64, grads))
    }

    pub fn mean_loss(&self, batch: &Tensor, targets: &[SoftLabel], loss: Loss) -> Result<f64> {
        let logits = self.logits(batch)?;
        if targets.len() != logits.rows() {
            return Err(Error::Shape(format!("{} samples but {} targets", logits.rows(), targets.len())));
        }
        let s: f64 = targets.iter().enumerate().map(|(i, t)| loss.value_and_grad(logits.row(i), t).0).sum();
        Ok(s / targets.len() as f64)
    }

    /// Penultimate activations (after ReLU), `n × d_feat`.
    pub fn extract_features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let fb = self.spec.feature_block();
        let n = batch.rows();
        let mut data = Vec::with_capacity(n * self.spec.d_feat);
        for i in 0..n {
            data.extend(self.forward_prefix(batch.row(i), fb));
        }
        Tensor::new(vec![n, self.spec.d_feat], data)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
    }

    /// Top-1 accuracy against the dominant class of each label.
    pub fn accuracy(&self, set: &LabeledSet) -> Result<f64> {
        if set.is_empty() {
            return Err(Error::pre("accuracy of an empty set"));
        }
        let pred = self.predict(&set.images)?;
        let hits = pred.iter().zip(set.hard_labels()).filter(|(p, t)| **p == *t).count();
        Ok(hits as f64 / set.len() as f64)
    }

    /// Rows of the classifier weight matrix, one per class.
    pub fn class_vectors(&self) -> Tensor {
        self.layers.last().expect("classifier").weight.clone()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Per-sample loss, multiplied by `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    /// Cross-entropy of `softmax(z)` against a soft target.
    CrossEntropy { scale: f64 },
    /// Mean over classes of `(z_k − y_k)²`.
    Mse { scale: f64 },
}

impl Loss {
    pub const CE: Loss = Loss::CrossEntropy { scale: 1.0 };
    pub const MSE: Loss = Loss::Mse { scale: 1.0 };

    pub fn value_and_grad(&self, z: &[f64], target: &SoftLabel) -> (f64, Vec<f64>) {
        let y = target.dense(z.len());
        match *self {
            Loss::CrossEntropy { scale } => {
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                let value: f64 = y.iter().zip(z).map(|(yk, zk)| if *yk > 0.0 { yk * (lse - zk) } else { 0.0 }).sum();
                let grad = z.iter().zip(&y).map(|(zk, yk)| scale * ((zk - lse).exp() - yk)).collect();
                (scale * value, grad)
            }
            Loss::Mse { scale } => {
                let k = z.len() as f64;
                let value: f64 = z.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k;
                let grad = z.iter().zip(&y).map(|(a, b)| scale * 2.0 * (a - b) / k).collect();
                (scale * value, grad)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::Provenance;

    fn micro_spec() -> ModelSpec {
        ModelSpec { input: [1, 4, 4], conv_channels: vec![2], d_feat: 2, num_classes: 3, init_seed: 3 }
    }

    fn random_batch(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
        let mut r = RngStream::new(seed, 0);
        let [c, h, w] = spec.input;
        Tensor::from_fn(&[n, c, h, w], |_| r.uniform())
    }

    #[test]
    fn zero_model_gives_zero_logits() {
        let p = ModelParams::zeros(&ModelSpec::default()).unwrap();
        let (logits, _) = p.forward(&random_batch(&p.spec, 3, 1)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forward_is_batch_invariant_and_finite() {
        let p = ModelParams::init(&ModelSpec::default()).unwrap();
        let batch = random_batch(&p.spec, 8, 2);
        let all = p.logits(&batch).unwrap();
        assert!(all.all_finite());
        let one = p.logits(&batch.select_rows(&[5])).unwrap();
        assert_eq!(one.row(0), all.row(5));
        assert!(p.logits(&Tensor::zeros(&[2, 1, 8, 8])).is_err());
    }

    #[test]
    fn micro_model_size() {
        let p = ModelParams::init(&micro_spec()).unwrap();
        // conv 2·9+2, dense 8→2, classifier 2→3
        assert_eq!(p.num_params(), 20 + 18 + 9);
    }

    fn fd_check(loss: Loss) {
        let mut p = ModelParams::init(&micro_spec()).unwrap();
        // push biases positive so ReLU kinks are far from the evaluation point
        for l in &mut p.layers {
            l.bias = Tensor::full(l.bias.shape(), 0.3);
        }
        let batch = random_batch(&p.spec, 4, 9);
        let targets = vec![
            SoftLabel::hard(0),
            SoftLabel::from_weights(vec![(1, 0.25), (2, 0.75)]).unwrap(),
            SoftLabel::hard(2),
            SoftLabel::hard(1),
        ];
        let (_, grads) = p.loss_and_grad(&batch, &targets, loss).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for li in 0..p.layers.len() {
            for which in 0..2 {
                let len = if which == 0 { p.layers[li].weight.len() } else { p.layers[li].bias.len() };
                for j in 0..len {
                    let probe = |delta: f64| {
                        let mut q = p.clone();
                        let t = if which == 0 { &mut q.layers[li].weight } else { &mut q.layers[li].bias };
                        t.data_mut()[j] += delta;
                        q.mean_loss(&batch, &targets, loss).unwrap()
                    };
                    let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                    let g = if which == 0 { grads[li].weight.data()[j] } else { grads[li].bias.data()[j] };
                    let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        assert!(worst < 1e-7, "{loss:?}: max relative error {worst}");
    }

    #[test]
    fn gradients_match_finite_differences_ce() {
        fd_check(Loss::CE);
    }

    #[test]
    fn gradients_match_finite_differences_mse() {
        fd_check(Loss::MSE);
    }

    #[test]
    fn perfect_mse_fit_has_zero_gradient_and_scale_is_linear() {
        let spec = micro_spec();
        let mut p = ModelParams::zeros(&spec).unwrap();
        // classifier bias alone produces the one-hot target
        p.layers[2].bias = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let batch = random_batch(&spec, 3, 4);
        let t = vec![SoftLabel::hard(1); 3];
        let (l, g) = p.loss_and_grad(&batch, &t, Loss::MSE).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| x.weight.max_abs() == 0.0 && x.bias.max_abs() == 0.0));

        let p = ModelParams::init(&spec).unwrap();
        let (l1, g1) = p.loss_and_grad(&batch, &t, Loss::CrossEntropy { scale: 1.0 }).unwrap();
        let (l2, g2) = p.loss_and_grad(&batch, &t, Loss::CrossEntropy { scale: 2.0 }).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn features_have_expected_shape() {
        let p = ModelParams::init(&ModelSpec::default()).unwrap();
        let batch = random_batch(&p.spec, 5, 6);
        let f = p.extract_features(&batch).unwrap();
        assert_eq!(f.shape(), &[5, 16]);
        assert!(f.data().iter().all(|&v| v >= 0.0));
        let twice = Tensor::concat_rows(&[&batch.select_rows(&[0]), &batch.select_rows(&[0])]).unwrap();
        let g = p.extract_features(&twice).unwrap();
        assert_eq!(g.row(0), g.row(1));
    }

    #[test]
    fn accuracy_of_memorised_set() {
        let spec = micro_spec();
        let mut p = ModelParams::zeros(&spec).unwrap();
        p.layers[2].bias = Tensor::new(vec![3], vec![0.0, 0.0, 1.0]).unwrap();
        let set = LabeledSet::new(random_batch(&spec, 4, 1), vec![SoftLabel::hard(2); 4], Provenance::Real).unwrap();
        assert_eq!(p.accuracy(&set).unwrap(), 1.0);
        p.frozen = true;
        let g = p.zero_grads();
        assert!(p.axpy(1.0, &g).is_err());
    }
}
