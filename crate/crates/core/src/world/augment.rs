use serde::{Deserialize, Serialize};

use super::labeled::{LabeledSet, Provenance, SoftLabel};
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    MixupPixels,
    Cutmix,
    Resizemix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    /// Beta(α, α) parameter for mixup and cutmix.
    pub alpha: f64,
    /// Range of the pasted patch side, as a fraction of the frame side.
    pub resize_scale: (f64, f64),
    /// Weight kept by the base image, replacing the random draw when set.
    pub fixed_lambda: Option<f64>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { alpha: 1.0, resize_scale: (0.1, 0.8), fixed_lambda: None }
    }
}

impl AugmentParams {
    fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("augmentation alpha must be positive, got {}", self.alpha)));
        }
        let (lo, hi) = self.resize_scale;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("resize scale ({lo}, {hi}) must lie in (0, 1]")));
        }
        if let Some(l) = self.fixed_lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::config(format!("fixed lambda {l} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Produces one augmented sample per input: sample `i` is combined with a
/// uniformly drawn partner `j ≠ i`.
pub fn augment(set: &LabeledSet, kind: AugmentKind, params: &AugmentParams, rng: &mut RngStream) -> Result<LabeledSet> {
    params.validate()?;
    let n = set.len();
    if n < 2 {
        return Err(Error::pre(format!("augmentation needs at least 2 samples, got {n}")));
    }
    let [c, h, w] = set.image_shape();
    let mut data = Vec::with_capacity(set.images.len());
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut j = rng.below(n - 1);
        if j >= i {
            j += 1;
        }
        let (xi, xj) = (set.image(i), set.image(j));
        let (img, keep) = match kind {
            AugmentKind::MixupPixels => {
                let lambda = params.fixed_lambda.unwrap_or_else(|| rng.beta(params.alpha, params.alpha));
                let img: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect();
                (img, lambda)
            }
            AugmentKind::Cutmix => {
                let lambda = params.fixed_lambda.unwrap_or_else(|| rng.beta(params.alpha, params.alpha));
                let r = (1.0 - lambda).sqrt();
                let ph = (r * h as f64).round() as usize;
                let pw = (r * w as f64).round() as usize;
                let y0 = rng.below(h - ph + 1);
                let x0 = rng.below(w - pw + 1);
                let mut img = xi.to_vec();
                for plane in 0..c {
                    for y in y0..y0 + ph {
                        let row = (plane * h + y) * w;
                        img[row + x0..row + x0 + pw].copy_from_slice(&xj[row + x0..row + x0 + pw]);
                    }
                }
                (img, 1.0 - (ph * pw) as f64 / (h * w) as f64)
            }
            AugmentKind::Resizemix => {
                let tau = match params.fixed_lambda {
                    Some(l) => (1.0 - l).sqrt(),
                    None => rng.uniform_range(params.resize_scale.0, params.resize_scale.1),
                };
                let ph = ((tau * h as f64).round() as usize).clamp(1, h);
                let pw = ((tau * w as f64).round() as usize).clamp(1, w);
                let y0 = rng.below(h - ph + 1);
                let x0 = rng.below(w - pw + 1);
                let mut img = xi.to_vec();
                for plane in 0..c {
                    let src = &xj[plane * h * w..(plane + 1) * h * w];
                    let patch = resize_bilinear(src, h, w, ph, pw);
                    for y in 0..ph {
                        let row = (plane * h + y0 + y) * w + x0;
                        img[row..row + pw].copy_from_slice(&patch[y * pw..(y + 1) * pw]);
                    }
                }
                (img, 1.0 - (ph * pw) as f64 / (h * w) as f64)
            }
        };
        data.extend(img.into_iter().map(|v| v.clamp(0.0, 1.0)));
        labels.push(SoftLabel::mix(&set.labels[i], &set.labels[j], keep));
    }
    LabeledSet::new(Tensor::new(vec![n, c, h, w], data)?, labels, Provenance::Augmented)
}

/// Bilinear resampling of one `h × w` plane with half-pixel centres.
pub(crate) fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).clamp(0.0, (in_len - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, oh, h);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, ow, w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}
