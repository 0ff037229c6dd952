//! Procedural image universe.
//!
//! Each class owns one in-distribution visual concept and, if polysemous, one or
//! more off-distribution concepts. A concept is a band-limited random field
//! ("prototype"); real samples are the in-distribution prototype plus pixel noise.
//! The generator renders prompt records: single-class prompts resolve to an
//! off-distribution concept with probability `polysemy_bias`, multi-class prompts
//! compose one region per named class.
//!
//! How a text-to-image model blends two named classes is not characterised
//! anywhere we can measure, so the spatial split used here is a modelling choice;
//! [`BlendMode::Convex`] exists for comparison.

mod augment;
mod labeled;
mod render;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{splitmix64, RngStream, Tensor};
use crate::prompts::Vocabulary;

pub use augment::{augment, AugmentKind, AugmentParams};
pub use labeled::{load_labeled_set, save_labeled_set, LabeledSet, Provenance, SetMetadata, SoftLabel};
pub use render::{render_manifest, render_prompt, sample_real, sample_real_balanced};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    /// Each named class occupies a contiguous band of the frame.
    Spatial,
    /// Pixel-wise convex combination of the prototypes.
    Convex,
}

/// Parameters of one band-limited prototype field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    pub seed: u64,
    /// Standard deviation of the field around mid-grey.
    pub contrast: f64,
    /// Highest spatial frequency (cycles per frame) in the field.
    pub max_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPatterns {
    pub polysemy_bias: f64,
    /// Index into `meanings` of the in-distribution concept.
    pub in_distribution: usize,
    pub meanings: Vec<PatternParams>,
}

/// User-facing knobs from which a [`WorldSpec`] is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub image_size: usize,
    pub noise: f64,
    pub contrast: f64,
    pub offdist_contrast: f64,
    pub max_freq: usize,
    pub lambda_range: (f64, f64),
    pub blend: BlendMode,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            image_size: 16,
            noise: 0.5,
            contrast: 0.15,
            offdist_contrast: 0.15,
            max_freq: 3,
            lambda_range: (0.3, 0.7),
            blend: BlendMode::Spatial,
            train_per_class: 500,
            test_per_class: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub noise: f64,
    pub lambda_range: (f64, f64),
    pub blend: BlendMode,
    pub classes: Vec<ClassPatterns>,
}

impl WorldSpec {
    /// One pattern per (class, meaning), seeded from the world seed and the ids.
    pub fn from_vocab(vocab: &Vocabulary, cfg: &WorldConfig) -> Result<Self> {
        vocab.validate()?;
        let classes = vocab
            .classes
            .iter()
            .map(|c| ClassPatterns {
                polysemy_bias: c.polysemy_bias,
                in_distribution: c.in_distribution_meaning(),
                meanings: c
                    .meanings
                    .iter()
                    .enumerate()
                    .map(|(mi, m)| PatternParams {
                        seed: splitmix64(cfg.seed ^ splitmix64(((c.id as u64) << 8) | mi as u64)),
                        contrast: if m.in_distribution { cfg.contrast } else { cfg.offdist_contrast },
                        max_freq: cfg.max_freq,
                    })
                    .collect(),
            })
            .collect();
        let spec = Self {
            num_classes: vocab.len(),
            channels: 1,
            height: cfg.image_size,
            width: cfg.image_size,
            noise: cfg.noise,
            lambda_range: cfg.lambda_range,
            blend: cfg.blend,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.classes.len() != self.num_classes {
            return Err(Error::config("world needs one pattern set per class"));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 {
            return Err(Error::config("image must be at least 2×2 with one channel"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("noise level must be finite and non-negative"));
        }
        let (lo, hi) = self.lambda_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("lambda range ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.polysemy_bias) {
                return Err(Error::config(format!("class {i}: polysemy_bias outside [0, 1]")));
            }
            if c.in_distribution >= c.meanings.len() {
                return Err(Error::config(format!("class {i}: in-distribution meaning missing")));
            }
            if c.polysemy_bias > 0.0 && c.meanings.len() < 2 {
                return Err(Error::config(format!("class {i}: polysemous class needs an off-distribution meaning")));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn pixels(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("world spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// A world with its prototypes materialised.
#[derive(Debug, Clone)]
pub struct World {
    spec: WorldSpec,
    /// `prototypes[class][meaning]`, each `channels × height × width`.
    prototypes: Vec<Vec<Tensor>>,
}

impl World {
    pub fn new(spec: WorldSpec) -> Result<Self> {
        spec.validate()?;
        let prototypes = spec
            .classes
            .iter()
            .map(|c| c.meanings.iter().map(|p| prototype_field(&spec, p)).collect())
            .collect();
        Ok(Self { spec, prototypes })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn prototype(&self, class: usize, meaning: usize) -> &Tensor {
        &self.prototypes[class][meaning]
    }

    pub fn in_distribution_prototype(&self, class: usize) -> &Tensor {
        &self.prototypes[class][self.spec.classes[class].in_distribution]
    }

    pub(crate) fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.spec.num_classes {
            return Err(Error::pre(format!(
                "unknown class {class} (world has {} classes)",
                self.spec.num_classes
            )));
        }
        Ok(())
    }
}

/// Sum of random cosines with frequencies up to `max_freq`, normalised to zero
/// mean and unit variance, then mapped to `0.5 + contrast·field` and clamped.
fn prototype_field(spec: &WorldSpec, p: &PatternParams) -> Tensor {
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let mut rng = RngStream::new(p.seed, 0);
    let f = p.max_freq as i64;
    let mut waves = Vec::new();
    for fy in -f..=f {
        for fx in 0..=f {
            if fx == 0 && fy <= 0 {
                continue;
            }
            waves.push((fx as f64, fy as f64, rng.normal(), rng.uniform() * std::f64::consts::TAU));
        }
    }
    let mut field = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for &(fx, fy, a, phase) in &waves {
                let arg = std::f64::consts::TAU * (fx * x as f64 / w as f64 + fy * y as f64 / h as f64) + phase;
                v += a * arg.cos();
            }
            field[y * w + x] = v;
        }
    }
    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let var = field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / field.len() as f64;
    let sd = var.sqrt().max(1e-12);
    let mut out = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        out.extend(field.iter().map(|v| (0.5 + p.contrast * (v - mean) / sd).clamp(0.0, 1.0)));
    }
    Tensor::new(vec![c, h, w], out).expect("prototype shape")
}
