use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnostics::RpcFidConfig;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TrainConfig};
use crate::prompts::{PairingMode, PromptVariant, Vocabulary};
use crate::quant::QuantConfig;
use crate::world::{AugmentKind, AugmentParams, World, WorldConfig, WorldSpec};

/// How a calibration set is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    /// Real samples, class-balanced.
    Real,
    /// Real samples with a pixel augmentation applied.
    RealAugmented(AugmentKind),
    /// Single-class prompts.
    Single,
    /// Single-class renders with a pixel augmentation applied.
    SingleAugmented(AugmentKind),
    /// Mixup-class prompts with the given pairing.
    Mixup(PairingMode),
    /// Prompts naming 2 to 4 classes.
    Nclass(usize),
    /// Single-class prompts extended with class metadata.
    Variant(PromptVariant),
}

fn augment_name(k: AugmentKind) -> &'static str {
    match k {
        AugmentKind::MixupPixels => "mixup_pixels",
        AugmentKind::Cutmix => "cutmix",
        AugmentKind::Resizemix => "resizemix",
    }
}

fn parse_augment(s: &str) -> Option<AugmentKind> {
    [AugmentKind::MixupPixels, AugmentKind::Cutmix, AugmentKind::Resizemix].into_iter().find(|&k| augment_name(k) == s)
}

impl Strategy {
    pub fn name(&self) -> String {
        match *self {
            Strategy::Real => "real".into(),
            Strategy::RealAugmented(k) => format!("real_{}", augment_name(k)),
            Strategy::Single => "single".into(),
            Strategy::SingleAugmented(k) => format!("single_{}", augment_name(k)),
            Strategy::Mixup(PairingMode::Random) => "mixup".into(),
            Strategy::Mixup(PairingMode::HighSimilarity) => "mixup_high_sim".into(),
            Strategy::Mixup(PairingMode::LowSimilarity) => "mixup_low_sim".into(),
            Strategy::Nclass(n) => format!("nclass{n}"),
            Strategy::Variant(PromptVariant::Hypernym) => "hypernym".into(),
            Strategy::Variant(PromptVariant::Definition) => "definition".into(),
            Strategy::Variant(PromptVariant::HypBackground) => "hyp_background".into(),
        }
    }

    /// Every strategy this build knows, for help texts.
    pub fn known() -> Vec<Strategy> {
        let mut v = vec![Strategy::Real];
        v.extend([AugmentKind::MixupPixels, AugmentKind::Cutmix, AugmentKind::Resizemix].map(Strategy::RealAugmented));
        v.push(Strategy::Single);
        v.extend([AugmentKind::MixupPixels, AugmentKind::Cutmix, AugmentKind::Resizemix].map(Strategy::SingleAugmented));
        v.extend([PairingMode::Random, PairingMode::HighSimilarity, PairingMode::LowSimilarity].map(Strategy::Mixup));
        v.extend([2, 3, 4].map(Strategy::Nclass));
        v.extend([PromptVariant::Hypernym, PromptVariant::Definition, PromptVariant::HypBackground].map(Strategy::Variant));
        v
    }

    pub fn is_synthetic(&self) -> bool {
        !matches!(self, Strategy::Real | Strategy::RealAugmented(_))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(k) = s.strip_prefix("real_").and_then(parse_augment) {
            return Ok(Strategy::RealAugmented(k));
        }
        if let Some(k) = s.strip_prefix("single_").and_then(parse_augment) {
            return Ok(Strategy::SingleAugmented(k));
        }
        if let Some(n) = s.strip_prefix("nclass").and_then(|n| n.parse::<usize>().ok()) {
            if (2..=4).contains(&n) {
                return Ok(Strategy::Nclass(n));
            }
        }
        Strategy::known().into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<String> = Strategy::known().iter().map(Strategy::name).collect();
            Error::config(format!("unknown strategy {s:?}; known: {}", names.join(", ")))
        })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name()
    }
}

/// Everything one comparison run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub calibration_size: usize,
    /// `(class id, polysemy bias)` overrides on the built-in vocabulary.
    pub polysemy: Vec<(usize, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub quant: QuantConfig,
    pub augment: AugmentParams,
    pub rpcfid: RpcFidConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            strategies: vec![
                Strategy::Real,
                Strategy::RealAugmented(AugmentKind::Resizemix),
                Strategy::Single,
                Strategy::Mixup(PairingMode::Random),
            ],
            seeds: vec![0, 1, 2, 3, 4],
            calibration_size: 1024,
            polysemy: Vec::new(),
            output_dir: None,
            world: WorldConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            quant: QuantConfig::default(),
            augment: AugmentParams::default(),
            rpcfid: RpcFidConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::default_ten().with_polysemy(&self.polysemy)
    }

    pub fn world(&self) -> Result<World> {
        World::new(WorldSpec::from_vocab(&self.vocabulary()?, &self.world)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::config("at least one strategy is required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            if self.strategies[..i].contains(s) {
                return Err(Error::config(format!("strategy {s} listed twice")));
            }
        }
        for (i, s) in self.seeds.iter().enumerate() {
            if self.seeds[..i].contains(s) {
                return Err(Error::config(format!("seed {s} listed twice")));
            }
        }
        if self.calibration_size == 0 {
            return Err(Error::config("calibration_size must be at least 1"));
        }
        if self.world.train_per_class == 0 || self.world.test_per_class == 0 {
            return Err(Error::config("train_per_class and test_per_class must be positive"));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.quant.validate()?;
        let vocab = self.vocabulary()?;
        if self.model.num_classes != vocab.len() {
            return Err(Error::config(format!(
                "model has {} classes, vocabulary {}",
                self.model.num_classes,
                vocab.len()
            )));
        }
        let shape = [1, self.world.image_size, self.world.image_size];
        if self.model.input != shape {
            return Err(Error::config(format!("model input {:?} does not match images {shape:?}", self.model.input)));
        }
        WorldSpec::from_vocab(&vocab, &self.world)?;
        let needs_pairs = self.strategies.iter().any(|s| matches!(s, Strategy::RealAugmented(_) | Strategy::SingleAugmented(_)));
        if needs_pairs && self.calibration_size < 2 {
            return Err(Error::config("pixel augmentation needs calibration_size >= 2"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex::encode(Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
    }

    /// Short prefix of [`ExperimentConfig::hash`] used for directory names.
    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }
}
