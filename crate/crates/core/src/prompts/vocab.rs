use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One visual concept a class label can denote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meaning {
    pub id: usize,
    pub in_distribution: bool,
}

/// A class label plus the metadata the prompt variants draw on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: usize,
    pub label: String,
    #[serde(default)]
    pub hypernym: Option<String>,
    #[serde(default)]
    pub definition: Option<String>,
    #[serde(default)]
    pub background_pool: Vec<String>,
    pub meanings: Vec<Meaning>,
    /// Probability that a single-class render resolves to an off-distribution meaning.
    #[serde(default)]
    pub polysemy_bias: f64,
}

impl ClassEntry {
    pub fn validate(&self) -> Result<()> {
        let in_dist = self.meanings.iter().filter(|m| m.in_distribution).count();
        if in_dist != 1 {
            return Err(Error::config(format!(
                "class {} ({}) must have exactly one in-distribution meaning, has {in_dist}",
                self.id, self.label
            )));
        }
        if !(0.0..=1.0).contains(&self.polysemy_bias) {
            return Err(Error::config(format!(
                "class {} polysemy_bias {} outside [0, 1]",
                self.id, self.polysemy_bias
            )));
        }
        if self.polysemy_bias > 0.0 && self.meanings.len() < 2 {
            return Err(Error::config(format!(
                "class {} has polysemy_bias > 0 but a single meaning",
                self.id
            )));
        }
        if self.polysemy_bias == 0.0 && self.meanings.len() != 1 {
            return Err(Error::config(format!(
                "class {} has polysemy_bias = 0 and must then have a single meaning",
                self.id
            )));
        }
        Ok(())
    }

    pub fn in_distribution_meaning(&self) -> usize {
        self.meanings.iter().position(|m| m.in_distribution).unwrap_or(0)
    }

    pub fn is_polysemous(&self) -> bool {
        self.polysemy_bias > 0.0
    }
}

/// Ordered class list; entry `i` must carry `id == i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocabulary {
    pub classes: Vec<ClassEntry>,
}

impl Vocabulary {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let v = Self { classes };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i {
                return Err(Error::config(format!("class at position {i} has id {}", c.id)));
            }
            c.validate()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&ClassEntry> {
        self.classes.get(id).ok_or_else(|| Error::pre(format!("unknown class id {id}")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.classes[id].label
    }

    /// Returns a copy with `polysemy_bias` overridden for the given classes. Classes
    /// that gain a non-zero bias get a second, off-distribution meaning.
    pub fn with_polysemy(&self, overrides: &[(usize, f64)]) -> Result<Self> {
        let mut v = self.clone();
        for &(id, bias) in overrides {
            let c = v
                .classes
                .get_mut(id)
                .ok_or_else(|| Error::config(format!("polysemy override for unknown class {id}")))?;
            c.polysemy_bias = bias;
            if bias > 0.0 && c.meanings.len() < 2 {
                c.meanings.push(Meaning { id: 1, in_distribution: false });
            }
            if bias == 0.0 {
                c.meanings.retain(|m| m.in_distribution);
            }
        }
        v.validate()?;
        Ok(v)
    }

    /// Built-in ten-class bird/fish vocabulary. "kite" and "crane" are polysemous.
    pub fn default_ten() -> Self {
        fn entry(
            id: usize,
            label: &str,
            hypernym: &str,
            definition: &str,
            backgrounds: &[&str],
            polysemy_bias: f64,
        ) -> ClassEntry {
            let mut meanings = vec![Meaning { id: 0, in_distribution: true }];
            if polysemy_bias > 0.0 {
                meanings.push(Meaning { id: 1, in_distribution: false });
            }
            ClassEntry {
                id,
                label: label.to_string(),
                hypernym: Some(hypernym.to_string()),
                definition: Some(definition.to_string()),
                background_pool: backgrounds.iter().map(|s| s.to_string()).collect(),
                meanings,
                polysemy_bias,
            }
        }
        let sky = ["sky", "forest", "mountains", "grassland"];
        let water = ["river", "lake", "aquarium", "pond"];
        let sea = ["ocean", "coral reef", "deep water", "harbor"];
        let marsh = ["marsh", "shallow water", "wetland", "riverbank"];
        let farm = ["farmyard", "grass", "barn", "savanna"];
        Vocabulary {
            classes: vec![
                entry(0, "kite", "bird of prey", "a hawk with long pointed wings and a forked tail", &sky, 0.8),
                entry(1, "bald eagle", "bird of prey", "a large eagle with a white head and tail", &sky, 0.0),
                entry(2, "vulture", "bird of prey", "a large scavenging bird with a bare head", &sky, 0.0),
                entry(3, "tench", "cyprinid", "a freshwater fish of the carp family", &water, 0.0),
                entry(4, "goldfish", "cyprinid", "a small golden-orange freshwater fish", &water, 0.0),
                entry(5, "crane", "wading bird", "a tall long-legged long-necked wading bird", &marsh, 0.8),
                entry(6, "great white shark", "shark", "a large aggressive shark with a white underside", &sea, 0.0),
                entry(7, "flamingo", "wading bird", "a pink wading bird with a bent bill", &marsh, 0.0),
                entry(8, "ostrich", "ratite", "a fast-running flightless bird of Africa", &farm, 0.0),
                entry(9, "hen", "chicken", "an adult female chicken", &farm, 0.0),
            ],
        }
    }
}

/// Default pool of CLIP-style prompt templates.
pub fn default_templates() -> Vec<String> {
    [
        "a realistic photo of",
        "a photo of",
        "a cropped photo of",
        "a close-up photo of",
        "a bright photo of",
        "a good photo of",
        "a photo of one",
        "a low resolution photo of",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}
