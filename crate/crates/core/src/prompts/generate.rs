use serde::{Deserialize, Serialize};

use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStrategy {
    Single,
    Mixup,
    Nclass,
    Hypernym,
    Definition,
    HypBackground,
}

impl PromptStrategy {
    /// Strategies whose records name exactly one class.
    pub fn is_single_class(self) -> bool {
        matches!(self, Self::Single | Self::Hypernym | Self::Definition | Self::HypBackground)
    }
}

/// One generation instruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: usize,
    pub strategy: PromptStrategy,
    pub template_id: usize,
    pub class_ids: Vec<usize>,
    pub text: String,
    /// Seed for rendering this record.
    pub seed: u64,
}

impl PromptRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.class_ids.len();
        let ok = match self.strategy {
            PromptStrategy::Mixup => n == 2,
            PromptStrategy::Nclass => (2..=4).contains(&n),
            _ => n == 1,
        };
        if !ok {
            return Err(Error::Data(format!(
                "record {}: strategy {:?} with {n} class ids",
                self.id, self.strategy
            )));
        }
        for (i, a) in self.class_ids.iter().enumerate() {
            if self.class_ids[i + 1..].contains(a) {
                return Err(Error::Data(format!("record {}: repeated class id {a}", self.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingMode {
    Random,
    HighSimilarity,
    LowSimilarity,
}

/// How the second class of a mixup prompt is chosen.
#[derive(Debug, Clone)]
pub struct PairingPolicy {
    pub mode: PairingMode,
    /// `K × d` class-representative vectors; required by the similarity modes.
    pub class_vectors: Option<Tensor>,
}

impl PairingPolicy {
    pub fn random() -> Self {
        Self { mode: PairingMode::Random, class_vectors: None }
    }

    pub fn by_similarity(mode: PairingMode, class_vectors: Tensor) -> Self {
        Self { mode, class_vectors: Some(class_vectors) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    Hypernym,
    Definition,
    HypBackground,
}

fn check_pools(vocab: &Vocabulary, templates: &[String], count: usize) -> Result<()> {
    if vocab.is_empty() {
        return Err(Error::config("empty vocabulary"));
    }
    if templates.is_empty() {
        return Err(Error::config("empty template pool"));
    }
    if count == 0 {
        return Err(Error::config("prompt count must be at least 1"));
    }
    Ok(())
}

/// `n` distinct ids from `0..k`; each draw is uniform over the ids not yet taken,
/// indexed in ascending order.
fn draw_distinct(rng: &mut RngStream, k: usize, n: usize) -> Vec<usize> {
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut r = rng.below(k - chosen.len());
        let mut pick = 0;
        loop {
            if !chosen.contains(&pick) {
                if r == 0 {
                    break;
                }
                r -= 1;
            }
            pick += 1;
        }
        chosen.push(pick);
    }
    chosen
}

fn join_labels(vocab: &Vocabulary, ids: &[usize]) -> String {
    ids.iter().map(|&i| vocab.label(i)).collect::<Vec<_>>().join(" and ")
}

fn generate(
    count: usize,
    rng: &RngStream,
    mut make: impl FnMut(usize, &mut RngStream) -> Result<(PromptStrategy, usize, Vec<usize>, String)>,
) -> Result<Vec<PromptRecord>> {
    (0..count)
        .map(|i| {
            let mut sub = rng.substream(i as u64);
            let (strategy, template_id, class_ids, text) = make(i, &mut sub)?;
            let seed = sub.next_u64();
            Ok(PromptRecord { id: i, strategy, template_id, class_ids, text, seed })
        })
        .collect()
}

/// `"{template} {label}"` prompts with uniformly drawn class and template.
pub fn gen_single_class(
    vocab: &Vocabulary,
    templates: &[String],
    count: usize,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    check_pools(vocab, templates, count)?;
    generate(count, rng, |_, r| {
        let t = r.below(templates.len());
        let c = r.below(vocab.len());
        Ok((PromptStrategy::Single, t, vec![c], format!("{} {}", templates[t], vocab.label(c))))
    })
}

/// Single-class prompts that all name `class`, with uniformly drawn templates.
pub fn gen_single_for_class(
    vocab: &Vocabulary,
    templates: &[String],
    class: usize,
    count: usize,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    check_pools(vocab, templates, count)?;
    vocab.get(class)?;
    generate(count, rng, |_, r| {
        let t = r.below(templates.len());
        Ok((PromptStrategy::Single, t, vec![class], format!("{} {}", templates[t], vocab.label(class))))
    })
}

/// `"{template} {label1} and {label2}"` prompts; the first class is uniform, the
/// second follows `pairing`.
pub fn gen_mixup_class(
    vocab: &Vocabulary,
    templates: &[String],
    count: usize,
    pairing: &PairingPolicy,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    check_pools(vocab, templates, count)?;
    if vocab.len() < 2 {
        return Err(Error::config("mixup prompts need at least 2 classes"));
    }
    check_pairing(pairing, vocab.len())?;
    generate(count, rng, |_, r| {
        let t = r.below(templates.len());
        let anchor = r.below(vocab.len());
        let partner = pair_classes(pairing, vocab.len(), anchor, r)?;
        let ids = vec![anchor, partner];
        let text = format!("{} {}", templates[t], join_labels(vocab, &ids));
        Ok((PromptStrategy::Mixup, t, ids, text))
    })
}

/// Prompts naming `n_classes` distinct classes joined by `" and "`.
pub fn gen_nclass(
    vocab: &Vocabulary,
    templates: &[String],
    count: usize,
    n_classes: usize,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    check_pools(vocab, templates, count)?;
    if !(2..=4).contains(&n_classes) {
        return Err(Error::config(format!("n_classes must be in 2..=4, got {n_classes}")));
    }
    if vocab.len() < 4 {
        return Err(Error::config(format!("n-class prompts need at least 4 classes, have {}", vocab.len())));
    }
    generate(count, rng, |_, r| {
        let t = r.below(templates.len());
        let ids = draw_distinct(r, vocab.len(), n_classes);
        let text = format!("{} {}", templates[t], join_labels(vocab, &ids));
        Ok((PromptStrategy::Nclass, t, ids, text))
    })
}

/// Single-class prompts extended with class metadata.
pub fn gen_variant(
    vocab: &Vocabulary,
    templates: &[String],
    count: usize,
    variant: PromptVariant,
    rng: &RngStream,
) -> Result<Vec<PromptRecord>> {
    check_pools(vocab, templates, count)?;
    let missing: Vec<usize> = vocab
        .classes
        .iter()
        .filter(|c| match variant {
            PromptVariant::Hypernym => c.hypernym.is_none(),
            PromptVariant::Definition => c.definition.is_none(),
            PromptVariant::HypBackground => c.hypernym.is_none() || c.background_pool.is_empty(),
        })
        .map(|c| c.id)
        .collect();
    if !missing.is_empty() {
        let what = match variant {
            PromptVariant::Hypernym => "hypernym",
            PromptVariant::Definition => "definition",
            PromptVariant::HypBackground => "hypernym or background pool",
        };
        return Err(Error::MissingMetadata { what: what.to_string(), ids: missing });
    }
    generate(count, rng, |_, r| {
        let t = r.below(templates.len());
        let c = r.below(vocab.len());
        let e = &vocab.classes[c];
        let head = format!("{} {}", templates[t], e.label);
        let (strategy, text) = match variant {
            PromptVariant::Hypernym => {
                (PromptStrategy::Hypernym, format!("{head}, {}", e.hypernym.as_deref().unwrap_or_default()))
            }
            PromptVariant::Definition => {
                (PromptStrategy::Definition, format!("{head}, {}", e.definition.as_deref().unwrap_or_default()))
            }
            PromptVariant::HypBackground => {
                let bg = &e.background_pool[r.below(e.background_pool.len())];
                let hyp = e.hypernym.as_deref().unwrap_or_default();
                (PromptStrategy::HypBackground, format!("{head}, {hyp} inside {bg}"))
            }
        };
        Ok((strategy, t, vec![c], text))
    })
}

fn check_pairing(policy: &PairingPolicy, k: usize) -> Result<()> {
    if k < 2 {
        return Err(Error::config("pairing needs at least 2 classes"));
    }
    match (&policy.mode, &policy.class_vectors) {
        (PairingMode::Random, _) => Ok(()),
        (_, None) => Err(Error::config("similarity pairing requires class vectors")),
        (_, Some(v)) if v.rank() != 2 || v.shape()[0] != k => Err(Error::config(format!(
            "class vectors have shape {:?}, expected {k} rows",
            v.shape()
        ))),
        _ => Ok(()),
    }
}

/// Cosine similarity of every class vector against `anchor`.
pub fn cosine_row(vectors: &Tensor, anchor: usize) -> Vec<f64> {
    let norm = |i: usize| vectors.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let a = vectors.row(anchor);
    let na = norm(anchor);
    (0..vectors.rows())
        .map(|j| {
            let nj = norm(j);
            if na == 0.0 || nj == 0.0 {
                return 0.0;
            }
            a.iter().zip(vectors.row(j)).map(|(x, y)| x * y).sum::<f64>() / (na * nj)
        })
        .collect()
}

/// Picks the partner class for `anchor` under `policy`. Ties go to the lowest id.
pub fn pair_classes(
    policy: &PairingPolicy,
    num_classes: usize,
    anchor: usize,
    rng: &mut RngStream,
) -> Result<usize> {
    check_pairing(policy, num_classes)?;
    if anchor >= num_classes {
        return Err(Error::pre(format!("anchor {anchor} out of range for {num_classes} classes")));
    }
    match policy.mode {
        PairingMode::Random => {
            let r = rng.below(num_classes - 1);
            Ok(if r >= anchor { r + 1 } else { r })
        }
        mode => {
            let sims = cosine_row(policy.class_vectors.as_ref().expect("checked"), anchor);
            let mut best: Option<(usize, f64)> = None;
            for (j, &s) in sims.iter().enumerate() {
                if j == anchor {
                    continue;
                }
                let better = match (best, mode) {
                    (None, _) => true,
                    (Some((_, b)), PairingMode::HighSimilarity) => s > b,
                    (Some((_, b)), _) => s < b,
                };
                if better {
                    best = Some((j, s));
                }
            }
            Ok(best.expect("at least one other class").0)
        }
    }
}
