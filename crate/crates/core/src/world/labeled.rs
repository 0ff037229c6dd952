use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{load_tensor, save_tensor, DType};
use crate::numerics::Tensor;

const WEIGHT_TOL: f64 = 1e-9;

/// Sparse probability vector over classes, stored as `(class, weight)` pairs
/// sorted by class with strictly positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, f64)>", into = "Vec<(usize, f64)>")]
pub struct SoftLabel(Vec<(usize, f64)>);

impl SoftLabel {
    pub fn hard(class: usize) -> Self {
        Self(vec![(class, 1.0)])
    }

    /// Merges repeated classes and drops zero weights; weights must be
    /// non-negative and sum to one.
    pub fn from_weights(mut pairs: Vec<(usize, f64)>) -> Result<Self> {
        if pairs.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::Data(format!("negative or non-finite label weight in {pairs:?}")));
        }
        pairs.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(pairs.len());
        for (c, w) in pairs {
            match merged.last_mut() {
                Some((lc, lw)) if *lc == c => *lw += w,
                _ => merged.push((c, w)),
            }
        }
        merged.retain(|&(_, w)| w > 0.0);
        let total: f64 = merged.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::Data(format!("label weights sum to {total}, not 1")));
        }
        Ok(Self(merged))
    }

    /// `wa·a + (1 − wa)·b`.
    pub fn mix(a: &SoftLabel, b: &SoftLabel, wa: f64) -> Self {
        let mut pairs: Vec<(usize, f64)> = a.0.iter().map(|&(c, w)| (c, w * wa)).collect();
        pairs.extend(b.0.iter().map(|&(c, w)| (c, w * (1.0 - wa))));
        Self::from_weights(pairs).expect("convex mix of probability vectors")
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.0
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.0.iter().find(|&&(c, _)| c == class).map_or(0.0, |&(_, w)| w)
    }

    /// Class with the largest weight; ties go to the lower class id.
    pub fn argmax(&self) -> usize {
        let mut best = self.0[0];
        for &(c, w) in &self.0[1..] {
            if w > best.1 {
                best = (c, w);
            }
        }
        best.0
    }

    pub fn dense(&self, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        for &(c, w) in &self.0 {
            v[c] = w;
        }
        v
    }
}

impl TryFrom<Vec<(usize, f64)>> for SoftLabel {
    type Error = Error;

    fn try_from(pairs: Vec<(usize, f64)>) -> Result<Self> {
        Self::from_weights(pairs)
    }
}

impl From<SoftLabel> for Vec<(usize, f64)> {
    fn from(l: SoftLabel) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    SyntheticSingle,
    SyntheticMixup,
    SyntheticNclass,
    Augmented,
}

/// Images (`n × channels × height × width`) with one soft label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<SoftLabel>,
    pub provenance: Provenance,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<SoftLabel>, provenance: Provenance) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Shape(format!("images must be n×c×h×w, got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::Shape(format!("{} images but {} labels", images.rows(), labels.len())));
        }
        Ok(Self { images, labels, provenance })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        self.images.row(i)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.labels.iter().map(SoftLabel::argmax).collect()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
            provenance: self.provenance,
        }
    }

    /// Indices of samples whose dominant class is `class`.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i].argmax() == class).collect()
    }

    /// Concatenation; the provenance of the first part is kept.
    pub fn concat(parts: &[&LabeledSet]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::pre("concat of no sets"))?;
        let images: Vec<&Tensor> = parts.iter().map(|p| &p.images).collect();
        let labels = parts.iter().flat_map(|p| p.labels.iter().cloned()).collect();
        Self::new(Tensor::concat_rows(&images)?, labels, first.provenance)
    }
}

/// Sidecar metadata stored next to the image tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetMetadata {
    pub labels: Vec<SoftLabel>,
    pub provenance: Provenance,
    pub world_config_hash: String,
    pub seed: u64,
}

/// Writes `path` (tensor file) and `path` with a `.json` extension.
pub fn save_labeled_set(path: &Path, set: &LabeledSet, world_config_hash: &str, seed: u64) -> Result<()> {
    save_tensor(path, &set.images, DType::F64)?;
    let meta = SetMetadata {
        labels: set.labels.clone(),
        provenance: set.provenance,
        world_config_hash: world_config_hash.to_string(),
        seed,
    };
    fs::write(path.with_extension("json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_labeled_set(path: &Path) -> Result<(LabeledSet, SetMetadata)> {
    let images = load_tensor(path)?;
    let meta: SetMetadata = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    let set = LabeledSet::new(images, meta.labels.clone(), meta.provenance)?;
    Ok((set, meta))
}
