//! Dense-vector math and robust statistics shared by every other module.
//!
//! All arithmetic is 64-bit; embedding files may store 32-bit values, which
//! are widened on load. Everything here is a pure function over immutable
//! inputs, so values are safe to share across workers.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One cached embedding: an id, an optional class label, and a dense vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Option<usize>,
    pub vec: Vec<f64>,
    /// Set once the vector has been scaled to unit norm.
    pub normalized: bool,
}

impl EmbeddingRecord {
    pub fn new(id: impl Into<String>, label: Option<usize>, vec: Vec<f64>) -> Result<Self> {
        if vec.is_empty() {
            return Err(Error::EmptyInput("embedding vector"));
        }
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding vector".into(),
            });
        }
        Ok(Self {
            id: id.into(),
            label,
            vec,
            normalized: false,
        })
    }

    /// Scale the vector to unit norm and mark the record normalized.
    pub fn into_normalized(mut self) -> Result<Self> {
        self.vec = l2_normalize(&self.vec)?;
        self.normalized = true;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.vec.len()
    }
}

/// Disjoint base/novel class index sets for base-to-novel protocols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassIndexSets {
    pub base: BTreeSet<usize>,
    pub novel: BTreeSet<usize>,
}

impl ClassIndexSets {
    pub fn new(base: BTreeSet<usize>, novel: BTreeSet<usize>) -> Result<Self> {
        if let Some(k) = base.intersection(&novel).next() {
            return Err(Error::InvalidParameter(format!(
                "class {k} is in both base and novel sets"
            )));
        }
        Ok(Self { base, novel })
    }

    /// Split `0..num_classes` into base (listed) and novel (the rest).
    pub fn from_base(base: impl IntoIterator<Item = usize>, num_classes: usize) -> Result<Self> {
        let base: BTreeSet<usize> = base.into_iter().collect();
        if let Some(&k) = base.iter().find(|&&k| k >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "base class {k} out of range for {num_classes} classes"
            )));
        }
        let novel = (0..num_classes).filter(|k| !base.contains(k)).collect();
        Ok(Self { base, novel })
    }

    /// True when base and novel together cover exactly `0..num_classes`.
    pub fn covers(&self, num_classes: usize) -> bool {
        self.base.len() + self.novel.len() == num_classes
            && self.base.union(&self.novel).all(|&k| k < num_classes)
    }
}

/// Median, median absolute deviation, and the robust z-score of each input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustStats {
    pub median: f64,
    pub mad: f64,
    pub zscores: Vec<f64>,
}

/// Scale `v` to unit Euclidean norm. Zero vectors are rejected.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput("vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "l2_normalize input".into(),
        });
    }
    let norm = norm(v);
    if norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity of two unit vectors: their dot product, clamped to
/// [-1, 1] only to absorb floating-point rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(dot(a, b).clamp(-1.0, 1.0))
}

/// Max-subtracted softmax. Entries are positive and sum to 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "softmax logits".into(),
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Median as the standard order statistic: midpoint of the two central
/// values for even counts.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("median"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// Median/MAD robust statistics: z_j = |s_j - median| / (mad + epsilon).
pub fn robust_stats(scores: &[f64], epsilon: f64) -> Result<RobustStats> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("scores"));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            context: "robust_stats scores".into(),
        });
    }
    let med = median(scores)?;
    let deviations: Vec<f64> = scores.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&deviations)?;
    let zscores = deviations.iter().map(|d| d / (mad + epsilon)).collect();
    Ok(RobustStats {
        median: med,
        mad,
        zscores,
    })
}
