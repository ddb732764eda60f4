//! Selective prototype aggregation: per-class teacher image embeddings plus
//! flagged caption embeddings become one unit-norm textual prototype per
//! class.
//!
//! The pipeline per class: average the image features into a visual
//! prototype, score each caption embedding against it, prune outliers with a
//! median/MAD robust z-score, then combine the survivors with
//! softmax-normalized weights where the caption flag enters as an additive
//! calibration term on the logits. The full audit trail (scores, z-scores,
//! kept set, weights) is retained on the output so weight-comparison reports
//! can be reconstructed.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, ClassIndexSets, EmbeddingRecord, RobustStats};
use crate::rsflag::CaptionCandidate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregationConfig {
    /// Similarity sharpness in the weight logits.
    pub beta: f64,
    /// Additive calibration for flagged captions.
    pub gamma: f64,
    /// Robust z-score pruning threshold.
    pub zeta: f64,
    /// Numerical stability constant in the z-score denominator.
    pub epsilon: f64,
    /// Off by default: the visual prototype is a raw mean. Renormalizing it
    /// rescales all scores of a class and therefore changes the weights.
    pub renormalize_visual_prototype: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            beta: 10.0,
            gamma: 2.0,
            zeta: 3.0,
            epsilon: 1e-8,
            renormalize_visual_prototype: false,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::InvalidParameter(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.zeta > 0.0) {
            return Err(Error::InvalidParameter(format!("zeta must be > 0, got {}", self.zeta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Aggregated unit-norm textual prototype for one class, with the pruning
/// and weighting audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    pub class_index: usize,
    pub prototype: Vec<f64>,
    pub kept_indices: BTreeSet<usize>,
    pub scores: Vec<f64>,
    /// Normalized over kept indices; exactly 0 for pruned ones.
    pub weights: Vec<f64>,
    pub stats: RobustStats,
}

/// Arithmetic mean of a class's image features. Deliberately not
/// re-normalized; see `AggregationConfig::renormalize_visual_prototype`.
pub fn visual_prototype(class_index: usize, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Err(Error::EmptyClass { class: class_index });
    }
    let dim = features[0].len();
    let mut mean = vec![0.0; dim];
    for f in features {
        if f.len() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: f.len(),
            });
        }
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    let inv = 1.0 / features.len() as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Dot product of the visual prototype with each caption embedding, in
/// input order.
pub fn score_candidates(v_hat: &[f64], caption_embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    caption_embeddings
        .iter()
        .map(|t| {
            if t.len() != v_hat.len() {
                return Err(Error::DimensionMismatch {
                    left: v_hat.len(),
                    right: t.len(),
                });
            }
            Ok(math::dot(v_hat, t))
        })
        .collect()
}

/// Two-sided robust pruning: keep indices whose z-score is at most zeta.
/// Ties at the boundary are kept.
pub fn prune(scores: &[f64], cfg: &AggregationConfig) -> Result<(BTreeSet<usize>, RobustStats)> {
    let stats = math::robust_stats(scores, cfg.epsilon)?;
    let kept = stats
        .zscores
        .iter()
        .enumerate()
        .filter(|(_, z)| **z <= cfg.zeta)
        .map(|(j, _)| j)
        .collect();
    Ok((kept, stats))
}

/// Softmax weights over the kept set with logits beta*score + gamma*flag,
/// computed with max subtraction. Pruned indices get weight 0.
pub fn candidate_weights(
    scores: &[f64],
    flags: &[u8],
    kept: &BTreeSet<usize>,
    cfg: &AggregationConfig,
) -> Result<Vec<f64>> {
    if scores.len() != flags.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} flags",
            scores.len(),
            flags.len()
        )));
    }
    if kept.is_empty() {
        return Err(Error::EmptyKeptSet);
    }
    if let Some(&j) = kept.iter().next_back() {
        if j >= scores.len() {
            return Err(Error::InvalidParameter(format!(
                "kept index {j} out of range for {} candidates",
                scores.len()
            )));
        }
    }
    let logits: Vec<f64> = kept
        .iter()
        .map(|&j| cfg.beta * scores[j] + cfg.gamma * f64::from(flags[j]))
        .collect();
    let probs = math::softmax(&logits)?;
    let mut weights = vec![0.0; scores.len()];
    for (&j, p) in kept.iter().zip(probs) {
        weights[j] = p;
    }
    Ok(weights)
}

/// Run the whole per-class aggregation and return the prototype with its
/// audit trail.
pub fn aggregate_class(
    class_index: usize,
    features: &[Vec<f64>],
    candidates: &[CaptionCandidate],
    cfg: &AggregationConfig,
) -> Result<ClassPrototype> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::MissingClasses(vec![class_index]));
    }
    let mut embeddings = Vec::with_capacity(candidates.len());
    let mut flags = Vec::with_capacity(candidates.len());
    for c in candidates {
        let emb = c.embedding.as_ref().ok_or(Error::IncompleteCandidate {
            class: class_index,
            caption: c.caption_index,
            what: "missing embedding",
        })?;
        let flag = c.rs_flag.ok_or(Error::IncompleteCandidate {
            class: class_index,
            caption: c.caption_index,
            what: "missing flag",
        })?;
        embeddings.push(emb.clone());
        flags.push(flag);
    }

    let mut v_hat = visual_prototype(class_index, features)?;
    if cfg.renormalize_visual_prototype {
        v_hat = math::l2_normalize(&v_hat)?;
    }
    let scores = score_candidates(&v_hat, &embeddings)?;
    let (kept, stats) = prune(&scores, cfg)?;
    let weights = candidate_weights(&scores, &flags, &kept, cfg)?;

    let dim = embeddings[0].len();
    let mut sum = vec![0.0; dim];
    for &j in &kept {
        for (s, t) in sum.iter_mut().zip(&embeddings[j]) {
            *s += weights[j] * t;
        }
    }
    let prototype = math::l2_normalize(&sum)
        .map_err(|_| Error::DegeneratePrototype { class: class_index })?;

    Ok(ClassPrototype {
        class_index,
        prototype,
        kept_indices: kept,
        scores,
        weights,
        stats,
    })
}

/// Build one prototype per in-scope class. When `restrict_to` is given only
/// base classes are built, so novel classes never receive a prototype.
pub fn build_all_prototypes(
    dataset: &[EmbeddingRecord],
    corpus: &[CaptionCandidate],
    cfg: &AggregationConfig,
    restrict_to: Option<&ClassIndexSets>,
) -> Result<BTreeMap<usize, ClassPrototype>> {
    let mut features: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for r in dataset {
        if let Some(label) = r.label {
            features.entry(label).or_default().push(r.vec.clone());
        }
    }
    let mut candidates: BTreeMap<usize, Vec<CaptionCandidate>> = BTreeMap::new();
    for c in corpus {
        candidates.entry(c.class_index).or_default().push(c.clone());
    }

    let scope: BTreeSet<usize> = match restrict_to {
        Some(sets) => sets.base.clone(),
        None => features.keys().copied().collect(),
    };

    let missing: Vec<usize> = scope
        .iter()
        .filter(|k| {
            features.get(k).map_or(true, Vec::is_empty)
                || candidates.get(k).map_or(true, Vec::is_empty)
        })
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }

    scope
        .into_iter()
        .map(|k| Ok((k, aggregate_class(k, &features[&k], &candidates[&k], cfg)?)))
        .collect()
}
