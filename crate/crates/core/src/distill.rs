//! Tri-aspect alignment objective: task cross-entropy plus visual, textual,
//! and logit-distribution alignment, with masked renormalization for
//! base-to-novel training and a linear warm-up on the logit term.
//!
//! Logit layering: branch logit scales (the learnable student scale and the
//! fixed teacher scale) are multiplied into the logits by `compute_logits`;
//! the distillation temperature then divides the scaled logits inside
//! `masked_distribution`. The KL direction is teacher-first: teacher terms
//! with zero mass contribute nothing by continuity.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::prototype::ClassPrototype;

/// Schedule applied to the logit-loss weight over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LogitSchedule {
    /// Linear ramp from 0 to the full weight across the warm-up window.
    #[default]
    Linear,
    /// Hard switch: zero before the window end, full weight afterwards.
    TwoStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_img: f64,
    pub lambda_text: f64,
    pub lambda_logit: f64,
    /// Distillation temperature dividing both logit matrices.
    pub tau: f64,
    /// Initial value of the learnable student logit scale.
    pub tau_s: f64,
    /// Fixed teacher logit scale.
    pub tau_t: f64,
    /// Fraction of total steps spent ramping the logit weight.
    pub warmup_fraction: f64,
    pub schedule: LogitSchedule,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_img: 0.5,
            lambda_text: 0.5,
            lambda_logit: 1.0,
            tau: 2.0,
            tau_s: 1.0,
            tau_t: 1.0,
            warmup_fraction: 0.3,
            schedule: LogitSchedule::Linear,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau", self.tau), ("tau_s", self.tau_s), ("tau_t", self.tau_t)] {
            if !(v > 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_img", self.lambda_img),
            ("lambda_text", self.lambda_text),
            ("lambda_logit", self.lambda_logit),
        ] {
            if !(v >= 0.0) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::InvalidParameter(format!(
                "warmup_fraction must be in [0,1], got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

/// Batch-by-class similarity logits with the branch scale already applied.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    pub values: Vec<Vec<f64>>,
    pub scale_applied: f64,
}

impl LogitMatrix {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn cols(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

/// Per-component loss values; `total` is the weighted sum with the
/// scheduled logit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub img: f64,
    pub text: f64,
    pub logit: f64,
    pub total: f64,
    pub effective_lambda_logit: f64,
}

/// values[i][k] = scale * dot(v_i, t_k).
pub fn compute_logits(
    image_feats: &[Vec<f64>],
    text_embeddings: &[Vec<f64>],
    scale: f64,
) -> Result<LogitMatrix> {
    let values = image_feats
        .iter()
        .map(|v| {
            text_embeddings
                .iter()
                .map(|t| {
                    if t.len() != v.len() {
                        return Err(Error::DimensionMismatch {
                            left: v.len(),
                            right: t.len(),
                        });
                    }
                    Ok(scale * math::dot(v, t))
                })
                .collect()
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    Ok(LogitMatrix {
        values,
        scale_applied: scale,
    })
}

/// Mean cosine distance between matched student and teacher image features.
pub fn loss_img(student_feats: &[Vec<f64>], teacher_feats: &[Vec<f64>]) -> Result<f64> {
    if student_feats.len() != teacher_feats.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student vs {} teacher features",
            student_feats.len(),
            teacher_feats.len()
        )));
    }
    if student_feats.is_empty() {
        return Err(Error::EmptyInput("image feature batch"));
    }
    let mut sum = 0.0;
    for (s, t) in student_feats.iter().zip(teacher_feats) {
        if s.len() != t.len() {
            return Err(Error::DimensionMismatch {
                left: s.len(),
                right: t.len(),
            });
        }
        sum += 1.0 - math::dot(s, t);
    }
    Ok(sum / student_feats.len() as f64)
}

/// Mean cosine distance between student text embeddings and teacher
/// prototypes, averaged over exactly the classes in `class_set` (the
/// prototype-bearing classes; base classes in base-to-novel runs).
pub fn loss_text(
    student_text: &BTreeMap<usize, Vec<f64>>,
    teacher_protos: &BTreeMap<usize, ClassPrototype>,
    class_set: &BTreeSet<usize>,
) -> Result<f64> {
    if class_set.is_empty() {
        return Err(Error::EmptyInput("text alignment class set"));
    }
    let mut sum = 0.0;
    for &k in class_set {
        let proto = teacher_protos
            .get(&k)
            .ok_or(Error::MissingPrototype { class: k })?;
        let emb = student_text.get(&k).ok_or_else(|| {
            Error::ShapeMismatch(format!("no student text embedding for class {k}"))
        })?;
        sum += 1.0 - math::dot(emb, &proto.prototype);
    }
    Ok(sum / class_set.len() as f64)
}

/// Temperature softmax restricted to base columns: novel columns get exact
/// zero probability and base mass per row sums to one.
pub fn masked_distribution(
    logits: &LogitMatrix,
    base: &BTreeSet<usize>,
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    if base.is_empty() {
        return Err(Error::EmptyBaseSet);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be > 0, got {tau}")));
    }
    let cols = logits.cols();
    if let Some(&k) = base.iter().next_back() {
        if k >= cols {
            return Err(Error::ShapeMismatch(format!(
                "base class column {k} out of range for {cols} columns"
            )));
        }
    }
    let mut out = Vec::with_capacity(logits.rows());
    for row in &logits.values {
        let max = base
            .iter()
            .map(|&k| row[k] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; cols];
        let mut sum = 0.0;
        for &k in base {
            let e = (row[k] / tau - max).exp();
            probs[k] = e;
            sum += e;
        }
        for &k in base {
            probs[k] /= sum;
        }
        out.push(probs);
    }
    Ok(out)
}

/// Temperature-squared KL divergence from the teacher's masked distribution
/// to the student's, averaged over the batch. Zero-mass teacher terms
/// contribute nothing.
pub fn loss_logit(
    teacher: &LogitMatrix,
    student: &LogitMatrix,
    base: &BTreeSet<usize>,
    tau: f64,
) -> Result<f64> {
    if teacher.rows() != student.rows() || teacher.cols() != student.cols() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {}x{} vs student {}x{}",
            teacher.rows(),
            teacher.cols(),
            student.rows(),
            student.cols()
        )));
    }
    if teacher.rows() == 0 {
        return Err(Error::EmptyInput("logit batch"));
    }
    let q = masked_distribution(teacher, base, tau)?;
    let p = masked_distribution(student, base, tau)?;
    let mut sum = 0.0;
    for (qi, pi) in q.iter().zip(&p) {
        for &k in base {
            if qi[k] > 0.0 {
                sum += qi[k] * (qi[k].ln() - pi[k].ln());
            }
        }
    }
    Ok(tau * tau * sum / teacher.rows() as f64)
}

/// Mean cross-entropy of the per-row softmax against the labels, over the
/// full class set visible to the student.
pub fn loss_task(student: &LogitMatrix, labels: &[usize]) -> Result<f64> {
    if student.rows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows vs {} labels",
            student.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("task batch"));
    }
    let cols = student.cols();
    let mut sum = 0.0;
    for (row, &label) in student.values.iter().zip(labels) {
        if label >= cols {
            return Err(Error::LabelOutOfRange {
                label,
                classes: cols,
            });
        }
        let probs = math::softmax(row)?;
        sum -= probs[label].ln();
    }
    Ok(sum / labels.len() as f64)
}

/// Linear ramp: 0 at step 0, the full weight from step ceil(warmup * total)
/// onward. The two-stage schedule instead switches hard at the window end.
pub fn effective_lambda_logit(step: usize, total_steps: usize, cfg: &DistillConfig) -> f64 {
    let window = (cfg.warmup_fraction * total_steps as f64).ceil() as usize;
    match cfg.schedule {
        LogitSchedule::Linear => {
            if window == 0 {
                cfg.lambda_logit
            } else {
                cfg.lambda_logit * (step.min(window) as f64 / window as f64)
            }
        }
        LogitSchedule::TwoStage => {
            if step < window {
                0.0
            } else {
                cfg.lambda_logit
            }
        }
    }
}

/// Everything the full objective needs for one batch. Columns of the logit
/// matrices follow `class_order` (global class ids); `labels` and
/// `base_columns` are column indices into that order.
#[derive(Debug)]
pub struct TotalLossInputs<'a> {
    pub student_image_feats: &'a [Vec<f64>],
    pub teacher_image_feats: &'a [Vec<f64>],
    pub labels: &'a [usize],
    pub student_text: &'a BTreeMap<usize, Vec<f64>>,
    pub teacher_protos: &'a BTreeMap<usize, ClassPrototype>,
    pub class_order: &'a [usize],
    pub base_columns: &'a BTreeSet<usize>,
    /// Global class ids averaged by the text alignment term.
    pub text_align_classes: &'a BTreeSet<usize>,
    pub tau_s: f64,
}

/// Gradients of the full objective with respect to the quantities the
/// student controls at the loss layer.
#[derive(Debug, Clone)]
pub struct TotalLossGrads {
    pub d_student_image_feats: Vec<Vec<f64>>,
    pub d_student_text: BTreeMap<usize, Vec<f64>>,
    pub d_tau_s: f64,
}

fn ordered_student_text(inputs: &TotalLossInputs) -> Result<Vec<Vec<f64>>> {
    inputs
        .class_order
        .iter()
        .map(|k| {
            inputs
                .student_text
                .get(k)
                .cloned()
                .ok_or_else(|| Error::ShapeMismatch(format!("no student text embedding for class {k}")))
        })
        .collect()
}

fn teacher_logits(inputs: &TotalLossInputs, cfg: &DistillConfig) -> Result<LogitMatrix> {
    // columns outside the distill mask never enter the masked distribution,
    // so classes without a prototype contribute fixed zeros there
    let dim = inputs
        .teacher_image_feats
        .first()
        .map_or(0, Vec::len);
    let mut protos = Vec::with_capacity(inputs.class_order.len());
    for (col, k) in inputs.class_order.iter().enumerate() {
        match inputs.teacher_protos.get(k) {
            Some(p) => protos.push(p.prototype.clone()),
            None if !inputs.base_columns.contains(&col) => protos.push(vec![0.0; dim]),
            None => return Err(Error::MissingPrototype { class: *k }),
        }
    }
    compute_logits(inputs.teacher_image_feats, &protos, cfg.tau_t)
}

/// Weighted sum of the four objective terms at the given step.
pub fn total_loss(
    inputs: &TotalLossInputs,
    cfg: &DistillConfig,
    step: usize,
    total_steps: usize,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let text_in_order = ordered_student_text(inputs)?;
    let student_logits = compute_logits(inputs.student_image_feats, &text_in_order, inputs.tau_s)?;
    let teacher_logits = teacher_logits(inputs, cfg)?;

    let task = loss_task(&student_logits, inputs.labels)?;
    let img = loss_img(inputs.student_image_feats, inputs.teacher_image_feats)?;
    let text = loss_text(inputs.student_text, inputs.teacher_protos, inputs.text_align_classes)?;
    let logit = loss_logit(&teacher_logits, &student_logits, inputs.base_columns, cfg.tau)?;
    let eff = effective_lambda_logit(step, total_steps, cfg);
    Ok(LossBreakdown {
        task,
        img,
        text,
        logit,
        total: task + cfg.lambda_img * img + cfg.lambda_text * text + eff * logit,
        effective_lambda_logit: eff,
    })
}

/// Forward plus analytic gradients of the full objective with respect to
/// student image features, student text embeddings, and the student logit
/// scale.
pub fn total_loss_backward(
    inputs: &TotalLossInputs,
    cfg: &DistillConfig,
    step: usize,
    total_steps: usize,
) -> Result<(LossBreakdown, TotalLossGrads)> {
    let breakdown = total_loss(inputs, cfg, step, total_steps)?;
    let batch = inputs.student_image_feats.len() as f64;
    let dim = inputs.student_image_feats[0].len();
    let cols = inputs.class_order.len();
    let eff = breakdown.effective_lambda_logit;

    let text_in_order = ordered_student_text(inputs)?;
    let student_logits = compute_logits(inputs.student_image_feats, &text_in_order, inputs.tau_s)?;
    let teacher_logits = teacher_logits(inputs, cfg)?;
    let q = masked_distribution(&teacher_logits, inputs.base_columns, cfg.tau)?;
    let p = masked_distribution(&student_logits, inputs.base_columns, cfg.tau)?;

    // dTotal/ds[i][c]: cross-entropy term plus masked KD term
    let mut d_logits = vec![vec![0.0; cols]; inputs.student_image_feats.len()];
    for (i, row) in student_logits.values.iter().enumerate() {
        let probs = math::softmax(row)?;
        for c in 0..cols {
            let task_grad = (probs[c] - f64::from(u8::from(c == inputs.labels[i]))) / batch;
            let kd_grad = if inputs.base_columns.contains(&c) {
                cfg.tau / batch * (p[i][c] - q[i][c])
            } else {
                0.0
            };
            d_logits[i][c] = task_grad + eff * kd_grad;
        }
    }

    // chain into features, text embeddings, and the scale
    let mut d_feats = vec![vec![0.0; dim]; inputs.student_image_feats.len()];
    let mut d_text_cols = vec![vec![0.0; dim]; cols];
    let mut d_tau_s = 0.0;
    for (i, v) in inputs.student_image_feats.iter().enumerate() {
        for c in 0..cols {
            let g = d_logits[i][c];
            if g == 0.0 {
                continue;
            }
            let t = &text_in_order[c];
            for d in 0..dim {
                d_feats[i][d] += g * inputs.tau_s * t[d];
                d_text_cols[c][d] += g * inputs.tau_s * v[d];
            }
            d_tau_s += g * math::dot(v, t);
        }
    }

    // image alignment
    for (df, t) in d_feats.iter_mut().zip(inputs.teacher_image_feats) {
        for (x, y) in df.iter_mut().zip(t) {
            *x -= cfg.lambda_img * y / batch;
        }
    }

    // text alignment over the prototype-bearing set
    let mut d_text: BTreeMap<usize, Vec<f64>> = inputs
        .class_order
        .iter()
        .zip(d_text_cols)
        .map(|(k, v)| (*k, v))
        .collect();
    let n_text = inputs.text_align_classes.len() as f64;
    for &k in inputs.text_align_classes {
        let proto = inputs
            .teacher_protos
            .get(&k)
            .ok_or(Error::MissingPrototype { class: k })?;
        let slot = d_text.entry(k).or_insert_with(|| vec![0.0; dim]);
        for (x, y) in slot.iter_mut().zip(&proto.prototype) {
            *x -= cfg.lambda_text * y / n_text;
        }
    }

    Ok((
        breakdown,
        TotalLossGrads {
            d_student_image_feats: d_feats,
            d_student_text: d_text,
            d_tau_s,
        },
    ))
}
