//! Desk-scale prompt-tuned student: a frozen single-head attention encoder
//! whose per-layer input sequence is extended by learnable prompt tokens.
//!
//! Per layer: prepend that layer's prompt tokens, run scaled dot-product
//! attention over the extended sequence with a residual connection, apply a
//! position-wise tanh feed-forward with a second residual, then strip back
//! to the content positions (deep prompting: fresh prompts every prompted
//! layer). The final embedding is the mean over content tokens, scaled to
//! unit norm.
//!
//! Only the prompts and the shared logit scale receive gradient updates;
//! the backbone weights are generated once from the seed and never change.
//! Reverse-mode gradients are exact and are checked against central finite
//! differences in the tests and the acceptance suite.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig, LossBreakdown, TotalLossInputs};
use crate::error::{Error, Result};
use crate::math;
use crate::prototype::ClassPrototype;

const PROMPT_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyEncoderConfig {
    /// Embedding and token width.
    pub dim: usize,
    /// Content tokens per input.
    pub seq_len: usize,
    /// Learnable prompt tokens per prompted layer; 0 disables prompting.
    pub prompt_tokens: usize,
    pub layers: usize,
    pub seed: u64,
    /// Number of leading layers that receive prompts; None prompts all.
    #[serde(default)]
    pub prompt_layers: Option<usize>,
}

impl ToyEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.seq_len == 0 || self.layers == 0 {
            return Err(Error::InvalidParameter(
                "encoder dim, seq_len, and layers must be positive".into(),
            ));
        }
        if let Some(pl) = self.prompt_layers {
            if pl > self.layers {
                return Err(Error::InvalidParameter(format!(
                    "prompt_layers {pl} exceeds layers {}",
                    self.layers
                )));
            }
        }
        Ok(())
    }

    pub fn prompted_layers(&self) -> usize {
        if self.prompt_tokens == 0 {
            0
        } else {
            self.prompt_layers.unwrap_or(self.layers)
        }
    }

    fn ffn_hidden(&self) -> usize {
        2 * self.dim
    }
}

/// Frozen maps for one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

/// One encoder branch: frozen backbone plus per-layer learnable prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyStudent {
    pub config: ToyEncoderConfig,
    pub layers: Vec<LayerWeights>,
    /// One P x D block per prompted layer.
    pub prompts: Vec<Array2<f64>>,
}

fn sample_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            m[[i, j]] = normal.sample(rng);
        }
    }
    m
}

/// Build a student from the seed: backbone weights at scale 1/sqrt(D),
/// prompts at scale 0.02, all drawn from one deterministic stream.
pub fn init_student(cfg: &ToyEncoderConfig) -> Result<ToyStudent> {
    cfg.validate()?;
    let d = cfg.dim;
    let h = cfg.ffn_hidden();
    let std = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = (0..cfg.layers)
        .map(|_| LayerWeights {
            wq: sample_matrix(&mut rng, d, d, std),
            wk: sample_matrix(&mut rng, d, d, std),
            wv: sample_matrix(&mut rng, d, d, std),
            wo: sample_matrix(&mut rng, d, d, std),
            w1: sample_matrix(&mut rng, d, h, std),
            w2: sample_matrix(&mut rng, h, d, std),
        })
        .collect();
    let prompts = (0..cfg.prompted_layers())
        .map(|_| sample_matrix(&mut rng, cfg.prompt_tokens, d, PROMPT_INIT_SCALE))
        .collect();
    Ok(ToyStudent {
        config: *cfg,
        layers,
        prompts,
    })
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

struct LayerTrace {
    z: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    z1: Array2<f64>,
    g: Array2<f64>,
    prompt_rows: usize,
}

pub struct EncodeTrace {
    layers: Vec<LayerTrace>,
    pooled: Array1<f64>,
    pooled_norm: f64,
    output: Array1<f64>,
}

impl EncodeTrace {
    pub fn output(&self) -> Vec<f64> {
        self.output.to_vec()
    }
}

fn forward_trace(student: &ToyStudent, tokens: &Array2<f64>) -> Result<EncodeTrace> {
    let cfg = &student.config;
    if tokens.nrows() != cfg.seq_len || tokens.ncols() != cfg.dim {
        return Err(Error::ShapeMismatch(format!(
            "tokens {}x{} vs configured {}x{}",
            tokens.nrows(),
            tokens.ncols(),
            cfg.seq_len,
            cfg.dim
        )));
    }
    let scale = 1.0 / (cfg.dim as f64).sqrt();
    let mut x = tokens.clone();
    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, w) in student.layers.iter().enumerate() {
        let prompt = student.prompts.get(l);
        let z = match prompt {
            Some(p) if p.nrows() > 0 => concatenate(Axis(0), &[p.view(), x.view()])
                .expect("matching widths"),
            _ => x.clone(),
        };
        let prompt_rows = prompt.map_or(0, Array2::nrows);
        let q = z.dot(&w.wq);
        let k = z.dot(&w.wk);
        let v = z.dot(&w.wv);
        let attn = softmax_rows(&(q.dot(&k.t()) * scale));
        let o = attn.dot(&v).dot(&w.wo);
        let z1 = &z + &o;
        let g = z1.dot(&w.w1).mapv(f64::tanh);
        let z2 = &z1 + &g.dot(&w.w2);
        x = z2.slice(s![prompt_rows.., ..]).to_owned();
        layers.push(LayerTrace {
            z,
            q,
            k,
            v,
            attn,
            z1,
            g,
            prompt_rows,
        });
    }
    let pooled = x.mean_axis(Axis(0)).expect("non-empty sequence");
    let pooled_norm = pooled.iter().map(|x| x * x).sum::<f64>().sqrt();
    if pooled_norm == 0.0 {
        return Err(Error::ZeroVector);
    }
    let output = &pooled / pooled_norm;
    Ok(EncodeTrace {
        layers,
        pooled,
        pooled_norm,
        output,
    })
}

/// Encode one token sequence to a unit-norm embedding.
pub fn encode(student: &ToyStudent, tokens: &Array2<f64>) -> Result<Vec<f64>> {
    Ok(forward_trace(student, tokens)?.output())
}

/// Encode one token sequence per class with the text branch.
pub fn student_text_embeddings(
    student: &ToyStudent,
    class_token_inputs: &[Array2<f64>],
) -> Result<Vec<Vec<f64>>> {
    class_token_inputs.iter().map(|t| encode(student, t)).collect()
}

/// Gradients of a scalar loss with respect to each prompt block, given the
/// gradient at the unit-norm output.
fn backward_trace(
    student: &ToyStudent,
    trace: &EncodeTrace,
    d_output: &[f64],
) -> Vec<Array2<f64>> {
    let cfg = &student.config;
    let scale = 1.0 / (cfg.dim as f64).sqrt();

    // through the normalization: d_m = (d_u - (d_u . u) u) / |m|
    let d_u = Array1::from(d_output.to_vec());
    let u = &trace.output;
    let proj = d_u.dot(u);
    let d_pooled = (&d_u - &(u * proj)) / trace.pooled_norm;

    // mean pool: every content row of the last layer output gets d_m / N
    let n = cfg.seq_len as f64;
    let mut d_x = Array2::zeros((cfg.seq_len, cfg.dim));
    for mut row in d_x.rows_mut() {
        row.assign(&(&d_pooled / n));
    }

    let mut d_prompts: Vec<Array2<f64>> = student
        .prompts
        .iter()
        .map(|p| Array2::zeros(p.dim()))
        .collect();

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let w = &student.layers[l];
        let total_rows = lt.z.nrows();
        let mut d_z2 = Array2::zeros((total_rows, cfg.dim));
        d_z2.slice_mut(s![lt.prompt_rows.., ..]).assign(&d_x);

        // feed-forward with residual
        let d_g = d_z2.dot(&w.w2.t());
        let d_f1 = &d_g * &lt.g.mapv(|g| 1.0 - g * g);
        let d_z1 = &d_z2 + &d_f1.dot(&w.w1.t());

        // attention output projection and weighted value sum
        let d_h = d_z1.dot(&w.wo.t());
        let d_attn = d_h.dot(&lt.v.t());
        let d_v = lt.attn.t().dot(&d_h);

        // softmax rows
        let mut d_scores = Array2::zeros((total_rows, total_rows));
        for i in 0..total_rows {
            let a = lt.attn.row(i);
            let da = d_attn.row(i);
            let inner: f64 = da.dot(&a);
            for j in 0..total_rows {
                d_scores[[i, j]] = a[j] * (da[j] - inner) * scale;
            }
        }

        let d_q = d_scores.dot(&lt.k);
        let d_k = d_scores.t().dot(&lt.q);
        let d_z = &d_z1 + &(d_q.dot(&w.wq.t()) + d_k.dot(&w.wk.t()) + d_v.dot(&w.wv.t()));

        if lt.prompt_rows > 0 {
            let block = d_z.slice(s![..lt.prompt_rows, ..]).to_owned();
            d_prompts[l] += &block;
        }
        d_x = d_z.slice(s![lt.prompt_rows.., ..]).to_owned();
    }
    d_prompts
}

/// Exact multiply-add counts for one prompted layer: the attention score
/// matrix and the attention-weighted value sum each cost (N+P)^2 * D, the
/// feed-forward costs (N+P) times its per-token cost.
pub fn count_multiply_adds(cfg: &ToyEncoderConfig) -> (u128, u128) {
    let t = (cfg.seq_len + cfg.prompt_tokens) as u128;
    let d = cfg.dim as u128;
    let h = cfg.ffn_hidden() as u128;
    let attention = 2 * t * t * d;
    let mlp = t * 2 * d * h;
    (attention, mlp)
}

/// Both encoder branches plus the shared learnable logit scale: the only
/// trainable state in the system.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentPair {
    pub vision: ToyStudent,
    pub text: ToyStudent,
    pub tau_s: f64,
}

impl StudentPair {
    pub fn new(vision_cfg: &ToyEncoderConfig, text_cfg: &ToyEncoderConfig, tau_s: f64) -> Result<Self> {
        if !(tau_s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tau_s must be > 0, got {tau_s}"
            )));
        }
        Ok(Self {
            vision: init_student(vision_cfg)?,
            text: init_student(text_cfg)?,
            tau_s,
        })
    }
}

/// Gradients for everything trainable.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub vision_prompts: Vec<Array2<f64>>,
    pub text_prompts: Vec<Array2<f64>>,
    pub tau_s: f64,
}

/// One labeled training batch: student token inputs with matched teacher
/// features. Labels are column indices into the class order.
pub struct TrainBatch<'a> {
    pub image_tokens: &'a [Array2<f64>],
    pub labels: &'a [usize],
    pub teacher_feats: &'a [Vec<f64>],
}

/// Per-run data shared by every batch: the class token inputs in class
/// order, the teacher prototypes, and the distillation masks.
pub struct TrainContext<'a> {
    pub class_tokens: &'a [Array2<f64>],
    pub class_order: &'a [usize],
    pub teacher_protos: &'a BTreeMap<usize, ClassPrototype>,
    pub base_columns: &'a std::collections::BTreeSet<usize>,
    pub text_align_classes: &'a std::collections::BTreeSet<usize>,
}

fn assemble_inputs<'a>(
    batch: &'a TrainBatch,
    ctx: &'a TrainContext,
    student_feats: &'a [Vec<f64>],
    student_text: &'a BTreeMap<usize, Vec<f64>>,
    tau_s: f64,
) -> TotalLossInputs<'a> {
    TotalLossInputs {
        student_image_feats: student_feats,
        teacher_image_feats: batch.teacher_feats,
        labels: batch.labels,
        student_text,
        teacher_protos: ctx.teacher_protos,
        class_order: ctx.class_order,
        base_columns: ctx.base_columns,
        text_align_classes: ctx.text_align_classes,
        tau_s,
    }
}

fn encode_text_map(
    pair: &StudentPair,
    ctx: &TrainContext,
) -> Result<(Vec<EncodeTrace>, BTreeMap<usize, Vec<f64>>)> {
    if ctx.class_tokens.len() != ctx.class_order.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} class token inputs vs {} classes",
            ctx.class_tokens.len(),
            ctx.class_order.len()
        )));
    }
    let traces: Vec<EncodeTrace> = ctx
        .class_tokens
        .iter()
        .map(|t| forward_trace(&pair.text, t))
        .collect::<Result<_>>()?;
    let map = ctx
        .class_order
        .iter()
        .zip(&traces)
        .map(|(k, t)| (*k, t.output()))
        .collect();
    Ok((traces, map))
}

/// Full objective at the current parameters, without gradients.
pub fn forward_loss(
    pair: &StudentPair,
    batch: &TrainBatch,
    ctx: &TrainContext,
    cfg: &DistillConfig,
    step: usize,
    total_steps: usize,
) -> Result<LossBreakdown> {
    let image_traces: Vec<EncodeTrace> = batch
        .image_tokens
        .iter()
        .map(|t| forward_trace(&pair.vision, t))
        .collect::<Result<_>>()?;
    let student_feats: Vec<Vec<f64>> = image_traces.iter().map(EncodeTrace::output).collect();
    let (_, student_text) = encode_text_map(pair, ctx)?;
    let inputs = assemble_inputs(batch, ctx, &student_feats, &student_text, pair.tau_s);
    distill::total_loss(&inputs, cfg, step, total_steps)
}

/// Exact reverse-mode gradients of the full objective with respect to every
/// prompt entry and the logit scale.
pub fn backward(
    pair: &StudentPair,
    batch: &TrainBatch,
    ctx: &TrainContext,
    cfg: &DistillConfig,
    step: usize,
    total_steps: usize,
) -> Result<(LossBreakdown, Gradients)> {
    let image_traces: Vec<EncodeTrace> = batch
        .image_tokens
        .iter()
        .map(|t| forward_trace(&pair.vision, t))
        .collect::<Result<_>>()?;
    let student_feats: Vec<Vec<f64>> = image_traces.iter().map(EncodeTrace::output).collect();
    let (text_traces, student_text) = encode_text_map(pair, ctx)?;

    let inputs = assemble_inputs(batch, ctx, &student_feats, &student_text, pair.tau_s);
    let (breakdown, loss_grads) = distill::total_loss_backward(&inputs, cfg, step, total_steps)?;

    let mut vision_prompts: Vec<Array2<f64>> = pair
        .vision
        .prompts
        .iter()
        .map(|p| Array2::zeros(p.dim()))
        .collect();
    for (trace, d_feat) in image_traces.iter().zip(&loss_grads.d_student_image_feats) {
        for (acc, g) in vision_prompts
            .iter_mut()
            .zip(backward_trace(&pair.vision, trace, d_feat))
        {
            *acc += &g;
        }
    }

    let mut text_prompts: Vec<Array2<f64>> = pair
        .text
        .prompts
        .iter()
        .map(|p| Array2::zeros(p.dim()))
        .collect();
    for (trace, k) in text_traces.iter().zip(ctx.class_order) {
        let d_text = &loss_grads.d_student_text[k];
        for (acc, g) in text_prompts
            .iter_mut()
            .zip(backward_trace(&pair.text, trace, d_text))
        {
            *acc += &g;
        }
    }

    for (name, blocks) in [("vision prompts", &vision_prompts), ("text prompts", &text_prompts)] {
        for (l, b) in blocks.iter().enumerate() {
            if b.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    path: format!("{name} layer {l}"),
                });
            }
        }
    }
    if !loss_grads.d_tau_s.is_finite() {
        return Err(Error::NonFiniteGradient {
            path: "tau_s".into(),
        });
    }

    Ok((
        breakdown,
        Gradients {
            vision_prompts,
            text_prompts,
            tau_s: loss_grads.d_tau_s,
        },
    ))
}

/// Training knobs: plain gradient descent with an optional decoupled weight
/// decay on the prompts (off by default).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Snapshot of all trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    pub vision_prompts: Vec<Array2<f64>>,
    pub text_prompts: Vec<Array2<f64>>,
    pub tau_s: f64,
}

impl StudentParams {
    pub fn of(pair: &StudentPair) -> Self {
        Self {
            vision_prompts: pair.vision.prompts.clone(),
            text_prompts: pair.text.prompts.clone(),
            tau_s: pair.tau_s,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub learning_rate: f64,
    pub params_snapshot: StudentParams,
    pub loss_history: Vec<LossBreakdown>,
}

/// Whole labeled training set in student-input form.
pub struct TrainData {
    pub image_tokens: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
    pub teacher_feats: Vec<Vec<f64>>,
}

impl TrainData {
    pub fn len(&self) -> usize {
        self.image_tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_tokens.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.image_tokens.len() != self.labels.len()
            || self.image_tokens.len() != self.teacher_feats.len()
        {
            return Err(Error::ShapeMismatch(format!(
                "{} token inputs, {} labels, {} teacher features",
                self.image_tokens.len(),
                self.labels.len(),
                self.teacher_feats.len()
            )));
        }
        if self.is_empty() {
            return Err(Error::EmptyInput("training set"));
        }
        Ok(())
    }
}

/// Plain gradient descent over prompts and the logit scale. The example
/// order is a single seeded shuffle, fixed across epochs, so runs are
/// fully determined by (seed, config, data, hyperparameters).
pub fn train(
    pair: &mut StudentPair,
    data: &TrainData,
    ctx: &TrainContext,
    cfg: &DistillConfig,
    opts: &TrainOptions,
) -> Result<TrainState> {
    data.validate()?;
    if opts.batch_size == 0 {
        return Err(Error::InvalidParameter("batch_size must be positive".into()));
    }
    let n = data.len();
    let batches_per_epoch = n.div_ceil(opts.batch_size);
    let total_steps = opts.epochs * batches_per_epoch;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for i in (1..n).rev() {
        order.swap(i, rand::Rng::random_range(&mut rng, 0..=i));
    }

    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0;
    for _ in 0..opts.epochs {
        for chunk in order.chunks(opts.batch_size) {
            let image_tokens: Vec<Array2<f64>> =
                chunk.iter().map(|&i| data.image_tokens[i].clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let teacher_feats: Vec<Vec<f64>> =
                chunk.iter().map(|&i| data.teacher_feats[i].clone()).collect();
            let batch = TrainBatch {
                image_tokens: &image_tokens,
                labels: &labels,
                teacher_feats: &teacher_feats,
            };
            let (breakdown, grads) = backward(pair, &batch, ctx, cfg, step, total_steps)?;
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence { step });
            }

            let lr = opts.learning_rate;
            let decay = 1.0 - lr * opts.weight_decay;
            for (p, g) in pair.vision.prompts.iter_mut().zip(&grads.vision_prompts) {
                if opts.weight_decay != 0.0 {
                    *p *= decay;
                }
                *p -= &(g * lr);
            }
            for (p, g) in pair.text.prompts.iter_mut().zip(&grads.text_prompts) {
                if opts.weight_decay != 0.0 {
                    *p *= decay;
                }
                *p -= &(g * lr);
            }
            pair.tau_s -= lr * grads.tau_s;
            if !pair.tau_s.is_finite() {
                return Err(Error::Divergence { step });
            }

            history.push(breakdown);
            step += 1;
        }
    }

    Ok(TrainState {
        step,
        learning_rate: opts.learning_rate,
        params_snapshot: StudentParams::of(pair),
        loss_history: history,
    })
}

/// Argmax-cosine accuracy of the pair on labeled token inputs, classifying
/// against the student's own text embeddings.
pub fn pair_accuracy(
    pair: &StudentPair,
    image_tokens: &[Array2<f64>],
    labels: &[usize],
    class_tokens: &[Array2<f64>],
) -> Result<f64> {
    let text = student_text_embeddings(&pair.text, class_tokens)?;
    let mut correct = 0usize;
    for (tokens, &label) in image_tokens.iter().zip(labels) {
        let v = encode(&pair.vision, tokens)?;
        let pred = text
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| {
                math::dot(&v, a)
                    .partial_cmp(&math::dot(&v, b))
                    .unwrap()
                    .then(j.cmp(i))
            })
            .map(|(i, _)| i)
            .unwrap();
        if pred == label {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::collections::BTreeSet;

    fn small_cfg(seed: u64) -> ToyEncoderConfig {
        ToyEncoderConfig {
            dim: 8,
            seq_len: 4,
            prompt_tokens: 2,
            layers: 2,
            seed,
            prompt_layers: None,
        }
    }

    fn random_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        let mut t = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..d {
                t[[i, j]] = rng.random_range(-1.0..1.0);
            }
        }
        t
    }

    fn bits(student: &ToyStudent) -> Vec<u64> {
        student
            .layers
            .iter()
            .flat_map(|l| {
                [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2]
                    .into_iter()
                    .flat_map(|m| m.iter().map(|x| x.to_bits()))
                    .collect::<Vec<u64>>()
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = small_cfg(9);
        let a = init_student(&cfg).unwrap();
        let b = init_student(&cfg).unwrap();
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(a.prompts, b.prompts);

        let other = init_student(&small_cfg(10)).unwrap();
        assert_ne!(bits(&a), bits(&other));
    }

    #[test]
    fn zero_prompts_means_no_prompt_parameters() {
        let cfg = ToyEncoderConfig {
            prompt_tokens: 0,
            ..small_cfg(3)
        };
        let s = init_student(&cfg).unwrap();
        assert!(s.prompts.is_empty());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tokens = random_tokens(&mut rng, cfg.seq_len, cfg.dim);
        let out = encode(&s, &tokens).unwrap();
        assert!((math::norm(&out) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_is_deterministic_and_unit_norm() {
        let cfg = small_cfg(5);
        let s = init_student(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tokens = random_tokens(&mut rng, cfg.seq_len, cfg.dim);
        let a = encode(&s, &tokens).unwrap();
        let b = encode(&s, &tokens).unwrap();
        assert_eq!(a, b);
        assert!((math::norm(&a) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_rejects_bad_shapes() {
        let cfg = small_cfg(5);
        let s = init_student(&cfg).unwrap();
        let bad = Array2::zeros((cfg.seq_len + 1, cfg.dim));
        assert!(encode(&s, &bad).is_err());
    }

    #[test]
    fn prompt_perturbation_moves_output() {
        let cfg = small_cfg(6);
        let mut s = init_student(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tokens = random_tokens(&mut rng, cfg.seq_len, cfg.dim);
        let before = encode(&s, &tokens).unwrap();
        s.prompts[1][[0, 0]] += 1e-3;
        let after = encode(&s, &tokens).unwrap();
        let diff: f64 = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9, "prompt perturbation had no effect");
    }

    #[test]
    fn multiply_add_counter_examples() {
        // no prompts: attention cost proportional to N^2
        let base = ToyEncoderConfig {
            dim: 4,
            seq_len: 10,
            prompt_tokens: 0,
            layers: 1,
            seed: 0,
            prompt_layers: None,
        };
        let (attn0, _) = count_multiply_adds(&base);
        assert_eq!(attn0, 2 * 100 * 4);

        // paper setup: (57^2 - 49^2) / 49^2
        let vision = ToyEncoderConfig {
            seq_len: 49,
            prompt_tokens: 8,
            ..base
        };
        let plain = ToyEncoderConfig {
            seq_len: 49,
            prompt_tokens: 0,
            ..base
        };
        let (with_p, _) = count_multiply_adds(&vision);
        let (without, _) = count_multiply_adds(&plain);
        let ratio = (with_p - without) as f64 / without as f64;
        assert!((ratio - 0.3528).abs() < 5e-4);

        // doubling P matches 2P/N + (P/N)^2 exactly in integer arithmetic
        for (n, p) in [(10usize, 2usize), (10, 4), (32, 8), (49, 16)] {
            let cfg_p = ToyEncoderConfig {
                seq_len: n,
                prompt_tokens: p,
                ..base
            };
            let cfg_0 = ToyEncoderConfig {
                seq_len: n,
                prompt_tokens: 0,
                ..base
            };
            let (mp, _) = count_multiply_adds(&cfg_p);
            let (m0, _) = count_multiply_adds(&cfg_0);
            let n = n as u128;
            let p = p as u128;
            assert_eq!((mp - m0) * n * n, m0 * (2 * p * n + p * p));
        }
    }

    fn tiny_problem(
        seed: u64,
    ) -> (
        StudentPair,
        Vec<Array2<f64>>,
        Vec<usize>,
        Vec<Vec<f64>>,
        Vec<Array2<f64>>,
        Vec<usize>,
        BTreeSet<usize>,
        BTreeMap<usize, ClassPrototype>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let classes = 3;
        let batch = 4;
        let vis = ToyEncoderConfig {
            dim: 8,
            seq_len: 4,
            prompt_tokens: 2,
            layers: 1,
            seed: seed + 1,
            prompt_layers: None,
        };
        let txt = ToyEncoderConfig {
            dim: 8,
            seq_len: 3,
            prompt_tokens: 2,
            layers: 1,
            seed: seed + 2,
            prompt_layers: None,
        };
        let pair = StudentPair::new(&vis, &txt, 1.0).unwrap();
        let image_tokens: Vec<Array2<f64>> = (0..batch)
            .map(|_| random_tokens(&mut rng, vis.seq_len, vis.dim))
            .collect();
        let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();
        let teacher_feats: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                let v: Vec<f64> = (0..vis.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                math::l2_normalize(&v).unwrap()
            })
            .collect();
        let class_tokens: Vec<Array2<f64>> = (0..classes)
            .map(|_| random_tokens(&mut rng, txt.seq_len, txt.dim))
            .collect();
        let order: Vec<usize> = (0..classes).collect();
        let base: BTreeSet<usize> = (0..classes).collect();
        let protos: BTreeMap<usize, ClassPrototype> = (0..classes)
            .map(|k| {
                let v: Vec<f64> = (0..vis.dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let v = math::l2_normalize(&v).unwrap();
                (
                    k,
                    ClassPrototype {
                        class_index: k,
                        prototype: v,
                        kept_indices: [0].into_iter().collect(),
                        scores: vec![1.0],
                        weights: vec![1.0],
                        stats: math::RobustStats {
                            median: 1.0,
                            mad: 0.0,
                            zscores: vec![0.0],
                        },
                    },
                )
            })
            .collect();
        (pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos)
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let (mut pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos) =
            tiny_problem(40);
        let cfg = DistillConfig::default();
        let step = 60;
        let total = 100;
        let text_set: BTreeSet<usize> = order.iter().copied().collect();

        let batch = TrainBatch {
            image_tokens: &image_tokens,
            labels: &labels,
            teacher_feats: &teacher_feats,
        };
        let ctx = TrainContext {
            class_tokens: &class_tokens,
            class_order: &order,
            teacher_protos: &protos,
            base_columns: &base,
            text_align_classes: &text_set,
        };
        let (_, grads) = backward(&pair, &batch, &ctx, &cfg, step, total).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        let mut eval = |pair: &StudentPair| {
            forward_loss(pair, &batch, &ctx, &cfg, step, total)
                .unwrap()
                .total
        };
        for branch in 0..2 {
            let blocks = if branch == 0 {
                grads.vision_prompts.clone()
            } else {
                grads.text_prompts.clone()
            };
            for (l, block) in blocks.iter().enumerate() {
                for i in 0..block.nrows() {
                    for j in 0..block.ncols() {
                        let get = |pair: &mut StudentPair| -> &mut f64 {
                            let s = if branch == 0 { &mut pair.vision } else { &mut pair.text };
                            &mut s.prompts[l][[i, j]]
                        };
                        *get(&mut pair) += h;
                        let plus = eval(&pair);
                        *get(&mut pair) -= 2.0 * h;
                        let minus = eval(&pair);
                        *get(&mut pair) += h;
                        let fd = (plus - minus) / (2.0 * h);
                        let analytic = block[[i, j]];
                        let denom = analytic.abs().max(fd.abs());
                        if denom < 1e-7 {
                            assert!((analytic - fd).abs() <= 1e-7);
                        } else {
                            assert!(
                                (analytic - fd).abs() / denom <= 1e-4,
                                "branch {branch} layer {l} [{i},{j}]: {analytic} vs {fd}"
                            );
                        }
                        checked += 1;
                    }
                }
            }
        }
        // tau_s
        pair.tau_s += h;
        let plus = eval(&pair);
        pair.tau_s -= 2.0 * h;
        let minus = eval(&pair);
        pair.tau_s += h;
        let fd = (plus - minus) / (2.0 * h);
        let denom = grads.tau_s.abs().max(fd.abs()).max(1e-7);
        assert!((grads.tau_s - fd).abs() / denom <= 1e-4);
        assert!(checked > 0);
    }

    #[test]
    fn zero_lr_keeps_params_and_loss_constant() {
        let (mut pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos) =
            tiny_problem(50);
        let text_set: BTreeSet<usize> = order.iter().copied().collect();
        let ctx = TrainContext {
            class_tokens: &class_tokens,
            class_order: &order,
            teacher_protos: &protos,
            base_columns: &base,
            text_align_classes: &text_set,
        };
        let data = TrainData {
            image_tokens,
            labels,
            teacher_feats,
        };
        let before = StudentParams::of(&pair);
        let state = train(
            &mut pair,
            &data,
            &ctx,
            &DistillConfig::default(),
            &TrainOptions {
                epochs: 3,
                learning_rate: 0.0,
                batch_size: 2,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(StudentParams::of(&pair), before);
        assert_eq!(state.loss_history.len(), state.step);
        let first = state.loss_history[0].total;
        for b in &state.loss_history {
            assert_eq!(b.total, first);
        }
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos) =
            tiny_problem(51);
        let text_set: BTreeSet<usize> = order.iter().copied().collect();
        let ctx = TrainContext {
            class_tokens: &class_tokens,
            class_order: &order,
            teacher_protos: &protos,
            base_columns: &base,
            text_align_classes: &text_set,
        };
        let data = TrainData {
            image_tokens,
            labels,
            teacher_feats,
        };
        let before = StudentParams::of(&pair);
        let state = train(
            &mut pair,
            &data,
            &ctx,
            &DistillConfig::default(),
            &TrainOptions {
                epochs: 0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(state.loss_history.is_empty());
        assert_eq!(state.step, 0);
        assert_eq!(StudentParams::of(&pair), before);
    }

    #[test]
    fn frozen_backbone_is_bit_identical_after_training() {
        let (mut pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos) =
            tiny_problem(52);
        let text_set: BTreeSet<usize> = order.iter().copied().collect();
        let vision_before = bits(&pair.vision);
        let text_before = bits(&pair.text);
        let prompts_before = pair.vision.prompts.clone();
        let ctx = TrainContext {
            class_tokens: &class_tokens,
            class_order: &order,
            teacher_protos: &protos,
            base_columns: &base,
            text_align_classes: &text_set,
        };
        let data = TrainData {
            image_tokens,
            labels,
            teacher_feats,
        };
        train(
            &mut pair,
            &data,
            &ctx,
            &DistillConfig::default(),
            &TrainOptions {
                epochs: 5,
                learning_rate: 0.05,
                batch_size: 2,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(bits(&pair.vision), vision_before);
        assert_eq!(bits(&pair.text), text_before);
        assert_ne!(pair.vision.prompts, prompts_before, "prompts did not move");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut pair, image_tokens, labels, teacher_feats, class_tokens, order, base, protos) =
                tiny_problem(53);
            let text_set: BTreeSet<usize> = order.iter().copied().collect();
            let ctx = TrainContext {
                class_tokens: &class_tokens,
                class_order: &order,
                teacher_protos: &protos,
                base_columns: &base,
                text_align_classes: &text_set,
            };
            let data = TrainData {
                image_tokens,
                labels,
                teacher_feats,
            };
            train(
                &mut pair,
                &data,
                &ctx,
                &DistillConfig::default(),
                &TrainOptions {
                    epochs: 4,
                    learning_rate: 0.03,
                    batch_size: 3,
                    seed: 11,
                    ..TrainOptions::default()
                },
            )
            .unwrap();
            (StudentParams::of(&pair), )
        };
        let (a,) = run();
        let (b,) = run();
        assert_eq!(a, b);
    }

    #[test]
    fn separable_task_improves_under_training() {
        // three well-separated clusters in token space; task loss and
        // accuracy should both improve from their initial values
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let classes = 3;
        let dim = 8;
        let vis = ToyEncoderConfig {
            dim,
            seq_len: 4,
            prompt_tokens: 2,
            layers: 1,
            seed: 100,
            prompt_layers: None,
        };
        let txt = ToyEncoderConfig {
            dim,
            seq_len: 3,
            prompt_tokens: 2,
            layers: 1,
            seed: 200,
            prompt_layers: None,
        };
        let mut pair = StudentPair::new(&vis, &txt, 1.0).unwrap();

        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|k| {
                let mut c = vec![0.0; dim];
                c[k] = 1.0;
                c[(k + 3) % dim] = 0.5;
                c
            })
            .collect();
        let per_class = 8;
        let mut image_tokens = Vec::new();
        let mut labels = Vec::new();
        let mut teacher_feats = Vec::new();
        for k in 0..classes {
            for _ in 0..per_class {
                let mut t = Array2::zeros((vis.seq_len, dim));
                for i in 0..vis.seq_len {
                    for j in 0..dim {
                        t[[i, j]] = centers[k][j] + rng.random_range(-0.1..0.1);
                    }
                }
                image_tokens.push(t);
                labels.push(k);
                teacher_feats.push(math::l2_normalize(&centers[k]).unwrap());
            }
        }
        let class_tokens: Vec<Array2<f64>> = (0..classes)
            .map(|k| {
                let mut t = Array2::zeros((txt.seq_len, dim));
                for i in 0..txt.seq_len {
                    for j in 0..dim {
                        t[[i, j]] = centers[k][j] + rng.random_range(-0.05..0.05);
                    }
                }
                t
            })
            .collect();
        let order: Vec<usize> = (0..classes).collect();
        let base: BTreeSet<usize> = (0..classes).collect();
        let protos: BTreeMap<usize, ClassPrototype> = (0..classes)
            .map(|k| {
                (
                    k,
                    ClassPrototype {
                        class_index: k,
                        prototype: math::l2_normalize(&centers[k]).unwrap(),
                        kept_indices: [0].into_iter().collect(),
                        scores: vec![1.0],
                        weights: vec![1.0],
                        stats: math::RobustStats {
                            median: 1.0,
                            mad: 0.0,
                            zscores: vec![0.0],
                        },
                    },
                )
            })
            .collect();
        let ctx = TrainContext {
            class_tokens: &class_tokens,
            class_order: &order,
            teacher_protos: &protos,
            base_columns: &base,
            text_align_classes: &base,
        };
        let acc_before = pair_accuracy(&pair, &image_tokens, &labels, &class_tokens).unwrap();
        let data = TrainData {
            image_tokens,
            labels,
            teacher_feats,
        };
        let state = train(
            &mut pair,
            &data,
            &ctx,
            &DistillConfig::default(),
            &TrainOptions {
                epochs: 25,
                learning_rate: 0.05,
                batch_size: 8,
                seed: 1,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let first_task = state.loss_history.first().unwrap().task;
        let last_task = state.loss_history.last().unwrap().task;
        assert!(
            last_task < first_task,
            "task loss did not improve: {first_task} -> {last_task}"
        );
        let acc_after =
            pair_accuracy(&pair, &data.image_tokens, &data.labels, &class_tokens).unwrap();
        assert!(
            acc_after >= acc_before,
            "accuracy regressed: {acc_before} -> {acc_after}"
        );
    }

    #[test]
    fn text_and_vision_prompts_are_isolated() {
        let (mut pair, image_tokens, _, _, class_tokens, ..) = tiny_problem(70);
        let v_before = encode(&pair.vision, &image_tokens[0]).unwrap();
        let t_before = encode(&pair.text, &class_tokens[0]).unwrap();
        pair.text.prompts[0][[0, 0]] += 0.5;
        let v_after = encode(&pair.vision, &image_tokens[0]).unwrap();
        let t_after = encode(&pair.text, &class_tokens[0]).unwrap();
        assert_eq!(v_before, v_after);
        assert_ne!(t_before, t_after);
    }

    #[test]
    fn shallow_prompting_only_touches_leading_layers() {
        let cfg = ToyEncoderConfig {
            dim: 6,
            seq_len: 3,
            prompt_tokens: 2,
            layers: 2,
            seed: 8,
            prompt_layers: Some(1),
        };
        let s = init_student(&cfg).unwrap();
        assert_eq!(s.prompts.len(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = random_tokens(&mut rng, 3, 6);
        let out = encode(&s, &tokens).unwrap();
        assert!((math::norm(&out) - 1.0).abs() < 1e-6);
    }
}
