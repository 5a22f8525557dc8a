//! The primary/auxiliary classifier family, per-slot losses and parameter
//! gradients, auxiliary-model training, pseudo-label generation, and the
//! three evaluation metrics (JGA, JTA, SA).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::data::{LabelModel, MinibatchSampler, Sample, SlotSchema, NONE_VALUE};
use crate::error::{Error, Result};
use crate::weighting::WeightPair;

/// Probability floor inside `slot_loss`; bounds every loss by -ln(floor)
/// (about 27.6) so loss features stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Linear,
    OneHidden { hidden: usize },
}

/// Per-slot softmax classifier over a shared context vector. Parameters are
/// stored flat, one contiguous block per slot:
///
/// - linear: `[w (vocab x d), b (vocab)]`
/// - one hidden layer: `[w1 (h x d), b1 (h), w2 (vocab x h), b2 (vocab)]`
///   with tanh hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimaryModel {
    arch: Architecture,
    context_dim: usize,
    vocab_sizes: Vec<usize>,
    slot_offsets: Vec<usize>,
    params: Vec<f64>,
}

fn slot_param_len(arch: Architecture, vocab: usize, d: usize) -> usize {
    match arch {
        Architecture::Linear => vocab * d + vocab,
        Architecture::OneHidden { hidden } => hidden * d + hidden + vocab * hidden + vocab,
    }
}

impl PrimaryModel {
    pub fn zeros(schema: &SlotSchema, context_dim: usize, arch: Architecture) -> Self {
        let vocab_sizes: Vec<usize> = schema.slots.iter().map(|s| s.vocab_size).collect();
        let mut slot_offsets = Vec::with_capacity(vocab_sizes.len());
        let mut total = 0usize;
        for &v in &vocab_sizes {
            slot_offsets.push(total);
            total += slot_param_len(arch, v, context_dim);
        }
        PrimaryModel { arch, context_dim, vocab_sizes, slot_offsets, params: vec![0.0; total] }
    }

    /// Seeded init: weights from a scaled standard normal, biases zero.
    pub fn init(schema: &SlotSchema, context_dim: usize, arch: Architecture, seed: u64) -> Self {
        let mut model = Self::zeros(schema, context_dim, arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 0.01;
        for slot in 0..model.num_slots() {
            let vocab = model.vocab_sizes[slot];
            let off = model.slot_offsets[slot];
            match arch {
                Architecture::Linear => {
                    for p in &mut model.params[off..off + vocab * context_dim] {
                        *p = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                Architecture::OneHidden { hidden } => {
                    for p in &mut model.params[off..off + hidden * context_dim] {
                        *p = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                    let w2_off = off + hidden * context_dim + hidden;
                    for p in &mut model.params[w2_off..w2_off + vocab * hidden] {
                        *p = scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
        }
        model
    }

    /// A linear model whose parameters are exactly the ground-truth label
    /// model, i.e. a perfect predictor on its own corpus.
    pub fn from_label_model(label_model: &LabelModel, schema: &SlotSchema, context_dim: usize) -> Self {
        let mut model = Self::zeros(schema, context_dim, Architecture::Linear);
        for slot in 0..model.num_slots() {
            let vocab = model.vocab_sizes[slot];
            let off = model.slot_offsets[slot];
            model.params[off..off + vocab * context_dim]
                .copy_from_slice(&label_model.weights[slot]);
            model.params[off + vocab * context_dim..off + vocab * context_dim + vocab]
                .copy_from_slice(&label_model.biases[slot]);
        }
        model
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn num_slots(&self) -> usize {
        self.vocab_sizes.len()
    }

    pub fn vocab_size(&self, slot: usize) -> usize {
        self.vocab_sizes[slot]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    pub fn slot_range(&self, slot: usize) -> std::ops::Range<usize> {
        let off = self.slot_offsets[slot];
        off..off + slot_param_len(self.arch, self.vocab_sizes[slot], self.context_dim)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_context(&self, context: &[f64]) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::Shape(format!(
                "context has dim {}, model expects {}",
                context.len(),
                self.context_dim
            )));
        }
        Ok(())
    }

    fn slot_logits(&self, slot: usize, context: &[f64]) -> Vec<f64> {
        let d = self.context_dim;
        let vocab = self.vocab_sizes[slot];
        let off = self.slot_offsets[slot];
        match self.arch {
            Architecture::Linear => {
                let w = &self.params[off..off + vocab * d];
                let b = &self.params[off + vocab * d..off + vocab * d + vocab];
                (0..vocab)
                    .map(|v| {
                        b[v] + w[v * d..(v + 1) * d]
                            .iter()
                            .zip(context)
                            .map(|(wi, xi)| wi * xi)
                            .sum::<f64>()
                    })
                    .collect()
            }
            Architecture::OneHidden { hidden } => {
                let (w1, b1, w2, b2) = self.hidden_blocks(slot, hidden, vocab);
                let t = hidden_activations(w1, b1, context, hidden, d);
                (0..vocab)
                    .map(|v| {
                        b2[v] + w2[v * hidden..(v + 1) * hidden]
                            .iter()
                            .zip(&t)
                            .map(|(wi, ti)| wi * ti)
                            .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    fn hidden_blocks(&self, slot: usize, hidden: usize, vocab: usize) -> (&[f64], &[f64], &[f64], &[f64]) {
        let d = self.context_dim;
        let off = self.slot_offsets[slot];
        let w1 = &self.params[off..off + hidden * d];
        let b1 = &self.params[off + hidden * d..off + hidden * d + hidden];
        let w2_off = off + hidden * d + hidden;
        let w2 = &self.params[w2_off..w2_off + vocab * hidden];
        let b2 = &self.params[w2_off + vocab * hidden..w2_off + vocab * hidden + vocab];
        (w1, b1, w2, b2)
    }

    /// Softmax distribution of one slot, stabilized by max subtraction.
    pub fn forward_slot(&self, slot: usize, context: &[f64]) -> Result<Vec<f64>> {
        self.check_context(context)?;
        let logits = self.slot_logits(slot, context);
        Ok(softmax(&logits))
    }

    /// Per-slot distributions for one context.
    pub fn forward(&self, context: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_context(context)?;
        Ok((0..self.num_slots()).map(|s| softmax(&self.slot_logits(s, context))).collect())
    }

    /// Argmax prediction of one slot, ties toward the lower index.
    pub fn predict_slot(&self, slot: usize, context: &[f64]) -> usize {
        argmax(&self.slot_logits(slot, context))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let ckpt = ModelCheckpoint {
            schema_hash: String::new(),
            arch: self.arch,
            context_dim: self.context_dim,
            vocab_sizes: self.vocab_sizes.clone(),
            params: self.params.clone(),
        };
        serde_json::to_writer(&mut w, &ckpt)?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn save_with_schema(&self, path: &Path, schema: &SlotSchema) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let ckpt = ModelCheckpoint {
            schema_hash: schema.content_hash(),
            arch: self.arch,
            context_dim: self.context_dim,
            vocab_sizes: self.vocab_sizes.clone(),
            params: self.params.clone(),
        };
        serde_json::to_writer(&mut w, &ckpt)?;
        use std::io::Write;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PrimaryModel> {
        let file = File::open(path)?;
        let ckpt: ModelCheckpoint = serde_json::from_reader(BufReader::new(file))?;
        let mut slot_offsets = Vec::with_capacity(ckpt.vocab_sizes.len());
        let mut total = 0usize;
        for &v in &ckpt.vocab_sizes {
            slot_offsets.push(total);
            total += slot_param_len(ckpt.arch, v, ckpt.context_dim);
        }
        if ckpt.params.len() != total {
            return Err(Error::Schema(format!(
                "checkpoint has {} parameters, layout expects {total}",
                ckpt.params.len()
            )));
        }
        Ok(PrimaryModel {
            arch: ckpt.arch,
            context_dim: ckpt.context_dim,
            vocab_sizes: ckpt.vocab_sizes,
            slot_offsets,
            params: ckpt.params,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    schema_hash: String,
    arch: Architecture,
    context_dim: usize,
    vocab_sizes: Vec<usize>,
    params: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_value = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if v > best_value {
            best_value = v;
            best = i;
        }
    }
    best
}

/// Negative log likelihood of `label` under `dist`, clamped by `PROB_FLOOR`.
pub fn slot_loss(dist: &[f64], label: usize) -> f64 {
    -dist[label].max(PROB_FLOOR).ln()
}

/// Whether the loss of `label` under `dist` is differentiable (not clamped).
#[inline]
pub(crate) fn loss_grad_active(dist: &[f64], label: usize) -> bool {
    dist[label] > PROB_FLOOR
}

// ---------------------------------------------------------------------------
// Weighted objective and its gradient in the model parameters
// ---------------------------------------------------------------------------

/// Per-class softmax cross-entropy coefficient for the weighted two-label
/// target: `scale * ((wp + wv) p[c] - wp [c = pseudo] - wv [c = vanilla])`,
/// with a term dropped while its loss sits on the probability floor.
fn soft_coefficients(
    probs: &[f64],
    terms: &[(usize, f64)],
    scale: f64,
    out: &mut Vec<f64>,
) {
    out.clear();
    let mut weight_sum = 0.0;
    for &(label, weight) in terms {
        if loss_grad_active(probs, label) {
            weight_sum += weight;
        }
    }
    out.extend(probs.iter().map(|&p| weight_sum * p));
    for &(label, weight) in terms {
        if loss_grad_active(probs, label) {
            out[label] -= weight;
        }
    }
    for c in out.iter_mut() {
        *c *= scale;
    }
}

/// Accumulates `coef . d logits/d params` into the slot's gradient block.
fn accumulate_slot_grad(
    model: &PrimaryModel,
    slot: usize,
    context: &[f64],
    coef: &[f64],
    grad: &mut [f64],
) {
    let d = model.context_dim;
    let vocab = model.vocab_sizes[slot];
    let off = model.slot_offsets[slot];
    match model.arch {
        Architecture::Linear => {
            let (grad_w, rest) = grad[off..].split_at_mut(vocab * d);
            let grad_b = &mut rest[..vocab];
            for v in 0..vocab {
                let c = coef[v];
                if c != 0.0 {
                    for (g, x) in grad_w[v * d..(v + 1) * d].iter_mut().zip(context) {
                        *g += c * x;
                    }
                }
                grad_b[v] += c;
            }
        }
        Architecture::OneHidden { hidden } => {
            let (w1, b1, w2, _) = model.hidden_blocks(slot, hidden, vocab);
            let t = hidden_activations(w1, b1, context, hidden, d);
            // d logits / d pre-activation, chained through tanh.
            let mut dpre: SmallVec<[f64; 32]> = smallvec::smallvec![0.0; hidden];
            for j in 0..hidden {
                let mut dh = 0.0;
                for v in 0..vocab {
                    dh += w2[v * hidden + j] * coef[v];
                }
                dpre[j] = dh * (1.0 - t[j] * t[j]);
            }
            let (grad_w1, rest) = grad[off..].split_at_mut(hidden * d);
            let (grad_b1, rest) = rest.split_at_mut(hidden);
            let (grad_w2, rest) = rest.split_at_mut(vocab * hidden);
            let grad_b2 = &mut rest[..vocab];
            for j in 0..hidden {
                let g = dpre[j];
                if g != 0.0 {
                    for (gw, x) in grad_w1[j * d..(j + 1) * d].iter_mut().zip(context) {
                        *gw += g * x;
                    }
                }
                grad_b1[j] += g;
            }
            for v in 0..vocab {
                let c = coef[v];
                if c != 0.0 {
                    for (gw, tj) in grad_w2[v * hidden..(v + 1) * hidden].iter_mut().zip(&t) {
                        *gw += c * tj;
                    }
                }
                grad_b2[v] += c;
            }
        }
    }
}

fn hidden_activations(
    w1: &[f64],
    b1: &[f64],
    context: &[f64],
    hidden: usize,
    d: usize,
) -> SmallVec<[f64; 32]> {
    (0..hidden)
        .map(|j| {
            let z = b1[j]
                + w1[j * d..(j + 1) * d].iter().zip(context).map(|(wi, xi)| wi * xi).sum::<f64>();
            z.tanh()
        })
        .collect()
}

/// Exact gradient in the model parameters of
/// `(1 / (|batch| |S|)) sum_i sum_s (wp l_pseudo + wv l_vanilla)`,
/// with the weights treated as constants.
pub fn grad_theta(
    model: &PrimaryModel,
    batch: &[&Sample],
    weights: &[Vec<WeightPair>],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.param_len()];
    grad_theta_into(model, batch, weights, None, &mut grad)?;
    Ok(grad)
}

/// Same as `grad_theta` but reuses precomputed per-sample distributions when
/// provided and writes into an existing buffer. `probs[i][s]` must be the
/// forward output of `batch[i]` under `model`.
pub(crate) fn grad_theta_into(
    model: &PrimaryModel,
    batch: &[&Sample],
    weights: &[Vec<WeightPair>],
    probs: Option<&[Vec<Vec<f64>>]>,
    grad: &mut [f64],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let num_slots = model.num_slots();
    let scale = 1.0 / (batch.len() as f64 * num_slots as f64);
    let mut coef = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let pseudo = sample
            .pseudo_labels
            .as_ref()
            .ok_or_else(|| Error::MissingPseudoLabels("grad_theta".into()))?;
        let own_probs;
        let sample_probs = match probs {
            Some(p) => &p[i],
            None => {
                own_probs = model.forward(&sample.context)?;
                &own_probs
            }
        };
        for slot in 0..num_slots {
            let w = &weights[i][slot];
            let terms = [(pseudo[slot], w.pseudo), (sample.vanilla_labels[slot], w.vanilla)];
            soft_coefficients(&sample_probs[slot], &terms, scale, &mut coef);
            accumulate_slot_grad(model, slot, &sample.context, &coef, grad);
        }
    }
    Ok(())
}

/// Gradient of the plain cross-entropy `(1 / (|batch| |S|)) sum -log p(label)`
/// against one label source (used for auxiliary training and the meta loss).
pub(crate) fn grad_plain_ce_into(
    model: &PrimaryModel,
    batch: &[&Sample],
    label_of: impl Fn(&Sample, usize) -> usize,
    probs: Option<&[Vec<Vec<f64>>]>,
    grad: &mut [f64],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let num_slots = model.num_slots();
    let scale = 1.0 / (batch.len() as f64 * num_slots as f64);
    let mut coef = Vec::new();
    for (i, sample) in batch.iter().enumerate() {
        let own_probs;
        let sample_probs = match probs {
            Some(p) => &p[i],
            None => {
                own_probs = model.forward(&sample.context)?;
                &own_probs
            }
        };
        for slot in 0..num_slots {
            let terms = [(label_of(sample, slot), 1.0)];
            soft_coefficients(&sample_probs[slot], &terms, scale, &mut coef);
            accumulate_slot_grad(model, slot, &sample.context, &coef, grad);
        }
    }
    Ok(())
}

/// Inner products of a fixed co-gradient with the per-label slot-loss
/// gradients of one (sample, slot): `dot(label) = base - per_label[label]`.
/// Precomputing `base`/`per_label` makes the dot product O(1) per label.
pub(crate) struct SlotGradDot {
    base: f64,
    per_label: SmallVec<[f64; 16]>,
}

impl SlotGradDot {
    /// `co_grad . d slot_loss(probs, label) / d params`, or 0 when the loss
    /// sits on the probability floor.
    pub(crate) fn dot(&self, probs: &[f64], label: usize) -> f64 {
        if loss_grad_active(probs, label) {
            self.base - self.per_label[label]
        } else {
            0.0
        }
    }
}

/// Prepares the inner products of `co_grad` (a flat vector shaped like the
/// model) with the gradient of each possible label's loss at one
/// (sample, slot), evaluated at the current parameters.
pub(crate) fn slot_grad_dot(
    model: &PrimaryModel,
    co_grad: &[f64],
    context: &[f64],
    slot: usize,
    probs: &[f64],
) -> SlotGradDot {
    let d = model.context_dim;
    let vocab = model.vocab_sizes[slot];
    let off = model.slot_offsets[slot];
    match model.arch {
        Architecture::Linear => {
            let g_w = &co_grad[off..off + vocab * d];
            let g_b = &co_grad[off + vocab * d..off + vocab * d + vocab];
            let per_label: SmallVec<[f64; 16]> = (0..vocab)
                .map(|v| {
                    g_b[v]
                        + g_w[v * d..(v + 1) * d]
                            .iter()
                            .zip(context)
                            .map(|(g, x)| g * x)
                            .sum::<f64>()
                })
                .collect();
            let base = probs.iter().zip(&per_label).map(|(p, u)| p * u).sum();
            SlotGradDot { base, per_label }
        }
        Architecture::OneHidden { hidden } => {
            let (w1, b1, w2, _) = model.hidden_blocks(slot, hidden, vocab);
            let t = hidden_activations(w1, b1, context, hidden, d);
            let g_w1 = &co_grad[off..off + hidden * d];
            let g_b1 = &co_grad[off + hidden * d..off + hidden * d + hidden];
            let w2_off = off + hidden * d + hidden;
            let g_w2 = &co_grad[w2_off..w2_off + vocab * hidden];
            let g_b2 = &co_grad[w2_off + vocab * hidden..w2_off + vocab * hidden + vocab];
            // Output-layer part: a[v] = g_w2[v,:] . t + g_b2[v].
            let a: SmallVec<[f64; 16]> = (0..vocab)
                .map(|v| {
                    g_b2[v]
                        + g_w2[v * hidden..(v + 1) * hidden]
                            .iter()
                            .zip(&t)
                            .map(|(g, ti)| g * ti)
                            .sum::<f64>()
                })
                .collect();
            // Hidden-layer part, chained through tanh:
            // b'[j] = (g_w1[j,:] . x + g_b1[j]) (1 - t_j^2).
            let b_prime: SmallVec<[f64; 32]> = (0..hidden)
                .map(|j| {
                    let b = g_b1[j]
                        + g_w1[j * d..(j + 1) * d]
                            .iter()
                            .zip(context)
                            .map(|(g, x)| g * x)
                            .sum::<f64>();
                    b * (1.0 - t[j] * t[j])
                })
                .collect();
            let q_b: f64 = (0..hidden)
                .map(|j| {
                    let q: f64 = (0..vocab).map(|v| w2[v * hidden + j] * probs[v]).sum();
                    q * b_prime[j]
                })
                .sum();
            let p_a: f64 = probs.iter().zip(&a).map(|(p, ai)| p * ai).sum();
            let per_label: SmallVec<[f64; 16]> = (0..vocab)
                .map(|v| {
                    a[v] + w2[v * hidden..(v + 1) * hidden]
                        .iter()
                        .zip(&b_prime)
                        .map(|(w, bp)| w * bp)
                        .sum::<f64>()
                })
                .collect();
            SlotGradDot { base: p_a + q_b, per_label }
        }
    }
}

/// Plain cross-entropy loss and gradient of a batch in one pass (one forward
/// per sample).
pub(crate) fn plain_ce_loss_and_grad(
    model: &PrimaryModel,
    batch: &[&Sample],
    label_of: impl Fn(&Sample, usize) -> usize,
    grad: &mut [f64],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let num_slots = model.num_slots();
    let scale = 1.0 / (batch.len() as f64 * num_slots as f64);
    let mut coef = Vec::new();
    let mut total = 0.0;
    for sample in batch {
        let sample_probs = model.forward(&sample.context)?;
        for slot in 0..num_slots {
            let label = label_of(sample, slot);
            total += slot_loss(&sample_probs[slot], label);
            let terms = [(label, 1.0)];
            soft_coefficients(&sample_probs[slot], &terms, scale, &mut coef);
            accumulate_slot_grad(model, slot, &sample.context, &coef, grad);
        }
    }
    Ok(total / (batch.len() as f64 * num_slots as f64))
}

/// Mean weighted loss `(1 / (|batch| |S|)) sum (wp l_pseudo + wv l_vanilla)`
/// over per-(sample, slot) loss matrices.
pub fn weighted_batch_loss(
    pseudo_losses: &[Vec<f64>],
    vanilla_losses: &[Vec<f64>],
    weights: &[Vec<WeightPair>],
) -> f64 {
    let batch = pseudo_losses.len();
    let slots = pseudo_losses[0].len();
    let mut total = 0.0;
    for i in 0..batch {
        for s in 0..slots {
            let w = &weights[i][s];
            total += w.pseudo * pseudo_losses[i][s] + w.vanilla * vanilla_losses[i][s];
        }
    }
    total / (batch as f64 * slots as f64)
}

/// Mean plain cross-entropy of a batch against one label source.
pub(crate) fn plain_ce_loss(
    model: &PrimaryModel,
    batch: &[&Sample],
    label_of: impl Fn(&Sample, usize) -> usize,
) -> Result<f64> {
    let num_slots = model.num_slots();
    let mut total = 0.0;
    for sample in batch {
        for slot in 0..num_slots {
            let dist = model.forward_slot(slot, &sample.context)?;
            total += slot_loss(&dist, label_of(sample, slot));
        }
    }
    Ok(total / (batch.len() as f64 * num_slots as f64))
}

// ---------------------------------------------------------------------------
// Auxiliary model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub arch: Architecture,
    pub seed: u64,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        AuxTrainConfig {
            steps: 600,
            batch_size: 32,
            learning_rate: 2.0,
            arch: Architecture::Linear,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AuxOutcome {
    pub model: PrimaryModel,
    pub step_losses: Vec<f64>,
}

/// Trains the auxiliary model: plain minibatch gradient descent on the
/// vanilla labels of the clean split.
pub fn train_auxiliary(
    clean: &[Sample],
    schema: &SlotSchema,
    context_dim: usize,
    cfg: &AuxTrainConfig,
) -> Result<AuxOutcome> {
    if clean.is_empty() {
        return Err(Error::Data("clean split is empty".into()));
    }
    let mut model = PrimaryModel::init(schema, context_dim, cfg.arch, cfg.seed);
    let mut sampler = MinibatchSampler::new(clean.len(), cfg.batch_size, cfg.seed ^ 0xA0A0)?;
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut grad = vec![0.0; model.param_len()];
    for step in 0..cfg.steps {
        let idx = sampler.next_batch();
        let batch: Vec<&Sample> = idx.iter().map(|&i| &clean[i]).collect();
        let loss = plain_ce_loss(&model, &batch, |s, slot| s.vanilla_labels[slot])?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "auxiliary training loss at step {step} (lr {})",
                cfg.learning_rate
            )));
        }
        step_losses.push(loss);
        grad.iter_mut().for_each(|g| *g = 0.0);
        grad_plain_ce_into(&model, &batch, |s, slot| s.vanilla_labels[slot], None, &mut grad)?;
        for (p, g) in model.params_mut().iter_mut().zip(&grad) {
            *p -= cfg.learning_rate * g;
        }
    }
    Ok(AuxOutcome { model, step_losses })
}

/// Fills pseudo labels of every sample with the auxiliary model's argmax
/// decode. Vanilla labels are untouched.
pub fn generate_pseudo_labels(aux: &PrimaryModel, samples: &mut [Sample]) -> Result<()> {
    if let Some(sample) = samples.first() {
        if sample.context.len() != aux.context_dim() {
            return Err(Error::Shape(format!(
                "samples have context dim {}, auxiliary model expects {}",
                sample.context.len(),
                aux.context_dim()
            )));
        }
    }
    for sample in samples.iter_mut() {
        let labels: Vec<usize> =
            (0..aux.num_slots()).map(|s| aux.predict_slot(s, &sample.context)).collect();
        sample.pseudo_labels = Some(labels);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Fraction of samples with every slot correct.
    pub jga: f64,
    /// Fraction of samples with every active slot (true label != none)
    /// correct; samples with no active slot count as correct.
    pub jta: f64,
    /// Mean over slots of per-slot accuracy.
    pub sa: f64,
    pub per_slot_accuracy: Vec<f64>,
    pub per_slot_error_rate: Vec<f64>,
}

/// Evaluates argmax predictions against the true labels.
pub fn evaluate(model: &PrimaryModel, split: &[Sample]) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let num_slots = model.num_slots();
    let mut slot_correct = vec![0usize; num_slots];
    let mut joint_correct = 0usize;
    let mut turn_correct = 0usize;
    for sample in split {
        let mut all_ok = true;
        let mut active_ok = true;
        for slot in 0..num_slots {
            let pred = model.predict_slot(slot, &sample.context);
            let truth = sample.true_labels[slot];
            let ok = pred == truth;
            if ok {
                slot_correct[slot] += 1;
            } else {
                all_ok = false;
                if truth != NONE_VALUE {
                    active_ok = false;
                }
            }
        }
        if all_ok {
            joint_correct += 1;
        }
        if active_ok {
            turn_correct += 1;
        }
    }
    let n = split.len() as f64;
    let per_slot_accuracy: Vec<f64> = slot_correct.iter().map(|&c| c as f64 / n).collect();
    let per_slot_error_rate: Vec<f64> = per_slot_accuracy.iter().map(|a| 1.0 - a).collect();
    let sa = per_slot_accuracy.iter().sum::<f64>() / num_slots as f64;
    Ok(MetricsReport {
        jga: joint_correct as f64 / n,
        jta: turn_correct as f64 / n,
        sa,
        per_slot_accuracy,
        per_slot_error_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, LabelModelConfig, NoiseConfig, SlotDescriptor, Split};
    use crate::oracle::finite_difference_check;
    use crate::weighting::WeightPair;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn tiny_schema() -> SlotSchema {
        SlotSchema::new(vec![
            SlotDescriptor { name: "a".into(), vocab_size: 5 },
            SlotDescriptor { name: "b".into(), vocab_size: 3 },
        ])
        .unwrap()
    }

    fn random_model(schema: &SlotSchema, d: usize, arch: Architecture, seed: u64) -> PrimaryModel {
        let mut model = PrimaryModel::zeros(schema, d, arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in model.params_mut() {
            *p = rng.random_range(-1.5..1.5);
        }
        model
    }

    fn random_sample(id: u64, d: usize, schema: &SlotSchema, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = |rng: &mut ChaCha8Rng| {
            schema.slots.iter().map(|s| rng.random_range(0..s.vocab_size)).collect::<Vec<_>>()
        };
        let true_labels = labels(&mut rng);
        Sample {
            sample_id: id,
            split: Split::Train,
            context,
            vanilla_labels: labels(&mut rng),
            pseudo_labels: Some(labels(&mut rng)),
            true_labels,
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let schema = tiny_schema();
        let model = PrimaryModel::zeros(&schema, 4, Architecture::Linear);
        let dist = model.forward(&[0.3, -1.0, 0.5, 2.0]).unwrap();
        for (slot, d) in dist.iter().enumerate() {
            let expected = 1.0 / schema.vocab_size(slot) as f64;
            for &p in d {
                assert_abs_diff_eq!(p, expected, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
    }

    /// Independent route: naive softmax without max subtraction, denominator
    /// accumulated by Neumaier summation over ascending terms.
    fn reference_softmax(logits: &[f64]) -> Vec<f64> {
        let mut terms: Vec<f64> = logits.iter().map(|&z| z.exp()).collect();
        let mut sorted = terms.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sum = 0.0;
        let mut comp = 0.0;
        for &t in &sorted {
            let new_sum = sum + t;
            if sum.abs() >= t.abs() {
                comp += (sum - new_sum) + t;
            } else {
                comp += (t - new_sum) + sum;
            }
            sum = new_sum;
        }
        let total = sum + comp;
        for t in &mut terms {
            *t /= total;
        }
        terms
    }

    #[test]
    fn forward_matches_reference_softmax() {
        let schema = tiny_schema();
        for seed in 0..20 {
            let model = random_model(&schema, 6, Architecture::Linear, seed);
            let sample = random_sample(0, 6, &schema, seed + 100);
            for slot in 0..schema.num_slots() {
                let dist = model.forward_slot(slot, &sample.context).unwrap();
                let reference = reference_softmax(&model.slot_logits(slot, &sample.context));
                for (a, b) in dist.iter().zip(&reference) {
                    assert_abs_diff_eq!(a, b, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn slot_loss_examples() {
        assert_eq!(slot_loss(&[0.0, 1.0, 0.0], 1), 0.0);
        assert_abs_diff_eq!(slot_loss(&[0.2; 5], 3), 5.0_f64.ln(), epsilon = 1e-12);
        let clamped = slot_loss(&[1e-300, 1.0 - 1e-300], 0);
        assert!(clamped.is_finite());
        assert!(clamped <= -PROB_FLOOR.ln() + 1e-9);
    }

    #[test]
    fn zero_weights_give_zero_gradient() {
        let schema = tiny_schema();
        let model = random_model(&schema, 4, Architecture::Linear, 3);
        let sample = random_sample(0, 4, &schema, 4);
        let weights = vec![vec![WeightPair { pseudo: 0.0, vanilla: 0.0 }; 2]];
        let grad = grad_theta(&model, &[&sample], &weights).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn missing_pseudo_labels_is_an_instructive_error() {
        let schema = tiny_schema();
        let model = random_model(&schema, 4, Architecture::Linear, 3);
        let mut sample = random_sample(0, 4, &schema, 4);
        sample.pseudo_labels = None;
        let weights = vec![vec![WeightPair { pseudo: 0.5, vanilla: 0.5 }; 2]];
        let err = grad_theta(&model, &[&sample], &weights).unwrap_err().to_string();
        assert!(err.contains("generate_pseudo_labels"), "{err}");
    }

    fn fd_weighted_loss(
        schema: &SlotSchema,
        batch: &[Sample],
        weights: &[Vec<WeightPair>],
        model: &PrimaryModel,
    ) -> f64 {
        let refs: Vec<&Sample> = batch.iter().collect();
        let num_slots = schema.num_slots();
        let mut total = 0.0;
        for (i, sample) in refs.iter().enumerate() {
            for slot in 0..num_slots {
                let dist = model.forward_slot(slot, &sample.context).unwrap();
                let w = &weights[i][slot];
                total += w.pseudo * slot_loss(&dist, sample.pseudo_labels.as_ref().unwrap()[slot])
                    + w.vanilla * slot_loss(&dist, sample.vanilla_labels[slot]);
            }
        }
        total / (batch.len() as f64 * num_slots as f64)
    }

    fn check_grad_against_fd(arch: Architecture, seed: u64, weights_of: impl Fn(u64) -> WeightPair) {
        let schema = tiny_schema();
        let d = 4;
        let model = random_model(&schema, d, arch, seed);
        let batch: Vec<Sample> =
            (0..3).map(|i| random_sample(i, d, &schema, seed * 31 + i)).collect();
        let weights: Vec<Vec<WeightPair>> =
            (0..3).map(|i| (0..2).map(|s| weights_of(i * 2 + s)).collect()).collect();
        let refs: Vec<&Sample> = batch.iter().collect();
        let analytic = grad_theta(&model, &refs, &weights).unwrap();
        let err = finite_difference_check(
            |params| {
                let mut m = model.clone();
                m.params_mut().copy_from_slice(params);
                fd_weighted_loss(&schema, &batch, &weights, &m)
            },
            model.params(),
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err} for {arch:?}");
    }

    #[test]
    fn vanilla_only_gradient_matches_finite_differences() {
        check_grad_against_fd(Architecture::Linear, 5, |_| WeightPair { pseudo: 0.0, vanilla: 1.0 });
    }

    #[test]
    fn mixed_weight_gradient_matches_finite_differences() {
        check_grad_against_fd(Architecture::Linear, 6, |_| WeightPair { pseudo: 0.4, vanilla: 0.6 });
        check_grad_against_fd(Architecture::OneHidden { hidden: 3 }, 7, |i| WeightPair {
            pseudo: 0.1 + 0.05 * i as f64,
            vanilla: 0.9 - 0.07 * i as f64,
        });
    }

    #[test]
    fn weighted_loss_is_linear_in_weights() {
        // Dyadic loss values and weights make the identity exact in floating
        // point, matching the algebraic linearity of the objective.
        let pseudo_losses = vec![vec![0.5, 1.25], vec![2.0, 0.75]];
        let vanilla_losses = vec![vec![1.5, 0.25], vec![0.125, 3.0]];
        let wa: Vec<Vec<WeightPair>> = vec![
            vec![WeightPair { pseudo: 0.25, vanilla: 0.5 }, WeightPair { pseudo: 0.75, vanilla: 0.125 }],
            vec![WeightPair { pseudo: 0.5, vanilla: 0.25 }, WeightPair { pseudo: 0.0, vanilla: 1.0 }],
        ];
        let wb: Vec<Vec<WeightPair>> = vec![
            vec![WeightPair { pseudo: 0.125, vanilla: 0.25 }, WeightPair { pseudo: 0.25, vanilla: 0.5 }],
            vec![WeightPair { pseudo: 0.25, vanilla: 0.125 }, WeightPair { pseudo: 0.5, vanilla: 0.0 }],
        ];
        let sum: Vec<Vec<WeightPair>> = wa
            .iter()
            .zip(&wb)
            .map(|(ra, rb)| {
                ra.iter()
                    .zip(rb)
                    .map(|(a, b)| WeightPair {
                        pseudo: a.pseudo + b.pseudo,
                        vanilla: a.vanilla + b.vanilla,
                    })
                    .collect()
            })
            .collect();
        let la = weighted_batch_loss(&pseudo_losses, &vanilla_losses, &wa);
        let lb = weighted_batch_loss(&pseudo_losses, &vanilla_losses, &wb);
        let lsum = weighted_batch_loss(&pseudo_losses, &vanilla_losses, &sum);
        assert_eq!(lsum, la + lb);
    }

    #[test]
    fn auxiliary_training_fits_separable_data() {
        // Wide-margin data: the context block of the true value is pushed up.
        let schema = tiny_schema();
        let d = 8;
        let mut samples = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for id in 0..400u64 {
            let mut context: Vec<f64> = (0..d).map(|_| rng.random_range(-0.2..0.2)).collect();
            let true_labels: Vec<usize> =
                schema.slots.iter().map(|s| rng.random_range(0..s.vocab_size)).collect();
            context[true_labels[0]] += 3.0;
            context[5 + true_labels[1] % 3] += 3.0;
            samples.push(Sample {
                sample_id: id,
                split: Split::Clean,
                context,
                vanilla_labels: true_labels.clone(),
                true_labels,
                pseudo_labels: None,
            });
        }
        let cfg = AuxTrainConfig { steps: 1500, learning_rate: 3.0, ..AuxTrainConfig::default() };
        let outcome = train_auxiliary(&samples, &schema, d, &cfg).unwrap();
        let metrics = evaluate(&outcome.model, &samples).unwrap();
        assert!(metrics.sa >= 0.99, "training slot accuracy {}", metrics.sa);
    }

    #[test]
    fn zero_step_auxiliary_training_returns_initialization() {
        let schema = tiny_schema();
        let sample = random_sample(0, 4, &schema, 1);
        let cfg = AuxTrainConfig { steps: 0, ..AuxTrainConfig::default() };
        let outcome = train_auxiliary(&[sample], &schema, 4, &cfg).unwrap();
        let init = PrimaryModel::init(&schema, 4, cfg.arch, cfg.seed);
        assert_eq!(outcome.model, init);
    }

    #[test]
    fn auxiliary_training_is_deterministic() {
        let schema = tiny_schema();
        let samples: Vec<Sample> = (0..50).map(|i| random_sample(i, 4, &schema, i + 9)).collect();
        let cfg = AuxTrainConfig { steps: 40, learning_rate: 0.5, ..AuxTrainConfig::default() };
        let a = train_auxiliary(&samples, &schema, 4, &cfg).unwrap();
        let b = train_auxiliary(&samples, &schema, 4, &cfg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.step_losses, b.step_losses);
    }

    #[test]
    fn perfect_auxiliary_reproduces_true_labels() {
        let config = NoiseConfig {
            num_slots: 3,
            vocab_sizes: vec![4, 5, 2],
            context_dim: 6,
            clean_size: 5,
            train_size: 40,
            validation_size: 5,
            test_size: 5,
            vanilla_noise_rates: vec![0.4, 0.2, 0.3],
            pseudo_noise_rates: None,
            seed: 13,
            label_model: LabelModelConfig::default(),
        };
        let mut corpus = generate_corpus(&config).unwrap();
        let oracle = PrimaryModel::from_label_model(
            &LabelModel::from_config(&config),
            &corpus.schema,
            config.context_dim,
        );
        let mut train = std::mem::take(&mut corpus.train);
        generate_pseudo_labels(&oracle, &mut train).unwrap();
        for s in &train {
            assert_eq!(s.pseudo_labels.as_ref().unwrap(), &s.true_labels);
            assert_ne!(s.vanilla_labels.len(), 0);
        }
    }

    #[test]
    fn zero_auxiliary_ties_break_to_none() {
        let schema = tiny_schema();
        let aux = PrimaryModel::zeros(&schema, 4, Architecture::Linear);
        let mut samples = vec![random_sample(0, 4, &schema, 2)];
        generate_pseudo_labels(&aux, &mut samples).unwrap();
        assert_eq!(samples[0].pseudo_labels.as_ref().unwrap(), &vec![0, 0]);
    }

    #[test]
    fn evaluate_hand_counted_example() {
        // 2 slots, 2 samples; sample A fully correct; sample B wrong on the
        // active slot 0, correct on slot 1.
        let schema = SlotSchema::new(vec![
            SlotDescriptor { name: "a".into(), vocab_size: 2 },
            SlotDescriptor { name: "b".into(), vocab_size: 2 },
        ])
        .unwrap();
        // Linear model on d=2 reading out the context sign per slot.
        let mut model = PrimaryModel::zeros(&schema, 2, Architecture::Linear);
        // slot a: predicts 1 iff context[0] > 0; slot b: 1 iff context[1] > 0.
        model.params_mut()[0..6].copy_from_slice(&[0.0, 0.0, 10.0, 0.0, 0.0, 0.0]);
        model.params_mut()[6..12].copy_from_slice(&[0.0, 0.0, 0.0, 10.0, 0.0, 0.0]);
        let mk = |id, context: [f64; 2], truth: [usize; 2]| Sample {
            sample_id: id,
            split: Split::Test,
            context: context.to_vec(),
            true_labels: truth.to_vec(),
            vanilla_labels: truth.to_vec(),
            pseudo_labels: None,
        };
        let split = vec![
            mk(0, [1.0, 1.0], [1, 1]),  // both correct
            mk(1, [-1.0, 1.0], [1, 1]), // slot a wrong (active), slot b correct
        ];
        let m = evaluate(&model, &split).unwrap();
        assert_eq!(m.jga, 0.5);
        assert_eq!(m.jta, 0.5);
        assert_eq!(m.sa, 0.75);
    }

    #[test]
    fn all_none_sample_is_vacuously_turn_correct() {
        let schema = tiny_schema();
        let model = random_model(&schema, 4, Architecture::Linear, 50);
        let mut sample = random_sample(0, 4, &schema, 51);
        sample.true_labels = vec![NONE_VALUE; 2];
        let m = evaluate(&model, &[sample]).unwrap();
        assert_eq!(m.jta, 1.0);
    }

    #[test]
    fn perfect_predictor_scores_one_everywhere() {
        let config = NoiseConfig {
            num_slots: 3,
            vocab_sizes: vec![4, 5, 2],
            context_dim: 6,
            clean_size: 5,
            train_size: 5,
            validation_size: 5,
            test_size: 50,
            vanilla_noise_rates: vec![0.0; 3],
            pseudo_noise_rates: None,
            seed: 21,
            label_model: LabelModelConfig::default(),
        };
        let corpus = generate_corpus(&config).unwrap();
        let oracle = PrimaryModel::from_label_model(
            &LabelModel::from_config(&config),
            &corpus.schema,
            config.context_dim,
        );
        let m = evaluate(&oracle, &corpus.test).unwrap();
        assert_eq!(m.jga, 1.0);
        assert_eq!(m.jta, 1.0);
        assert_eq!(m.sa, 1.0);
    }

    #[test]
    fn model_checkpoint_round_trip() {
        let schema = tiny_schema();
        let model = random_model(&schema, 4, Architecture::OneHidden { hidden: 3 }, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        model.save_with_schema(&path, &schema).unwrap();
        let loaded = PrimaryModel::load(&path).unwrap();
        assert_eq!(model, loaded);
    }

    proptest! {
        #[test]
        fn softmax_normalizes(logits in proptest::collection::vec(-30.0f64..30.0, 2..8)) {
            let p = softmax(&logits);
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn metric_order_holds(seed in 0u64..200) {
            let schema = tiny_schema();
            let model = random_model(&schema, 4, Architecture::Linear, seed);
            let split: Vec<Sample> =
                (0..30).map(|i| random_sample(i, 4, &schema, seed * 1000 + i)).collect();
            let m = evaluate(&model, &split).unwrap();
            prop_assert!(m.jga <= m.jta + 1e-15);
            prop_assert!(m.jga <= m.sa + 1e-15);
        }
    }
}
