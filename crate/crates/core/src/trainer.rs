//! The online bilevel training loop: an interim one-step update of the
//! primary model, a hypergradient-driven update of the weighting scheme on a
//! validation (meta) batch, and the final primary update from the previous
//! parameters. Also the fixed-alpha baseline loop and a plain single-label
//! loop used as a reduction oracle.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Corpus, MinibatchSampler, Sample};
use crate::error::{Error, Result};
use crate::models::{
    evaluate, generate_pseudo_labels, grad_theta_into, plain_ce_loss, plain_ce_loss_and_grad,
    slot_grad_dot, slot_loss, train_auxiliary, weighted_batch_loss, Architecture, AuxOutcome,
    AuxTrainConfig, MetricsReport, PrimaryModel,
};
use crate::weighting::{loss_features, LossFeatures, WeightPair, WeightingScheme};

const STREAM_MODEL_INIT: u64 = 31;
const STREAM_SCHEME_INIT: u64 = 32;
const STREAM_TRAIN_SAMPLER: u64 = 33;
const STREAM_META_SAMPLER: u64 = 34;
const STREAM_AUX: u64 = 35;

// ---------------------------------------------------------------------------
// Optimizers and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerSpec {
    /// Plain gradient descent, classic momentum when `momentum > 0`.
    Sgd { momentum: f64 },
    /// Adaptive moments with decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerSpec {
    pub fn plain_sgd() -> Self {
        OptimizerSpec::Sgd { momentum: 0.0 }
    }

    pub fn adamw() -> Self {
        OptimizerSpec::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state over one flat parameter vector.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    spec: OptimizerSpec,
    momentum_buf: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    t: u32,
}

impl OptimizerState {
    pub fn new(spec: OptimizerSpec, param_len: usize) -> Self {
        let (momentum_buf, first_moment, second_moment) = match spec {
            OptimizerSpec::Sgd { momentum } if momentum != 0.0 => {
                (vec![0.0; param_len], Vec::new(), Vec::new())
            }
            OptimizerSpec::Sgd { .. } => (Vec::new(), Vec::new(), Vec::new()),
            OptimizerSpec::AdamW { .. } => (Vec::new(), vec![0.0; param_len], vec![0.0; param_len]),
        };
        OptimizerState { spec, momentum_buf, first_moment, second_moment, t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.spec {
            OptimizerSpec::Sgd { momentum } => {
                if momentum == 0.0 {
                    for (p, g) in params.iter_mut().zip(grad) {
                        *p -= lr * g;
                    }
                } else {
                    for ((p, g), v) in params.iter_mut().zip(grad).zip(&mut self.momentum_buf) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
            }
            OptimizerSpec::AdamW { beta1, beta2, eps, weight_decay } => {
                self.t += 1;
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grad[i];
                    self.first_moment[i] = beta1 * self.first_moment[i] + (1.0 - beta1) * g;
                    self.second_moment[i] = beta2 * self.second_moment[i] + (1.0 - beta2) * g * g;
                    let m_hat = self.first_moment[i] / bc1;
                    let v_hat = self.second_moment[i] / bc2;
                    params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
                }
            }
        }
    }
}

/// Linear warmup to the peak rate followed by linear decay toward zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    peak: f64,
    warmup_steps: usize,
    total_steps: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_frac: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_frac * total_steps as f64).floor() as usize;
        LrSchedule { peak, warmup_steps, total_steps }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak;
        }
        if step < self.warmup_steps {
            self.peak * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.peak * (self.total_steps - step) as f64
                / (self.total_steps - self.warmup_steps) as f64
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Scheme selector as written on the command line: `fixed:<alpha>`, `s1`,
/// `s2`, `s3`, or `s3d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeSpec {
    Fixed(f64),
    S1,
    S2,
    S3,
    S3Decoupled,
}

impl SchemeSpec {
    pub fn build(
        &self,
        num_slots: usize,
        hidden_dim: usize,
        init_alpha: Option<f64>,
        seed: u64,
    ) -> Result<WeightingScheme> {
        let scheme_seed = derive_seed(seed, STREAM_SCHEME_INIT, 0);
        Ok(match self {
            SchemeSpec::Fixed(alpha) => WeightingScheme::fixed_alpha(*alpha)?,
            SchemeSpec::S1 => WeightingScheme::s1(num_slots, init_alpha),
            SchemeSpec::S2 => WeightingScheme::s2(hidden_dim, scheme_seed),
            SchemeSpec::S3 => WeightingScheme::s3(hidden_dim, scheme_seed),
            SchemeSpec::S3Decoupled => WeightingScheme::s3_decoupled(hidden_dim, scheme_seed),
        })
    }
}

impl std::fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SchemeSpec::Fixed(alpha) => write!(f, "fixed:{alpha}"),
            SchemeSpec::S1 => write!(f, "s1"),
            SchemeSpec::S2 => write!(f, "s2"),
            SchemeSpec::S3 => write!(f, "s3"),
            SchemeSpec::S3Decoupled => write!(f, "s3d"),
        }
    }
}

impl std::str::FromStr for SchemeSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "s1" => Ok(SchemeSpec::S1),
            "s2" => Ok(SchemeSpec::S2),
            "s3" => Ok(SchemeSpec::S3),
            "s3d" => Ok(SchemeSpec::S3Decoupled),
            other => {
                if let Some(alpha) = other.strip_prefix("fixed:") {
                    let alpha: f64 = alpha
                        .parse()
                        .map_err(|_| Error::Config(format!("bad alpha in scheme '{other}'")))?;
                    if !(0.0..=1.0).contains(&alpha) {
                        return Err(Error::Config(format!("alpha {alpha} must be in [0, 1]")));
                    }
                    Ok(SchemeSpec::Fixed(alpha))
                } else {
                    Err(Error::Config(format!(
                        "unknown scheme '{other}' (expected fixed:<alpha>, s1, s2, s3 or s3d)"
                    )))
                }
            }
        }
    }
}

impl TryFrom<String> for SchemeSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchemeSpec> for String {
    fn from(s: SchemeSpec) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub scheme: SchemeSpec,
    pub epochs: usize,
    /// Train (noisy) batch size.
    pub train_batch: usize,
    /// Validation (meta) batch size.
    pub meta_batch: usize,
    /// Learning rate of the one-step interim update (plain descent).
    pub interim_lr: f64,
    pub primary_optimizer: OptimizerSpec,
    pub primary_peak_lr: f64,
    /// Fraction of total steps spent on linear warmup.
    pub warmup_frac: f64,
    pub meta_optimizer: OptimizerSpec,
    pub meta_lr: f64,
    pub arch: Architecture,
    /// Hidden width of the weighting MLPs (S2/S3/S3d).
    pub weighting_hidden_dim: usize,
    /// Prior-knowledge initialization for S1: start every slot at this alpha.
    pub init_alpha: Option<f64>,
    pub aux: AuxTrainConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: SchemeSpec::S2,
            epochs: 6,
            train_batch: 32,
            meta_batch: 8,
            interim_lr: 1.0,
            primary_optimizer: OptimizerSpec::Sgd { momentum: 0.9 },
            primary_peak_lr: 1.0,
            warmup_frac: 0.1,
            meta_optimizer: OptimizerSpec::adamw(),
            meta_lr: 0.05,
            arch: Architecture::Linear,
            weighting_hidden_dim: 8,
            init_alpha: None,
            aux: AuxTrainConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_batch == 0 || self.meta_batch == 0 || self.aux.batch_size == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        for (name, lr) in [
            ("interim_lr", self.interim_lr),
            ("primary_peak_lr", self.primary_peak_lr),
            ("meta_lr", self.meta_lr),
            ("aux.learning_rate", self.aux.learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} = {lr}, must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!(
                "warmup_frac = {}, must be in [0, 1)",
                self.warmup_frac
            )));
        }
        if self.weighting_hidden_dim == 0 {
            return Err(Error::Config("weighting_hidden_dim must be >= 1".into()));
        }
        if let Some(alpha) = self.init_alpha {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::Config(format!("init_alpha {alpha} must be in [0, 1]")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Run log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Weighted loss on the train batch under the weights used for the
    /// primary update.
    pub train_loss: f64,
    /// Validation loss of the interim model, when a meta update ran.
    pub meta_loss: Option<f64>,
    pub slot_weight_mean: Vec<f64>,
    pub slot_weight_min: Vec<f64>,
    pub slot_weight_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub validation: MetricsReport,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Wall-clock diagnostics; physical time, not covered by the
    /// reproducibility contract.
    pub epoch_wall_seconds: Vec<f64>,
    /// Batch-gradient evaluations per training step: 3 for meta training,
    /// 1 for fixed-weight training.
    pub grad_evals_per_step: usize,
    pub total_grad_evals: usize,
    /// Auxiliary-model step losses when the pipeline had to train one.
    pub aux_step_losses: Vec<f64>,
}

impl RunLog {
    /// Equality of everything the seed determines (wall-clock excluded).
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        self.steps == other.steps
            && self.epochs == other.epochs
            && self.grad_evals_per_step == other.grad_evals_per_step
            && self.total_grad_evals == other.total_grad_evals
            && self.aux_step_losses == other.aux_step_losses
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PrimaryModel,
    pub scheme: WeightingScheme,
    pub best_model: PrimaryModel,
    pub best_scheme: WeightingScheme,
    /// Epoch of the best validation JGA; 0 means the untrained init.
    pub best_epoch: usize,
    pub best_validation_jga: f64,
    pub log: RunLog,
}

// ---------------------------------------------------------------------------
// Step primitives
// ---------------------------------------------------------------------------

/// Everything computed once per step at the current parameters: per-sample
/// distributions, loss features, and weights.
pub(crate) struct StepContext {
    pub probs: Vec<Vec<Vec<f64>>>,
    pub features: Vec<Vec<LossFeatures>>,
    pub weights: Vec<Vec<WeightPair>>,
    pub train_loss: f64,
}

pub(crate) fn compute_step_context(
    model: &PrimaryModel,
    batch: &[&Sample],
    scheme: &WeightingScheme,
) -> Result<StepContext> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let num_slots = model.num_slots();
    let mut probs = Vec::with_capacity(batch.len());
    let mut vanilla_losses = Vec::with_capacity(batch.len());
    let mut pseudo_losses = Vec::with_capacity(batch.len());
    let mut features = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for sample in batch {
        let pseudo = sample
            .pseudo_labels
            .as_ref()
            .ok_or_else(|| Error::MissingPseudoLabels("training".into()))?;
        let sample_probs = model.forward(&sample.context)?;
        let mut lv_row = Vec::with_capacity(num_slots);
        let mut lp_row = Vec::with_capacity(num_slots);
        let mut h_row = Vec::with_capacity(num_slots);
        let mut w_row = Vec::with_capacity(num_slots);
        for slot in 0..num_slots {
            let lv = slot_loss(&sample_probs[slot], sample.vanilla_labels[slot]);
            let lp = slot_loss(&sample_probs[slot], pseudo[slot]);
            let h = loss_features(lv, lp)?;
            w_row.push(scheme.compute_weights(&h, slot));
            lv_row.push(lv);
            lp_row.push(lp);
            h_row.push(h);
        }
        probs.push(sample_probs);
        vanilla_losses.push(lv_row);
        pseudo_losses.push(lp_row);
        features.push(h_row);
        weights.push(w_row);
    }
    let train_loss = weighted_batch_loss(&pseudo_losses, &vanilla_losses, &weights);
    Ok(StepContext { probs, features, weights, train_loss })
}

/// One plain-descent step on the weighted objective, returning a fresh model
/// and leaving the input untouched.
pub fn interim_step(
    model: &PrimaryModel,
    batch: &[&Sample],
    scheme: &WeightingScheme,
    interim_lr: f64,
) -> Result<PrimaryModel> {
    let ctx = compute_step_context(model, batch, scheme)?;
    if !ctx.train_loss.is_finite() {
        return Err(Error::NonFinite(format!("interim-step loss {}", ctx.train_loss)));
    }
    Ok(interim_from_ctx(model, batch, &ctx, interim_lr)?.0)
}

fn interim_from_ctx(
    model: &PrimaryModel,
    batch: &[&Sample],
    ctx: &StepContext,
    interim_lr: f64,
) -> Result<(PrimaryModel, Vec<f64>)> {
    let mut grad = vec![0.0; model.param_len()];
    grad_theta_into(model, batch, &ctx.weights, Some(&ctx.probs), &mut grad)?;
    let mut interim = model.clone();
    for (p, g) in interim.params_mut().iter_mut().zip(&grad) {
        *p -= interim_lr * g;
    }
    Ok((interim, grad))
}

#[derive(Debug, Clone)]
pub struct Hypergradient {
    /// Gradient of the meta objective in the flat scheme parameters.
    pub grad: Vec<f64>,
    /// Validation loss of the interim model on the meta batch.
    pub meta_loss: f64,
    pub interim: PrimaryModel,
}

/// Exact gradient of `L_val(interim(scheme))` in the scheme parameters,
/// where the interim model is one plain-descent step on the weighted train
/// loss and the loss features are held constant. Computed by the chain rule
/// from per-(sample, slot) inner products; no Hessian is materialized.
pub fn hypergradient(
    model: &PrimaryModel,
    train_batch: &[&Sample],
    meta_batch: &[&Sample],
    scheme: &WeightingScheme,
    interim_lr: f64,
) -> Result<Hypergradient> {
    let ctx = compute_step_context(model, train_batch, scheme)?;
    hypergradient_from_ctx(model, train_batch, &ctx, meta_batch, scheme, interim_lr)
}

fn hypergradient_from_ctx(
    model: &PrimaryModel,
    train_batch: &[&Sample],
    ctx: &StepContext,
    meta_batch: &[&Sample],
    scheme: &WeightingScheme,
    interim_lr: f64,
) -> Result<Hypergradient> {
    let (interim, _) = interim_from_ctx(model, train_batch, ctx, interim_lr)?;
    let mut val_grad = vec![0.0; model.param_len()];
    let meta_loss = plain_ce_loss_and_grad(
        &interim,
        meta_batch,
        |s, slot| s.vanilla_labels[slot],
        &mut val_grad,
    )?;
    let num_slots = model.num_slots();
    let scale = -interim_lr / (train_batch.len() as f64 * num_slots as f64);
    let mut grad = vec![0.0; scheme.param_len()];
    for (i, sample) in train_batch.iter().enumerate() {
        let pseudo = sample.pseudo_labels.as_ref().expect("checked by step context");
        for slot in 0..num_slots {
            let probs = &ctx.probs[i][slot];
            let dots = slot_grad_dot(model, &val_grad, &sample.context, slot, probs);
            let cp = scale * dots.dot(probs, pseudo[slot]);
            let cv = scale * dots.dot(probs, sample.vanilla_labels[slot]);
            scheme.accumulate_weight_grads(&ctx.features[i][slot], slot, cp, cv, &mut grad);
        }
    }
    Ok(Hypergradient { grad, meta_loss, interim })
}

/// The scalar map the hypergradient differentiates: validation loss of the
/// interim model produced by the scheme on fixed batches. Exposed for
/// finite-difference checks and the descent-direction property.
pub fn meta_objective(
    model: &PrimaryModel,
    train_batch: &[&Sample],
    meta_batch: &[&Sample],
    scheme: &WeightingScheme,
    interim_lr: f64,
) -> Result<f64> {
    let interim = interim_step(model, train_batch, scheme, interim_lr)?;
    plain_ce_loss(&interim, meta_batch, |s, slot| s.vanilla_labels[slot])
}

/// One optimizer step on the scheme parameters against the hypergradient.
pub fn meta_update(
    scheme: &mut WeightingScheme,
    hypergrad: &[f64],
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let mut params = scheme.params_vec();
    if params.len() != hypergrad.len() {
        return Err(Error::Shape(format!(
            "hypergradient has {} entries for {} scheme parameters",
            hypergrad.len(),
            params.len()
        )));
    }
    opt.step(&mut params, hypergrad, lr);
    scheme.set_params(&params)
}

/// The final update of a step: recomputes weights with the (already
/// meta-updated) scheme under the unchanged model parameters, then applies
/// the persistent primary optimizer. Returns the weighted loss it descended.
pub fn primary_update(
    model: &mut PrimaryModel,
    batch: &[&Sample],
    scheme: &WeightingScheme,
    opt: &mut OptimizerState,
    lr: f64,
) -> Result<f64> {
    let ctx = compute_step_context(model, batch, scheme)?;
    if !ctx.train_loss.is_finite() {
        return Err(Error::NonFinite(format!("primary-update loss {}", ctx.train_loss)));
    }
    let mut grad = vec![0.0; model.param_len()];
    grad_theta_into(model, batch, &ctx.weights, Some(&ctx.probs), &mut grad)?;
    opt.step(model.params_mut(), &grad, lr);
    Ok(ctx.train_loss)
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

pub struct PreparedTraining {
    pub train: Vec<Sample>,
    pub aux: Option<AuxOutcome>,
}

/// Clones the train split and, when pseudo labels are absent (and the corpus
/// is not in controlled mode), trains the auxiliary model on the clean split
/// and decodes pseudo labels.
pub fn prepare_training_split(corpus: &Corpus, config: &TrainConfig) -> Result<PreparedTraining> {
    let mut train = corpus.train.clone();
    if corpus.has_pseudo_labels() {
        return Ok(PreparedTraining { train, aux: None });
    }
    let aux_cfg = AuxTrainConfig {
        arch: config.arch,
        seed: derive_seed(config.seed, STREAM_AUX, 0),
        ..config.aux.clone()
    };
    let aux = train_auxiliary(&corpus.clean, &corpus.schema, corpus.config.context_dim, &aux_cfg)?;
    generate_pseudo_labels(&aux.model, &mut train)?;
    Ok(PreparedTraining { train, aux: Some(aux) })
}

struct BestTracker {
    model: PrimaryModel,
    scheme: WeightingScheme,
    epoch: usize,
    jga: f64,
}

impl BestTracker {
    fn observe(&mut self, epoch: usize, jga: f64, model: &PrimaryModel, scheme: &WeightingScheme) {
        if jga > self.jga {
            self.jga = jga;
            self.epoch = epoch;
            self.model = model.clone();
            self.scheme = scheme.clone();
        }
    }
}

fn slot_weight_stats(weights: &[Vec<WeightPair>], num_slots: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; num_slots];
    let mut min = vec![f64::INFINITY; num_slots];
    let mut max = vec![f64::NEG_INFINITY; num_slots];
    for row in weights {
        for (slot, w) in row.iter().enumerate() {
            mean[slot] += w.pseudo;
            min[slot] = min[slot].min(w.pseudo);
            max[slot] = max[slot].max(w.pseudo);
        }
    }
    let n = weights.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    (mean, min, max)
}

/// Runs the full bilevel loop. With a learnable scheme each step performs
/// the interim update, the meta update on a validation batch, and the final
/// primary update from the unchanged parameters; with a fixed scheme the
/// meta machinery is skipped and each step is one weighted update.
pub fn train_meta(corpus: &Corpus, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let prepared = prepare_training_split(corpus, config)?;
    let train = prepared.train;
    let num_slots = corpus.schema.num_slots();

    let mut model = PrimaryModel::init(
        &corpus.schema,
        corpus.config.context_dim,
        config.arch,
        derive_seed(config.seed, STREAM_MODEL_INIT, 0),
    );
    let mut scheme =
        config.scheme.build(num_slots, config.weighting_hidden_dim, config.init_alpha, config.seed)?;
    let meta_enabled = scheme.is_learnable();

    let mut log = RunLog {
        grad_evals_per_step: if meta_enabled { 3 } else { 1 },
        aux_step_losses: prepared.aux.map(|a| a.step_losses).unwrap_or_default(),
        ..RunLog::default()
    };

    let mut sampler = MinibatchSampler::new(
        train.len(),
        config.train_batch,
        derive_seed(config.seed, STREAM_TRAIN_SAMPLER, 0),
    )?;
    let mut meta_sampler = if meta_enabled {
        Some(MinibatchSampler::new(
            corpus.validation.len(),
            config.meta_batch,
            derive_seed(config.seed, STREAM_META_SAMPLER, 0),
        )?)
    } else {
        None
    };
    let steps_per_epoch = sampler.batches_per_epoch();
    let schedule =
        LrSchedule::new(config.primary_peak_lr, config.warmup_frac, config.epochs * steps_per_epoch);
    let mut primary_opt = OptimizerState::new(config.primary_optimizer, model.param_len());
    let mut meta_opt = OptimizerState::new(config.meta_optimizer, scheme.param_len());

    let mut best = BestTracker {
        model: model.clone(),
        scheme: scheme.clone(),
        epoch: 0,
        jga: evaluate(&model, &corpus.validation)?.jga,
    };

    let mut grad = vec![0.0; model.param_len()];
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        for _ in 0..steps_per_epoch {
            let lr = schedule.lr_at(step);
            let idx = sampler.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let mut ctx = compute_step_context(&model, &batch, &scheme)?;
            if !ctx.train_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            let mut meta_loss = None;
            if meta_enabled {
                let meta_idx = meta_sampler.as_mut().expect("sampler exists").next_batch();
                let meta_batch: Vec<&Sample> =
                    meta_idx.iter().map(|&i| &corpus.validation[i]).collect();
                let hg = hypergradient_from_ctx(
                    &model,
                    &batch,
                    &ctx,
                    &meta_batch,
                    &scheme,
                    config.interim_lr,
                )?;
                log.total_grad_evals += 2;
                if !hg.meta_loss.is_finite() {
                    return Err(Error::NonFinite(format!("meta loss at step {step}")));
                }
                meta_loss = Some(hg.meta_loss);
                meta_update(&mut scheme, &hg.grad, &mut meta_opt, config.meta_lr)?;
                // The final update trains on the new combined label with its
                // own full forward/backward pass over the train batch.
                ctx = compute_step_context(&model, &batch, &scheme)?;
            }
            let train_loss = ctx.train_loss;
            grad.iter_mut().for_each(|g| *g = 0.0);
            grad_theta_into(&model, &batch, &ctx.weights, Some(&ctx.probs), &mut grad)?;
            log.total_grad_evals += 1;
            primary_opt.step(model.params_mut(), &grad, lr);
            if !model.all_finite() {
                return Err(Error::NonFinite(format!("model parameters after step {step}")));
            }
            let (mean, min, max) = slot_weight_stats(&ctx.weights, num_slots);
            log.steps.push(StepRecord {
                step,
                train_loss,
                meta_loss,
                slot_weight_mean: mean,
                slot_weight_min: min,
                slot_weight_max: max,
            });
            step += 1;
        }
        let wall = epoch_start.elapsed().as_secs_f64();
        let validation = evaluate(&model, &corpus.validation)?;
        let test = evaluate(&model, &corpus.test)?;
        best.observe(epoch, validation.jga, &model, &scheme);
        log.epochs.push(EpochRecord { epoch, validation, test });
        log.epoch_wall_seconds.push(wall);
    }

    Ok(TrainOutcome {
        model,
        scheme,
        best_model: best.model,
        best_scheme: best.scheme,
        best_epoch: best.epoch,
        best_validation_jga: best.jga,
        log,
    })
}

/// The fixed-weight baseline: standard single-loop training with soft labels
/// from a constant alpha. No meta machinery; one gradient evaluation per
/// step.
pub fn train_fixed_alpha(corpus: &Corpus, config: &TrainConfig, alpha: f64) -> Result<TrainOutcome> {
    config.validate()?;
    let scheme = WeightingScheme::fixed_alpha(alpha)?;
    let prepared = prepare_training_split(corpus, config)?;
    let train = prepared.train;
    let num_slots = corpus.schema.num_slots();

    let mut model = PrimaryModel::init(
        &corpus.schema,
        corpus.config.context_dim,
        config.arch,
        derive_seed(config.seed, STREAM_MODEL_INIT, 0),
    );
    let mut log = RunLog {
        grad_evals_per_step: 1,
        aux_step_losses: prepared.aux.map(|a| a.step_losses).unwrap_or_default(),
        ..RunLog::default()
    };
    let mut sampler = MinibatchSampler::new(
        train.len(),
        config.train_batch,
        derive_seed(config.seed, STREAM_TRAIN_SAMPLER, 0),
    )?;
    let steps_per_epoch = sampler.batches_per_epoch();
    let schedule =
        LrSchedule::new(config.primary_peak_lr, config.warmup_frac, config.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(config.primary_optimizer, model.param_len());
    let mut best = BestTracker {
        model: model.clone(),
        scheme: scheme.clone(),
        epoch: 0,
        jga: evaluate(&model, &corpus.validation)?.jga,
    };

    let mut grad = vec![0.0; model.param_len()];
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        for _ in 0..steps_per_epoch {
            let lr = schedule.lr_at(step);
            let idx = sampler.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let ctx = compute_step_context(&model, &batch, &scheme)?;
            if !ctx.train_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            grad_theta_into(&model, &batch, &ctx.weights, Some(&ctx.probs), &mut grad)?;
            log.total_grad_evals += 1;
            opt.step(model.params_mut(), &grad, lr);
            if !model.all_finite() {
                return Err(Error::NonFinite(format!("model parameters after step {step}")));
            }
            let (mean, min, max) = slot_weight_stats(&ctx.weights, num_slots);
            log.steps.push(StepRecord {
                step,
                train_loss: ctx.train_loss,
                meta_loss: None,
                slot_weight_mean: mean,
                slot_weight_min: min,
                slot_weight_max: max,
            });
            step += 1;
        }
        let wall = epoch_start.elapsed().as_secs_f64();
        let validation = evaluate(&model, &corpus.validation)?;
        let test = evaluate(&model, &corpus.test)?;
        best.observe(epoch, validation.jga, &model, &scheme);
        log.epochs.push(EpochRecord { epoch, validation, test });
        log.epoch_wall_seconds.push(wall);
    }
    Ok(TrainOutcome {
        model,
        scheme: scheme.clone(),
        best_model: best.model,
        best_scheme: scheme,
        best_epoch: best.epoch,
        best_validation_jga: best.jga,
        log,
    })
}

/// Which single label source a plain training loop reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Vanilla,
    Pseudo,
}

/// Plain cross-entropy training against one label source. Written as its own
/// loop so the fixed:0.0 and fixed:1.0 reductions have an independent
/// implementation to be compared against.
pub fn train_standard(
    corpus: &Corpus,
    config: &TrainConfig,
    source: LabelSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    let (train, aux) = match source {
        LabelSource::Vanilla => (corpus.train.clone(), None),
        LabelSource::Pseudo => {
            let prepared = prepare_training_split(corpus, config)?;
            (prepared.train, prepared.aux)
        }
    };
    let num_slots = corpus.schema.num_slots();
    let constant_weight = match source {
        LabelSource::Vanilla => 0.0,
        LabelSource::Pseudo => 1.0,
    };
    let scheme = WeightingScheme::fixed_alpha(constant_weight)?;

    let mut model = PrimaryModel::init(
        &corpus.schema,
        corpus.config.context_dim,
        config.arch,
        derive_seed(config.seed, STREAM_MODEL_INIT, 0),
    );
    let mut log = RunLog {
        grad_evals_per_step: 1,
        aux_step_losses: aux.map(|a| a.step_losses).unwrap_or_default(),
        ..RunLog::default()
    };
    let mut sampler = MinibatchSampler::new(
        train.len(),
        config.train_batch,
        derive_seed(config.seed, STREAM_TRAIN_SAMPLER, 0),
    )?;
    let steps_per_epoch = sampler.batches_per_epoch();
    let schedule =
        LrSchedule::new(config.primary_peak_lr, config.warmup_frac, config.epochs * steps_per_epoch);
    let mut opt = OptimizerState::new(config.primary_optimizer, model.param_len());
    let mut best = BestTracker {
        model: model.clone(),
        scheme: scheme.clone(),
        epoch: 0,
        jga: evaluate(&model, &corpus.validation)?.jga,
    };

    let label_of = |s: &Sample, slot: usize| match source {
        LabelSource::Vanilla => s.vanilla_labels[slot],
        LabelSource::Pseudo => s.pseudo_labels.as_ref().expect("prepared")[slot],
    };

    let mut grad = vec![0.0; model.param_len()];
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        let epoch_start = Instant::now();
        for _ in 0..steps_per_epoch {
            let lr = schedule.lr_at(step);
            let idx = sampler.next_batch();
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let train_loss = plain_ce_loss_and_grad(&model, &batch, label_of, &mut grad)?;
            if !train_loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            log.total_grad_evals += 1;
            opt.step(model.params_mut(), &grad, lr);
            if !model.all_finite() {
                return Err(Error::NonFinite(format!("model parameters after step {step}")));
            }
            log.steps.push(StepRecord {
                step,
                train_loss,
                meta_loss: None,
                slot_weight_mean: vec![constant_weight; num_slots],
                slot_weight_min: vec![constant_weight; num_slots],
                slot_weight_max: vec![constant_weight; num_slots],
            });
            step += 1;
        }
        let wall = epoch_start.elapsed().as_secs_f64();
        let validation = evaluate(&model, &corpus.validation)?;
        let test = evaluate(&model, &corpus.test)?;
        best.observe(epoch, validation.jga, &model, &scheme);
        log.epochs.push(EpochRecord { epoch, validation, test });
        log.epoch_wall_seconds.push(wall);
    }
    Ok(TrainOutcome {
        model,
        scheme: scheme.clone(),
        best_model: best.model,
        best_scheme: scheme,
        best_epoch: best.epoch,
        best_validation_jga: best.jga,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, NoiseConfig};
    use crate::oracle::finite_difference_check;
    use approx::assert_abs_diff_eq;

    fn small_corpus(seed: u64) -> Corpus {
        let config = NoiseConfig {
            num_slots: 3,
            vocab_sizes: vec![4, 3, 5],
            context_dim: 6,
            clean_size: 40,
            train_size: 120,
            validation_size: 40,
            test_size: 40,
            vanilla_noise_rates: vec![0.3, 0.1, 0.4],
            pseudo_noise_rates: Some(vec![0.1, 0.3, 0.1]),
            seed,
            label_model: Default::default(),
        };
        generate_corpus(&config).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            train_batch: 16,
            meta_batch: 8,
            interim_lr: 0.5,
            primary_peak_lr: 0.8,
            meta_lr: 0.05,
            weighting_hidden_dim: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn batch_of(corpus: &Corpus, n: usize) -> Vec<&Sample> {
        corpus.train.iter().take(n).collect()
    }

    fn meta_batch_of(corpus: &Corpus, n: usize) -> Vec<&Sample> {
        corpus.validation.iter().take(n).collect()
    }

    fn some_model(corpus: &Corpus, seed: u64) -> PrimaryModel {
        // A few steps of vanilla training away from init, so distributions
        // are not uniform.
        let mut model = PrimaryModel::init(
            &corpus.schema,
            corpus.config.context_dim,
            Architecture::Linear,
            seed,
        );
        let batch = batch_of(corpus, 24);
        let mut grad = vec![0.0; model.param_len()];
        for _ in 0..5 {
            grad.iter_mut().for_each(|g| *g = 0.0);
            plain_ce_loss_and_grad(&model, &batch, |s, slot| s.vanilla_labels[slot], &mut grad)
                .unwrap();
            for (p, g) in model.params_mut().iter_mut().zip(&grad) {
                *p -= 1.0 * g;
            }
        }
        model
    }

    #[test]
    fn interim_step_with_zero_rate_is_identity() {
        let corpus = small_corpus(1);
        let model = some_model(&corpus, 5);
        let scheme = WeightingScheme::s1(3, None);
        let interim = interim_step(&model, &batch_of(&corpus, 8), &scheme, 0.0).unwrap();
        assert_eq!(interim, model);
    }

    #[test]
    fn interim_step_with_alpha_zero_is_a_vanilla_sgd_step() {
        let corpus = small_corpus(2);
        let model = some_model(&corpus, 6);
        let batch = batch_of(&corpus, 10);
        let scheme = WeightingScheme::fixed_alpha(0.0).unwrap();
        let interim = interim_step(&model, &batch, &scheme, 0.7).unwrap();

        let mut grad = vec![0.0; model.param_len()];
        crate::models::grad_plain_ce_into(
            &model,
            &batch,
            |s, slot| s.vanilla_labels[slot],
            None,
            &mut grad,
        )
        .unwrap();
        let mut expected = model.clone();
        for (p, g) in expected.params_mut().iter_mut().zip(&grad) {
            *p -= 0.7 * g;
        }
        assert_eq!(interim, expected);
    }

    #[test]
    fn toy_interim_step_matches_hand_derivation() {
        // One slot, vocab 2, context dim 1: everything is computable with
        // scalar arithmetic. Layout: [w0, w1, b0, b1].
        let schema = crate::data::SlotSchema::new(vec![crate::data::SlotDescriptor {
            name: "s".into(),
            vocab_size: 2,
        }])
        .unwrap();
        let mut model = PrimaryModel::zeros(&schema, 1, Architecture::Linear);
        model.params_mut().copy_from_slice(&[0.3, -0.2, 0.1, 0.0]);
        let x = 0.8;
        let sample = Sample {
            sample_id: 0,
            split: crate::data::Split::Train,
            context: vec![x],
            true_labels: vec![1],
            vanilla_labels: vec![0],
            pseudo_labels: Some(vec![1]),
        };
        let alpha = 0.3;
        let scheme = WeightingScheme::fixed_alpha(alpha).unwrap();
        let eta = 0.5;
        let interim = interim_step(&model, &[&sample], &scheme, eta).unwrap();

        // Hand computation with the naive softmax route.
        let z0 = 0.3 * x + 0.1;
        let z1 = -0.2 * x + 0.0;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        let p1 = 1.0 - p0;
        // coefficient[c] = (wp + wv) p[c] - wp [c = pseudo] - wv [c = vanilla]
        let c0 = p0 - (1.0 - alpha);
        let c1 = p1 - alpha;
        let expect = [
            0.3 - eta * c0 * x,
            -0.2 - eta * c1 * x,
            0.1 - eta * c0,
            0.0 - eta * c1,
        ];
        for (got, want) in interim.params().iter().zip(&expect) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn hypergradient_matches_finite_differences() {
        let corpus = small_corpus(3);
        let model = some_model(&corpus, 7);
        let train_batch = batch_of(&corpus, 6);
        let meta_batch = meta_batch_of(&corpus, 5);
        let eta = 0.4;
        let schemes = vec![
            WeightingScheme::s1(3, Some(0.55)),
            WeightingScheme::s2(3, 11),
            WeightingScheme::s3(3, 12),
            WeightingScheme::s3_decoupled(3, 13),
        ];
        for scheme in schemes {
            let hg = hypergradient(&model, &train_batch, &meta_batch, &scheme, eta).unwrap();
            let err = finite_difference_check(
                |params| {
                    let mut s = scheme.clone();
                    s.set_params(params).unwrap();
                    meta_objective(&model, &train_batch, &meta_batch, &s, eta).unwrap()
                },
                &scheme.params_vec(),
                &hg.grad,
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-4, "{:?}: max relative error {err}", scheme.kind());
        }
    }

    #[test]
    fn hypergradient_vanishes_without_an_interim_step() {
        let corpus = small_corpus(4);
        let model = some_model(&corpus, 8);
        let scheme = WeightingScheme::s2(4, 2);
        let hg = hypergradient(&model, &batch_of(&corpus, 6), &meta_batch_of(&corpus, 4), &scheme, 0.0)
            .unwrap();
        assert!(hg.grad.iter().all(|&g| g == 0.0));
        assert_eq!(hg.interim, model);
    }

    #[test]
    fn meta_update_steps_exactly() {
        let mut scheme = WeightingScheme::s1(2, None);
        scheme.set_params(&[0.4, -0.2]).unwrap();
        let mut opt = OptimizerState::new(OptimizerSpec::plain_sgd(), 2);
        // Zero gradient leaves parameters untouched.
        meta_update(&mut scheme, &[0.0, 0.0], &mut opt, 0.3).unwrap();
        assert_eq!(scheme.params_vec(), vec![0.4, -0.2]);
        // Plain descent is literally w - r g.
        meta_update(&mut scheme, &[1.5, -2.0], &mut opt, 0.3).unwrap();
        assert_eq!(scheme.params_vec(), vec![0.4 - 0.3 * 1.5, -0.2 + 0.3 * 2.0]);
    }

    #[test]
    fn positive_gradient_drives_the_weight_down_monotonically() {
        let mut scheme = WeightingScheme::s1(1, None);
        let mut opt = OptimizerState::new(OptimizerSpec::plain_sgd(), 1);
        let h = loss_features(1.0, 1.0).unwrap();
        let mut last = scheme.compute_weights(&h, 0).pseudo;
        for _ in 0..10 {
            meta_update(&mut scheme, &[0.8], &mut opt, 0.5).unwrap();
            let now = scheme.compute_weights(&h, 0).pseudo;
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn primary_update_equals_interim_step_when_meta_is_skipped() {
        let corpus = small_corpus(5);
        let model = some_model(&corpus, 9);
        let batch = batch_of(&corpus, 12);
        let scheme = WeightingScheme::s1(3, Some(0.4));
        let eta = 0.6;
        let interim = interim_step(&model, &batch, &scheme, eta).unwrap();
        let mut updated = model.clone();
        let mut opt = OptimizerState::new(OptimizerSpec::plain_sgd(), model.param_len());
        primary_update(&mut updated, &batch, &scheme, &mut opt, eta).unwrap();
        assert_eq!(updated, interim);
    }

    #[test]
    fn primary_update_never_reads_the_interim_model() {
        let corpus = small_corpus(6);
        let model = some_model(&corpus, 10);
        let batch = batch_of(&corpus, 10);
        let scheme = WeightingScheme::s2(4, 3);
        let hg =
            hypergradient(&model, &batch, &meta_batch_of(&corpus, 4), &scheme, 0.5).unwrap();
        let mut mangled = hg.interim.clone();
        for p in mangled.params_mut().iter_mut() {
            *p += 100.0;
        }
        // Same primary update twice, bracketing the interim mutation.
        let mut a = model.clone();
        let mut opt_a = OptimizerState::new(OptimizerSpec::plain_sgd(), model.param_len());
        primary_update(&mut a, &batch, &scheme, &mut opt_a, 0.3).unwrap();
        drop(mangled);
        let mut b = model.clone();
        let mut opt_b = OptimizerState::new(OptimizerSpec::plain_sgd(), model.param_len());
        primary_update(&mut b, &batch, &scheme, &mut opt_b, 0.3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_meta_steps_do_not_increase_the_meta_objective() {
        let corpus = small_corpus(7);
        let model = some_model(&corpus, 11);
        let train_batch = batch_of(&corpus, 10);
        let meta_batch = meta_batch_of(&corpus, 6);
        let eta = 0.5;
        for scheme in [WeightingScheme::s1(3, Some(0.6)), WeightingScheme::s2(4, 4)] {
            let before = meta_objective(&model, &train_batch, &meta_batch, &scheme, eta).unwrap();
            let hg = hypergradient(&model, &train_batch, &meta_batch, &scheme, eta).unwrap();
            let params = scheme.params_vec();
            let mut rate = 0.5;
            let mut ok = false;
            while rate >= 1e-12 {
                let stepped: Vec<f64> =
                    params.iter().zip(&hg.grad).map(|(p, g)| p - rate * g).collect();
                let mut candidate = scheme.clone();
                candidate.set_params(&stepped).unwrap();
                let after =
                    meta_objective(&model, &train_batch, &meta_batch, &candidate, eta).unwrap();
                if after <= before + 1e-12 {
                    ok = true;
                    break;
                }
                rate /= 2.0;
            }
            assert!(ok, "no descent rate found for {:?}", scheme.kind());
        }
    }

    #[test]
    fn zero_epochs_return_the_initialization() {
        let corpus = small_corpus(8);
        let config = TrainConfig { epochs: 0, ..small_config() };
        let outcome = train_meta(&corpus, &config).unwrap();
        let init = PrimaryModel::init(
            &corpus.schema,
            corpus.config.context_dim,
            config.arch,
            derive_seed(config.seed, STREAM_MODEL_INIT, 0),
        );
        assert_eq!(outcome.model, init);
        assert_eq!(outcome.best_epoch, 0);
        assert!(outcome.log.steps.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus(9);
        let config = TrainConfig { scheme: SchemeSpec::S2, ..small_config() };
        let a = train_meta(&corpus, &config).unwrap();
        let b = train_meta(&corpus, &config).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.scheme, b.scheme);
        assert!(a.log.same_trajectory(&b.log));
    }

    #[test]
    fn fixed_scheme_reduces_train_meta_to_the_baseline_loop() {
        let corpus = small_corpus(10);
        let config = TrainConfig { scheme: SchemeSpec::Fixed(0.37), ..small_config() };
        let via_meta = train_meta(&corpus, &config).unwrap();
        let via_fixed = train_fixed_alpha(&corpus, &config, 0.37).unwrap();
        assert_eq!(via_meta.model, via_fixed.model);
        assert_eq!(via_meta.best_model, via_fixed.best_model);
        assert!(via_meta.log.same_trajectory(&via_fixed.log));
    }

    #[test]
    fn alpha_zero_is_bitwise_vanilla_only_training() {
        let corpus = small_corpus(11);
        let config = small_config();
        let fixed = train_fixed_alpha(&corpus, &config, 0.0).unwrap();
        let standard = train_standard(&corpus, &config, LabelSource::Vanilla).unwrap();
        assert_eq!(fixed.model, standard.model);
        assert!(fixed.log.same_trajectory(&standard.log));
    }

    #[test]
    fn alpha_one_is_bitwise_pseudo_only_training() {
        let corpus = small_corpus(12);
        let config = small_config();
        let fixed = train_fixed_alpha(&corpus, &config, 1.0).unwrap();
        let standard = train_standard(&corpus, &config, LabelSource::Pseudo).unwrap();
        assert_eq!(fixed.model, standard.model);
        assert!(fixed.log.same_trajectory(&standard.log));
    }

    #[test]
    fn gradient_evaluations_count_three_to_one() {
        let corpus = small_corpus(13);
        let config = TrainConfig { epochs: 1, scheme: SchemeSpec::S1, ..small_config() };
        let meta = train_meta(&corpus, &config).unwrap();
        let steps = meta.log.steps.len();
        assert_eq!(meta.log.total_grad_evals, 3 * steps);
        assert_eq!(meta.log.grad_evals_per_step, 3);
        let fixed = train_fixed_alpha(&corpus, &config, 0.5).unwrap();
        assert_eq!(fixed.log.total_grad_evals, fixed.log.steps.len());
        assert_eq!(fixed.log.grad_evals_per_step, 1);
    }

    #[test]
    fn aux_pipeline_fills_pseudo_labels_when_missing() {
        let config = NoiseConfig {
            num_slots: 3,
            vocab_sizes: vec![4, 3, 5],
            context_dim: 6,
            clean_size: 60,
            train_size: 100,
            validation_size: 30,
            test_size: 30,
            vanilla_noise_rates: vec![0.3; 3],
            pseudo_noise_rates: None,
            seed: 14,
            label_model: Default::default(),
        };
        config.validate().unwrap();
        let corpus = generate_corpus(&config).unwrap();
        assert!(!corpus.has_pseudo_labels());
        let train_config = TrainConfig {
            epochs: 1,
            aux: AuxTrainConfig { steps: 100, ..AuxTrainConfig::default() },
            ..small_config()
        };
        let outcome = train_meta(&corpus, &train_config).unwrap();
        assert_eq!(outcome.log.aux_step_losses.len(), 100);
        assert!(outcome.log.steps.iter().all(|s| s.train_loss.is_finite()));
    }

    #[test]
    fn lr_schedule_shape() {
        let s = LrSchedule::new(1.0, 0.1, 100);
        assert_abs_diff_eq!(s.lr_at(0), 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(9), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.lr_at(10), 1.0, epsilon = 1e-12);
        assert!(s.lr_at(99) > 0.0);
        assert!(s.lr_at(99) < 0.02);
        let flat = LrSchedule::new(0.5, 0.0, 10);
        assert_abs_diff_eq!(flat.lr_at(0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn scheme_spec_parses_and_round_trips() {
        for (text, spec) in [
            ("s1", SchemeSpec::S1),
            ("s2", SchemeSpec::S2),
            ("s3", SchemeSpec::S3),
            ("s3d", SchemeSpec::S3Decoupled),
            ("fixed:0.4", SchemeSpec::Fixed(0.4)),
        ] {
            assert_eq!(text.parse::<SchemeSpec>().unwrap(), spec);
            assert_eq!(spec.to_string().parse::<SchemeSpec>().unwrap(), spec);
        }
        assert!("fixed:1.5".parse::<SchemeSpec>().is_err());
        assert!("s9".parse::<SchemeSpec>().is_err());
    }
}
