//! The label-weighting schemes: a fixed shared weight, per-slot learnable
//! scalars (S1), a loss-feature MLP with complementary weights (S2), and two
//! decoupled loss-feature MLPs without the sum-to-one constraint (S3, plus
//! the single-loss-input variant S3-decoupled).

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::data::derive_seed;
use crate::error::{Error, Result};

/// Feature components are clamped to this range before entering an MLP.
pub const FEATURE_CLAMP: f64 = 50.0;

/// The multipliers of the pseudo and vanilla one-hot labels for one
/// (sample, slot).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightPair {
    pub pseudo: f64,
    pub vanilla: f64,
}

impl WeightPair {
    pub fn sum(&self) -> f64 {
        self.pseudo + self.vanilla
    }
}

/// The 5-vector of loss features:
/// `[l_vanilla, l_pseudo, l_vanilla - l_pseudo, l_pseudo - l_vanilla,
///   l_vanilla + l_pseudo]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossFeatures {
    pub values: [f64; 5],
}

impl LossFeatures {
    pub fn vanilla_loss(&self) -> f64 {
        self.values[0]
    }

    pub fn pseudo_loss(&self) -> f64 {
        self.values[1]
    }
}

/// Builds the loss-feature vector from the two per-slot losses.
pub fn loss_features(vanilla_loss: f64, pseudo_loss: f64) -> Result<LossFeatures> {
    if !vanilla_loss.is_finite() || !pseudo_loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss features from (vanilla {vanilla_loss}, pseudo {pseudo_loss})"
        )));
    }
    Ok(LossFeatures {
        values: [
            vanilla_loss,
            pseudo_loss,
            vanilla_loss - pseudo_loss,
            pseudo_loss - vanilla_loss,
            vanilla_loss + pseudo_loss,
        ],
    })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

// ---------------------------------------------------------------------------
// MLP: one tanh hidden layer, scalar output (pre-sigmoid)
// ---------------------------------------------------------------------------

/// Scalar-output MLP with a single tanh hidden layer. Parameter layout is
/// flat: `[w1 (h x in), b1 (h), w2 (h), b2 (1)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        hidden_dim * input_dim + hidden_dim + hidden_dim + 1
    }

    /// Weights from N(0, 0.01^2), biases zero, so the initial sigmoid output
    /// sits near 0.5.
    pub fn new_seeded(input_dim: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let mut params = vec![0.0; Self::param_count(input_dim, hidden_dim)];
        for p in &mut params[..hidden_dim * input_dim] {
            *p = normal.sample(&mut rng);
        }
        let w2_off = hidden_dim * input_dim + hidden_dim;
        for p in &mut params[w2_off..w2_off + hidden_dim] {
            *p = normal.sample(&mut rng);
        }
        Mlp { input_dim, hidden_dim, params }
    }

    pub fn param_len(&self) -> usize {
        self.params.len()
    }

    fn blocks(&self) -> (&[f64], &[f64], &[f64], f64) {
        let h = self.hidden_dim;
        let d = self.input_dim;
        let w1 = &self.params[..h * d];
        let b1 = &self.params[h * d..h * d + h];
        let w2 = &self.params[h * d + h..h * d + h + h];
        let b2 = self.params[h * d + h + h];
        (w1, b1, w2, b2)
    }

    /// Pre-sigmoid scalar output.
    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_with_hidden(x).0
    }

    fn forward_with_hidden(&self, x: &[f64]) -> (f64, SmallVec<[f64; 32]>) {
        debug_assert_eq!(x.len(), self.input_dim);
        let (w1, b1, w2, b2) = self.blocks();
        let d = self.input_dim;
        let t: SmallVec<[f64; 32]> = (0..self.hidden_dim)
            .map(|j| {
                let z = b1[j]
                    + w1[j * d..(j + 1) * d].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
                z.tanh()
            })
            .collect();
        let z = b2 + w2.iter().zip(&t).map(|(w, ti)| w * ti).sum::<f64>();
        (z, t)
    }

    /// Writes `d output / d params` into `out` (scaled by `factor`), given
    /// the hidden activations of the forward pass.
    fn accumulate_grad_with_hidden(&self, x: &[f64], t: &[f64], factor: f64, out: &mut [f64]) {
        if factor == 0.0 {
            return;
        }
        let (_, _, w2, _) = self.blocks();
        let h = self.hidden_dim;
        let d = self.input_dim;
        let (out_w1, rest) = out.split_at_mut(h * d);
        let (out_b1, rest) = rest.split_at_mut(h);
        let (out_w2, out_b2) = rest.split_at_mut(h);
        for j in 0..h {
            let dt = factor * w2[j] * (1.0 - t[j] * t[j]);
            for (o, xi) in out_w1[j * d..(j + 1) * d].iter_mut().zip(x) {
                *o += dt * xi;
            }
            out_b1[j] += dt;
            out_w2[j] += factor * t[j];
        }
        out_b2[0] += factor;
    }

    /// Forward pass and parameter-gradient accumulation in one sweep:
    /// `out += coef * d sigmoid(forward(x)) / d params`. Returns the sigmoid
    /// output.
    fn grad_sigmoid_output(&self, x: &[f64], coef: f64, out: &mut [f64]) -> f64 {
        let (z, t) = self.forward_with_hidden(x);
        let a = sigmoid(z);
        self.accumulate_grad_with_hidden(x, &t, coef * a * (1.0 - a), out);
        a
    }
}

// ---------------------------------------------------------------------------
// Weighting schemes
// ---------------------------------------------------------------------------

/// A weighting scheme with its learnable parameters (none for `FixedAlpha`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum WeightingScheme {
    FixedAlpha { alpha: f64 },
    S1 { slot_weights: Vec<f64> },
    S2 { mlp: Mlp },
    S3 { pseudo_mlp: Mlp, vanilla_mlp: Mlp },
    S3Decoupled { pseudo_mlp: Mlp, vanilla_mlp: Mlp },
}

/// Scheme selector, as written on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    FixedAlpha,
    S1,
    S2,
    S3,
    S3Decoupled,
}

impl WeightingScheme {
    pub fn fixed_alpha(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("fixed alpha {alpha} must be in [0, 1]")));
        }
        Ok(WeightingScheme::FixedAlpha { alpha })
    }

    /// Per-slot scalars, all starting at the given alpha (0.5 by default,
    /// any other value injects prior knowledge).
    pub fn s1(num_slots: usize, init_alpha: Option<f64>) -> Self {
        let w = init_alpha.map(logit).unwrap_or(0.0);
        WeightingScheme::S1 { slot_weights: vec![w; num_slots] }
    }

    pub fn s2(hidden_dim: usize, seed: u64) -> Self {
        WeightingScheme::S2 { mlp: Mlp::new_seeded(5, hidden_dim, derive_seed(seed, 11, 0)) }
    }

    pub fn s3(hidden_dim: usize, seed: u64) -> Self {
        WeightingScheme::S3 {
            pseudo_mlp: Mlp::new_seeded(5, hidden_dim, derive_seed(seed, 12, 0)),
            vanilla_mlp: Mlp::new_seeded(5, hidden_dim, derive_seed(seed, 12, 1)),
        }
    }

    pub fn s3_decoupled(hidden_dim: usize, seed: u64) -> Self {
        WeightingScheme::S3Decoupled {
            pseudo_mlp: Mlp::new_seeded(1, hidden_dim, derive_seed(seed, 13, 0)),
            vanilla_mlp: Mlp::new_seeded(1, hidden_dim, derive_seed(seed, 13, 1)),
        }
    }

    pub fn kind(&self) -> SchemeKind {
        match self {
            WeightingScheme::FixedAlpha { .. } => SchemeKind::FixedAlpha,
            WeightingScheme::S1 { .. } => SchemeKind::S1,
            WeightingScheme::S2 { .. } => SchemeKind::S2,
            WeightingScheme::S3 { .. } => SchemeKind::S3,
            WeightingScheme::S3Decoupled { .. } => SchemeKind::S3Decoupled,
        }
    }

    pub fn param_len(&self) -> usize {
        match self {
            WeightingScheme::FixedAlpha { .. } => 0,
            WeightingScheme::S1 { slot_weights } => slot_weights.len(),
            WeightingScheme::S2 { mlp } => mlp.param_len(),
            WeightingScheme::S3 { pseudo_mlp, vanilla_mlp }
            | WeightingScheme::S3Decoupled { pseudo_mlp, vanilla_mlp } => {
                pseudo_mlp.param_len() + vanilla_mlp.param_len()
            }
        }
    }

    /// Whether the scheme has parameters trained by the meta loop.
    pub fn is_learnable(&self) -> bool {
        self.param_len() > 0
    }

    pub fn params_vec(&self) -> Vec<f64> {
        match self {
            WeightingScheme::FixedAlpha { .. } => Vec::new(),
            WeightingScheme::S1 { slot_weights } => slot_weights.clone(),
            WeightingScheme::S2 { mlp } => mlp.params.clone(),
            WeightingScheme::S3 { pseudo_mlp, vanilla_mlp }
            | WeightingScheme::S3Decoupled { pseudo_mlp, vanilla_mlp } => {
                let mut v = pseudo_mlp.params.clone();
                v.extend_from_slice(&vanilla_mlp.params);
                v
            }
        }
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_len() {
            return Err(Error::Shape(format!(
                "scheme expects {} parameters, got {}",
                self.param_len(),
                params.len()
            )));
        }
        match self {
            WeightingScheme::FixedAlpha { .. } => {}
            WeightingScheme::S1 { slot_weights } => slot_weights.copy_from_slice(params),
            WeightingScheme::S2 { mlp } => mlp.params.copy_from_slice(params),
            WeightingScheme::S3 { pseudo_mlp, vanilla_mlp }
            | WeightingScheme::S3Decoupled { pseudo_mlp, vanilla_mlp } => {
                let split = pseudo_mlp.param_len();
                pseudo_mlp.params.copy_from_slice(&params[..split]);
                vanilla_mlp.params.copy_from_slice(&params[split..]);
            }
        }
        Ok(())
    }

    /// The weight pair for one (sample, slot). Complementary schemes compute
    /// `vanilla` as exactly `1 - pseudo`.
    pub fn compute_weights(&self, features: &LossFeatures, slot: usize) -> WeightPair {
        match self {
            WeightingScheme::FixedAlpha { alpha } => {
                WeightPair { pseudo: *alpha, vanilla: 1.0 - alpha }
            }
            WeightingScheme::S1 { slot_weights } => {
                let a = sigmoid(slot_weights[slot]);
                WeightPair { pseudo: a, vanilla: 1.0 - a }
            }
            WeightingScheme::S2 { mlp } => {
                let a = sigmoid(mlp.forward(&clamped(features)));
                WeightPair { pseudo: a, vanilla: 1.0 - a }
            }
            WeightingScheme::S3 { pseudo_mlp, vanilla_mlp } => {
                let x = clamped(features);
                WeightPair {
                    pseudo: sigmoid(pseudo_mlp.forward(&x)),
                    vanilla: sigmoid(vanilla_mlp.forward(&x)),
                }
            }
            WeightingScheme::S3Decoupled { pseudo_mlp, vanilla_mlp } => {
                let lp = clamp_feature(features.pseudo_loss());
                let lv = clamp_feature(features.vanilla_loss());
                WeightPair {
                    pseudo: sigmoid(pseudo_mlp.forward(&[lp])),
                    vanilla: sigmoid(vanilla_mlp.forward(&[lv])),
                }
            }
        }
    }

    /// Exact Jacobian of the weight pair in the scheme parameters, with the
    /// features held constant.
    pub fn weight_jacobian(&self, features: &LossFeatures, slot: usize) -> WeightJacobian {
        let n = self.param_len();
        let mut jac = WeightJacobian { d_pseudo: vec![0.0; n], d_vanilla: vec![0.0; n] };
        self.accumulate_weight_grads(features, slot, 1.0, 0.0, &mut jac.d_pseudo);
        self.accumulate_weight_grads(features, slot, 0.0, 1.0, &mut jac.d_vanilla);
        jac
    }

    /// Accumulates `cp * d pseudo/d params + cv * d vanilla/d params` into a
    /// flat gradient. This is the building block of the hypergradient, where
    /// `cp`/`cv` are per-(sample, slot) scalars.
    pub(crate) fn accumulate_weight_grads(
        &self,
        features: &LossFeatures,
        slot: usize,
        cp: f64,
        cv: f64,
        grad: &mut [f64],
    ) {
        match self {
            WeightingScheme::FixedAlpha { .. } => {}
            WeightingScheme::S1 { slot_weights } => {
                let a = sigmoid(slot_weights[slot]);
                // vanilla = 1 - pseudo, so its derivative is the negation.
                grad[slot] += (cp - cv) * a * (1.0 - a);
            }
            WeightingScheme::S2 { mlp } => {
                let x = clamped(features);
                mlp.grad_sigmoid_output(&x, cp - cv, grad);
            }
            WeightingScheme::S3 { pseudo_mlp, vanilla_mlp } => {
                let x = clamped(features);
                let split = pseudo_mlp.param_len();
                pseudo_mlp.grad_sigmoid_output(&x, cp, &mut grad[..split]);
                vanilla_mlp.grad_sigmoid_output(&x, cv, &mut grad[split..]);
            }
            WeightingScheme::S3Decoupled { pseudo_mlp, vanilla_mlp } => {
                let split = pseudo_mlp.param_len();
                let xp = [clamp_feature(features.pseudo_loss())];
                pseudo_mlp.grad_sigmoid_output(&xp, cp, &mut grad[..split]);
                let xv = [clamp_feature(features.vanilla_loss())];
                vanilla_mlp.grad_sigmoid_output(&xv, cv, &mut grad[split..]);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<WeightingScheme> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(BufReader::new(file))?)
    }
}

/// Jacobian of `(pseudo, vanilla)` in the flat scheme parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightJacobian {
    pub d_pseudo: Vec<f64>,
    pub d_vanilla: Vec<f64>,
}

fn clamp_feature(x: f64) -> f64 {
    x.clamp(-FEATURE_CLAMP, FEATURE_CLAMP)
}

fn clamped(features: &LossFeatures) -> [f64; 5] {
    let mut out = features.values;
    for x in &mut out {
        *x = clamp_feature(*x);
    }
    out
}

// ---------------------------------------------------------------------------
// Label combination
// ---------------------------------------------------------------------------

/// Weighted combination of two one-hot labels over the same vocabulary.
pub fn combine_labels(
    pseudo: &[f64],
    vanilla: &[f64],
    weights: &WeightPair,
) -> Result<Vec<f64>> {
    if pseudo.len() != vanilla.len() {
        return Err(Error::Shape(format!(
            "one-hot vocab mismatch: pseudo {} vs vanilla {}",
            pseudo.len(),
            vanilla.len()
        )));
    }
    Ok(pseudo
        .iter()
        .zip(vanilla)
        .map(|(&p, &v)| weights.pseudo * p + weights.vanilla * v)
        .collect())
}

/// `combine_labels` for label indices.
pub fn combine_label_indices(
    pseudo: usize,
    vanilla: usize,
    vocab: usize,
    weights: &WeightPair,
) -> Vec<f64> {
    let mut out = vec![0.0; vocab];
    out[pseudo] += weights.pseudo;
    out[vanilla] += weights.vanilla;
    out
}

/// Splits a weight pair into `(scale, beta)` with
/// `scale = pseudo + vanilla` and `beta = pseudo / scale`, so that
/// `scale * (beta, 1 - beta)` reconstructs the pair.
pub fn beta_decompose(weights: &WeightPair) -> Result<(f64, f64)> {
    let scale = weights.sum();
    if scale <= 1e-15 {
        return Err(Error::DegenerateWeights(scale));
    }
    Ok((scale, weights.pseudo / scale))
}

/// One-hot vector for a label index.
pub fn one_hot(label: usize, vocab: usize) -> Vec<f64> {
    let mut v = vec![0.0; vocab];
    v[label] = 1.0;
    v
}
