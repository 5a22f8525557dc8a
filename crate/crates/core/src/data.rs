//! Slot schema, sample model, synthetic corpus generation with controlled
//! per-slot label noise, and corpus serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Index reserved for the "none" value in every slot vocabulary.
pub const NONE_VALUE: usize = 0;

/// One slot: a name and the size of its value vocabulary (index 0 is "none").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDescriptor {
    pub name: String,
    pub vocab_size: usize,
}

/// Ordered, fixed set of slots shared by every sample in a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSchema {
    pub slots: Vec<SlotDescriptor>,
}

impl SlotSchema {
    pub fn new(slots: Vec<SlotDescriptor>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Config("schema must have at least one slot".into()));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.vocab_size < 2 {
                return Err(Error::Config(format!(
                    "vocab_size of slot '{}' is {}, must be >= 2",
                    s.name, s.vocab_size
                )));
            }
            if slots[..i].iter().any(|t| t.name == s.name) {
                return Err(Error::Config(format!("duplicate slot name '{}'", s.name)));
            }
        }
        Ok(SlotSchema { slots })
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn vocab_size(&self, slot: usize) -> usize {
        self.slots[slot].vocab_size
    }

    /// Stable content hash, used to pair checkpoints with the corpus they
    /// were trained on.
    pub fn content_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(16);
        for byte in digest.iter().take(8) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

/// Which corpus split a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Clean,
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Clean, Split::Train, Split::Validation, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Clean => "clean",
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(Split::Clean),
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

/// One independent "turn": a context vector with per-slot labels.
///
/// `true_labels` is the ground truth, available because the data is
/// synthetic; training never reads it, only evaluation and the oracles do.
/// `vanilla_labels` is the (possibly corrupted) label provided to training,
/// and `pseudo_labels` is filled by an auxiliary model or by controlled
/// corruption of the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: u64,
    pub split: Split,
    pub context: Vec<f64>,
    pub true_labels: Vec<usize>,
    pub vanilla_labels: Vec<usize>,
    pub pseudo_labels: Option<Vec<usize>>,
}

/// Parameters of the ground-truth generative map from context to labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelModelConfig {
    pub weight_scale: f64,
    pub bias_scale: f64,
}

impl Default for LabelModelConfig {
    fn default() -> Self {
        LabelModelConfig { weight_scale: 1.0, bias_scale: 1.0 }
    }
}

/// Full recipe for a synthetic corpus. Identical configs (including the
/// seed) produce bit-identical corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub num_slots: usize,
    pub vocab_sizes: Vec<usize>,
    pub context_dim: usize,
    pub clean_size: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    /// Per-slot probability of replacing a train-split vanilla label with a
    /// uniformly random different value.
    pub vanilla_noise_rates: Vec<f64>,
    /// When set, pseudo labels are synthesized by corrupting the true labels
    /// at these per-slot rates (controlled mode) instead of decoding an
    /// auxiliary model.
    pub pseudo_noise_rates: Option<Vec<f64>>,
    pub seed: u64,
    pub label_model: LabelModelConfig,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            num_slots: 10,
            vocab_sizes: vec![5; 10],
            context_dim: 16,
            clean_size: 1000,
            train_size: 8000,
            validation_size: 1000,
            test_size: 2000,
            vanilla_noise_rates: vec![0.3; 10],
            pseudo_noise_rates: None,
            seed: 0,
            label_model: LabelModelConfig::default(),
        }
    }
}

impl NoiseConfig {
    /// Benchmark with opposed noise profiles: half the slots have noisy
    /// vanilla labels and clean-ish pseudo labels, the other half reversed.
    /// Controlled mode, so no auxiliary model is involved.
    pub fn asymmetric_benchmark(seed: u64) -> Self {
        let mut vanilla = vec![0.4; 5];
        vanilla.extend(vec![0.1; 5]);
        let mut pseudo = vec![0.1; 5];
        pseudo.extend(vec![0.4; 5]);
        NoiseConfig {
            vanilla_noise_rates: vanilla,
            pseudo_noise_rates: Some(pseudo),
            seed,
            ..NoiseConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_slots == 0 {
            return Err(Error::Config("num_slots must be >= 1".into()));
        }
        if self.vocab_sizes.len() != self.num_slots {
            return Err(Error::Config(format!(
                "vocab_sizes has {} entries, expected num_slots = {}",
                self.vocab_sizes.len(),
                self.num_slots
            )));
        }
        for (i, &v) in self.vocab_sizes.iter().enumerate() {
            if v < 2 {
                return Err(Error::Config(format!("vocab_sizes[{i}] = {v}, must be >= 2")));
            }
        }
        if self.context_dim == 0 {
            return Err(Error::Config("context_dim must be >= 1".into()));
        }
        for (name, size) in [
            ("clean_size", self.clean_size),
            ("train_size", self.train_size),
            ("validation_size", self.validation_size),
            ("test_size", self.test_size),
        ] {
            if size == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        check_rates("vanilla_noise_rates", &self.vanilla_noise_rates, self.num_slots)?;
        if let Some(rates) = &self.pseudo_noise_rates {
            check_rates("pseudo_noise_rates", rates, self.num_slots)?;
        }
        if !self.label_model.weight_scale.is_finite() || !self.label_model.bias_scale.is_finite() {
            return Err(Error::Config("label_model scales must be finite".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> SlotSchema {
        let slots = self
            .vocab_sizes
            .iter()
            .enumerate()
            .map(|(i, &v)| SlotDescriptor { name: format!("slot{i}"), vocab_size: v })
            .collect();
        SlotSchema::new(slots).expect("validated config yields a valid schema")
    }

    /// Controlled mode means pseudo labels come from known corruption rates
    /// rather than an auxiliary model.
    pub fn is_controlled(&self) -> bool {
        self.pseudo_noise_rates.is_some()
    }
}

fn check_rates(field: &str, rates: &[f64], num_slots: usize) -> Result<()> {
    if rates.len() != num_slots {
        return Err(Error::Config(format!(
            "{field} has {} entries, expected num_slots = {num_slots}",
            rates.len()
        )));
    }
    for (i, &r) in rates.iter().enumerate() {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("{field}[{i}] = {r}, must be in [0, 1)")));
        }
    }
    Ok(())
}

/// The four datasets plus the recipe that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub schema: SlotSchema,
    pub clean: Vec<Sample>,
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test: Vec<Sample>,
    pub config: NoiseConfig,
}

impl Corpus {
    pub fn split(&self, which: Split) -> &[Sample] {
        match which {
            Split::Clean => &self.clean,
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn split_mut(&mut self, which: Split) -> &mut Vec<Sample> {
        match which {
            Split::Clean => &mut self.clean,
            Split::Train => &mut self.train,
            Split::Validation => &mut self.validation,
            Split::Test => &mut self.test,
        }
    }

    /// True when every train sample carries pseudo labels.
    pub fn has_pseudo_labels(&self) -> bool {
        self.train.iter().all(|s| s.pseudo_labels.is_some())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        let header = CorpusHeader { schema: self.schema.clone(), config: self.config.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for split in Split::ALL {
            for sample in self.split(split) {
                serde_json::to_writer(&mut w, sample)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Corpus> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines();

        let header_line = lines
            .next()
            .ok_or_else(|| Error::Parse { line: 1, message: "empty corpus file".into() })??;
        let header: CorpusHeader =
            serde_json::from_str(&header_line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("bad header: {e}"),
            })?;
        header.config.validate()?;
        if header.schema != header.config.schema() {
            return Err(Error::Schema(
                "header schema does not match the schema implied by the config".into(),
            ));
        }

        let mut corpus = Corpus {
            schema: header.schema,
            clean: Vec::new(),
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            config: header.config,
        };
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: Sample = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            validate_sample(&sample, &corpus.schema, corpus.config.context_dim)
                .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            corpus.split_mut(sample.split).push(sample);
        }

        let expected = [
            (Split::Clean, corpus.config.clean_size),
            (Split::Train, corpus.config.train_size),
            (Split::Validation, corpus.config.validation_size),
            (Split::Test, corpus.config.test_size),
        ];
        for (split, size) in expected {
            if corpus.split(split).len() != size {
                return Err(Error::Schema(format!(
                    "{} split has {} samples, config says {}",
                    split.as_str(),
                    corpus.split(split).len(),
                    size
                )));
            }
        }
        check_disjoint_ids(&corpus)?;
        Ok(corpus)
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    schema: SlotSchema,
    config: NoiseConfig,
}

fn validate_sample(sample: &Sample, schema: &SlotSchema, context_dim: usize) -> Result<()> {
    if sample.context.len() != context_dim {
        return Err(Error::Schema(format!(
            "sample {} context has dim {}, expected {}",
            sample.sample_id,
            sample.context.len(),
            context_dim
        )));
    }
    for (tag, labels) in [("true", &sample.true_labels), ("vanilla", &sample.vanilla_labels)] {
        check_labels(sample.sample_id, tag, labels, schema)?;
    }
    if let Some(pseudo) = &sample.pseudo_labels {
        check_labels(sample.sample_id, "pseudo", pseudo, schema)?;
    }
    Ok(())
}

fn check_labels(id: u64, tag: &str, labels: &[usize], schema: &SlotSchema) -> Result<()> {
    if labels.len() != schema.num_slots() {
        return Err(Error::Schema(format!(
            "sample {id} has {} {tag} labels, expected {}",
            labels.len(),
            schema.num_slots()
        )));
    }
    for (slot, &label) in labels.iter().enumerate() {
        if label >= schema.vocab_size(slot) {
            return Err(Error::Schema(format!(
                "sample {id} {tag} label {label} out of range for slot '{}' (vocab {})",
                schema.slots[slot].name,
                schema.vocab_size(slot)
            )));
        }
    }
    Ok(())
}

fn check_disjoint_ids(corpus: &Corpus) -> Result<()> {
    let mut ids: Vec<u64> = Split::ALL
        .iter()
        .flat_map(|&s| corpus.split(s).iter().map(|x| x.sample_id))
        .collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Schema("duplicate sample_id across splits".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Seed derivation
// ---------------------------------------------------------------------------

const STREAM_LABEL_MODEL: u64 = 1;
const STREAM_SAMPLE: u64 = 2;
const STREAM_VANILLA_NOISE: u64 = 3;
const STREAM_PSEUDO_NOISE: u64 = 4;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives an independent child seed from a base seed, a stream tag, and an
/// index. Per-sample randomness keyed this way makes generation
/// schedule-independent.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(base.wrapping_add(splitmix64(stream))).wrapping_add(index))
}

fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}

// ---------------------------------------------------------------------------
// Ground-truth label model
// ---------------------------------------------------------------------------

/// The generative map from context to true labels: per slot, the argmax of a
/// linear score drawn once per corpus from the seeded config. Exposed so the
/// oracles can build a perfect predictor.
#[derive(Debug, Clone)]
pub struct LabelModel {
    /// Per slot: row-major `vocab_size x context_dim` weights.
    pub weights: Vec<Vec<f64>>,
    /// Per slot: `vocab_size` biases.
    pub biases: Vec<Vec<f64>>,
}

impl LabelModel {
    pub fn from_config(config: &NoiseConfig) -> LabelModel {
        let mut rng = rng_for(config.seed, STREAM_LABEL_MODEL, 0);
        let d = config.context_dim;
        let mut weights = Vec::with_capacity(config.num_slots);
        let mut biases = Vec::with_capacity(config.num_slots);
        for &vocab in &config.vocab_sizes {
            let w: Vec<f64> = (0..vocab * d)
                .map(|_| config.label_model.weight_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let b: Vec<f64> = (0..vocab)
                .map(|_| config.label_model.bias_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(w);
            biases.push(b);
        }
        LabelModel { weights, biases }
    }

    /// True label of one slot: argmax of the linear score, ties toward the
    /// lower index.
    pub fn true_label(&self, slot: usize, context: &[f64]) -> usize {
        let d = context.len();
        let w = &self.weights[slot];
        let b = &self.biases[slot];
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for v in 0..b.len() {
            let row = &w[v * d..(v + 1) * d];
            let score: f64 = b[v] + row.iter().zip(context).map(|(wi, xi)| wi * xi).sum::<f64>();
            if score > best_score {
                best_score = score;
                best = v;
            }
        }
        best
    }
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// For each slot independently: with probability `rates[slot]` replace the
/// label by a uniformly random different value, otherwise keep it.
pub fn corrupt_labels(
    labels: &[usize],
    rates: &[f64],
    schema: &SlotSchema,
    rng: &mut impl Rng,
) -> Vec<usize> {
    labels
        .iter()
        .enumerate()
        .map(|(slot, &label)| {
            let rate = rates[slot];
            if rng.random::<f64>() < rate {
                let vocab = schema.vocab_size(slot);
                let other = rng.random_range(0..vocab - 1);
                if other >= label {
                    other + 1
                } else {
                    other
                }
            } else {
                label
            }
        })
        .collect()
}

/// Generates a corpus from the config. Clean, validation and test splits are
/// noise-free; train vanilla labels are corrupted per slot; train pseudo
/// labels are filled only in controlled mode.
pub fn generate_corpus(config: &NoiseConfig) -> Result<Corpus> {
    config.validate()?;
    let schema = config.schema();
    let label_model = LabelModel::from_config(config);

    let plan = [
        (Split::Clean, config.clean_size),
        (Split::Train, config.train_size),
        (Split::Validation, config.validation_size),
        (Split::Test, config.test_size),
    ];

    let mut corpus = Corpus {
        schema,
        clean: Vec::with_capacity(config.clean_size),
        train: Vec::with_capacity(config.train_size),
        validation: Vec::with_capacity(config.validation_size),
        test: Vec::with_capacity(config.test_size),
        config: config.clone(),
    };

    let mut next_id = 0u64;
    for (split, size) in plan {
        for _ in 0..size {
            let sample_id = next_id;
            next_id += 1;
            let mut rng = rng_for(config.seed, STREAM_SAMPLE, sample_id);
            let context: Vec<f64> =
                (0..config.context_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let true_labels: Vec<usize> = (0..config.num_slots)
                .map(|s| label_model.true_label(s, &context))
                .collect();

            let vanilla_labels = if split == Split::Train {
                let mut noise_rng = rng_for(config.seed, STREAM_VANILLA_NOISE, sample_id);
                corrupt_labels(
                    &true_labels,
                    &config.vanilla_noise_rates,
                    &corpus.schema,
                    &mut noise_rng,
                )
            } else {
                true_labels.clone()
            };

            let pseudo_labels = match (&config.pseudo_noise_rates, split) {
                (Some(rates), Split::Train) => {
                    let mut noise_rng = rng_for(config.seed, STREAM_PSEUDO_NOISE, sample_id);
                    Some(corrupt_labels(&true_labels, rates, &corpus.schema, &mut noise_rng))
                }
                _ => None,
            };

            corpus.split_mut(split).push(Sample {
                sample_id,
                split,
                context,
                true_labels,
                vanilla_labels,
                pseudo_labels,
            });
        }
    }
    Ok(corpus)
}

// ---------------------------------------------------------------------------
// Minibatch sampling
// ---------------------------------------------------------------------------

/// Draws minibatches without replacement; each epoch is a fresh seeded
/// permutation of the split and may end with a partial batch.
#[derive(Debug, Clone)]
pub struct MinibatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

impl MinibatchSampler {
    pub fn new(split_len: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if split_len == 0 {
            return Err(Error::Data("cannot sample minibatches from an empty split".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let mut sampler = MinibatchSampler {
            order: (0..split_len).collect(),
            cursor: 0,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Indices of the next batch; starts a new epoch when the current one is
    /// exhausted.
    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        batch
    }
}
