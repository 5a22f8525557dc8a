//! Python bindings for the metassist library: corpus generation, fixed and
//! meta-weighted training, evaluation, and the dominance oracle.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use metassist::data;
use metassist::models;
use metassist::oracle;
use metassist::trainer;
use metassist::weighting;

fn to_py_err(e: metassist::Error) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Recipe for a synthetic corpus with controlled per-slot label noise.
#[pyclass(name = "NoiseConfig")]
struct PyNoiseConfig {
    inner: data::NoiseConfig,
}

#[pymethods]
impl PyNoiseConfig {
    #[new]
    #[pyo3(signature = (
        num_slots = 10,
        vocab_size = 5,
        context_dim = 16,
        clean_size = 1000,
        train_size = 8000,
        validation_size = 1000,
        test_size = 2000,
        vanilla_noise = 0.3,
        pseudo_noise = None,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_slots: usize,
        vocab_size: usize,
        context_dim: usize,
        clean_size: usize,
        train_size: usize,
        validation_size: usize,
        test_size: usize,
        vanilla_noise: f64,
        pseudo_noise: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = data::NoiseConfig {
            num_slots,
            vocab_sizes: vec![vocab_size; num_slots],
            context_dim,
            clean_size,
            train_size,
            validation_size,
            test_size,
            vanilla_noise_rates: vec![vanilla_noise; num_slots],
            pseudo_noise_rates: pseudo_noise.map(|p| vec![p; num_slots]),
            seed,
            label_model: Default::default(),
        };
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyNoiseConfig { inner })
    }

    /// The opposed-noise benchmark: five slots with noisy vanilla labels and
    /// cleaner pseudo labels, five reversed. Controlled mode.
    #[staticmethod]
    fn asymmetric(seed: u64) -> Self {
        PyNoiseConfig { inner: data::NoiseConfig::asymmetric_benchmark(seed) }
    }

    /// Per-slot vanilla noise rates.
    #[setter]
    fn set_vanilla_noise_rates(&mut self, rates: Vec<f64>) -> PyResult<()> {
        self.inner.vanilla_noise_rates = rates;
        self.inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn vanilla_noise_rates(&self) -> Vec<f64> {
        self.inner.vanilla_noise_rates.clone()
    }

    #[setter]
    fn set_pseudo_noise_rates(&mut self, rates: Option<Vec<f64>>) -> PyResult<()> {
        self.inner.pseudo_noise_rates = rates;
        self.inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn pseudo_noise_rates(&self) -> Option<Vec<f64>> {
        self.inner.pseudo_noise_rates.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "NoiseConfig(num_slots={}, context_dim={}, train_size={}, seed={})",
            self.inner.num_slots, self.inner.context_dim, self.inner.train_size, self.inner.seed
        )
    }
}

/// The four splits of a synthetic corpus.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: data::Corpus,
}

#[pymethods]
impl PyCorpus {
    /// Generates a corpus from the config (bit-deterministic in the seed).
    #[staticmethod]
    fn generate(config: &PyNoiseConfig) -> PyResult<Self> {
        Ok(PyCorpus { inner: data::generate_corpus(&config.inner).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus { inner: data::Corpus::load(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn split_sizes(&self) -> (usize, usize, usize, usize) {
        (
            self.inner.clean.len(),
            self.inner.train.len(),
            self.inner.validation.len(),
            self.inner.test.len(),
        )
    }

    fn has_pseudo_labels(&self) -> bool {
        self.inner.has_pseudo_labels()
    }

    fn num_slots(&self) -> usize {
        self.inner.schema.num_slots()
    }

    fn __repr__(&self) -> String {
        let (c, t, v, te) = self.split_sizes();
        format!("Corpus(clean={c}, train={t}, validation={v}, test={te})")
    }
}

/// Hyperparameters of a training run.
#[pyclass(name = "TrainConfig")]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (
        scheme = "s2",
        epochs = 6,
        train_batch = 32,
        meta_batch = 8,
        interim_lr = 1.0,
        primary_lr = 1.0,
        meta_lr = 0.05,
        weighting_hidden_dim = 8,
        init_alpha = None,
        seed = 0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        scheme: &str,
        epochs: usize,
        train_batch: usize,
        meta_batch: usize,
        interim_lr: f64,
        primary_lr: f64,
        meta_lr: f64,
        weighting_hidden_dim: usize,
        init_alpha: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let scheme: trainer::SchemeSpec =
            scheme.parse().map_err(|e: metassist::Error| PyValueError::new_err(e.to_string()))?;
        let inner = trainer::TrainConfig {
            scheme,
            epochs,
            train_batch,
            meta_batch,
            interim_lr,
            primary_peak_lr: primary_lr,
            meta_lr,
            weighting_hidden_dim,
            init_alpha,
            seed,
            ..trainer::TrainConfig::default()
        };
        inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyTrainConfig { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(scheme='{}', epochs={}, seed={})",
            self.inner.scheme, self.inner.epochs, self.inner.seed
        )
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: models::PrimaryModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: models::PrimaryModel::load(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn num_slots(&self) -> usize {
        self.inner.num_slots()
    }

    fn param_len(&self) -> usize {
        self.inner.param_len()
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &models::MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("jga", m.jga)?;
    d.set_item("jta", m.jta)?;
    d.set_item("sa", m.sa)?;
    d.set_item("per_slot_accuracy", m.per_slot_accuracy.clone())?;
    d.set_item("per_slot_error_rate", m.per_slot_error_rate.clone())?;
    Ok(d)
}

/// Result of a training run: final and best-checkpoint models plus the log.
#[pyclass(name = "TrainResult")]
struct PyTrainResult {
    outcome: trainer::TrainOutcome,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn best_epoch(&self) -> usize {
        self.outcome.best_epoch
    }

    #[getter]
    fn best_validation_jga(&self) -> f64 {
        self.outcome.best_validation_jga
    }

    #[getter]
    fn grad_evals_per_step(&self) -> usize {
        self.outcome.log.grad_evals_per_step
    }

    fn best_model(&self) -> PyModel {
        PyModel { inner: self.outcome.best_model.clone() }
    }

    fn final_model(&self) -> PyModel {
        PyModel { inner: self.outcome.model.clone() }
    }

    fn save_best_model(&self, path: PathBuf) -> PyResult<()> {
        self.outcome.best_model.save(&path).map_err(to_py_err)
    }

    fn save_scheme(&self, path: PathBuf) -> PyResult<()> {
        self.outcome.scheme.save(&path).map_err(to_py_err)
    }

    /// Per-step training losses.
    fn train_losses(&self) -> Vec<f64> {
        self.outcome.log.steps.iter().map(|s| s.train_loss).collect()
    }

    /// Per-step meta losses (empty for fixed-weight runs).
    fn meta_losses(&self) -> Vec<f64> {
        self.outcome.log.steps.iter().filter_map(|s| s.meta_loss).collect()
    }

    /// Pseudo-label weights the scheme assigns at zero loss features, one
    /// per slot (informative for S1 and fixed alpha).
    fn slot_weights(&self, num_slots: usize) -> PyResult<Vec<f64>> {
        let h = weighting::loss_features(0.0, 0.0).map_err(to_py_err)?;
        Ok((0..num_slots)
            .map(|s| self.outcome.scheme.compute_weights(&h, s).pseudo)
            .collect())
    }
}

/// Trains with the configured scheme: the bilevel meta loop for learnable
/// schemes, the plain weighted loop for `fixed:<alpha>`.
#[pyfunction]
fn train(corpus: &PyCorpus, config: &PyTrainConfig) -> PyResult<PyTrainResult> {
    let outcome = match config.inner.scheme {
        trainer::SchemeSpec::Fixed(alpha) => {
            trainer::train_fixed_alpha(&corpus.inner, &config.inner, alpha)
        }
        _ => trainer::train_meta(&corpus.inner, &config.inner),
    }
    .map_err(to_py_err)?;
    Ok(PyTrainResult { outcome })
}

/// Argmax metrics of a model on one split ("clean", "train", "validation"
/// or "test").
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    model: &PyModel,
    corpus: &PyCorpus,
    split: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let split: data::Split =
        split.parse().map_err(|e: metassist::Error| PyValueError::new_err(e.to_string()))?;
    let metrics = models::evaluate(&model.inner, corpus.inner.split(split)).map_err(to_py_err)?;
    metrics_dict(py, &metrics)
}

/// Runs the slot-wise vs shared optimal-error dominance check on random
/// controlled-noise instances. Raises on any violation.
#[pyfunction]
#[pyo3(signature = (instances = 20, samples = 500, grid_step = 0.01, seed = 0))]
fn verify_theorem1<'py>(
    py: Python<'py>,
    instances: usize,
    samples: usize,
    grid_step: f64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = oracle::DominanceInstanceConfig { samples, ..Default::default() };
    let reports = oracle::verify_theorem1(instances, &cfg, grid_step, seed).map_err(to_py_err)?;
    reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("holds", r.holds)?;
            d.set_item("margin", r.margin)?;
            d.set_item("noise_spread", r.noise_spread)?;
            d.set_item("shared_alpha", r.shared.alpha)?;
            d.set_item("shared_y", r.shared.y)?;
            d.set_item("slotwise_y", r.slotwise.y)?;
            Ok(d)
        })
        .collect()
}

/// Best shared and slot-wise alphas (grid search) for the train split of a
/// controlled-mode corpus.
#[pyfunction]
#[pyo3(signature = (corpus, grid_step = 0.01))]
fn optimal_alphas<'py>(
    py: Python<'py>,
    corpus: &PyCorpus,
    grid_step: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let shared = oracle::optimal_shared_alpha(&corpus.inner.train, grid_step).map_err(to_py_err)?;
    let slotwise =
        oracle::optimal_slotwise_alpha(&corpus.inner.train, grid_step).map_err(to_py_err)?;
    let d = PyDict::new(py);
    d.set_item("shared_alpha", shared.alpha)?;
    d.set_item("shared_y", shared.y)?;
    d.set_item("slotwise_alphas", slotwise.alphas.clone())?;
    d.set_item("slotwise_y", slotwise.y)?;
    Ok(d)
}

#[pymodule]
fn metassist_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNoiseConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theorem1, m)?)?;
    m.add_function(wrap_pyfunction!(optimal_alphas, m)?)?;
    Ok(())
}
