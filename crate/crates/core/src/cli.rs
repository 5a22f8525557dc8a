//! Experiment driver: config parsing with defaults < config file < flags,
//! subcommand dispatch, and artifact emission. Every subcommand writes the
//! fully resolved config next to its outputs so a run can be reproduced
//! bit-identically from that file alone (wall-clock timing diagnostics are
//! the one deliberately non-deterministic output, kept in their own file).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_corpus, Corpus, NoiseConfig, Split};
use crate::error::{Error, Result};
use crate::models::{evaluate, generate_pseudo_labels, train_auxiliary, MetricsReport, PrimaryModel};
use crate::oracle::{
    per_slot_error_rates, verify_theorem1, weight_distribution_report, DominanceInstanceConfig,
    HISTOGRAM_BINS,
};
use crate::trainer::{
    train_fixed_alpha, train_meta, SchemeSpec, TrainConfig, TrainOutcome,
};
use crate::weighting::WeightingScheme;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "METASSIST_OUT_ROOT";

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Alpha grid resolution for the optimal-weight searches.
    pub grid_step: f64,
    /// Number of random instances for the dominance suite.
    pub instances: usize,
    pub instance: DominanceInstanceConfig,
    /// Split exported by `export-weights`.
    pub export_split: Split,
    /// Seeds per row in `bench-table`.
    pub bench_seeds: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            grid_step: 0.01,
            instances: 100,
            instance: DominanceInstanceConfig::default(),
            export_split: Split::Train,
            bench_seeds: 5,
        }
    }
}

/// Paths to input artifacts, persisted so a run can be replayed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct InputPaths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub scheme: Option<PathBuf>,
    pub aux: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: NoiseConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub inputs: InputPaths,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("serializing config: {e}")))?;
        fs::write(path, text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------------

#[derive(Parser, Debug)]
#[command(
    name = "metassist",
    about = "Train per-slot classifiers on noisy labels with fixed or meta-learned label weighting",
    version
)]
struct CliArgs {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct CommonArgs {
    /// Config file (TOML); command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: $METASSIST_OUT_ROOT/<subcommand> or out/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    /// Corpus preset: "standard" or "asymmetric".
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    slots: Option<usize>,
    /// Vocabulary size applied to every slot.
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    context_dim: Option<usize>,
    #[arg(long)]
    clean_size: Option<usize>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    validation_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    /// Per-slot vanilla noise rates: one value for all slots or a comma list.
    #[arg(long)]
    vanilla_noise: Option<String>,
    /// Controlled pseudo noise rates (same syntax), or "none" for the
    /// auxiliary-model pipeline.
    #[arg(long)]
    pseudo_noise: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TrainArgs {
    /// Corpus file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weighting scheme: fixed:<alpha>, s1, s2, s3 or s3d.
    #[arg(long)]
    scheme: Option<String>,
    /// Prior-knowledge initialization for S1.
    #[arg(long)]
    init_alpha: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    train_batch: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    #[arg(long)]
    interim_lr: Option<f64>,
    #[arg(long)]
    primary_lr: Option<f64>,
    #[arg(long)]
    meta_lr: Option<f64>,
    #[arg(long)]
    weighting_hidden: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Train the auxiliary model on the clean split.
    TrainAux {
        #[command(flatten)]
        common: CommonArgs,
        /// Corpus file.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Auxiliary training steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Fill pseudo labels of the train split with an auxiliary model.
    GenPseudo {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Auxiliary model checkpoint.
        #[arg(long)]
        aux: Option<PathBuf>,
    },
    /// Train the primary model (fixed-weight or meta-learned weighting).
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a model checkpoint on a corpus split.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Split: clean, train, validation or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Check slot-wise vs shared optimal approximation error on random
    /// instances; exits nonzero on any dominance violation.
    VerifyTheorem1 {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        grid_step: Option<f64>,
        /// Samples per instance.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Export the weight distribution of a trained scheme on a split.
    ExportWeights {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Scheme checkpoint.
        #[arg(long)]
        scheme: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
    },
    /// Per-slot error rates of a model checkpoint.
    ErrorRates {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the fixed-alpha grid plus every scheme over several seeds and
    /// emit a summary table.
    BenchTable {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

/// Parses and dispatches. Returns the process exit code: 0 on success,
/// 2 on usage errors, 1 otherwise.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match CliArgs::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, data } => cmd_gen_data(common, data),
        Command::TrainAux { common, data, steps } => cmd_train_aux(common, data, steps),
        Command::GenPseudo { common, data, aux } => cmd_gen_pseudo(common, data, aux),
        Command::Train { common, train } => cmd_train(common, train),
        Command::Evaluate { common, data, model, split } => cmd_evaluate(common, data, model, split),
        Command::VerifyTheorem1 { common, instances, grid_step, samples } => {
            cmd_verify_theorem1(common, instances, grid_step, samples)
        }
        Command::ExportWeights { common, data, model, scheme, split } => {
            cmd_export_weights(common, data, model, scheme, split)
        }
        Command::ErrorRates { common, data, model, split } => {
            cmd_error_rates(common, data, model, split)
        }
        Command::BenchTable { common, data, seeds, epochs } => {
            cmd_bench_table(common, data, seeds, epochs)
        }
    }
}

// ---------------------------------------------------------------------------
// Config resolution helpers
// ---------------------------------------------------------------------------

fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.data.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn out_dir(common: &CommonArgs, subcommand: &str) -> Result<PathBuf> {
    let dir = match &common.out {
        Some(dir) => dir.clone(),
        None => {
            let root = std::env::var_os(OUT_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from("out"));
            root.join(subcommand)
        }
    };
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn parse_rates(text: &str, num_slots: usize, field: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(',').collect();
    let rates: Vec<f64> = parts
        .iter()
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad rate '{p}' in --{field}")))
        })
        .collect::<Result<_>>()?;
    if rates.len() == 1 {
        Ok(vec![rates[0]; num_slots])
    } else if rates.len() == num_slots {
        Ok(rates)
    } else {
        Err(Error::Config(format!(
            "--{field} has {} values, expected 1 or {num_slots}",
            rates.len()
        )))
    }
}

fn apply_data_args(config: &mut NoiseConfig, args: &DataArgs) -> Result<()> {
    if let Some(preset) = &args.preset {
        *config = match preset.as_str() {
            "standard" => NoiseConfig { seed: config.seed, ..standard_noise_config() },
            "asymmetric" => NoiseConfig::asymmetric_benchmark(config.seed),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        };
    }
    if let Some(slots) = args.slots {
        config.num_slots = slots;
        config.vocab_sizes = vec![config.vocab_sizes.first().copied().unwrap_or(5); slots];
        let vr = config.vanilla_noise_rates.first().copied().unwrap_or(0.3);
        config.vanilla_noise_rates = vec![vr; slots];
        if let Some(pr) = &config.pseudo_noise_rates {
            let p = pr.first().copied().unwrap_or(0.1);
            config.pseudo_noise_rates = Some(vec![p; slots]);
        }
    }
    if let Some(vocab) = args.vocab {
        config.vocab_sizes = vec![vocab; config.num_slots];
    }
    if let Some(d) = args.context_dim {
        config.context_dim = d;
    }
    if let Some(n) = args.clean_size {
        config.clean_size = n;
    }
    if let Some(n) = args.train_size {
        config.train_size = n;
    }
    if let Some(n) = args.validation_size {
        config.validation_size = n;
    }
    if let Some(n) = args.test_size {
        config.test_size = n;
    }
    if let Some(text) = &args.vanilla_noise {
        config.vanilla_noise_rates = parse_rates(text, config.num_slots, "vanilla-noise")?;
    }
    if let Some(text) = &args.pseudo_noise {
        config.pseudo_noise_rates = if text == "none" {
            None
        } else {
            Some(parse_rates(text, config.num_slots, "pseudo-noise")?)
        };
    }
    Ok(())
}

/// The default corpus recipe, spelled out so presets are explicit.
pub fn standard_noise_config() -> NoiseConfig {
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
        label_model: Default::default(),
    }
}

fn apply_train_args(config: &mut ExperimentConfig, args: &TrainArgs) -> Result<()> {
    if let Some(path) = &args.data {
        config.inputs.data = Some(path.clone());
    }
    if let Some(text) = &args.scheme {
        config.train.scheme = text.parse()?;
    }
    if let Some(alpha) = args.init_alpha {
        config.train.init_alpha = Some(alpha);
    }
    if let Some(v) = args.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = args.train_batch {
        config.train.train_batch = v;
    }
    if let Some(v) = args.meta_batch {
        config.train.meta_batch = v;
    }
    if let Some(v) = args.interim_lr {
        config.train.interim_lr = v;
    }
    if let Some(v) = args.primary_lr {
        config.train.primary_peak_lr = v;
    }
    if let Some(v) = args.meta_lr {
        config.train.meta_lr = v;
    }
    if let Some(v) = args.weighting_hidden {
        config.train.weighting_hidden_dim = v;
    }
    Ok(())
}

fn load_corpus(config: &ExperimentConfig) -> Result<Corpus> {
    let path = config
        .inputs
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("no corpus: pass --data or set inputs.data".into()))?;
    Corpus::load(path)
}

fn require_path(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config(format!("no {what}: pass --{flag}")))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_gen_data(common: CommonArgs, data: DataArgs) -> Result<()> {
    let mut config = resolve_config(&common)?;
    apply_data_args(&mut config.data, &data)?;
    if let Some(seed) = common.seed {
        config.data.seed = seed;
    }
    let dir = out_dir(&common, "gen-data")?;
    let corpus = generate_corpus(&config.data)?;
    corpus.save(&dir.join("corpus.jsonl"))?;
    config.save(&dir.join("resolved-config.toml"))?;
    println!(
        "wrote {} ({} clean / {} train / {} validation / {} test samples)",
        dir.join("corpus.jsonl").display(),
        corpus.clean.len(),
        corpus.train.len(),
        corpus.validation.len(),
        corpus.test.len()
    );
    Ok(())
}

fn cmd_train_aux(common: CommonArgs, data: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(steps) = steps {
        config.train.aux.steps = steps;
    }
    let dir = out_dir(&common, "train-aux")?;
    let corpus = load_corpus(&config)?;
    let aux_cfg = crate::models::AuxTrainConfig {
        arch: config.train.arch,
        seed: crate::data::derive_seed(config.train.seed, 35, 0),
        ..config.train.aux.clone()
    };
    let outcome = train_auxiliary(&corpus.clean, &corpus.schema, corpus.config.context_dim, &aux_cfg)?;
    outcome.model.save_with_schema(&dir.join("aux-model.json"), &corpus.schema)?;
    let mut csv = String::from("step,loss\n");
    for (i, loss) in outcome.step_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{loss}\n"));
    }
    fs::write(dir.join("aux-losses.csv"), csv)?;
    config.save(&dir.join("resolved-config.toml"))?;
    let metrics = evaluate(&outcome.model, &corpus.validation)?;
    println!("auxiliary model: validation jga={:.4} jta={:.4} sa={:.4}", metrics.jga, metrics.jta, metrics.sa);
    Ok(())
}

fn cmd_gen_pseudo(common: CommonArgs, data: Option<PathBuf>, aux: Option<PathBuf>) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(path) = aux {
        config.inputs.aux = Some(path);
    }
    let dir = out_dir(&common, "gen-pseudo")?;
    let mut corpus = load_corpus(&config)?;
    let aux_path = require_path(&config.inputs.aux, "auxiliary model", "aux")?;
    let aux_model = PrimaryModel::load(&aux_path)?;
    let mut train = std::mem::take(&mut corpus.train);
    generate_pseudo_labels(&aux_model, &mut train)?;
    corpus.train = train;
    corpus.save(&dir.join("corpus.jsonl"))?;
    config.save(&dir.join("resolved-config.toml"))?;
    println!("wrote {} with pseudo labels", dir.join("corpus.jsonl").display());
    Ok(())
}

fn write_run_outputs(dir: &Path, corpus: &Corpus, outcome: &TrainOutcome) -> Result<()> {
    outcome.model.save_with_schema(&dir.join("model.json"), &corpus.schema)?;
    outcome.best_model.save_with_schema(&dir.join("best-model.json"), &corpus.schema)?;
    outcome.scheme.save(&dir.join("scheme.json"))?;
    outcome.best_scheme.save(&dir.join("best-scheme.json"))?;

    let mut runlog = fs::File::create(dir.join("runlog.jsonl"))?;
    for record in &outcome.log.steps {
        serde_json::to_writer(&mut runlog, record)?;
        runlog.write_all(b"\n")?;
    }
    runlog.flush()?;

    let mut epochs = String::from("epoch,val_jga,val_jta,val_sa,test_jga,test_jta,test_sa\n");
    for e in &outcome.log.epochs {
        epochs.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            e.epoch, e.validation.jga, e.validation.jta, e.validation.sa, e.test.jga, e.test.jta,
            e.test.sa
        ));
    }
    fs::write(dir.join("epochs.csv"), epochs)?;

    // Physical wall-clock: diagnostics only, excluded from the
    // reproducibility contract.
    let mut timing = String::from("epoch,wall_seconds\n");
    for (i, w) in outcome.log.epoch_wall_seconds.iter().enumerate() {
        timing.push_str(&format!("{},{w}\n", i + 1));
    }
    fs::write(dir.join("timing.csv"), timing)?;

    if !outcome.log.aux_step_losses.is_empty() {
        let mut csv = String::from("step,loss\n");
        for (i, loss) in outcome.log.aux_step_losses.iter().enumerate() {
            csv.push_str(&format!("{i},{loss}\n"));
        }
        fs::write(dir.join("aux-losses.csv"), csv)?;
    }

    let final_val = evaluate(&outcome.model, &corpus.validation)?;
    let final_test = evaluate(&outcome.model, &corpus.test)?;
    let best_val = evaluate(&outcome.best_model, &corpus.validation)?;
    let best_test = evaluate(&outcome.best_model, &corpus.test)?;
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "best_validation_jga": outcome.best_validation_jga,
        "grad_evals_per_step": outcome.log.grad_evals_per_step,
        "total_grad_evals": outcome.log.total_grad_evals,
        "final": { "validation": final_val, "test": final_test },
        "best": { "validation": best_val, "test": best_test },
    });
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn cmd_train(common: CommonArgs, args: TrainArgs) -> Result<()> {
    let mut config = resolve_config(&common)?;
    apply_train_args(&mut config, &args)?;
    let dir = out_dir(&common, "train")?;
    let corpus = load_corpus(&config)?;
    let outcome = match config.train.scheme {
        SchemeSpec::Fixed(alpha) => train_fixed_alpha(&corpus, &config.train, alpha)?,
        _ => train_meta(&corpus, &config.train)?,
    };
    write_run_outputs(&dir, &corpus, &outcome)?;
    config.save(&dir.join("resolved-config.toml"))?;
    let best_test = evaluate(&outcome.best_model, &corpus.test)?;
    println!(
        "scheme {} best epoch {}: validation jga={:.4}, test jga={:.4} jta={:.4} sa={:.4}",
        config.train.scheme,
        outcome.best_epoch,
        outcome.best_validation_jga,
        best_test.jga,
        best_test.jta,
        best_test.sa
    );
    Ok(())
}

fn cmd_evaluate(
    common: CommonArgs,
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    split: String,
) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(path) = model {
        config.inputs.model = Some(path);
    }
    let dir = out_dir(&common, "evaluate")?;
    let corpus = load_corpus(&config)?;
    let model_path = require_path(&config.inputs.model, "model checkpoint", "model")?;
    let model = PrimaryModel::load(&model_path)?;
    let split: Split = split.parse()?;
    let metrics = evaluate(&model, corpus.split(split))?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)? + "\n",
    )?;
    config.save(&dir.join("resolved-config.toml"))?;
    print_metrics(split, &metrics);
    Ok(())
}

fn print_metrics(split: Split, metrics: &MetricsReport) {
    println!("split={}", split.as_str());
    println!("jga={:.6}", metrics.jga);
    println!("jta={:.6}", metrics.jta);
    println!("sa={:.6}", metrics.sa);
}

fn cmd_verify_theorem1(
    common: CommonArgs,
    instances: Option<usize>,
    grid_step: Option<f64>,
    samples: Option<usize>,
) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(n) = instances {
        config.analysis.instances = n;
    }
    if let Some(step) = grid_step {
        config.analysis.grid_step = step;
    }
    if let Some(n) = samples {
        config.analysis.instance.samples = n;
    }
    let dir = out_dir(&common, "verify-theorem1")?;
    let reports = verify_theorem1(
        config.analysis.instances,
        &config.analysis.instance,
        config.analysis.grid_step,
        config.data.seed,
    )?;
    let mut file = fs::File::create(dir.join("theorem1.jsonl"))?;
    for report in &reports {
        serde_json::to_writer(&mut file, report)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    config.save(&dir.join("resolved-config.toml"))?;

    let held = reports.iter().filter(|r| r.holds).count();
    let strict = reports.iter().filter(|r| r.margin > 0.0).count();
    let spread_qualified: Vec<_> = reports.iter().filter(|r| r.noise_spread >= 0.2).collect();
    let strict_qualified = spread_qualified.iter().filter(|r| r.margin > 0.0).count();
    println!(
        "dominance holds on {held}/{} instances; strict margin on {strict}; \
         among {} instances with noise spread >= 0.2, strict on {strict_qualified}",
        reports.len(),
        spread_qualified.len()
    );
    Ok(())
}

fn cmd_export_weights(
    common: CommonArgs,
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    scheme: Option<PathBuf>,
    split: Option<String>,
) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(path) = model {
        config.inputs.model = Some(path);
    }
    if let Some(path) = scheme {
        config.inputs.scheme = Some(path);
    }
    if let Some(text) = split {
        config.analysis.export_split = text.parse()?;
    }
    let dir = out_dir(&common, "export-weights")?;
    let corpus = load_corpus(&config)?;
    let model_path = require_path(&config.inputs.model, "model checkpoint", "model")?;
    let scheme_path = require_path(&config.inputs.scheme, "scheme checkpoint", "scheme")?;
    let model = PrimaryModel::load(&model_path)?;
    let scheme = WeightingScheme::load(&scheme_path)?;
    let split = config.analysis.export_split;
    let report = weight_distribution_report(&scheme, corpus.split(split), &model)?;

    let mut csv = String::from(
        "sample_id,slot,pseudo_weight,vanilla_weight,vanilla_loss,pseudo_loss,scale,beta\n",
    );
    for r in &report.records {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.sample_id, r.slot, r.pseudo_weight, r.vanilla_weight, r.vanilla_loss, r.pseudo_loss,
            r.scale, r.beta
        ));
    }
    fs::write(dir.join("weights.csv"), csv)?;

    let mut hist = String::from("slot,bin_lo,bin_hi,count\n");
    for summary in &report.per_slot {
        for (b, count) in summary.histogram.iter().enumerate() {
            let lo = b as f64 / HISTOGRAM_BINS as f64;
            let hi = (b + 1) as f64 / HISTOGRAM_BINS as f64;
            hist.push_str(&format!("{},{lo},{hi},{count}\n", summary.slot));
        }
    }
    fs::write(dir.join("weights-hist.csv"), hist)?;

    if let Some(scale_hist) = &report.scale_histogram {
        let mut hist = String::from("bin_lo,bin_hi,count\n");
        for (b, count) in scale_hist.iter().enumerate() {
            let lo = 2.0 * b as f64 / HISTOGRAM_BINS as f64;
            let hi = 2.0 * (b + 1) as f64 / HISTOGRAM_BINS as f64;
            hist.push_str(&format!("{lo},{hi},{count}\n"));
        }
        fs::write(dir.join("scale-hist.csv"), hist)?;
    }

    let mut summary = String::from("slot,mean,min,max\n");
    for s in &report.per_slot {
        summary.push_str(&format!("{},{},{},{}\n", s.slot, s.mean, s.min, s.max));
    }
    fs::write(dir.join("weights-summary.csv"), summary)?;
    config.save(&dir.join("resolved-config.toml"))?;
    println!("wrote {} weight records", report.records.len());
    Ok(())
}

fn cmd_error_rates(
    common: CommonArgs,
    data: Option<PathBuf>,
    model: Option<PathBuf>,
    split: String,
) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(path) = model {
        config.inputs.model = Some(path);
    }
    let dir = out_dir(&common, "error-rates")?;
    let corpus = load_corpus(&config)?;
    let model_path = require_path(&config.inputs.model, "model checkpoint", "model")?;
    let model = PrimaryModel::load(&model_path)?;
    let split: Split = split.parse()?;
    let rates = per_slot_error_rates(&model, corpus.split(split))?;
    let mut csv = String::from("slot,name,error_rate\n");
    for (i, rate) in rates.iter().enumerate() {
        csv.push_str(&format!("{i},{},{rate}\n", corpus.schema.slots[i].name));
    }
    fs::write(dir.join("error-rates.csv"), csv)?;
    config.save(&dir.join("resolved-config.toml"))?;
    println!("wrote per-slot error rates for {} slots", rates.len());
    Ok(())
}

fn cmd_bench_table(
    common: CommonArgs,
    data: Option<PathBuf>,
    seeds: Option<usize>,
    epochs: Option<usize>,
) -> Result<()> {
    let mut config = resolve_config(&common)?;
    if let Some(path) = data {
        config.inputs.data = Some(path);
    }
    if let Some(n) = seeds {
        config.analysis.bench_seeds = n;
    }
    if let Some(n) = epochs {
        config.train.epochs = n;
    }
    let dir = out_dir(&common, "bench-table")?;
    let corpus = load_corpus(&config)?;
    let rows = bench_rows();
    let seeds = config.analysis.bench_seeds;

    let mut table = Vec::new();
    for spec in rows {
        let mut sums = [0.0f64; 6];
        for i in 0..seeds {
            let run_config = TrainConfig {
                scheme: spec,
                seed: crate::data::derive_seed(config.train.seed, 41, i as u64),
                ..config.train.clone()
            };
            let outcome = match spec {
                SchemeSpec::Fixed(alpha) => train_fixed_alpha(&corpus, &run_config, alpha)?,
                _ => train_meta(&corpus, &run_config)?,
            };
            let val = evaluate(&outcome.best_model, &corpus.validation)?;
            let test = evaluate(&outcome.best_model, &corpus.test)?;
            for (slot, value) in
                [val.jga, val.jta, val.sa, test.jga, test.jta, test.sa].iter().enumerate()
            {
                sums[slot] += value;
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / seeds as f64).collect();
        table.push((spec.to_string(), means));
    }

    let header = ["scheme", "val_jga", "val_jta", "val_sa", "test_jga", "test_jta", "test_sa"];
    let mut csv = header.join(",") + "\n";
    for (name, means) in &table {
        csv.push_str(name);
        for m in means {
            csv.push_str(&format!(",{:.2}", 100.0 * m));
        }
        csv.push('\n');
    }
    fs::write(dir.join("bench.csv"), &csv)?;

    let mut text = format!("{:<12}", header[0]);
    for h in &header[1..] {
        text.push_str(&format!("{h:>10}"));
    }
    text.push('\n');
    for (name, means) in &table {
        text.push_str(&format!("{name:<12}"));
        for m in means {
            text.push_str(&format!("{:>10.2}", 100.0 * m));
        }
        text.push('\n');
    }
    fs::write(dir.join("bench.txt"), &text)?;
    config.save(&dir.join("resolved-config.toml"))?;
    print!("{text}");
    Ok(())
}

fn bench_rows() -> Vec<SchemeSpec> {
    let mut rows: Vec<SchemeSpec> =
        (0..=10).map(|k| SchemeSpec::Fixed(k as f64 / 10.0)).collect();
    rows.extend([SchemeSpec::S1, SchemeSpec::S2, SchemeSpec::S3, SchemeSpec::S3Decoupled]);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let config = ExperimentConfig::default();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn partial_config_files_fill_with_defaults() {
        let text = "[train]\nepochs = 3\nscheme = \"s1\"\n";
        let config: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(config.train.epochs, 3);
        assert_eq!(config.train.scheme, SchemeSpec::S1);
        assert_eq!(config.data.num_slots, 10);
    }

    #[test]
    fn rate_lists_parse() {
        assert_eq!(parse_rates("0.3", 3, "x").unwrap(), vec![0.3; 3]);
        assert_eq!(parse_rates("0.1,0.2,0.3", 3, "x").unwrap(), vec![0.1, 0.2, 0.3]);
        assert!(parse_rates("0.1,0.2", 3, "x").is_err());
        assert!(parse_rates("abc", 3, "x").is_err());
    }

    #[test]
    fn unknown_subcommand_exits_nonzero() {
        assert_eq!(run(["metassist", "frobnicate"]), 2);
        assert_eq!(run(["metassist", "train", "--no-such-flag"]), 2);
    }
}
