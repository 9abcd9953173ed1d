//! End-to-end runs: config loading with defaults filled in, data loading or
//! generation, splitting, training, evaluation, fragment extraction, and the
//! on-disk run directory.
//!
//! A run directory holds `config.json` (fully materialized), `checkpoint.json`,
//! `run_report.json`, `metrics.csv`, `fragments.jsonl`, `fragments.txt` and
//! `metadata.json`. Wall-clock data goes to `metadata.json` only, so every
//! other file is a pure function of the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constraints::{ConstraintKind, ConstraintSet};
use crate::error::{KernelError, MetricsError, ModelError, TrainError, TreebankError};
use crate::fragments::{aggregate, extract_from_checkpoint, ExtractOptions, FragmentReport};
use crate::kernels::{KernelConfig, KernelKind};
use crate::model::{Checkpoint, ModelConfig};
use crate::synth::{SynthCorpusSpec, SynthError};
use crate::trainer::{
    evaluate, split, train_multi_start, EncodedSplit, EvalSummary, LambdaMode, RunReport, Split,
    SplitScheme, TrainConfig, TrainInput,
};
use crate::treebank::{class_names, dataset_hash, load_jsonl, Sample, Vocabulary};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Treebank(#[from] TreebankError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    /// JSON-lines file of `{id, label, tree}` records.
    File { path: PathBuf },
    /// Planted-pattern corpus generated on the fly.
    Synthetic(SynthCorpusSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthCorpusSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FragmentOptions {
    pub extract: ExtractOptions,
    /// Class-unique fragments listed per class in `fragments.txt`.
    pub top: usize,
}

impl Default for FragmentOptions {
    fn default() -> Self {
        Self {
            extract: ExtractOptions::default(),
            top: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Master seed. [`ExperimentConfig::materialize`] copies it into the data,
    /// split, model and trainer seeds.
    pub seed: u64,
    pub data: DataSource,
    /// Trees above this many nodes are rejected at load time.
    pub max_nodes: usize,
    pub lowercase_tokens: bool,
    pub split: SplitScheme,
    /// The kernel whose fragment space the constraints target.
    pub kernel: KernelConfig,
    /// `false` trains plain GNN + DiffPool.
    pub constrained: bool,
    /// `None` means the default set for `kernel.kind`.
    pub constraints: Option<ConstraintSet>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fragments: FragmentOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSource::default(),
            max_nodes: 128,
            lowercase_tokens: false,
            split: SplitScheme::default(),
            kernel: KernelConfig::default(),
            constrained: true,
            constraints: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fragments: FragmentOptions::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Sets the master seed and everything derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Switches the kernel and resets the constraint kinds to that kernel's set.
    pub fn with_kernel(mut self, kind: KernelKind) -> Self {
        self.kernel.kind = kind;
        if let Some(set) = &mut self.constraints {
            set.kinds = ConstraintSet::for_kernel(kind).kinds;
        }
        self
    }

    /// Fills every derived field so the written config fully describes the
    /// run: seeds, the constraint set, and the model's constraint slot.
    /// Data-dependent sizes are filled in by [`run`].
    pub fn materialize(mut self) -> Result<Self, ExperimentError> {
        self.kernel.validate()?;
        let set = self
            .constraints
            .clone()
            .unwrap_or_else(|| ConstraintSet::for_kernel(self.kernel.kind));
        set.validate().map_err(ExperimentError::Config)?;
        self.constraints = Some(set.clone());
        self.model.constraint_set = self.constrained.then_some(set);
        self.model.seed = self.seed;
        self.train.seed = self.seed;
        if let DataSource::Synthetic(spec) = &mut self.data {
            spec.seed = self.seed;
        }
        if !(0.0..1.0).contains(&self.fragments.extract.threshold) || self.fragments.extract.threshold == 0.0 {
            return Err(ExperimentError::Config(format!(
                "fragment threshold {} outside (0, 1)",
                self.fragments.extract.threshold
            )));
        }
        self.train.validate()?;
        Ok(self)
    }
}

/// Loads or generates the samples described by `cfg`.
pub fn load_samples(cfg: &ExperimentConfig) -> Result<Vec<Sample>, ExperimentError> {
    let mut samples = match &cfg.data {
        DataSource::File { path } => load_jsonl(path, cfg.max_nodes, cfg.lowercase_tokens)?,
        DataSource::Synthetic(spec) => spec.generate()?,
    };
    if let DataSource::Synthetic(_) = cfg.data {
        for s in &samples {
            s.tree.check_size(cfg.max_nodes)?;
        }
        if cfg.lowercase_tokens {
            for s in &mut samples {
                s.tree.lowercase_leaves();
            }
        }
    }
    if samples.is_empty() {
        return Err(ExperimentError::Config("dataset is empty".into()));
    }
    Ok(samples)
}

/// Everything one fold produces.
#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: Checkpoint,
    pub report: RunReport,
    pub restarts: Vec<RunReport>,
    pub test: Option<EvalSummary>,
    pub fragments: FragmentReport,
    pub occurrences: usize,
}

/// Serialized `run_report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fold: usize,
    pub dataset_hash: String,
    pub vocabulary_hash: String,
    pub class_names: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub report: RunReport,
    pub restarts: Vec<RunReport>,
    pub test_macro_f1: Option<f64>,
    pub test_per_class_f1: Option<Vec<f64>>,
    pub test_mean_violation: Option<f64>,
    pub fragment_rates: crate::fragments::ValidityRates,
    pub fragment_report_hash: String,
}

fn labels_of(samples: &[Sample], classes: &[String]) -> Vec<usize> {
    samples
        .iter()
        .map(|s| classes.iter().position(|c| *c == s.label).expect("label is in class list"))
        .collect()
}

fn pick<'a>(samples: &'a [Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| &samples[i]).collect()
}

/// Trains and evaluates one split. `cfg` must be materialized.
pub fn run_fold(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    classes: &[String],
    fold: usize,
    sp: &Split,
) -> Result<FoldResult, ExperimentError> {
    let train_s = pick(samples, &sp.train);
    let val_s = pick(samples, &sp.val);
    let test_s = pick(samples, &sp.test);
    let vocab = Vocabulary::build(train_s.iter().map(|s| &s.tree), cfg.lowercase_tokens);
    let train = EncodedSplit::encode(&train_s, &vocab, classes)?;
    let val = EncodedSplit::encode(&val_s, &vocab, classes)?;
    let mut model = cfg.model.clone();
    model.vocab_size = vocab.size();
    model.n_classes = classes.len();
    let input = TrainInput {
        train: &train,
        val: &val,
        vocabulary: &vocab,
        class_names: classes,
    };
    let (outcome, restarts) = train_multi_start(&input, &model, &cfg.train)?;
    let test = if test_s.is_empty() {
        None
    } else {
        let enc = EncodedSplit::encode(&test_s, &vocab, classes)?;
        Some(evaluate(
            &outcome.checkpoint.config,
            &outcome.checkpoint.params,
            &enc,
            classes.len(),
            cfg.constraints.as_ref(),
        )?)
    };
    let occurrences = extract_from_checkpoint(&outcome.checkpoint, samples, &cfg.fragments.extract)?;
    let fragments = FragmentReport::build(
        aggregate(&occurrences),
        classes,
        cfg.fragments.extract.threshold,
        cfg.fragments.top,
    )?;
    Ok(FoldResult {
        fold,
        checkpoint: outcome.checkpoint,
        report: outcome.report,
        restarts,
        test,
        occurrences: occurrences.len(),
        fragments,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// Per-epoch metrics of one run: fixed columns, then one violation and one
/// multiplier column per (layer, constraint).
pub fn write_metrics_csv(path: &Path, report: &RunReport) -> Result<(), ExperimentError> {
    let keys: Vec<(usize, ConstraintKind)> = report
        .epochs
        .first()
        .map(|e| e.train_violations.iter().map(|v| (v.layer, v.constraint)).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = [
        "epoch",
        "train_loss",
        "train_ce",
        "train_mean_violation",
        "val_macro_f1",
        "val_mean_violation",
        "degenerate_fraction",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for (l, k) in &keys {
        header.push(format!("violation_l{l}_{k}"));
    }
    for (l, k) in &keys {
        header.push(format!("lambda_l{l}_{k}"));
    }
    w.write_record(&header)?;
    for e in &report.epochs {
        let mut row = vec![
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.train_ce.to_string(),
            e.train_mean_violation.to_string(),
            e.val_macro_f1.to_string(),
            e.val_mean_violation.to_string(),
            e.degenerate_fraction.to_string(),
        ];
        for (l, k) in &keys {
            let v = e
                .train_violations
                .iter()
                .find(|v| v.layer == *l && v.constraint == *k)
                .map_or(0.0, |v| v.value);
            row.push(v.to_string());
        }
        for (l, k) in &keys {
            row.push(e.lambdas.get(*l, *k).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Writes `fragments.jsonl` (one record per line) and `fragments.txt`.
pub fn write_fragments(dir: &Path, report: &FragmentReport, top: usize) -> Result<(), ExperimentError> {
    let jsonl = dir.join("fragments.jsonl");
    let mut buf = Vec::new();
    for r in &report.records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    fs::write(&jsonl, buf).map_err(io_err(&jsonl))?;
    let txt = dir.join("fragments.txt");
    fs::write(&txt, report.render_text(top)).map_err(io_err(&txt))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<(), ExperimentError> {
    write_json(path, checkpoint)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    if ck.vocabulary.hash() != ck.vocabulary_hash {
        return Err(ExperimentError::Config(format!(
            "{}: vocabulary hash mismatch",
            path.display()
        )));
    }
    Ok(ck)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    started_unix_ms: u128,
    finished_unix_ms: u128,
    seconds: f64,
    version: String,
}

fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

/// Result of [`run`]: the materialized config and one entry per fold.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub folds: Vec<FoldResult>,
}

/// Runs the experiment and writes its run directory under `out`.
///
/// A single split writes directly into `out`; several splits write
/// `out/fold-<i>/` each, plus `config.json` and `metadata.json` at the top.
pub fn run(cfg: ExperimentConfig, out: &Path) -> Result<RunOutput, ExperimentError> {
    let started = unix_ms();
    let clock = Instant::now();
    let cfg = cfg.materialize()?;
    let samples = load_samples(&cfg)?;
    let classes = class_names(&samples);
    if classes.len() < 2 {
        return Err(MetricsError::Classes(classes.len()).into());
    }
    let labels = labels_of(&samples, &classes);
    let splits = split(&labels, &cfg.split, cfg.seed)?;
    let hash = dataset_hash(&samples);
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_json(&out.join("config.json"), &cfg)?;

    let mut folds = Vec::with_capacity(splits.len());
    for (i, sp) in splits.iter().enumerate() {
        let dir = if splits.len() == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("fold-{i}"))
        };
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        info!("fold {i}: {} train / {} val / {} test", sp.train.len(), sp.val.len(), sp.test.len());
        let res = run_fold(&cfg, &samples, &classes, i, sp)?;
        save_checkpoint(&dir.join("checkpoint.json"), &res.checkpoint)?;
        write_metrics_csv(&dir.join("metrics.csv"), &res.report)?;
        write_fragments(&dir, &res.fragments, cfg.fragments.top)?;
        let summary = RunSummary {
            fold: i,
            dataset_hash: hash.clone(),
            vocabulary_hash: res.checkpoint.vocabulary_hash.clone(),
            class_names: classes.clone(),
            n_train: sp.train.len(),
            n_val: sp.val.len(),
            n_test: sp.test.len(),
            report: res.report.clone(),
            restarts: res.restarts.clone(),
            test_macro_f1: res.test.as_ref().map(|t| t.f1.macro_f1),
            test_per_class_f1: res.test.as_ref().map(|t| t.f1.per_class.clone()),
            test_mean_violation: res.test.as_ref().map(|t| t.mean_violation),
            fragment_rates: res.fragments.rates,
            fragment_report_hash: res.fragments.hash.clone(),
        };
        write_json(&dir.join("run_report.json"), &summary)?;
        folds.push(res);
    }
    write_json(
        &out.join("metadata.json"),
        &Metadata {
            started_unix_ms: started,
            finished_unix_ms: unix_ms(),
            seconds: clock.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        },
    )?;
    Ok(RunOutput { config: cfg, folds })
}

/// Applies a `--lambda-mode` style override.
pub fn parse_lambda_mode(s: &str) -> Result<LambdaMode, ExperimentError> {
    s.parse().map_err(ExperimentError::Config)
}
