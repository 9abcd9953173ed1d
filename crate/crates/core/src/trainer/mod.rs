//! Training: per-sample gradient accumulation, Adam/SGD, projected dual
//! ascent on the constraint multipliers, early stopping on validation
//! macro-F1, and multi-start.

mod lagrangian;
mod metrics;
mod optim;
mod split;

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lagrangian::{
    violation_entries, DualRecord, LagrangianState, LambdaMode, PeriodAccumulator, ViolationEntry,
    Violations, DEFAULT_FIXED_LAMBDA,
};
pub use metrics::{f1_scores, F1Report};
pub use optim::{Optimizer, OptimizerKind};
pub use split::{split, stratified_folds, Split, SplitScheme};

use crate::constraints::{ConstraintReport, ConstraintSet, Lambdas};
use crate::error::{ModelError, NumError, TrainError};
use crate::model::{argmax, forward, total_loss, Checkpoint, ModelConfig, Params, RngState};
use crate::numcore::{Tape, Tensor};
use crate::treebank::{to_graph, Sample, TreeGraph, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without a validation macro-F1 improvement before stopping.
    pub patience: usize,
    pub multi_start: usize,
    pub lambda_mode: LambdaMode,
    /// Dual ascent step size η.
    pub dual_step: f64,
    /// Optimizer steps between dual updates; `None` means once per epoch.
    pub update_period: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            epochs: 30,
            batch_size: 16,
            patience: 5,
            multi_start: 1,
            lambda_mode: LambdaMode::Dual,
            dual_step: 0.1,
            update_period: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Setup(m.into()));
        if self.patience < 1 {
            return bad("patience must be >= 1");
        }
        if self.multi_start < 1 {
            return bad("multi_start must be >= 1");
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return bad("batch_size and epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.dual_step >= 0.0 && self.dual_step.is_finite()) {
            return bad("dual_step must be >= 0");
        }
        if self.update_period == Some(0) {
            return bad("update_period must be >= 1 step");
        }
        Ok(())
    }
}

/// Graphs and class indices of one split.
#[derive(Debug, Clone, Default)]
pub struct EncodedSplit {
    pub ids: Vec<String>,
    pub graphs: Vec<TreeGraph>,
    pub labels: Vec<usize>,
}

impl EncodedSplit {
    pub fn encode(samples: &[&Sample], vocab: &Vocabulary, class_names: &[String]) -> Result<Self, TrainError> {
        let mut out = Self::default();
        for s in samples {
            let label = class_names
                .iter()
                .position(|c| *c == s.label)
                .ok_or_else(|| TrainError::Setup(format!("unknown label {:?} in {}", s.label, s.id)))?;
            out.ids.push(s.id.clone());
            out.graphs.push(to_graph(&s.tree, vocab));
            out.labels.push(label);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

pub struct TrainInput<'a> {
    pub train: &'a EncodedSplit,
    pub val: &'a EncodedSplit,
    pub vocabulary: &'a Vocabulary,
    pub class_names: &'a [String],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_mean_violation: f64,
    pub train_violations: Vec<ViolationEntry>,
    pub val_macro_f1: f64,
    pub val_per_class_f1: Vec<f64>,
    pub val_mean_violation: f64,
    /// Multipliers in force at the end of the epoch.
    pub lambdas: Lambdas,
    /// Fraction of training samples with a degenerate cluster flag.
    pub degenerate_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub restart: usize,
    pub model_seed: u64,
    pub train_seed: u64,
    pub lambda_mode: LambdaMode,
    pub epochs: Vec<EpochLog>,
    pub dual_history: Vec<DualRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub best_val_mean_violation: f64,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub report: RunReport,
}

/// Evaluation of a parameter set on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub f1: F1Report,
    pub predictions: Vec<usize>,
    /// Mean over samples and (layer, constraint) pairs.
    pub mean_violation: f64,
    pub violations: Vec<ViolationEntry>,
    pub reports: Vec<ConstraintReport>,
}

fn mean_by_key(reports: &[ConstraintReport]) -> Violations {
    let mut sums: Violations = BTreeMap::new();
    for r in reports {
        for l in &r.layers {
            for (&k, &v) in &l.values {
                *sums.entry((l.layer, k)).or_default() += v;
            }
        }
    }
    let n = reports.len().max(1) as f64;
    sums.into_iter().map(|(k, v)| (k, v / n)).collect()
}

fn overall_mean(v: &Violations) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.values().sum::<f64>() / v.len() as f64
    }
}

/// Predictions, F1 and constraint values of `params` on `data`.
///
/// Constraints are measured with `set` when given (so unconstrained models
/// can be scored too), otherwise with the model's own constraint set.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &Params,
    data: &EncodedSplit,
    n_classes: usize,
    set: Option<&ConstraintSet>,
) -> Result<EvalSummary, ModelError> {
    let mut eval_cfg = cfg.clone();
    if let Some(s) = set {
        eval_cfg.constraint_set = Some(s.clone());
    }
    let results: Vec<(usize, ConstraintReport)> = data
        .graphs
        .par_iter()
        .map(|g| {
            let tape = Tape::new();
            let vars = params.on_tape(&tape);
            let trace = forward(g, &eval_cfg, &vars)?;
            let pred = argmax(trace.logits.value().data());
            let (_, report) = total_loss(&trace, 0, eval_cfg.constraint_set.as_ref(), &Lambdas::default())?;
            Ok((pred, report))
        })
        .collect::<Result<_, ModelError>>()?;
    let (predictions, reports): (Vec<usize>, Vec<ConstraintReport>) = results.into_iter().unzip();
    let f1 = f1_scores(&predictions, &data.labels, n_classes)
        .map_err(|e| ModelError::Config(e.to_string()))?;
    let by_key = mean_by_key(&reports);
    Ok(EvalSummary {
        f1,
        predictions,
        mean_violation: overall_mean(&by_key),
        violations: violation_entries(&by_key),
        reports,
    })
}

struct SampleResult {
    loss: f64,
    ce: f64,
    report: ConstraintReport,
    grads: Vec<Tensor>,
}

fn sample_step(
    cfg: &ModelConfig,
    params: &Params,
    graph: &TreeGraph,
    label: usize,
    lambdas: &Lambdas,
) -> Result<SampleResult, ModelError> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape);
    let trace = forward(graph, cfg, &vars)?;
    let ce = trace.logits.cross_entropy(label)?.item();
    let (loss, report) = total_loss(&trace, label, cfg.constraint_set.as_ref(), lambdas)?;
    let loss_value = loss.item();
    let grads = if loss_value.is_finite() {
        let g = tape.backward(loss)?;
        vars.all().into_iter().map(|v| g.wrt(v)).collect()
    } else {
        Vec::new()
    };
    Ok(SampleResult {
        loss: loss_value,
        ce,
        report,
        grads,
    })
}

/// Model selection order: higher validation macro-F1 wins; on an exact F1 tie
/// the lower mean constraint violation wins; full ties keep the earlier one.
pub fn improves(candidate: (f64, f64), incumbent: (f64, f64)) -> bool {
    candidate.0 > incumbent.0 || (candidate.0 == incumbent.0 && candidate.1 < incumbent.1)
}

/// One training run from `seed`-derived initialization.
pub fn train(
    input: &TrainInput<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if input.train.is_empty() || input.val.is_empty() {
        return Err(TrainError::Setup("train and validation splits must be nonempty".into()));
    }
    let n_classes = input.class_names.len();
    if n_classes != model_cfg.n_classes {
        return Err(TrainError::Setup(format!(
            "{} class names for a model with {} classes",
            n_classes, model_cfg.n_classes
        )));
    }

    let mut params = Params::init(model_cfg)?;
    let mut optimizer = Optimizer::new(train_cfg.optimizer, train_cfg.learning_rate, &params.tensors());
    let layers = model_cfg.constrained_layers();
    let kinds = model_cfg
        .constraint_set
        .as_ref()
        .map(|s| s.kinds.clone())
        .unwrap_or_default();
    let initial = train_cfg
        .lambda_mode
        .initial(&layers, &kinds)
        .map_err(TrainError::Setup)?;
    let dual = matches!(train_cfg.lambda_mode, LambdaMode::Dual);
    let mut lagrangian = LagrangianState::new(initial, train_cfg.dual_step, train_cfg.update_period);
    let mut period = PeriodAccumulator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);

    let snapshot = |params: &Params, lambdas: &Lambdas, rng: &ChaCha8Rng, epoch: usize| Checkpoint {
        config: model_cfg.clone(),
        vocabulary: input.vocabulary.clone(),
        vocabulary_hash: input.vocabulary.hash(),
        class_names: input.class_names.to_vec(),
        params: params.clone(),
        lambdas: lambdas.clone(),
        rng: RngState::capture(train_cfg.seed, rng),
        epoch,
    };

    let mut last_good = snapshot(&params, &lagrangian.lambdas, &rng, 0);
    let mut best: Option<(f64, f64, Checkpoint)> = None;
    let mut epochs_log = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..input.train.len()).collect();

    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut ce_sum = 0.0;
        let mut epoch_reports = Vec::with_capacity(order.len());
        for batch in order.chunks(train_cfg.batch_size) {
            let lambdas = &lagrangian.lambdas;
            let results: Vec<SampleResult> = batch
                .par_iter()
                .map(|&i| {
                    sample_step(model_cfg, &params, &input.train.graphs[i], input.train.labels[i], lambdas)
                })
                .collect::<Result<_, _>>()
                .map_err(|e| match e {
                    ModelError::Num(NumError::NonFinite { .. }) => TrainError::Diverged {
                        epoch,
                        step,
                        loss: f64::NAN,
                        last_good: Box::new(last_good.clone()),
                    },
                    other => other.into(),
                })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads: Vec<Tensor> = params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect();
            let mut batch_reports = Vec::with_capacity(results.len());
            for r in results {
                if !r.loss.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        step,
                        loss: r.loss,
                        last_good: Box::new(last_good),
                    });
                }
                loss_sum += r.loss;
                ce_sum += r.ce;
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += scale * x;
                    }
                }
                batch_reports.push(r.report);
            }
            optimizer.step(&mut params.tensors_mut(), &grads);
            step += 1;
            if !params.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    loss: f64::NAN,
                    last_good: Box::new(last_good),
                });
            }
            if !layers.is_empty() {
                period.push_batch(mean_by_key(&batch_reports));
            }
            epoch_reports.extend(batch_reports);
            if dual && train_cfg.update_period.is_some_and(|p| step.is_multiple_of(p)) {
                let (mean, end) = period.take();
                lagrangian.dual_update(&mean, &end, step, epoch);
            }
        }
        if dual && train_cfg.update_period.is_none() && !period.is_empty() {
            let (mean, end) = period.take();
            lagrangian.dual_update(&mean, &end, step, epoch);
        }

        let eval = evaluate(model_cfg, &params, input.val, n_classes, None)?;
        let train_violations = mean_by_key(&epoch_reports);
        let n = input.train.len() as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_ce: ce_sum / n,
            train_mean_violation: overall_mean(&train_violations),
            train_violations: violation_entries(&train_violations),
            val_macro_f1: eval.f1.macro_f1,
            val_per_class_f1: eval.f1.per_class.clone(),
            val_mean_violation: eval.mean_violation,
            lambdas: lagrangian.lambdas.clone(),
            degenerate_fraction: epoch_reports.iter().filter(|r| r.has_degenerate()).count() as f64 / n,
        };
        debug!(
            "epoch {epoch}: loss {:.4} ce {:.4} val F1 {:.4} violation {:.4}",
            log.train_loss, log.train_ce, log.val_macro_f1, log.train_mean_violation
        );
        epochs_log.push(log);

        last_good = snapshot(&params, &lagrangian.lambdas, &rng, epoch);
        if best
            .as_ref()
            .is_none_or(|(f1, viol, _)| improves((eval.f1.macro_f1, eval.mean_violation), (*f1, *viol)))
        {
            best = Some((eval.f1.macro_f1, eval.mean_violation, last_good.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= train_cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_f1, best_violation, checkpoint) = best.expect("at least one epoch");
    info!(
        "seed {}: best epoch {} val macro-F1 {:.4}",
        train_cfg.seed, checkpoint.epoch, best_f1
    );
    Ok(TrainOutcome {
        report: RunReport {
            restart: 0,
            model_seed: model_cfg.seed,
            train_seed: train_cfg.seed,
            lambda_mode: train_cfg.lambda_mode.clone(),
            epochs: epochs_log,
            dual_history: lagrangian.history,
            best_epoch: checkpoint.epoch,
            best_val_macro_f1: best_f1,
            best_val_mean_violation: best_violation,
            stopped_early,
        },
        checkpoint,
    })
}

/// Restart `r` uses model and train seeds offset by `r`.
pub fn restart_configs(model_cfg: &ModelConfig, train_cfg: &TrainConfig, r: usize) -> (ModelConfig, TrainConfig) {
    let mut m = model_cfg.clone();
    let mut t = train_cfg.clone();
    m.seed = model_cfg.seed.wrapping_add(r as u64);
    t.seed = train_cfg.seed.wrapping_add(r as u64);
    (m, t)
}

/// Runs `train_cfg.multi_start` independent restarts in parallel and keeps
/// the best one under [`improves`] (full ties: lowest restart index).
pub fn train_multi_start(
    input: &TrainInput<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainOutcome, Vec<RunReport>), TrainError> {
    train_cfg.validate()?;
    let outcomes: Vec<TrainOutcome> = (0..train_cfg.multi_start)
        .into_par_iter()
        .map(|r| {
            let (m, t) = restart_configs(model_cfg, train_cfg, r);
            let mut out = train(input, &m, &t)?;
            out.report.restart = r;
            Ok(out)
        })
        .collect::<Result<_, TrainError>>()?;
    let reports: Vec<RunReport> = outcomes.iter().map(|o| o.report.clone()).collect();
    let mut best = 0;
    for (i, o) in outcomes.iter().enumerate() {
        let b = &outcomes[best].report;
        if improves(
            (o.report.best_val_macro_f1, o.report.best_val_mean_violation),
            (b.best_val_macro_f1, b.best_val_mean_violation),
        ) {
            best = i;
        }
    }
    let chosen = outcomes.into_iter().nth(best).expect("restart exists");
    Ok((chosen, reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub lambda: f64,
    pub val_macro_f1: f64,
    pub val_mean_violation: f64,
}

/// Fixed-coefficient runs over a grid of uniform multipliers.
pub fn calibrate_fixed(
    input: &TrainInput<'_>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    grid: &[f64],
) -> Result<Vec<CalibrationPoint>, TrainError> {
    grid.par_iter()
        .map(|&lambda| {
            let mut t = train_cfg.clone();
            t.lambda_mode = LambdaMode::Fixed(vec![lambda]);
            let out = train(input, model_cfg, &t)?;
            Ok(CalibrationPoint {
                lambda,
                val_macro_f1: out.report.best_val_macro_f1,
                val_mean_violation: out.report.best_val_mean_violation,
            })
        })
        .collect()
}
