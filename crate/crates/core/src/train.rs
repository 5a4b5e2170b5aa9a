//! Supervised fine-tuning with Adam, periodic validation, early stopping and
//! accuracy-curve capture.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{DatasetSplit, LabelVector, PreferenceRecord};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{ForwardMode, Model, ModelError};
use crate::numeric::{adam_step, AdamConfig, AdamState, NumericError, Tape, Tensor};
use crate::tokenizer::{format_input, Batch, TokenSequence, TokenizerError};

pub const EVAL_BATCH_SIZE: usize = 64;

/// Work units (token positions touched) per simulated second under
/// [`Clock::Work`]. A training position costs three units (forward plus
/// backward), an evaluation position one.
pub const WORK_UNITS_PER_SECOND: f64 = 1e5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model has no LoRA adapters attached")]
    NoAdapters,
    #[error("training set is empty")]
    EmptyTrain,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("non-finite loss at step {step} (epoch {epoch}, batch {batch}, first example {first_example}): {detail}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        batch: usize,
        first_example: usize,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("curve export failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Source of the `wall_seconds` column and of the time budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Real elapsed time.
    #[default]
    Wall,
    /// Deterministic simulated time derived from the amount of work done,
    /// so repeated runs produce identical curves.
    Work,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub time_budget: Option<f64>,
    #[serde(default)]
    pub clock: Clock,
}

impl TrainConfig {
    pub fn new(learning_rate: f64, seed: u64) -> Self {
        Self {
            learning_rate,
            batch_size: 16,
            max_steps: 1000,
            eval_every: 50,
            patience: 3,
            min_delta: 1e-4,
            seed,
            time_budget: None,
            clock: Clock::Wall,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.min_delta >= 0.0) {
            return bad("min_delta must be nonnegative");
        }
        if let Some(t) = self.time_budget {
            if !(t > 0.0) {
                return bad("time_budget must be positive");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub wall_seconds: f64,
    pub step: usize,
    pub val_log_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub points: Vec<CurvePoint>,
    pub best_step: usize,
    pub best_val_log_loss: f64,
}

/// Whether `loss` beats `best` by more than `min_delta`.
fn improves(loss: f64, best: f64, min_delta: f64) -> bool {
    loss < best - min_delta
}

impl TrainingTrace {
    /// Appends `point`; it becomes the best when it improves on the current
    /// best by more than `min_delta`.
    pub fn push(&mut self, point: CurvePoint, min_delta: f64) {
        if self.points.is_empty() || improves(point.val_log_loss, self.best_val_log_loss, min_delta)
        {
            self.best_step = point.step;
            self.best_val_log_loss = point.val_log_loss;
        }
        self.points.push(point);
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.val_log_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointRecord {
    pub step: usize,
    pub model: Model,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    TimeBudget,
    EarlyStop,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint at the last evaluation that improved validation log loss
    /// by more than `min_delta`.
    pub best: CheckpointRecord,
    pub latest: CheckpointRecord,
    pub trace: TrainingTrace,
    pub stop: StopReason,
    pub steps: usize,
    /// Mean training cross-entropy of each step's batch, before its update.
    pub train_losses: Vec<f64>,
}

/// True iff the last `patience` evaluations all failed to improve, by more
/// than `min_delta`, on the best loss recorded before them. Sub-`min_delta`
/// gains do not move the best, matching `TrainingTrace::push`.
pub fn early_stop_check(trace: &TrainingTrace, patience: usize, min_delta: f64) -> bool {
    let losses = trace.losses();
    let Some((&first, rest)) = losses.split_first() else {
        return false;
    };
    let mut best = first;
    let mut stale = 0;
    for &l in rest {
        if improves(l, best, min_delta) {
            best = l;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    patience > 0 && stale >= patience
}

/// Tokenizes records at `max_len` and returns their one-hot labels alongside.
pub fn encode_records(
    records: &[PreferenceRecord],
    max_len: usize,
) -> Result<(Vec<TokenSequence>, Vec<LabelVector>), TrainError> {
    let seqs = records
        .iter()
        .map(|r| format_input(r, max_len))
        .collect::<Result<Vec<_>, _>>()?;
    let labels = records.iter().map(|r| r.label.encode()).collect();
    Ok((seqs, labels))
}

pub fn evaluate_sequences(
    model: &Model,
    seqs: &[TokenSequence],
    labels: &[LabelVector],
) -> Result<MetricsReport, TrainError> {
    let preds = model.predict(seqs, EVAL_BATCH_SIZE)?;
    Ok(metrics::evaluate(&preds, labels)?)
}

/// Eval-mode log loss and accuracy of `model` on `records`.
pub fn evaluate_checkpoint(
    model: &Model,
    records: &[PreferenceRecord],
) -> Result<MetricsReport, TrainError> {
    if records.is_empty() {
        return Err(TrainError::Metrics(MetricsError::Empty));
    }
    let (seqs, labels) = encode_records(records, model.config().max_len)?;
    evaluate_sequences(model, &seqs, &labels)
}

/// Fine-tunes `model` on the training split, validating on the validation
/// split. The test split is not touched.
pub fn train_sft(
    model: &Model,
    split: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let (train, validation) = (&split.train, &split.validation);
    if validation.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let max_len = model.config().max_len;
    let (train_seqs, train_labels) = encode_records(train, max_len)?;
    let (val_seqs, val_labels) = encode_records(validation, max_len)?;
    let val_work: usize = val_seqs.iter().map(|s| s.real_length).sum();
    train_with_evaluator(model, &train_seqs, &train_labels, cfg, |m| {
        Ok((evaluate_sequences(m, &val_seqs, &val_labels)?, val_work))
    })
}

/// Training loop with a pluggable validation step. `evaluate` returns the
/// validation report and the work units it consumed.
pub fn train_with_evaluator<F>(
    model: &Model,
    train_seqs: &[TokenSequence],
    train_labels: &[LabelVector],
    cfg: &TrainConfig,
    mut evaluate: F,
) -> Result<TrainOutcome, TrainError>
where
    F: FnMut(&Model) -> Result<(MetricsReport, usize), TrainError>,
{
    cfg.validate()?;
    if !model.has_adapters() {
        return Err(TrainError::NoAdapters);
    }
    if train_seqs.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if train_seqs.len() != train_labels.len() {
        return Err(TrainError::Metrics(MetricsError::LengthMismatch {
            preds: train_seqs.len(),
            labels: train_labels.len(),
        }));
    }

    let mut clock = RunClock::new(cfg.clock);
    let mut model = model.clone();
    let mut adam = AdamState::new(AdamConfig::with_learning_rate(cfg.learning_rate));
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);

    let mut trace = TrainingTrace::default();
    let mut train_losses = Vec::new();
    let (report, work) = evaluate(&model)?;
    clock.add_work(work);
    trace.push(clock.point(0, report), cfg.min_delta);
    let mut best = CheckpointRecord {
        step: 0,
        model: model.clone(),
        metrics: report,
    };

    let mut order: Vec<usize> = (0..train_seqs.len()).collect();
    let mut cursor = order.len();
    let mut epoch = 0;
    let mut step = 0;
    let mut last_eval = 0;
    let mut last_report = report;

    let stop = loop {
        if step >= cfg.max_steps {
            break StopReason::MaxSteps;
        }
        if cfg.time_budget.is_some_and(|b| clock.seconds() >= b) {
            break StopReason::TimeBudget;
        }
        if cursor >= order.len() {
            if step > 0 {
                epoch += 1;
            }
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let indices = &order[cursor..end];
        let batch_in_epoch = cursor / cfg.batch_size;
        cursor = end;

        let batch = Batch::from_sequences(train_seqs, indices);
        let mut targets = Vec::with_capacity(indices.len() * 3);
        for &i in indices {
            targets.extend_from_slice(&train_labels[i].0);
        }
        let targets = Tensor::new(vec![indices.len(), 3], targets)?;
        let diagnose = |detail: String| TrainError::NonFiniteLoss {
            step,
            epoch,
            batch: batch_in_epoch,
            first_example: indices[0],
            detail,
        };

        let loss = sgd_step(&mut model, &batch, &targets, &mut adam, &mut dropout_rng).map_err(
            |e| match e {
                TrainError::Numeric(e @ NumericError::NonFinite { .. }) => diagnose(e.to_string()),
                TrainError::Model(ModelError::Numeric(e @ NumericError::NonFinite { .. })) => {
                    diagnose(e.to_string())
                }
                other => other,
            },
        )?;
        if !loss.is_finite() {
            return Err(diagnose(format!("loss = {loss}")));
        }
        train_losses.push(loss);
        clock.add_work(3 * batch.len() * batch.width);
        step += 1;

        if step % cfg.eval_every == 0 {
            let (report, work) = evaluate(&model)?;
            clock.add_work(work);
            trace.push(clock.point(step, report), cfg.min_delta);
            last_eval = step;
            last_report = report;
            if trace.best_step == step {
                best = CheckpointRecord {
                    step,
                    model: model.clone(),
                    metrics: report,
                };
            }
            if early_stop_check(&trace, cfg.patience, cfg.min_delta) {
                break StopReason::EarlyStop;
            }
        }
    };

    if last_eval != step {
        let (report, work) = evaluate(&model)?;
        clock.add_work(work);
        trace.push(clock.point(step, report), cfg.min_delta);
        last_report = report;
        if trace.best_step == step {
            best = CheckpointRecord {
                step,
                model: model.clone(),
                metrics: report,
            };
        }
    }

    Ok(TrainOutcome {
        best,
        latest: CheckpointRecord {
            step,
            model,
            metrics: last_report,
        },
        trace,
        stop,
        steps: step,
        train_losses,
    })
}

fn sgd_step(
    model: &mut Model,
    batch: &Batch,
    targets: &Tensor,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let leaves = model.bind(&mut tape, true);
    let probs = model.forward_tape(&mut tape, &leaves, batch, ForwardMode::Train(rng))?;
    let loss = tape.cross_entropy_with_probs(probs, targets)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let grads: Vec<Option<Tensor>> = model
        .parameters()
        .iter()
        .zip(&leaves)
        .map(|(p, &v)| {
            if p.requires_grad {
                grads.get(v).cloned()
            } else {
                None
            }
        })
        .collect();
    adam_step(model.parameters_mut(), &grads, adam)?;
    Ok(value)
}

struct RunClock {
    kind: Clock,
    start: Instant,
    work: usize,
    last: Option<f64>,
}

impl RunClock {
    fn new(kind: Clock) -> Self {
        Self {
            kind,
            start: Instant::now(),
            work: 0,
            last: None,
        }
    }

    fn add_work(&mut self, units: usize) {
        self.work += units;
    }

    fn seconds(&self) -> f64 {
        match self.kind {
            Clock::Wall => self.start.elapsed().as_secs_f64(),
            Clock::Work => self.work as f64 / WORK_UNITS_PER_SECOND,
        }
    }

    /// Curve point stamped with the current time, nudged forward if needed so
    /// that timestamps strictly increase.
    fn point(&mut self, step: usize, report: MetricsReport) -> CurvePoint {
        let mut t = self.seconds();
        if let Some(prev) = self.last {
            if t <= prev {
                t = prev.next_up();
            }
        }
        self.last = Some(t);
        CurvePoint {
            wall_seconds: t,
            step,
            val_log_loss: report.log_loss,
            val_accuracy: report.accuracy,
        }
    }
}

/// Writes the curve as CSV `wall_seconds,step,val_log_loss,val_accuracy`.
pub fn export_curve<W: Write>(trace: &TrainingTrace, mut sink: W) -> Result<(), TrainError> {
    writeln!(sink, "wall_seconds,step,val_log_loss,val_accuracy")?;
    for p in &trace.points {
        writeln!(
            sink,
            "{},{},{},{}",
            p.wall_seconds, p.step, p.val_log_loss, p.val_accuracy
        )?;
    }
    sink.flush()?;
    Ok(())
}
