//! Sequential training over a task stream, buffer rehearsal, TAM routing
//! and evaluation in Class-IL, Task-IL and Oracle modes.

use serde::{Deserialize, Serialize};

use crate::buffer::{BufferEntry, ReservoirBuffer};
use crate::error::{Error, Result};
use crate::losses::{
    loss_consistency, loss_der_logit_replay, loss_pairwise_discrepancy, loss_task, loss_total, LossBreakdown,
    LossConfig, LossTerms,
};
use crate::metrics::{
    reliability_bins, routing_accuracy, tam_mean_activation, tam_similarity, task_probabilities, AccuracyMatrix,
    Calibration, ModeSummary, RunReport, TaskLoss,
};
use crate::model::{
    BoundNetwork, ClassifierInit, EmaConfig, ModelConfig, TamConfig, TamilModel, Trainable,
};
use crate::numerics::{argmax, softmax, Sgd, Tape, Tensor, Var};
use crate::seed::child_seed;
use crate::taskdata::{shuffled_batches, Batch, Example, TaskSpec, TaskStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain fine-tuning, no memory.
    Sgd,
    /// One pass over the union of all tasks.
    Joint,
    /// Experience replay with cross-entropy on buffered samples.
    Er,
    /// Replay with cross-entropy plus stored-logit matching.
    Derpp,
    Tamil,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Joint => "joint",
            Method::Er => "er",
            Method::Derpp => "derpp",
            Method::Tamil => "tamil",
        }
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::Derpp | Method::Tamil)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ClassIl,
    TaskIl,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub repr_dim: usize,
    pub tam: TamConfig,
    pub classifier_bias: bool,
    pub classifier_init: ClassifierInit,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ArchConfig {
            hidden: m.hidden,
            repr_dim: m.repr_dim,
            tam: m.tam,
            classifier_bias: m.classifier_bias,
            classifier_init: m.classifier_init,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub use_tams: bool,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Ignored by methods without a memory.
    pub buffer_capacity: usize,
    pub loss: LossConfig,
    /// Only used by `tamil`.
    pub ema: EmaConfig,
    pub seed: u64,
    pub model: ArchConfig,
    pub ece_bins: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Tamil,
            use_tams: true,
            epochs_per_task: 5,
            batch_size: 32,
            learning_rate: 0.03,
            buffer_capacity: 200,
            loss: LossConfig::default(),
            ema: EmaConfig::default(),
            seed: 0,
            model: ArchConfig::default(),
            ece_bins: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.method == Method::Tamil && !self.use_tams {
            return Err(Error::Config("method tamil requires use_tams".into()));
        }
        if self.method == Method::Joint && self.use_tams {
            return Err(Error::Config("method joint does not support use_tams".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.ece_bins == 0 {
            return Err(Error::Config("ece_bins must be >= 1".into()));
        }
        Sgd::new(self.learning_rate).map_err(|e| Error::Config(e.to_string()))?;
        self.loss.validate()?;
        self.ema.validate()?;
        self.model_config(1).validate()
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.model.hidden.clone(),
            repr_dim: self.model.repr_dim,
            use_tams: self.use_tams,
            tam: self.model.tam,
            classifier_bias: self.model.classifier_bias,
            classifier_init: self.model.classifier_init,
        }
    }

    pub fn ema_config(&self) -> Option<EmaConfig> {
        (self.method == Method::Tamil && self.ema.enabled).then_some(self.ema)
    }

    /// Whether offered buffer items carry the model's logits.
    fn stores_logits(&self) -> bool {
        match self.method {
            Method::Derpp => true,
            Method::Tamil => !self.ema.enabled,
            _ => false,
        }
    }

    pub fn build_model(&self, input_dim: usize) -> Result<TamilModel> {
        TamilModel::new(self.model_config(input_dim), self.ema_config(), self.seed)
    }

    pub fn build_buffer(&self) -> ReservoirBuffer {
        let capacity = if self.method.uses_buffer() { self.buffer_capacity } else { 0 };
        ReservoirBuffer::new(capacity, child_seed(self.seed, "buffer", 0))
    }
}

/// Matching criterion over a batch of representations: the TAM whose output
/// is closest to `r` in squared L2, lowest index on ties.
pub fn infer_tam(model: &TamilModel, r: &Tensor) -> Result<Vec<usize>> {
    model.net.route(r)
}

/// Logits of buffered samples, each gated by the TAM it is routed to.
fn buffer_logits(
    tape: &mut Tape,
    bound: &BoundNetwork,
    model: &TamilModel,
    x: &Tensor,
    use_tams: bool,
) -> Result<(Var, Option<Vec<usize>>)> {
    let xv = tape.constant(x.clone());
    let r = bound.represent(tape, xv)?;
    if !use_tams {
        return Ok((bound.classify(tape, r)?, None));
    }
    let routes = model.net.route(tape.value(r))?;
    Ok((bound.forward_routed(tape, r, &routes)?, Some(routes)))
}

fn sample_batch(buffer: &mut ReservoirBuffer, n: usize) -> Result<(Vec<BufferEntry>, Tensor, Vec<usize>)> {
    let entries = buffer.sample(n)?;
    let rows: Vec<&[f64]> = entries.iter().map(|e| e.features.as_slice()).collect();
    let x = Tensor::from_rows(&rows)?;
    let labels = entries.iter().map(|e| e.label).collect();
    Ok((entries, x, labels))
}

/// One optimization step on `batch`, with `current` naming the trainable
/// TAM when TAMs are in use.
fn train_step(
    model: &mut TamilModel,
    batch: &Batch,
    current: Option<usize>,
    buffer: &mut ReservoirBuffer,
    cfg: &TrainConfig,
    sgd: &Sgd,
) -> Result<LossBreakdown> {
    let use_tams = current.is_some();
    let mut tape = Tape::new();
    let bound = model.net.bind(&mut tape, Trainable::all_but_past_tams(current));
    let x = tape.constant(batch.features.clone());
    let r = bound.represent(&mut tape, x)?;
    let (logits, gate) = match current {
        Some(k) => {
            let g = bound.gate(&mut tape, k, r)?;
            (bound.gated_logits(&mut tape, g, r)?, Some(g))
        }
        None => (bound.classify(&mut tape, r)?, None),
    };
    let task = loss_task(&mut tape, logits, &batch.labels)?;

    let pd = match (gate, current) {
        (Some(g), Some(t)) if t > 0 && cfg.loss.lambda != 0.0 => {
            let previous = (0..t).map(|k| bound.gate(&mut tape, k, r)).collect::<Result<Vec<_>>>()?;
            Some(loss_pairwise_discrepancy(&mut tape, g, &previous, cfg.loss.temperature)?)
        }
        _ => None,
    };

    let (mut rehearsal, mut cr) = (None, None);
    if cfg.method.uses_buffer() && !buffer.is_empty() {
        let n = cfg.batch_size;
        match cfg.method {
            Method::Er | Method::Tamil => {
                let (entries, xb, labels) = sample_batch(buffer, n)?;
                let (lb, routes) = buffer_logits(&mut tape, &bound, model, &xb, use_tams)?;
                rehearsal = Some(tape.cross_entropy(lb, &labels)?);
                if cfg.method == Method::Tamil && cfg.loss.beta != 0.0 {
                    let routes = routes.expect("tamil always routes");
                    let targets: Vec<Vec<f64>> = if model.ema.is_some() {
                        let z = model.ema_forward_routed(&xb, &routes)?;
                        (0..z.rows()).map(|i| z.row(i).to_vec()).collect()
                    } else {
                        entries.into_iter().map(|e| e.logits.unwrap_or_default()).collect()
                    };
                    cr = Some(loss_consistency(&mut tape, &targets, lb)?);
                }
            }
            Method::Derpp => {
                let (entries, xb, _) = sample_batch(buffer, n)?;
                let (lz, _) = buffer_logits(&mut tape, &bound, model, &xb, use_tams)?;
                let targets: Vec<Vec<f64>> = entries.into_iter().map(|e| e.logits.unwrap_or_default()).collect();
                cr = Some(loss_der_logit_replay(&mut tape, &targets, lz)?);
                let (_, xb, labels) = sample_batch(buffer, n)?;
                let (lb, _) = buffer_logits(&mut tape, &bound, model, &xb, use_tams)?;
                rehearsal = Some(tape.cross_entropy(lb, &labels)?);
            }
            Method::Sgd | Method::Joint => unreachable!("no buffer"),
        }
    }

    let (total, breakdown) = loss_total(&mut tape, LossTerms { task, rehearsal, cr, pd }, &cfg.loss)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Validation("loss became non-finite".into()));
    }
    tape.backward(total)?;
    let stored = tape.value(logits).clone();
    model.net.apply_sgd(&bound, &tape, sgd)?;
    if model.ema.is_some() {
        model.ema_update()?;
    }

    if cfg.method.uses_buffer() {
        let keep = cfg.stores_logits();
        for i in 0..batch.len() {
            buffer.offer(BufferEntry {
                features: batch.features.row(i).to_vec(),
                label: batch.labels[i],
                task_id: batch.task_ids[i],
                logits: keep.then(|| stored.row(i).to_vec()),
            });
        }
    }
    Ok(breakdown)
}

fn train_examples(
    model: &mut TamilModel,
    examples: &[Example],
    task_index: usize,
    current: Option<usize>,
    buffer: &mut ReservoirBuffer,
    cfg: &TrainConfig,
) -> Result<TaskLoss> {
    let sgd = Sgd::new(cfg.learning_rate)?;
    let mut steps = 0;
    let mut last = LossBreakdown::default();
    for epoch in 0..cfg.epochs_per_task {
        let seed = child_seed(cfg.seed, "epoch", (task_index * cfg.epochs_per_task + epoch) as u64);
        let mut sums = [0.0; 5];
        let mut n = 0;
        for batch in shuffled_batches(examples, cfg.batch_size, seed)? {
            let b = train_step(model, &batch, current, buffer, cfg, &sgd)?;
            for (s, v) in sums.iter_mut().zip([b.l_task, b.l_rehearsal, b.l_cr, b.l_pd, b.total]) {
                *s += v;
            }
            n += 1;
        }
        steps += n;
        let m = |i: usize| sums[i] / n as f64;
        last = LossBreakdown {
            l_task: m(0),
            l_rehearsal: m(1),
            l_cr: m(2),
            l_pd: m(3),
            total: m(4),
        };
    }
    Ok(TaskLoss {
        task: task_index,
        steps,
        last_epoch_mean: last,
    })
}

/// Trains on one task. `add_task` must already have been called for it.
pub fn train_task(
    model: &mut TamilModel,
    task: &TaskSpec,
    buffer: &mut ReservoirBuffer,
    cfg: &TrainConfig,
) -> Result<TaskLoss> {
    if model.tasks_started != task.task_id + 1 {
        return Err(Error::arg(format!(
            "model has started {} tasks; call add_task before training task {}",
            model.tasks_started, task.task_id
        )));
    }
    let current = cfg.use_tams.then_some(task.task_id);
    train_examples(model, &task.train, task.task_id, current, buffer, cfg)
}

/// Class-IL forward: each row routed by the matching criterion when the
/// model has TAMs, otherwise the plain network.
pub fn predict_class_il(model: &TamilModel, x: &Tensor) -> Result<(Tensor, Option<Vec<usize>>)> {
    if model.num_tams() == 0 {
        return Ok((model.net.logits(x, None)?, None));
    }
    let r = model.net.representation(x)?;
    let routes = infer_tam(model, &r)?;
    Ok((model.net.logits_routed(x, &routes)?, Some(routes)))
}

/// How one test sample was evaluated in each mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub task: usize,
    pub label: usize,
    /// TAM picked by the matching criterion, if the model has TAMs.
    pub route: Option<usize>,
    pub class_il: usize,
    pub oracle: usize,
    pub task_il: usize,
    /// Max softmax probability of the Class-IL prediction.
    pub confidence: f64,
}

impl SampleRecord {
    pub fn prediction(&self, mode: EvalMode) -> usize {
        match mode {
            EvalMode::ClassIl => self.class_il,
            EvalMode::TaskIl => self.task_il,
            EvalMode::Oracle => self.oracle,
        }
    }
}

/// Per-sample evaluation of test data for tasks `0..=upto`, all three modes
/// at once. Also returns the Class-IL logits row of each sample.
pub fn audit(model: &TamilModel, stream: &TaskStream, upto: usize) -> Result<(Vec<SampleRecord>, Vec<Vec<f64>>)> {
    if upto >= stream.num_tasks() {
        return Err(Error::arg(format!("task {upto} outside a {}-task stream", stream.num_tasks())));
    }
    let mut records = Vec::new();
    let mut class_logits = Vec::new();
    for task in &stream.tasks()[..=upto] {
        if task.test.is_empty() {
            return Err(Error::Validation(format!("task {} has no test samples", task.task_id)));
        }
        let batch = Batch::from_examples(&task.test)?;
        let (cil, routes) = predict_class_il(model, &batch.features)?;
        let oracle = if model.num_tams() > 0 {
            model.forward_with_tam(&batch.features, task.task_id)?
        } else {
            cil.clone()
        };
        for i in 0..batch.len() {
            let row = oracle.row(i);
            let task_il = task
                .class_ids
                .iter()
                .copied()
                .filter(|&c| c < row.len())
                .fold(None, |best: Option<usize>, c| match best {
                    Some(b) if row[b] >= row[c] => Some(b),
                    _ => Some(c),
                })
                .ok_or_else(|| Error::arg("task has no classes in the classifier"))?;
            let probs = softmax(cil.row(i))?;
            let class_il = argmax(cil.row(i));
            records.push(SampleRecord {
                task: task.task_id,
                label: batch.labels[i],
                route: routes.as_ref().map(|r| r[i]),
                class_il,
                oracle: argmax(row),
                task_il,
                confidence: probs[class_il],
            });
            class_logits.push(cil.row(i).to_vec());
        }
    }
    Ok((records, class_logits))
}

fn per_task_accuracy(records: &[SampleRecord], upto: usize, mode: EvalMode) -> Vec<f64> {
    (0..=upto)
        .map(|t| {
            let mine: Vec<_> = records.iter().filter(|r| r.task == t).collect();
            let hits = mine.iter().filter(|r| r.prediction(mode) == r.label).count();
            hits as f64 / mine.len().max(1) as f64
        })
        .collect()
}

/// Accuracy on each task `0..=upto` under `mode`.
pub fn evaluate(model: &TamilModel, stream: &TaskStream, upto: usize, mode: EvalMode) -> Result<Vec<f64>> {
    let (records, _) = audit(model, stream, upto)?;
    Ok(per_task_accuracy(&records, upto, mode))
}

pub struct RunOutcome {
    pub model: TamilModel,
    pub buffer: ReservoirBuffer,
    pub report: RunReport,
}

/// Trains `cfg.method` over the whole stream, evaluating every seen task
/// after each task.
pub fn run_stream(stream: &TaskStream, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut model = cfg.build_model(stream.feature_dim())?;
    let mut buffer = cfg.build_buffer();
    let n = stream.num_tasks();
    let modes = [EvalMode::ClassIl, EvalMode::TaskIl, EvalMode::Oracle];
    let mut matrices = [AccuracyMatrix::new(n), AccuracyMatrix::new(n), AccuracyMatrix::new(n)];
    let mut losses = Vec::new();

    let record = |model: &TamilModel, upto: usize, matrices: &mut [AccuracyMatrix; 3]| -> Result<()> {
        let (records, _) = audit(model, stream, upto)?;
        for (m, mode) in matrices.iter_mut().zip(modes) {
            for (t, acc) in per_task_accuracy(&records, upto, mode).into_iter().enumerate() {
                m.set(t, upto, acc)?;
            }
        }
        Ok(())
    };

    if cfg.method == Method::Joint {
        model.add_task(stream.num_classes())?;
        let union: Vec<Example> = stream.tasks().iter().flat_map(|t| t.train.iter().cloned()).collect();
        losses.push(train_examples(&mut model, &union, 0, None, &mut buffer, cfg)?);
        record(&model, n - 1, &mut matrices)?;
    } else {
        for task in stream.tasks() {
            model.add_task(task.class_ids.len())?;
            let log = train_task(&mut model, task, &mut buffer, cfg)?;
            log::info!(
                "{}: task {} done, {} steps, last-epoch loss {:.4}",
                cfg.method.name(),
                task.task_id,
                log.steps,
                log.last_epoch_mean.total
            );
            losses.push(log);
            record(&model, task.task_id, &mut matrices)?;
        }
    }

    let (records, class_logits) = audit(&model, stream, n - 1)?;
    let logits = Tensor::from_rows(&class_logits)?;
    let task_classes: Vec<Vec<usize>> = stream.tasks().iter().map(|t| t.class_ids.clone()).collect();
    let predictions: Vec<(f64, bool)> = records.iter().map(|r| (r.confidence, r.class_il == r.label)).collect();
    let bins = reliability_bins(&predictions, cfg.ece_bins)?;
    let ece = crate::metrics::ece(&predictions, cfg.ece_bins)?;

    let has_tams = model.num_tams() > 0;
    let mean_activation = if has_tams {
        let mut out = Vec::new();
        for (k, tam) in model.net.tams.iter().enumerate() {
            let batch = Batch::from_examples(&stream.task(k).test)?;
            let r = model.net.representation(&batch.features)?;
            out.push(tam_mean_activation(tam, &r));
        }
        Some(out)
    } else {
        None
    };
    let [class_il, task_il, oracle] = matrices;
    let report = RunReport {
        method: cfg.method.name().to_string(),
        use_tams: cfg.use_tams,
        tasks: n,
        class_il: ModeSummary::from_matrix(class_il)?,
        task_il: ModeSummary::from_matrix(task_il)?,
        oracle: ModeSummary::from_matrix(oracle)?,
        task_probabilities: task_probabilities(&logits, &task_classes)?,
        calibration: Calibration { ece, bins },
        parameters: model.count_parameters(),
        routing_accuracy: if has_tams { Some(routing_accuracy(&model, stream, n - 1)?) } else { None },
        tam_similarity: if has_tams { Some(tam_similarity(&model.net.tams)?) } else { None },
        tam_mean_activation: mean_activation,
        losses,
        buffer_seen: buffer.seen_count(),
    };
    Ok(RunOutcome { model, buffer, report })
}
