//! Accuracy matrices, forgetting, task-recency probabilities, calibration
//! and TAM diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{ParameterCounts, Tam, TamilModel};
use crate::numerics::{softmax, Tensor};
use crate::taskdata::{Batch, TaskStream};

/// `A[t_eval][t_train]`: accuracy on task `t_eval` after training task
/// `t_train`. Only entries with `t_eval ≤ t_train` are ever filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    entries: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Self {
        AccuracyMatrix {
            entries: vec![vec![None; tasks]; tasks],
        }
    }

    /// Matrix with every lower-triangular entry taken from `rows`, where
    /// `rows[t_train]` lists accuracies for tasks `0..=t_train`.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(columns.len());
        for (s, col) in columns.iter().enumerate() {
            if col.len() != s + 1 {
                return Err(Error::arg(format!("column {s} has {} entries, expected {}", col.len(), s + 1)));
            }
            for (t, &v) in col.iter().enumerate() {
                m.set(t, s, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.entries.len()
    }

    pub fn set(&mut self, eval: usize, train: usize, accuracy: f64) -> Result<()> {
        let n = self.tasks();
        if eval > train || train >= n {
            return Err(Error::arg(format!("entry ({eval}, {train}) outside the lower triangle of {n} tasks")));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::arg(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.entries[eval][train] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, eval: usize, train: usize) -> Option<f64> {
        self.entries.get(eval)?.get(train).copied().flatten()
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.entries
    }

    /// Rows are evaluated tasks, columns are training steps; missing entries
    /// are empty cells.
    pub fn to_csv(&self) -> String {
        let n = self.tasks();
        let mut out = String::from("eval_task");
        (0..n).for_each(|s| out.push_str(&format!(",after_task_{s}")));
        out.push('\n');
        for (t, row) in self.entries.iter().enumerate() {
            out.push_str(&t.to_string());
            for v in row {
                out.push(',');
                if let Some(v) = v {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    fn final_column(&self) -> Result<Vec<f64>> {
        let n = self.tasks();
        if n == 0 {
            return Err(Error::arg("empty accuracy matrix"));
        }
        (0..n)
            .map(|t| {
                self.get(t, n - 1)
                    .ok_or_else(|| Error::arg(format!("missing final accuracy for task {t}")))
            })
            .collect()
    }
}

/// Mean over tasks of the accuracies after the last task.
pub fn final_average_accuracy(a: &AccuracyMatrix) -> Result<f64> {
    let col = a.final_column()?;
    Ok(col.iter().sum::<f64>() / col.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    /// One entry per task except the last.
    pub per_task: Vec<f64>,
    pub mean: Option<f64>,
}

/// `f_t = max_{s ≥ t} A[t, s] − A[t, T]` for every task but the last.
pub fn forgetting(a: &AccuracyMatrix) -> Result<Forgetting> {
    let n = a.tasks();
    let last = a.final_column()?;
    let mut per_task = Vec::with_capacity(n.saturating_sub(1));
    for (t, final_acc) in last.iter().enumerate().take(n - 1) {
        let mut best = f64::NEG_INFINITY;
        for s in t..n {
            let v = a
                .get(t, s)
                .ok_or_else(|| Error::arg(format!("missing accuracy for task {t} after task {s}")))?;
            best = best.max(v);
        }
        per_task.push(best - final_acc);
    }
    let mean = (!per_task.is_empty()).then(|| per_task.iter().sum::<f64>() / per_task.len() as f64);
    Ok(Forgetting { per_task, mean })
}

/// Averages the softmax of each logit row, then sums the classes of each
/// task.
pub fn task_probabilities(logits: &Tensor, task_classes: &[Vec<usize>]) -> Result<Vec<f64>> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if rows == 0 {
        return Err(Error::arg("task probabilities need at least one sample"));
    }
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        for (m, p) in mean.iter_mut().zip(softmax(logits.row(i))?) {
            *m += p;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    task_classes
        .iter()
        .map(|classes| {
            classes
                .iter()
                .map(|&c| {
                    mean.get(c)
                        .copied()
                        .ok_or_else(|| Error::arg(format!("class {c} outside {cols} logits")))
                })
                .sum()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Mean confidence; 0 for an empty bin.
    pub confidence: f64,
    /// Empirical accuracy; 0 for an empty bin.
    pub accuracy: f64,
}

/// Equal-width bins over `(0, 1]`; bin `b` holds confidences in
/// `(b/n, (b+1)/n]`.
pub fn reliability_bins(predictions: &[(f64, bool)], n_bins: usize) -> Result<Vec<CalibrationBin>> {
    if predictions.is_empty() {
        return Err(Error::arg("calibration needs at least one prediction"));
    }
    if n_bins == 0 {
        return Err(Error::arg("calibration needs at least one bin"));
    }
    let mut sums = vec![(0usize, 0.0, 0usize); n_bins];
    for &(c, correct) in predictions {
        if !(c > 0.0 && c <= 1.0) {
            return Err(Error::arg(format!("confidence {c} outside (0, 1]")));
        }
        let b = ((c * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
        sums[b].0 += 1;
        sums[b].1 += c;
        sums[b].2 += correct as usize;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, conf, hits))| {
            let n = count.max(1) as f64;
            CalibrationBin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count,
                confidence: conf / n,
                accuracy: hits as f64 / n,
            }
        })
        .collect())
}

/// `Σ_b (n_b / N)·|acc_b − conf_b|`.
pub fn ece(predictions: &[(f64, bool)], n_bins: usize) -> Result<f64> {
    let bins = reliability_bins(predictions, n_bins)?;
    let n = predictions.len() as f64;
    Ok(bins
        .iter()
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TamSimilarity {
    /// Between encoder weights; absent when the TAM variant has none.
    pub extractor: Option<Vec<Vec<f64>>>,
    pub selector: Option<Vec<Vec<f64>>>,
}

fn cosine_matrix(weights: &[&[f64]]) -> Vec<Vec<f64>> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    weights
        .iter()
        .enumerate()
        .map(|(i, a)| {
            weights
                .iter()
                .enumerate()
                .map(|(j, b)| {
                    let (na, nb) = (norm(a), norm(b));
                    if na == 0.0 || nb == 0.0 {
                        log::warn!("TAM weights with zero norm; similarity ({i}, {j}) set to 0");
                        0.0
                    } else if i == j {
                        1.0
                    } else {
                        a.iter().zip(*b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
                    }
                })
                .collect()
        })
        .collect()
}

/// Cosine similarity between the flattened weight matrices of every pair
/// of TAMs.
pub fn tam_similarity(tams: &[Tam]) -> Result<TamSimilarity> {
    if tams.is_empty() {
        return Err(Error::arg("no TAMs to compare"));
    }
    let collect = |pick: fn(&Tam) -> Option<&[f64]>| -> Option<Vec<Vec<f64>>> {
        let w: Option<Vec<&[f64]>> = tams.iter().map(pick).collect();
        w.map(|w| cosine_matrix(&w))
    };
    Ok(TamSimilarity {
        extractor: collect(|t| t.encoder.as_ref().map(|l| l.weight.data())),
        selector: collect(|t| t.selector.as_ref().map(|l| l.weight.data())),
    })
}

/// Mean post-activation encoder output of TAM `k` over the representations
/// of task `k`'s test samples. `None` for variants without an encoder.
pub fn tam_mean_activation(tam: &Tam, representations: &Tensor) -> Option<Vec<f64>> {
    let enc = tam.encode(representations)?;
    let (rows, cols) = (enc.rows(), enc.cols());
    let mut mean = vec![0.0; cols];
    for i in 0..rows {
        mean.iter_mut().zip(enc.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows.max(1) as f64);
    Some(mean)
}

/// Fraction of test samples of tasks `0..=upto` routed to their own TAM.
pub fn routing_accuracy(model: &TamilModel, stream: &TaskStream, upto: usize) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for task in &stream.tasks()[..=upto] {
        if task.test.is_empty() {
            continue;
        }
        let batch = Batch::from_examples(&task.test)?;
        let r = model.net.representation(&batch.features)?;
        let routes = model.net.route(&r)?;
        hits += routes.iter().filter(|&&k| k == task.task_id).count();
        total += routes.len();
    }
    if total == 0 {
        return Err(Error::arg("no test samples to route"));
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub accuracy: AccuracyMatrix,
    pub final_average: f64,
    /// Absent when the matrix only holds the final column.
    pub forgetting: Option<Forgetting>,
}

impl ModeSummary {
    pub fn from_matrix(accuracy: AccuracyMatrix) -> Result<Self> {
        let final_average = final_average_accuracy(&accuracy)?;
        let forgetting = forgetting(&accuracy).ok();
        Ok(ModeSummary {
            accuracy,
            final_average,
            forgetting,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    pub steps: usize,
    /// Mean over the last epoch's steps.
    pub last_epoch_mean: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ece: f64,
    pub bins: Vec<CalibrationBin>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub use_tams: bool,
    pub tasks: usize,
    pub class_il: ModeSummary,
    pub task_il: ModeSummary,
    pub oracle: ModeSummary,
    /// Class-IL predicted probability mass per task after the last task.
    pub task_probabilities: Vec<f64>,
    pub calibration: Calibration,
    pub parameters: ParameterCounts,
    pub routing_accuracy: Option<f64>,
    pub tam_similarity: Option<TamSimilarity>,
    pub tam_mean_activation: Option<Vec<Option<Vec<f64>>>>,
    pub losses: Vec<TaskLoss>,
    pub buffer_seen: u64,
}
