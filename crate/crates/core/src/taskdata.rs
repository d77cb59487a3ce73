//! Sequential task streams: disjoint class partitions, synthetic Gaussian
//! cluster generation and the CSV dataset format.
//!
//! CSV layout: header `task_id,label,f0,...,f{F-1}`, one example per row.
//! A stream written to `data.csv` also produces `data.test.csv` (held-out
//! split) and an optional `data.json` manifest declaring the class-to-task
//! mapping.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::seed::rng_for;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    /// Global, 0-based class id.
    pub label: usize,
    pub task_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn owns_class(&self, class: usize) -> bool {
        self.class_ids.contains(&class)
    }
}

/// Ordered, immutable sequence of tasks with pairwise-disjoint class sets
/// whose union is `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskSpec>,
    num_classes: usize,
    feature_dim: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskSpec>, feature_dim: usize) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Validation("a stream needs at least one task".into()));
        }
        if feature_dim == 0 {
            return Err(Error::Validation("feature dimension must be positive".into()));
        }
        let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
        for (pos, task) in tasks.iter().enumerate() {
            if task.task_id != pos {
                return Err(Error::Validation(format!(
                    "task ids must be 0..T in order; found {} at position {pos}",
                    task.task_id
                )));
            }
            if task.class_ids.is_empty() {
                return Err(Error::Validation(format!("task {pos} has no classes")));
            }
            for &c in &task.class_ids {
                if let Some(prev) = owner.insert(c, pos) {
                    return Err(Error::Validation(format!(
                        "class {c} belongs to both task {prev} and task {pos}"
                    )));
                }
            }
            for ex in task.train.iter().chain(&task.test) {
                if !task.owns_class(ex.label) || ex.task_id != pos {
                    return Err(Error::Validation(format!(
                        "example with label {} / task {} filed under task {pos}",
                        ex.label, ex.task_id
                    )));
                }
                if ex.features.len() != feature_dim {
                    return Err(Error::Validation(format!(
                        "example has {} features, expected {feature_dim}",
                        ex.features.len()
                    )));
                }
                if !ex.features.iter().all(|v| v.is_finite()) {
                    return Err(Error::Validation("non-finite feature value".into()));
                }
            }
        }
        let num_classes = owner.len();
        if owner.keys().copied().ne(0..num_classes) {
            return Err(Error::Validation(format!(
                "class ids must cover 0..{num_classes} contiguously"
            )));
        }
        Ok(TaskStream {
            tasks,
            num_classes,
            feature_dim,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task(&self, t: usize) -> &TaskSpec {
        &self.tasks[t]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Number of classes introduced by tasks `0..=t`.
    pub fn classes_through(&self, t: usize) -> usize {
        self.tasks[..=t].iter().map(|s| s.class_ids.len()).sum()
    }

    pub fn task_of_class(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.owns_class(class))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub feature_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub cluster_separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            tasks: 5,
            classes_per_task: 2,
            feature_dim: 32,
            train_per_class: 200,
            test_per_class: 100,
            cluster_separation: 6.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.tasks < 1 {
            return bad("tasks must be >= 1");
        }
        if self.classes_per_task < 2 {
            return bad("classes_per_task must be >= 2");
        }
        if self.feature_dim < 1 {
            return bad("feature_dim must be >= 1");
        }
        if self.train_per_class < 1 {
            return bad("train_per_class must be >= 1");
        }
        if !(self.cluster_separation.is_finite() && self.cluster_separation > 0.0) {
            return bad("cluster_separation must be > 0");
        }
        if !(self.noise_std.is_finite() && self.noise_std > 0.0) {
            return bad("noise_std must be > 0");
        }
        Ok(())
    }
}

/// One Gaussian cluster per class: the mean is drawn from
/// `U(-separation, separation)^F`, samples are `mean + N(0, noise²)`.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<TaskStream> {
    cfg.validate()?;
    let total = cfg.tasks * cfg.classes_per_task;
    let mut mean_rng = rng_for(cfg.seed, "synthetic-means", 0);
    let sep = cfg.cluster_separation;
    let means: Vec<Vec<f64>> = (0..total)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| mean_rng.random_range(-sep..sep))
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_std)
        .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
    let mut train_rng = rng_for(cfg.seed, "synthetic-train", 0);
    let mut test_rng = rng_for(cfg.seed, "synthetic-test", 0);

    let mut tasks = Vec::with_capacity(cfg.tasks);
    for t in 0..cfg.tasks {
        let class_ids: Vec<usize> =
            (t * cfg.classes_per_task..(t + 1) * cfg.classes_per_task).collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &class_ids {
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| Example {
                features: means[c].iter().map(|m| m + noise.sample(rng)).collect(),
                label: c,
                task_id: t,
            };
            for _ in 0..cfg.train_per_class {
                train.push(draw(&mut train_rng));
            }
            for _ in 0..cfg.test_per_class {
                test.push(draw(&mut test_rng));
            }
        }
        tasks.push(TaskSpec {
            task_id: t,
            class_ids,
            train,
            test,
        });
    }
    TaskStream::new(tasks, cfg.feature_dim)
}

/// Optional sidecar describing a CSV dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub feature_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<String>,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub task_id: usize,
    pub classes: Vec<usize>,
}

pub fn manifest_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn test_split_path(csv: &Path) -> PathBuf {
    csv.with_extension("test.csv")
}

/// Fraction of each class held out when no test file exists.
const HOLDOUT_FRACTION: f64 = 0.2;

fn csv_header(feature_dim: usize) -> String {
    let mut h = String::from("task_id,label");
    for i in 0..feature_dim {
        h.push_str(&format!(",f{i}"));
    }
    h
}

fn write_rows<'a>(
    path: &Path,
    feature_dim: usize,
    rows: impl Iterator<Item = &'a Example>,
) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{}", csv_header(feature_dim))?;
    for ex in rows {
        write!(out, "{},{}", ex.task_id, ex.label)?;
        for v in &ex.features {
            // Display for f64 is the shortest string that round-trips
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes the training split to `path`, the test split next to it and the
/// manifest sidecar.
pub fn write_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    let f = stream.feature_dim();
    write_rows(path, f, stream.tasks().iter().flat_map(|t| &t.train))?;
    let test_path = test_split_path(path);
    write_rows(&test_path, f, stream.tasks().iter().flat_map(|t| &t.test))?;
    let manifest = Manifest {
        feature_dim: f,
        test_file: test_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned()),
        tasks: stream
            .tasks()
            .iter()
            .map(|t| ManifestTask {
                task_id: t.task_id,
                classes: t.class_ids.clone(),
            })
            .collect(),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Parses `task_id,label,f0..` rows. Returns the examples and the feature
/// dimension declared by the header.
pub fn parse_csv(text: &str) -> Result<(Vec<Example>, usize)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "task_id" || cols[1] != "label" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with task_id,label,f0".into(),
        });
    }
    let feature_dim = cols.len() - 2;
    for (i, name) in cols[2..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected column f{i}, found {name:?}"),
            });
        }
    }
    let mut examples = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let int = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line,
                message: format!("invalid {what} {s:?}"),
            })
        };
        let task_id = int(fields[0], "task_id")?;
        let label = int(fields[1], "label")?;
        let features = fields[2..]
            .iter()
            .map(|s| match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Parse {
                    line,
                    message: format!("invalid feature value {s:?}"),
                }),
            })
            .collect::<Result<Vec<f64>>>()?;
        examples.push(Example {
            features,
            label,
            task_id,
        });
    }
    Ok((examples, feature_dim))
}

fn class_owners(examples: &[Example]) -> Result<BTreeMap<usize, usize>> {
    let mut owner = BTreeMap::new();
    for ex in examples {
        match owner.insert(ex.label, ex.task_id) {
            Some(prev) if prev != ex.task_id => {
                return Err(Error::Validation(format!(
                    "class {} appears under task {prev} and task {}",
                    ex.label, ex.task_id
                )))
            }
            _ => {}
        }
    }
    Ok(owner)
}

/// Loads a stream from the CSV format. Task membership comes from the
/// manifest when present, otherwise from the `task_id` column. The test
/// split is the manifest's `test_file`, else `<stem>.test.csv`, else the
/// last 20% of each class's rows in file order.
pub fn load_stream(path: &Path) -> Result<TaskStream> {
    let (train, feature_dim) = parse_csv(&fs::read_to_string(path)?)?;
    let manifest: Option<Manifest> = match fs::read_to_string(manifest_path(path)) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    if let Some(m) = &manifest {
        if m.feature_dim != feature_dim {
            return Err(Error::Validation(format!(
                "manifest declares {} features, CSV header has {feature_dim}",
                m.feature_dim
            )));
        }
    }
    let test_path = match manifest.as_ref().and_then(|m| m.test_file.as_ref()) {
        Some(name) => Some(path.with_file_name(name)),
        None => Some(test_split_path(path)).filter(|p| p.exists()),
    };
    let (train, test) = match test_path {
        Some(tp) => {
            let (test, test_dim) = parse_csv(&fs::read_to_string(&tp)?)?;
            if test_dim != feature_dim {
                return Err(Error::Validation(format!(
                    "test split has {test_dim} features, training split {feature_dim}"
                )));
            }
            (train, test)
        }
        None => holdout_split(train),
    };

    let all: Vec<Example> = train.iter().chain(&test).cloned().collect();
    let owners = class_owners(&all)?;
    let class_sets: BTreeMap<usize, Vec<usize>> = match &manifest {
        Some(m) => {
            let mut sets = BTreeMap::new();
            for t in &m.tasks {
                if sets.insert(t.task_id, t.classes.clone()).is_some() {
                    return Err(Error::Validation(format!(
                        "task {} declared twice in manifest",
                        t.task_id
                    )));
                }
            }
            sets
        }
        None => {
            let mut sets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (&class, &task) in &owners {
                sets.entry(task).or_default().push(class);
            }
            sets
        }
    };
    let mut tasks: Vec<TaskSpec> = class_sets
        .into_iter()
        .map(|(task_id, class_ids)| TaskSpec {
            task_id,
            class_ids,
            train: Vec::new(),
            test: Vec::new(),
        })
        .collect();
    let position: BTreeMap<usize, usize> =
        tasks.iter().enumerate().map(|(i, t)| (t.task_id, i)).collect();
    let route = |ex: &Example| -> Result<usize> {
        position.get(&ex.task_id).copied().ok_or_else(|| {
            Error::Validation(format!("row references undeclared task {}", ex.task_id))
        })
    };
    for ex in train {
        let i = route(&ex)?;
        tasks[i].train.push(ex);
    }
    for ex in test {
        let i = route(&ex)?;
        tasks[i].test.push(ex);
    }
    TaskStream::new(tasks, feature_dim)
}

fn holdout_split(rows: Vec<Example>) -> (Vec<Example>, Vec<Example>) {
    let mut per_class: BTreeMap<usize, usize> = BTreeMap::new();
    for ex in &rows {
        *per_class.entry(ex.label).or_default() += 1;
    }
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ex in rows {
        let n = per_class[&ex.label];
        let held = (n as f64 * HOLDOUT_FRACTION).floor() as usize;
        let k = seen.entry(ex.label).or_default();
        *k += 1;
        if *k > n - held {
            test.push(ex);
        } else {
            train.push(ex);
        }
    }
    (train, test)
}

/// A minibatch drawn from a task.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub task_ids: Vec<usize>,
}

impl Batch {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Result<Self> {
        let examples: Vec<&Example> = examples.into_iter().collect();
        let rows: Vec<&[f64]> = examples.iter().map(|e| e.features.as_slice()).collect();
        Ok(Batch {
            features: Tensor::from_rows(&rows)?,
            labels: examples.iter().map(|e| e.label).collect(),
            task_ids: examples.iter().map(|e| e.task_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One epoch over `examples`: a seeded shuffle cut into batches of `batch`
/// (the last one may be smaller).
pub struct Minibatches<'a> {
    examples: &'a [Example],
    order: Vec<usize>,
    batch: usize,
    pos: usize,
}

impl Iterator for Minibatches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(
            Batch::from_examples(idx.iter().map(|&i| &self.examples[i]))
                .expect("examples share one feature dimension"),
        )
    }
}

pub fn shuffled_batches(examples: &[Example], batch: usize, seed: u64) -> Result<Minibatches<'_>> {
    if batch == 0 {
        return Err(Error::arg("batch size must be >= 1"));
    }
    if examples.is_empty() {
        return Err(Error::arg("cannot batch an empty example set"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng_for(seed, "minibatches", 0));
    Ok(Minibatches {
        examples,
        order,
        batch,
        pos: 0,
    })
}

pub fn minibatches(spec: &TaskSpec, batch: usize, seed: u64) -> Result<Minibatches<'_>> {
    shuffled_batches(&spec.train, batch, seed)
}
