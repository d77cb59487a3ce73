//! Command-line front end: `run`, `ablate`, `gen-data` and `report`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{run_stream, EvalMode, Method, TrainConfig};
use crate::metrics::RunReport;
use crate::model::{TamConfig, TamVariant};
use crate::taskdata::{generate_synthetic, load_stream, write_stream, SyntheticConfig, TaskStream};

pub const OUTPUT_ROOT_ENV: &str = "TAMIL_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0:#}")]
    Config(anyhow::Error),
    #[error("{0:#}")]
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

trait Classify<T> {
    fn config(self) -> Result<T, CliError>;
    fn runtime(self) -> Result<T, CliError>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn config(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Config(e.into()))
    }

    fn runtime(self) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(e.into()))
    }
}

#[derive(Parser, Debug)]
#[command(name = "tamil", version, about = "Continual learning experiments with task-attention modules")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train and evaluate one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override, e.g. `method=er` or `train.loss.beta=0.5`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Run a single seed instead of the configured list.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every cell of a sweep over a set of seeds.
    Ablate {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic stream as CSV plus manifest.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretty-print a report.json.
    Report { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticConfig),
    File(PathBuf),
}

impl DatasetSource {
    pub fn load(&self) -> crate::Result<TaskStream> {
        match self {
            DatasetSource::Synthetic(cfg) => generate_synthetic(cfg),
            DatasetSource::File(path) => load_stream(path),
        }
    }
}

fn default_modes() -> Vec<EvalMode> {
    vec![EvalMode::ClassIl, EvalMode::TaskIl, EvalMode::Oracle]
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_modes")]
    pub eval_modes: Vec<EvalMode>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Run seeds; empty means `train.seed` only.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub save_checkpoints: bool,
}

impl ExperimentConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
        }
        if self.eval_modes.is_empty() {
            return Err(crate::Error::Config("eval_modes must not be empty".into()));
        }
        self.train.validate()
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }
}

const EXPERIMENT_KEYS: [&str; 6] = ["dataset", "train", "eval_modes", "output_dir", "seeds", "save_checkpoints"];

/// Applies `key=value` with a dotted key. Keys that do not name a top-level
/// experiment field are taken relative to `train`. Values are parsed as
/// JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, spec: &str, top_level: &[&str]) -> anyhow::Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override key {key:?} has an empty segment"));
    }
    if !top_level.is_empty() && !top_level.contains(&parts[0]) {
        parts.insert(0, "train");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| anyhow!("override {key:?} descends into a non-object"))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    node.as_object_mut()
        .ok_or_else(|| anyhow!("override {key:?} descends into a non-object"))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .config()?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .config()
}

pub fn load_experiment(path: &Path, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut value = read_json(path)?;
    for o in overrides {
        apply_override(&mut value, o, &EXPERIMENT_KEYS).config()?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).context("invalid experiment config").config()?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.seeds = vec![s];
    }
    if let DatasetSource::File(p) = &mut cfg.dataset {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    cfg.validate().config()?;
    Ok(cfg)
}

/// `dir` itself when absolute, else under the output root from the
/// environment (or the working directory).
pub fn resolve_output(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir.to_path_buf(),
    }
}

/// Files staged next to their targets and renamed only once all of them
/// have been written; dropped stages are deleted.
struct Staged {
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    fn new() -> Self {
        Staged { files: Vec::new() }
    }

    fn stage_path(target: &Path) -> PathBuf {
        let name = target.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        target.with_file_name(format!(".{name}.partial"))
    }

    fn write(&mut self, target: PathBuf, contents: &[u8]) -> std::io::Result<()> {
        let tmp = Self::stage_path(&target);
        self.files.push((tmp.clone(), target));
        fs::write(&tmp, contents)
    }

    /// Registers a file written by other code at `stage_path(target)`.
    fn adopt(&mut self, target: PathBuf) -> PathBuf {
        let tmp = Self::stage_path(&target);
        self.files.push((tmp.clone(), target));
        tmp
    }

    fn commit(mut self) -> std::io::Result<()> {
        for (tmp, target) in std::mem::take(&mut self.files) {
            fs::rename(tmp, target)?;
        }
        Ok(())
    }
}

impl Drop for Staged {
    fn drop(&mut self) {
        for (tmp, _) in &self.files {
            let _ = fs::remove_file(tmp);
        }
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    config: &'a ExperimentConfig,
    report: &'a RunReport,
}

#[derive(Deserialize)]
struct ReportFileOwned {
    config: Value,
    report: RunReport,
}

fn matrices_csv(report: &RunReport, modes: &[EvalMode]) -> String {
    let mut out = String::new();
    for (i, mode) in modes.iter().enumerate() {
        let (name, summary) = match mode {
            EvalMode::ClassIl => ("class_il", &report.class_il),
            EvalMode::TaskIl => ("task_il", &report.task_il),
            EvalMode::Oracle => ("oracle", &report.oracle),
        };
        for (j, line) in summary.accuracy.to_csv().lines().enumerate() {
            if j == 0 && i > 0 {
                continue;
            }
            let prefix = if j == 0 { "mode" } else { name };
            out.push_str(&format!("{prefix},{line}\n"));
        }
    }
    out
}

/// Runs one seed of `cfg` and writes its artefacts into `dir`.
pub fn run_one(cfg: &ExperimentConfig, stream: &TaskStream, dir: &Path) -> Result<RunReport, CliError> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;
    let outcome = run_stream(stream, &cfg.train).runtime()?;
    let mut staged = Staged::new();
    let json = serde_json::to_string_pretty(&ReportFile {
        config: cfg,
        report: &outcome.report,
    })
    .runtime()?;
    staged.write(dir.join("report.json"), json.as_bytes()).runtime()?;
    staged
        .write(dir.join("accuracy_matrix.csv"), matrices_csv(&outcome.report, &cfg.eval_modes).as_bytes())
        .runtime()?;
    if cfg.save_checkpoints {
        let model_tmp = staged.adopt(dir.join("model.json"));
        outcome.model.save(&model_tmp).runtime()?;
        let buffer_tmp = staged.adopt(dir.join("buffer.csv"));
        let meta_tmp = staged.adopt(dir.join("buffer.meta.json"));
        outcome.buffer.save(&buffer_tmp).runtime()?;
        // the buffer writes its sidecar next to the staged CSV
        fs::rename(buffer_tmp.with_extension("meta.json"), &meta_tmp).runtime()?;
    }
    staged.commit().runtime()?;
    Ok(outcome.report)
}

fn summary_line(report: &RunReport, modes: &[EvalMode]) -> String {
    modes
        .iter()
        .map(|m| match m {
            EvalMode::ClassIl => format!("class-il {:.4}", report.class_il.final_average),
            EvalMode::TaskIl => format!("task-il {:.4}", report.task_il.final_average),
            EvalMode::Oracle => format!("oracle {:.4}", report.oracle.final_average),
        })
        .collect::<Vec<_>>()
        .join("  ")
}

pub fn cmd_run(config: &Path, overrides: &[String], seed: Option<u64>, out: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_experiment(config, overrides, seed)?;
    let stream = cfg.dataset.load().config()?;
    let base = resolve_output(out.unwrap_or(&cfg.output_dir));
    let seeds = cfg.run_seeds();
    for &s in &seeds {
        let mut one = cfg.clone();
        one.train.seed = s;
        one.seeds = vec![s];
        let dir = if seeds.len() == 1 { base.clone() } else { base.join(format!("seed_{s}")) };
        let report = run_one(&one, &stream, &dir)?;
        println!("seed {s}: {}  -> {}", summary_line(&report, &cfg.eval_modes), dir.display());
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub method: Option<Method>,
    pub use_tams: Option<bool>,
    pub tam_variant: Option<TamVariant>,
    pub buffer_capacity: Option<usize>,
    /// Extra `key=value` overrides applied after the fields above.
    #[serde(default)]
    pub set: Vec<String>,
}

impl SweepCell {
    pub fn label(&self, index: usize) -> String {
        let mut parts = vec![format!("cell{index}")];
        if let Some(m) = self.method {
            parts.push(m.name().to_string());
        }
        match self.use_tams {
            Some(true) => parts.push("tams".into()),
            Some(false) => parts.push("notams".into()),
            None => {}
        }
        if let Some(v) = self.tam_variant {
            parts.push(serde_json::to_value(v).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default());
        }
        if let Some(b) = self.buffer_capacity {
            parts.push(format!("m{b}"));
        }
        parts.join("_")
    }

    fn apply(&self, base: &ExperimentConfig) -> anyhow::Result<ExperimentConfig> {
        let mut cfg = base.clone();
        if let Some(m) = self.method {
            cfg.train.method = m;
        }
        if let Some(t) = self.use_tams {
            cfg.train.use_tams = t;
        }
        if let Some(v) = self.tam_variant {
            cfg.train.model.tam = TamConfig::preset(v, cfg.train.model.tam.bottleneck);
        }
        if let Some(b) = self.buffer_capacity {
            cfg.train.buffer_capacity = b;
        }
        if !self.set.is_empty() {
            let mut value = serde_json::to_value(&cfg)?;
            for o in &self.set {
                apply_override(&mut value, o, &EXPERIMENT_KEYS)?;
            }
            cfg = serde_json::from_value(value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: ExperimentConfig,
    pub cells: Vec<SweepCell>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Stat { mean, std: var.sqrt() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub runs: usize,
    pub class_il: Option<Stat>,
    pub task_il: Option<Stat>,
    pub oracle: Option<Stat>,
    pub forgetting: Option<Stat>,
    pub failures: Vec<String>,
}

pub fn cmd_ablate(sweep: &Path, out: Option<&Path>) -> Result<Vec<CellSummary>, CliError> {
    let value = read_json(sweep)?;
    let spec: SweepSpec = serde_json::from_value(value).context("invalid sweep spec").config()?;
    if spec.cells.is_empty() || spec.seeds.is_empty() {
        return Err(CliError::Config(anyhow!("sweep needs at least one cell and one seed")));
    }
    let stream = spec.base.dataset.load().config()?;
    let root = resolve_output(out.unwrap_or(&spec.base.output_dir));
    let mut summaries = Vec::new();
    for (i, cell) in spec.cells.iter().enumerate() {
        let label = cell.label(i);
        let mut reports = Vec::new();
        let mut failures = Vec::new();
        match cell.apply(&spec.base) {
            Err(e) => failures.push(format!("invalid cell: {e:#}")),
            Ok(cfg) => {
                for &s in &spec.seeds {
                    let mut one = cfg.clone();
                    one.train.seed = s;
                    one.seeds = vec![s];
                    match run_one(&one, &stream, &root.join(&label).join(format!("seed_{s}"))) {
                        Ok(r) => reports.push(r),
                        Err(e) => failures.push(format!("seed {s}: {e}")),
                    }
                }
            }
        }
        for f in &failures {
            log::warn!("{label}: {f}");
        }
        let pick = |f: fn(&RunReport) -> Option<f64>| Stat::of(&reports.iter().filter_map(f).collect::<Vec<_>>());
        summaries.push(CellSummary {
            label,
            runs: reports.len(),
            class_il: pick(|r| Some(r.class_il.final_average)),
            task_il: pick(|r| Some(r.task_il.final_average)),
            oracle: pick(|r| Some(r.oracle.final_average)),
            forgetting: pick(|r| r.class_il.forgetting.as_ref().and_then(|f| f.mean)),
            failures,
        });
    }
    fs::create_dir_all(&root).runtime()?;
    let mut staged = Staged::new();
    staged
        .write(root.join("summary.json"), serde_json::to_string_pretty(&summaries).runtime()?.as_bytes())
        .runtime()?;
    staged.write(root.join("summary.csv"), summary_csv(&summaries).as_bytes()).runtime()?;
    staged.commit().runtime()?;
    for s in &summaries {
        let fmt = |s: &Option<Stat>| s.as_ref().map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
        println!("{:40} class-il {}  task-il {}  runs {}", s.label, fmt(&s.class_il), fmt(&s.task_il), s.runs);
    }
    let failed = summaries.iter().map(|s| s.failures.len()).sum::<usize>();
    if failed > 0 {
        return Err(CliError::Runtime(anyhow!("{failed} sweep run(s) failed; see summary.json")));
    }
    Ok(summaries)
}

fn summary_csv(summaries: &[CellSummary]) -> String {
    let mut out = String::from(
        "cell,runs,class_il_mean,class_il_std,task_il_mean,task_il_std,oracle_mean,oracle_std,forgetting_mean,forgetting_std,failures\n",
    );
    let cells = |s: &Option<Stat>| s.as_ref().map_or(",".to_string(), |s| format!("{},{}", s.mean, s.std));
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.label,
            s.runs,
            cells(&s.class_il),
            cells(&s.task_il),
            cells(&s.oracle),
            cells(&s.forgetting),
            s.failures.len()
        ));
    }
    out
}

pub fn cmd_gen_data(config: &Path, overrides: &[String], out: &Path) -> Result<(), CliError> {
    let mut value = read_json(config)?;
    for o in overrides {
        apply_override(&mut value, o, &[]).config()?;
    }
    let cfg: SyntheticConfig = serde_json::from_value(value).context("invalid synthetic config").config()?;
    cfg.validate().config()?;
    let stream = generate_synthetic(&cfg).runtime()?;
    write_stream(&stream, out)
        .with_context(|| format!("writing {}", out.display()))
        .runtime()?;
    println!(
        "wrote {} tasks, {} classes to {}",
        stream.num_tasks(),
        stream.num_classes(),
        out.display()
    );
    Ok(())
}

pub fn format_report(text: &str) -> anyhow::Result<String> {
    let file: ReportFileOwned = serde_json::from_str(text)?;
    let r = &file.report;
    let seed = file.config.pointer("/train/seed").cloned().unwrap_or(Value::Null);
    let mut out = format!("method {} (tams: {}), {} tasks, seed {seed}\n", r.method, r.use_tams, r.tasks);
    for (name, s) in [("class-il", &r.class_il), ("task-il", &r.task_il), ("oracle", &r.oracle)] {
        let f = s
            .forgetting
            .as_ref()
            .and_then(|f| f.mean)
            .map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!("  {name:9} final {:.4}  forgetting {f}\n", s.final_average));
    }
    if let Some(ra) = r.routing_accuracy {
        out.push_str(&format!("  routing accuracy {ra:.4}\n"));
    }
    let probs: Vec<String> = r.task_probabilities.iter().map(|p| format!("{p:.3}")).collect();
    out.push_str(&format!("  task probabilities [{}]\n", probs.join(", ")));
    out.push_str(&format!("  ece {:.4}\n", r.calibration.ece));
    out.push_str(&format!(
        "  parameters {} (backbone {}, tams {}, classifier {}, ema {})\n",
        r.parameters.total,
        r.parameters.backbone,
        r.parameters.tams(),
        r.parameters.classifier,
        r.parameters.ema
    ));
    Ok(out)
}

pub fn cmd_report(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .config()?;
    print!("{}", format_report(&text).config()?);
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run {
            config,
            overrides,
            seed,
            out,
        } => cmd_run(config, overrides, *seed, out.as_deref()),
        Command::Ablate { sweep, out } => cmd_ablate(sweep, out.as_deref()).map(|_| ()),
        Command::GenData { config, overrides, out } => cmd_gen_data(config, overrides, out),
        Command::Report { path } => cmd_report(path),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_default_to_train_section() {
        let mut v = json!({"dataset": {"file": "x.csv"}, "train": {"method": "tamil"}});
        apply_override(&mut v, "method=sgd", &EXPERIMENT_KEYS).unwrap();
        apply_override(&mut v, "loss.beta=0.5", &EXPERIMENT_KEYS).unwrap();
        apply_override(&mut v, "output_dir=out/a", &EXPERIMENT_KEYS).unwrap();
        assert_eq!(v["train"]["method"], "sgd");
        assert_eq!(v["train"]["loss"]["beta"], 0.5);
        assert_eq!(v["output_dir"], "out/a");
        assert!(apply_override(&mut v, "novalue", &EXPERIMENT_KEYS).is_err());
        assert!(apply_override(&mut v, "a..b=1", &EXPERIMENT_KEYS).is_err());
    }

    #[test]
    fn population_std() {
        let s = Stat::of(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, 1.0);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let v = json!({"dataset": {"synthetic": {}}, "trian": {}});
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let v = json!({"dataset": {"synthetic": {}}, "train": {"loss": {"gamma": 1.0}}});
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn absolute_output_dir_is_kept() {
        assert_eq!(resolve_output(Path::new("/abs/dir")), PathBuf::from("/abs/dir"));
    }
}
