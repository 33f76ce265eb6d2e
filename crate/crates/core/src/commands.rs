//! The command layer behind the `uck` binary.
//!
//! Every command first resolves its full configuration (defaults, then an
//! optional JSON config file, then flags), writes a manifest holding that
//! configuration, and only then does its work. `rerun` executes a manifest
//! again and reproduces the same output bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ablation::{default_cells, run_ablation_grid, summary_csv, Cell, CellRun, ExperimentPlan};
use crate::checkpoint::{checkpoint_bytes, load_checkpoint, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::evaluation::{check_compatible, evaluate_model, CSV_HEADER};
use crate::model::{Ablation, ModelConfig};
use crate::projection::ProjectionKind;
use crate::tasks::{dataset_bytes, generate_dataset, read_dataset, GraphInstance, Task, TaskSpec, DATASET_VERSION};
use crate::training::{train_with, TrainConfig};

pub const MANIFEST_FORMAT: &str = "uck-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Environment variable naming the default output root.
pub const OUT_DIR_ENV: &str = "UCK_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "runs";

const DESK_COUNT: usize = 2000;
const PAPER_COUNT: usize = 10_000;
const PAPER_TEST_COUNT: usize = 2000;
const DESK_EPOCHS: usize = 15;
const PAPER_EPOCHS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub manifest: u32,
    pub dataset: u32,
    pub checkpoint: u32,
}

impl Default for FormatVersions {
    fn default() -> Self {
        FormatVersions {
            manifest: MANIFEST_VERSION,
            dataset: DATASET_VERSION,
            checkpoint: CHECKPOINT_VERSION,
        }
    }
}

/// A fully resolved command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase", deny_unknown_fields)]
pub enum CommandConfig {
    Generate {
        spec: TaskSpec,
        out: PathBuf,
    },
    Train {
        data: PathBuf,
        out: PathBuf,
        model: ModelConfig,
        train: TrainConfig,
    },
    Eval {
        checkpoint: PathBuf,
        data: PathBuf,
        report: PathBuf,
    },
    Ablate {
        plan: ExperimentPlan,
        cells: Vec<Cell>,
        out: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub formats: FormatVersions,
    pub seeds: Vec<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub run: CommandConfig,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl CommandConfig {
    pub fn name(&self) -> &'static str {
        match self {
            CommandConfig::Generate { .. } => "generate",
            CommandConfig::Train { .. } => "train",
            CommandConfig::Eval { .. } => "eval",
            CommandConfig::Ablate { .. } => "ablate",
        }
    }

    /// Where this command's manifest lives.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            CommandConfig::Generate { out, .. } | CommandConfig::Train { out, .. } => with_suffix(out, ".manifest.json"),
            CommandConfig::Eval { report, .. } => with_suffix(report, ".manifest.json"),
            CommandConfig::Ablate { out, .. } => out.join("manifest.json"),
        }
    }

    pub fn manifest(&self) -> RunManifest {
        let (seeds, inputs, outputs) = match self {
            CommandConfig::Generate { spec, out } => (vec![spec.seed], vec![], vec![out.clone()]),
            CommandConfig::Train { data, out, model, train } => (
                vec![model.seed, train.seed],
                vec![data.clone()],
                vec![out.clone(), train_log_path(out)],
            ),
            CommandConfig::Eval { checkpoint, data, report } => (
                vec![],
                vec![checkpoint.clone(), data.clone()],
                vec![report.clone(), report_csv_path(report)],
            ),
            CommandConfig::Ablate { plan, out, .. } => (
                plan.seeds.clone(),
                vec![],
                vec![out.join("summary.csv"), out.join("grid.json")],
            ),
        };
        RunManifest {
            format: MANIFEST_FORMAT.to_string(),
            tool_version: format!("uck {}", env!("CARGO_PKG_VERSION")),
            formats: FormatVersions::default(),
            seeds,
            inputs,
            outputs,
            run: self.clone(),
        }
    }
}

pub fn train_log_path(checkpoint: &Path) -> PathBuf {
    with_suffix(checkpoint, ".log.jsonl")
}

pub fn report_csv_path(report: &Path) -> PathBuf {
    report.with_extension("csv")
}

/// Default output root: `$UCK_OUT_DIR`, else `runs`.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    let tmp = with_suffix(path, ".partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn to_json_pretty<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Recursively overlays `patch` onto `base`; objects merge, anything else replaces.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<&Value>, what: &str) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(serde_json::from_value(serde_json::to_value(base).expect("serializable")).expect("round trip"));
    };
    let mut value = serde_json::to_value(base).expect("serializable");
    merge_json(&mut value, patch.clone());
    serde_json::from_value(value).map_err(|e| Error::config(format!("{what}: {e}")))
}

fn load_config_file(path: Option<&Path>, allowed: &[&str]) -> Result<serde_json::Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Default::default());
    };
    let value: Value = read_json(path)?;
    let Value::Object(map) = value else {
        return Err(Error::config(format!("{}: config file must hold a JSON object", path.display())));
    };
    let unknown: Vec<String> = map
        .keys()
        .filter(|k| !allowed.contains(&k.as_str()))
        .map(|k| format!("{}: unknown section `{k}` (expected {})", path.display(), allowed.join(", ")))
        .collect();
    if unknown.is_empty() {
        Ok(map)
    } else {
        Err(Error::Config(unknown))
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GenerateOptions {
    #[arg(long)]
    pub task: Task,
    /// Grid side, variable count or node count (default: the task's training size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Number of instances (default 2000, or 10000 with --paper-scale).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub balance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub paper_scale: bool,
}

pub fn resolve_generate(o: &GenerateOptions) -> CommandConfig {
    let size = o.size.unwrap_or(o.task.default_sizes().0);
    let count = o.count.unwrap_or(if o.paper_scale { PAPER_COUNT } else { DESK_COUNT });
    let spec = TaskSpec {
        task: o.task,
        size,
        count,
        balance: o.balance,
        seed: o.seed,
    };
    let out = o
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("{}-{size}-{count}-{}.jsonl", o.task.name(), o.seed)));
    CommandConfig::Generate { spec, out }
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOptions {
    /// Dataset file written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path (default: next to the dataset).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ablation: Option<Ablation>,
    #[arg(long)]
    pub attention: Option<ProjectionKind>,
    /// Seeds both initialization and training order.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub paper_scale: bool,
}

pub fn resolve_train(o: &TrainOptions) -> Result<CommandConfig> {
    let file = load_config_file(o.config.as_deref(), &["model", "train"])?;
    let base_train = TrainConfig {
        epochs: if o.paper_scale { PAPER_EPOCHS } else { DESK_EPOCHS },
        // The epoch log then reports dropout-free accuracy, matching `eval`.
        eval_train_accuracy: true,
        ..TrainConfig::default()
    };
    let mut problems = Vec::new();
    let model = overlay(&ModelConfig::default(), file.get("model"), "model section");
    let train = overlay(&base_train, file.get("train"), "train section");
    let (mut model, mut train) = match (model, train) {
        (Ok(m), Ok(t)) => (m, t),
        (m, t) => {
            for e in [m.err(), t.err()].into_iter().flatten() {
                problems.push(e.to_string());
            }
            return Err(Error::Config(problems));
        }
    };
    if let Some(a) = o.ablation {
        a.apply(&mut model);
    }
    if let Some(k) = o.attention {
        model.attention = k;
    }
    if let Some(seed) = o.seed {
        model.seed = seed;
        train.seed = seed;
    }
    if let Some(e) = o.epochs {
        train.epochs = e;
    }
    if let Some(lr) = o.lr {
        train.lr = lr;
    }
    if let Some(b) = o.batch_size {
        train.batch_size = b;
    }
    problems.extend(model.problems());
    problems.extend(train.problems());
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let out = o.out.clone().unwrap_or_else(|| o.data.with_extension("ckpt"));
    Ok(CommandConfig::Train {
        data: o.data.clone(),
        out,
        model,
        train,
    })
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalOptions {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// JSON report path; the CSV export goes next to it (default: next to the checkpoint).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn resolve_eval(o: &EvalOptions) -> CommandConfig {
    let report = o.report.clone().unwrap_or_else(|| {
        let stem = o.data.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
        with_suffix(&o.checkpoint, &format!(".{stem}.report.json"))
    });
    CommandConfig::Eval {
        checkpoint: o.checkpoint.clone(),
        data: o.data.clone(),
        report,
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct AblateOptions {
    #[arg(long, default_value = "planning")]
    pub task: Task,
    /// JSON file with an optional `plan` section (partial experiment plan).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Comma-separated cells such as `full-sparsemax` (default: all twelve).
    #[arg(long, value_delimiter = ',')]
    pub cells: Option<Vec<String>>,
    #[arg(long)]
    pub gen_size: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub paper_scale: bool,
}

pub fn parse_cell(name: &str) -> Result<Cell> {
    default_cells()
        .into_iter()
        .find(|c| c.name() == name)
        .ok_or_else(|| Error::config(format!("unknown cell `{name}` (expected <ablation>-<sparsemax|softmax>)")))
}

pub fn resolve_ablate(o: &AblateOptions) -> Result<CommandConfig> {
    let file = load_config_file(o.config.as_deref(), &["plan"])?;
    let mut base = ExperimentPlan::desk(o.task, vec![0, 1, 2]);
    if o.paper_scale {
        base.train_count = PAPER_COUNT;
        base.test_count = PAPER_TEST_COUNT;
        base.train.epochs = PAPER_EPOCHS;
    }
    let mut plan = overlay(&base, file.get("plan"), "plan section")?;
    if let Some(seeds) = &o.seeds {
        plan.seeds = seeds.clone();
    }
    if let Some(g) = o.gen_size {
        plan.gen_size = g;
    }
    if let Some(c) = o.train_count {
        plan.train_count = c;
    }
    if let Some(c) = o.test_count {
        plan.test_count = c;
    }
    if let Some(e) = o.epochs {
        plan.train.epochs = e;
    }
    let cells = match &o.cells {
        Some(names) => names.iter().map(|n| parse_cell(n)).collect::<Result<Vec<_>>>()?,
        None => default_cells(),
    };
    let mut problems = plan.model.problems();
    problems.extend(plan.train.problems());
    if plan.seeds.is_empty() {
        problems.push("at least one seed is required".into());
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let out = o
        .out
        .clone()
        .unwrap_or_else(|| out_root().join(format!("ablate-{}", o.task.name())));
    Ok(CommandConfig::Ablate { plan, cells, out })
}

/// Writes the manifest, then runs the command.
pub fn execute(config: &CommandConfig) -> Result<()> {
    write_atomic(&config.manifest_path(), &to_json_pretty(&config.manifest())?)?;
    match config {
        CommandConfig::Generate { spec, out } => run_generate(spec, out),
        CommandConfig::Train { data, out, model, train } => run_train(data, out, model, train),
        CommandConfig::Eval { checkpoint, data, report } => run_eval(checkpoint, data, report),
        CommandConfig::Ablate { plan, cells, out } => run_ablate(plan, cells, out),
    }
}

/// Re-executes the command recorded in a manifest.
pub fn rerun(manifest: &Path) -> Result<CommandConfig> {
    let m: RunManifest = read_json(manifest)?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format(format!("{}: not a run manifest", manifest.display())));
    }
    if m.formats != FormatVersions::default() {
        return Err(Error::Format(format!(
            "{}: written with format versions {:?}, this build uses {:?}",
            manifest.display(),
            m.formats,
            FormatVersions::default()
        )));
    }
    execute(&m.run)?;
    Ok(m.run)
}

fn run_generate(spec: &TaskSpec, out: &Path) -> Result<()> {
    let data = generate_dataset(spec)?;
    write_atomic(out, &dataset_bytes(spec, &data)?)
}

fn load_prepared(path: &Path) -> Result<(Task, Vec<crate::model::PreparedInstance>)> {
    let (header, instances) = read_dataset(path)?;
    let prepared = instances.iter().map(GraphInstance::prepare).collect::<Result<Vec<_>>>()?;
    Ok((header.spec.task, prepared))
}

fn run_train(data: &Path, out: &Path, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    let (task, prepared) = load_prepared(data)?;
    let mut config = model.clone();
    config.input_dim = task.feature_width();
    config.head = task.head();
    check_compatible(&config, task)?;
    let mut m = crate::model::UckModel::new(config)?;
    let log_path = train_log_path(out);
    ensure_parent(&log_path)?;
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    train_with(&mut m, &prepared, train, |entry, _| {
        let mut line = serde_json::to_vec(entry).map_err(|e| Error::Format(e.to_string()))?;
        line.push(b'\n');
        log.write_all(&line).map_err(|e| Error::io(&log_path, e))
    })?;
    write_atomic(out, &checkpoint_bytes(&m, Some(task))?)
}

fn run_eval(checkpoint: &Path, data: &Path, report: &Path) -> Result<()> {
    let (meta, model) = load_checkpoint(checkpoint)?;
    let (task, prepared) = load_prepared(data)?;
    if let Some(trained) = meta.task.filter(|&t| t != task) {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} but {} holds {} instances",
            trained.name(),
            data.display(),
            task.name()
        )));
    }
    let result = evaluate_model(&model, task, &prepared)?;
    write_atomic(report, &to_json_pretty(&result)?)?;
    write_atomic(&report_csv_path(report), format!("{CSV_HEADER}\n{}\n", result.csv_row()).as_bytes())
}

/// What a finished cell directory records about its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellManifest {
    pub format: String,
    pub tool_version: String,
    pub formats: FormatVersions,
    pub cell: Cell,
    pub seed: u64,
    pub plan: ExperimentPlan,
}

pub fn cell_dir(out: &Path, cell: Cell, seed: u64) -> PathBuf {
    out.join("cells").join(cell.name()).join(format!("seed-{seed}"))
}

fn cell_manifest(plan: &ExperimentPlan, cell: Cell, seed: u64) -> CellManifest {
    CellManifest {
        format: MANIFEST_FORMAT.to_string(),
        tool_version: format!("uck {}", env!("CARGO_PKG_VERSION")),
        formats: FormatVersions::default(),
        cell,
        seed,
        plan: plan.clone(),
    }
}

/// A completed run is reused only when its manifest matches the current plan.
fn completed_run(plan: &ExperimentPlan, out: &Path, cell: Cell, seed: u64) -> Option<CellRun> {
    let dir = cell_dir(out, cell, seed);
    let manifest: CellManifest = read_json(&dir.join("manifest.json")).ok()?;
    if manifest != cell_manifest(plan, cell, seed) {
        return None;
    }
    read_json(&dir.join("run.json")).ok()
}

fn run_ablate(plan: &ExperimentPlan, cells: &[Cell], out: &Path) -> Result<()> {
    let outcome = run_ablation_grid(
        plan,
        cells,
        |cell, seed| completed_run(plan, out, cell, seed),
        |run, model| {
            let dir = cell_dir(out, run.cell, run.seed);
            write_atomic(&dir.join("manifest.json"), &to_json_pretty(&cell_manifest(plan, run.cell, run.seed))?)?;
            write_atomic(&dir.join("model.ckpt"), &checkpoint_bytes(model, Some(plan.task))?)?;
            write_atomic(&dir.join("run.json"), &to_json_pretty(run)?)
        },
    )?;
    write_atomic(&out.join("summary.csv"), summary_csv(&outcome.summary).as_bytes())?;
    write_atomic(&out.join("grid.json"), &to_json_pretty(&outcome)?)?;
    match outcome.failures.first() {
        None => Ok(()),
        Some(f) => Err(Error::Numerical(format!(
            "{} of {} cell runs failed; first: {} seed {}: {}",
            outcome.failures.len(),
            cells.len() * plan.seeds.len(),
            f.cell.name(),
            f.seed,
            f.error
        ))),
    }
}
