//! Paired-seed ablation grids: every cell of (configuration, attention kind)
//! is trained and evaluated on the same per-seed datasets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalReport, MeanStd};
use crate::model::{Ablation, ModelConfig, PreparedInstance, UckModel};
use crate::projection::ProjectionKind;
use crate::rng::derive_seed;
use crate::tasks::{generate_dataset, GraphInstance, Task, TaskSpec};
use crate::training::{train, EpochLog, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub ablation: Ablation,
    pub attention: ProjectionKind,
}

impl Cell {
    pub fn new(ablation: Ablation, attention: ProjectionKind) -> Self {
        Cell { ablation, attention }
    }

    pub fn name(&self) -> String {
        format!("{}-{}", self.ablation.name(), self.attention.name())
    }
}

/// All six configurations under both attention kinds.
pub fn default_cells() -> Vec<Cell> {
    [ProjectionKind::Sparsemax, ProjectionKind::Softmax]
        .into_iter()
        .flat_map(|kind| Ablation::ALL.into_iter().map(move |a| Cell::new(a, kind)))
        .collect()
}

/// Everything needed to run a grid except the cell list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub task: Task,
    pub train_size: usize,
    /// Size of the generalization split.
    pub gen_size: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub balance: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

/// Which split a dataset seed belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Generalization,
}

impl ExperimentPlan {
    /// Desk-scale plan for `task` with its default sizes.
    pub fn desk(task: Task, seeds: Vec<u64>) -> Self {
        let (train_size, gen_size) = task.default_sizes();
        ExperimentPlan {
            task,
            train_size,
            gen_size,
            train_count: 2000,
            test_count: 500,
            balance: 0.5,
            model: ModelConfig {
                input_dim: task.feature_width(),
                head: task.head(),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
            seeds,
        }
    }

    pub fn spec(&self, split: Split, seed: u64) -> TaskSpec {
        let (size, count, stream) = match split {
            Split::Train => (self.train_size, self.train_count, 100),
            Split::Test => (self.train_size, self.test_count, 101),
            Split::Generalization => (self.gen_size, self.test_count, 102),
        };
        TaskSpec {
            task: self.task,
            size,
            count,
            balance: self.balance,
            seed: derive_seed(seed, stream),
        }
    }

    pub fn model_config(&self, cell: Cell, seed: u64) -> ModelConfig {
        let mut config = self.model.clone().with_ablation(cell.ablation);
        config.attention = cell.attention;
        config.input_dim = self.task.feature_width();
        config.head = self.task.head();
        config.seed = seed;
        config
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.train.clone()
        }
    }

    pub fn data(&self, seed: u64) -> Result<SeedData> {
        let load = |split| -> Result<Vec<PreparedInstance>> {
            generate_dataset(&self.spec(split, seed))?
                .iter()
                .map(GraphInstance::prepare)
                .collect()
        };
        Ok(SeedData {
            train: load(Split::Train)?,
            test: load(Split::Test)?,
            generalization: load(Split::Generalization)?,
        })
    }
}

pub struct SeedData {
    pub train: Vec<PreparedInstance>,
    pub test: Vec<PreparedInstance>,
    pub generalization: Vec<PreparedInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub cell: Cell,
    pub seed: u64,
    pub logs: Vec<EpochLog>,
    pub in_dist: EvalReport,
    pub generalization: EvalReport,
}

/// Trains one cell for one seed and evaluates it on both test splits.
pub fn run_cell(plan: &ExperimentPlan, cell: Cell, seed: u64, data: &SeedData) -> Result<(CellRun, UckModel)> {
    let mut model = UckModel::new(plan.model_config(cell, seed))?;
    let logs = train(&mut model, &data.train, &plan.train_config(seed))?;
    let in_dist = evaluate_model(&model, plan.task, &data.test)?;
    let generalization = evaluate_model(&model, plan.task, &data.generalization)?;
    Ok((
        CellRun {
            cell,
            seed,
            logs,
            in_dist,
            generalization,
        },
        model,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: Cell,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: Cell,
    pub seeds: Vec<u64>,
    pub in_dist: Option<MeanStd>,
    pub generalization: Option<MeanStd>,
    pub generalization_median: Option<f64>,
    pub generalization_balance: Option<MeanStd>,
    pub failures: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

pub fn summarize(cells: &[Cell], runs: &[CellRun], failures: &[CellFailure]) -> Vec<CellSummary> {
    cells
        .iter()
        .map(|&cell| {
            let mine: Vec<&CellRun> = runs.iter().filter(|r| r.cell == cell).collect();
            let pick = |f: fn(&CellRun) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<_>>();
            let gen = pick(|r| r.generalization.accuracy);
            CellSummary {
                cell,
                seeds: mine.iter().map(|r| r.seed).collect(),
                in_dist: MeanStd::of(&pick(|r| r.in_dist.accuracy)),
                generalization: MeanStd::of(&gen),
                generalization_median: median(&gen),
                generalization_balance: MeanStd::of(&pick(|r| r.generalization.balance)),
                failures: failures.iter().filter(|f| f.cell == cell).count(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridOutcome {
    pub runs: Vec<CellRun>,
    pub failures: Vec<CellFailure>,
    pub summary: Vec<CellSummary>,
}

/// Column order of [`summary_csv`].
pub const SUMMARY_HEADER: &str = "cell,ablation,attention,seeds,in_dist_mean,in_dist_std,gen_mean,gen_std,gen_median,gen_balance_mean,gen_balance_std,failures";

pub fn summary_csv(summary: &[CellSummary]) -> String {
    let f = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x}"));
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in summary {
        let seeds: Vec<String> = s.seeds.iter().map(u64::to_string).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            s.cell.name(),
            s.cell.ablation.name(),
            s.cell.attention.name(),
            seeds.join(" "),
            f(s.in_dist.map(|m| m.mean)),
            f(s.in_dist.map(|m| m.std)),
            f(s.generalization.map(|m| m.mean)),
            f(s.generalization.map(|m| m.std)),
            f(s.generalization_median),
            f(s.generalization_balance.map(|m| m.mean)),
            f(s.generalization_balance.map(|m| m.std)),
            s.failures,
        ));
    }
    out
}

/// Runs every `(cell, seed)` pair, seeds outermost so each seed's data is
/// generated once. `previous` supplies completed runs to skip; `on_run` sees
/// each new run with its model. A failing cell is recorded and the grid
/// continues; a failing `on_run` aborts.
pub fn run_ablation_grid<P, S>(plan: &ExperimentPlan, cells: &[Cell], mut previous: P, mut on_run: S) -> Result<GridOutcome>
where
    P: FnMut(Cell, u64) -> Option<CellRun>,
    S: FnMut(&CellRun, &UckModel) -> Result<()>,
{
    if cells.is_empty() || plan.seeds.is_empty() {
        return Err(Error::config("an ablation grid needs at least one cell and one seed"));
    }
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &plan.seeds {
        let mut data = None;
        for &cell in cells {
            if let Some(done) = previous(cell, seed) {
                runs.push(done);
                continue;
            }
            if data.is_none() {
                data = Some(plan.data(seed)?);
            }
            match run_cell(plan, cell, seed, data.as_ref().expect("generated above")) {
                Ok((run, model)) => {
                    on_run(&run, &model)?;
                    runs.push(run);
                }
                Err(e) => failures.push(CellFailure {
                    cell,
                    seed,
                    error: e.to_string(),
                }),
            }
        }
    }
    let summary = summarize(cells, &runs, &failures);
    Ok(GridOutcome {
        runs,
        failures,
        summary,
    })
}
