//! The three benchmarks: gridworld planning, CNF satisfiability and directed
//! reachability. Each instance is a graph whose nodes carry a role bitmask;
//! bit `j` of the role is feature column `j`.

mod dataset;
mod encode;
mod generate;
pub mod oracle;

pub use dataset::{read_dataset, write_dataset, dataset_bytes, DatasetHeader, DATASET_FORMAT, DATASET_VERSION};
pub use encode::{encode_planning, encode_reachability, encode_sat, Decoded};
pub use generate::{generate_dataset, generate_one, TaskSpec};
pub use oracle::{oracle_grid_feasible, oracle_reachable, oracle_sat, Cell, Cnf, Grid};

use serde::{Deserialize, Serialize};

use crate::attention::AdjacencyMask;
use crate::error::{Error, Result};
use crate::model::{HeadKind, PreparedInstance};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Planning,
    Sat,
    Reachability,
}

pub mod roles {
    pub const FREE: u8 = 1;
    pub const OBSTACLE: u8 = 2;
    pub const START: u8 = 4;
    pub const GOAL: u8 = 8;

    pub const POS_LITERAL: u8 = 1;
    pub const NEG_LITERAL: u8 = 2;
    pub const CLAUSE: u8 = 4;

    pub const PLAIN: u8 = 1;
    pub const SOURCE: u8 = 2;
    pub const TARGET: u8 = 4;
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Planning, Task::Sat, Task::Reachability];

    pub fn name(self) -> &'static str {
        match self {
            Task::Planning => "planning",
            Task::Sat => "sat",
            Task::Reachability => "reachability",
        }
    }

    /// Width of the node feature rows.
    pub fn feature_width(self) -> usize {
        match self {
            Task::Planning => 4,
            Task::Sat | Task::Reachability => 3,
        }
    }

    pub fn head(self) -> HeadKind {
        match self {
            Task::Sat => HeadKind::Global,
            Task::Planning | Task::Reachability => HeadKind::Endpoint,
        }
    }

    pub fn has_endpoints(self) -> bool {
        self.head() == HeadKind::Endpoint
    }

    /// Training and generalization sizes: grid side, variable count, node count.
    pub fn default_sizes(self) -> (usize, usize) {
        match self {
            Task::Planning => (8, 16),
            Task::Sat => (10, 20),
            Task::Reachability => (12, 30),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected planning|sat|reachability)"))
    }
}

/// One labelled benchmark example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphInstance {
    pub task: Task,
    /// Seed the generator drew this instance from.
    pub seed: u64,
    pub n_nodes: usize,
    /// Directed `(from, to)` pairs; undirected graphs list both directions.
    pub edges: Vec<(usize, usize)>,
    pub roles: Vec<u8>,
    pub src: Option<usize>,
    pub tgt: Option<usize>,
    pub label: u8,
}

impl GraphInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        if self.roles.len() != n {
            return Err(Error::Data(format!("{} roles for {n} nodes", self.roles.len())));
        }
        let width = self.task.feature_width();
        if let Some(r) = self.roles.iter().find(|&&r| r == 0 || r >> width != 0) {
            return Err(Error::Data(format!("role {r} invalid for {}", self.task.name())));
        }
        if let Some(e) = self.edges.iter().find(|&&(a, b)| a >= n || b >= n) {
            return Err(Error::Data(format!("edge {e:?} outside {n} nodes")));
        }
        match (self.task.has_endpoints(), self.src, self.tgt) {
            (true, Some(s), Some(t)) if s < n && t < n => {}
            (true, ..) => return Err(Error::Data("source/target missing or out of range".into())),
            (false, None, None) => {}
            (false, ..) => return Err(Error::Data("sat instances carry no source/target".into())),
        }
        if self.label > 1 {
            return Err(Error::Data(format!("label {} is not 0 or 1", self.label)));
        }
        Ok(())
    }

    /// `N×feature_width` one-hot role features.
    pub fn features(&self) -> Tensor {
        let w = self.task.feature_width();
        let data = self
            .roles
            .iter()
            .flat_map(|&r| (0..w).map(move |j| f64::from((r >> j) & 1)))
            .collect();
        Tensor::new(vec![self.n_nodes, w], data).expect("feature shape")
    }

    pub fn prepare(&self) -> Result<PreparedInstance> {
        self.validate()?;
        Ok(PreparedInstance {
            features: self.features(),
            mask: AdjacencyMask::from_edges(self.n_nodes, &self.edges)?,
            src: self.src,
            tgt: self.tgt,
            label: usize::from(self.label),
        })
    }

    /// Re-runs the exact oracle on the decoded instance.
    pub fn oracle_label(&self) -> Result<bool> {
        match self.decode()? {
            Decoded::Planning { grid, start, goal } => oracle_grid_feasible(&grid, start, goal),
            Decoded::Sat(cnf) => oracle_sat(&cnf),
            Decoded::Reachability { n, edges, src, tgt } => oracle_reachable(&edges, n, src, tgt),
        }
    }
}
