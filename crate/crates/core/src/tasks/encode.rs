use super::oracle::{oracle_grid_feasible, oracle_reachable, oracle_sat, Cell, Cnf, Grid};
use super::{roles, GraphInstance, Task};
use crate::error::{Error, Result};

/// Task-level view of an instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decoded {
    Planning { grid: Grid, start: Cell, goal: Cell },
    Sat(Cnf),
    Reachability { n: usize, edges: Vec<(usize, usize)>, src: usize, tgt: usize },
}

/// One node per cell of a square grid; free cells that are 4-adjacent are
/// joined in both directions and obstacles stay isolated.
pub fn encode_planning(grid: &Grid, start: Cell, goal: Cell, seed: u64) -> Result<GraphInstance> {
    if grid.rows != grid.cols {
        return Err(Error::Data(format!("planning grids are square, got {}×{}", grid.rows, grid.cols)));
    }
    let label = oracle_grid_feasible(grid, start, goal)?;
    let mut edges = Vec::new();
    let mut node_roles = Vec::with_capacity(grid.rows * grid.cols);
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let here = grid.index((r, c));
            node_roles.push(if grid.obstacles[here] { roles::OBSTACLE } else { roles::FREE });
            if grid.obstacles[here] {
                continue;
            }
            for next in [(r, c + 1), (r + 1, c)] {
                if grid.contains(next) && !grid.is_obstacle(next) {
                    let there = grid.index(next);
                    edges.push((here, there));
                    edges.push((there, here));
                }
            }
        }
    }
    let (s, g) = (grid.index(start), grid.index(goal));
    node_roles[s] = roles::START;
    node_roles[g] = if s == g { roles::START | roles::GOAL } else { roles::GOAL };
    Ok(GraphInstance {
        task: Task::Planning,
        seed,
        n_nodes: node_roles.len(),
        edges,
        roles: node_roles,
        src: Some(s),
        tgt: Some(g),
        label: u8::from(label),
    })
}

/// Literal-clause graph: node `2j` is `x_{j+1}`, node `2j+1` is `¬x_{j+1}`,
/// then one node per clause. Each occurrence joins literal and clause, and
/// each literal is joined to its negation, all in both directions.
pub fn encode_sat(formula: &Cnf, seed: u64) -> Result<GraphInstance> {
    let label = oracle_sat(formula)?;
    let v = formula.num_vars;
    let lit_node = |lit: i32| 2 * (lit.unsigned_abs() as usize - 1) + usize::from(lit < 0);
    let mut node_roles: Vec<u8> = (0..v).flat_map(|_| [roles::POS_LITERAL, roles::NEG_LITERAL]).collect();
    let mut edges = Vec::new();
    for j in 0..v {
        edges.push((2 * j, 2 * j + 1));
        edges.push((2 * j + 1, 2 * j));
    }
    for (c, clause) in formula.clauses.iter().enumerate() {
        let clause_node = 2 * v + c;
        node_roles.push(roles::CLAUSE);
        let mut seen = Vec::with_capacity(clause.len());
        for &lit in clause {
            if seen.contains(&lit) {
                continue;
            }
            seen.push(lit);
            let l = lit_node(lit);
            edges.push((l, clause_node));
            edges.push((clause_node, l));
        }
    }
    Ok(GraphInstance {
        task: Task::Sat,
        seed,
        n_nodes: node_roles.len(),
        edges,
        roles: node_roles,
        src: None,
        tgt: None,
        label: u8::from(label),
    })
}

/// Nodes and directed edges as given, with source and target role bits.
pub fn encode_reachability(edges: &[(usize, usize)], n: usize, src: usize, tgt: usize, seed: u64) -> Result<GraphInstance> {
    let label = oracle_reachable(edges, n, src, tgt)?;
    let mut node_roles = vec![roles::PLAIN; n];
    node_roles[src] = roles::SOURCE;
    node_roles[tgt] = if src == tgt { roles::SOURCE | roles::TARGET } else { roles::TARGET };
    Ok(GraphInstance {
        task: Task::Reachability,
        seed,
        n_nodes: n,
        edges: edges.to_vec(),
        roles: node_roles,
        src: Some(src),
        tgt: Some(tgt),
        label: u8::from(label),
    })
}

impl GraphInstance {
    /// Recovers the task-level problem from the graph encoding.
    pub fn decode(&self) -> Result<Decoded> {
        self.validate()?;
        match self.task {
            Task::Planning => {
                let side = (self.n_nodes as f64).sqrt().round() as usize;
                if side * side != self.n_nodes {
                    return Err(Error::Data(format!("{} nodes do not form a square grid", self.n_nodes)));
                }
                let obstacles = self.roles.iter().map(|&r| r & roles::OBSTACLE != 0).collect();
                let grid = Grid { rows: side, cols: side, obstacles };
                let cell = |i: usize| (i / side, i % side);
                Ok(Decoded::Planning {
                    grid,
                    start: cell(self.src.expect("validated")),
                    goal: cell(self.tgt.expect("validated")),
                })
            }
            Task::Sat => {
                let v = self.roles.iter().filter(|&&r| r == roles::POS_LITERAL).count();
                let mut clauses = vec![Vec::new(); self.n_nodes - 2 * v];
                for &(a, b) in &self.edges {
                    if a < 2 * v && b >= 2 * v {
                        let var = (a / 2 + 1) as i32;
                        clauses[b - 2 * v].push(if a % 2 == 0 { var } else { -var });
                    }
                }
                Ok(Decoded::Sat(Cnf { num_vars: v, clauses }))
            }
            Task::Reachability => Ok(Decoded::Reachability {
                n: self.n_nodes,
                edges: self.edges.clone(),
                src: self.src.expect("validated"),
                tgt: self.tgt.expect("validated"),
            }),
        }
    }
}
