//! Exact decision procedures used as ground truth.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Obstacle map of a rectangular gridworld, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub obstacles: Vec<bool>,
}

pub type Cell = (usize, usize);

impl Grid {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            obstacles: vec![false; rows * cols],
        }
    }

    /// Parses rows of `.` (free) and `#` (obstacle).
    pub fn parse(rows: &[&str]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let obstacles = rows
            .iter()
            .flat_map(|r| {
                assert_eq!(r.len(), cols, "ragged grid");
                r.chars().map(|c| c == '#')
            })
            .collect();
        Grid {
            rows: rows.len(),
            cols,
            obstacles,
        }
    }

    pub fn index(&self, (r, c): Cell) -> usize {
        r * self.cols + c
    }

    pub fn contains(&self, (r, c): Cell) -> bool {
        r < self.rows && c < self.cols
    }

    pub fn is_obstacle(&self, cell: Cell) -> bool {
        self.obstacles[self.index(cell)]
    }

    /// 4-connected in-bounds neighbours of `cell`.
    pub fn neighbours(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let up = r.checked_sub(1).map(|r| (r, c));
        let left = c.checked_sub(1).map(|c| (r, c));
        let down = Some((r + 1, c));
        let right = Some((r, c + 1));
        [up, down, left, right]
            .into_iter()
            .flatten()
            .filter(move |&n| self.contains(n))
    }
}

/// Whether `goal` is reachable from `start` through free cells with 4-connected moves.
pub fn oracle_grid_feasible(grid: &Grid, start: Cell, goal: Cell) -> Result<bool> {
    for (name, cell) in [("start", start), ("goal", goal)] {
        if !grid.contains(cell) {
            return Err(Error::Data(format!("{name} {cell:?} outside {}×{} grid", grid.rows, grid.cols)));
        }
        if grid.is_obstacle(cell) {
            return Err(Error::Data(format!("{name} {cell:?} is an obstacle")));
        }
    }
    let mut seen = vec![false; grid.rows * grid.cols];
    let mut queue = VecDeque::from([start]);
    seen[grid.index(start)] = true;
    while let Some(cell) = queue.pop_front() {
        if cell == goal {
            return Ok(true);
        }
        for next in grid.neighbours(cell) {
            let idx = grid.index(next);
            if !seen[idx] && !grid.obstacles[idx] {
                seen[idx] = true;
                queue.push_back(next);
            }
        }
    }
    Ok(false)
}

/// Breadth-first search along directed edges.
pub fn oracle_reachable(edges: &[(usize, usize)], n: usize, src: usize, tgt: usize) -> Result<bool> {
    if src >= n || tgt >= n {
        return Err(Error::Data(format!("query ({src}, {tgt}) outside {n} nodes")));
    }
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(Error::Data(format!("edge ({a}, {b}) outside {n} nodes")));
        }
        adj[a].push(b);
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([src]);
    seen[src] = true;
    while let Some(v) = queue.pop_front() {
        if v == tgt {
            return Ok(true);
        }
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                queue.push_back(w);
            }
        }
    }
    Ok(false)
}

/// CNF formula over variables `1..=num_vars`; literal `-j` is `¬x_j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cnf {
    pub num_vars: usize,
    pub clauses: Vec<Vec<i32>>,
}

impl Cnf {
    pub fn validate(&self) -> Result<()> {
        for clause in &self.clauses {
            for &lit in clause {
                if lit == 0 || lit.unsigned_abs() as usize > self.num_vars {
                    return Err(Error::Data(format!(
                        "literal {lit} outside variables 1..={}",
                        self.num_vars
                    )));
                }
            }
        }
        Ok(())
    }

    /// Truth value under a complete assignment (`assignment[j]` is `x_{j+1}`).
    pub fn evaluate(&self, assignment: &[bool]) -> bool {
        self.clauses.iter().all(|clause| {
            clause
                .iter()
                .any(|&lit| assignment[lit.unsigned_abs() as usize - 1] == (lit > 0))
        })
    }
}

/// DPLL with unit propagation and pure-literal elimination.
pub fn oracle_sat(formula: &Cnf) -> Result<bool> {
    formula.validate()?;
    let mut assignment = vec![None; formula.num_vars];
    Ok(dpll(&formula.clauses, &mut assignment))
}

fn lit_value(lit: i32, assignment: &[Option<bool>]) -> Option<bool> {
    assignment[lit.unsigned_abs() as usize - 1].map(|v| v == (lit > 0))
}

fn assign(lit: i32, assignment: &mut [Option<bool>], trail: &mut Vec<usize>) {
    let var = lit.unsigned_abs() as usize - 1;
    assignment[var] = Some(lit > 0);
    trail.push(var);
}

enum ClauseState {
    Satisfied,
    Conflict,
    Unit(i32),
    Open,
}

fn clause_state(clause: &[i32], assignment: &[Option<bool>]) -> ClauseState {
    let mut free = None;
    let mut free_count = 0;
    for &lit in clause {
        match lit_value(lit, assignment) {
            Some(true) => return ClauseState::Satisfied,
            Some(false) => {}
            None => {
                if free != Some(lit) {
                    free_count += 1;
                }
                free = Some(lit);
            }
        }
    }
    match (free_count, free) {
        (0, _) => ClauseState::Conflict,
        (1, Some(lit)) => ClauseState::Unit(lit),
        _ => ClauseState::Open,
    }
}

fn dpll(clauses: &[Vec<i32>], assignment: &mut Vec<Option<bool>>) -> bool {
    let mut trail = Vec::new();
    let result = dpll_inner(clauses, assignment, &mut trail);
    if !result {
        for var in trail {
            assignment[var] = None;
        }
    }
    result
}

fn dpll_inner(clauses: &[Vec<i32>], assignment: &mut Vec<Option<bool>>, trail: &mut Vec<usize>) -> bool {
    // Unit propagation to a fixed point.
    loop {
        let mut changed = false;
        for clause in clauses {
            match clause_state(clause, assignment) {
                ClauseState::Conflict => return false,
                ClauseState::Unit(lit) => {
                    assign(lit, assignment, trail);
                    changed = true;
                }
                ClauseState::Satisfied | ClauseState::Open => {}
            }
        }
        if !changed {
            break;
        }
    }

    // Pure literals among clauses that are not yet satisfied.
    let n = assignment.len();
    let mut polarity = vec![(false, false); n];
    let mut branch_var = None;
    for clause in clauses {
        if matches!(clause_state(clause, assignment), ClauseState::Satisfied) {
            continue;
        }
        for &lit in clause {
            let var = lit.unsigned_abs() as usize - 1;
            if assignment[var].is_none() {
                if lit > 0 {
                    polarity[var].0 = true;
                } else {
                    polarity[var].1 = true;
                }
                branch_var.get_or_insert(var);
            }
        }
    }
    let Some(branch_var) = branch_var else {
        // No open clause has an unassigned literal and there was no conflict.
        return true;
    };
    for (var, &(pos, neg)) in polarity.iter().enumerate() {
        if assignment[var].is_none() && pos != neg {
            assignment[var] = Some(pos);
            trail.push(var);
        }
    }
    if polarity[branch_var].0 != polarity[branch_var].1 {
        return dpll_inner(clauses, assignment, trail);
    }

    for value in [true, false] {
        assignment[branch_var] = Some(value);
        let mut sub = Vec::new();
        if dpll_inner(clauses, assignment, &mut sub) {
            trail.push(branch_var);
            trail.extend(sub);
            return true;
        }
        for var in sub {
            assignment[var] = None;
        }
    }
    assignment[branch_var] = None;
    false
}
