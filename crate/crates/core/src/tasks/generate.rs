//! Random instance generation with class balancing by rejection.
//!
//! Candidate `a` of a dataset is drawn from the `a`-th splitmix64 output of
//! the spec seed; it is kept when its label is still needed to reach the
//! balance target and discarded otherwise. The kept candidate's seed is
//! stored with the instance, so `generate_one(task, size, seed)` reproduces it.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encode::{encode_planning, encode_reachability, encode_sat};
use super::oracle::{Cnf, Grid};
use super::{GraphInstance, Task};
use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SplitMix64};

/// Candidates drawn per requested sample before giving up on the balance target.
pub const REJECTION_BUDGET_PER_SAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task: Task,
    /// Grid side, variable count or node count.
    pub size: usize,
    pub count: usize,
    /// Target fraction of positive labels.
    pub balance: f64,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(task: Task, size: usize, count: usize, seed: u64) -> Self {
        TaskSpec {
            task,
            size,
            count,
            balance: 0.5,
            seed,
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let min = match self.task {
            Task::Planning | Task::Reachability => 2,
            Task::Sat => 1,
        };
        if self.size < min {
            out.push(format!("{} size must be at least {min}", self.task.name()));
        }
        if !(0.0..=1.0).contains(&self.balance) {
            out.push(format!("balance must lie in [0, 1], got {}", self.balance));
        }
        out
    }
}

fn planning(size: usize, seed: u64) -> Result<Option<GraphInstance>> {
    let mut rng = rng_from_seed(seed);
    let density = rng.random_range(0.20..=0.40);
    let obstacles: Vec<bool> = (0..size * size).map(|_| rng.random_bool(density)).collect();
    let grid = Grid {
        rows: size,
        cols: size,
        obstacles,
    };
    let free: Vec<usize> = (0..size * size).filter(|&i| !grid.obstacles[i]).collect();
    if free.len() < 2 {
        return Ok(None);
    }
    let picked: Vec<usize> = free.choose_multiple(&mut rng, 2).copied().collect();
    let cell = |i: usize| (i / size, i % size);
    encode_planning(&grid, cell(picked[0]), cell(picked[1]), seed).map(Some)
}

fn sat(vars: usize, seed: u64) -> Result<Option<GraphInstance>> {
    let mut rng = rng_from_seed(seed);
    let ratio = rng.random_range(3.8..=4.8);
    let clauses = ((ratio * vars as f64).round() as usize).max(1);
    let width = vars.min(3);
    let all: Vec<i32> = (1..=vars as i32).collect();
    let formula = Cnf {
        num_vars: vars,
        clauses: (0..clauses)
            .map(|_| {
                all.choose_multiple(&mut rng, width)
                    .map(|&v| if rng.random_bool(0.5) { v } else { -v })
                    .collect()
            })
            .collect(),
    };
    encode_sat(&formula, seed).map(Some)
}

fn reachability(n: usize, seed: u64) -> Result<Option<GraphInstance>> {
    let mut rng = rng_from_seed(seed);
    let c = rng.random_range(1.0..=2.0);
    let p = (c / n as f64).min(1.0);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.random_bool(p) {
                edges.push((a, b));
            }
        }
    }
    let src = rng.random_range(0..n);
    let mut tgt = rng.random_range(0..n - 1);
    if tgt >= src {
        tgt += 1;
    }
    encode_reachability(&edges, n, src, tgt, seed).map(Some)
}

/// Draws the instance determined by `seed`, or `None` for a degenerate draw
/// (a grid with fewer than two free cells).
pub fn generate_one(task: Task, size: usize, seed: u64) -> Result<Option<GraphInstance>> {
    match task {
        Task::Planning => planning(size, seed),
        Task::Sat => sat(size, seed),
        Task::Reachability => reachability(size, seed),
    }
}

/// Generates `spec.count` instances with `round(count · balance)` positives.
pub fn generate_dataset(spec: &TaskSpec) -> Result<Vec<GraphInstance>> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut need_pos = (spec.count as f64 * spec.balance).round() as usize;
    let mut need_neg = spec.count - need_pos;
    let budget = spec.count.saturating_mul(REJECTION_BUDGET_PER_SAMPLE);
    let mut out = Vec::with_capacity(spec.count);
    let mut seeds = SplitMix64::new(spec.seed);
    let mut attempts = 0;
    while need_pos + need_neg > 0 {
        if attempts == budget {
            return Err(Error::Data(format!(
                "class balance not reachable for {} size {}: still need {need_pos} positive and {need_neg} negative after {budget} candidates",
                spec.task.name(),
                spec.size
            )));
        }
        attempts += 1;
        let seed = seeds.next().expect("infinite sequence");
        let Some(inst) = generate_one(spec.task, spec.size, seed)? else {
            continue;
        };
        let slot = if inst.label == 1 { &mut need_pos } else { &mut need_neg };
        if *slot > 0 {
            *slot -= 1;
            out.push(inst);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_instances_replay_from_their_seed() {
        for task in Task::ALL {
            let spec = TaskSpec::new(task, task.default_sizes().0, 20, 3);
            for inst in generate_dataset(&spec).unwrap() {
                let again = generate_one(task, spec.size, inst.seed).unwrap().unwrap();
                assert_eq!(again, inst);
            }
        }
    }

    #[test]
    fn exact_balance() {
        let spec = TaskSpec::new(Task::Reachability, 12, 101, 1);
        let data = generate_dataset(&spec).unwrap();
        assert_eq!(data.len(), 101);
        let pos = data.iter().filter(|d| d.label == 1).count();
        assert_eq!(pos, 51);
    }

    #[test]
    fn invalid_spec_is_a_config_error() {
        let spec = TaskSpec {
            balance: 1.5,
            ..TaskSpec::new(Task::Sat, 0, 3, 0)
        };
        match generate_dataset(&spec) {
            Err(Error::Config(problems)) => assert_eq!(problems.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn one_sided_balance() {
        // One variable and at least four unit clauses: satisfiable only when all
        // share a sign, so positives are rare but reachable.
        let spec = TaskSpec {
            balance: 1.0,
            ..TaskSpec::new(Task::Sat, 1, 3, 0)
        };
        let data = generate_dataset(&spec).unwrap();
        assert!(data.iter().all(|d| d.label == 1));
    }
}
