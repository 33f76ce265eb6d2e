//! Projections of score vectors onto the probability simplex.
//!
//! Sparsemax is the Euclidean projection `argmin_{p ∈ Δ} ‖p − z‖²`. It is
//! computed exactly by sorting: with `z` sorted descending and running sums
//! `c_k`, the support size is the largest `k` such that `1 + k·z_(k) > c_k`,
//! the threshold is `τ = (c_k − 1)/k`, and `p = max(z − τ, 0)`. Entries off the
//! support are exactly `0.0`.
//!
//! Softmax is kept as the dense alternative for attention-type ablations.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionKind {
    #[default]
    Sparsemax,
    Softmax,
}

impl ProjectionKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionKind::Sparsemax => "sparsemax",
            ProjectionKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for ProjectionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sparsemax" => Ok(ProjectionKind::Sparsemax),
            "softmax" => Ok(ProjectionKind::Softmax),
            other => Err(format!("unknown attention kind `{other}` (expected sparsemax|softmax)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("cannot project an empty vector")]
    Empty,
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error("matrix data length {len} is not a multiple of row width {cols}")]
    Ragged { len: usize, cols: usize },
}

/// Result of a sparsemax projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Sparsemax {
    pub p: Vec<f64>,
    /// Indices with `p_i > 0`, ascending.
    pub support: Vec<usize>,
    pub tau: f64,
}

fn check_finite(z: &[f64]) -> Result<(), ProjectionError> {
    if z.is_empty() {
        return Err(ProjectionError::Empty);
    }
    match z.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(ProjectionError::NonFinite(i)),
        None => Ok(()),
    }
}

/// Threshold `τ` of the sparsemax projection of `z` (assumed finite, non-empty).
fn sparsemax_threshold(z: &[f64]) -> f64 {
    let mut sorted = z.to_vec();
    // Stable descending sort; equal scores keep their original order.
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let mut cumsum = 0.0;
    let mut k_star = 1;
    let mut c_star = sorted[0];
    for (idx, &zk) in sorted.iter().enumerate() {
        cumsum += zk;
        let k = (idx + 1) as f64;
        if 1.0 + k * zk > cumsum {
            k_star = idx + 1;
            c_star = cumsum;
        }
    }
    (c_star - 1.0) / k_star as f64
}

pub fn sparsemax_forward(z: &[f64]) -> Result<Sparsemax, ProjectionError> {
    check_finite(z)?;
    // Working relative to the maximum makes the result depend only on the
    // differences z_i - z_max, so exact shifts give bitwise-equal outputs.
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let rel: Vec<f64> = z.iter().map(|&v| v - max).collect();
    let tau_rel = sparsemax_threshold(&rel);
    let p: Vec<f64> = rel.iter().map(|&v| (v - tau_rel).max(0.0)).collect();
    let tau = tau_rel + max;
    let support = p
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect();
    Ok(Sparsemax { p, support, tau })
}

/// Vector-Jacobian product of sparsemax: `g_i = v_i − mean_{j∈S} v_j` on the
/// support `S`, zero elsewhere. The Jacobian is symmetric, so this is also the JVP.
pub fn sparsemax_jvp(p: &[f64], support: &[usize], v: &[f64]) -> Vec<f64> {
    assert_eq!(p.len(), v.len(), "sparsemax_jvp: length mismatch");
    assert!(!support.is_empty(), "sparsemax_jvp: empty support");
    let mean = support.iter().map(|&i| v[i]).sum::<f64>() / support.len() as f64;
    let mut g = vec![0.0; v.len()];
    for &i in support {
        g[i] = v[i] - mean;
    }
    g
}

pub fn softmax_forward(z: &[f64]) -> Result<Vec<f64>, ProjectionError> {
    check_finite(z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `g = p ⊙ (v − ⟨p, v⟩)`.
pub fn softmax_jvp(p: &[f64], v: &[f64]) -> Vec<f64> {
    assert_eq!(p.len(), v.len(), "softmax_jvp: length mismatch");
    let dot: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - dot)).collect()
}

/// Projects `z` with the given kind, returning only the simplex point.
pub fn project(kind: ProjectionKind, z: &[f64]) -> Result<Vec<f64>, ProjectionError> {
    match kind {
        ProjectionKind::Sparsemax => sparsemax_forward(z).map(|s| s.p),
        ProjectionKind::Softmax => softmax_forward(z),
    }
}

/// Backward rule of [`project`] given its output `p` and upstream gradient `v`.
pub fn project_vjp(kind: ProjectionKind, p: &[f64], v: &[f64]) -> Vec<f64> {
    match kind {
        ProjectionKind::Sparsemax => {
            let support: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
            sparsemax_jvp(p, &support, v)
        }
        ProjectionKind::Softmax => softmax_jvp(p, v),
    }
}

/// Projects every row of a row-major matrix with `cols` columns independently.
pub fn rowwise_project(
    kind: ProjectionKind,
    data: &[f64],
    cols: usize,
) -> Result<Vec<f64>, ProjectionError> {
    if cols == 0 || !data.len().is_multiple_of(cols) {
        return Err(ProjectionError::Ragged {
            len: data.len(),
            cols,
        });
    }
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        out.extend(project(kind, row)?);
    }
    Ok(out)
}
