//! Masked graph attention: the local message-passing half of a rollout step.
//!
//! Node `i` attends over `{ j : adjacency[i][j] = 1 } ∪ { i }` with weights
//! `project(q_i · k_j / √d_head)`, and the sublayer output is
//! `LayerNorm(h + Attn(h) · W_o + b_o)`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::nn::{Linear, ParamId, ParamStore, Session};
use crate::projection::ProjectionKind;
use crate::tensor::{Tensor, TensorError, TensorResult, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Attention neighbourhoods of an `N`-node graph, self-loops included.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMask {
    n: usize,
    bits: Arc<[bool]>,
}

impl AdjacencyMask {
    /// From directed `(from, to)` pairs: `from` attends to `to`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> TensorResult<Self> {
        let mut bits = vec![false; n * n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(TensorError::invalid("adjacency", format!("edge ({a},{b}) outside {n} nodes")));
            }
            bits[a * n + b] = true;
        }
        for i in 0..n {
            bits[i * n + i] = true;
        }
        Ok(AdjacencyMask { n, bits: bits.into() })
    }

    /// From a square 0/1 matrix.
    pub fn from_matrix(adjacency: &Tensor) -> TensorResult<Self> {
        let n = match adjacency.shape() {
            [r, c] if r == c => *r,
            other => {
                return Err(TensorError::invalid("adjacency", format!("expected a square matrix, got {other:?}")))
            }
        };
        let mut bits = Vec::with_capacity(n * n);
        for (idx, &v) in adjacency.data().iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(TensorError::invalid(
                    "adjacency",
                    format!("entry ({}, {}) = {v} is not 0 or 1", idx / n, idx % n),
                ));
            }
            bits.push(v == 1.0 || idx / n == idx % n);
        }
        Ok(AdjacencyMask { n, bits: bits.into() })
    }

    pub fn nodes(&self) -> usize {
        self.n
    }

    pub fn bits(&self) -> &Arc<[bool]> {
        &self.bits
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }
}

/// Parameters of one graph-attention sublayer.
#[derive(Debug, Clone)]
pub struct GraphAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl GraphAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d_model: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d_model.is_multiple_of(heads), "heads must divide d_model");
        let query = Linear::new(store, rng, &format!("{prefix}.query"), d_model, d_model, false);
        let key = Linear::new(store, rng, &format!("{prefix}.key"), d_model, d_model, false);
        let value = Linear::new(store, rng, &format!("{prefix}.value"), d_model, d_model, false);
        let output = Linear::new(store, rng, &format!("{prefix}.output"), d_model, d_model, true);
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[d_model], 1.0), false);
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d_model]), false);
        GraphAttention {
            query,
            key,
            value,
            output,
            ln_gamma,
            ln_beta,
            heads,
            d_model,
        }
    }

    /// One masked attention step over node states `h` (`N×d_model`).
    pub fn step(&self, s: &mut Session, h: Var, mask: &AdjacencyMask, kind: ProjectionKind) -> TensorResult<Var> {
        let shape = s.value(h).shape().to_vec();
        if shape != [mask.nodes(), self.d_model] {
            return Err(TensorError::ShapeMismatch {
                op: "graph_attention",
                lhs: shape,
                rhs: vec![mask.nodes(), self.d_model],
            });
        }
        let q = self.query.forward(s, h)?;
        let k = self.key.forward(s, h)?;
        let v = self.value.forward(s, h)?;
        let d_head = self.d_model / self.heads;
        let inv_sqrt = 1.0 / (d_head as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let start = head * d_head;
                (
                    s.tape.slice_cols(q, start, d_head)?,
                    s.tape.slice_cols(k, start, d_head)?,
                    s.tape.slice_cols(v, start, d_head)?,
                )
            };
            let scores = s.tape.matmul_t(qh, kh)?;
            let scores = s.tape.scale(scores, inv_sqrt)?;
            let weights = s.tape.row_project(scores, kind, Some(mask.bits().clone()))?;
            outs.push(s.tape.matmul(weights, vh)?);
        }
        let attended = if outs.len() == 1 { outs[0] } else { s.tape.concat(&outs, 1)? };
        let projected = self.output.forward(s, attended)?;
        let residual = s.tape.add(h, projected)?;
        s.tape
            .layer_norm(residual, s.param(self.ln_gamma), s.param(self.ln_beta), LAYER_NORM_EPS)
    }
}

/// Convenience entry point taking a dense 0/1 adjacency matrix.
pub fn graph_attention_step(
    s: &mut Session,
    h: Var,
    adjacency: &Tensor,
    params: &GraphAttention,
    kind: ProjectionKind,
) -> TensorResult<Var> {
    let mask = AdjacencyMask::from_matrix(adjacency)?;
    params.step(s, h, &mask, kind)
}
