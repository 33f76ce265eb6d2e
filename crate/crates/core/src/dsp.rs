//! Differentiable symbolic planning step.
//!
//! A bank of `K` learnable rules acts on the node states `h`, the per-node
//! feasibility channel `φ` and the global feasibility scalar `Φ`:
//!
//! 1. rule activation: `α = project(MLP_α([h̄, φ̄, E_k]))` over the `K` rules;
//! 2. node selection: `β_k = project(Q_k · Kᵀ / √d)` with `Q = E·W_q`,
//!    `K = [h, φ]·W_k`;
//! 3. effects: `Δh_{k,i} = MLP_h([h_i, φ_i, E_k, t/T])`, likewise `Δφ_{k,i}`;
//! 4. gated update with `gate = α ⊗ β`:
//!    `h ← LayerNorm(h + Σ_k gate_k Δh_k)`, `φ ← clamp(φ + Σ_k gate_k Δφ_k, ±φ_max)`;
//! 5. global aggregation: `Φ ← Φ + Σ_k α_k tanh(MLP_Φ([h̄, φ̄, E_k]))`.
//!
//! `h̄`, `φ̄` are node means taken at the start of the step and are shared by
//! steps 1 and 5. Effects are only evaluated for `(k, i)` pairs whose gate is
//! nonzero; pairs with a zero gate contribute nothing to the update and, since
//! the projection Jacobians vanish off the support, nothing to any gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::LAYER_NORM_EPS;
use crate::nn::{all_pairs, Activation, InputBlock, Linear, Mlp, ParamId, ParamStore, Session};
use crate::projection::ProjectionKind;
use crate::tensor::{Pairs, Tensor, TensorError, TensorResult, Var};

/// Which routes the feasibility channel takes through the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DspFlags {
    /// φ is updated and summarized; when off it stays at zero everywhere.
    pub use_phi: bool,
    /// Φ is accumulated; when off it stays at zero.
    pub use_global_phi: bool,
    /// φ is part of the node-selection keys.
    pub phi_in_keys: bool,
    /// φ is part of the effect MLP inputs.
    pub phi_in_effects: bool,
}

impl Default for DspFlags {
    fn default() -> Self {
        DspFlags {
            use_phi: true,
            use_global_phi: true,
            phi_in_keys: true,
            phi_in_effects: true,
        }
    }
}

/// Rollout state of one instance, recorded on the session tape.
#[derive(Debug, Clone, Copy)]
pub struct ModelState {
    /// `N×d_model` node states.
    pub h: Var,
    /// `N×1` feasibility channel.
    pub phi: Var,
    /// `1×1` global feasibility.
    pub global_phi: Var,
    pub t: usize,
}

impl ModelState {
    /// Fresh state around `h` with `φ = 0`, `Φ = 0`, `t = 0`.
    pub fn initial(s: &mut Session, h: Var) -> Self {
        let n = s.value(h).rows();
        let phi = s.constant(Tensor::zeros(&[n, 1]));
        let global_phi = s.constant(Tensor::zeros(&[1, 1]));
        ModelState { h, phi, global_phi, t: 0 }
    }

    pub fn nodes(&self, s: &Session) -> usize {
        s.value(self.h).rows()
    }
}

/// Node means used by rule activation and global aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Summary {
    /// `1×(d_model+1)`: `[h̄, φ̄]`.
    pub joint: Var,
}

/// Per-rule, per-pair effects.
#[derive(Debug, Clone)]
pub struct Effects {
    /// One row of width `d_model` per pair.
    pub dh: Var,
    /// One row of width 1 per pair.
    pub dphi: Var,
    pub pairs: Pairs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub alpha: Vec<f64>,
    /// `K×N`, row-major.
    pub beta: Vec<f64>,
    /// Per-rule `tanh(MLP_Φ(·))`; empty when Φ is disabled.
    pub delta_global: Vec<f64>,
    pub active_pairs: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DspDiagnostics {
    pub steps: Vec<StepDiagnostics>,
    /// Φ before the first step and after every step.
    pub global_phi_trace: Vec<f64>,
    pub final_phi: Vec<f64>,
}

impl DspDiagnostics {
    pub fn final_global_phi(&self) -> f64 {
        self.global_phi_trace.last().copied().unwrap_or(0.0)
    }

    pub fn phi_sum(&self) -> f64 {
        self.final_phi.iter().sum()
    }
}

/// Static shape and behaviour settings of a [`RuleBank`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DspSettings {
    pub d_model: usize,
    pub d_rule: usize,
    pub rules: usize,
    pub steps: usize,
    pub phi_max: f64,
    pub mlp_hidden_layers: usize,
    pub activation: Activation,
    pub time_encoding: TimeEncoding,
}

/// Encoding of the step index fed to the effect MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TimeEncoding {
    /// `t / T`.
    #[default]
    Fraction,
    /// Raw `t`.
    Step,
}

impl TimeEncoding {
    pub fn encode(self, t: usize, steps: usize) -> f64 {
        match self {
            TimeEncoding::Fraction => t as f64 / steps as f64,
            TimeEncoding::Step => t as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RuleBank {
    pub settings: DspSettings,
    /// `K×d_rule`.
    pub embeddings: ParamId,
    pub w_query: Linear,
    /// Acts on `[h, φ]`; row `d_model` is the φ row.
    pub w_key: Linear,
    /// Input `[h̄, φ̄, E_k]`.
    pub mlp_alpha: Mlp,
    /// Input `[h_i, φ_i, E_k, t]`.
    pub mlp_h: Mlp,
    pub mlp_phi: Mlp,
    /// Input `[h̄, φ̄, E_k]`.
    pub mlp_global: Mlp,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl RuleBank {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, settings: DspSettings) -> Self {
        let DspSettings {
            d_model: d,
            d_rule: dr,
            rules: k,
            mlp_hidden_layers: depth,
            activation: act,
            ..
        } = settings;
        let emb: Vec<f64> = (0..k * dr).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
        let embeddings = store.add(
            format!("{prefix}.embeddings"),
            Tensor::new(vec![k, dr], emb).expect("embedding shape"),
            false,
        );
        let w_query = Linear::new(store, rng, &format!("{prefix}.w_query"), dr, d, false);
        let w_key = Linear::new(store, rng, &format!("{prefix}.w_key"), d + 1, d, false);
        let mlp_alpha = Mlp::new(store, rng, &format!("{prefix}.mlp_alpha"), d + 1 + dr, d, depth, 1, act);
        let mlp_h = Mlp::new(store, rng, &format!("{prefix}.mlp_h"), d + 1 + dr + 1, d, depth, d, act);
        let mlp_phi = Mlp::new(store, rng, &format!("{prefix}.mlp_phi"), d + 1 + dr + 1, d, depth, 1, act);
        let mlp_global = Mlp::new(store, rng, &format!("{prefix}.mlp_global"), d + 1 + dr, d, depth, 1, act);
        let ln_gamma = store.add(format!("{prefix}.ln.gamma"), Tensor::full(&[d], 1.0), false);
        let ln_beta = store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d]), false);
        RuleBank {
            settings,
            embeddings,
            w_query,
            w_key,
            mlp_alpha,
            mlp_h,
            mlp_phi,
            mlp_global,
            ln_gamma,
            ln_beta,
        }
    }

    /// `[h̄, φ̄]` with `φ̄` forced to zero when the channel is disabled.
    pub fn summarize(&self, s: &mut Session, state: &ModelState, flags: DspFlags) -> TensorResult<Summary> {
        let h_mean = s.tape.mean_axis(state.h, 0)?;
        let phi_mean = if flags.use_phi {
            s.tape.mean_axis(state.phi, 0)?
        } else {
            s.constant(Tensor::zeros(&[1, 1]))
        };
        let joint = s.tape.concat(&[h_mean, phi_mean], 1)?;
        Ok(Summary { joint })
    }

    fn per_rule(&self, s: &mut Session, mlp: &Mlp, summary: &Summary) -> TensorResult<Var> {
        let d = self.settings.d_model;
        let e = s.param(self.embeddings);
        let pairs: Pairs = (0..self.settings.rules).map(|k| (k, 0)).collect();
        mlp.forward_pairs(
            s,
            &[InputBlock { value: summary.joint, row: 0 }],
            &[InputBlock { value: e, row: d + 1 }],
            &[],
            pairs,
        )
    }

    /// Rule activation `α` as a `K×1` column on the simplex.
    pub fn rule_activation(&self, s: &mut Session, summary: &Summary, kind: ProjectionKind) -> TensorResult<Var> {
        let logits = self.per_rule(s, &self.mlp_alpha, summary)?;
        let row = s.tape.reshape(logits, &[1, self.settings.rules])?;
        let alpha = s.tape.row_project(row, kind, None)?;
        s.tape.reshape(alpha, &[self.settings.rules, 1])
    }

    /// Node selection `β` (`K×N`, rows on the simplex).
    pub fn node_selection(
        &self,
        s: &mut Session,
        state: &ModelState,
        kind: ProjectionKind,
        phi_in_keys: bool,
    ) -> TensorResult<Var> {
        let d = self.settings.d_model;
        let e = s.param(self.embeddings);
        let queries = self.w_query.forward(s, e)?;
        let wk = s.param(self.w_key.weight);
        let wh = s.tape.slice_rows(wk, 0, d)?;
        let mut keys = s.tape.matmul(state.h, wh)?;
        if phi_in_keys {
            let wphi = s.tape.slice_rows(wk, d, 1)?;
            let phi_term = s.tape.matmul(state.phi, wphi)?;
            keys = s.tape.add(keys, phi_term)?;
        }
        let scores = s.tape.matmul_t(queries, keys)?;
        let scores = s.tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        s.tape.row_project(scores, kind, None)
    }

    /// `Δh`, `Δφ` for the given `(k, i)` pairs.
    pub fn effects_for(
        &self,
        s: &mut Session,
        state: &ModelState,
        phi_in_effects: bool,
        pairs: Pairs,
    ) -> TensorResult<Effects> {
        let d = self.settings.d_model;
        let dr = self.settings.d_rule;
        let e = s.param(self.embeddings);
        let mut nodes = vec![InputBlock { value: state.h, row: 0 }];
        if phi_in_effects {
            nodes.push(InputBlock { value: state.phi, row: d });
        }
        let rules = [InputBlock { value: e, row: d + 1 }];
        let time = [(self.settings.time_encoding.encode(state.t, self.settings.steps), d + 1 + dr)];
        let dh = self.mlp_h.forward_pairs(s, &nodes, &rules, &time, pairs.clone())?;
        let dphi = self.mlp_phi.forward_pairs(s, &nodes, &rules, &time, pairs.clone())?;
        Ok(Effects { dh, dphi, pairs })
    }

    /// Effects for every rule and node, reshaped to `K×N×d` and `K×N`.
    pub fn effect_computation(
        &self,
        s: &mut Session,
        state: &ModelState,
        phi_in_effects: bool,
    ) -> TensorResult<(Var, Var)> {
        let n = state.nodes(s);
        let k = self.settings.rules;
        let fx = self.effects_for(s, state, phi_in_effects, all_pairs(k, n))?;
        let dh = s.tape.reshape(fx.dh, &[k, n, self.settings.d_model])?;
        let dphi = s.tape.reshape(fx.dphi, &[k, n])?;
        Ok((dh, dphi))
    }

    /// `α ⊗ β` as a `K×N` matrix.
    pub fn gate(&self, s: &mut Session, alpha: Var, beta: Var) -> TensorResult<Var> {
        s.tape.scale_rows(beta, alpha)
    }

    /// Applies gated effects to `h` and (when `update_phi`) to `φ`.
    pub fn gated_update(
        &self,
        s: &mut Session,
        state: &ModelState,
        gate: Var,
        effects: &Effects,
        update_phi: bool,
    ) -> TensorResult<ModelState> {
        let dh = s.tape.gated_sum(gate, effects.dh, effects.pairs.clone())?;
        let pre = s.tape.add(state.h, dh)?;
        let h = s
            .tape
            .layer_norm(pre, s.param(self.ln_gamma), s.param(self.ln_beta), LAYER_NORM_EPS)?;
        let phi = if update_phi {
            let dphi = s.tape.gated_sum(gate, effects.dphi, effects.pairs.clone())?;
            let raw = s.tape.add(state.phi, dphi)?;
            let bound = self.settings.phi_max;
            s.tape.clamp(raw, -bound, bound)?
        } else {
            state.phi
        };
        Ok(ModelState { h, phi, ..*state })
    }

    /// `Φ ← Φ + Σ_k α_k tanh(MLP_Φ([h̄, φ̄, E_k]))`. Returns the new state and
    /// the per-rule `K×1` contributions.
    pub fn global_phi_update(
        &self,
        s: &mut Session,
        state: &ModelState,
        summary: &Summary,
        alpha: Var,
    ) -> TensorResult<(ModelState, Var)> {
        let raw = self.per_rule(s, &self.mlp_global, summary)?;
        let delta = s.tape.tanh(raw)?;
        let weighted = s.tape.mul(alpha, delta)?;
        let total = s.tape.sum_all(weighted)?;
        // |Σ α_k tanh(·)| ≤ 1 holds exactly only in real arithmetic; α sums to
        // one up to rounding, so saturated terms can overshoot by an ulp.
        let total = s.tape.clamp(total, -1.0, 1.0)?;
        let total = s.tape.reshape(total, &[1, 1])?;
        let global_phi = s.tape.add(state.global_phi, total)?;
        Ok((ModelState { global_phi, ..*state }, delta))
    }

    /// One full step; advances `t`.
    pub fn step(
        &self,
        s: &mut Session,
        state: &ModelState,
        kind: ProjectionKind,
        flags: DspFlags,
    ) -> TensorResult<(ModelState, StepDiagnostics)> {
        let n = state.nodes(s);
        let k = self.settings.rules;
        if s.value(state.phi).shape() != [n, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "dsp_step",
                lhs: s.value(state.phi).shape().to_vec(),
                rhs: vec![n, 1],
            });
        }
        let summary = self.summarize(s, state, flags)?;
        let alpha = self.rule_activation(s, &summary, kind)?;
        let beta = self.node_selection(s, state, kind, flags.use_phi && flags.phi_in_keys)?;
        let gate = self.gate(s, alpha, beta)?;
        let pairs: Pairs = match kind {
            ProjectionKind::Softmax => all_pairs(k, n),
            ProjectionKind::Sparsemax => {
                let g = s.value(gate);
                (0..k)
                    .flat_map(|r| (0..n).map(move |i| (r, i)))
                    .filter(|&(r, i)| g.at(r, i) > 0.0)
                    .collect()
            }
        };
        let effects = self.effects_for(s, state, flags.use_phi && flags.phi_in_effects, pairs.clone())?;
        let updated = self.gated_update(s, state, gate, &effects, flags.use_phi)?;
        let (updated, delta_global) = if flags.use_global_phi {
            let (st, delta) = self.global_phi_update(s, &updated, &summary, alpha)?;
            (st, s.value(delta).data().to_vec())
        } else {
            (updated, Vec::new())
        };
        let diag = StepDiagnostics {
            alpha: s.value(alpha).data().to_vec(),
            beta: s.value(beta).data().to_vec(),
            delta_global,
            active_pairs: pairs.len(),
        };
        Ok((ModelState { t: state.t + 1, ..updated }, diag))
    }
}
