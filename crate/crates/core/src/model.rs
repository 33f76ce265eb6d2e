//! The full kernel: input embedding, `T` rollout steps of graph attention
//! followed by a DSP step, and a classification head.

use serde::{Deserialize, Serialize};

use crate::attention::{AdjacencyMask, GraphAttention};
use crate::dsp::{DspDiagnostics, DspFlags, DspSettings, ModelState, RuleBank, TimeEncoding};
use crate::error::{Error, Result};
use crate::nn::{Activation, Dropout, Linear, Mlp, ParamStore, Session};
use crate::projection::ProjectionKind;
use crate::rng::rng_from_seed;
use crate::tensor::{Tensor, TensorError, TensorResult, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Reads out the source and target nodes.
    Endpoint,
    /// Reads out node means.
    Global,
}

/// Named ablation configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    Full,
    NoPhi,
    NoGlobalPhi,
    PhiKeysOnly,
    PhiEffectsOnly,
    NoDsp,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::Full,
        Ablation::NoPhi,
        Ablation::NoGlobalPhi,
        Ablation::PhiKeysOnly,
        Ablation::PhiEffectsOnly,
        Ablation::NoDsp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPhi => "no-phi",
            Ablation::NoGlobalPhi => "no-global-phi",
            Ablation::PhiKeysOnly => "phi-keys-only",
            Ablation::PhiEffectsOnly => "phi-effects-only",
            Ablation::NoDsp => "no-dsp",
        }
    }

    /// Sets the ablation switches of `config`, leaving everything else alone.
    pub fn apply(self, config: &mut ModelConfig) {
        let (use_dsp, use_phi, use_global_phi, keys, effects) = match self {
            Ablation::Full => (true, true, true, true, true),
            Ablation::NoPhi => (true, false, true, false, false),
            Ablation::NoGlobalPhi => (true, true, false, true, true),
            Ablation::PhiKeysOnly => (true, true, true, true, false),
            Ablation::PhiEffectsOnly => (true, true, true, false, true),
            Ablation::NoDsp => (false, false, false, false, false),
        };
        config.use_dsp = use_dsp;
        config.use_phi = use_phi;
        config.use_global_phi = use_global_phi;
        config.phi_in_keys = keys;
        config.phi_in_effects = effects;
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_rule: usize,
    /// Number of rules `K`.
    pub rules: usize,
    /// Rollout steps `T`.
    pub steps: usize,
    pub phi_max: f64,
    pub dropout: f64,
    pub attention: ProjectionKind,
    pub heads: usize,
    pub mlp_hidden_layers: usize,
    pub activation: Activation,
    pub time_encoding: TimeEncoding,
    pub use_dsp: bool,
    pub use_phi: bool,
    pub use_global_phi: bool,
    pub phi_in_keys: bool,
    pub phi_in_effects: bool,
    pub head: HeadKind,
    /// Width of the per-node input feature rows.
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            d_rule: 64,
            rules: 12,
            steps: 4,
            phi_max: 6.0,
            dropout: 0.1,
            attention: ProjectionKind::Sparsemax,
            heads: 1,
            mlp_hidden_layers: 2,
            activation: Activation::Relu,
            time_encoding: TimeEncoding::Fraction,
            use_dsp: true,
            use_phi: true,
            use_global_phi: true,
            phi_in_keys: true,
            phi_in_effects: true,
            head: HeadKind::Endpoint,
            input_dim: 4,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.d_model == 0 {
            out.push("d_model must be at least 1".into());
        }
        if self.d_rule == 0 {
            out.push("d_rule must be at least 1".into());
        }
        if self.rules == 0 {
            out.push("rules (K) must be at least 1".into());
        }
        if self.steps == 0 {
            out.push("steps (T) must be at least 1".into());
        }
        if !(self.phi_max > 0.0 && self.phi_max.is_finite()) {
            out.push(format!("phi_max must be positive and finite, got {}", self.phi_max));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            out.push(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.heads == 0 || (self.d_model > 0 && !self.d_model.is_multiple_of(self.heads)) {
            out.push(format!("heads ({}) must be positive and divide d_model ({})", self.heads, self.d_model));
        }
        if self.input_dim == 0 {
            out.push("input_dim must be at least 1".into());
        }
        if !self.use_phi && (self.phi_in_keys || self.phi_in_effects) {
            out.push("phi_in_keys and phi_in_effects require use_phi".into());
        }
        if !self.use_dsp && (self.use_phi || self.use_global_phi) {
            out.push("use_phi and use_global_phi require use_dsp".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn flags(&self) -> DspFlags {
        DspFlags {
            use_phi: self.use_phi,
            use_global_phi: self.use_global_phi,
            phi_in_keys: self.phi_in_keys,
            phi_in_effects: self.phi_in_effects,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        ablation.apply(&mut self);
        self
    }

    fn classifier_input(&self) -> usize {
        match self.head {
            HeadKind::Endpoint => 2 * self.d_model + 3,
            HeadKind::Global => self.d_model + 2,
        }
    }
}

/// A graph ready for the model: features, attention mask, optional endpoints.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    /// `N×input_dim`.
    pub features: Tensor,
    pub mask: AdjacencyMask,
    pub src: Option<usize>,
    pub tgt: Option<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointReadout {
    pub h_src: Vec<f64>,
    pub h_tgt: Vec<f64>,
    pub phi_src: f64,
    pub phi_tgt: f64,
}

/// Values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: [f64; 2],
    pub diagnostics: DspDiagnostics,
    pub readout: Option<EndpointReadout>,
}

impl ForwardOutput {
    /// Argmax prediction; exact ties go to class 0.
    pub fn prediction(&self) -> usize {
        usize::from(self.logits[1] > self.logits[0])
    }

    pub fn is_tie(&self) -> bool {
        self.logits[0] == self.logits[1]
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `1×2`.
    pub logits: Var,
    pub state: ModelState,
    pub diagnostics: DspDiagnostics,
}

/// Loss, logits and per-parameter gradients of one instance.
#[derive(Debug, Clone)]
pub struct InstanceGradient {
    pub loss: f64,
    pub logits: [f64; 2],
    /// Indexed like the parameter store; zero where the loss does not reach.
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct UckModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embed: Linear,
    pub attention: GraphAttention,
    pub bank: Option<RuleBank>,
    pub classifier: Mlp,
}

impl UckModel {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = Linear::new(&mut store, &mut rng, "embed", config.input_dim, d, true);
        let attention = GraphAttention::new(&mut store, &mut rng, "attention", d, config.heads);
        let bank = config.use_dsp.then(|| {
            RuleBank::new(
                &mut store,
                &mut rng,
                "dsp",
                DspSettings {
                    d_model: d,
                    d_rule: config.d_rule,
                    rules: config.rules,
                    steps: config.steps,
                    phi_max: config.phi_max,
                    mlp_hidden_layers: config.mlp_hidden_layers,
                    activation: config.activation,
                    time_encoding: config.time_encoding,
                },
            )
        });
        let classifier = Mlp::new(
            &mut store,
            &mut rng,
            "classifier",
            config.classifier_input(),
            d,
            config.mlp_hidden_layers,
            2,
            config.activation,
        );
        Ok(UckModel {
            config,
            store,
            embed,
            attention,
            bank,
            classifier,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Evaluation-mode session (no dropout).
    pub fn eval_session(&self) -> Session {
        Session::new(&self.store, None)
    }

    /// Training-mode session with dropout drawn from `seed`.
    pub fn train_session(&self, seed: u64) -> Session {
        Session::new(&self.store, Some(Dropout::new(self.config.dropout, seed)))
    }

    /// Embeds node features and starts the rollout state.
    pub fn encode_input(&self, s: &mut Session, input: &PreparedInstance) -> TensorResult<ModelState> {
        let f = &input.features;
        if f.rank() != 2 || f.cols() != self.config.input_dim {
            return Err(TensorError::ShapeMismatch {
                op: "encode_input",
                lhs: f.shape().to_vec(),
                rhs: vec![f.rows(), self.config.input_dim],
            });
        }
        if f.rows() != input.mask.nodes() {
            return Err(TensorError::invalid(
                "encode_input",
                format!("{} feature rows for a {}-node mask", f.rows(), input.mask.nodes()),
            ));
        }
        let x = s.constant(f.clone());
        let h = self.embed.forward(s, x)?;
        Ok(ModelState::initial(s, h))
    }

    /// `T` steps of graph attention, each followed by a DSP step when enabled.
    pub fn rollout(
        &self,
        s: &mut Session,
        mut state: ModelState,
        mask: &AdjacencyMask,
    ) -> TensorResult<(ModelState, DspDiagnostics)> {
        let mut diag = DspDiagnostics {
            global_phi_trace: vec![s.value(state.global_phi).item()],
            ..Default::default()
        };
        let kind = self.config.attention;
        for _ in 0..self.config.steps {
            state.h = self.attention.step(s, state.h, mask, kind)?;
            match &self.bank {
                Some(bank) => {
                    let (next, step) = bank.step(s, &state, kind, self.config.flags())?;
                    state = next;
                    diag.steps.push(step);
                }
                None => state.t += 1,
            }
            diag.global_phi_trace.push(s.value(state.global_phi).item());
        }
        diag.final_phi = s.value(state.phi).data().to_vec();
        Ok((state, diag))
    }

    fn phi_slot(&self, s: &mut Session, state: &ModelState, rows: &[usize]) -> TensorResult<Var> {
        if self.config.use_phi {
            s.tape.select_rows(state.phi, rows)
        } else {
            Ok(s.constant(Tensor::zeros(&[rows.len(), 1])))
        }
    }

    fn global_slot(&self, s: &mut Session, state: &ModelState) -> Var {
        if self.config.use_global_phi {
            state.global_phi
        } else {
            s.constant(Tensor::zeros(&[1, 1]))
        }
    }

    /// `MLP_cls([h_src, h_tgt, φ_src, φ_tgt, Φ])`.
    pub fn classify_endpoint(&self, s: &mut Session, state: &ModelState, src: usize, tgt: usize) -> TensorResult<Var> {
        let n = state.nodes(s);
        if src >= n || tgt >= n {
            return Err(TensorError::invalid(
                "classify_endpoint",
                format!("endpoints ({src}, {tgt}) outside {n} nodes"),
            ));
        }
        let h_src = s.tape.select_rows(state.h, &[src])?;
        let h_tgt = s.tape.select_rows(state.h, &[tgt])?;
        let phi_src = self.phi_slot(s, state, &[src])?;
        let phi_tgt = self.phi_slot(s, state, &[tgt])?;
        let global = self.global_slot(s, state);
        let x = s.tape.concat(&[h_src, h_tgt, phi_src, phi_tgt, global], 1)?;
        self.classifier.forward(s, x)
    }

    /// `MLP_cls([mean(h), mean(φ), Φ])`.
    pub fn classify_global(&self, s: &mut Session, state: &ModelState) -> TensorResult<Var> {
        let h_mean = s.tape.mean_axis(state.h, 0)?;
        let phi_mean = if self.config.use_phi {
            s.tape.mean_axis(state.phi, 0)?
        } else {
            s.constant(Tensor::zeros(&[1, 1]))
        };
        let global = self.global_slot(s, state);
        let x = s.tape.concat(&[h_mean, phi_mean, global], 1)?;
        self.classifier.forward(s, x)
    }

    pub fn forward(&self, s: &mut Session, input: &PreparedInstance) -> TensorResult<ForwardVars> {
        let state = self.encode_input(s, input)?;
        let (state, diagnostics) = self.rollout(s, state, &input.mask)?;
        let logits = match self.config.head {
            HeadKind::Endpoint => {
                let (Some(src), Some(tgt)) = (input.src, input.tgt) else {
                    return Err(TensorError::invalid("forward", "endpoint head needs source and target nodes"));
                };
                self.classify_endpoint(s, &state, src, tgt)?
            }
            HeadKind::Global => self.classify_global(s, &state)?,
        };
        Ok(ForwardVars {
            logits,
            state,
            diagnostics,
        })
    }

    /// Evaluation-mode forward pass returning plain values.
    pub fn predict(&self, input: &PreparedInstance) -> TensorResult<ForwardOutput> {
        let mut s = self.eval_session();
        let out = self.forward(&mut s, input)?;
        let l = s.value(out.logits).data();
        let readout = match (self.config.head, input.src, input.tgt) {
            (HeadKind::Endpoint, Some(src), Some(tgt)) => {
                let h = s.value(out.state.h);
                let phi = s.value(out.state.phi);
                Some(EndpointReadout {
                    h_src: h.row(src).to_vec(),
                    h_tgt: h.row(tgt).to_vec(),
                    phi_src: phi.data()[src],
                    phi_tgt: phi.data()[tgt],
                })
            }
            _ => None,
        };
        Ok(ForwardOutput {
            logits: [l[0], l[1]],
            diagnostics: out.diagnostics,
            readout,
        })
    }

    /// Cross-entropy loss of one instance and its gradient for every parameter.
    /// `dropout_seed` selects training mode.
    pub fn loss_and_gradient(&self, input: &PreparedInstance, dropout_seed: Option<u64>) -> TensorResult<InstanceGradient> {
        let mut s = match dropout_seed {
            Some(seed) => self.train_session(seed),
            None => self.eval_session(),
        };
        let out = self.forward(&mut s, input)?;
        let flat = s.tape.reshape(out.logits, &[2])?;
        let loss = s.tape.cross_entropy(flat, input.label)?;
        let grads = s.tape.backward(loss)?;
        let l = s.value(flat).data();
        let logits = [l[0], l[1]];
        let per_param = s
            .param_vars()
            .iter()
            .zip(self.store.entries())
            .map(|(&v, e)| grads.get(v).map_or_else(|| vec![0.0; e.value.len()], <[f64]>::to_vec))
            .collect();
        Ok(InstanceGradient {
            loss: s.value(loss).item(),
            logits,
            grads: per_param,
        })
    }
}
