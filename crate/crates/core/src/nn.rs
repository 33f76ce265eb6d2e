//! Named parameter storage and the small layers built on it.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::SplitMix64;
use crate::tensor::{Pairs, Tape, Tensor, TensorResult, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies to this parameter.
    pub decay: bool,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.find(name).map(|id| &self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.find(name)?;
        Some(&mut self.entries[id.0].value)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

/// Inverted dropout with its own random stream. Masks draw from splitmix64,
/// which is plenty for Bernoulli masks and much cheaper than ChaCha.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    rng: SplitMix64,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout {
            rate,
            rng: SplitMix64::new(seed),
        }
    }
}

/// One forward pass: a fresh tape with every parameter bound as a leaf.
pub struct Session {
    pub tape: Tape,
    vars: Vec<Var>,
    dropout: Option<Dropout>,
}

impl Session {
    /// Binds `store` onto a new tape. `dropout` is `None` in evaluation mode.
    pub fn new(store: &ParamStore, dropout: Option<Dropout>) -> Self {
        let mut tape = Tape::new();
        let vars = store.entries.iter().map(|e| tape.param(e.value.clone())).collect();
        Session { tape, vars, dropout }
    }

    pub fn param(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted-dropout mask of `len` entries, or `None` in evaluation mode.
    /// Each entry consumes 32 random bits.
    pub fn dropout_mask(&mut self, len: usize) -> Option<Arc<[f64]>> {
        let drop = self.dropout.as_mut().filter(|d| d.rate > 0.0)?;
        let keep = 1.0 - drop.rate;
        let threshold = keep * 4_294_967_296.0;
        let scale = 1.0 / keep;
        let mut mask = Vec::with_capacity(len + 1);
        while mask.len() < len {
            let bits = drop.rng.next().expect("infinite sequence");
            for half in [bits as u32, (bits >> 32) as u32] {
                mask.push(if f64::from(half) < threshold { scale } else { 0.0 });
            }
        }
        mask.truncate(len);
        Some(mask.into())
    }

    pub fn dropout(&mut self, x: Var) -> TensorResult<Var> {
        match self.dropout_mask(self.tape.value(x).len()) {
            Some(mask) => self.tape.mul_const(x, mask),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

/// Draws a `rows×cols` matrix uniformly from `±1/√fan_in`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("init shape")
}

/// Affine map `x·W + b` with `W` stored as `in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, fan_in), true);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), false));
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> TensorResult<Var> {
        self.forward_with(s, x, None, false)
    }

    /// `act(x·W + b)`, followed by dropout when `dropout` is set.
    fn forward_with(&self, s: &mut Session, x: Var, act: Option<Activation>, dropout: bool) -> TensorResult<Var> {
        let mask = if dropout {
            s.dropout_mask(s.tape.value(x).rows() * self.fan_out)
        } else {
            None
        };
        let bias = self.bias.map(|b| s.param(b));
        s.tape.dense(x, s.param(self.weight), bias, act, mask)
    }
}

/// A block of input features: its value and the first weight row it multiplies.
#[derive(Debug, Clone, Copy)]
pub struct InputBlock {
    pub value: Var,
    pub row: usize,
}

/// Multi-layer perceptron: `hidden_layers` hidden layers of equal width with an
/// activation and dropout after each, then a final affine layer.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        hidden_layers: usize,
        output: usize,
        activation: Activation,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden_layers + 1);
        let mut width = input;
        for l in 0..hidden_layers {
            layers.push(Linear::new(store, rng, &format!("{name}.{l}"), width, hidden, true));
            width = hidden;
        }
        layers.push(Linear::new(store, rng, &format!("{name}.{hidden_layers}"), width, output, true));
        Mlp { layers, activation }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }

    /// Hidden layers after the first, then the output layer.
    fn finish(&self, s: &mut Session, mut x: Var) -> TensorResult<Var> {
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate().skip(1) {
            x = if l < last {
                layer.forward_with(s, x, Some(self.activation), true)?
            } else {
                layer.forward(s, x)?
            };
        }
        Ok(x)
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> TensorResult<Var> {
        let first = if self.layers.len() > 1 {
            self.layers[0].forward_with(s, x, Some(self.activation), true)?
        } else {
            self.layers[0].forward(s, x)?
        };
        self.finish(s, first)
    }

    /// Applies the MLP to `concat(node_part[i], rule_part[k])` for every
    /// `(k, i)` in `pairs` without materializing the concatenation. The first
    /// layer is split by weight rows: node blocks give an `N×m` term, rule
    /// blocks (plus bias and any `scalars` × weight row) give a `K×m` term.
    /// Rows of the first weight not covered by a block act on zero inputs.
    pub fn forward_pairs(
        &self,
        s: &mut Session,
        node_blocks: &[InputBlock],
        rule_blocks: &[InputBlock],
        scalars: &[(f64, usize)],
        pairs: Pairs,
    ) -> TensorResult<Var> {
        let first = self.layers[0];
        let w = s.param(first.weight);
        let node_term = project_blocks(s, w, node_blocks)?;
        let mut rule_term = project_blocks(s, w, rule_blocks)?;
        for &(value, row) in scalars {
            let wr = s.tape.slice_rows(w, row, 1)?;
            let wr = s.tape.scale(wr, value)?;
            rule_term = s.tape.add_bias(rule_term, wr)?;
        }
        if let Some(b) = first.bias {
            rule_term = s.tape.add_bias(rule_term, s.param(b))?;
        }
        let pre = s.tape.pair_add(node_term, rule_term, pairs)?;
        if self.layers.len() == 1 {
            return Ok(pre);
        }
        let mask = s.dropout_mask(s.tape.value(pre).len());
        let hidden = s.tape.activate(pre, self.activation, mask)?;
        self.finish(s, hidden)
    }
}

fn project_blocks(s: &mut Session, w: Var, blocks: &[InputBlock]) -> TensorResult<Var> {
    let mut acc: Option<Var> = None;
    for block in blocks {
        let width = s.tape.value(block.value).cols();
        let wb = s.tape.slice_rows(w, block.row, width)?;
        let term = s.tape.matmul(block.value, wb)?;
        acc = Some(match acc {
            Some(a) => s.tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one input block"))
}

/// All `(k, i)` pairs for `k < rules`, `i < nodes`, rule-major.
pub fn all_pairs(rules: usize, nodes: usize) -> Pairs {
    (0..rules).flat_map(|k| (0..nodes).map(move |i| (k, i))).collect()
}
