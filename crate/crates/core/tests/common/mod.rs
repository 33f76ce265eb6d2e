#![allow(dead_code, clippy::needless_range_loop)]

use uck::model::{ModelConfig, PreparedInstance, UckModel};
use uck::nn::{ParamStore, Session};
use uck::tasks::{generate_one, Task};
use uck::tensor::{Tape, Tensor, TensorResult, Var};

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    diff / norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied())).max(floor)
}

/// Fixed pseudo-random weights in [-1, 1] so `Σ w ⊙ out` exercises every output.
pub fn probe_weights(len: usize, salt: u64) -> Vec<f64> {
    let mut rng = uck::rng::SplitMix64::new(salt ^ 0x5eed);
    (0..len)
        .map(|_| (rng.next().unwrap() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
        .collect()
}

/// Scalar probe `Σ w ⊙ f(inputs)` and the analytic gradients for each input.
fn probe<F>(inputs: &[Tensor], f: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Tape, &[Var]) -> TensorResult<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars).expect("forward");
    let w = probe_weights(tape.value(out).len(), 7);
    let w = tape.constant(Tensor::new(tape.value(out).shape().to_vec(), w).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum_all(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let per_input = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    (tape.value(loss).item(), per_input)
}

/// Largest per-input relative error between the tape gradient of a probe of
/// `f` and central differences with step `h`.
pub fn op_gradcheck<F>(inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> TensorResult<Var>,
{
    let (_, analytic) = probe(inputs, &f);
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (probe(&plus, &f).0 - probe(&minus, &f).0) / (2.0 * h);
        }
        worst = worst.max(rel_error(a, &numeric, 1e-8));
    }
    worst
}

/// Evaluation-mode loss of `model` on `input`.
pub fn model_loss(model: &UckModel, input: &PreparedInstance) -> f64 {
    model.loss_and_gradient(input, None).unwrap().loss
}

/// Per parameter group: name and relative error between the analytic
/// gradient and central differences with step `h` over every coordinate.
pub fn model_gradcheck(model: &mut UckModel, input: &PreparedInstance, h: f64) -> Vec<(String, f64)> {
    let analytic = model.loss_and_gradient(input, None).unwrap().grads;
    let mut out = Vec::new();
    for (g, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let orig = model.store.entries()[g].value.data()[j];
            model.store.entries_mut()[g].value.data_mut()[j] = orig + h;
            let up = model_loss(model, input);
            model.store.entries_mut()[g].value.data_mut()[j] = orig - h;
            let down = model_loss(model, input);
            model.store.entries_mut()[g].value.data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * h);
        }
        out.push((model.store.entries()[g].name.clone(), rel_error(a, &numeric, 1e-8)));
    }
    out
}

pub fn small_config(task: Task) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_rule: 8,
        rules: 3,
        steps: 2,
        input_dim: task.feature_width(),
        head: task.head(),
        seed: 11,
        ..ModelConfig::default()
    }
}

/// First generated instance of `task` at `size` with exactly `nodes` nodes, if
/// any seed below 10 000 yields one.
pub fn instance_with_nodes(task: Task, size: usize, nodes: usize) -> PreparedInstance {
    (0..10_000u64)
        .filter_map(|seed| generate_one(task, size, seed).unwrap())
        .find(|g| g.n_nodes == nodes)
        .expect("an instance of the requested size")
        .prepare()
        .unwrap()
}

pub fn random_tensor(shape: &[usize], salt: u64, scale: f64) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), probe_weights(len, salt).into_iter().map(|x| x * scale).collect()).unwrap()
}


fn session_probe<F>(store: &ParamStore, inputs: &[Tensor], f: &F) -> (f64, Vec<Vec<f64>>)
where
    F: Fn(&mut Session, &[Var]) -> TensorResult<Var>,
{
    let mut s = Session::new(store, None);
    let vars: Vec<Var> = inputs.iter().map(|t| s.tape.param(t.clone())).collect();
    let out = f(&mut s, &vars).expect("forward");
    let w = probe_weights(s.value(out).len(), 7);
    let w = s.constant(Tensor::new(s.value(out).shape().to_vec(), w).unwrap());
    let prod = s.tape.mul(out, w).unwrap();
    let loss = s.tape.sum_all(prod).unwrap();
    let grads = s.tape.backward(loss).unwrap();
    let leaves: Vec<(Var, usize)> = s
        .param_vars()
        .iter()
        .zip(store.entries())
        .map(|(&v, e)| (v, e.value.len()))
        .chain(vars.iter().zip(inputs).map(|(&v, t)| (v, t.len())))
        .collect();
    let g = leaves
        .into_iter()
        .map(|(v, len)| grads.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec))
        .collect();
    (s.value(loss).item(), g)
}

/// Like [`op_gradcheck`] for computations that also read parameters from
/// `store`; reports the worst error over parameter groups and inputs.
pub fn session_gradcheck<F>(store: &mut ParamStore, inputs: &[Tensor], h: f64, f: F) -> f64
where
    F: Fn(&mut Session, &[Var]) -> TensorResult<Var>,
{
    let (_, analytic) = session_probe(store, inputs, &f);
    let groups = store.len();
    let mut worst = 0.0f64;
    for (g, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.len()];
        for j in 0..a.len() {
            let eval = |store: &mut ParamStore, delta: f64| {
                let mut xs = inputs.to_vec();
                if g >= groups {
                    xs[g - groups].data_mut()[j] += delta;
                    return session_probe(store, &xs, &f).0;
                }
                let orig = store.entries()[g].value.data()[j];
                store.entries_mut()[g].value.data_mut()[j] = orig + delta;
                let loss = session_probe(store, &xs, &f).0;
                store.entries_mut()[g].value.data_mut()[j] = orig;
                loss
            };
            numeric[j] = (eval(store, h) - eval(store, -h)) / (2.0 * h);
        }
        worst = worst.max(rel_error(a, &numeric, 1e-8));
    }
    worst
}
