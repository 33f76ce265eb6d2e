mod common;

use common::{random_tensor, session_gradcheck};
use uck::dsp::{DspFlags, DspSettings, Effects, ModelState, RuleBank, TimeEncoding};
use uck::nn::{all_pairs, Activation, Linear, Mlp, ParamStore, Session};
use uck::projection::ProjectionKind;
use uck::rng::rng_from_seed;
use uck::tensor::{Tensor, Var};

fn settings(d: usize, k: usize) -> DspSettings {
    DspSettings {
        d_model: d,
        d_rule: d,
        rules: k,
        steps: 4,
        phi_max: 6.0,
        mlp_hidden_layers: 2,
        activation: Activation::Relu,
        time_encoding: TimeEncoding::Fraction,
    }
}

fn bank(d: usize, k: usize, seed: u64) -> (ParamStore, RuleBank) {
    let mut store = ParamStore::new();
    let b = RuleBank::new(&mut store, &mut rng_from_seed(seed), "dsp", settings(d, k));
    (store, b)
}

fn state(s: &mut Session, h: &Tensor, phi: &Tensor) -> ModelState {
    let h = s.constant(h.clone());
    let mut st = ModelState::initial(s, h);
    st.phi = s.constant(phi.clone());
    st
}

fn zero_linear(store: &mut ParamStore, l: &Linear) {
    store.entries_mut()[l.weight.index()].value.data_mut().fill(0.0);
    if let Some(b) = l.bias {
        store.entries_mut()[b.index()].value.data_mut().fill(0.0);
    }
}

fn set(store: &mut ParamStore, l: &Linear, row: usize, col: usize, v: f64) {
    let w = &mut store.entries_mut()[l.weight.index()].value;
    let cols = w.cols();
    w.data_mut()[row * cols + col] = v;
}

fn bias(store: &mut ParamStore, mlp: &Mlp, v: f64) {
    let b = mlp.last().bias.unwrap();
    store.entries_mut()[b.index()].value.data_mut().fill(v);
}

#[test]
fn identical_rules_get_uniform_activation() {
    let (d, k) = (8, 4);
    let (mut store, b) = bank(d, k, 1);
    let row = random_tensor(&[1, d], 2, 1.0);
    let emb = &mut store.entries_mut()[b.embeddings.index()].value;
    for r in 0..k {
        emb.data_mut()[r * d..(r + 1) * d].copy_from_slice(row.data());
    }
    let mut s = Session::new(&store, None);
    let st = state(&mut s, &random_tensor(&[5, d], 3, 1.0), &random_tensor(&[5, 1], 4, 1.0));
    for kind in [ProjectionKind::Sparsemax, ProjectionKind::Softmax] {
        let summary = b.summarize(&mut s, &st, DspFlags::default()).unwrap();
        let alpha = b.rule_activation(&mut s, &summary, kind).unwrap();
        for &a in s.value(alpha).data() {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }
}

#[test]
fn dominant_rule_logit_gives_one_hot_activation() {
    let (d, k) = (4, 3);
    let (mut store, b) = bank(d, k, 5);
    // logit_k = 2·E_k[0] through identity-like hidden units.
    for l in &b.mlp_alpha.layers {
        zero_linear(&mut store, l);
    }
    set(&mut store, &b.mlp_alpha.layers[0], d + 1, 0, 1.0);
    set(&mut store, &b.mlp_alpha.layers[1], 0, 0, 1.0);
    set(&mut store, &b.mlp_alpha.layers[2], 0, 0, 2.0);
    let emb = &mut store.entries_mut()[b.embeddings.index()].value;
    emb.data_mut().fill(0.0);
    emb.data_mut()[0] = 1.0;
    let mut s = Session::new(&store, None);
    let st = state(&mut s, &random_tensor(&[3, d], 6, 1.0), &Tensor::zeros(&[3, 1]));
    let summary = b.summarize(&mut s, &st, DspFlags::default()).unwrap();
    let alpha = b.rule_activation(&mut s, &summary, ProjectionKind::Sparsemax).unwrap();
    assert_eq!(s.value(alpha).data(), &[1.0, 0.0, 0.0]);
    let alpha = b.rule_activation(&mut s, &summary, ProjectionKind::Softmax).unwrap();
    assert!(s.value(alpha).data().iter().all(|&a| a > 0.0));
}

#[test]
fn node_selection_examples() {
    let (d, k) = (4, 3);
    let (mut store, b) = bank(d, k, 7);
    let kind = ProjectionKind::Sparsemax;
    {
        let mut s = Session::new(&store, None);
        let st = state(&mut s, &random_tensor(&[1, d], 8, 1.0), &Tensor::zeros(&[1, 1]));
        let beta = b.node_selection(&mut s, &st, kind, true).unwrap();
        assert_eq!(s.value(beta).data(), &[1.0, 1.0, 1.0]);

        let row = random_tensor(&[1, d], 9, 1.0);
        let twin = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec()]).unwrap();
        let st = state(&mut s, &twin, &Tensor::zeros(&[2, 1]));
        let beta = b.node_selection(&mut s, &st, kind, true).unwrap();
        let beta = s.value(beta);
        for r in 0..k {
            assert_eq!(beta.at(r, 0), beta.at(r, 1));
        }
    }
    // Identity query/key maps make the score E_k · h_i / √d; node 0 is
    // aligned with every rule and far ahead.
    zero_linear(&mut store, &b.w_query);
    zero_linear(&mut store, &b.w_key);
    for i in 0..d {
        set(&mut store, &b.w_query, i, i, 1.0);
        set(&mut store, &b.w_key, i, i, 1.0);
    }
    store.entries_mut()[b.embeddings.index()].value.data_mut().fill(0.5);
    let mut s = Session::new(&store, None);
    let h = Tensor::from_rows(&[vec![5.0; d], vec![0.0; d], vec![-1.0; d]]).unwrap();
    let st = state(&mut s, &h, &Tensor::zeros(&[3, 1]));
    let beta = b.node_selection(&mut s, &st, kind, true).unwrap();
    assert_eq!(s.value(beta).data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn effect_shapes_and_zero_final_layers() {
    let (d, k, n) = (8, 3, 5);
    let (mut store, b) = bank(d, k, 11);
    {
        let mut s = Session::new(&store, None);
        let st = state(&mut s, &random_tensor(&[n, d], 12, 1.0), &random_tensor(&[n, 1], 13, 1.0));
        let (dh, dphi) = b.effect_computation(&mut s, &st, true).unwrap();
        assert_eq!(s.value(dh).shape(), &[k, n, d]);
        assert_eq!(s.value(dphi).shape(), &[k, n]);
        assert!(s.value(dh).data().iter().any(|&v| v != 0.0));
    }
    zero_linear(&mut store, b.mlp_h.last());
    zero_linear(&mut store, b.mlp_phi.last());
    let mut s = Session::new(&store, None);
    let st = state(&mut s, &random_tensor(&[n, d], 12, 1.0), &random_tensor(&[n, 1], 13, 1.0));
    let (dh, dphi) = b.effect_computation(&mut s, &st, true).unwrap();
    assert!(s.value(dh).data().iter().all(|&v| v == 0.0));
    assert!(s.value(dphi).data().iter().all(|&v| v == 0.0));
}

#[test]
fn effect_gradient_wrt_phi() {
    let (d, k, n) = (8, 3, 5);
    let (mut store, b) = bank(d, k, 14);
    let h = random_tensor(&[n, d], 15, 1.0);
    let phi = random_tensor(&[n, 1], 16, 2.0);
    let err = session_gradcheck(&mut store, &[phi], 1e-6, |s, v| {
        let hv = s.constant(h.clone());
        let mut st = ModelState::initial(s, hv);
        st.phi = v[0];
        let (_, dphi) = b.effect_computation(s, &st, true)?;
        s.tape.sum_all(dphi)
    });
    assert!(err < 1e-4, "{err}");
}

/// Gate, effects and state for hand-built update examples.
#[allow(clippy::too_many_arguments)]
fn manual_update(
    b: &RuleBank,
    s: &mut Session,
    h: &Tensor,
    phi: &Tensor,
    alpha: &[f64],
    beta: &Tensor,
    dh: &Tensor,
    dphi: &Tensor,
) -> (ModelState, Var, Var) {
    let (k, n) = (alpha.len(), h.rows());
    let st = state(s, h, phi);
    let a = s.constant(Tensor::new(vec![k, 1], alpha.to_vec()).unwrap());
    let bt = s.constant(beta.clone());
    let gate = b.gate(s, a, bt).unwrap();
    let dh = s.tape.param(dh.clone());
    let dphi = s.tape.param(dphi.clone());
    let fx = Effects {
        dh,
        dphi,
        pairs: all_pairs(k, n),
    };
    (b.gated_update(s, &st, gate, &fx, true).unwrap(), dh, dphi)
}

#[test]
fn gated_update_examples() {
    let (d, k, n) = (4, 2, 3);
    let (store, b) = bank(d, k, 17);
    let h = random_tensor(&[n, d], 18, 1.0);
    let mut s = Session::new(&store, None);

    // One-hot gate on (rule 1, node 2) pushes φ_2 = 5 past the bound.
    let beta = Tensor::new(vec![k, n], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let mut dphi = Tensor::zeros(&[k * n, 1]);
    dphi.data_mut()[n + 2] = 2.0;
    let phi = Tensor::new(vec![n, 1], vec![0.0, 0.0, 5.0]).unwrap();
    let (out, _, _) = manual_update(&b, &mut s, &h, &phi, &[0.0, 1.0], &beta, &Tensor::zeros(&[k * n, d]), &dphi);
    assert_eq!(s.value(out.phi).data(), &[0.0, 0.0, 6.0]);

    // All effects zero: φ unchanged, h normalized.
    let beta = Tensor::full(&[k, n], 1.0 / n as f64);
    let phi = random_tensor(&[n, 1], 19, 3.0);
    let (out, _, _) = manual_update(&b, &mut s, &h, &phi, &[0.5, 0.5], &beta, &Tensor::zeros(&[k * n, d]), &Tensor::zeros(&[k * n, 1]));
    assert_eq!(s.value(out.phi).data(), phi.data());
    let hv = s.constant(h.clone());
    let g = s.param(b.ln_gamma);
    let bb = s.param(b.ln_beta);
    let ln = s.tape.layer_norm(hv, g, bb, uck::attention::LAYER_NORM_EPS).unwrap();
    assert_eq!(s.value(out.h).data(), s.value(ln).data());
}

#[test]
fn inactive_rule_has_no_influence() {
    let (d, k, n) = (4, 2, 3);
    let (store, b) = bank(d, k, 20);
    let h = random_tensor(&[n, d], 21, 1.0);
    let phi = random_tensor(&[n, 1], 22, 1.0);
    let beta = Tensor::full(&[k, n], 1.0 / n as f64);
    let dh = random_tensor(&[k * n, d], 23, 1.0);
    let dphi = random_tensor(&[k * n, 1], 24, 1.0);
    let alpha = [1.0, 0.0];

    let mut s = Session::new(&store, None);
    let (base, dh_var, dphi_var) = manual_update(&b, &mut s, &h, &phi, &alpha, &beta, &dh, &dphi);
    let hsum = s.tape.sum_all(base.h).unwrap();
    let psum = s.tape.sum_all(base.phi).unwrap();
    let both = s.tape.add(hsum, psum).unwrap();
    let grads = s.tape.backward(both).unwrap();
    // Rows n.. belong to rule 1.
    assert!(grads.get(dh_var).unwrap()[n * d..].iter().all(|&g| g == 0.0));
    assert!(grads.get(dphi_var).unwrap()[n..].iter().all(|&g| g == 0.0));

    let mut dh2 = dh.clone();
    dh2.data_mut()[n * d..].iter_mut().for_each(|v| *v += 10.0);
    let mut dphi2 = dphi.clone();
    dphi2.data_mut()[n..].iter_mut().for_each(|v| *v -= 10.0);
    let mut s2 = Session::new(&store, None);
    let (moved, _, _) = manual_update(&b, &mut s2, &h, &phi, &alpha, &beta, &dh2, &dphi2);
    assert_eq!(s.value(base.h).data(), s2.value(moved.h).data());
    assert_eq!(s.value(base.phi).data(), s2.value(moved.phi).data());
}

#[test]
fn global_phi_update_examples() {
    let (d, k, n) = (4, 3, 3);
    let (mut store, b) = bank(d, k, 25);
    zero_linear(&mut store, b.mlp_global.last());
    let h = random_tensor(&[n, d], 26, 1.0);
    let phi = random_tensor(&[n, 1], 27, 1.0);
    {
        let mut s = Session::new(&store, None);
        let mut st = state(&mut s, &h, &phi);
        st.global_phi = s.constant(Tensor::new(vec![1, 1], vec![0.75]).unwrap());
        let summary = b.summarize(&mut s, &st, DspFlags::default()).unwrap();
        let alpha = s.constant(Tensor::new(vec![k, 1], vec![0.2, 0.3, 0.5]).unwrap());
        let (out, _) = b.global_phi_update(&mut s, &st, &summary, alpha).unwrap();
        assert_eq!(s.value(out.global_phi).item(), 0.75);
    }
    bias(&mut store, &b.mlp_global, 0.5f64.atanh());
    let mut s = Session::new(&store, None);
    let st = state(&mut s, &h, &phi);
    let summary = b.summarize(&mut s, &st, DspFlags::default()).unwrap();
    let alpha = s.constant(Tensor::new(vec![k, 1], vec![0.0, 1.0, 0.0]).unwrap());
    let (out, _) = b.global_phi_update(&mut s, &st, &summary, alpha).unwrap();
    assert!((s.value(out.global_phi).item() - 0.5).abs() < 1e-15);
}

fn full_step(store: &ParamStore, b: &RuleBank, h: &Tensor, phi: &Tensor, kind: ProjectionKind, flags: DspFlags) -> (Tensor, Tensor, f64, uck::dsp::StepDiagnostics) {
    let mut s = Session::new(store, None);
    let st = state(&mut s, h, phi);
    let (out, diag) = b.step(&mut s, &st, kind, flags).unwrap();
    assert_eq!(out.t, 1);
    (s.value(out.h).clone(), s.value(out.phi).clone(), s.value(out.global_phi).item(), diag)
}

#[test]
fn step_is_deterministic_and_diagnostics_are_on_the_simplex() {
    let (d, k) = (8, 4);
    let (store, b) = bank(d, k, 28);
    for trial in 0..50u64 {
        let n = 2 + (trial as usize % 7);
        let h = random_tensor(&[n, d], 500 + trial, 2.0);
        let phi = random_tensor(&[n, 1], 600 + trial, 6.0);
        for kind in [ProjectionKind::Sparsemax, ProjectionKind::Softmax] {
            let a = full_step(&store, &b, &h, &phi, kind, DspFlags::default());
            let again = full_step(&store, &b, &h, &phi, kind, DspFlags::default());
            assert_eq!(a.0, again.0);
            assert_eq!(a.1, again.1);
            assert_eq!(a.2.to_bits(), again.2.to_bits());
            let diag = a.3;
            assert!((diag.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for row in diag.beta.chunks(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            assert!(a.1.data().iter().all(|v| v.abs() <= 6.0));
            assert!(a.2.abs() <= 1.0);
        }
    }
}

#[test]
fn without_phi_routes_outputs_ignore_initial_phi() {
    let (d, k, n) = (8, 3, 5);
    let (store, b) = bank(d, k, 29);
    let flags = DspFlags {
        use_phi: false,
        use_global_phi: false,
        phi_in_keys: false,
        phi_in_effects: false,
    };
    let h = random_tensor(&[n, d], 30, 1.0);
    let a = full_step(&store, &b, &h, &Tensor::zeros(&[n, 1]), ProjectionKind::Sparsemax, flags);
    let c = full_step(&store, &b, &h, &random_tensor(&[n, 1], 31, 5.0), ProjectionKind::Sparsemax, flags);
    assert_eq!(a.0, c.0);
    assert_eq!(a.2, 0.0);
    assert_eq!(c.2, 0.0);
    assert_eq!(a.3.alpha, c.3.alpha);
    assert_eq!(a.3.beta, c.3.beta);
}
