use std::sync::Arc;

use super::gemm::gemm;
use super::{Tensor, TensorError, TensorResult};
use crate::nn::Activation;
use crate::projection::{self, ProjectionKind};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// `(rule, node)` index pairs addressed by [`Tape::pair_add`] and [`Tape::gated_sum`].
pub type Pairs = Arc<[(usize, usize)]>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    MulConst { x: Var, mask: Arc<[f64]> },
    Tanh { x: Var },
    Relu { x: Var },
    Dense { x: Var, w: Var, bias: Option<Var>, act: Option<Activation>, mask: Option<Arc<[f64]>> },
    Activate { x: Var, act: Activation, mask: Option<Arc<[f64]>> },
    Concat { inputs: Vec<Var>, outer: usize, inner: usize, sizes: Vec<usize> },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize, factor: f64 },
    SumAll { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Clamp { x: Var, lo: f64, hi: f64 },
    RowProject { x: Var, kind: ProjectionKind, mask: Option<Arc<[bool]>> },
    ScaleRows { x: Var, s: Var },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    Reshape { x: Var },
    PairAdd { nodes: Var, rules: Var, pairs: Pairs },
    GatedSum { gate: Var, delta: Var, pairs: Pairs },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation. Nodes are appended in evaluation
/// order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Nodes that do not require a
/// gradient, or that the loss does not reach, have no entry.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> TensorResult<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::invalid(op, format!("expected a matrix, got shape {other:?}"))),
    }
}

/// `act(y) ⊙ mask` in place.
fn activate_in_place(y: &mut [f64], act: Option<Activation>, mask: Option<&[f64]>) {
    match act {
        Some(Activation::Relu) => y.iter_mut().for_each(|v| *v = v.max(0.0)),
        Some(Activation::Tanh) => y.iter_mut().for_each(|v| *v = v.tanh()),
        None => {}
    }
    if let Some(m) = mask {
        y.iter_mut().zip(m).for_each(|(v, m)| *v *= m);
    }
}

/// Gradient with respect to the pre-activation, given the output `out` of
/// [`activate_in_place`] and the upstream gradient `g`.
fn activation_grad(g: &[f64], out: &[f64], act: Option<Activation>, mask: Option<&[f64]>) -> Vec<f64> {
    let ones;
    let m = match mask {
        Some(m) => m,
        None => {
            ones = vec![1.0; g.len()];
            &ones
        }
    };
    let it = g.iter().zip(out).zip(m);
    match act {
        // out > 0 exactly when the unit is active and kept.
        Some(Activation::Relu) => it.map(|((&g, &o), &m)| if o > 0.0 { g * m } else { 0.0 }).collect(),
        Some(Activation::Tanh) => it
            .map(|((&g, &o), &m)| {
                if m == 0.0 {
                    0.0
                } else {
                    let y = o / m;
                    g * m * (1.0 - y * y)
                }
            })
            .collect(),
        None => it.map(|((&g, _), &m)| g * m).collect(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor, requires_grad: bool) -> TensorResult<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> TensorResult<Var> {
        let name = if trans_b { "matmul_t" } else { "matmul" };
        let (m, k) = matrix_dims(name, self.value(a))?;
        let (br, bc) = matrix_dims(name, self.value(b))?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(name, Op::MatMul { a, b, trans_b }, Tensor::new(vec![m, n], out)?, rg)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> TensorResult<Var> {
        let cols = self.value(x).cols();
        if self.value(bias).len() != cols {
            return Err(mismatch("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(cols) {
            add_into(row, &b);
        }
        let rg = self.any_grad(&[x, bias]);
        self.push("add_bias", Op::AddBias { x, bias }, out, rg)
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> TensorResult<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("add", Op::Add { a, b }, out, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("sub", Op::Sub { a, b }, out, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> TensorResult<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        self.push("mul", Op::Mul { a, b }, out, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> TensorResult<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.requires_grad(x);
        self.push("scale", Op::Scale { x, factor }, out, rg)
    }

    /// Elementwise product with a constant mask (used for dropout).
    pub fn mul_const(&mut self, x: Var, mask: Arc<[f64]>) -> TensorResult<Var> {
        if mask.len() != self.value(x).len() {
            return Err(mismatch("mul_const", self.shape(x), &[mask.len()]));
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().zip(mask.iter()).for_each(|(v, m)| *v *= m);
        let rg = self.requires_grad(x);
        self.push("mul_const", Op::MulConst { x, mask }, out, rg)
    }

    pub fn tanh(&mut self, x: Var) -> TensorResult<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.requires_grad(x);
        self.push("tanh", Op::Tanh { x }, out, rg)
    }

    pub fn relu(&mut self, x: Var) -> TensorResult<Var> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.requires_grad(x);
        self.push("relu", Op::Relu { x }, out, rg)
    }

    /// Concatenates along `axis`; all other extents must agree.
    /// Fused `act(x·W + b) ⊙ mask`; `mask` is a constant (dropout).
    pub fn dense(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        act: Option<Activation>,
        mask: Option<Arc<[f64]>>,
    ) -> TensorResult<Var> {
        let (m, k) = matrix_dims("dense", self.value(x))?;
        let (wk, n) = matrix_dims("dense", self.value(w))?;
        if k != wk {
            return Err(mismatch("dense", self.shape(x), self.shape(w)));
        }
        if let Some(b) = bias {
            if self.value(b).len() != n {
                return Err(mismatch("dense", self.shape(w), self.shape(b)));
            }
        }
        if let Some(mk) = &mask {
            if mk.len() != m * n {
                return Err(mismatch("dense", &[m, n], &[mk.len()]));
            }
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), false, &mut out, false);
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(n) {
                add_into(row, bd);
            }
        }
        activate_in_place(&mut out, act, mask.as_deref());
        let rg = self.any_grad(&[x, w]) || bias.is_some_and(|b| self.requires_grad(b));
        self.push("dense", Op::Dense { x, w, bias, act, mask }, Tensor::new(vec![m, n], out)?, rg)
    }

    /// Fused `act(x) ⊙ mask`.
    pub fn activate(&mut self, x: Var, act: Activation, mask: Option<Arc<[f64]>>) -> TensorResult<Var> {
        if let Some(mk) = &mask {
            if mk.len() != self.value(x).len() {
                return Err(mismatch("activate", self.shape(x), &[mk.len()]));
            }
        }
        let mut out = self.value(x).clone();
        activate_in_place(out.data_mut(), Some(act), mask.as_deref());
        let rg = self.requires_grad(x);
        self.push("activate", Op::Activate { x, act, mask }, out, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> TensorResult<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut sizes = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in inputs.iter().zip(&sizes) {
                let chunk = len * inner;
                data.extend_from_slice(&self.value(*v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        self.push(
            "concat",
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                inner,
                sizes,
            },
            Tensor::new(shape, data)?,
            rg,
        )
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> TensorResult<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::invalid(name, format!("axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        if len == 0 {
            return Err(TensorError::invalid(name, "empty reduction axis"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let factor = if mean { 1.0 / len as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for a in 0..len {
                let start = (o * len + a) * inner;
                add_into(dst, &src[start..start + inner]);
            }
            dst.iter_mut().for_each(|v| *v *= factor);
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.requires_grad(x);
        self.push(
            name,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
                factor,
            },
            Tensor::new(out_shape, data)?,
            rg,
        )
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    /// Mean over `axis`, keeping it with extent 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> TensorResult<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    /// Sum of every element, as a shape-`[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> TensorResult<Var> {
        let s = self.value(x).sum();
        let rg = self.requires_grad(x);
        self.push("sum_all", Op::SumAll { x }, Tensor::scalar(s), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> TensorResult<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps.is_nan() || eps < 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be non-negative"));
        }
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            "layer_norm",
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::new(shape, out)?,
            rg,
        )
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> TensorResult<Var> {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(TensorError::invalid("clamp", format!("lower bound {lo} exceeds upper bound {hi}")));
        }
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        let rg = self.requires_grad(x);
        self.push("clamp", Op::Clamp { x, lo, hi }, out, rg)
    }

    /// Projects each row onto the simplex. With a mask, only entries whose mask
    /// bit is set take part; masked-out entries are exactly zero.
    pub fn row_project(
        &mut self,
        x: Var,
        kind: ProjectionKind,
        mask: Option<Arc<[bool]>>,
    ) -> TensorResult<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if let Some(m) = &mask {
            if m.len() != xv.len() {
                return Err(mismatch("row_project", xv.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; xv.len()];
        let mut scratch = Vec::with_capacity(cols);
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let dst = &mut out[r * cols..(r + 1) * cols];
            match &mask {
                None => {
                    let p = projection::project(kind, row)
                        .map_err(|e| TensorError::invalid("row_project", e.to_string()))?;
                    dst.copy_from_slice(&p);
                }
                Some(m) => {
                    let mrow = &m[r * cols..(r + 1) * cols];
                    scratch.clear();
                    scratch.extend(row.iter().zip(mrow).filter(|(_, &keep)| keep).map(|(v, _)| *v));
                    let p = projection::project(kind, &scratch).map_err(|e| {
                        TensorError::invalid("row_project", format!("row {r}: {e}"))
                    })?;
                    let mut it = p.into_iter();
                    for (d, &keep) in dst.iter_mut().zip(mrow) {
                        if keep {
                            *d = it.next().expect("masked length");
                        }
                    }
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.requires_grad(x);
        self.push("row_project", Op::RowProject { x, kind, mask }, Tensor::new(shape, out)?, rg)
    }

    /// `out[r, c] = x[r, c] · s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> TensorResult<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        if self.value(s).len() != rows {
            return Err(mismatch("scale_rows", xv.shape(), self.shape(s)));
        }
        let cols = xv.cols();
        let sv = self.value(s).data();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
            row.iter_mut().for_each(|v| *v *= sv[r]);
        }
        let rg = self.any_grad(&[x, s]);
        self.push("scale_rows", Op::ScaleRows { x, s }, out, rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (rows, cols) = matrix_dims("slice_rows", self.value(x))?;
        if start + len > rows {
            return Err(TensorError::invalid("slice_rows", format!("rows {start}..{} of {rows}", start + len)));
        }
        let data = self.value(x).data()[start * cols..(start + len) * cols].to_vec();
        let rg = self.requires_grad(x);
        self.push("slice_rows", Op::SliceRows { x, start }, Tensor::new(vec![len, cols], data)?, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> TensorResult<Var> {
        let (rows, cols) = matrix_dims("slice_cols", self.value(x))?;
        if start + len > cols {
            return Err(TensorError::invalid("slice_cols", format!("cols {start}..{} of {cols}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires_grad(x);
        self.push("slice_cols", Op::SliceCols { x, start }, Tensor::new(vec![rows, len], data)?, rg)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> TensorResult<Var> {
        let xv = self.value(x);
        let rows = xv.rows();
        let cols = xv.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::invalid("select_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let rg = self.requires_grad(x);
        self.push(
            "select_rows",
            Op::SelectRows { x, idx: idx.to_vec() },
            Tensor::new(vec![idx.len(), cols], data)?,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> TensorResult<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        self.push("reshape", Op::Reshape { x }, out, rg)
    }

    /// For each `(k, i)` in `pairs`, emits the row `nodes[i] + rules[k]`.
    pub fn pair_add(&mut self, nodes: Var, rules: Var, pairs: Pairs) -> TensorResult<Var> {
        let (n, m) = matrix_dims("pair_add", self.value(nodes))?;
        let (k, m2) = matrix_dims("pair_add", self.value(rules))?;
        if m != m2 {
            return Err(mismatch("pair_add", self.shape(nodes), self.shape(rules)));
        }
        if pairs.iter().any(|&(r, i)| r >= k || i >= n) {
            return Err(TensorError::invalid("pair_add", "pair index out of range"));
        }
        let nv = self.value(nodes);
        let rv = self.value(rules);
        let mut data = Vec::with_capacity(pairs.len() * m);
        for &(r, i) in pairs.iter() {
            data.extend(nv.row(i).iter().zip(rv.row(r)).map(|(a, b)| a + b));
        }
        let rg = self.any_grad(&[nodes, rules]);
        let p = pairs.len();
        self.push("pair_add", Op::PairAdd { nodes, rules, pairs }, Tensor::new(vec![p, m], data)?, rg)
    }

    /// `out[i] = Σ_{p=(k,i)} gate[k, i] · delta[p]`, an `N×c` matrix where
    /// `gate` is `K×N` and `delta` has one row per pair.
    pub fn gated_sum(&mut self, gate: Var, delta: Var, pairs: Pairs) -> TensorResult<Var> {
        let (k, n) = matrix_dims("gated_sum", self.value(gate))?;
        let (p, c) = matrix_dims("gated_sum", self.value(delta))?;
        if p != pairs.len() {
            return Err(mismatch("gated_sum", self.shape(delta), &[pairs.len()]));
        }
        if pairs.iter().any(|&(r, i)| r >= k || i >= n) {
            return Err(TensorError::invalid("gated_sum", "pair index out of range"));
        }
        let gv = self.value(gate);
        let dv = self.value(delta);
        let mut data = vec![0.0; n * c];
        for (row, &(r, i)) in pairs.iter().enumerate() {
            let g = gv.at(r, i);
            if g == 0.0 {
                continue;
            }
            for (o, d) in data[i * c..(i + 1) * c].iter_mut().zip(dv.row(row)) {
                *o += g * d;
            }
        }
        let rg = self.any_grad(&[gate, delta]);
        self.push("gated_sum", Op::GatedSum { gate, delta, pairs }, Tensor::new(vec![n, c], data)?, rg)
    }

    /// Numerically stable `−log softmax(logits)[label]` of a logit vector.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> TensorResult<Var> {
        let lv = self.value(logits).data();
        if label >= lv.len() {
            return Err(TensorError::invalid("cross_entropy", format!("label {label} out of range")));
        }
        let probs = projection::softmax_forward(lv)
            .map_err(|e| TensorError::invalid("cross_entropy", e.to_string()))?;
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[label];
        let rg = self.requires_grad(logits);
        self.push(
            "cross_entropy",
            Op::CrossEntropy { logits, label, probs },
            Tensor::scalar(loss),
            rg,
        )
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> TensorResult<Gradients> {
        let lshape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(lshape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let shapes = self.nodes[..=loss.0].iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = out.cols();
                let bd = self.value(*b).data();
                let ad = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bd, !*trans_b, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, ad, false, gb, true);
                    } else {
                        gemm(k, m, n, ad, true, g, false, gb, true);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * factor);
                }
            }
            Op::MulConst { x, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), m) in gx.iter_mut().zip(g).zip(mask.iter()) {
                        *d += s * m;
                    }
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Relu { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Dense { x, w, bias, act, mask } => {
                let (m, k) = (self.value(*x).rows(), self.value(*x).cols());
                let n = out.cols();
                let owned;
                let gp: &[f64] = if act.is_none() && mask.is_none() {
                    g
                } else {
                    owned = activation_grad(g, out.data(), *act, mask.as_deref());
                    &owned
                };
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(m, n, k, gp, false, self.value(*w).data(), true, gx, true);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(k, m, n, self.value(*x).data(), true, gp, false, gw, true);
                }
                if let Some(gb) = bias.and_then(|b| self.slot(grads, b)) {
                    for row in gp.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Activate { x, act, mask } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let d = activation_grad(g, out.data(), Some(*act), mask.as_deref());
                    add_into(gx, &d);
                }
            }
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum::<usize>() * inner;
                let mut offset = 0;
                for (v, &len) in inputs.iter().zip(sizes) {
                    let chunk = len * inner;
                    if let Some(gv) = self.slot(grads, *v) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
                factor,
            } => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for a in 0..*len {
                            let start = (o * len + a) * inner;
                            for (d, s) in gx[start..start + inner].iter_mut().zip(src) {
                                *d += s * factor;
                            }
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (row_g, row_x) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row_g[j] * row_x[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row_g in g.chunks(d) {
                        add_into(gb, row_g);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (row_g, row_x)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            dxhat[j] = row_g[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(row_x).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let is = inv_std[r];
                        for j in 0..d {
                            gx[r * d + j] += is * (dxhat[j] - mean_d - row_x[j] * mean_dx);
                        }
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(xv) {
                        if *v > *lo && *v < *hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::RowProject { x, kind, mask } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut p_sub = Vec::with_capacity(cols);
                    let mut g_sub = Vec::with_capacity(cols);
                    for r in 0..out.rows() {
                        let p = out.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        match mask {
                            None => add_into(dst, &projection::project_vjp(*kind, p, gr)),
                            Some(m) => {
                                let mrow = &m[r * cols..(r + 1) * cols];
                                p_sub.clear();
                                g_sub.clear();
                                for j in 0..cols {
                                    if mrow[j] {
                                        p_sub.push(p[j]);
                                        g_sub.push(gr[j]);
                                    }
                                }
                                let sub = projection::project_vjp(*kind, &p_sub, &g_sub);
                                let mut it = sub.into_iter();
                                for (d, &keep) in dst.iter_mut().zip(mrow) {
                                    if keep {
                                        *d += it.next().expect("masked length");
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::ScaleRows { x, s } => {
                let cols = out.cols();
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, (dst, src)) in gx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        dst.iter_mut().zip(src).for_each(|(d, v)| *d += v * sv[r]);
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for (r, (gr, xr)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        gs[r] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(&mut gx[start * cols..start * cols + g.len()], g);
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.cols();
                let cols = self.value(*x).cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, src) in g.chunks(len).enumerate() {
                        add_into(&mut gx[r * cols + start..r * cols + start + len], src);
                    }
                }
            }
            Op::SelectRows { x, idx } => {
                let cols = out.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (row, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * cols..(i + 1) * cols], &g[row * cols..(row + 1) * cols]);
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::PairAdd { nodes, rules, pairs } => {
                let m = out.cols();
                if let Some(gn) = self.slot(grads, *nodes) {
                    for (row, &(_, i)) in pairs.iter().enumerate() {
                        add_into(&mut gn[i * m..(i + 1) * m], &g[row * m..(row + 1) * m]);
                    }
                }
                if let Some(gr) = self.slot(grads, *rules) {
                    for (row, &(r, _)) in pairs.iter().enumerate() {
                        add_into(&mut gr[r * m..(r + 1) * m], &g[row * m..(row + 1) * m]);
                    }
                }
            }
            Op::GatedSum { gate, delta, pairs } => {
                let c = out.cols();
                let n = self.value(*gate).cols();
                let gate_v = self.value(*gate);
                let dv = self.value(*delta).data();
                if let Some(gg) = self.slot(grads, *gate) {
                    for (row, &(r, i)) in pairs.iter().enumerate() {
                        let gi = &g[i * c..(i + 1) * c];
                        gg[r * n + i] += gi.iter().zip(&dv[row * c..(row + 1) * c]).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gd) = self.slot(grads, *delta) {
                    for (row, &(r, i)) in pairs.iter().enumerate() {
                        let w = gate_v.at(r, i);
                        if w == 0.0 {
                            continue;
                        }
                        let gi = &g[i * c..(i + 1) * c];
                        gd[row * c..(row + 1) * c].iter_mut().zip(gi).for_each(|(d, s)| *d += w * s);
                    }
                }
            }
            Op::CrossEntropy { logits, label, probs } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *d += g[0] * (p - target);
                    }
                }
            }
        }
    }
}
