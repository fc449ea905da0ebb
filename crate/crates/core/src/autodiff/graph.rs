//! Tape of recorded operations and its reverse sweep.

use std::collections::HashMap;

use crate::autodiff::tensor::{gemm_nn, gemm_nt, gemm_tn};
use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, S),
    Relu(Var),
    ClampMin(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    DivScalar(Var, Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<S> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Single-use reverse-mode tape. Build the forward pass with the op methods,
/// call [`Graph::backward`] once on a scalar, then read gradients.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: HashMap::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient is readable after `backward`.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut(), false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[self.shape(a), self.shape(b)]));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), out.data_mut(), false);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.dims2()? != sb.dims2()? {
            return Err(Error::shape(op, &[sa.shape(), sb.shape()]));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let (r, c) = va.dims2().expect("checked");
        Tensor::new(vec![r, c], data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (r, c) = self.dims(a)?;
        let rv = self.value(row);
        if rv.len() != c {
            return Err(Error::shape(op, &[self.shape(a), self.shape(row)]));
        }
        let rd = rv.data();
        let ad = self.value(a).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            data.extend(ad[i * c..(i + 1) * c].iter().zip(rd).map(|(&x, &y)| f(x, y)));
        }
        Tensor::new(vec![r, c], data)
    }

    /// `a + row` where `row` has `cols(a)` elements.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a ⊙ row` where `row` has `cols(a)` elements.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    /// `scale · a + shift`, with constant scale and shift.
    pub fn affine_scalar(&mut self, a: Var, scale: S, shift: S) -> Var {
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.needs(&[a]);
        self.push(out, Op::Affine(a, scale), ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.affine_scalar(a, s, S::zero())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine_scalar(a, -S::one(), S::zero())
    }

    fn unary(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(a).map(f);
        let ng = self.needs(&[a]);
        self.push(out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(S::zero()), Op::Relu(a))
    }

    /// `max(a, floor)` elementwise; the gradient passes where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: S) -> Var {
        self.unary(a, |x| if x > floor { x } else { floor }, Op::ClampMin(a, floor))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let ng = self.needs(&[a]);
        self.push(out, Op::SumAll(a), ng)
    }

    /// `a / s` for a one-element `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("div_scalar", &[self.shape(a), self.shape(s)]));
        }
        let d = sv.data()[0];
        let out = self.value(a).map(|x| x / d);
        let ng = self.needs(&[a, s]);
        Ok(self.push(out, Op::DivScalar(a, s), ng))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, S::one() / S::lit(n as f64))
    }

    /// Column sums: `r×c → 1×c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let d = self.value(a).data();
        let mut out = vec![S::zero(); c];
        for i in 0..r {
            for (o, &x) in out.iter_mut().zip(&d[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![1, c], out)?, Op::SumRows(a), ng))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let r = self.dims(a)?.0.max(1);
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, S::one() / S::lit(r as f64)))
    }

    // ---- normalizers ----------------------------------------------------

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let mut out = self.value(a).clone().reshape(vec![r, c])?;
        for i in 0..r {
            softmax_in_place(&mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        let mut out = self.value(a).clone().reshape(vec![r, c])?;
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let lse = crate::scalar::log_sum_exp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::LogSoftmax(a), ng))
    }

    /// Softmax of square score matrix where row `i` only sees columns `≤ i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims(a)?;
        if r != c {
            return Err(Error::shape("causal_softmax", &[self.shape(a)]));
        }
        let mut out = self.value(a).clone().reshape(vec![r, c])?;
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|x| *x = S::zero());
        }
        let ng = self.needs(&[a]);
        Ok(self.push(out, Op::CausalSoftmax(a), ng))
    }

    /// Row-wise `(x − μ) / √(σ² + eps)` without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: S) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let mut out = self.value(x).clone().reshape(vec![r, c])?;
        let mut inv_std = Vec::with_capacity(r);
        let n = S::lit(c as f64);
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let mu = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * inv);
            inv_std.push(inv);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, ng))
    }

    // ---- indexing -------------------------------------------------------

    /// Embedding lookup / row gather: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Shape { op: "gather", shapes: vec![vec![r, c], vec![bad]] });
        }
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.needs(&[table]);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather(table, ids)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start + len > c {
            return Err(Error::Shape { op: "slice_cols", shapes: vec![vec![r, c], vec![start, len]] });
        }
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pr != r {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0])?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p)?;
            if pc != c {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat_rows", &shapes));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(logits)?;
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(Error::Shape { op: "cross_entropy", shapes: vec![vec![r, c], targets.to_vec()] });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * c..(i + 1) * c];
            let lse = crate::scalar::log_sum_exp(row);
            loss += lse - row[t];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let out = Tensor::scalar(loss / S::lit(r.max(1) as f64));
        let ng = self.needs(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, ng))
    }

    // ---- reverse sweep --------------------------------------------------

    /// Computes `∂loss/∂node` for every node that depends on an input or a
    /// parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(i, &gout, &mut grads)?;
            }
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds parameter gradients from the last `backward` into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<S>) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                if self.nodes[a.0].needs_grad {
                    let ga = self.slot(grads, *a);
                    gemm_nt(m, n, k, gd, self.value(*b).data(), ga.data_mut(), true);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.slot(grads, *b);
                    gemm_tn(k, m, n, self.value(*a).data(), gd, gb.data_mut(), true);
                }
            }
            Op::MatMulNT(a, b) => {
                // out = a·bᵀ, a: m×k, b: n×k
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                if self.nodes[a.0].needs_grad {
                    let ga = self.slot(grads, *a);
                    gemm_nn(m, n, k, gd, self.value(*b).data(), ga.data_mut(), true);
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.slot(grads, *b);
                    gemm_tn(n, m, k, gd, self.value(*a).data(), gb.data_mut(), true);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose()?;
                self.acc(grads, *a, gt.data(), |_, x| x);
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gd, |_, x| x);
                self.acc(grads, *b, gd, |_, x| x);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gd, |_, x| x);
                self.acc(grads, *b, gd, |_, x| -x);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, gd, |j, x| x * bv[j]);
                self.acc(grads, *b, gd, |j, x| x * av[j]);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gd, |_, x| x);
                if self.nodes[row.0].needs_grad {
                    let c = self.value(*row).len();
                    let gr = self.slot(grads, *row);
                    for (j, &x) in gd.iter().enumerate() {
                        gr.data_mut()[j % c] += x;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = self.value(*row).data();
                let c = rv.len();
                self.acc(grads, *a, gd, |j, x| x * rv[j % c]);
                if self.nodes[row.0].needs_grad {
                    let av = self.value(*a).data();
                    let gr = self.slot(grads, *row);
                    for (j, &x) in gd.iter().enumerate() {
                        gr.data_mut()[j % c] += x * av[j];
                    }
                }
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.acc(grads, *a, gd, |_, x| x * s);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, gd, |j, x| if av[j] > S::zero() { x } else { S::zero() });
            }
            Op::ClampMin(a, floor) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, gd, |j, x| if av[j] > *floor { x } else { S::zero() });
            }
            Op::Tanh(a) => {
                let o = out.data();
                self.acc(grads, *a, gd, |j, x| x * (S::one() - o[j] * o[j]));
            }
            Op::Sigmoid(a) => {
                let o = out.data();
                self.acc(grads, *a, gd, |j, x| x * o[j] * (S::one() - o[j]));
            }
            Op::Exp(a) => {
                let o = out.data();
                self.acc(grads, *a, gd, |j, x| x * o[j]);
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.acc(grads, *a, gd, |j, x| x / av[j]);
            }
            Op::SumAll(a) => {
                let s = gd[0];
                self.acc(grads, *a, &[], |_, _| s);
            }
            Op::DivScalar(a, s) => {
                let d = self.value(*s).data()[0];
                self.acc(grads, *a, gd, |_, x| x / d);
                let dot = gd.iter().zip(out.data()).fold(S::zero(), |acc, (&x, &y)| acc + x * y);
                self.acc(grads, *s, &[], |_, _| -dot / d);
            }
            Op::SumRows(a) => {
                let c = gd.len();
                self.acc(grads, *a, &[], |j, _| gd[j % c]);
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let (r, c) = out.dims2()?;
                let o = out.data();
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let dot: S = o[span.clone()].iter().zip(&gd[span.clone()]).map(|(&p, &d)| p * d).sum();
                    for j in span {
                        dx[j] = o[j] * (gd[j] - dot);
                    }
                }
                self.acc(grads, *a, &dx, |_, x| x);
            }
            Op::LogSoftmax(a) => {
                let (r, c) = out.dims2()?;
                let o = out.data();
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let total: S = gd[span.clone()].iter().copied().sum();
                    for j in span {
                        dx[j] = gd[j] - o[j].exp() * total;
                    }
                }
                self.acc(grads, *a, &dx, |_, x| x);
            }
            Op::LayerNorm { x, inv_std } => {
                let (r, c) = out.dims2()?;
                let y = out.data();
                let n = S::lit(c as f64);
                let mut dx = vec![S::zero(); r * c];
                for row in 0..r {
                    let span = row * c..(row + 1) * c;
                    let mean_g: S = gd[span.clone()].iter().copied().sum::<S>() / n;
                    let mean_gy: S = gd[span.clone()].iter().zip(&y[span.clone()]).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for j in span {
                        dx[j] = inv_std[row] * (gd[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.acc(grads, *x, &dx, |_, v| v);
            }
            Op::Gather { table, ids } => {
                if self.nodes[table.0].needs_grad {
                    let c = self.dims(*table)?.1;
                    let gt = self.slot(grads, *table);
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut gt.data_mut()[id * c..(id + 1) * c];
                        for (d, &s) in dst.iter_mut().zip(&gd[row * c..(row + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.nodes[x.0].needs_grad {
                    let (r, c) = self.dims(*x)?;
                    let len = out.cols();
                    let gx = self.slot(grads, *x);
                    for row in 0..r {
                        let dst = &mut gx.data_mut()[row * c + start..row * c + start + len];
                        for (d, &s) in dst.iter_mut().zip(&gd[row * len..(row + 1) * len]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    if self.nodes[p.0].needs_grad {
                        let gp = self.slot(grads, p);
                        for row in 0..r {
                            let src = &gd[row * total + offset..row * total + offset + w];
                            for (d, &s) in gp.data_mut()[row * w..(row + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.acc(grads, p, &gd[offset..offset + n], |_, x| x);
                    offset += n;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.dims(*logits)?.1;
                let scale = gd[0] / S::lit(targets.len().max(1) as f64);
                let mut dx: Vec<S> = probs.iter().map(|&p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= scale;
                }
                self.acc(grads, *logits, &dx, |_, x| x);
            }
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<S>>], v: Var) -> &'g mut Tensor<S> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// `grad[v][j] += f(j, src[j])`; when `src` is empty the closure ignores
    /// its second argument.
    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, src: &[S], f: impl Fn(usize, S) -> S) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let gv = self.slot(grads, v);
        if src.is_empty() {
            for (j, d) in gv.data_mut().iter_mut().enumerate() {
                *d += f(j, S::zero());
            }
        } else {
            for (j, (d, &s)) in gv.data_mut().iter_mut().zip(src).enumerate() {
                *d += f(j, s);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

use crate::scalar::softmax_in_place;
