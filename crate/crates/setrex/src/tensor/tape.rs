//! Wengert tape: append-only record of primitive tensor operations with
//! enough saved context to replay them backwards.
//!
//! A tape lives for exactly one forward/backward pass and is never shared
//! between threads. Appending keeps topological order for free, so
//! `backward` is a single reverse sweep. Model parameters enter through
//! [`Tape::param`], which binds a [`ParamId`] to a leaf so gradients can be
//! read back out per parameter after the sweep.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

/// Handle to a value on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row-major boolean mask; `true` blocks a position.
pub type Mask = Rc<Vec<bool>>;

enum Rule {
    Leaf,
    /// c = a[m,k] * b[k,n]
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// c = a[m,k] * b[n,k]^T
    MatmulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    /// bias row added to every row of a
    AddRow { a: usize, bias: usize },
    /// gain row multiplied into every row of a
    MulRow { a: usize, gain: usize },
    Scale { a: usize, factor: f64 },
    ConcatRows { parts: Vec<usize> },
    ConcatCols { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    GatherRows { a: usize, indices: Vec<usize> },
    GatherElems { a: usize, at: Vec<(usize, usize)> },
    SoftmaxRows { a: usize, mask: Option<Mask> },
    LogSumExpRows { a: usize, mask: Option<Mask> },
    LnClamped { a: usize, eps: f64 },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Gelu { a: usize },
    NormalizeRows { a: usize, norms: Vec<f64> },
    LayerNormRows { a: usize, inv_std: Vec<f64> },
    SumAll { a: usize },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    rule: Rule,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: Vec<(ParamId, usize)>,
    bound: HashMap<ParamId, Var>,
    consumed: bool,
    nonfinite: Option<String>,
}

/// Gradients produced by one backward sweep.
pub struct GradMap {
    grads: Vec<Option<Tensor>>,
    param_leaves: Vec<(ParamId, usize)>,
}

impl GradMap {
    /// Gradient for a tape variable; `None` means it never received a
    /// contribution (a zero gradient).
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every bound parameter, in binding order. Parameters
    /// that did not contribute to the loss come back as zeros.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.param_leaves
            .iter()
            .map(|&(id, node)| (id, self.grads[node].clone().expect("param grads materialized")))
            .collect()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            bound: HashMap::new(),
            consumed: false,
            nonfinite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar readout, refused while the tape is poisoned by a non-finite
    /// intermediate.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        if let Some(op) = &self.nonfinite {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        let t = self.value(v);
        if t.numel() != 1 {
            return Err(Error::Numeric(format!("scalar readout of shape {:?}", t.shape)));
        }
        Ok(t.data[0])
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, rule: Rule) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(op_name(&rule).to_string());
        }
        let idx = self.nodes.len();
        self.nodes.push(Node { value, needs_grad, rule });
        Var(idx)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Rule::Leaf)
    }

    /// Differentiable input that is not bound to a parameter store (used by
    /// tests and gradient probes).
    pub fn var(&mut self, value: Tensor) -> Var {
        self.push(value, true, Rule::Leaf)
    }

    /// Bind a parameter onto the tape. Repeat bindings of the same id reuse
    /// the first leaf so its gradient accumulates in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), true, Rule::Leaf);
        self.param_leaves.push((id, v.0));
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2, "matmul lhs shape {:?}", ta.shape);
        assert_eq!(tb.shape.len(), 2, "matmul rhs shape {:?}", tb.shape);
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let n = tb.shape[1];
        assert_eq!(k, tb.shape[0], "matmul inner dims {:?} x {:?}", ta.shape, tb.shape);
        let data = matmul_nn(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], data), needs, Rule::Matmul { a: a.0, b: b.0, m, k, n })
    }

    /// a[m,k] * b[n,k]^T -> [m,n]
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let n = tb.shape[0];
        assert_eq!(k, tb.shape[1], "matmul_nt inner dims {:?} x {:?}", ta.shape, tb.shape);
        let data = matmul_nt(&ta.data, &tb.data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![m, n], data), needs, Rule::MatmulNt { a: a.0, b: b.0, m, k, n })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Mul { a: a.0, b: b.0 })
    }

    /// Add a `[n]` bias row to every row of a `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(bias));
        let cols = ta.cols();
        assert_eq!(tb.numel(), cols, "bias length {} vs cols {}", tb.numel(), cols);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(&tb.data) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::AddRow { a: a.0, bias: bias.0 })
    }

    /// Multiply every row of a `[m,n]` matrix by a `[n]` gain row.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Var {
        let (ta, tg) = (self.value(a), self.value(gain));
        let cols = ta.cols();
        assert_eq!(tg.numel(), cols, "gain length {} vs cols {}", tg.numel(), cols);
        let mut data = ta.data.clone();
        for row in data.chunks_mut(cols) {
            for (x, g) in row.iter_mut().zip(&tg.data) {
                *x *= g;
            }
        }
        let needs = self.needs(a) || self.needs(gain);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::MulRow { a: a.0, gain: gain.0 })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * factor).collect();
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Scale { a: a.0, factor })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let idxs = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(vec![rows, cols], data), needs, Rule::ConcatRows { parts: idxs })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&t.data[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let idxs = parts.iter().map(|p| p.0).collect();
        self.push(Tensor::new(vec![rows, total], data), needs, Rule::ConcatCols { parts: idxs })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        assert!(start + len <= ta.rows(), "slice_rows out of range");
        let data = ta.data[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(vec![len, cols], data), needs, Rule::SliceRows { a: a.0, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data[r * cols + start..r * cols + start + len]);
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![rows, len], data), needs, Rule::SliceCols { a: a.0, start })
    }

    /// Pick rows by index; repeated indices accumulate in the backward pass,
    /// which is what makes this double as an embedding lookup.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in &indices {
            assert!(i < ta.rows(), "gather_rows index {} of {}", i, ta.rows());
            data.extend_from_slice(&ta.data[i * cols..(i + 1) * cols]);
        }
        let needs = self.needs(a);
        let shape = vec![indices.len(), cols];
        self.push(Tensor::new(shape, data), needs, Rule::GatherRows { a: a.0, indices })
    }

    /// Pick individual matrix entries into a flat vector.
    pub fn gather_elems(&mut self, a: Var, at: Vec<(usize, usize)>) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            assert!(r < rows && c < cols, "gather_elems ({r},{c}) of {rows}x{cols}");
            data.push(ta.data[r * cols + c]);
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![at.len()], data), needs, Rule::GatherElems { a: a.0, at })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        self.softmax_rows_impl(a, None).expect("unmasked softmax cannot degenerate")
    }

    /// Softmax per row with blocked positions pinned to exactly zero weight.
    /// A fully blocked row has no distribution to give, so it is an error.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Mask) -> Result<Var> {
        let ta = self.value(a);
        assert_eq!(mask.len(), ta.numel(), "mask size mismatch");
        self.softmax_rows_impl(a, Some(mask))
    }

    fn softmax_rows_impl(&mut self, a: Var, mask: Option<Mask>) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &ta.data[r * cols..(r + 1) * cols];
            let blocked = |j: usize| mask.as_ref().map_or(false, |m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if !blocked(j) && x[j] > max {
                    max = x[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("attention row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if !blocked(j) {
                    let e = (x[j] - max).exp();
                    data[r * cols + j] = e;
                    sum += e;
                }
            }
            for j in 0..cols {
                data[r * cols + j] /= sum;
            }
        }
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor::new(shape, data), needs, Rule::SoftmaxRows { a: a.0, mask }))
    }

    /// Per-row log(sum(exp(x))) over unblocked positions; output shape `[rows]`.
    pub fn logsumexp_rows(&mut self, a: Var, mask: Option<Mask>) -> Result<Var> {
        let ta = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.len(), ta.numel(), "mask size mismatch");
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows];
        for r in 0..rows {
            let x = &ta.data[r * cols..(r + 1) * cols];
            let blocked = |j: usize| mask.as_ref().map_or(false, |m| m[r * cols + j]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                if !blocked(j) && x[j] > max {
                    max = x[j];
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric(format!("log-sum-exp row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for j in 0..cols {
                if !blocked(j) {
                    sum += (x[j] - max).exp();
                }
            }
            data[r] = max + sum.ln();
        }
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(vec![rows], data), needs, Rule::LogSumExpRows { a: a.0, mask }))
    }

    /// Elementwise ln(max(x, eps)); the clamp keeps early-training log-probs
    /// out of -inf.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x.max(eps).ln()).collect();
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::LnClamped { a: a.0, eps })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Sigmoid { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::Gelu { a: a.0 })
    }

    /// Scale every row to unit L2 norm. Zero-norm rows violate the cosine
    /// contract and surface as an error.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut norms = Vec::with_capacity(rows);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &ta.data[r * cols..(r + 1) * cols];
            let n = crate::tensor::norm(x);
            if n == 0.0 {
                return Err(Error::Numeric(format!("zero-norm row {r} in normalize_rows")));
            }
            for j in 0..cols {
                data[r * cols + j] = x[j] / n;
            }
            norms.push(n);
        }
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        Ok(self.push(Tensor::new(shape, data), needs, Rule::NormalizeRows { a: a.0, norms }))
    }

    /// Row-wise standardization to zero mean, unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut inv_std = Vec::with_capacity(rows);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let x = &ta.data[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                data[r * cols + j] = (x[j] - mean) * s;
            }
            inv_std.push(s);
        }
        let needs = self.needs(a);
        let shape = ta.shape.clone();
        self.push(Tensor::new(shape, data), needs, Rule::LayerNormRows { a: a.0, inv_std })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), needs, Rule::SumAll { a: a.0 })
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call is
    /// an error. Every bound parameter receives a gradient, zeros included.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        if self.consumed {
            return Err(Error::Numeric("backward on a consumed tape".into()));
        }
        if let Some(op) = &self.nonfinite {
            return Err(Error::Numeric(format!("non-finite value produced by {op}")));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Numeric(format!(
                "backward from non-scalar shape {:?}",
                self.value(loss).shape
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.apply_rule(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Parameters that never contributed still report a zero gradient.
        for &(_, node) in &self.param_leaves {
            if grads[node].is_none() {
                grads[node] = Some(Tensor::zeros(self.nodes[node].value.shape.clone()));
            }
        }

        Ok(GradMap { grads, param_leaves: self.param_leaves.clone() })
    }

    fn apply_rule(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], target: usize, shape: &[usize], add: &dyn Fn(&mut [f64])| {
            if !self.nodes[target].needs_grad {
                return;
            }
            let slot = grads[target]
                .get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
            add(&mut slot.data);
        };
        let val = |idx: usize| &self.nodes[idx].value;

        match &self.nodes[i].rule {
            Rule::Leaf => {}
            Rule::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].needs_grad {
                    let da = matmul_nt(&g.data, &val(b).data, m, n, k);
                    acc(grads, a, &[m, k], &|dst| add_into(dst, &da));
                }
                if self.nodes[b].needs_grad {
                    let db = matmul_tn(&val(a).data, &g.data, m, k, n);
                    acc(grads, b, &[k, n], &|dst| add_into(dst, &db));
                }
            }
            Rule::MatmulNt { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if self.nodes[a].needs_grad {
                    let da = matmul_nn(&g.data, &val(b).data, m, n, k);
                    acc(grads, a, &[m, k], &|dst| add_into(dst, &da));
                }
                if self.nodes[b].needs_grad {
                    let db = matmul_tn(&g.data, &val(a).data, m, n, k);
                    acc(grads, b, &[n, k], &|dst| add_into(dst, &db));
                }
            }
            Rule::Add { a, b } => {
                let shape = &val(*a).shape.clone();
                acc(grads, *a, shape, &|dst| add_into(dst, &g.data));
                acc(grads, *b, shape, &|dst| add_into(dst, &g.data));
            }
            Rule::Sub { a, b } => {
                let shape = &val(*a).shape.clone();
                acc(grads, *a, shape, &|dst| add_into(dst, &g.data));
                acc(grads, *b, shape, &|dst| {
                    for (d, x) in dst.iter_mut().zip(&g.data) {
                        *d -= x;
                    }
                });
            }
            Rule::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let other = &val(b).data;
                    acc(grads, a, &val(a).shape.clone(), &|dst| {
                        for ((d, x), y) in dst.iter_mut().zip(&g.data).zip(other) {
                            *d += x * y;
                        }
                    });
                }
                if self.nodes[b].needs_grad {
                    let other = &val(a).data;
                    acc(grads, b, &val(b).shape.clone(), &|dst| {
                        for ((d, x), y) in dst.iter_mut().zip(&g.data).zip(other) {
                            *d += x * y;
                        }
                    });
                }
            }
            Rule::AddRow { a, bias } => {
                let cols = val(*a).cols();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| add_into(dst, &g.data));
                acc(grads, *bias, &val(*bias).shape.clone(), &|dst| {
                    for row in g.data.chunks(cols) {
                        for (d, x) in dst.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Rule::MulRow { a, gain } => {
                let (a, gain) = (*a, *gain);
                let cols = val(a).cols();
                if self.nodes[a].needs_grad {
                    let gv = &val(gain).data;
                    acc(grads, a, &val(a).shape.clone(), &|dst| {
                        for (drow, grow) in dst.chunks_mut(cols).zip(g.data.chunks(cols)) {
                            for ((d, x), y) in drow.iter_mut().zip(grow).zip(gv) {
                                *d += x * y;
                            }
                        }
                    });
                }
                if self.nodes[gain].needs_grad {
                    let av = &val(a).data;
                    acc(grads, gain, &val(gain).shape.clone(), &|dst| {
                        for (grow, arow) in g.data.chunks(cols).zip(av.chunks(cols)) {
                            for ((d, x), y) in dst.iter_mut().zip(grow).zip(arow) {
                                *d += x * y;
                            }
                        }
                    });
                }
            }
            Rule::Scale { a, factor } => {
                let f = *factor;
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for (d, x) in dst.iter_mut().zip(&g.data) {
                        *d += x * f;
                    }
                });
            }
            Rule::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let numel = val(p).numel();
                    let piece = &g.data[offset..offset + numel];
                    acc(grads, p, &val(p).shape.clone(), &|dst| add_into(dst, piece));
                    offset += numel;
                }
            }
            Rule::ConcatCols { parts } => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let off = offset;
                    acc(grads, p, &val(p).shape.clone(), &|dst| {
                        for r in 0..rows {
                            for j in 0..w {
                                dst[r * w + j] += g.data[r * total + off + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Rule::SliceRows { a, start } => {
                let cols = val(*a).cols();
                let off = start * cols;
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for (d, x) in dst[off..off + g.data.len()].iter_mut().zip(&g.data) {
                        *d += x;
                    }
                });
            }
            Rule::SliceCols { a, start } => {
                let cols = val(*a).cols();
                let w = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let st = *start;
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for r in 0..rows {
                        for j in 0..w {
                            dst[r * cols + st + j] += g.data[r * w + j];
                        }
                    }
                });
            }
            Rule::GatherRows { a, indices } => {
                let cols = val(*a).cols();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for (pos, &src_row) in indices.iter().enumerate() {
                        for j in 0..cols {
                            dst[src_row * cols + j] += g.data[pos * cols + j];
                        }
                    }
                });
            }
            Rule::GatherElems { a, at } => {
                let cols = val(*a).cols();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for (pos, &(r, c)) in at.iter().enumerate() {
                        dst[r * cols + c] += g.data[pos];
                    }
                });
            }
            Rule::SoftmaxRows { a, mask } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let rows = y.rows();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            let blocked = mask.as_ref().map_or(false, |m| m[r * cols + j]);
                            if !blocked {
                                dst[r * cols + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Rule::LogSumExpRows { a, mask } => {
                let y = &self.nodes[i].value;
                let x = val(*a);
                let cols = x.cols();
                let rows = x.rows();
                acc(grads, *a, &x.shape.clone(), &|dst| {
                    for r in 0..rows {
                        for j in 0..cols {
                            let blocked = mask.as_ref().map_or(false, |m| m[r * cols + j]);
                            if !blocked {
                                dst[r * cols + j] += g.data[r] * (x.data[r * cols + j] - y.data[r]).exp();
                            }
                        }
                    }
                });
            }
            Rule::LnClamped { a, eps } => {
                let x = val(*a);
                let e = *eps;
                acc(grads, *a, &x.shape.clone(), &|dst| {
                    for ((d, gx), &xv) in dst.iter_mut().zip(&g.data).zip(&x.data) {
                        if xv >= e {
                            *d += gx / xv;
                        }
                    }
                });
            }
            Rule::Tanh { a } => {
                let y = &self.nodes[i].value;
                acc(grads, *a, &y.shape.clone(), &|dst| {
                    for ((d, gx), &yv) in dst.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gx * (1.0 - yv * yv);
                    }
                });
            }
            Rule::Sigmoid { a } => {
                let y = &self.nodes[i].value;
                acc(grads, *a, &y.shape.clone(), &|dst| {
                    for ((d, gx), &yv) in dst.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gx * yv * (1.0 - yv);
                    }
                });
            }
            Rule::Gelu { a } => {
                let x = val(*a);
                acc(grads, *a, &x.shape.clone(), &|dst| {
                    for ((d, gx), &xv) in dst.iter_mut().zip(&g.data).zip(&x.data) {
                        *d += gx * gelu_deriv(xv);
                    }
                });
            }
            Rule::NormalizeRows { a, norms } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let rows = y.rows();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            dst[r * cols + j] += (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                });
            }
            Rule::LayerNormRows { a, inv_std } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let rows = y.rows();
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    let n = cols as f64;
                    for r in 0..rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let g_mean: f64 = gr.iter().sum::<f64>() / n;
                        let gy_mean: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        for j in 0..cols {
                            dst[r * cols + j] += inv_std[r] * (gr[j] - g_mean - yr[j] * gy_mean);
                        }
                    }
                });
            }
            Rule::SumAll { a } => {
                let gs = g.data[0];
                acc(grads, *a, &val(*a).shape.clone(), &|dst| {
                    for d in dst.iter_mut() {
                        *d += gs;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn op_name(rule: &Rule) -> &'static str {
    match rule {
        Rule::Leaf => "leaf",
        Rule::Matmul { .. } => "matmul",
        Rule::MatmulNt { .. } => "matmul_nt",
        Rule::Add { .. } => "add",
        Rule::Sub { .. } => "sub",
        Rule::Mul { .. } => "mul",
        Rule::AddRow { .. } => "add_row",
        Rule::MulRow { .. } => "mul_row",
        Rule::Scale { .. } => "scale",
        Rule::ConcatRows { .. } => "concat_rows",
        Rule::ConcatCols { .. } => "concat_cols",
        Rule::SliceRows { .. } => "slice_rows",
        Rule::SliceCols { .. } => "slice_cols",
        Rule::GatherRows { .. } => "gather_rows",
        Rule::GatherElems { .. } => "gather_elems",
        Rule::SoftmaxRows { .. } => "softmax_rows",
        Rule::LogSumExpRows { .. } => "logsumexp_rows",
        Rule::LnClamped { .. } => "ln_clamped",
        Rule::Tanh { .. } => "tanh",
        Rule::Sigmoid { .. } => "sigmoid",
        Rule::Gelu { .. } => "gelu",
        Rule::NormalizeRows { .. } => "normalize_rows",
        Rule::LayerNormRows { .. } => "layer_norm_rows",
        Rule::SumAll { .. } => "sum_all",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rand_tensor(rng: &mut ChaCha12Rng, shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    /// Builds the scalar probe loss sum(weights * f(x)) twice per perturbed
    /// input entry and compares the analytic gradient against central
    /// differences.
    fn check_grad<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert_eq!(tape.value(loss).numel(), 1, "probe loss must be scalar");
        let grads = tape.backward(loss).unwrap();

        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads
                .grad(vars[ti])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape.clone()));
            for e in 0..t.numel() {
                let run = |delta: f64| -> f64 {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, u)| {
                            let mut u = u.clone();
                            if k == ti {
                                u.data[e] += delta;
                            }
                            tape.var(u)
                        })
                        .collect();
                    let l = build(&mut tape, &vars);
                    tape.value(l).data[0]
                };
                let numeric = (run(h) - run(-h)) / (2.0 * h);
                let a = analytic.data[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < tol,
                    "input {ti} elem {e}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let t = tape.value(v).clone();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let w = rand_tensor(&mut rng, t.shape.clone());
        let wl = tape.leaf(w);
        let prod = tape.mul(v, wl);
        tape.sum_all(prod)
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![3], vec![5.0, -2.0, 0.5]));
        let loss = tape.sum_all(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_is_bilinear() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, 2.0]));
        let y = tape.var(Tensor::new(vec![2], vec![3.0, 4.0]));
        let p = tape.mul(x, y);
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data, vec![3.0, 4.0]);
        assert_eq!(g.grad(y).unwrap().data, vec![1.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let loss = tape.scale(x, 3.0);
        tape.backward(loss).unwrap();
        assert!(tape.backward(loss).is_err());
    }

    #[test]
    fn backward_non_scalar_is_error() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreached_var_gets_no_contribution() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        let y = tape.var(Tensor::scalar(5.0));
        let loss = tape.scale(x, 2.0);
        let g = tape.backward(loss).unwrap();
        assert!(g.grad(y).is_none());
    }

    #[test]
    fn nonfinite_forward_poisons_tape() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::scalar(1e308));
        let y = tape.var(Tensor::scalar(1e308));
        let s = tape.add(x, y); // overflows to inf
        assert!(tape.scalar(s).is_err());
        assert!(tape.backward(s).is_err());
    }

    #[test]
    fn masked_softmax_blocks_exactly() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2, 3], vec![0.3, 5.0, -1.0, 2.0, 2.0, 2.0]));
        let mask = Rc::new(vec![false, true, false, false, false, true]);
        let y = tape.masked_softmax_rows(x, mask).unwrap();
        let t = tape.value(y);
        assert_eq!(t.data[1], 0.0);
        assert_eq!(t.data[5], 0.0);
        let r0: f64 = t.row(0).iter().sum();
        let r1: f64 = t.row(1).iter().sum();
        assert!((r0 - 1.0).abs() < 1e-12 && (r1 - 1.0).abs() < 1e-12);
        assert!((t.data[3] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_error() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let mask = Rc::new(vec![true, true]);
        assert!(tape.masked_softmax_rows(x, mask).is_err());
        let x2 = tape.var(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        assert!(tape.logsumexp_rows(x2, Some(Rc::new(vec![true, true]))).is_err());
    }

    #[test]
    fn normalize_rows_zero_norm_is_error() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 0.0]));
        assert!(tape.normalize_rows(x).is_err());
    }

    #[test]
    fn param_binding_is_cached_and_zero_filled() {
        let mut store = ParamStore::new();
        let a = store.register("a", Tensor::scalar(2.0));
        let b = store.register("b", Tensor::scalar(7.0));
        let mut tape = Tape::new();
        let va = tape.param(&store, a);
        let va2 = tape.param(&store, a);
        assert_eq!(va, va2);
        let _vb = tape.param(&store, b);
        let loss = tape.scale(va, 4.0);
        let g = tape.backward(loss).unwrap();
        let pg = g.param_grads();
        assert_eq!(pg.len(), 2);
        assert_eq!(pg[0].1.data, vec![4.0]);
        assert_eq!(pg[1].1.data, vec![0.0]); // b unused but reported as zeros
    }

    // Finite-difference sweeps over every differentiable op.

    #[test]
    fn fd_matmul_and_matmul_nt() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4, 2]);
        check_grad(
            |tape, vs| {
                let c = tape.matmul(vs[0], vs[1]);
                weighted_sum(tape, c, 11)
            },
            &[a.clone(), b],
            1e-6,
        );
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let bt = rand_tensor(&mut rng, vec![2, 4]);
        check_grad(
            |tape, vs| {
                let c = tape.matmul_nt(vs[0], vs[1]);
                weighted_sum(tape, c, 12)
            },
            &[a, bt],
            1e-6,
        );
    }

    #[test]
    fn fd_elementwise_and_broadcast() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2, 3]);
        let bias = rand_tensor(&mut rng, vec![3]);
        check_grad(
            |tape, vs| {
                let s = tape.add(vs[0], vs[1]);
                let d = tape.sub(s, vs[1]);
                let m = tape.mul(d, vs[1]);
                let r = tape.add_row(m, vs[2]);
                let q = tape.mul_row(r, vs[2]);
                let sc = tape.scale(q, -1.7);
                weighted_sum(tape, sc, 13)
            },
            &[a, b, bias],
            1e-6,
        );
    }

    #[test]
    fn fd_concat_slice_gather() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![3, 3]);
        check_grad(
            |tape, vs| {
                let cat = tape.concat_rows(&[vs[0], vs[1]]);
                let cc = tape.concat_cols(&[cat, cat]);
                let sr = tape.slice_rows(cc, 1, 3);
                let sc = tape.slice_cols(sr, 2, 3);
                let gr = tape.gather_rows(sc, vec![0, 2, 2, 1]);
                let ge = tape.gather_elems(gr, vec![(0, 0), (3, 2), (2, 1), (0, 0)]);
                weighted_sum(tape, ge, 14)
            },
            &[a, b],
            1e-6,
        );
    }

    #[test]
    fn fd_activations() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, vec![2, 4]);
        check_grad(
            |tape, vs| {
                let t = tape.tanh(vs[0]);
                let s = tape.sigmoid(t);
                let g = tape.gelu(s);
                weighted_sum(tape, g, 15)
            },
            &[a],
            1e-5,
        );
    }

    #[test]
    fn fd_softmax_logsumexp_masked() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, vec![3, 4]);
        let mask = Rc::new(vec![
            false, true, false, false, //
            false, false, false, true, //
            true, false, false, false,
        ]);
        let m1 = Rc::clone(&mask);
        check_grad(
            |tape, vs| {
                let y = tape.masked_softmax_rows(vs[0], Rc::clone(&m1)).unwrap();
                weighted_sum(tape, y, 16)
            },
            &[a.clone()],
            1e-5,
        );
        let m2 = Rc::clone(&mask);
        check_grad(
            |tape, vs| {
                let y = tape.logsumexp_rows(vs[0], Some(Rc::clone(&m2))).unwrap();
                weighted_sum(tape, y, 17)
            },
            &[a.clone()],
            1e-6,
        );
        check_grad(
            |tape, vs| {
                let y = tape.softmax_rows(vs[0]);
                weighted_sum(tape, y, 18)
            },
            &[a],
            1e-5,
        );
    }

    #[test]
    fn fd_norms_and_log() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut a = rand_tensor(&mut rng, vec![3, 5]);
        for x in &mut a.data {
            *x += 3.0; // keep values positive and away from the ln clamp
        }
        check_grad(
            |tape, vs| {
                let n = tape.normalize_rows(vs[0]).unwrap();
                weighted_sum(tape, n, 19)
            },
            &[a.clone()],
            1e-6,
        );
        check_grad(
            |tape, vs| {
                let n = tape.layer_norm_rows(vs[0], 1e-12);
                weighted_sum(tape, n, 20)
            },
            &[a.clone()],
            1e-5,
        );
        check_grad(
            |tape, vs| {
                let n = tape.ln_clamped(vs[0], 1e-12);
                weighted_sum(tape, n, 21)
            },
            &[a],
            1e-6,
        );
    }

    #[test]
    fn fd_full_composite() {
        // A little network touching most ops at once.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, vec![4, 6]);
        let w = rand_tensor(&mut rng, vec![6, 6]);
        let b = rand_tensor(&mut rng, vec![6]);
        check_grad(
            |tape, vs| {
                let h = tape.matmul(vs[0], vs[1]);
                let h = tape.add_row(h, vs[2]);
                let h = tape.gelu(h);
                let n = tape.normalize_rows(h).unwrap();
                let sims = tape.matmul_nt(n, n);
                let p = tape.softmax_rows(sims);
                let lp = tape.ln_clamped(p, 1e-12);
                let picked = tape.gather_elems(lp, vec![(0, 1), (2, 3), (3, 3)]);
                let s = tape.sum_all(picked);
                tape.scale(s, -1.0)
            },
            &[x, w, b],
            1e-5,
        );
    }
}
