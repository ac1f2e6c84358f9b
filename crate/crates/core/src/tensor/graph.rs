use super::gemm::gemm;
use super::{elu, elu_plus_one, sigmoid, Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Elu(Var),
    EluPlusOne(Var),
    Sigmoid(Var),
    ClampMax(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    MaskedSoftmax(Var),
    PairwiseSqDist(Var, Var),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
    grad: Option<Tensor>,
}

/// A computation tape.
///
/// Values are stored in creation order, so every node's inputs precede it.
/// Nodes whose inputs do not require gradients are stored as constants and
/// carry no backward rule.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Dimension { op, detail }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| dim_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, requires_grad: tracked, op, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor { shape: t.shape().to_vec(), data };
        self.push(value, op, &[a])
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let ta = &self.nodes[a.0].value;
        let tb = &self.nodes[b.0].value;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: ta.shape().to_vec(), data };
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(dim_err(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor { shape: vec![n, m], data: out }, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "div")?;
        if self.value(b).data().iter().any(|&y| y == 0.0) {
            return Err(TensorError::Domain { op: "div", detail: "division by zero".into() });
        }
        self.binary(a, b, Op::Div(a, b), "div", |x, y| x / y)
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "add_row")?;
        if self.value(row).len() != n {
            return Err(dim_err(
                "add_row",
                format!("{:?} + row {:?}", self.shape(a), self.shape(row)),
            ));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += y;
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
            return Err(TensorError::Domain { op: "sqrt", detail: format!("argument {x}") });
        }
        Ok(self.unary(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(TensorError::Domain { op: "log", detail: format!("argument {x}") });
        }
        Ok(self.unary(a, Op::Log(a), f64::ln))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Exponential linear unit with `alpha = 1`.
    pub fn elu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Elu(a), elu)
    }

    /// `ELU(x) + 1`, evaluated as `x + 1` or `exp(x)` so the result stays
    /// strictly positive for every finite input.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.unary(a, Op::EluPlusOne(a), elu_plus_one)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `min(x, cap)` elementwise; the gradient is zero where the cap binds.
    pub fn clamp_max(&mut self, a: Var, cap: f64) -> Var {
        self.unary(a, Op::ClampMax(a, cap), |x| x.min(cap))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Usage("mean of empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanAll(a), &[a]))
    }

    /// Sums a matrix over `axis`, keeping it as a unit dimension.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "sum_axis")?;
        let src = self.value(a).data();
        let value = match axis {
            0 => {
                let mut out = vec![0.0; n];
                for i in 0..m {
                    for (o, x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                        *o += x;
                    }
                }
                Tensor { shape: vec![1, n], data: out }
            }
            1 => {
                let out = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
                Tensor { shape: vec![m, 1], data: out }
            }
            _ => return Err(dim_err("sum_axis", format!("axis {axis} on a matrix"))),
        };
        Ok(self.push(value, Op::SumAxis(a, axis), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat_cols of nothing".into()));
        }
        let (m, _) = dims2(self.value(parts[0]), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != m {
                return Err(dim_err("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(Tensor { shape: vec![m, total], data: out }, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Usage("concat_rows of nothing".into()));
        }
        let (_, n) = dims2(self.value(parts[0]), "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != n {
                return Err(dim_err("concat_rows", format!("column counts {n} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor { shape: vec![rows, n], data: out }, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "slice_cols")?;
        if start + width > n {
            return Err(dim_err("slice_cols", format!("{start}..{} of {n} columns", start + width)));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * width);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + width]);
        }
        Ok(self.push(Tensor { shape: vec![m, width], data: out }, Op::SliceCols(a, start), &[a]))
    }

    /// Row lookup: output row `i` is row `indices[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, n) = dims2(self.value(table), "gather_rows")?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &r in indices {
            if r >= rows {
                return Err(dim_err("gather_rows", format!("row {r} of a {rows}-row table")));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let value = Tensor { shape: vec![indices.len(), n], data: out };
        Ok(self.push(value, Op::Gather(table, indices.to_vec()), &[table]))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + count).collect();
        self.gather_rows(a, &idx)
    }

    /// Softmax over the last axis restricted to entries where `keep` is true.
    /// Masked entries are exactly zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = dims2(self.value(a), "masked_softmax")?;
        if keep.len() != m * n {
            return Err(dim_err("masked_softmax", format!("mask of {} for {:?}", keep.len(), self.shape(a))));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let k = &keep[i * n..(i + 1) * n];
            let mx = row
                .iter()
                .zip(k)
                .filter(|(_, &k)| k)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if k[j] {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MaskedSoftmax(a), &[a]))
    }

    /// `out[i][j] = sum_k (a[i][k] - b[j][k])^2`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "pairwise_sq_dist")?;
        let (n, k2) = dims2(self.value(b), "pairwise_sq_dist")?;
        if k != k2 {
            return Err(dim_err(
                "pairwise_sq_dist",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ad, false, bd, true, &mut out, 0.0);
        let an: Vec<f64> = (0..m).map(|i| ad[i * k..(i + 1) * k].iter().map(|x| x * x).sum()).collect();
        let bn: Vec<f64> = (0..n).map(|j| bd[j * k..(j + 1) * k].iter().map(|x| x * x).sum()).collect();
        for i in 0..m {
            for j in 0..n {
                let v = &mut out[i * n + j];
                *v = (an[i] + bn[j] - 2.0 * *v).max(0.0);
            }
        }
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::PairwiseSqDist(a, b), &[a, b]))
    }

    /// Elementwise binary cross-entropy of logits against targets in `[0, 1]`,
    /// computed in the overflow-free form `max(x,0) - x*y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() {
            return Err(dim_err("bce_with_logits", format!("{} logits vs {} targets", t.len(), targets.len())));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let value = Tensor { shape: t.shape().to_vec(), data };
        Ok(self.push(value, Op::BceWithLogits(logits, targets.to_vec()), &[logits]))
    }

    /// Reverse pass from a scalar loss. Gradients of all tracked nodes are
    /// replaced by the result of this pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if !matches!(node.op, Op::Leaf) {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat(None))) {
            node.grad = match (node.requires_grad, g) {
                (true, Some(g)) => Some(Tensor { shape: node.value.shape().to_vec(), data: g }),
                (true, None) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            };
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let val = |v: &Var| &nodes[v.0].value;
        // Adds `delta` into the gradient slot of `v` if `v` is tracked.
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            delta(slot);
        };
        let ew = |v: Var, acc: &mut dyn FnMut(Var, &dyn Fn(&mut [f64])), f: &dyn Fn(usize) -> f64| {
            acc(v, &|s: &mut [f64]| {
                for (k, x) in s.iter_mut().enumerate() {
                    *x += g[k] * f(k);
                }
            });
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let (_, n) = val(b).dims2().unwrap();
                let (ad, bd) = (val(a).data(), val(b).data());
                acc(*a, &|s| gemm(m, n, k, g, false, bd, true, s, 1.0));
                acc(*b, &|s| gemm(k, m, n, ad, true, g, false, s, 1.0));
            }
            Op::Transpose(a) => {
                let (m, n) = val(a).dims2().unwrap();
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                ew(*a, &mut acc, &|_| 1.0);
                ew(*b, &mut acc, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                ew(*a, &mut acc, &|_| 1.0);
                ew(*b, &mut acc, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                ew(*a, &mut acc, &|k| bd[k]);
                ew(*b, &mut acc, &|k| ad[k]);
            }
            Op::Div(a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                ew(*a, &mut acc, &|k| 1.0 / bd[k]);
                ew(*b, &mut acc, &|k| -ad[k] / (bd[k] * bd[k]));
            }
            Op::AddRow(a, row) => {
                ew(*a, &mut acc, &|_| 1.0);
                let n = val(row).len();
                acc(*row, &|s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % n] += gv;
                    }
                });
            }
            Op::Scale(a, c) => ew(*a, &mut acc, &|_| *c),
            Op::AddScalar(a) => ew(*a, &mut acc, &|_| 1.0),
            Op::Sqrt(a) => {
                let od = out.data();
                ew(*a, &mut acc, &|k| 0.5 / od[k]);
            }
            Op::Square(a) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| 2.0 * ad[k]);
            }
            Op::Exp(a) => {
                let od = out.data();
                ew(*a, &mut acc, &|k| od[k]);
            }
            Op::Log(a) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| 1.0 / ad[k]);
            }
            Op::Relu(a) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| if ad[k] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Elu(a) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| if ad[k] > 0.0 { 1.0 } else { ad[k].exp() });
            }
            Op::EluPlusOne(a) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| if ad[k] > 0.0 { 1.0 } else { ad[k].exp() });
            }
            Op::Sigmoid(a) => {
                let od = out.data();
                ew(*a, &mut acc, &|k| od[k] * (1.0 - od[k]));
            }
            Op::ClampMax(a, cap) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| if ad[k] < *cap { 1.0 } else { 0.0 });
            }
            Op::SumAll(a) => acc(*a, &|s| {
                for x in s.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::MeanAll(a) => {
                let n = val(a).len() as f64;
                acc(*a, &|s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = val(a).dims2().unwrap();
                let axis = *axis;
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..n {
                            s[r * n + c] += if axis == 0 { g[c] } else { g[r] };
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let (_, w) = val(p).dims2().unwrap();
                    acc(*p, &|s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = val(p).len();
                    acc(*p, &|s| {
                        for (x, gv) in s.iter_mut().zip(&g[off..off + len]) {
                            *x += gv;
                        }
                    });
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = val(a).dims2().unwrap();
                let (_, w) = out.dims2().unwrap();
                acc(*a, &|s| {
                    for r in 0..m {
                        for c in 0..w {
                            s[r * n + start + c] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Gather(table, idx) => {
                let (_, n) = val(table).dims2().unwrap();
                acc(*table, &|s| {
                    for (o, &r) in idx.iter().enumerate() {
                        for c in 0..n {
                            s[r * n + c] += g[o * n + c];
                        }
                    }
                });
            }
            Op::MaskedSoftmax(a) => {
                let (m, n) = out.dims2().unwrap();
                let y = out.data();
                acc(*a, &|s| {
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            s[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (m, k) = val(a).dims2().unwrap();
                let (n, _) = val(b).dims2().unwrap();
                let (ad, bd) = (val(a).data(), val(b).data());
                // dA = 2 (rowsum(G) * A - G B), dB = 2 (colsum(G) * B - G^T A)
                acc(*a, &|s| {
                    let mut gb = vec![0.0; m * k];
                    gemm(m, n, k, g, false, bd, false, &mut gb, 0.0);
                    for r in 0..m {
                        let rs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for c in 0..k {
                            s[r * k + c] += 2.0 * (rs * ad[r * k + c] - gb[r * k + c]);
                        }
                    }
                });
                acc(*b, &|s| {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, g, true, ad, false, &mut ga, 0.0);
                    for j in 0..n {
                        let cs: f64 = (0..m).map(|r| g[r * n + j]).sum();
                        for c in 0..k {
                            s[j * k + c] += 2.0 * (cs * bd[j * k + c] - ga[j * k + c]);
                        }
                    }
                });
            }
            Op::BceWithLogits(a, targets) => {
                let ad = val(a).data();
                ew(*a, &mut acc, &|k| sigmoid(ad[k]) - targets[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn elu_forward_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 2.0, -1.0]).unwrap());
        let y = g.elu(x);
        let d = g.value(y).data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], 2.0);
        assert!((d[2] - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_half_half_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 3, &[0.0, 0.0, 0.0]).unwrap());
        let y = g.masked_softmax(x, &[true, true, false]).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 1], 1.0));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::Dimension { op: "matmul", .. }));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let neg = g.constant(s(-1.0));
        let zero = g.constant(s(0.0));
        assert!(matches!(g.sqrt(neg), Err(TensorError::Domain { .. })));
        assert!(matches!(g.log(zero), Err(TensorError::Domain { .. })));
        assert!(g.sqrt(zero).is_ok());
    }

    #[test]
    fn grad_of_square() {
        let mut g = Graph::new();
        let x = g.param(s(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn grad_of_sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.param(s(0.0));
        let y = g.sigmoid(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn grad_of_shifted_elu() {
        let mut g = Graph::new();
        let x = g.param(s(-1.0));
        let e = g.elu(x);
        let p = g.add_scalar(e, 1.0);
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(s(1.5));
        let y = g.add(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::Usage(_))));
    }

    #[test]
    fn untracked_nodes_get_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(s(2.0));
        let x = g.param(s(1.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn pairwise_distance_matches_direct() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, &[0.0, 1.0, 2.0, -1.0]).unwrap());
        let b = g.constant(Tensor::matrix(3, 2, &[0.0, 1.0, 1.0, 1.0, -2.0, 0.5]).unwrap());
        let d = g.pairwise_sq_dist(a, b).unwrap();
        let want = [0.0, 1.0, 4.25, 8.0, 5.0, 18.25];
        for (x, y) in g.value(d).data().iter().zip(want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 20.0, -800.0]).unwrap());
        let l = g.bce_with_logits(x, &[1.0, 1.0, 1.0]).unwrap();
        let d = g.value(l).data();
        assert!((d[0] - std::f64::consts::LN_2).abs() < 1e-15);
        // ln(1 + e^-20)
        assert!((d[1] - 2.061_153_620_314_381e-9).abs() < 1e-22);
        assert_eq!(d[2], 800.0);
    }
}
