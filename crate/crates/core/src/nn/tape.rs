//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! arena backwards is a valid topological order for the backward pass.

use super::tensor::{gemm, Tensor};
use super::{NnError, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    LeakyRelu(usize, f64),
    Softplus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    Log(usize),
    ClampMin(usize, f64),
    Square(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Reshape(usize),
    GroupMax(usize, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize), NnError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NnError::Shape {
            op,
            a: a.shape_str(),
            b: b.shape_str(),
        }),
    }
}

#[inline]
fn bidx(t: &Tensor, i: usize, j: usize) -> usize {
    let r = if t.rows() == 1 { 0 } else { i };
    let c = if t.cols() == 1 { 0 } else { j };
    r * t.cols() + c
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite output from {:?}",
            std::mem::discriminant(&op)
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is wanted (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        self.push(store.value(id).clone(), Op::Param(id), true)
    }

    /// Same value, no gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(NnError::Shape {
                op: "matmul",
                a: ta.shape_str(),
                b: tb.shape_str(),
            });
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        gemm(
            ta.rows(),
            ta.cols(),
            tb.cols(),
            &ta.data,
            false,
            &tb.data,
            false,
            &mut out.data,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(name, ta, tb)?;
        let mut out = Tensor::zeros(r, c);
        if ta.shape == tb.shape {
            for (o, (x, y)) in out.data.iter_mut().zip(ta.data.iter().zip(&tb.data)) {
                *o = f(*x, *y);
            }
        } else {
            for i in 0..r {
                for j in 0..c {
                    out.data[i * c + j] = f(ta.data[bidx(ta, i, j)], tb.data[bidx(tb, i, j)]);
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a.0))
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Var {
        self.unary(a, |x| x.max(min), Op::ClampMin(a.0, min))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a.0), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(NnError::Shape {
                    op: "concat_cols",
                    a: self.value(parts[0]).shape_str(),
                    b: t.shape_str(),
                });
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(NnError::Shape {
                    op: "concat_rows",
                    a: self.value(parts[0]).shape_str(),
                    b: t.shape_str(),
                });
            }
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(rows, cols, data),
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var, NnError> {
        let t = self.value(a);
        let c = t.cols();
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(NnError::Shape {
                op: "gather_rows",
                a: t.shape_str(),
                b: format!("index {bad}"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(idx.len(), c, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a.0, idx), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if start + len > t.cols() {
            return Err(NnError::Shape {
                op: "slice_cols",
                a: t.shape_str(),
                b: format!("[{start}, {})", start + len),
            });
        }
        let mut out = Tensor::zeros(t.rows(), len);
        for i in 0..t.rows() {
            out.data[i * len..(i + 1) * len].copy_from_slice(&t.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a.0, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if start + len > t.rows() {
            return Err(NnError::Shape {
                op: "slice_rows",
                a: t.shape_str(),
                b: format!("[{start}, {})", start + len),
            });
        }
        let c = t.cols();
        let out = Tensor::new(len, c, t.data[start * c..(start + len) * c].to_vec());
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a.0, start), rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if rows * cols != t.len() {
            return Err(NnError::Shape {
                op: "reshape",
                a: t.shape_str(),
                b: format!("{rows}x{cols}"),
            });
        }
        let out = Tensor::new(rows, cols, t.data.clone());
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Max over consecutive groups of `group` rows: `(n*group) x c -> n x c`.
    /// Ties pick the first row of the group.
    pub fn group_max(&mut self, a: Var, group: usize) -> Result<Var, NnError> {
        let t = self.value(a);
        if group == 0 || t.rows() % group != 0 {
            return Err(NnError::Shape {
                op: "group_max",
                a: t.shape_str(),
                b: format!("group {group}"),
            });
        }
        let (n, c) = (t.rows() / group, t.cols());
        let mut out = Tensor::zeros(n, c);
        let mut arg = vec![0usize; n * c];
        for g in 0..n {
            for j in 0..c {
                let mut best = (g * group) * c + j;
                for r in 1..group {
                    let idx = (g * group + r) * c + j;
                    if t.data[idx] > t.data[best] {
                        best = idx;
                    }
                }
                out.data[g * c + j] = t.data[best];
                arg[g * c + j] = best;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::GroupMax(a.0, arg), rg))
    }

    /// `x W + b` with a `1 x out` bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let h = self.matmul(x, w)?;
        self.add(h, b)
    }

    /// Gradients of the scalar `root` w.r.t. every node that requires one.
    pub fn backward(&self, root: Var) -> Grads {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let rt = &self.nodes[root.0].value;
        grads[root.0] = Some(Tensor::full(rt.rows(), rt.cols(), 1.0));
        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut grads[idx] {
            Some(existing) => {
                for (e, v) in existing.data.iter_mut().zip(&g.data) {
                    *e += v;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reduces a gradient of the broadcast output shape back onto `src`.
    fn unbroadcast(&self, g: &Tensor, src: usize, f: impl Fn(usize, usize, f64) -> f64) -> Tensor {
        let s = &self.nodes[src].value;
        let mut out = Tensor::zeros(s.rows(), s.cols());
        let c = g.cols();
        for i in 0..g.rows() {
            for j in 0..c {
                out.data[bidx(s, i, j)] += f(i, j, g.data[i * c + j]);
            }
        }
        out
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let input = |k: usize| &self.nodes[k].value;
        let elementwise = |a: usize, f: &dyn Fn(f64, f64) -> f64| {
            let x = &self.nodes[a].value;
            Tensor {
                shape: x.shape.clone(),
                data: x
                    .data
                    .iter()
                    .zip(&y.data)
                    .zip(&g.data)
                    .map(|((&xv, &yv), &gv)| gv * f(xv, yv))
                    .collect(),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (input(*a), input(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[*a].requires_grad {
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, &g.data, false, &tb.data, true, &mut ga.data, 0.0);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let mut gb = Tensor::zeros(k, n);
                    gemm(k, m, n, &ta.data, true, &g.data, false, &mut gb.data, 0.0);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = self.unbroadcast(g, *a, |_, _, v| v);
                self.acc(grads, *a, ga);
                let gb = self.unbroadcast(g, *b, |_, _, v| sign * v);
                self.acc(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (input(*a), input(*b));
                if self.nodes[*a].requires_grad {
                    let ga = self.unbroadcast(g, *a, |r, c, v| v * tb.data[bidx(tb, r, c)]);
                    self.acc(grads, *a, ga);
                }
                if self.nodes[*b].requires_grad {
                    let gb = self.unbroadcast(g, *b, |r, c, v| v * ta.data[bidx(ta, r, c)]);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let mut ga = g.clone();
                ga.shape = input(*a).shape.clone();
                self.acc(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { s });
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = elementwise(*a, &|x, _| sigmoid(x));
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = elementwise(*a, &|_, y| y * (1.0 - y));
                self.acc(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = elementwise(*a, &|_, y| 1.0 - y * y);
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = elementwise(*a, &|_, y| y);
                self.acc(grads, *a, ga);
            }
            Op::Abs(a) => {
                let ga = elementwise(*a, &|x, _| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = elementwise(*a, &|x, _| 1.0 / x);
                self.acc(grads, *a, ga);
            }
            Op::ClampMin(a, min) => {
                let m = *min;
                let ga = elementwise(*a, &|x, _| if x > m { 1.0 } else { 0.0 });
                self.acc(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = elementwise(*a, &|x, _| 2.0 * x);
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => {
                let t = input(*a);
                self.acc(grads, *a, Tensor::full(t.rows(), t.cols(), g.data[0]));
            }
            Op::Mean(a) => {
                let t = input(*a);
                let v = g.data[0] / t.len().max(1) as f64;
                self.acc(grads, *a, Tensor::full(t.rows(), t.cols(), v));
            }
            Op::ConcatCols(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let c = input(p).cols();
                    if self.nodes[p].requires_grad {
                        let mut gp = Tensor::zeros(g.rows(), c);
                        for r in 0..g.rows() {
                            gp.data[r * c..(r + 1) * c]
                                .copy_from_slice(&g.data[r * cols + off..r * cols + off + c]);
                        }
                        self.acc(grads, p, gp);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = input(p);
                    if self.nodes[p].requires_grad {
                        let gp =
                            Tensor::new(t.rows(), t.cols(), g.data[off..off + t.len()].to_vec());
                        self.acc(grads, p, gp);
                    }
                    off += t.len();
                }
            }
            Op::GatherRows(a, idx) => {
                let t = input(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga.data[src * c + j] += g.data[r * c + j];
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let t = input(*a);
                let (c, len) = (t.cols(), g.cols());
                let mut ga = Tensor::zeros(t.rows(), c);
                for r in 0..t.rows() {
                    ga.data[r * c + start..r * c + start + len]
                        .copy_from_slice(&g.data[r * len..(r + 1) * len]);
                }
                self.acc(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let t = input(*a);
                let c = t.cols();
                let mut ga = Tensor::zeros(t.rows(), c);
                ga.data[start * c..start * c + g.len()].copy_from_slice(&g.data);
                self.acc(grads, *a, ga);
            }
            Op::GroupMax(a, arg) => {
                let t = input(*a);
                let mut ga = Tensor::zeros(t.rows(), t.cols());
                for (o, &src) in arg.iter().enumerate() {
                    ga.data[src] += g.data[o];
                }
                self.acc(grads, *a, ga);
            }
        }
    }

    /// Adds the gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate().take(grads.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.add_grad(*id, g);
            }
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}
