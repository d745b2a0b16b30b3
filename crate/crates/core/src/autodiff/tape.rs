//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and appends a node. Node inputs always
//! precede the node itself, so a single reverse sweep over the node list is a
//! valid topological traversal.

use crate::autodiff::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a trainable tensor in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.into(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }
}

/// Test hook that deliberately breaks one adjoint, used as a negative control
/// for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjointFault {
    /// Scales the sigmoid adjoint by 1.5.
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulCol(Var, Var),
    Square(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    MeanRows(Var),
    Transpose(Var),
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    RepeatRows(Var),
    SoftmaxRows(Var),
    SoftmaxCrossEntropy(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<AdjointFault>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: AdjointFault) {
        self.fault = Some(fault);
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
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record the current value of a parameter; `backward` accumulates into its gradient.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        let v = self.push(params.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let out = x.zip_map(y, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `a + row`, broadcasting a 1×d row across every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(shape_err("add_row", x, r));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x, y));
        }
        let out = x.zip_map(y, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a * s` with `s` a 1×1 node.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        let c = sv.item().map_err(|_| shape_err("scale_by", x, sv))?;
        let out = x.map(|v| v * c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleBy(a, s), rg))
    }

    /// `a ⊙ col`, broadcasting an n×1 column across every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (x, c) = (self.value(a), self.value(col));
        if c.cols() != 1 || c.rows() != x.rows() {
            return Err(shape_err("mul_col", x, c));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            let w = c.get(i, 0);
            out.row_mut(i).iter_mut().for_each(|o| *o *= w);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let rg = self.rg(a);
        self.push(out, Op::Softplus(a), rg)
    }

    /// Column-wise mean, n×d → 1×d.
    ///
    /// Each column is summed in sorted order, so the result is bit-identical under any
    /// permutation of the rows.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("mean_rows of an empty tensor".into()));
        }
        let n = x.rows() as f64;
        let mut column = vec![0.0; x.rows()];
        let out = Tensor::from_fn(1, x.cols(), |_, j| {
            for (i, c) in column.iter_mut().enumerate() {
                *c = x.get(i, j);
            }
            canonical_sum(&mut column) / n
        });
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("sum_all of an empty tensor".into()));
        }
        let out = Tensor::scalar(x.sum());
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumAll(a), rg))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Empty("mean_all of an empty tensor".into()));
        }
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanAll(a), rg))
    }

    /// Horizontal concatenation of tensors sharing a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for i in 0..rows {
                out.row_mut(i)[offset..offset + v.cols()].copy_from_slice(v.row(i));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column `j` of `a` as an n×1 tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let x = self.value(a);
        if j >= x.cols() {
            return Err(Error::InvalidArgument(format!(
                "column {j} out of range for {:?}",
                x.shape()
            )));
        }
        let out = Tensor::from_fn(x.rows(), 1, |i, _| x.get(i, j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::Column(a, j), rg))
    }

    /// Repeat a 1×d row `n` times into an n×d tensor.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(shape_err("repeat_rows", x, &Tensor::zeros(1, x.cols())));
        }
        let out = Tensor::from_fn(n, x.cols(), |_, j| x.get(0, j));
        let rg = self.rg(a);
        Ok(self.push(out, Op::RepeatRows(a), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.cols() == 0 {
            return Err(Error::Empty("softmax over an empty set".into()));
        }
        let mut out = x.clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SoftmaxRows(a), rg))
    }

    /// Softmax over a set of 1×1 scores; returns one 1×1 weight per input.
    pub fn softmax_over_set(&mut self, scores: &[Var]) -> Result<Vec<Var>> {
        let row = self.concat_cols(scores)?;
        let w = self.softmax_rows(row)?;
        (0..scores.len()).map(|t| self.column(w, t)).collect()
    }

    /// Mean softmax cross-entropy of n×c logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != targets.len() || z.rows() == 0 {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                left: z.shape(),
                right: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= z.cols()) {
            return Err(Error::InvalidArgument(format!(
                "class index {bad} out of range for {} logits",
                z.cols()
            )));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(out, Op::SoftmaxCrossEntropy(logits, targets.to_vec()), rg))
    }

    /// Reverse sweep from a scalar `loss`, adding ∂loss/∂p into every reachable parameter's
    /// gradient buffer.
    ///
    /// Gradients accumulate across calls; call [`ParamSet::zero_grad`] between steps.
    /// Parameters that the loss does not depend on are left untouched.
    pub fn backward(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                params.get_mut(id).grad.add_assign(&g);
            }
        }
        Ok(())
    }

    /// Adjoints of every node with respect to a scalar `loss`.
    ///
    /// Entries are `None` for nodes that do not require a gradient or are unreachable.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Shape {
                op: "backward (loss must be scalar)",
                left: lv.shape(),
                right: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(1, 1));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).data()[0];
                self.accumulate(grads, *a, g.map(|x| x * sv));
                if self.rg(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(p, q)| p * q).sum();
                    self.accumulate(grads, *s, Tensor::scalar(dot));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows() {
                        let w = cv.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|x| *x *= w);
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*col) {
                    let gc = Tensor::from_fn(av.rows(), 1, |r, _| {
                        g.row(r).iter().zip(av.row(r)).map(|(p, q)| p * q).sum()
                    });
                    self.accumulate(grads, *col, gc);
                }
            }
            Op::Square(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| 2.0 * x * gi);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                // Subgradient 0 at exactly 0.
                let ga = g.zip_map(self.value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let k = match self.fault {
                    Some(AdjointFault::Sigmoid) => 1.5,
                    None => 1.0,
                };
                let ga = g.zip_map(out, |gi, s| k * gi * s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let inv = 1.0 / av.rows() as f64;
                let ga = Tensor::from_fn(av.rows(), av.cols(), |_, j| g.get(0, j) * inv);
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), g.data()[0]));
            }
            Op::MeanAll(a) => {
                let av = self.value(*a);
                let v = g.data()[0] / av.len() as f64;
                self.accumulate(grads, *a, Tensor::full(av.rows(), av.cols(), v));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        let gp = Tensor::from_fn(g.rows(), pc, |r, c| g.get(r, offset + c));
                        self.accumulate(grads, p, gp);
                    }
                    offset += pc;
                }
            }
            Op::Column(a, j) => {
                let av = self.value(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    ga.set(r, *j, g.get(r, 0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RepeatRows(a) => {
                let mut ga = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gr[c] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxCrossEntropy(logits, targets) => {
                let z = self.value(*logits);
                let scale = g.data()[0] / targets.len() as f64;
                let mut gz = z.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = gz.row_mut(r);
                    softmax_in_place(row);
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|x| *x *= scale);
                }
                self.accumulate(grads, *logits, gz);
            }
        }
    }
}

/// Sum that does not depend on the order of `values` (which it sorts in place).
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Numerically stable softmax of a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}
