//! Define-by-run reverse-mode differentiation.
//!
//! Every primitive applied through a [`Tape`] appends a node holding its
//! output value. Nodes whose inputs all lack `requires_grad` are stored as
//! constants, so the tape only carries backward rules along paths that can
//! reach a trainable leaf. [`Tape::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because an
//! op can only reference nodes that already exist.

use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Softmax(usize),
    LayerNorm { input: usize, inv_std: Vec<f64> },
    Gelu(usize),
    ConcatRows(Vec<usize>),
    SliceRows { input: usize, start: usize },
    ConcatCols(Vec<usize>),
    SliceCols { input: usize, start: usize },
    GatherRows { input: usize, index: Vec<usize> },
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by one backward pass, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// d(loss)/d(var), or `None` if no path connects them.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.idx).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `var`, zero when unconnected.
    pub fn tensor(&self, tape: &Tape, var: Var) -> Tensor {
        let value = tape.value(var);
        match self.get(var) {
            Some(g) => Tensor::new(value.shape().to_vec(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(value.shape()),
        }
    }
}

/// `c = op(a) * op(b)` with op an optional transpose.
///
/// `a` is stored `m x k` (or `k x m` when `trans_a`), `b` is stored `k x n`
/// (or `n x k` when `trans_b`). With `accumulate` the product is added to `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and the strides describe
    // in-bounds row-major views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu_forward(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::NotOnTape);
        }
        Ok(v.idx)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var belongs to another tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self.id, idx: self.nodes.len() - 1 })
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.same_shape(name, ia, ib)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.zip_with("add", a, b, Op::Add(ia, ib), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.zip_with("sub", a, b, Op::Sub(ia, ib), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.zip_with("mul", a, b, Op::Mul(ia, ib), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect())?;
        self.push("scale", value, Op::Scale(ia, s), &[ia])
    }

    fn row_operand(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (ta, tb) = (self.val(a), self.val(b));
        if tb.ndim() != 1 || tb.numel() != ta.last_dim() || ta.ndim() == 0 {
            return Err(Error::shape(
                op,
                format!("row operand {:?} does not match last axis of {:?}", tb.shape(), ta.shape()),
            ));
        }
        Ok(())
    }

    /// Adds a length-`n` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.row_operand("add_row", ia, ib)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let n = tb.numel();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + tb.data()[i % n]).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(ia, ib), &[ia, ib])
    }

    /// Multiplies every row of `a` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        self.row_operand("mul_row", ia, ib)?;
        let (ta, tb) = (self.val(ia), self.val(ib));
        let n = tb.numel();
        let data = ta.data().iter().enumerate().map(|(i, x)| x * tb.data()[i % n]).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_row", value, Op::MulRow(ia, ib), &[ia, ib])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (m, k) = matrix_dims("matmul", self.val(ia))?;
        let (k2, n) = matrix_dims("matmul", self.val(ib))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {m}x{k} * {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.val(ia).data(), false, self.val(ib).data(), false, &mut out, false);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(ia, ib), &[ia, ib])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (m, n) = matrix_dims("transpose", self.val(ia))?;
        let src = self.val(ia).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(ia), &[ia])
    }

    /// Softmax over the last axis, computed with row-max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if t.ndim() == 0 {
            return Err(Error::shape("softmax", "scalar input"));
        }
        let c = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(ia), &[ia])
    }

    /// Standardizes each row over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        if t.ndim() == 0 {
            return Err(Error::shape("layer_norm", "scalar input"));
        }
        let c = t.last_dim();
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(t.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("layer_norm", value, Op::LayerNorm { input: ia, inv_std }, &[ia])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| gelu_forward(x)).collect())?;
        self.push("gelu", value, Op::Gelu(ia), &[ia])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs"));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let mut cols = None;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let (r, c) = matrix_dims("concat_rows", self.val(i))?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::shape("concat_rows", format!("column count {c} vs {}", cols.unwrap())));
            }
            rows += r;
            data.extend_from_slice(self.val(i).data());
        }
        let value = Tensor::matrix(rows, cols.unwrap(), data)?;
        self.push("concat_rows", value, Op::ConcatRows(idx.clone()), &idx)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let (r, c) = matrix_dims("slice_rows", self.val(ia))?;
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let data = self.val(ia).data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::matrix(len, c, data)?, Op::SliceRows { input: ia, start }, &[ia])
    }

    /// Splits a matrix into consecutive row blocks of the given sizes.
    pub fn split_rows(&mut self, a: Var, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice_rows(a, start, len)?);
            start += len;
        }
        let (r, _) = matrix_dims("split_rows", self.value(a))?;
        if start != r {
            return Err(Error::shape("split_rows", format!("sizes sum to {start}, matrix has {r} rows")));
        }
        Ok(out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs"));
        }
        let idx = parts.iter().map(|&p| self.index(p)).collect::<Result<Vec<_>>>()?;
        let mut rows = None;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = matrix_dims("concat_cols", self.val(i))?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", format!("row count {r} vs {}", rows.unwrap())));
            }
            widths.push(c);
        }
        let rows = rows.unwrap();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                data.extend_from_slice(&self.val(i).data()[row * w..(row + 1) * w]);
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        self.push("concat_cols", value, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.index(a)?;
        let (r, c) = matrix_dims("slice_cols", self.val(ia))?;
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.val(ia).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        self.push("slice_cols", Tensor::matrix(r, len, data)?, Op::SliceCols { input: ia, start }, &[ia])
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let ia = self.index(a)?;
        let (r, c) = matrix_dims("gather_rows", self.val(ia))?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let src = self.val(ia).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let value = Tensor::matrix(index.len(), c, data)?;
        self.push("gather_rows", value, Op::GatherRows { input: ia, index: index.to_vec() }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let s = self.val(ia).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(ia), &[ia])
    }

    /// Column means of a matrix, returned as a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.index(a)?;
        let (r, c) = matrix_dims("mean_rows", self.val(ia))?;
        let mut out = vec![0.0; c];
        for row in self.val(ia).data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        self.push("mean_rows", Tensor::vector(out)?, Op::MeanRows(ia), &[ia])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.index(logits)?;
        let (m, c) = matrix_dims("softmax_cross_entropy", self.val(il))?;
        if labels.len() != m {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape("softmax_cross_entropy", format!("label {bad} with {c} classes")));
        }
        let mut probs = self.val(il).data().to_vec();
        let mut loss = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / m as f64);
        let op = Op::SoftmaxCrossEntropy { logits: il, labels: labels.to_vec(), probs };
        self.push("softmax_cross_entropy", value, op, &[il])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.index(a)?;
        let value = self.val(ia).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(ia), &[ia])
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.index(loss)?;
        if self.val(li).ndim() != 0 {
            return Err(Error::NotScalar(self.val(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let n = self.nodes[j].value.numel();
        Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(s) = self.slot(grads, j) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (j, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(s) = self.slot(grads, j) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += sign * g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * vb[k];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for k in 0..g.len() {
                        s[k] += g[k] * va[k];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += f * g);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let n = s.len();
                    for (k, gk) in g.iter().enumerate() {
                        s[k % n] += gk;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (self.val(*a).data(), self.val(*b).data());
                let n = vb.len();
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * vb[k % n];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for k in 0..g.len() {
                        s[k % n] += g[k] * va[k];
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.val(*a), self.val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(s) = self.slot(grads, *a) {
                    // dA = dC B^T
                    gemm(m, n, k, g, false, tb.data(), true, s, true);
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T dC
                    gemm(k, m, n, ta.data(), true, g, false, s, true);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[1], y.shape()[0]);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let c = y.last_dim();
                    for ((sr, yr), gr) in s.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for k in 0..c {
                            sr[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, inv_std } => {
                if let Some(s) = self.slot(grads, *input) {
                    let c = y.last_dim();
                    let rows = s.chunks_mut(c).zip(y.data().chunks(c)).zip(g.chunks(c));
                    for (((sr, yr), gr), r) in rows.zip(inv_std) {
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                        for k in 0..c {
                            sr[k] += r * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.val(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for k in 0..g.len() {
                        s[k] += g[k] * gelu_derivative(x[k]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.val(p).numel();
                    if let Some(s) = self.slot(grads, p) {
                        s.iter_mut().zip(&g[offset..offset + n]).for_each(|(s, g)| *s += g);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { input, start } => {
                let c = y.last_dim();
                if let Some(s) = self.slot(grads, *input) {
                    s[start * c..start * c + g.len()].iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = y.shape()[0];
                let total = y.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.val(p).shape()[1];
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..rows {
                            for k in 0..w {
                                s[r * w + k] += g[r * total + offset + k];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let (rows, w) = (y.shape()[0], y.shape()[1]);
                let c = self.val(*input).shape()[1];
                if let Some(s) = self.slot(grads, *input) {
                    for r in 0..rows {
                        for k in 0..w {
                            s[r * c + start + k] += g[r * w + k];
                        }
                    }
                }
            }
            Op::GatherRows { input, index } => {
                let c = y.last_dim();
                if let Some(s) = self.slot(grads, *input) {
                    for (r, &i) in index.iter().enumerate() {
                        for k in 0..c {
                            s[i * c + k] += g[r * c + k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let f = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += f);
                }
            }
            Op::MeanRows(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let c = g.len();
                    let rows = s.len() / c;
                    for (k, sk) in s.iter_mut().enumerate() {
                        *sk += g[k % c] / rows as f64;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if let Some(s) = self.slot(grads, *logits) {
                    let m = labels.len();
                    let c = probs.len() / m;
                    let f = g[0] / m as f64;
                    for (r, &lab) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == lab { 1.0 } else { 0.0 };
                            s[r * c + k] += f * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_uniform_row() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap()).unwrap();
        let s = tape.softmax(v).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = m(2, 2, &[1.5, -2.0, 0.25, 7.0]);
        let i = tape.constant(Tensor::eye(2)).unwrap();
        let av = tape.constant(a.clone()).unwrap();
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out), &a);
    }

    #[test]
    fn constant_row_layer_norm_is_zero() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![5.0; 4]).unwrap()).unwrap();
        let y = tape.layer_norm(v).unwrap();
        assert!(tape.value(y).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = tape.leaf(Tensor::scalar(3.0), true).unwrap();
        let xy = tape.mul(x, y).unwrap();
        let g = tape.backward(xy).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0]);
        assert_eq!(g.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.7]).unwrap(), true).unwrap();
        let s = tape.softmax(v).unwrap();
        let total = tape.sum(s).unwrap();
        let g = tape.backward(total).unwrap();
        assert!(g.get(v).unwrap().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn unconnected_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true).unwrap();
        let unused = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true).unwrap();
        let l = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.tensor(&tape, unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_on_same_tape() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true).unwrap();
        assert!(matches!(tape.backward(v), Err(Error::NotScalar(_))));

        let mut other = Tape::new();
        let w = other.leaf(Tensor::scalar(1.0), true).unwrap();
        assert!(matches!(tape.backward(w), Err(Error::NotOnTape)));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(m(2, 3, &[0.0; 6])).unwrap();
        let b = tape.constant(m(2, 3, &[0.0; 6])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("2x3"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.leaf(Tensor::scalar(f64::NAN), false),
            Err(Error::NonFinite { .. })
        ));
        let big = tape.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(tape.mul(big, big), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn transposed_gemm_paths_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // a^T stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &b, false, &mut c2, false);
        assert_eq!(c, c2);
    }
}
