//! Reverse-mode tape. Every operation appends a node; node order is a
//! topological order, so `backward` is a single reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::tensor::{Mask, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Tanh(usize),
    Gelu(usize),
    Custom(usize, fn(f64) -> f64),
    Concat(Vec<usize>, Axis),
    Slice { src: usize, axis: Axis, start: usize },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { src: usize, inv_std: Vec<f64> },
    L2Normalize { src: usize, norms: Vec<f64> },
    MaskedLogSumExp { src: usize, mask: Rc<Mask> },
    SumAll(usize),
    MeanAll(usize),
    Pick { src: usize, cells: Vec<(usize, usize)> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

/// Recording context for one forward/backward pass. Single-threaded; build a
/// fresh tape per pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

fn shape_err(msg: String) -> NumericsError {
    NumericsError::Shape(msg)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// A value that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a parameter; `backward` accumulates into its gradient.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Concatenates matrices along `axis`.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: Axis) -> Result<Var<'t>, NumericsError> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let first = values.first().ok_or_else(|| shape_err("concat of nothing".into()))?;
        let (r0, c0) = first.dims()?;
        let mut data = Vec::new();
        let (rows, cols) = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for v in &values {
                    let (r, c) = v.dims()?;
                    if c != c0 {
                        return Err(shape_err(format!("concat rows: {c} vs {c0} columns")));
                    }
                    rows += r;
                    data.extend_from_slice(v.data());
                }
                (rows, c0)
            }
            Axis::Cols => {
                let mut cols = 0;
                for v in &values {
                    let (r, c) = v.dims()?;
                    if r != r0 {
                        return Err(shape_err(format!("concat cols: {r} vs {r0} rows")));
                    }
                    cols += c;
                }
                for i in 0..r0 {
                    for v in &values {
                        data.extend_from_slice(v.row(i));
                    }
                }
                (r0, cols)
            }
        };
        Ok(self.push(
            Tensor::matrix(rows, cols, data)?,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        ))
    }

    /// Accumulates `∂loss/∂p` into every parameter reachable from `loss`.
    /// Gradients add to whatever the store already holds.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<(), NumericsError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if root.len() != 1 {
            return Err(NumericsError::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.item().is_finite() {
            return Err(NumericsError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        }

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            let out = &node.value;
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (n, k) = (av.rows(), av.cols());
                    let m = bv.cols();
                    acc(&mut grads, *a, n * k, |da| {
                        for i in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[i * m + j] * bv.data()[p * m + j];
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                    acc(&mut grads, *b, k * m, |db| {
                        for i in 0..n {
                            for p in 0..k {
                                let a_ip = av.data()[i * k + p];
                                for j in 0..m {
                                    db[p * m + j] += a_ip * g[i * m + j];
                                }
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (out.rows(), out.cols());
                    acc(&mut grads, *a, r * c, |da| {
                        for i in 0..r {
                            for j in 0..c {
                                da[j * r + i] += g[i * c + j];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *b, g.len(), |d| {
                        for (x, y) in d.iter_mut().zip(&g) {
                            *x -= y;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * bv.data()[i];
                        }
                    });
                    acc(&mut grads, *b, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * av.data()[i];
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    let c = out.cols();
                    acc(&mut grads, *a, g.len(), |d| add_into(d, &g));
                    acc(&mut grads, *row, c, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i % c] += gi;
                        }
                    });
                }
                Op::MulRow(a, row) => {
                    let c = out.cols();
                    let (av, rv) = (val(*a), val(*row));
                    acc(&mut grads, *a, g.len(), |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] * rv.data()[i % c];
                        }
                    });
                    acc(&mut grads, *row, c, |d| {
                        for (i, gi) in g.iter().enumerate() {
                            d[i % c] += gi * av.data()[i];
                        }
                    });
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.len(), |d| {
                    for (x, gi) in d.iter_mut().zip(&g) {
                        *x += s * gi;
                    }
                }),
                Op::AddScalar(a) => acc(&mut grads, *a, g.len(), |d| add_into(d, &g)),
                Op::Exp(a) => elementwise(&mut grads, *a, &g, |i| out.data()[i]),
                Op::Log(a) => {
                    let x = val(*a);
                    elementwise(&mut grads, *a, &g, |i| 1.0 / x.data()[i]);
                }
                Op::Sigmoid(a) => elementwise(&mut grads, *a, &g, |i| {
                    let y = out.data()[i];
                    y * (1.0 - y)
                }),
                Op::LogSigmoid(a) => {
                    let x = val(*a);
                    elementwise(&mut grads, *a, &g, |i| sigmoid(-x.data()[i]));
                }
                Op::Tanh(a) => elementwise(&mut grads, *a, &g, |i| {
                    let y = out.data()[i];
                    1.0 - y * y
                }),
                Op::Gelu(a) => {
                    let x = val(*a);
                    elementwise(&mut grads, *a, &g, |i| gelu_grad(x.data()[i]));
                }
                Op::Custom(a, df) => {
                    let x = val(*a);
                    elementwise(&mut grads, *a, &g, |i| df(x.data()[i]));
                }
                Op::Concat(parts, axis) => {
                    let cols = out.cols();
                    let mut offset = 0;
                    for p in parts {
                        let pv = val(*p);
                        let (pr, pc) = (pv.rows(), pv.cols());
                        acc(&mut grads, *p, pr * pc, |d| match axis {
                            Axis::Rows => add_into(d, &g[offset * cols..(offset + pr) * cols]),
                            Axis::Cols => {
                                for i in 0..pr {
                                    for j in 0..pc {
                                        d[i * pc + j] += g[i * cols + offset + j];
                                    }
                                }
                            }
                        });
                        offset += match axis {
                            Axis::Rows => pr,
                            Axis::Cols => pc,
                        };
                    }
                }
                Op::Slice { src, axis, start } => {
                    let sv = val(*src);
                    let (sr, sc) = (sv.rows(), sv.cols());
                    let (r, c) = (out.rows(), out.cols());
                    acc(&mut grads, *src, sr * sc, |d| match axis {
                        Axis::Rows => add_into(&mut d[start * sc..(start + r) * sc], &g),
                        Axis::Cols => {
                            for i in 0..r {
                                for j in 0..c {
                                    d[i * sc + start + j] += g[i * c + j];
                                }
                            }
                        }
                    });
                }
                Op::Softmax(a) => {
                    let c = out.cols();
                    acc(&mut grads, *a, g.len(), |d| {
                        for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                            let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                            for j in 0..c {
                                d[r * c + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
                Op::LogSoftmax(a) => {
                    let c = out.cols();
                    acc(&mut grads, *a, g.len(), |d| {
                        for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                            let total: f64 = grow.iter().sum();
                            for j in 0..c {
                                d[r * c + j] += grow[j] - yrow[j].exp() * total;
                            }
                        }
                    });
                }
                Op::LayerNorm { src, inv_std } => {
                    let c = out.cols();
                    acc(&mut grads, *src, g.len(), |d| {
                        for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                            let mean_g = grow.iter().sum::<f64>() / c as f64;
                            let mean_gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                            for j in 0..c {
                                d[r * c + j] += inv_std[r] * (grow[j] - mean_g - yrow[j] * mean_gy);
                            }
                        }
                    });
                }
                Op::L2Normalize { src, norms } => {
                    let c = out.cols();
                    acc(&mut grads, *src, g.len(), |d| {
                        for (r, (grow, yrow)) in g.chunks(c).zip(out.data().chunks(c)).enumerate() {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                d[r * c + j] += (grow[j] - yrow[j] * dot) / norms[r];
                            }
                        }
                    });
                }
                Op::MaskedLogSumExp { src, mask } => {
                    let x = val(*src);
                    let c = x.cols();
                    acc(&mut grads, *src, x.len(), |d| {
                        for r in 0..x.rows() {
                            let lse = out.data()[r];
                            for j in 0..c {
                                if mask.get(r, j) {
                                    d[r * c + j] += g[r] * (x.data()[r * c + j] - lse).exp();
                                }
                            }
                        }
                    });
                }
                Op::SumAll(a) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0]));
                }
                Op::MeanAll(a) => {
                    let n = val(*a).len();
                    acc(&mut grads, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0] / n as f64));
                }
                Op::Pick { src, cells } => {
                    let sv = val(*src);
                    let c = sv.cols();
                    acc(&mut grads, *src, sv.len(), |d| {
                        for (k, (r, j)) in cells.iter().enumerate() {
                            d[r * c + j] += g[k];
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn elementwise(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64], deriv: impl Fn(usize) -> f64) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; g.len()]);
    for (i, d) in slot.iter_mut().enumerate() {
        *d += g[i] * deriv(i);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -log(1 + e^{-x})
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Row-wise softmax restricted to allowed entries; masked entries are exactly 0.
pub fn softmax_rows(x: &Tensor, mask: Option<&Mask>) -> Result<Tensor, NumericsError> {
    let (r, c) = x.dims()?;
    if let Some(m) = mask {
        if m.dims() != (r, c) {
            return Err(shape_err(format!("mask {:?} for logits {r}x{c}", m.dims())));
        }
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row(i);
        if row.iter().any(|v| v.is_nan()) {
            return Err(NumericsError::NonFinite(format!("softmax input row {i}")));
        }
        let allowed = |j: usize| mask.is_none_or(|m| m.get(i, j));
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if allowed(j) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(NumericsError::AllMaskedRow(i));
        }
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            if allowed(j) {
                let e = (v - max).exp();
                out[i * c + j] = e;
                sum += e;
            }
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn dims(&self) -> (usize, usize) {
        let v = self.value();
        (v.rows(), v.cols())
    }

    /// Scalar value of a `1×1` variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<(Rc<Tensor>, Rc<Tensor>), NumericsError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.tape.push(v, op)
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn t(&self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.push(v, Op::Transpose(self.id))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "add")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "sub")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let (a, b) = self.same_shape(other, "mul")?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id)))
    }

    fn row_broadcast(&self, row: &Var<'t>, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let (a, r) = (self.value(), row.value());
        let (_, c) = a.dims()?;
        if r.dims()? != (1, c) {
            return Err(shape_err(format!("row broadcast of {:?} onto {:?}", r.shape(), a.shape())));
        }
        let data = a.data().iter().enumerate().map(|(i, x)| f(*x, r.data()[i % c])).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    /// Adds a `1×cols` row to every row.
    pub fn add_row(&self, row: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.row_broadcast(row, |x, y| x + y)?;
        Ok(self.tape.push(v, Op::AddRow(self.id, row.id)))
    }

    /// Multiplies every row elementwise by a `1×cols` row.
    pub fn mul_row(&self, row: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        let v = self.row_broadcast(row, |x, y| x * y)?;
        Ok(self.tape.push(v, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, s), |x| x * s)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + s)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    /// `log σ(x)`, stable for large `|x|`.
    pub fn log_sigmoid(&self) -> Var<'t> {
        self.unary(Op::LogSigmoid(self.id), log_sigmoid)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_grad(&self, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var<'t> {
        self.unary(Op::Custom(self.id, df), f)
    }

    pub fn slice(&self, axis: Axis, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let (r, c) = v.dims()?;
        let limit = if axis == Axis::Rows { r } else { c };
        if start > end || end > limit {
            return Err(shape_err(format!("slice {start}..{end} of {axis:?} with {limit}")));
        }
        let t = match axis {
            Axis::Rows => Tensor::matrix(end - start, c, v.data()[start * c..end * c].to_vec())?,
            Axis::Cols => {
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&v.row(i)[start..end]);
                }
                Tensor::matrix(r, end - start, data)?
            }
        };
        Ok(self.tape.push(t, Op::Slice { src: self.id, axis, start }))
    }

    pub fn softmax(&self) -> Result<Var<'t>, NumericsError> {
        let v = softmax_rows(&self.value(), None)?;
        Ok(self.tape.push(v, Op::Softmax(self.id)))
    }

    /// Row-wise softmax where masked-out entries get weight exactly 0.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Var<'t>, NumericsError> {
        let v = softmax_rows(&self.value(), Some(mask))?;
        Ok(self.tape.push(v, Op::Softmax(self.id)))
    }

    pub fn log_softmax(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (r, c) = x.dims()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        Ok(self.tape.push(Tensor::matrix(r, c, out)?, Op::LogSoftmax(self.id)))
    }

    /// Per-row standardization (no affine part).
    pub fn layer_norm(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (r, c) = x.dims()?;
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(s);
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * s;
            }
        }
        Ok(self.tape.push(Tensor::matrix(r, c, out)?, Op::LayerNorm { src: self.id, inv_std }))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (r, c) = x.dims()?;
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for j in 0..c {
                out[i * c + j] = x.row(i)[j] / n;
            }
        }
        Ok(self.tape.push(Tensor::matrix(r, c, out)?, Op::L2Normalize { src: self.id, norms }))
    }

    /// `log Σ_j exp(x_ij)` over the allowed entries of each row; `rows×1`.
    pub fn masked_logsumexp(&self, mask: &Mask) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (r, c) = x.dims()?;
        if mask.dims() != (r, c) {
            return Err(shape_err(format!("mask {:?} for {r}x{c}", mask.dims())));
        }
        let mut out = Vec::with_capacity(r);
        for i in 0..r {
            let allowed = mask.row(i);
            let max = x
                .row(i)
                .iter()
                .zip(allowed)
                .filter(|(_, a)| **a)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(NumericsError::AllMaskedRow(i));
            }
            let s: f64 = x
                .row(i)
                .iter()
                .zip(allowed)
                .filter(|(_, a)| **a)
                .map(|(v, _)| (v - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        Ok(self.tape.push(
            Tensor::matrix(r, 1, out)?,
            Op::MaskedLogSumExp {
                src: self.id,
                mask: Rc::new(mask.clone()),
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.value();
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.tape.push(Tensor::scalar(s), Op::MeanAll(self.id))
    }

    /// Gathers the given `(row, col)` entries into a `k×1` column.
    pub fn pick(&self, cells: &[(usize, usize)]) -> Result<Var<'t>, NumericsError> {
        let v = self.value();
        let (r, c) = v.dims()?;
        if let Some(bad) = cells.iter().find(|(i, j)| *i >= r || *j >= c) {
            return Err(shape_err(format!("pick {bad:?} from {r}x{c}")));
        }
        let data = cells.iter().map(|(i, j)| v.get(*i, *j)).collect();
        Ok(self.tape.push(
            Tensor::matrix(cells.len(), 1, data)?,
            Op::Pick {
                src: self.id,
                cells: cells.to_vec(),
            },
        ))
    }
}
