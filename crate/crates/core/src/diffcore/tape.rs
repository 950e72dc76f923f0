use std::cell::RefCell;
use std::collections::BTreeMap;
use std::fmt;

use super::{DiffError, Result, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Shift(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowVector(usize, usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    LogSumExp(usize),
    SquaredDistance(usize, usize),
    Concat(Vec<usize>),
    Gather(usize, Vec<usize>),
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Accumulated gradient; only ever populated for leaves.
    grad: Option<Vec<f64>>,
}

/// Append-only record of a computation. Node ids are assigned in creation
/// order, so every node's inputs have smaller ids than the node itself and a
/// reverse sweep over ids is a valid topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.nodes.borrow().len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of one `backward` call, keyed by leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, leaf: Var<'_>) -> Option<&Tensor> {
        self.by_leaf.get(&leaf.idx)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(DiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn elementwise(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let shape = broadcast_shape(op, a, b)?;
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let sa = usize::from(ad.len() != 1 || n == 1);
    let sb = usize::from(bd.len() != 1 || n == 1);
    let data = (0..n).map(|i| f(ad[i * sa], bd[i * sb])).collect();
    Tensor::new(&shape, data)
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        other => Err(DiffError::ShapeMismatch {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Rows of a 1-D or 2-D tensor viewed as a matrix: `[n]` is one row of width n.
fn as_rows(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [n] => Some((1, *n)),
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

/// Gradient for an operand that may have been scalar-broadcast.
fn reduce_to(g: &[f64], operand_len: usize) -> Vec<f64> {
    if operand_len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().sum()]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, grad: None });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        Ok(self.push(Tensor::new(shape, data)?, Op::Leaf))
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// An input that takes part in the forward pass but never collects gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn value_of(&self, idx: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    /// Stacks operands along the first axis.
    ///
    /// Scalars stack into a vector; vectors of width k and `[r, k]` matrices
    /// stack into a `[rows, k]` matrix.
    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(DiffError::Empty { op: "concat_rows" });
        }
        let value = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].idx].value;
            if parts.iter().all(|p| nodes[p.idx].value.is_scalar()) {
                Tensor::from_vec(parts.iter().map(|p| nodes[p.idx].value.data()[0]).collect())
            } else {
                let width = as_rows(first).map(|(_, k)| k);
                let mut rows = 0;
                let mut data = Vec::new();
                for p in parts {
                    let v = &nodes[p.idx].value;
                    match (as_rows(v), width) {
                        (Some((r, k)), Some(w)) if k == w => {
                            rows += r;
                            data.extend_from_slice(v.data());
                        }
                        _ => {
                            return Err(DiffError::ShapeMismatch {
                                op: "concat_rows",
                                lhs: first.shape().to_vec(),
                                rhs: v.shape().to_vec(),
                            })
                        }
                    }
                }
                Tensor::new(&[rows, width.unwrap_or(0)], data)?
            }
        };
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.idx).collect())))
    }

    /// Accumulated gradient of a leaf across all `backward` calls so far.
    pub fn grad(&self, leaf: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[leaf.idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Each reachable leaf receives d(root)/d(leaf), added onto whatever it
    /// already holds. The returned map holds only this call's contribution.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let mut nodes = self.nodes.borrow_mut();
        let root_value = &nodes[root.idx].value;
        if !root_value.is_scalar() {
            return Err(DiffError::NotScalar {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.idx + 1];
        grads[root.idx] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=root.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            match &node.op {
                Op::Leaf => {
                    out.by_leaf
                        .insert(i, Tensor::new(node.value.shape(), g).expect("grad shape"));
                }
                Op::Constant => {}
                Op::Add(a, b) => {
                    add_into(&mut grads[*a], &reduce_to(&g, val(*a).numel()));
                    add_into(&mut grads[*b], &reduce_to(&g, val(*b).numel()));
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads[*a], &reduce_to(&g, val(*a).numel()));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[*b], &reduce_to(&neg, val(*b).numel()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = elementwise("mul", &Tensor::new(node.value.shape(), g.clone())?, bv, |x, y| x * y)?;
                    let gb = elementwise("mul", &Tensor::new(node.value.shape(), g)?, av, |x, y| x * y)?;
                    add_into(&mut grads[*a], &reduce_to(ga.data(), av.numel()));
                    add_into(&mut grads[*b], &reduce_to(gb.data(), bv.numel()));
                }
                Op::Div(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let gt = Tensor::new(node.value.shape(), g)?;
                    let ga = elementwise("div", &gt, bv, |x, y| x / y)?;
                    // d(a/b)/db = -out / b
                    let q = elementwise("div", &gt, bv, |x, y| x / y)?;
                    let gb = elementwise("div", &q, &node.value, |x, o| -x * o)?;
                    add_into(&mut grads[*a], &reduce_to(ga.data(), av.numel()));
                    add_into(&mut grads[*b], &reduce_to(gb.data(), bv.numel()));
                }
                Op::Neg(a) => {
                    let ga: Vec<f64> = g.iter().map(|v| -v).collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Shift(a) => add_into(&mut grads[*a], &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k) = require_matrix("matmul", av)?;
                    let (_, n) = require_matrix("matmul", bv)?;
                    let bt = transpose_raw(bv.data(), k, n);
                    let ga = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(av.data(), m, k);
                    let gb = matmul_raw(&at, &g, k, m, n);
                    add_into(&mut grads[*a], &ga);
                    add_into(&mut grads[*b], &gb);
                }
                Op::Transpose(a) => {
                    let (m, n) = require_matrix("transpose", val(*a))?;
                    add_into(&mut grads[*a], &transpose_raw(&g, n, m));
                }
                Op::AddRowVector(a, b) => {
                    let (m, n) = require_matrix("add_row_vector", val(*a))?;
                    let mut gb = vec![0.0; n];
                    for r in 0..m {
                        for (acc, v) in gb.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *acc += v;
                        }
                    }
                    add_into(&mut grads[*a], &g);
                    add_into(&mut grads[*b], &gb);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = val(*a)
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Exp(a) => {
                    let ga: Vec<f64> = node.value.data().iter().zip(&g).map(|(o, gv)| o * gv).collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Log(a) => {
                    let ga: Vec<f64> = val(*a).data().iter().zip(&g).map(|(x, gv)| gv / x).collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Sqrt(a) => {
                    let ga: Vec<f64> = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&o, &gv)| if o > 0.0 { gv / (2.0 * o) } else { 0.0 })
                        .collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::Sum(a) => {
                    let n = val(*a).numel();
                    add_into(&mut grads[*a], &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    add_into(&mut grads[*a], &vec![g[0] / n as f64; n]);
                }
                Op::SumRows(a) => {
                    let (m, n) = require_matrix("sum_rows", val(*a))?;
                    let ga: Vec<f64> = (0..m * n).map(|j| g[j / n]).collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::LogSumExp(a) => {
                    let input = val(*a);
                    let (m, n) = as_rows(input).expect("checked at forward");
                    let out = node.value.data();
                    let ga: Vec<f64> = (0..m * n)
                        .map(|j| g[j / n] * (input.data()[j] - out[j / n]).exp())
                        .collect();
                    add_into(&mut grads[*a], &ga);
                }
                Op::SquaredDistance(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga: Vec<f64> = av
                        .data()
                        .iter()
                        .zip(bv.data())
                        .map(|(x, y)| 2.0 * (x - y) * g[0])
                        .collect();
                    let gb: Vec<f64> = ga.iter().map(|v| -v).collect();
                    add_into(&mut grads[*a], &ga);
                    add_into(&mut grads[*b], &gb);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = val(*p).numel();
                        add_into(&mut grads[*p], &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Gather(a, idx) => {
                    let mut ga = vec![0.0; val(*a).numel()];
                    for (&src, gv) in idx.iter().zip(&g) {
                        ga[src] += gv;
                    }
                    add_into(&mut grads[*a], &ga);
                }
                Op::Reshape(a) => add_into(&mut grads[*a], &g),
            }
        }

        for (&i, g) in &out.by_leaf {
            add_into(&mut nodes[i].grad, g.data());
        }
        Ok(out)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx).clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.value_of(self.idx))
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|v| v.shape().to_vec())
    }

    pub fn item(&self) -> Result<f64> {
        self.with_value(Tensor::item)
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = self.with_value(f)?;
        Ok(self.tape.push(value, op))
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = {
            let a = self.tape.value_of(self.idx);
            let b = self.tape.value_of(other.idx);
            f(&a, &b)?
        };
        Ok(self.tape.push(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.idx, other.idx), |a, b| {
            elementwise("add", a, b, |x, y| x + y)
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.idx, other.idx), |a, b| {
            elementwise("sub", a, b, |x, y| x - y)
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.idx, other.idx), |a, b| {
            elementwise("mul", a, b, |x, y| x * y)
        })
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div(self.idx, other.idx), |a, b| {
            elementwise("div", a, b, |x, y| x / y)
        })
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Op::Neg(self.idx), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| -v).collect())
        })
    }

    pub fn scalar_mul(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.idx, c), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| v * c).collect())
        })
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Shift(self.idx), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| v + c).collect())
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul(self.idx, other.idx), |a, b| {
            let (m, k) = require_matrix("matmul", a)?;
            let (k2, n) = require_matrix("matmul", b)?;
            if k != k2 {
                return Err(DiffError::ShapeMismatch {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose(self.idx), |a| {
            let (m, n) = require_matrix("transpose", a)?;
            Tensor::new(&[n, m], transpose_raw(a.data(), m, n))
        })
    }

    /// `[m, n] + [n]`, adding the vector to every row.
    pub fn add_row_vector(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(bias, Op::AddRowVector(self.idx, bias.idx), |a, b| {
            let (m, n) = require_matrix("add_row_vector", a)?;
            if b.shape() != [n] {
                return Err(DiffError::ShapeMismatch {
                    op: "add_row_vector",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let data = (0..m * n).map(|j| a.data()[j] + b.data()[j % n]).collect();
            Tensor::new(&[m, n], data)
        })
    }

    /// Gradient at exactly 0 is 0.
    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.idx), |a| {
            Tensor::new(
                a.shape(),
                a.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            )
        })
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.idx), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| v.exp()).collect())
        })
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.idx), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| v.ln()).collect())
        })
    }

    /// Gradient at exactly 0 is taken as 0.
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Op::Sqrt(self.idx), |a| {
            Tensor::new(a.shape(), a.data().iter().map(|v| v.sqrt()).collect())
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum(self.idx), |a| Ok(Tensor::scalar(a.data().iter().sum())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.unary(Op::Mean(self.idx), |a| {
            if a.numel() == 0 {
                return Err(DiffError::Empty { op: "mean" });
            }
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64))
        })
    }

    /// `[m, n] -> [m]`.
    pub fn sum_rows(self) -> Result<Var<'t>> {
        self.unary(Op::SumRows(self.idx), |a| {
            let (m, n) = require_matrix("sum_rows", a)?;
            Ok(Tensor::from_vec(
                (0..m).map(|r| a.data()[r * n..(r + 1) * n].iter().sum()).collect(),
            ))
        })
    }

    /// log Σ exp, with max subtraction. `[n] -> []`, `[m, n] -> [m]`.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        self.unary(Op::LogSumExp(self.idx), |a| {
            let (m, n) = match as_rows(a) {
                Some((m, n)) if n > 0 => (m, n),
                _ => return Err(DiffError::Empty { op: "logsumexp" }),
            };
            let out: Vec<f64> = (0..m)
                .map(|r| {
                    let row = &a.data()[r * n..(r + 1) * n];
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return max;
                    }
                    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                })
                .collect();
            if a.shape().len() == 1 {
                Ok(Tensor::scalar(out[0]))
            } else {
                Ok(Tensor::from_vec(out))
            }
        })
    }

    /// ‖a − b‖² for same-shape operands, as a scalar.
    pub fn squared_l2_distance(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::SquaredDistance(self.idx, other.idx), |a, b| {
            if a.shape() != b.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "squared_l2_distance",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            Ok(Tensor::scalar(
                a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum(),
            ))
        })
    }

    /// Picks elements by flat index into a tensor of the given shape.
    pub fn gather(self, indices: &[usize], shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|a| {
            if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
                return Err(DiffError::IndexOutOfRange {
                    index: bad,
                    len: a.numel(),
                });
            }
            Tensor::new(shape, indices.iter().map(|&i| a.data()[i]).collect())
        })?;
        Ok(self.tape.push(value, Op::Gather(self.idx, indices.to_vec())))
    }

    /// Rows of a matrix, in the given order (repeats allowed).
    pub fn select_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let (m, n) = self.with_value(|a| require_matrix("select_rows", a))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(DiffError::IndexOutOfRange { index: bad, len: m });
        }
        let idx: Vec<usize> = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(&idx, &[rows.len(), n])
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(self, i: usize) -> Result<Var<'t>> {
        let (m, n) = self.with_value(|a| require_matrix("row", a))?;
        if i >= m {
            return Err(DiffError::IndexOutOfRange { index: i, len: m });
        }
        self.gather(&(i * n..(i + 1) * n).collect::<Vec<_>>(), &[n])
    }

    /// Element at a flat index, as a scalar.
    pub fn at(self, flat: usize) -> Result<Var<'t>> {
        self.gather(&[flat], &[])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        self.unary(Op::Reshape(self.idx), |a| Tensor::new(shape, a.data().to_vec()))
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.mul(other)?.sum()
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.mul(self)?.sum()?.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, DiffError};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn leaf_construction() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert_eq!(x.value().data(), &[1.0, 2.0]);
        assert_eq!(tape.grad(x), None);
        assert_eq!(tape.leaf(&[0], vec![]).unwrap().shape(), vec![0]);
        assert!(matches!(
            tape.leaf(&[2], vec![1.0]),
            Err(DiffError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn forward_examples() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.constant(Tensor::new(&[2, 1], vec![0.3, -7.0]).unwrap());
        assert_eq!(eye.matmul(v).unwrap().value(), v.value());
        let r = tape.constant(Tensor::from_vec(vec![-1.0, 2.0])).relu().unwrap();
        assert_eq!(r.value().data(), &[0.0, 2.0]);
        let a = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let b = tape.constant(Tensor::from_vec(vec![0.0, 1.0]));
        assert_eq!(a.squared_l2_distance(b).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(a.add(c).is_err());
        // scalar broadcast is the only broadcast
        assert!(a.add(tape.scalar(1.0)).is_ok());
        assert!(a.add(tape.constant(Tensor::zeros(&[1, 3]))).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let g = tape.backward(x.mul(x).unwrap().sum().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);

        let tape = Tape::new();
        let x = tape.leaf(&[4], vec![1.0, -2.0, 5.0, 0.5]).unwrap();
        let g = tape.backward(x.mean().unwrap()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(tape.backward(x), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(&[1], vec![3.0]).unwrap();
        let y = x.mul(x).unwrap().sum().unwrap();
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[12.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn kink_gradients_are_zero() {
        let tape = Tape::new();
        let x = tape.leaf(&[2], vec![0.0, 0.0]).unwrap();
        let y = x
            .relu()
            .unwrap()
            .sum()
            .unwrap()
            .add(x.sqrt().unwrap().sum().unwrap())
            .unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_is_linear_over_independent_subgraphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(&mut rng, &[3, 4], -1.0, 1.0);
        let b = random(&mut rng, &[4, 2], -1.0, 1.0);
        let f = |tape: &Tape, which: u8| {
            let x = tape.var(a.clone());
            let w = tape.var(b.clone());
            let left = x.matmul(w).unwrap().relu().unwrap().sum().unwrap();
            let right = x.exp().unwrap().mean().unwrap();
            let root = match which {
                0 => left,
                1 => right,
                _ => left.add(right).unwrap(),
            };
            let g = tape.backward(root).unwrap();
            g.get(x).unwrap().clone()
        };
        let (l, r, both) = (f(&Tape::new(), 0), f(&Tape::new(), 1), f(&Tape::new(), 2));
        for ((l, r), s) in l.data().iter().zip(r.data()).zip(both.data()) {
            assert!((l + r - s).abs() <= 1e-15 * s.abs().max(1.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&mut rng, &[5, 6], -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let x = tape.var(a.clone());
            let y = x.matmul(x.transpose().unwrap()).unwrap().logsumexp().unwrap();
            y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    fn check<F>(f: F, shapes: &[&[usize]], lo: f64, hi: f64)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s, lo, hi)).collect();
            let r = finite_diff_check::<_, DiffError>(&f, &inputs, 1e-5).unwrap();
            assert!(r.max_rel_error <= 1e-6, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check(|_, v| v[0].add(v[1])?.mul(v[0])?.sum(), &[&[3, 2], &[3, 2]], -1.0, 1.0);
        check(|_, v| v[0].sub(v[1])?.div(v[2])?.sum(), &[&[4], &[4], &[]], 0.5, 1.5);
        check(
            |_, v| v[0].matmul(v[1])?.mul(v[2])?.sum(),
            &[&[2, 3], &[3, 4], &[2, 4]],
            -1.0,
            1.0,
        );
        check(
            |_, v| v[0].transpose()?.add_row_vector(v[1])?.relu()?.sum(),
            &[&[3, 2], &[3]],
            -1.0,
            1.0,
        );
        check(
            |_, v| v[0].neg()?.exp()?.scalar_mul(0.7)?.add_scalar(2.0)?.log()?.sum(),
            &[&[5]],
            -1.0,
            1.0,
        );
        check(|_, v| v[0].sqrt()?.mean(), &[&[2, 3]], 0.5, 1.5);
        check(
            |_, v| v[0].sum_rows()?.mul(v[0].logsumexp()?)?.sum(),
            &[&[3, 4]],
            -1.0,
            1.0,
        );
        check(|_, v| v[0].logsumexp(), &[&[6]], -1.0, 1.0);
        check(|_, v| v[0].squared_l2_distance(v[1]), &[&[5], &[5]], -1.0, 1.0);
        check(
            |t, v| t.concat_rows(&[v[0], v[1]])?.select_rows(&[2, 0, 2])?.mul(v[2])?.sum(),
            &[&[1, 3], &[2, 3], &[3, 3]],
            -1.0,
            1.0,
        );
        check(
            |t, v| t.concat_rows(&[v[0].sum()?, v[1].at(1)?])?.dot(v[2]),
            &[&[2], &[3], &[2]],
            -1.0,
            1.0,
        );
        check(|_, v| v[0].reshape(&[6])?.l2_norm(), &[&[2, 3]], -1.0, 1.0);
        check(
            |_, v| v[0].gather(&[3, 0, 3], &[3])?.mul(v[1])?.sum(),
            &[&[2, 2], &[3]],
            -1.0,
            1.0,
        );
    }

    #[test]
    fn finite_diff_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[8], -1.0, 1.0);
        let r =
            finite_diff_check::<_, DiffError>(|_, v| v[0].mul(v[0])?.sum(), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        let r = finite_diff_check::<_, DiffError>(|t, _| Ok(t.scalar(4.0)), std::slice::from_ref(&x), 1e-5).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        let bad = finite_diff_check::<_, DiffError>(|_, v| v[0].log()?.sum(), &[Tensor::from_vec(vec![-1.0])], 1e-5);
        assert!(bad.is_err());
    }
}
