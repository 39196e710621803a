use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::{Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Softmax(usize),
    LogSoftmax(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        inv: Vec<T>,
    },
    SwiGlu {
        gate: usize,
        up: usize,
    },
    Rope {
        x: usize,
        positions: Vec<usize>,
        heads: usize,
        base: f64,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    MaskFill {
        x: usize,
        allowed: Rc<[bool]>,
    },
    Pick {
        x: usize,
        idx: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

struct Inner<T> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of leaves that require grad.
    grads: Vec<Option<Vec<T>>>,
}

/// Records ops in execution order; `backward` replays them in exact reverse.
///
/// A tape is single-threaded. Ops are recorded for backward only when at
/// least one input requires grad; other ops just store their value.
pub struct Tape<T: Scalar> {
    id: u64,
    checked: bool,
    inner: RefCell<Inner<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn add_into<T: Scalar>(dst: &mut Option<Vec<T>>, src: &[T]) {
    match dst {
        Some(d) => {
            for (a, &b) in d.iter_mut().zip(src) {
                *a += b;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn slot<T: Scalar>(dst: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    dst.get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            checked: false,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    /// A tape that rejects non-finite op inputs.
    pub fn verifying() -> Self {
        Self {
            checked: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn idx(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id {
            return Err(TensorError::ForeignTape);
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        let op = if requires_grad { op } else { Op::Leaf };
        inner.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Var { tape: self.id, index }
    }

    fn check(&self, op: &'static str, inputs: &[usize]) -> Result<(), TensorError> {
        if self.checked {
            let inner = self.inner.borrow();
            if inputs.iter().any(|&i| !inner.nodes[i].value.is_finite()) {
                return Err(TensorError::NonFinite { op });
            }
        }
        Ok(())
    }

    /// Records a leaf value.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var, TensorError> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        Ok(self.push(value, requires_grad, Op::Leaf))
    }

    pub fn param(&self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor<T>> {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        Ref::map(self.inner.borrow(), |i| &i.nodes[v.index].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.inner.borrow().nodes[v.index].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let inner = self.inner.borrow();
        let g = inner.grads.get(v.index)?.as_ref()?;
        let shape = inner.nodes[v.index].value.shape().to_vec();
        Some(Tensor::new(shape, g.clone()).expect("grad shape matches value"))
    }

    /// Explicit reset of every accumulated leaf gradient.
    pub fn zero_grads(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    fn unary<F>(&self, op: &'static str, a: Var, f: F, record: impl FnOnce(usize) -> Op<T>) -> Result<Var, TensorError>
    where
        F: FnOnce(&Tensor<T>) -> Result<Tensor<T>, TensorError>,
    {
        let ia = self.idx(a)?;
        self.check(op, &[ia])?;
        let (value, rg) = {
            let inner = self.inner.borrow();
            let node = &inner.nodes[ia];
            (f(&node.value)?, node.requires_grad)
        };
        Ok(self.push(value, rg, record(ia)))
    }

    fn map_unary(
        &self,
        op: &'static str,
        a: Var,
        f: impl Fn(T) -> T,
        record: impl FnOnce(usize) -> Op<T>,
    ) -> Result<Var, TensorError> {
        self.unary(
            op,
            a,
            |t| Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect()),
            record,
        )
    }

    // ---- forward ops -------------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, false)
    }

    /// `[m, k] · [n, k]ᵀ → [m, n]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.check("matmul", &[ia, ib])?;
        let (value, rg) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[ia], &inner.nodes[ib]);
            let (sa, sb) = (na.value.shape(), nb.value.shape());
            if sa.len() != 2 || sb.len() != 2 {
                return Err(mismatch("matmul", sa, sb));
            }
            let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
            if k != k2 {
                return Err(mismatch("matmul", sa, sb));
            }
            let mut out = vec![T::zero(); m * n];
            T::gemm(m, k, n, na.value.data(), ta, nb.value.data(), tb, &mut out, false);
            (Tensor::new(vec![m, n], out)?, na.requires_grad || nb.requires_grad)
        };
        Ok(self.push(value, rg, Op::MatMul { a: ia, b: ib, ta, tb }))
    }

    pub fn transpose(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "transpose",
            a,
            |t| {
                if t.shape().len() != 2 {
                    return Err(invalid("transpose", format!("expected 2-d, got {:?}", t.shape())));
                }
                let (r, c) = (t.shape()[0], t.shape()[1]);
                let d = t.data();
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = d[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], out)
            },
            Op::Transpose,
        )
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        self.unary("reshape", a, |t| t.clone().reshape(shape.to_vec()), Op::Reshape)
    }

    fn binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        record: Op<T>,
    ) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.check(op, &[ia, ib])?;
        let (value, rg) = {
            let inner = self.inner.borrow();
            let (na, nb) = (&inner.nodes[ia], &inner.nodes[ib]);
            if na.value.shape() != nb.value.shape() {
                return Err(mismatch(op, na.value.shape(), nb.value.shape()));
            }
            let data = na
                .value
                .data()
                .iter()
                .zip(nb.value.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            (
                Tensor::new(na.value.shape().to_vec(), data)?,
                na.requires_grad || nb.requires_grad,
            )
        };
        Ok(self.push(value, rg, record))
    }

    /// Elementwise sum of equal shapes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.binary("add", a, b, |x, y| x + y, Op::Add(ia, ib))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(ia, ib))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, a: Var, c: T) -> Result<Var, TensorError> {
        self.map_unary("scale", a, |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        self.map_unary("exp", a, |x| x.exp(), Op::Exp)
    }

    pub fn log(&self, a: Var) -> Result<Var, TensorError> {
        self.map_unary("log", a, |x| x.ln(), Op::Log)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "sum",
            a,
            |t| Ok(Tensor::scalar(t.data().iter().copied().sum())),
            Op::Sum,
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "mean",
            a,
            |t| {
                let n = T::from_f64(t.len() as f64);
                Ok(Tensor::scalar(t.data().iter().copied().sum::<T>() / n))
            },
            Op::Mean,
        )
    }

    /// Sum over the last dimension: `[.., n] → [rows]`.
    pub fn row_sum(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "row_sum",
            a,
            |t| {
                let c = t.cols();
                Ok(Tensor::from_vec(
                    t.data().chunks(c).map(|r| r.iter().copied().sum()).collect(),
                ))
            },
            Op::RowSum,
        )
    }

    /// Max-shifted softmax over the last dimension.
    pub fn softmax(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "softmax",
            a,
            |t| {
                let mut out = t.clone();
                let c = out.cols();
                out.data_mut().chunks_mut(c).for_each(kernels::softmax_row);
                Ok(out)
            },
            Op::Softmax,
        )
    }

    /// Log-softmax over the last dimension.
    pub fn log_softmax(&self, a: Var) -> Result<Var, TensorError> {
        self.unary(
            "log_softmax",
            a,
            |t| {
                let mut out = t.clone();
                let c = out.cols();
                out.data_mut().chunks_mut(c).for_each(kernels::log_softmax_row);
                Ok(out)
            },
            Op::LogSoftmax,
        )
    }

    /// Gathers rows of a `[vocab, width]` table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        if ids.is_empty() {
            return Err(invalid("embedding", "no ids"));
        }
        let ids = ids.to_vec();
        let ids2 = ids.clone();
        self.unary(
            "embedding",
            table,
            move |t| {
                if t.shape().len() != 2 {
                    return Err(invalid("embedding", format!("table must be 2-d, got {:?}", t.shape())));
                }
                let (v, w) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * w);
                for &id in &ids {
                    if id >= v {
                        return Err(invalid("embedding", format!("id {id} out of range for {v} rows")));
                    }
                    out.extend_from_slice(t.row(id));
                }
                Tensor::new(vec![ids.len(), w], out)
            },
            move |i| Op::Embedding { table: i, ids: ids2 },
        )
    }

    /// `x / sqrt(mean(x²) + eps) · gain` per row; `gain` has the row width.
    pub fn rmsnorm(&self, x: Var, gain: Var, eps: T) -> Result<Var, TensorError> {
        let (ix, ig) = (self.idx(x)?, self.idx(gain)?);
        self.check("rmsnorm", &[ix, ig])?;
        let (value, inv, rg) = {
            let inner = self.inner.borrow();
            let (nx, ng) = (&inner.nodes[ix], &inner.nodes[ig]);
            let c = nx.value.cols();
            if ng.value.len() != c {
                return Err(mismatch("rmsnorm", nx.value.shape(), ng.value.shape()));
            }
            let mut out = vec![T::zero(); nx.value.len()];
            let inv: Vec<T> = nx
                .value
                .data()
                .chunks(c)
                .zip(out.chunks_mut(c))
                .map(|(row, o)| kernels::rmsnorm_row(row, ng.value.data(), eps, o))
                .collect();
            (
                Tensor::new(nx.value.shape().to_vec(), out)?,
                inv,
                nx.requires_grad || ng.requires_grad,
            )
        };
        Ok(self.push(value, rg, Op::RmsNorm { x: ix, gain: ig, inv }))
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&self, gate: Var, up: Var) -> Result<Var, TensorError> {
        let (ig, iu) = (self.idx(gate)?, self.idx(up)?);
        self.binary(
            "swiglu",
            gate,
            up,
            |g, u| kernels::silu(g) * u,
            Op::SwiGlu { gate: ig, up: iu },
        )
    }

    /// Rotary position rotation of each row, one position per row. Position
    /// 0 is the identity rotation.
    pub fn rope(&self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var, TensorError> {
        let positions = positions.to_vec();
        let pos2 = positions.clone();
        self.unary(
            "rope",
            x,
            move |t| {
                let c = t.cols();
                if heads == 0 || c % heads != 0 || !(c / heads).is_multiple_of(2) {
                    return Err(invalid(
                        "rope",
                        format!("width {c} not divisible into {heads} even heads"),
                    ));
                }
                if positions.len() != t.rows() {
                    return Err(mismatch("rope", t.shape(), &[positions.len()]));
                }
                let mut out = t.clone();
                for (row, &p) in out.data_mut().chunks_mut(c).zip(&positions) {
                    kernels::rope_row(row, p, heads, base, false);
                }
                Ok(out)
            },
            move |i| Op::Rope {
                x: i,
                positions: pos2,
                heads,
                base,
            },
        )
    }

    /// Rows `start..end` of a 2-d tensor.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.unary(
            "slice_rows",
            x,
            |t| {
                if t.shape().len() != 2 || start >= end || end > t.shape()[0] {
                    return Err(invalid("slice_rows", format!("rows {start}..{end} of {:?}", t.shape())));
                }
                let c = t.cols();
                Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())
            },
            |i| Op::SliceRows { x: i, start },
        )
    }

    /// Columns `start..end` of a 2-d tensor.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        self.unary(
            "slice_cols",
            x,
            |t| {
                if t.shape().len() != 2 || start >= end || end > t.shape()[1] {
                    return Err(invalid("slice_cols", format!("cols {start}..{end} of {:?}", t.shape())));
                }
                let c = t.cols();
                let mut out = Vec::with_capacity(t.rows() * (end - start));
                for row in t.data().chunks(c) {
                    out.extend_from_slice(&row[start..end]);
                }
                Tensor::new(vec![t.rows(), end - start], out)
            },
            |i| Op::SliceCols { x: i, start },
        )
    }

    fn concat(&self, parts: &[Var], by_rows: bool) -> Result<Var, TensorError> {
        let op = if by_rows { "concat_rows" } else { "concat_cols" };
        if parts.is_empty() {
            return Err(invalid(op, "nothing to concatenate"));
        }
        let ids = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>, _>>()?;
        self.check(op, &ids)?;
        let (value, rg) = {
            let inner = self.inner.borrow();
            let first = inner.nodes[ids[0]].value.shape().to_vec();
            if first.len() != 2 {
                return Err(invalid(op, format!("expected 2-d, got {first:?}")));
            }
            let mut rg = false;
            for &i in &ids {
                let s = inner.nodes[i].value.shape();
                let ok = s.len() == 2 && if by_rows { s[1] == first[1] } else { s[0] == first[0] };
                if !ok {
                    return Err(mismatch(op, &first, s));
                }
                rg |= inner.nodes[i].requires_grad;
            }
            let value = if by_rows {
                let rows: usize = ids.iter().map(|&i| inner.nodes[i].value.shape()[0]).sum();
                let mut data = Vec::with_capacity(rows * first[1]);
                for &i in &ids {
                    data.extend_from_slice(inner.nodes[i].value.data());
                }
                Tensor::new(vec![rows, first[1]], data)?
            } else {
                let cols: usize = ids.iter().map(|&i| inner.nodes[i].value.shape()[1]).sum();
                let mut data = Vec::with_capacity(first[0] * cols);
                for r in 0..first[0] {
                    for &i in &ids {
                        data.extend_from_slice(inner.nodes[i].value.row(r));
                    }
                }
                Tensor::new(vec![first[0], cols], data)?
            };
            (value, rg)
        };
        let record = if by_rows {
            Op::ConcatRows(ids)
        } else {
            Op::ConcatCols(ids)
        };
        Ok(self.push(value, rg, record))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var, TensorError> {
        self.concat(parts, true)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, TensorError> {
        self.concat(parts, false)
    }

    /// Replaces entries where `allowed` is false with `T::MASK_VALUE`.
    pub fn mask_fill(&self, x: Var, allowed: Rc<[bool]>) -> Result<Var, TensorError> {
        let a2 = allowed.clone();
        self.unary(
            "mask_fill",
            x,
            move |t| {
                if allowed.len() != t.len() {
                    return Err(mismatch("mask_fill", t.shape(), &[allowed.len()]));
                }
                let data = t
                    .data()
                    .iter()
                    .zip(allowed.iter())
                    .map(|(&v, &ok)| if ok { v } else { T::MASK_VALUE })
                    .collect();
                Tensor::new(t.shape().to_vec(), data)
            },
            move |i| Op::MaskFill { x: i, allowed: a2 },
        )
    }

    /// Selects column `idx[r]` of each row: `[n, m] → [n]`.
    pub fn pick(&self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let idx = idx.to_vec();
        let idx2 = idx.clone();
        self.unary(
            "pick",
            x,
            move |t| {
                if idx.len() != t.rows() {
                    return Err(mismatch("pick", t.shape(), &[idx.len()]));
                }
                let c = t.cols();
                let mut out = Vec::with_capacity(idx.len());
                for (r, &j) in idx.iter().enumerate() {
                    if j >= c {
                        return Err(invalid("pick", format!("index {j} out of range for width {c}")));
                    }
                    out.push(t.data()[r * c + j]);
                }
                Ok(Tensor::from_vec(out))
            },
            move |i| Op::Pick { x: i, idx: idx2 },
        )
    }

    // ---- backward ----------------------------------------------------------

    /// Propagates `∂root/∂leaf` into every reachable leaf that requires grad,
    /// adding to whatever those leaves already hold.
    pub fn backward(&self, root: Var) -> Result<(), TensorError> {
        let r = self.idx(root)?;
        let mut inner = self.inner.borrow_mut();
        let Inner { nodes, grads } = &mut *inner;
        let root_node = &nodes[r];
        if root_node.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.requires_grad {
            return Err(TensorError::DetachedRoot);
        }
        let mut work: Vec<Option<Vec<T>>> = (0..=r).map(|_| None).collect();
        work[r] = Some(vec![T::one()]);
        for i in (0..=r).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_into(&mut grads[i], &g);
                continue;
            }
            backprop(nodes, i, &g, &mut work);
        }
        Ok(())
    }
}

/// Adds the contributions of node `i`'s upstream gradient `g` to its inputs.
fn backprop<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], work: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let rg = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &nodes[j].value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (sa, sb) = (val(a).shape(), val(b).shape());
            let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
            let n = if tb { sb[0] } else { sb[1] };
            if rg(a) {
                let buf = slot(&mut work[a], m * k);
                if ta {
                    T::gemm(k, n, m, val(b).data(), tb, g, true, buf, true);
                } else {
                    T::gemm(m, n, k, g, false, val(b).data(), !tb, buf, true);
                }
            }
            if rg(b) {
                let buf = slot(&mut work[b], k * n);
                if tb {
                    T::gemm(n, m, k, g, true, val(a).data(), ta, buf, true);
                } else {
                    T::gemm(k, m, n, val(a).data(), !ta, g, false, buf, true);
                }
            }
        }
        &Op::Transpose(a) => {
            let (r, c) = (val(a).shape()[0], val(a).shape()[1]);
            let buf = slot(&mut work[a], r * c);
            for i in 0..r {
                for j in 0..c {
                    buf[i * c + j] += g[j * r + i];
                }
            }
        }
        &Op::Reshape(a) => add_into(&mut work[a], g),
        &Op::Add(a, b) => {
            if rg(a) {
                add_into(&mut work[a], g);
            }
            if rg(b) {
                add_into(&mut work[b], g);
            }
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                let d: Vec<T> = g.iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                add_into(&mut work[a], &d);
            }
            if rg(b) {
                let d: Vec<T> = g.iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                add_into(&mut work[b], &d);
            }
        }
        &Op::Scale(a, c) => {
            let d: Vec<T> = g.iter().map(|&x| x * c).collect();
            add_into(&mut work[a], &d);
        }
        &Op::Exp(a) => {
            let d: Vec<T> = g.iter().zip(node.value.data()).map(|(&x, &y)| x * y).collect();
            add_into(&mut work[a], &d);
        }
        &Op::Log(a) => {
            let d: Vec<T> = g.iter().zip(val(a).data()).map(|(&x, &y)| x / y).collect();
            add_into(&mut work[a], &d);
        }
        &Op::Sum(a) => {
            let buf = slot(&mut work[a], val(a).len());
            buf.iter_mut().for_each(|x| *x += g[0]);
        }
        &Op::Mean(a) => {
            let n = val(a).len();
            let s = g[0] / T::from_f64(n as f64);
            let buf = slot(&mut work[a], n);
            buf.iter_mut().for_each(|x| *x += s);
        }
        &Op::RowSum(a) => {
            let c = val(a).cols();
            let buf = slot(&mut work[a], val(a).len());
            for (row, &gr) in buf.chunks_mut(c).zip(g) {
                row.iter_mut().for_each(|x| *x += gr);
            }
        }
        &Op::Softmax(a) => {
            let c = node.value.cols();
            let buf = slot(&mut work[a], node.value.len());
            for ((b, y), gr) in buf.chunks_mut(c).zip(node.value.data().chunks(c)).zip(g.chunks(c)) {
                let dot: T = y.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for j in 0..c {
                    b[j] += y[j] * (gr[j] - dot);
                }
            }
        }
        &Op::LogSoftmax(a) => {
            let c = node.value.cols();
            let buf = slot(&mut work[a], node.value.len());
            for ((b, y), gr) in buf.chunks_mut(c).zip(node.value.data().chunks(c)).zip(g.chunks(c)) {
                let total: T = gr.iter().copied().sum();
                for j in 0..c {
                    b[j] += gr[j] - y[j].exp() * total;
                }
            }
        }
        Op::Embedding { table, ids } => {
            let w = val(*table).cols();
            let buf = slot(&mut work[*table], val(*table).len());
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..w {
                    buf[id * w + j] += g[r * w + j];
                }
            }
        }
        Op::RmsNorm { x, gain, inv } => {
            let (x, gain) = (*x, *gain);
            let xv = val(x);
            let gv = val(gain).data();
            let c = xv.cols();
            let n = T::from_f64(c as f64);
            if rg(x) {
                let buf = slot(&mut work[x], xv.len());
                for (((b, xr), gr), &s) in buf.chunks_mut(c).zip(xv.data().chunks(c)).zip(g.chunks(c)).zip(inv) {
                    let dot: T = (0..c).map(|j| gr[j] * gv[j] * xr[j]).sum();
                    let k = s * s * s * dot / n;
                    for j in 0..c {
                        b[j] += s * gv[j] * gr[j] - k * xr[j];
                    }
                }
            }
            if rg(gain) {
                let buf = slot(&mut work[gain], c);
                for ((xr, gr), &s) in xv.data().chunks(c).zip(g.chunks(c)).zip(inv) {
                    for j in 0..c {
                        buf[j] += gr[j] * xr[j] * s;
                    }
                }
            }
        }
        &Op::SwiGlu { gate, up } => {
            let (gv, uv) = (val(gate).data(), val(up).data());
            if rg(gate) {
                let d: Vec<T> = (0..g.len())
                    .map(|j| {
                        let s = kernels::sigmoid(gv[j]);
                        g[j] * uv[j] * s * (T::one() + gv[j] * (T::one() - s))
                    })
                    .collect();
                add_into(&mut work[gate], &d);
            }
            if rg(up) {
                let d: Vec<T> = (0..g.len()).map(|j| g[j] * kernels::silu(gv[j])).collect();
                add_into(&mut work[up], &d);
            }
        }
        Op::Rope {
            x,
            positions,
            heads,
            base,
        } => {
            let c = node.value.cols();
            let mut d = g.to_vec();
            for (row, &p) in d.chunks_mut(c).zip(positions) {
                kernels::rope_row(row, p, *heads, *base, true);
            }
            add_into(&mut work[*x], &d);
        }
        &Op::SliceRows { x, start } => {
            let c = val(x).cols();
            let buf = slot(&mut work[x], val(x).len());
            for (b, &v) in buf[start * c..start * c + g.len()].iter_mut().zip(g) {
                *b += v;
            }
        }
        &Op::SliceCols { x, start } => {
            let c = val(x).cols();
            let w = node.value.cols();
            let buf = slot(&mut work[x], val(x).len());
            for (b, gr) in buf.chunks_mut(c).zip(g.chunks(w)) {
                for j in 0..w {
                    b[start + j] += gr[j];
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).len();
                if rg(p) {
                    add_into(&mut work[p], &g[off..off + n]);
                }
                off += n;
            }
        }
        Op::ConcatCols(parts) => {
            let total = node.value.cols();
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                if rg(p) {
                    let buf = slot(&mut work[p], val(p).len());
                    for (b, gr) in buf.chunks_mut(w).zip(g.chunks(total)) {
                        for j in 0..w {
                            b[j] += gr[off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::MaskFill { x, allowed } => {
            let buf = slot(&mut work[*x], g.len());
            for ((b, &v), &ok) in buf.iter_mut().zip(g).zip(allowed.iter()) {
                if ok {
                    *b += v;
                }
            }
        }
        Op::Pick { x, idx } => {
            let c = val(*x).cols();
            let buf = slot(&mut work[*x], val(*x).len());
            for (r, (&j, &v)) in idx.iter().zip(g).enumerate() {
                buf[r * c + j] += v;
            }
        }
    }
}
