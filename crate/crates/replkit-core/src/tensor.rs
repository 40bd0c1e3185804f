//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation performed on the [`GradTensor`] handles
//! it hands out. Calling [`GradTensor::backward`] on a recorded scalar replays
//! the tape in reverse and accumulates exact gradients into every leaf that
//! was created with `requires_grad`. Tapes are rebuilt per forward pass; there
//! is no graph reuse.
//!
//! Only the primitives the toy transformer and the training objectives need
//! are implemented. Everything is 64-bit: the point of this crate is
//! verifiability (finite-difference checks at 1e-5 tolerances), not speed.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

/// Logit value used by masked-fill when callers want "minus infinity" without
/// poisoning later arithmetic with actual infinities. exp(MASK_NEG - max)
/// underflows to exactly 0.0 for any finite max.
pub const MASK_NEG: f64 = -1.0e30;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: domain error: {reason}")]
    Domain { op: &'static str, reason: String },
    #[error("{op}: index {index} out of bounds for shape {shape:?}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        shape: Vec<usize>,
    },
    #[error("backward: root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward: tensor was not produced by a recorded computation")]
    NotRecorded,
    #[error("grad_check: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ── Recorded operations ──────────────────────────────────────────────

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddScalar { a: usize },
    MulScalar { a: usize, c: f64 },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    ConcatRows { parts: Vec<usize>, rows: Vec<usize>, cols: usize },
    ConcatCols { parts: Vec<usize>, cols: Vec<usize>, rows: usize },
    SliceRows { a: usize, r0: usize, rows: usize, cols: usize, src_rows: usize },
    SliceCols { a: usize, c0: usize, cols: usize, rows: usize, src_cols: usize },
    GatherRows { a: usize, ids: Vec<usize>, cols: usize, src_rows: usize },
    GatherPerRow { a: usize, ids: Vec<usize>, cols: usize },
    Pick { a: usize, index: usize },
    Exp { a: usize },
    Ln { a: usize },
    ClampMin { a: usize, c: f64 },
    Gelu { a: usize },
    SoftmaxRows { a: usize, rows: usize, cols: usize },
    LayerNormRows { a: usize, gamma: usize, beta: usize, rows: usize, cols: usize, eps: f64 },
    MaskedFill { a: usize, mask: Rc<Vec<bool>> },
    Sum { a: usize },
    Mean { a: usize },
    SumRows { a: usize, rows: usize, cols: usize },
    DivByScalar { a: usize, s: usize },
    CosineSim { a: usize, b: usize },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    /// True when a gradient can flow to this node (a requires_grad leaf or a
    /// result depending on one). Backward skips everything else.
    needs_grad: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Records a single computation. One tape per forward pass; not shareable
/// across threads (handles hold an `Rc` to it).
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape {
            inner: RefCell::new(TapeInner::default()),
        })
    }

    fn push(self: &Rc<Self>, node: Node) -> GradTensor {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(node);
        GradTensor {
            tape: Rc::clone(self),
            id,
        }
    }

    /// Create a leaf tensor. `requires_grad` leaves receive gradients from
    /// [`GradTensor::backward`].
    pub fn leaf(
        self: &Rc<Self>,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<GradTensor> {
        if numel(&shape) != values.len() {
            return Err(TensorError::InvalidShape {
                op: "leaf",
                shape,
                reason: format!("shape product != {} values", values.len()),
            });
        }
        let n = values.len();
        Ok(self.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad,
            needs_grad: requires_grad,
            op: Op::Leaf,
        }))
    }

    /// Constant leaf (no gradient ever flows into it).
    pub fn constant(self: &Rc<Self>, values: Vec<f64>, shape: Vec<usize>) -> Result<GradTensor> {
        self.leaf(values, shape, false)
    }

    /// Scalar constant.
    pub fn scalar(self: &Rc<Self>, value: f64) -> GradTensor {
        self.leaf(vec![value], vec![1], false).expect("scalar leaf")
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reset all gradient accumulators on the tape to zero.
    pub fn zero_grad(&self) {
        for node in self.inner.borrow_mut().nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
///
/// Cloning is cheap (it clones the handle, not the data). All arithmetic
/// records onto the owning tape and returns new handles.
#[derive(Clone)]
pub struct GradTensor {
    tape: Rc<Tape>,
    id: usize,
}

macro_rules! with_node {
    ($self:expr, $node:ident, $body:expr) => {{
        let inner = $self.tape.inner.borrow();
        let $node = &inner.nodes[$self.id];
        $body
    }};
}

impl GradTensor {
    pub fn tape(&self) -> &Rc<Tape> {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        with_node!(self, n, n.shape.clone())
    }

    pub fn values(&self) -> Vec<f64> {
        with_node!(self, n, n.values.clone())
    }

    pub fn grad(&self) -> Vec<f64> {
        with_node!(self, n, n.grad.clone())
    }

    pub fn requires_grad(&self) -> bool {
        with_node!(self, n, n.requires_grad)
    }

    pub fn numel(&self) -> usize {
        with_node!(self, n, n.values.len())
    }

    /// Value of a scalar (1-element) tensor.
    pub fn scalar_value(&self) -> f64 {
        let v = self.values();
        assert_eq!(v.len(), 1, "scalar_value on tensor with {} elements", v.len());
        v[0]
    }

    /// Zero this tensor's gradient accumulator.
    pub fn zero_grad(&self) {
        let mut inner = self.tape.inner.borrow_mut();
        inner.nodes[self.id].grad.iter_mut().for_each(|g| *g = 0.0);
    }

    fn same_tape(&self, other: &GradTensor) -> bool {
        Rc::ptr_eq(&self.tape, &other.tape)
    }

    fn record(&self, shape: Vec<usize>, values: Vec<f64>, inputs: &[&GradTensor], op: Op) -> GradTensor {
        debug_assert!(values.iter().all(|v| v.is_finite()), "non-finite forward value in {op:?}");
        let needs = {
            let inner = self.tape.inner.borrow();
            inputs.iter().any(|t| inner.nodes[t.id].needs_grad)
        };
        let n = values.len();
        self.tape.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            requires_grad: false,
            needs_grad: needs,
            op,
        })
    }

    fn check_same_shape(&self, other: &GradTensor, op: &'static str) -> Result<(Vec<usize>, Vec<f64>, Vec<f64>)> {
        assert!(self.same_tape(other), "{op}: operands from different tapes");
        let (ls, lv) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let (rs, rv) = with_node!(other, n, (n.shape.clone(), n.values.clone()));
        if ls != rs {
            return Err(TensorError::ShapeMismatch { op, lhs: ls, rhs: rs });
        }
        Ok((ls, lv, rv))
    }

    // ── Elementwise ──────────────────────────────────────────────

    pub fn add(&self, other: &GradTensor) -> Result<GradTensor> {
        let (shape, a, b) = self.check_same_shape(other, "add")?;
        let values = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        Ok(self.record(shape, values, &[self, other], Op::Add { a: self.id, b: other.id }))
    }

    pub fn sub(&self, other: &GradTensor) -> Result<GradTensor> {
        let (shape, a, b) = self.check_same_shape(other, "sub")?;
        let values = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        Ok(self.record(shape, values, &[self, other], Op::Sub { a: self.id, b: other.id }))
    }

    pub fn mul(&self, other: &GradTensor) -> Result<GradTensor> {
        let (shape, a, b) = self.check_same_shape(other, "mul")?;
        let values = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        Ok(self.record(shape, values, &[self, other], Op::Mul { a: self.id, b: other.id }))
    }

    pub fn add_scalar(&self, c: f64) -> GradTensor {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|x| x + c).collect();
        self.record(shape, values, &[self], Op::AddScalar { a: self.id })
    }

    pub fn mul_scalar(&self, c: f64) -> GradTensor {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|x| x * c).collect();
        self.record(shape, values, &[self], Op::MulScalar { a: self.id, c })
    }

    pub fn neg(&self) -> GradTensor {
        self.mul_scalar(-1.0)
    }

    pub fn exp(&self) -> GradTensor {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|x| x.exp()).collect();
        self.record(shape, values, &[self], Op::Exp { a: self.id })
    }

    pub fn ln(&self) -> Result<GradTensor> {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        if let Some(bad) = v.iter().find(|x| **x <= 0.0) {
            return Err(TensorError::Domain {
                op: "ln",
                reason: format!("logarithm of non-positive operand {bad}"),
            });
        }
        let values = v.iter().map(|x| x.ln()).collect();
        Ok(self.record(shape, values, &[self], Op::Ln { a: self.id }))
    }

    /// max(x, c) elementwise. Gradient is zero where the clamp is active.
    pub fn clamp_min(&self, c: f64) -> GradTensor {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|x| x.max(c)).collect();
        self.record(shape, values, &[self], Op::ClampMin { a: self.id, c })
    }

    /// GELU (tanh approximation), used by the feed-forward blocks.
    pub fn gelu(&self) -> GradTensor {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|&x| gelu_fwd(x)).collect();
        self.record(shape, values, &[self], Op::Gelu { a: self.id })
    }

    /// Replace elements where `mask` is true with `value`. Gradient does not
    /// flow through masked positions.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<GradTensor> {
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        if mask.len() != v.len() {
            return Err(TensorError::InvalidShape {
                op: "masked_fill",
                shape,
                reason: format!("mask has {} entries, tensor has {}", mask.len(), v.len()),
            });
        }
        let values = v
            .iter()
            .zip(mask)
            .map(|(x, &m)| if m { value } else { *x })
            .collect();
        let mask = Rc::new(mask.to_vec());
        Ok(self.record(shape, values, &[self], Op::MaskedFill { a: self.id, mask }))
    }

    // ── Linear algebra / shape ───────────────────────────────────

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let shape = self.shape();
        match shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::InvalidShape {
                op,
                shape,
                reason: "expected a 2-D tensor".into(),
            }),
        }
    }

    pub fn matmul(&self, other: &GradTensor) -> Result<GradTensor> {
        assert!(self.same_tape(other), "matmul: operands from different tapes");
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let a = self.values();
        let b = other.values();
        let values = matmul_raw(&a, &b, m, k, n);
        Ok(self.record(
            vec![m, n],
            values,
            &[self, other],
            Op::MatMul { a: self.id, b: other.id, m, k, n },
        ))
    }

    pub fn transpose(&self) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("transpose")?;
        let v = self.values();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                values[c * rows + r] = v[r * cols + c];
            }
        }
        Ok(self.record(vec![cols, rows], values, &[self], Op::Transpose { a: self.id, rows, cols }))
    }

    /// Concatenate 2-D tensors along rows (all must share the column count).
    pub fn concat_rows(parts: &[GradTensor]) -> Result<GradTensor> {
        assert!(!parts.is_empty(), "concat_rows: empty part list");
        let first = &parts[0];
        let (_, cols) = first.dims2("concat_rows")?;
        let mut rows = Vec::with_capacity(parts.len());
        let mut values = Vec::new();
        for p in parts {
            assert!(first.same_tape(p), "concat_rows: operands from different tapes");
            let (r, c) = p.dims2("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows.iter().sum::<usize>(), cols],
                    rhs: vec![r, c],
                });
            }
            rows.push(r);
            values.extend_from_slice(&p.values());
        }
        let total: usize = rows.iter().sum();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let refs: Vec<&GradTensor> = parts.iter().collect();
        Ok(first.record(
            vec![total, cols],
            values,
            &refs,
            Op::ConcatRows { parts: ids, rows, cols },
        ))
    }

    /// Concatenate 2-D tensors along columns (all must share the row count).
    pub fn concat_cols(parts: &[GradTensor]) -> Result<GradTensor> {
        assert!(!parts.is_empty(), "concat_cols: empty part list");
        let first = &parts[0];
        let (rows, _) = first.dims2("concat_cols")?;
        let mut cols = Vec::with_capacity(parts.len());
        let mut part_values = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(first.same_tape(p), "concat_cols: operands from different tapes");
            let (r, c) = p.dims2("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![rows, cols.iter().sum::<usize>()],
                    rhs: vec![r, c],
                });
            }
            cols.push(c);
            part_values.push(p.values());
        }
        let total: usize = cols.iter().sum();
        let mut values = vec![0.0; rows * total];
        for r in 0..rows {
            let mut offset = 0;
            for (pv, &c) in part_values.iter().zip(&cols) {
                values[r * total + offset..r * total + offset + c]
                    .copy_from_slice(&pv[r * c..(r + 1) * c]);
                offset += c;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let refs: Vec<&GradTensor> = parts.iter().collect();
        Ok(first.record(
            vec![rows, total],
            values,
            &refs,
            Op::ConcatCols { parts: ids, cols, rows },
        ))
    }

    /// Rows `r0..r1` of a 2-D tensor.
    pub fn slice_rows(&self, r0: usize, r1: usize) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("slice_rows")?;
        if r0 > r1 || r1 > rows {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_rows",
                index: r1,
                shape: vec![rows, cols],
            });
        }
        let v = self.values();
        let values = v[r0 * cols..r1 * cols].to_vec();
        Ok(self.record(
            vec![r1 - r0, cols],
            values,
            &[self],
            Op::SliceRows { a: self.id, r0, rows: r1 - r0, cols, src_rows: rows },
        ))
    }

    /// Columns `c0..c1` of a 2-D tensor.
    pub fn slice_cols(&self, c0: usize, c1: usize) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("slice_cols")?;
        if c0 > c1 || c1 > cols {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: c1,
                shape: vec![rows, cols],
            });
        }
        let v = self.values();
        let w = c1 - c0;
        let mut values = vec![0.0; rows * w];
        for r in 0..rows {
            values[r * w..(r + 1) * w].copy_from_slice(&v[r * cols + c0..r * cols + c1]);
        }
        Ok(self.record(
            vec![rows, w],
            values,
            &[self],
            Op::SliceCols { a: self.id, c0, cols: w, rows, src_cols: cols },
        ))
    }

    /// Row `r` of a 2-D tensor as a 1-D tensor.
    pub fn row(&self, r: usize) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("row")?;
        if r >= rows {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: r,
                shape: vec![rows, cols],
            });
        }
        let v = self.values();
        let values = v[r * cols..(r + 1) * cols].to_vec();
        Ok(self.record(
            vec![cols],
            values,
            &[self],
            Op::SliceRows { a: self.id, r0: r, rows: 1, cols, src_rows: rows },
        ))
    }

    /// Gather rows by index (embedding lookup). Duplicate ids are allowed;
    /// their gradients scatter-add back into the same source row.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("gather_rows")?;
        let v = self.values();
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: id,
                    shape: vec![rows, cols],
                });
            }
            values.extend_from_slice(&v[id * cols..(id + 1) * cols]);
        }
        Ok(self.record(
            vec![ids.len(), cols],
            values,
            &[self],
            Op::GatherRows { a: self.id, ids: ids.to_vec(), cols, src_rows: rows },
        ))
    }

    /// From a `[n, m]` tensor pick element `ids[r]` out of each row,
    /// producing a 1-D tensor of length `n`.
    pub fn gather_per_row(&self, ids: &[usize]) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("gather_per_row")?;
        if ids.len() != rows {
            return Err(TensorError::InvalidShape {
                op: "gather_per_row",
                shape: vec![rows, cols],
                reason: format!("{} indices for {} rows", ids.len(), rows),
            });
        }
        let v = self.values();
        let mut values = Vec::with_capacity(rows);
        for (r, &id) in ids.iter().enumerate() {
            if id >= cols {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_per_row",
                    index: id,
                    shape: vec![rows, cols],
                });
            }
            values.push(v[r * cols + id]);
        }
        Ok(self.record(
            vec![rows],
            values,
            &[self],
            Op::GatherPerRow { a: self.id, ids: ids.to_vec(), cols },
        ))
    }

    /// Slice `[a, b)` of a 1-D tensor.
    pub fn slice_1d(&self, a: usize, b: usize) -> Result<GradTensor> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "slice_1d",
                shape,
                reason: "expected a 1-D tensor".into(),
            });
        }
        let n = shape[0];
        if a > b || b > n {
            return Err(TensorError::IndexOutOfBounds { op: "slice_1d", index: b, shape });
        }
        let v = self.values();
        let values = v[a..b].to_vec();
        // Same memory layout as slicing rows of an [n, 1] matrix.
        Ok(self.record(
            vec![b - a],
            values,
            &[self],
            Op::SliceRows { a: self.id, r0: a, rows: b - a, cols: 1, src_rows: n },
        ))
    }

    /// Element `index` of a 1-D tensor as a scalar.
    pub fn pick(&self, index: usize) -> Result<GradTensor> {
        let shape = self.shape();
        let v = self.values();
        if index >= v.len() {
            return Err(TensorError::IndexOutOfBounds { op: "pick", index, shape });
        }
        Ok(self.record(vec![1], vec![v[index]], &[self], Op::Pick { a: self.id, index }))
    }

    // ── Row-wise nonlinearities ──────────────────────────────────

    /// Numerically stabilized softmax over the last axis. 1-D tensors are
    /// treated as a single row.
    pub fn softmax_rows(&self) -> GradTensor {
        let shape = self.shape();
        let (rows, cols) = match shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => panic!("softmax_rows: expected 1-D or 2-D, got {shape:?}"),
        };
        let v = self.values();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            softmax_row(&v[r * cols..(r + 1) * cols], &mut values[r * cols..(r + 1) * cols]);
        }
        self.record(shape, values, &[self], Op::SoftmaxRows { a: self.id, rows, cols })
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm_rows(&self, gamma: &GradTensor, beta: &GradTensor, eps: f64) -> Result<GradTensor> {
        assert!(self.same_tape(gamma) && self.same_tape(beta));
        let (rows, cols) = self.dims2("layer_norm_rows")?;
        let gs = gamma.shape();
        let bs = beta.shape();
        if gs != vec![cols] || bs != vec![cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm_rows",
                lhs: vec![rows, cols],
                rhs: if gs != vec![cols] { gs } else { bs },
            });
        }
        let x = self.values();
        let g = gamma.values();
        let b = beta.values();
        let mut values = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                values[r * cols + c] = (row[c] - mean) * inv * g[c] + b[c];
            }
        }
        Ok(self.record(
            vec![rows, cols],
            values,
            &[self, gamma, beta],
            Op::LayerNormRows { a: self.id, gamma: gamma.id, beta: beta.id, rows, cols, eps },
        ))
    }

    // ── Reductions ───────────────────────────────────────────────

    pub fn sum(&self) -> GradTensor {
        let v = self.values();
        let total = v.iter().sum();
        self.record(vec![1], vec![total], &[self], Op::Sum { a: self.id })
    }

    pub fn mean(&self) -> GradTensor {
        let v = self.values();
        let total: f64 = v.iter().sum();
        let m = total / v.len() as f64;
        self.record(vec![1], vec![m], &[self], Op::Mean { a: self.id })
    }

    /// Row sums of a 2-D tensor as a 1-D tensor.
    pub fn sum_rows(&self) -> Result<GradTensor> {
        let (rows, cols) = self.dims2("sum_rows")?;
        let v = self.values();
        let values: Vec<f64> = (0..rows)
            .map(|r| v[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        Ok(self.record(vec![rows], values, &[self], Op::SumRows { a: self.id, rows, cols }))
    }

    /// Divide every element by a scalar tensor (gradient flows into both).
    pub fn div_by_scalar(&self, s: &GradTensor) -> Result<GradTensor> {
        assert!(self.same_tape(s), "div_by_scalar: operands from different tapes");
        if s.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "div_by_scalar",
                shape: s.shape(),
                reason: "divisor must be a scalar".into(),
            });
        }
        let d = s.scalar_value();
        if d == 0.0 {
            return Err(TensorError::Domain {
                op: "div_by_scalar",
                reason: "division by zero".into(),
            });
        }
        let (shape, v) = with_node!(self, n, (n.shape.clone(), n.values.clone()));
        let values = v.iter().map(|x| x / d).collect();
        Ok(self.record(shape, values, &[self, s], Op::DivByScalar { a: self.id, s: s.id }))
    }

    /// Cosine similarity of two 1-D tensors. Defined as 0 when either vector
    /// is all-zero (and the gradient is 0 there as well).
    pub fn cosine_sim(&self, other: &GradTensor) -> Result<GradTensor> {
        assert!(self.same_tape(other), "cosine_sim: operands from different tapes");
        let a = self.values();
        let b = other.values();
        if self.shape() != other.shape() || self.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = cosine_raw(&a, &b);
        Ok(self.record(vec![1], vec![value], &[self, other], Op::CosineSim { a: self.id, b: other.id }))
    }

    // ── Backward ─────────────────────────────────────────────────

    /// Reverse-mode sweep from a recorded scalar. Gradients accumulate into
    /// every `requires_grad` leaf; call [`Tape::zero_grad`] between sweeps if
    /// accumulation is not wanted.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.tape.inner.borrow();
            let node = &inner.nodes[self.id];
            if node.values.len() != 1 {
                return Err(TensorError::NonScalarRoot { shape: node.shape.clone() });
            }
            if matches!(node.op, Op::Leaf) {
                return Err(TensorError::NotRecorded);
            }
        }
        let mut inner = self.tape.inner.borrow_mut();
        let nodes = &mut inner.nodes;
        nodes[self.id].grad[0] += 1.0;
        for id in (0..=self.id).rev() {
            if !nodes[id].needs_grad || matches!(nodes[id].op, Op::Leaf) {
                continue;
            }
            backward_op(nodes, id);
        }
        Ok(())
    }
}

// ── Raw kernels ──────────────────────────────────────────────────────

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_row(input: &[f64], out: &mut [f64]) {
    let max = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(input) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub(crate) fn cosine_raw(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ── Backward kernels ─────────────────────────────────────────────────

fn backward_op(nodes: &mut [Node], id: usize) {
    // Take the output gradient out of the node to appease the borrow checker;
    // a node's grad is never an input to its own backward.
    let op = nodes[id].op.clone();
    let d_out = std::mem::take(&mut nodes[id].grad);
    match &op {
        Op::Leaf => unreachable!(),
        Op::Add { a, b } => {
            accumulate(nodes, *a, &d_out);
            accumulate(nodes, *b, &d_out);
        }
        Op::Sub { a, b } => {
            accumulate(nodes, *a, &d_out);
            accumulate_scaled(nodes, *b, &d_out, -1.0);
        }
        Op::Mul { a, b } => {
            let (ai, bi) = (*a, *b);
            let da: Vec<f64> = d_out.iter().zip(&nodes[bi].values).map(|(d, v)| d * v).collect();
            let db: Vec<f64> = d_out.iter().zip(&nodes[ai].values).map(|(d, v)| d * v).collect();
            accumulate(nodes, ai, &da);
            accumulate(nodes, bi, &db);
        }
        Op::AddScalar { a } => accumulate(nodes, *a, &d_out),
        Op::MulScalar { a, c } => accumulate_scaled(nodes, *a, &d_out, *c),
        Op::MatMul { a, b, m, k, n } => {
            let (m, k, n) = (*m, *k, *n);
            // dA = dOut @ B^T ; dB = A^T @ dOut
            let bt = transpose_raw(&nodes[*b].values, k, n);
            let da = matmul_raw(&d_out, &bt, m, n, k);
            let at = transpose_raw(&nodes[*a].values, m, k);
            let db = matmul_raw(&at, &d_out, k, m, n);
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
        Op::Transpose { a, rows, cols } => {
            let da = transpose_raw(&d_out, *cols, *rows);
            debug_assert_eq!(da.len(), rows * cols);
            accumulate(nodes, *a, &da);
        }
        Op::ConcatRows { parts, rows, cols } => {
            let mut offset = 0;
            for (part, &r) in parts.iter().zip(rows) {
                accumulate(nodes, *part, &d_out[offset..offset + r * cols]);
                offset += r * cols;
            }
        }
        Op::ConcatCols { parts, cols, rows } => {
            let total: usize = cols.iter().sum();
            let mut offset = 0;
            for (part, &c) in parts.iter().zip(cols) {
                let mut dp = vec![0.0; rows * c];
                for r in 0..*rows {
                    dp[r * c..(r + 1) * c]
                        .copy_from_slice(&d_out[r * total + offset..r * total + offset + c]);
                }
                accumulate(nodes, *part, &dp);
                offset += c;
            }
        }
        Op::SliceRows { a, r0, rows, cols, src_rows } => {
            let mut da = vec![0.0; src_rows * cols];
            da[r0 * cols..(r0 + rows) * cols].copy_from_slice(&d_out);
            accumulate(nodes, *a, &da);
        }
        Op::SliceCols { a, c0, cols, rows, src_cols } => {
            let mut da = vec![0.0; rows * src_cols];
            for r in 0..*rows {
                da[r * src_cols + c0..r * src_cols + c0 + cols]
                    .copy_from_slice(&d_out[r * cols..(r + 1) * cols]);
            }
            accumulate(nodes, *a, &da);
        }
        Op::GatherRows { a, ids, cols, src_rows } => {
            let mut da = vec![0.0; src_rows * cols];
            for (r, &id) in ids.iter().enumerate() {
                for c in 0..*cols {
                    da[id * cols + c] += d_out[r * cols + c];
                }
            }
            accumulate(nodes, *a, &da);
        }
        Op::GatherPerRow { a, ids, cols } => {
            let mut da = vec![0.0; ids.len() * cols];
            for (r, &id) in ids.iter().enumerate() {
                da[r * cols + id] = d_out[r];
            }
            accumulate(nodes, *a, &da);
        }
        Op::Pick { a, index } => {
            let mut da = vec![0.0; nodes[*a].values.len()];
            da[*index] = d_out[0];
            accumulate(nodes, *a, &da);
        }
        Op::Exp { a } => {
            let da: Vec<f64> = d_out.iter().zip(&nodes[id].values).map(|(d, y)| d * y).collect();
            accumulate(nodes, *a, &da);
        }
        Op::Ln { a } => {
            let da: Vec<f64> = d_out.iter().zip(&nodes[*a].values).map(|(d, x)| d / x).collect();
            accumulate(nodes, *a, &da);
        }
        Op::ClampMin { a, c } => {
            let da: Vec<f64> = d_out
                .iter()
                .zip(&nodes[*a].values)
                .map(|(d, x)| if *x > *c { *d } else { 0.0 })
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::Gelu { a } => {
            let da: Vec<f64> = d_out
                .iter()
                .zip(&nodes[*a].values)
                .map(|(d, x)| d * gelu_grad(*x))
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::SoftmaxRows { a, rows, cols } => {
            let y = &nodes[id].values;
            let mut da = vec![0.0; rows * cols];
            for r in 0..*rows {
                let base = r * cols;
                let dot: f64 = (0..*cols).map(|c| d_out[base + c] * y[base + c]).sum();
                for c in 0..*cols {
                    da[base + c] = y[base + c] * (d_out[base + c] - dot);
                }
            }
            accumulate(nodes, *a, &da);
        }
        Op::LayerNormRows { a, gamma, beta, rows, cols, eps } => {
            let (rows, cols) = (*rows, *cols);
            let x = nodes[*a].values.clone();
            let g = nodes[*gamma].values.clone();
            let mut da = vec![0.0; rows * cols];
            let mut dg = vec![0.0; cols];
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                let row = &x[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                let dy = &d_out[r * cols..(r + 1) * cols];
                // d gamma / d beta
                for c in 0..cols {
                    dg[c] += dy[c] * xhat[c];
                    db[c] += dy[c];
                }
                // d x: standard layer-norm backward
                let dxhat: Vec<f64> = (0..cols).map(|c| dy[c] * g[c]).collect();
                let s1: f64 = dxhat.iter().sum();
                let s2: f64 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum();
                for c in 0..cols {
                    da[r * cols + c] =
                        inv * (dxhat[c] - s1 / cols as f64 - xhat[c] * s2 / cols as f64);
                }
            }
            accumulate(nodes, *a, &da);
            accumulate(nodes, *gamma, &dg);
            accumulate(nodes, *beta, &db);
        }
        Op::MaskedFill { a, mask } => {
            let da: Vec<f64> = d_out
                .iter()
                .zip(mask.iter())
                .map(|(d, &m)| if m { 0.0 } else { *d })
                .collect();
            accumulate(nodes, *a, &da);
        }
        Op::Sum { a } => {
            let da = vec![d_out[0]; nodes[*a].values.len()];
            accumulate(nodes, *a, &da);
        }
        Op::Mean { a } => {
            let n = nodes[*a].values.len();
            let da = vec![d_out[0] / n as f64; n];
            accumulate(nodes, *a, &da);
        }
        Op::SumRows { a, rows, cols } => {
            let mut da = vec![0.0; rows * cols];
            for r in 0..*rows {
                for c in 0..*cols {
                    da[r * cols + c] = d_out[r];
                }
            }
            accumulate(nodes, *a, &da);
        }
        Op::DivByScalar { a, s } => {
            let d = nodes[*s].values[0];
            let da: Vec<f64> = d_out.iter().map(|g| g / d).collect();
            let ds: f64 = d_out
                .iter()
                .zip(&nodes[*a].values)
                .map(|(g, x)| -g * x / (d * d))
                .sum();
            accumulate(nodes, *a, &da);
            accumulate(nodes, *s, &[ds]);
        }
        Op::CosineSim { a, b } => {
            let av = nodes[*a].values.clone();
            let bv = nodes[*b].values.clone();
            let na: f64 = av.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = bv.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                // Zero-vector convention: value 0, gradient 0.
                nodes[id].grad = d_out;
                return;
            }
            let c = nodes[id].values[0];
            let g = d_out[0];
            let da: Vec<f64> = av
                .iter()
                .zip(&bv)
                .map(|(x, y)| g * (y / (na * nb) - c * x / (na * na)))
                .collect();
            let db: Vec<f64> = av
                .iter()
                .zip(&bv)
                .map(|(x, y)| g * (x / (na * nb) - c * y / (nb * nb)))
                .collect();
            accumulate(nodes, *a, &da);
            accumulate(nodes, *b, &db);
        }
    }
    // Restore the output gradient so repeated backward calls accumulate.
    nodes[id].grad = d_out;
}

fn transpose_raw(v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = v[r * cols + c];
        }
    }
    out
}

fn accumulate(nodes: &mut [Node], id: usize, grad: &[f64]) {
    if !nodes[id].needs_grad {
        return;
    }
    for (g, d) in nodes[id].grad.iter_mut().zip(grad) {
        *g += d;
    }
}

fn accumulate_scaled(nodes: &mut [Node], id: usize, grad: &[f64], scale: f64) {
    if !nodes[id].needs_grad {
        return;
    }
    for (g, d) in nodes[id].grad.iter_mut().zip(grad) {
        *g += d * scale;
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Plain data for a gradient-check leaf.
#[derive(Clone, Debug)]
pub struct LeafData {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl LeafData {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(numel(&shape), values.len());
        LeafData { shape, values }
    }
}

/// Compare the analytic gradient of `f` against central finite differences.
///
/// `f` is called with freshly bound leaves on a new tape for every
/// evaluation and must return a scalar. Returns the maximum over all leaf
/// elements of `|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
///
/// Errors if `epsilon <= 0`, if `f` is not deterministic (two evaluations at
/// the same point disagree bitwise), or if `f` itself fails.
pub fn grad_check<F>(f: F, leaves: &[LeafData], epsilon: f64) -> Result<f64>
where
    F: Fn(&Rc<Tape>, &[GradTensor]) -> Result<GradTensor>,
{
    if epsilon <= 0.0 {
        return Err(TensorError::GradCheck(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }

    let eval = |data: &[LeafData], with_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let tape = Tape::new();
        let bound: Vec<GradTensor> = data
            .iter()
            .map(|l| tape.leaf(l.values.clone(), l.shape.clone(), with_grad))
            .collect::<Result<_>>()?;
        let root = f(&tape, &bound)?;
        if root.numel() != 1 {
            return Err(TensorError::NonScalarRoot { shape: root.shape() });
        }
        let value = root.scalar_value();
        let grads = if with_grad {
            root.backward()?;
            bound.iter().map(|t| t.grad()).collect()
        } else {
            Vec::new()
        };
        Ok((value, grads))
    };

    let (v0, analytic) = eval(leaves, true)?;
    let (v1, _) = eval(leaves, false)?;
    if v0.to_bits() != v1.to_bits() {
        return Err(TensorError::GradCheck(format!(
            "computation is not deterministic: {v0} != {v1}"
        )));
    }

    let mut max_rel = 0.0f64;
    let mut perturbed = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.values.len() {
            let orig = leaf.values[ei];
            perturbed[li].values[ei] = orig + epsilon;
            let (plus, _) = eval(&perturbed, false)?;
            perturbed[li].values[ei] = orig - epsilon;
            let (minus, _) = eval(&perturbed, false)?;
            perturbed[li].values[ei] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic[li][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

// ── Tests ────────────────────────────────────────────────────────────
