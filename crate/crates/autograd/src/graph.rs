//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order. Reverse
//! accumulation walks the tape backwards, so the recording order is the
//! topological order. Gradients accumulate additively; a graph can be
//! differentiated once until [`Graph::reset`] is called.
//!
//! [`Graph::checkpoint`] records a pure sub-computation as a single tape
//! entry that keeps only its inputs and outputs. Its internals are rebuilt
//! during the backward pass. The rebuilt segment starts from the exact
//! gradient accumulators the plain tape would have seen at that point, so
//! checkpointed and plain runs produce bit-identical gradients.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::Tensor;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Environment variable that turns on non-finite detection for every op.
pub const CHECK_FINITE_ENV: &str = "HMEM_CHECK_FINITE";

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    graph: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}@g{})", self.id, self.graph)
    }
}

pub type SegmentFn = dyn Fn(&Graph, &[Var]) -> Result<Vec<Var>>;

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    LayerNorm { x: usize, gain: usize, bias: usize },
    Gelu { a: usize },
    Gather { table: usize, ids: Rc<[usize]> },
    ConcatRows { parts: Vec<usize> },
    SliceRows { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    SliceCols { a: usize, start: usize },
    MaskedSoftmax { a: usize, mask: Rc<[bool]> },
    CrossEntropy { logits: usize, targets: Rc<[usize]>, probs: Vec<f64> },
    Sum { a: usize },
    Checkpoint(Box<CheckpointRecord>),
    CheckpointOutput,
}

struct CheckpointRecord {
    /// Distinct inputs; `arg_map[i]` indexes into this for closure argument `i`.
    inputs: Vec<usize>,
    arg_map: Vec<usize>,
    outputs: Vec<usize>,
    segment: Rc<SegmentFn>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Gather { .. } => "gather",
            Op::ConcatRows { .. } => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Checkpoint(_) => "checkpoint",
            Op::CheckpointOutput => "checkpoint_output",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.graph, self.graph, "Var from a different graph");
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, materializing zeros when it was not reached.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; numel], <[f64]>::to_vec)
    }
}

pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    backward_done: Cell<bool>,
    check_finite: bool,
    retained: Cell<usize>,
    peak_retained: Cell<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        let check = std::env::var(CHECK_FINITE_ENV).is_ok_and(|v| !v.is_empty() && v != "0");
        Self::with_finite_check(check)
    }

    pub fn with_finite_check(check_finite: bool) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
            check_finite,
            retained: Cell::new(0),
            peak_retained: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of activation elements currently stored by non-leaf entries.
    pub fn retained_elements(&self) -> usize {
        self.retained.get()
    }

    /// Largest activation footprint observed, including segments rebuilt
    /// during backward.
    pub fn peak_retained_elements(&self) -> usize {
        self.peak_retained.get()
    }

    /// Allows another backward pass over the same recording.
    pub fn reset(&self) {
        self.backward_done.set(false);
    }

    fn var(&self, id: usize) -> Var {
        Var { id, graph: self.id }
    }

    fn check(&self, v: Var) -> usize {
        assert_eq!(v.graph, self.id, "Var {v:?} used on graph g{}", self.id);
        v.id
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !matches!(op, Op::Leaf) {
            if let Some(index) = value.first_non_finite() {
                return Err(TensorError::NonFinite {
                    op: op.name(),
                    index,
                });
            }
        }
        let stored = match &op {
            Op::Leaf | Op::Checkpoint(_) => 0,
            Op::CrossEntropy { probs, .. } => value.numel() + probs.len(),
            _ => value.numel(),
        };
        let retained = self.retained.get() + stored;
        self.retained.set(retained);
        self.peak_retained.set(self.peak_retained.get().max(retained));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(self.var(nodes.len() - 1))
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    // ------------------------------------------------------------------
    // Leaves and inspection
    // ------------------------------------------------------------------

    /// Records `t` as a leaf; it is differentiable when `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var {
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data());
        self.push(value, Op::Leaf, t.requires_grad())
            .expect("leaf values are not checked")
    }

    pub fn constant(&self, t: &Tensor) -> Var {
        let value = Tensor::from_shared(t.shape().to_vec(), t.shared_data());
        self.push(value, Op::Leaf, false)
            .expect("leaf values are not checked")
    }

    pub fn value(&self, v: Var) -> Tensor {
        let id = self.check(v);
        self.nodes()[id].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        let id = self.check(v);
        self.nodes()[id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let id = self.check(v);
        self.nodes()[id].requires_grad
    }

    fn dims2(&self, op: &'static str, id: usize) -> Result<(usize, usize)> {
        let nodes = self.nodes();
        let t = &nodes[id].value;
        t.dims2().ok_or_else(|| TensorError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        })
    }

    // ------------------------------------------------------------------
    // Forward ops
    // ------------------------------------------------------------------

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_t(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let op_name = if transpose_b { "matmul_t" } else { "matmul" };
        let (m, k) = self.dims2(op_name, ia)?;
        let (br, bc) = self.dims2(op_name, ib)?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if k != kb {
            let nodes = self.nodes();
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                left: nodes[ia].value.shape().to_vec(),
                right: nodes[ib].value.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes();
            let (ad, bd) = (nodes[ia].value.data(), nodes[ib].value.data());
            let b_strides = if transpose_b { (1, k) } else { (n, 1) };
            kernels::gemm(m, k, n, ad, (k, 1), bd, b_strides, &mut out, n);
        }
        let rg = self.requires(&[ia, ib]);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul {
                a: ia,
                b: ib,
                transpose_b,
            },
            rg,
        )
    }

    fn same_shape(&self, op: &'static str, ia: usize, ib: usize) -> Result<Vec<usize>> {
        let nodes = self.nodes();
        let (sa, sb) = (nodes[ia].value.shape(), nodes[ib].value.shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let shape = self.same_shape("add", ia, ib)?;
        let out = {
            let nodes = self.nodes();
            nodes[ia]
                .value
                .data()
                .iter()
                .zip(nodes[ib].value.data())
                .map(|(x, y)| x + y)
                .collect()
        };
        let rg = self.requires(&[ia, ib]);
        self.push(Tensor::from_parts(shape, out), Op::Add { a: ia, b: ib }, rg)
    }

    /// Adds a row vector `row: [n]` to every row of `a: [m, n]`.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a), self.check(row));
        let (m, n) = self.dims2("add_row", ia)?;
        let (rr, rc) = self.dims2("add_row", ir)?;
        if rr != 1 || rc != n {
            let nodes = self.nodes();
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: nodes[ia].value.shape().to_vec(),
                right: nodes[ir].value.shape().to_vec(),
            });
        }
        let (out, shape) = {
            let nodes = self.nodes();
            let (ad, rd) = (nodes[ia].value.data(), nodes[ir].value.data());
            let mut out = ad.to_vec();
            for r in 0..m {
                for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(rd) {
                    *o += b;
                }
            }
            (out, nodes[ia].value.shape().to_vec())
        };
        let rg = self.requires(&[ia, ir]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow { a: ia, row: ir }, rg)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a), self.check(b));
        let shape = self.same_shape("mul", ia, ib)?;
        let out = {
            let nodes = self.nodes();
            nodes[ia]
                .value
                .data()
                .iter()
                .zip(nodes[ib].value.data())
                .map(|(x, y)| x * y)
                .collect()
        };
        let rg = self.requires(&[ia, ib]);
        self.push(Tensor::from_parts(shape, out), Op::Mul { a: ia, b: ib }, rg)
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a);
        let (out, shape) = {
            let nodes = self.nodes();
            let t = &nodes[ia].value;
            (
                t.data().iter().map(|x| x * factor).collect(),
                t.shape().to_vec(),
            )
        };
        let rg = self.requires(&[ia]);
        self.push(Tensor::from_parts(shape, out), Op::Scale { a: ia, factor }, rg)
    }

    /// Row-wise layer normalization with learned `gain` and `bias` of width `d`.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x), self.check(gain), self.check(bias));
        let (m, d) = self.dims2("layer_norm", ix)?;
        for &p in &[ig, ib] {
            let (r, c) = self.dims2("layer_norm", p)?;
            if r != 1 || c != d {
                let nodes = self.nodes();
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: nodes[ix].value.shape().to_vec(),
                    right: nodes[p].value.shape().to_vec(),
                });
            }
        }
        let (out, shape) = {
            let nodes = self.nodes();
            let (xd, gd, bd) = (
                nodes[ix].value.data(),
                nodes[ig].value.data(),
                nodes[ib].value.data(),
            );
            let mut out = vec![0.0; m * d];
            for r in 0..m {
                let row = &xd[r * d..(r + 1) * d];
                let (mean, rstd) = kernels::row_stats(row);
                for j in 0..d {
                    out[r * d + j] = (row[j] - mean) * rstd * gd[j] + bd[j];
                }
            }
            (out, nodes[ix].value.shape().to_vec())
        };
        let rg = self.requires(&[ix, ig, ib]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: ix,
                gain: ig,
                bias: ib,
            },
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let (out, shape) = {
            let nodes = self.nodes();
            let t = &nodes[ia].value;
            (
                t.data().iter().map(|&x| kernels::gelu(x)).collect(),
                t.shape().to_vec(),
            )
        };
        let rg = self.requires(&[ia]);
        self.push(Tensor::from_parts(shape, out), Op::Gelu { a: ia }, rg)
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table);
        let (rows, d) = self.dims2("gather", it)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid(format!(
                "gather: index {bad} out of range for table with {rows} rows"
            )));
        }
        let out = {
            let nodes = self.nodes();
            let td = nodes[it].value.data();
            let mut out = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                out.extend_from_slice(&td[i * d..(i + 1) * d]);
            }
            out
        };
        let rg = self.requires(&[it]);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Gather {
                table: it,
                ids: ids.into(),
            },
            rg,
        )
    }

    /// Concatenates `[n_i, d]` blocks along the sequence axis.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows: no inputs".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let (_, d) = self.dims2("concat_rows", ids[0])?;
        let mut total = 0;
        for &i in &ids {
            let (r, c) = self.dims2("concat_rows", i)?;
            if c != d {
                let nodes = self.nodes();
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: nodes[ids[0]].value.shape().to_vec(),
                    right: nodes[i].value.shape().to_vec(),
                });
            }
            total += r;
        }
        let out = {
            let nodes = self.nodes();
            let mut out = Vec::with_capacity(total * d);
            for &i in &ids {
                out.extend_from_slice(nodes[i].value.data());
            }
            out
        };
        let rg = self.requires(&ids);
        self.push(
            Tensor::from_parts(vec![total, d], out),
            Op::ConcatRows { parts: ids },
            rg,
        )
    }

    /// Rows `start..start + len` of `a`.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let (m, d) = self.dims2("slice_rows", ia)?;
        if start + len > m || len == 0 {
            return Err(TensorError::Invalid(format!(
                "slice_rows: range {start}..{} invalid for {m} rows",
                start + len
            )));
        }
        let out = self.nodes()[ia].value.data()[start * d..(start + len) * d].to_vec();
        let rg = self.requires(&[ia]);
        self.push(
            Tensor::from_parts(vec![len, d], out),
            Op::SliceRows { a: ia, start },
            rg,
        )
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a);
        let (m, d) = self.dims2("slice_cols", ia)?;
        if start + len > d || len == 0 {
            return Err(TensorError::Invalid(format!(
                "slice_cols: range {start}..{} invalid for {d} columns",
                start + len
            )));
        }
        let out = {
            let nodes = self.nodes();
            let src = nodes[ia].value.data();
            let mut out = Vec::with_capacity(m * len);
            for r in 0..m {
                out.extend_from_slice(&src[r * d + start..r * d + start + len]);
            }
            out
        };
        let rg = self.requires(&[ia]);
        self.push(
            Tensor::from_parts(vec![m, len], out),
            Op::SliceCols { a: ia, start },
            rg,
        )
    }

    /// Concatenates `[m, d_i]` blocks along the feature axis.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_cols: no inputs".into()));
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect();
        let (m, _) = self.dims2("concat_cols", ids[0])?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (r, c) = self.dims2("concat_cols", i)?;
            if r != m {
                let nodes = self.nodes();
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: nodes[ids[0]].value.shape().to_vec(),
                    right: nodes[i].value.shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let out = {
            let nodes = self.nodes();
            let mut out = Vec::with_capacity(m * total);
            for r in 0..m {
                for (&i, &w) in ids.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                }
            }
            out
        };
        let rg = self.requires(&ids);
        self.push(
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols { parts: ids },
            rg,
        )
    }

    /// Row-wise softmax restricted to positions where `mask` is true.
    ///
    /// Masked positions receive exactly zero; a row with no allowed
    /// position is all zeros.
    pub fn masked_softmax(&self, a: Var, mask: &[bool]) -> Result<Var> {
        let ia = self.check(a);
        let (m, n) = self.dims2("masked_softmax", ia)?;
        if mask.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                left: vec![m, n],
                right: vec![mask.len()],
            });
        }
        let (out, shape) = {
            let nodes = self.nodes();
            let src = nodes[ia].value.data();
            let mut out = vec![0.0; m * n];
            for r in 0..m {
                kernels::masked_softmax_row(
                    &src[r * n..(r + 1) * n],
                    &mask[r * n..(r + 1) * n],
                    &mut out[r * n..(r + 1) * n],
                );
            }
            (out, nodes[ia].value.shape().to_vec())
        };
        let rg = self.requires(&[ia]);
        self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax {
                a: ia,
                mask: mask.into(),
            },
            rg,
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits);
        let (m, v) = self.dims2("cross_entropy", il)?;
        if targets.len() != m || m == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![m, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: target {bad} out of range for {v} classes"
            )));
        }
        let (loss, probs) = {
            let nodes = self.nodes();
            let src = nodes[il].value.data();
            let mut probs = vec![0.0; m * v];
            let mut loss = 0.0;
            let all = vec![true; v];
            for r in 0..m {
                let row = &src[r * v..(r + 1) * v];
                kernels::masked_softmax_row(row, &all, &mut probs[r * v..(r + 1) * v]);
                loss -= kernels::log_softmax_at(row, targets[r]);
            }
            (loss / m as f64, probs)
        };
        let rg = self.requires(&[il]);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.into(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.check(a);
        let s = self.nodes()[ia].value.data().iter().sum();
        let rg = self.requires(&[ia]);
        self.push(Tensor::scalar(s), Op::Sum { a: ia }, rg)
    }

    // ------------------------------------------------------------------
    // Checkpointing
    // ------------------------------------------------------------------

    /// Runs `segment` on `inputs`, storing only inputs and outputs on this tape.
    ///
    /// Every tensor the segment depends on, parameters included, must be
    /// passed through `inputs`; the closure sees fresh leaves in a private
    /// graph and must be deterministic.
    pub fn checkpoint<F>(&self, inputs: &[Var], segment: F) -> Result<Vec<Var>>
    where
        F: Fn(&Graph, &[Var]) -> Result<Vec<Var>> + 'static,
    {
        let segment: Rc<SegmentFn> = Rc::new(segment);
        let mut unique: Vec<usize> = Vec::new();
        let mut arg_map = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let id = self.check(v);
            let slot = match unique.iter().position(|&u| u == id) {
                Some(p) => p,
                None => {
                    unique.push(id);
                    unique.len() - 1
                }
            };
            arg_map.push(slot);
        }

        let (values, peak) = {
            let (sub, _, outs) = self.replay(&unique, &arg_map, &segment)?;
            let values: Vec<Tensor> = outs.iter().map(|&o| sub.value(o)).collect();
            (values, sub.peak_retained_elements())
        };
        self.peak_retained
            .set(self.peak_retained.get().max(self.retained.get() + peak));

        let rg = self.requires(&unique);
        let ck = self.push(
            Tensor::zeros(vec![0]),
            Op::Checkpoint(Box::new(CheckpointRecord {
                inputs: unique,
                arg_map,
                outputs: Vec::new(),
                segment,
            })),
            rg,
        )?;
        let mut outs = Vec::with_capacity(values.len());
        for value in values {
            outs.push(self.push(value, Op::CheckpointOutput, rg)?);
        }
        if let Op::Checkpoint(rec) = &mut self.nodes.borrow_mut()[ck.id].op {
            rec.outputs = outs.iter().map(|o| o.id).collect();
        }
        Ok(outs)
    }

    /// Runs a segment in a private graph whose leaves mirror `inputs`.
    fn replay(
        &self,
        inputs: &[usize],
        arg_map: &[usize],
        segment: &Rc<SegmentFn>,
    ) -> Result<(Graph, Vec<Var>, Vec<Var>)> {
        let sub = Graph::with_finite_check(self.check_finite);
        let leaves: Vec<Var> = {
            let nodes = self.nodes();
            inputs
                .iter()
                .map(|&i| {
                    let n = &nodes[i];
                    let t = Tensor::from_shared(n.value.shape().to_vec(), n.value.shared_data())
                        .with_requires_grad(n.requires_grad);
                    sub.leaf(&t)
                })
                .collect()
        };
        let args: Vec<Var> = arg_map.iter().map(|&s| leaves[s]).collect();
        let outs = segment(&sub, &args)?;
        for &o in &outs {
            sub.check(o);
        }
        Ok((sub, leaves, outs))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let id = self.check(loss);
        if self.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        {
            let nodes = self.nodes();
            let v = &nodes[id].value;
            if !v.is_scalar() {
                return Err(TensorError::NotScalar(v.shape().to_vec()));
            }
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.len()];
        grads[id] = Some(vec![1.0]);
        self.run_backward(&mut grads, id)?;
        self.backward_done.set(true);
        Ok(Gradients {
            graph: self.id,
            grads,
        })
    }

    fn run_backward(&self, grads: &mut [Option<Vec<f64>>], last: usize) -> Result<()> {
        let nodes = self.nodes();
        for i in (0..=last).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Checkpoint(rec) = &node.op {
                if rec.outputs.iter().any(|&o| grads[o].is_some()) {
                    self.backprop_checkpoint(&nodes, rec, grads)?;
                }
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(&nodes, i, &gout, grads)?;
            grads[i] = Some(gout);
        }
        Ok(())
    }

    fn backprop_node(
        &self,
        nodes: &[Node],
        i: usize,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &nodes[i];
        let val = |j: usize| &nodes[j].value;
        match &node.op {
            Op::Leaf | Op::CheckpointOutput => {}
            &Op::MatMul { a, b, transpose_b } => {
                let (m, k) = val(a).dims2().unwrap();
                let n = node.value.dims2().unwrap().1;
                if nodes[a].requires_grad {
                    // dA = dC · B   (B stored [n, k] when transposed, else [k, n])
                    let b_strides = if transpose_b { (k, 1) } else { (1, n) };
                    let ga = acc(grads, a, m * k);
                    kernels::gemm(m, n, k, gout, (n, 1), val(b).data(), b_strides, ga, k);
                }
                if nodes[b].requires_grad {
                    let ad = val(a).data();
                    if transpose_b {
                        // dB[n, k] = dCᵀ · A
                        let gb = acc(grads, b, n * k);
                        kernels::gemm(n, m, k, gout, (1, n), ad, (k, 1), gb, k);
                    } else {
                        // dB[k, n] = Aᵀ · dC
                        let gb = acc(grads, b, k * n);
                        kernels::gemm(k, m, n, ad, (1, k), gout, (n, 1), gb, n);
                    }
                }
            }
            &Op::Add { a, b } => {
                for p in [a, b] {
                    if nodes[p].requires_grad {
                        add_into(acc(grads, p, gout.len()), gout);
                    }
                }
            }
            &Op::AddRow { a, row } => {
                if nodes[a].requires_grad {
                    add_into(acc(grads, a, gout.len()), gout);
                }
                if nodes[row].requires_grad {
                    let n = val(row).numel();
                    let g = acc(grads, row, n);
                    for chunk in gout.chunks(n) {
                        add_into(g, chunk);
                    }
                }
            }
            &Op::Mul { a, b } => {
                for (p, q) in [(a, b), (b, a)] {
                    if nodes[p].requires_grad {
                        let other = val(q).data();
                        let g = acc(grads, p, gout.len());
                        for ((g, go), o) in g.iter_mut().zip(gout).zip(other) {
                            *g += go * o;
                        }
                    }
                }
            }
            &Op::Scale { a, factor } => {
                if nodes[a].requires_grad {
                    let g = acc(grads, a, gout.len());
                    for (g, go) in g.iter_mut().zip(gout) {
                        *g += go * factor;
                    }
                }
            }
            &Op::LayerNorm { x, gain, bias } => {
                let (m, d) = val(x).dims2().unwrap();
                let xd = val(x).data();
                let gd = val(gain).data();
                let mut gx = vec![0.0; m * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..m {
                    let row = &xd[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let (mean, rstd) = kernels::row_stats(row);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = go[j] * gd[j];
                        gg[j] += go[j] * xhat[j];
                        gb[j] += go[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                for (p, g) in [(x, gx), (gain, gg), (bias, gb)] {
                    if nodes[p].requires_grad {
                        add_into(acc(grads, p, g.len()), &g);
                    }
                }
            }
            &Op::Gelu { a } => {
                if nodes[a].requires_grad {
                    let ad = val(a).data();
                    let g = acc(grads, a, gout.len());
                    for ((g, go), &x) in g.iter_mut().zip(gout).zip(ad) {
                        *g += go * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let table = *table;
                if nodes[table].requires_grad {
                    let (rows, d) = val(table).dims2().unwrap();
                    let g = acc(grads, table, rows * d);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).numel();
                    if nodes[p].requires_grad {
                        add_into(acc(grads, p, len), &gout[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            &Op::SliceRows { a, start } => {
                if nodes[a].requires_grad {
                    let (_, d) = val(a).dims2().unwrap();
                    let total = val(a).numel();
                    let g = acc(grads, a, total);
                    add_into(&mut g[start * d..start * d + gout.len()], gout);
                }
            }
            &Op::SliceCols { a, start } => {
                if nodes[a].requires_grad {
                    let (m, d) = val(a).dims2().unwrap();
                    let len = node.value.dims2().unwrap().1;
                    let g = acc(grads, a, m * d);
                    for r in 0..m {
                        add_into(
                            &mut g[r * d + start..r * d + start + len],
                            &gout[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).dims2().unwrap().1;
                    if nodes[p].requires_grad {
                        let g = acc(grads, p, m * w);
                        for r in 0..m {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &gout[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let a = *a;
                if nodes[a].requires_grad {
                    let (m, n) = node.value.dims2().unwrap();
                    let y = node.value.data();
                    let g = acc(grads, a, m * n);
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &gout[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..n {
                            if mask[r * n + j] {
                                g[r * n + j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let logits = *logits;
                if nodes[logits].requires_grad {
                    let (m, v) = val(logits).dims2().unwrap();
                    let scale = gout[0] / m as f64;
                    let g = acc(grads, logits, m * v);
                    for r in 0..m {
                        for j in 0..v {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            g[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                }
            }
            &Op::Sum { a } => {
                if nodes[a].requires_grad {
                    let n = val(a).numel();
                    let g = acc(grads, a, n);
                    for x in g.iter_mut() {
                        *x += gout[0];
                    }
                }
            }
            Op::Checkpoint(_) => unreachable!("checkpoints are dispatched by run_backward"),
        }
        Ok(())
    }

    fn backprop_checkpoint(
        &self,
        nodes: &[Node],
        rec: &CheckpointRecord,
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (sub, leaves, outs) = self.replay(&rec.inputs, &rec.arg_map, &rec.segment)?;
        if outs.len() != rec.outputs.len() {
            return Err(TensorError::NonPure {
                output: outs.len().min(rec.outputs.len()),
            });
        }
        for (j, (&o, &stored)) in outs.iter().zip(&rec.outputs).enumerate() {
            if !sub.value(o).bit_eq(&nodes[stored].value) {
                return Err(TensorError::NonPure { output: j });
            }
        }
        self.peak_retained.set(
            self.peak_retained
                .get()
                .max(self.retained.get() + sub.peak_retained_elements()),
        );

        // Start from the accumulators the plain tape would hold here.
        let mut sub_grads: Vec<Option<Vec<f64>>> = vec![None; sub.len()];
        for (&leaf, &input) in leaves.iter().zip(&rec.inputs) {
            sub_grads[leaf.id] = grads[input].take();
        }
        for (&o, &stored) in outs.iter().zip(&rec.outputs) {
            if let Some(g) = &grads[stored] {
                let slot = &mut sub_grads[o.id];
                match slot {
                    Some(existing) => add_into(existing, g),
                    None => *slot = Some(g.clone()),
                }
            }
        }
        let last = sub.len() - 1;
        sub.run_backward(&mut sub_grads, last)?;
        for (&leaf, &input) in leaves.iter().zip(&rec.inputs) {
            grads[input] = sub_grads[leaf.id].take();
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
