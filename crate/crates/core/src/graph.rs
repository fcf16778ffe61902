//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Values are computed eagerly when a node is recorded; the tape then supports
//! exactly one reverse sweep, seeded at any set of nodes. Seeding interior
//! nodes is what lets cached action-gradients be injected into a freshly
//! recorded policy graph.

use std::sync::atomic::{AtomicU32, Ordering};

use thiserror::Error;

/// `(rows, cols)` of a node value.
pub type Shape = (usize, usize);

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("node {index} does not belong to this tape")]
    ForeignNode { index: usize },
    #[error("tape has no recorded nodes to differentiate")]
    Unevaluated,
    #[error("tape was already swept backward; record a new tape")]
    AlreadySwept,
    #[error("seed for node {index} has {got} entries, node holds {expected}")]
    SeedShape {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value at node {index} ({op})")]
    NonFinite { index: usize, op: &'static str },
}

pub type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeRef {
    tape: u32,
    index: usize,
    shape: Shape,
}

impl NodeRef {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape.0
    }

    pub fn cols(&self) -> usize {
        self.shape.1
    }

    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce everything to a 1×1 scalar.
    All,
    /// Reduce across columns, one value per row (r×1).
    Rows,
    /// Reduce across rows, one value per column (1×c).
    Cols,
}

/// The primitive operations a tape can record.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    MatMul,
    Tanh,
    Atanh,
    Sin,
    Cos,
    Exp,
    Log,
    Square,
    Silu,
    Softplus,
    Clamp {
        lo: f64,
        hi: f64,
    },
    /// Per-row standardization `(x - mean) / sqrt(var + eps)` used by LayerNorm.
    Normalize {
        eps: f64,
    },
    Sum(Axis),
    Scale(f64),
    Shift(f64),
    /// Column-wise concatenation.
    Concat,
    /// Column range `[start, end)`.
    Slice {
        start: usize,
        end: usize,
    },
    /// Keeps rows where `keep[i]` holds and replaces the others with constants.
    SelectRows {
        keep: Vec<bool>,
        replacement: Vec<f64>,
    },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Tanh => "tanh",
            Primitive::Atanh => "atanh",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Square => "square",
            Primitive::Silu => "silu",
            Primitive::Softplus => "softplus",
            Primitive::Clamp { .. } => "clamp",
            Primitive::Normalize { .. } => "normalize",
            Primitive::Sum(_) => "sum",
            Primitive::Scale(_) => "scale",
            Primitive::Shift(_) => "shift",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::SelectRows { .. } => "select_rows",
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Prim(Primitive, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    /// Auxiliary forward data: per-row inverse std for `Normalize`.
    aux: Vec<f64>,
}

/// A recording of one computation.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    swept: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by a reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints {
    tape: u32,
    grads: Vec<Option<Vec<f64>>>,
    zeros: Vec<f64>,
}

impl Adjoints {
    /// Gradient of the seeded objective with respect to `node`. Nodes that
    /// the objective does not depend on report zeros.
    pub fn get(&self, node: NodeRef) -> &[f64] {
        assert_eq!(node.tape, self.tape, "adjoint lookup with a foreign node");
        match &self.grads[node.index] {
            Some(g) => g,
            None => &self.zeros[..node.len()],
        }
    }

    /// Concatenates the adjoints of `nodes` into a flat vector.
    pub fn flatten(&self, nodes: &[NodeRef]) -> Vec<f64> {
        let mut out = Vec::with_capacity(nodes.iter().map(NodeRef::len).sum());
        for n in nodes {
            out.extend_from_slice(self.get(*n));
        }
        out
    }
}

/// `C (+)= A·B` for row-major `C` with arbitrary strides on `A` and `B`,
/// given as `(data, row stride, column stride)`; dims are `(rows, inner, cols)`.
fn gemm(
    (n, k, m): (usize, usize, usize),
    (a, ars, acs): (&[f64], usize, usize),
    (b, brs, bcs): (&[f64], usize, usize),
    (c, crs): (&mut [f64], usize),
    accumulate: bool,
) {
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (n - 1) * ars + (k - 1) * acs);
    assert!(b.len() > (k - 1) * brs + (m - 1) * bcs);
    assert!(c.len() >= n * crs && crs >= m);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above keep every strided access in bounds and `c`
    // does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            ars as isize,
            acs as isize,
            b.as_ptr(),
            brs as isize,
            bcs as isize,
            beta,
            c.as_mut_ptr(),
            crs as isize,
            1,
        );
    }
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else if b == 1 {
        Some(a)
    } else {
        None
    }
}

/// Row and column strides of a possibly broadcast operand.
#[inline]
fn strides(shape: Shape) -> (usize, usize) {
    (
        if shape.0 == 1 { 0 } else { shape.1 },
        if shape.1 == 1 { 0 } else { 1 },
    )
}


fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether the single reverse sweep has been spent.
    pub fn is_swept(&self) -> bool {
        self.swept
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>, aux: Vec<f64>) -> NodeRef {
        debug_assert_eq!(value.len(), shape.0 * shape.1);
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            aux,
        });
        NodeRef {
            tape: self.id,
            index,
            shape,
        }
    }

    fn check(&self, node: NodeRef) -> Result<()> {
        if node.tape != self.id || node.index >= self.nodes.len() {
            return Err(GraphError::ForeignNode { index: node.index });
        }
        Ok(())
    }

    /// Differentiable input.
    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> NodeRef {
        assert_eq!(value.len(), shape.0 * shape.1, "leaf value/shape mismatch");
        self.push(Op::Leaf, shape, value, Vec::new())
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, shape: Shape, value: Vec<f64>) -> NodeRef {
        assert_eq!(
            value.len(),
            shape.0 * shape.1,
            "constant value/shape mismatch"
        );
        self.push(Op::Constant, shape, value, Vec::new())
    }

    pub fn scalar(&mut self, value: f64) -> NodeRef {
        self.leaf((1, 1), vec![value])
    }

    pub fn value(&self, node: NodeRef) -> &[f64] {
        assert_eq!(node.tape, self.id, "value lookup with a foreign node");
        &self.nodes[node.index].value
    }

    /// First node (in recording order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.iter().all(|v| v.is_finite()) {
                None
            } else {
                let op = match &n.op {
                    Op::Leaf => "leaf",
                    Op::Constant => "constant",
                    Op::Prim(p, _) => p.name(),
                };
                Some((i, op))
            }
        })
    }

    /// Records `op` applied to `parents`, computing its value immediately.
    pub fn record(&mut self, op: Primitive, parents: &[NodeRef]) -> Result<NodeRef> {
        for p in parents {
            self.check(*p)?;
        }
        let name = op.name();
        let arity = match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
            Primitive::Concat => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if parents.len() != n {
                return Err(GraphError::InvalidArgument {
                    op: name,
                    reason: format!("expected {n} parents, got {}", parents.len()),
                });
            }
        } else if parents.is_empty() {
            return Err(GraphError::InvalidArgument {
                op: name,
                reason: "needs at least one parent".into(),
            });
        }
        let idx: Vec<usize> = parents.iter().map(|p| p.index).collect();
        let (shape, value, aux) = match &op {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (a, b) = (&self.nodes[idx[0]], &self.nodes[idx[1]]);
                let mismatch = || GraphError::ShapeMismatch {
                    op: name,
                    lhs: a.shape,
                    rhs: b.shape,
                };
                let r = broadcast_dim(a.shape.0, b.shape.0).ok_or_else(mismatch)?;
                let c = broadcast_dim(a.shape.1, b.shape.1).ok_or_else(mismatch)?;
                let mut out = Vec::with_capacity(r * c);
                if a.shape == b.shape {
                    let it = a.value.iter().zip(&b.value);
                    match op {
                        Primitive::Add => out.extend(it.map(|(x, y)| x + y)),
                        Primitive::Sub => out.extend(it.map(|(x, y)| x - y)),
                        _ => out.extend(it.map(|(x, y)| x * y)),
                    }
                } else {
                    let (ars, acs) = strides(a.shape);
                    let (brs, bcs) = strides(b.shape);
                    let f = match op {
                        Primitive::Add => |x: f64, y: f64| x + y,
                        Primitive::Sub => |x: f64, y: f64| x - y,
                        _ => |x: f64, y: f64| x * y,
                    };
                    for i in 0..r {
                        for j in 0..c {
                            out.push(f(a.value[i * ars + j * acs], b.value[i * brs + j * bcs]));
                        }
                    }
                }
                ((r, c), out, Vec::new())
            }
            Primitive::MatMul => {
                let (a, b) = (&self.nodes[idx[0]], &self.nodes[idx[1]]);
                if a.shape.1 != b.shape.0 {
                    return Err(GraphError::ShapeMismatch {
                        op: name,
                        lhs: a.shape,
                        rhs: b.shape,
                    });
                }
                let (n, k, m) = (a.shape.0, a.shape.1, b.shape.1);
                let mut out = vec![0.0; n * m];
                gemm(
                    (n, k, m),
                    (&a.value, k, 1),
                    (&b.value, m, 1),
                    (&mut out, m),
                    false,
                );
                ((n, m), out, Vec::new())
            }
            Primitive::Concat => {
                let rows = self.nodes[idx[0]].shape.0;
                for &i in &idx {
                    if self.nodes[i].shape.0 != rows {
                        return Err(GraphError::ShapeMismatch {
                            op: name,
                            lhs: self.nodes[idx[0]].shape,
                            rhs: self.nodes[i].shape,
                        });
                    }
                }
                let cols: usize = idx.iter().map(|&i| self.nodes[i].shape.1).sum();
                let mut out = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &i in &idx {
                        let n = &self.nodes[i];
                        out.extend_from_slice(&n.value[r * n.shape.1..(r + 1) * n.shape.1]);
                    }
                }
                ((rows, cols), out, Vec::new())
            }
            unary => {
                let a = &self.nodes[idx[0]];
                let (r, c) = a.shape;
                let map = |f: &dyn Fn(f64) -> f64| a.value.iter().map(|&x| f(x)).collect();
                match unary {
                    Primitive::Tanh => (a.shape, map(&f64::tanh), Vec::new()),
                    Primitive::Atanh => {
                        if a.value.iter().any(|x| x.abs() >= 1.0) {
                            return Err(GraphError::InvalidArgument {
                                op: name,
                                reason: "argument outside (-1, 1)".into(),
                            });
                        }
                        (a.shape, map(&f64::atanh), Vec::new())
                    }
                    Primitive::Sin => (a.shape, map(&f64::sin), Vec::new()),
                    Primitive::Cos => (a.shape, map(&f64::cos), Vec::new()),
                    Primitive::Exp => (a.shape, map(&f64::exp), Vec::new()),
                    Primitive::Log => (a.shape, map(&f64::ln), Vec::new()),
                    Primitive::Square => (a.shape, map(&|x| x * x), Vec::new()),
                    Primitive::Silu => (a.shape, map(&silu), Vec::new()),
                    Primitive::Softplus => (a.shape, map(&softplus), Vec::new()),
                    Primitive::Clamp { lo, hi } => {
                        if lo > hi {
                            return Err(GraphError::InvalidArgument {
                                op: name,
                                reason: format!("empty interval [{lo}, {hi}]"),
                            });
                        }
                        (a.shape, map(&|x| x.clamp(*lo, *hi)), Vec::new())
                    }
                    Primitive::Scale(k) => (a.shape, map(&|x| k * x), Vec::new()),
                    Primitive::Shift(k) => (a.shape, map(&|x| x + k), Vec::new()),
                    Primitive::Normalize { eps } => {
                        let mut out = vec![0.0; r * c];
                        let mut inv = vec![0.0; r];
                        for i in 0..r {
                            let row = &a.value[i * c..(i + 1) * c];
                            let mean = row.iter().sum::<f64>() / c as f64;
                            let var =
                                row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
                            let s = 1.0 / (var + eps).sqrt();
                            inv[i] = s;
                            for j in 0..c {
                                out[i * c + j] = (row[j] - mean) * s;
                            }
                        }
                        (a.shape, out, inv)
                    }
                    Primitive::Sum(axis) => match axis {
                        Axis::All => ((1, 1), vec![a.value.iter().sum()], Vec::new()),
                        Axis::Rows => (
                            (r, 1),
                            a.value
                                .chunks(c.max(1))
                                .map(|row| row.iter().sum())
                                .collect(),
                            Vec::new(),
                        ),
                        Axis::Cols => {
                            let mut out = vec![0.0; c];
                            for row in a.value.chunks(c.max(1)) {
                                for (o, v) in out.iter_mut().zip(row) {
                                    *o += v;
                                }
                            }
                            ((1, c), out, Vec::new())
                        }
                    },
                    Primitive::Slice { start, end } => {
                        if start >= end || *end > c {
                            return Err(GraphError::InvalidArgument {
                                op: name,
                                reason: format!(
                                    "columns {start}..{end} out of range for {:?}",
                                    a.shape
                                ),
                            });
                        }
                        let w = end - start;
                        let mut out = Vec::with_capacity(r * w);
                        for i in 0..r {
                            out.extend_from_slice(&a.value[i * c + start..i * c + end]);
                        }
                        ((r, w), out, Vec::new())
                    }
                    Primitive::SelectRows { keep, replacement } => {
                        if keep.len() != r || replacement.len() != r * c {
                            return Err(GraphError::InvalidArgument {
                                op: name,
                                reason: format!(
                                    "mask of {} rows / replacement of {} values for {:?}",
                                    keep.len(),
                                    replacement.len(),
                                    a.shape
                                ),
                            });
                        }
                        let mut out = a.value.clone();
                        for (i, k) in keep.iter().enumerate() {
                            if !k {
                                out[i * c..(i + 1) * c]
                                    .copy_from_slice(&replacement[i * c..(i + 1) * c]);
                            }
                        }
                        (a.shape, out, Vec::new())
                    }
                    _ => unreachable!("binary primitives handled above"),
                }
            }
        };
        Ok(self.push(Op::Prim(op, idx), shape, value, aux))
    }

    /// Runs the reverse sweep. Each seed contributes `Σ seed·value` to the
    /// scalar objective being differentiated; seeds on the same node add up.
    pub fn backward(&mut self, seeds: &[(NodeRef, Vec<f64>)]) -> Result<Adjoints> {
        if self.nodes.is_empty() {
            return Err(GraphError::Unevaluated);
        }
        if self.swept {
            return Err(GraphError::AlreadySwept);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut highest = 0;
        for (node, seed) in seeds {
            self.check(*node)?;
            if seed.len() != node.len() {
                return Err(GraphError::SeedShape {
                    index: node.index,
                    expected: node.len(),
                    got: seed.len(),
                });
            }
            let g = grads[node.index].get_or_insert_with(|| vec![0.0; seed.len()]);
            for (a, s) in g.iter_mut().zip(seed) {
                *a += s;
            }
            highest = highest.max(node.index);
        }
        self.swept = true;

        for i in (0..=highest).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Prim(op, parents) = &node.op {
                self.propagate(op, parents, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Constant) {
                grads[i] = None;
            }
        }
        let widest = self.nodes.iter().map(|n| n.value.len()).max().unwrap_or(0);
        Ok(Adjoints {
            tape: self.id,
            grads,
            zeros: vec![0.0; widest],
        })
    }

    fn propagate(
        &self,
        op: &Primitive,
        parents: &[usize],
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let nodes = &self.nodes;
        let wants = |p: usize| !matches!(nodes[p].op, Op::Constant);
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if wants(p) {
                let buf = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].value.len()]);
                f(buf);
            }
        };
        let (r, c) = node.shape;
        match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (pa, pb) = (parents[0], parents[1]);
                let (sa, sb) = (nodes[pa].shape, nodes[pb].shape);
                let (va, vb) = (&nodes[pa].value, &nodes[pb].value);
                let (ars, acs) = strides(sa);
                let (brs, bcs) = strides(sb);
                let same = sa == (r, c) && sb == (r, c);
                acc(pa, &mut |buf| match op {
                    Primitive::Mul if same => {
                        for ((o, x), y) in buf.iter_mut().zip(g).zip(vb) {
                            *o += x * y;
                        }
                    }
                    Primitive::Mul => {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * ars + j * acs] += g[i * c + j] * vb[i * brs + j * bcs];
                            }
                        }
                    }
                    _ if sa == (r, c) => {
                        for (o, x) in buf.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                    _ => {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * ars + j * acs] += g[i * c + j];
                            }
                        }
                    }
                });
                acc(pb, &mut |buf| {
                    let sign = if matches!(op, Primitive::Sub) { -1.0 } else { 1.0 };
                    match op {
                        Primitive::Mul if same => {
                            for ((o, x), y) in buf.iter_mut().zip(g).zip(va) {
                                *o += x * y;
                            }
                        }
                        Primitive::Mul => {
                            for i in 0..r {
                                for j in 0..c {
                                    buf[i * brs + j * bcs] += g[i * c + j] * va[i * ars + j * acs];
                                }
                            }
                        }
                        _ if sb == (r, c) => {
                            for (o, x) in buf.iter_mut().zip(g) {
                                *o += sign * x;
                            }
                        }
                        _ => {
                            for i in 0..r {
                                for j in 0..c {
                                    buf[i * brs + j * bcs] += sign * g[i * c + j];
                                }
                            }
                        }
                    }
                });
            }
            Primitive::MatMul => {
                let (pa, pb) = (parents[0], parents[1]);
                let (n, k) = nodes[pa].shape;
                let m = nodes[pb].shape.1;
                let (va, vb) = (&nodes[pa].value, &nodes[pb].value);
                // dA = G·Bᵀ
                acc(pa, &mut |buf| gemm((n, m, k), (g, m, 1), (vb, 1, m), (buf, k), true));
                // dB = Aᵀ·G
                acc(pb, &mut |buf| gemm((k, n, m), (va, 1, k), (g, m, 1), (buf, m), true));
            }
            Primitive::Concat => {
                let mut offset = 0;
                for &p in parents {
                    let w = nodes[p].shape.1;
                    acc(p, &mut |buf| {
                        for i in 0..r {
                            for j in 0..w {
                                buf[i * w + j] += g[i * c + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Primitive::Slice { start, .. } => {
                let p = parents[0];
                let pc = nodes[p].shape.1;
                acc(p, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * pc + start + j] += g[i * c + j];
                        }
                    }
                });
            }
            Primitive::SelectRows { keep, .. } => {
                acc(parents[0], &mut |buf| {
                    for (i, k) in keep.iter().enumerate() {
                        if *k {
                            for j in 0..c {
                                buf[i * c + j] += g[i * c + j];
                            }
                        }
                    }
                });
            }
            Primitive::Sum(axis) => {
                let p = parents[0];
                let pc = nodes[p].shape.1;
                acc(p, &mut |buf| {
                    for (k, b) in buf.iter_mut().enumerate() {
                        *b += match axis {
                            Axis::All => g[0],
                            Axis::Rows => g[k / pc],
                            Axis::Cols => g[k % pc],
                        };
                    }
                });
            }
            Primitive::Normalize { .. } => {
                let p = parents[0];
                let y = &node.value;
                let inv = &node.aux;
                acc(p, &mut |buf| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            buf[i * c + j] += inv[i] * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                });
            }
            unary => {
                let p = parents[0];
                let x = &nodes[p].value;
                let y = &node.value;
                acc(p, &mut |buf| {
                    for k in 0..buf.len() {
                        let d = match unary {
                            Primitive::Tanh => 1.0 - y[k] * y[k],
                            Primitive::Atanh => 1.0 / (1.0 - x[k] * x[k]),
                            Primitive::Sin => x[k].cos(),
                            Primitive::Cos => -x[k].sin(),
                            Primitive::Exp => y[k],
                            Primitive::Log => 1.0 / x[k],
                            Primitive::Square => 2.0 * x[k],
                            Primitive::Silu => {
                                let s = sigmoid(x[k]);
                                s * (1.0 + x[k] * (1.0 - s))
                            }
                            Primitive::Softplus => sigmoid(x[k]),
                            Primitive::Clamp { lo, hi } => {
                                if x[k] >= *lo && x[k] <= *hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Primitive::Scale(s) => *s,
                            Primitive::Shift(_) => 1.0,
                            _ => unreachable!(),
                        };
                        buf[k] += g[k] * d;
                    }
                });
            }
        }
    }

    // Convenience wrappers used throughout the crate.

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Add, &[a, b])
    }
    pub fn sub(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Mul, &[a, b])
    }
    pub fn matmul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::MatMul, &[a, b])
    }
    pub fn tanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Tanh, &[a])
    }
    pub fn atanh(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Atanh, &[a])
    }
    pub fn sin(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Sin, &[a])
    }
    pub fn cos(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Cos, &[a])
    }
    pub fn exp(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Exp, &[a])
    }
    pub fn log(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Log, &[a])
    }
    pub fn square(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Square, &[a])
    }
    pub fn silu(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Silu, &[a])
    }
    pub fn softplus(&mut self, a: NodeRef) -> Result<NodeRef> {
        self.record(Primitive::Softplus, &[a])
    }
    pub fn clamp(&mut self, a: NodeRef, lo: f64, hi: f64) -> Result<NodeRef> {
        self.record(Primitive::Clamp { lo, hi }, &[a])
    }
    pub fn normalize(&mut self, a: NodeRef, eps: f64) -> Result<NodeRef> {
        self.record(Primitive::Normalize { eps }, &[a])
    }
    pub fn sum(&mut self, a: NodeRef, axis: Axis) -> Result<NodeRef> {
        self.record(Primitive::Sum(axis), &[a])
    }
    pub fn scale(&mut self, a: NodeRef, k: f64) -> Result<NodeRef> {
        self.record(Primitive::Scale(k), &[a])
    }
    pub fn shift(&mut self, a: NodeRef, k: f64) -> Result<NodeRef> {
        self.record(Primitive::Shift(k), &[a])
    }
    pub fn concat(&mut self, parts: &[NodeRef]) -> Result<NodeRef> {
        self.record(Primitive::Concat, parts)
    }
    pub fn slice(&mut self, a: NodeRef, start: usize, end: usize) -> Result<NodeRef> {
        self.record(Primitive::Slice { start, end }, &[a])
    }
    pub fn select_rows(
        &mut self,
        a: NodeRef,
        keep: Vec<bool>,
        replacement: Vec<f64>,
    ) -> Result<NodeRef> {
        self.record(Primitive::SelectRows { keep, replacement }, &[a])
    }

    /// Mean over all entries as a 1×1 node.
    pub fn mean(&mut self, a: NodeRef) -> Result<NodeRef> {
        let n = a.len().max(1) as f64;
        let s = self.sum(a, Axis::All)?;
        self.scale(s, 1.0 / n)
    }
}

/// Outcome of comparing reverse-mode gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub autodiff: Vec<f64>,
    pub finite_diff: Vec<f64>,
}

/// Step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-6;

/// Compares reverse-mode gradients of a scalar graph against central
/// differences with step [`FD_STEP`].
///
/// `build` records the function on the given tape from leaves created for
/// `inputs` and returns the scalar output. The reported error is
/// `max |ad - fd| / max(1, |fd|)` over all input entries.
pub fn grad_check<F>(inputs: &[(Shape, Vec<f64>)], build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[NodeRef]) -> Result<NodeRef>,
{
    let eval = |vals: &[(Shape, Vec<f64>)]| -> Result<(Tape, Vec<NodeRef>, NodeRef)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeRef> = vals.iter().map(|(s, v)| tape.leaf(*s, v.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        if out.len() != 1 {
            return Err(GraphError::InvalidArgument {
                op: "grad_check",
                reason: format!(
                    "function output has shape {:?}, expected scalar",
                    out.shape()
                ),
            });
        }
        if let Some((index, op)) = tape.first_non_finite() {
            return Err(GraphError::NonFinite { index, op });
        }
        Ok((tape, leaves, out))
    };

    let (mut tape, leaves, out) = eval(inputs)?;
    let adj = tape.backward(&[(out, vec![1.0])])?;
    let autodiff = adj.flatten(&leaves);

    let mut finite_diff = Vec::with_capacity(autodiff.len());
    let mut work: Vec<(Shape, Vec<f64>)> = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].1.len() {
            let x0 = inputs[i].1[j];
            work[i].1[j] = x0 + FD_STEP;
            let (tp, _, op) = eval(&work)?;
            let fp = tp.value(op)[0];
            work[i].1[j] = x0 - FD_STEP;
            let (tm, _, om) = eval(&work)?;
            let fm = tm.value(om)[0];
            work[i].1[j] = x0;
            finite_diff.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    let max_rel_error = autodiff
        .iter()
        .zip(&finite_diff)
        .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        autodiff,
        finite_diff,
    })
}
