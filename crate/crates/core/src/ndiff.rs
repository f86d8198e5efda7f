//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built define-by-run: every primitive evaluates eagerly and
//! appends a node to the tape. Calling [`Graph::backward`] on a scalar node
//! walks the tape in reverse insertion order, which is a valid topological
//! order because a node's inputs always precede it.
//!
//! Arrays are rank two. Vectors are represented as `1 × n` rows or `n × 1`
//! columns and scalars as `1 × 1`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array2, Axis as NdAxis, Zip};
use thiserror::Error;

pub type Matrix = Array2<f64>;

/// Epsilon inside the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdiffError {
    #[error("shape mismatch in {primitive}: {left:?} vs {right:?}")]
    ShapeMismatch {
        primitive: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("non-finite value produced by node {node} ({primitive})")]
    NonFinite { node: usize, primitive: &'static str },
    #[error("gradient target must be scalar, node {node} has shape {shape:?}")]
    NonScalarTarget { node: usize, shape: (usize, usize) },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("unbound input `{0}`")]
    UnboundInput(String),
    #[error("invalid argument to {primitive}: {reason}")]
    InvalidArgument {
        primitive: &'static str,
        reason: String,
    },
}

pub type Result<T> = std::result::Result<T, NdiffError>;

/// Handle to a node of a specific [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

impl Axis {
    fn nd(self) -> NdAxis {
        match self {
            Axis::Rows => NdAxis(0),
            Axis::Cols => NdAxis(1),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Concat(Vec<usize>, Axis),
    Slice {
        input: usize,
        axis: Axis,
        start: usize,
    },
    Gather {
        input: usize,
        rows: Vec<usize>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Mean(usize, Axis),
    Sum(usize),
    Softmax(usize),
    Log(usize),
    Exp(usize),
    Pow(usize, f64),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Cosine {
        a: usize,
        b: usize,
        a_hat: Matrix,
        b_hat: Matrix,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    StopGradient,
    GumbelNoise(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "multiply",
            Op::Scale(..) => "scale",
            Op::Transpose(..) => "transpose",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Embedding { .. } => "embedding",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Pow(..) => "power",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Cosine { .. } => "cosine",
            Op::StopGradient => "stop_gradient",
            Op::GumbelNoise(..) => "gumbel_noise",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Mean(a, _)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Pow(a, _)
            | Op::Gelu(a)
            | Op::GumbelNoise(a) => vec![*a],
            Op::Concat(v, _) => v.clone(),
            Op::Slice { input, .. } | Op::Gather { input, .. } => vec![*input],
            Op::Embedding { table, .. } => vec![*table],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Cosine { a, b, .. } => vec![*a, *b],
        }
    }
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Inspection record for one tape entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRecord {
    pub primitive: &'static str,
    pub inputs: Vec<usize>,
    pub shape: (usize, usize),
}

/// A define-by-run computation graph. Confined to one thread.
pub struct Graph {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    names: RefCell<HashMap<String, usize>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape(m: &Matrix) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn broadcast_shape(
    primitive: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(NdiffError::ShapeMismatch {
            primitive,
            left: a,
            right: b,
        }),
    }
}

/// Sum `grad` down to `target` shape, undoing broadcasting.
fn unbroadcast(grad: Matrix, target: (usize, usize)) -> Matrix {
    let mut g = grad;
    if target.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
    }
    if target.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(NdAxis(1)).insert_axis(NdAxis(1));
    }
    g
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = K * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn row_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            names: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.len() {
            return Err(NdiffError::UnknownNode(v.index));
        }
        Ok(v.index)
    }

    fn push(&self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Matrix>, op: Op, requires_grad: bool) -> Result<Var> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        if !matches!(op, Op::Leaf | Op::StopGradient) && value.iter().any(|v| !v.is_finite()) {
            return Err(NdiffError::NonFinite {
                node: index,
                primitive: op.name(),
            });
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index,
        })
    }

    fn val(&self, i: usize) -> Arc<Matrix> {
        self.nodes.borrow()[i].value.clone()
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes.borrow()[i].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.param_arc(Arc::new(value))
    }

    pub fn param_arc(&self, value: Arc<Matrix>) -> Var {
        self.push_arc(value, Op::Leaf, true)
            .expect("leaf insertion cannot fail")
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Matrix) -> Var {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Matrix>) -> Var {
        self.push_arc(value, Op::Leaf, false)
            .expect("leaf insertion cannot fail")
    }

    pub fn scalar(&self, v: f64) -> Var {
        self.constant(Matrix::from_elem((1, 1), v))
    }

    /// Named trainable input, retrievable with [`Graph::input_named`].
    pub fn input(&self, name: &str, value: Matrix) -> Var {
        let v = self.param(value);
        self.names.borrow_mut().insert(name.to_string(), v.index);
        v
    }

    pub fn input_named(&self, name: &str) -> Result<Var> {
        self.names
            .borrow()
            .get(name)
            .map(|&index| Var {
                graph: self.id,
                index,
            })
            .ok_or_else(|| NdiffError::UnboundInput(name.to_string()))
    }

    pub fn value(&self, v: Var) -> Arc<Matrix> {
        let i = self.check(v).expect("var from another graph");
        self.val(i)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.value(v))
    }

    /// Scalar value of a `1 × 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v.index)
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .borrow()
            .iter()
            .map(|n| NodeRecord {
                primitive: n.op.name(),
                inputs: n.op.inputs(),
                shape: shape(&n.value),
            })
            .collect()
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        if va.ncols() != vb.nrows() {
            return Err(NdiffError::ShapeMismatch {
                primitive: "matmul",
                left: shape(&va),
                right: shape(&vb),
            });
        }
        let out = va.dot(&*vb);
        self.push(out, Op::MatMul(ia, ib), self.rg(ia) || self.rg(ib))
    }

    /// Elementwise sum with row/column/scalar broadcasting.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let sh = broadcast_shape("add", shape(&va), shape(&vb))?;
        let mut out = va.broadcast(sh).expect("checked").to_owned();
        out += &vb.broadcast(sh).expect("checked");
        self.push(out, Op::Add(ia, ib), self.rg(ia) || self.rg(ib))
    }

    /// Elementwise product with row/column/scalar broadcasting.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        let sh = broadcast_shape("multiply", shape(&va), shape(&vb))?;
        let mut out = va.broadcast(sh).expect("checked").to_owned();
        out *= &vb.broadcast(sh).expect("checked");
        self.push(out, Op::Mul(ia, ib), self.rg(ia) || self.rg(ib))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).mapv(|v| v * c);
        self.push(out, Op::Scale(ia, c), self.rg(ia))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).t().to_owned();
        self.push(out, Op::Transpose(ia), self.rg(ia))
    }

    pub fn concat(&self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(NdiffError::InvalidArgument {
                primitive: "concat",
                reason: "no inputs".into(),
            });
        }
        let idx = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let vals: Vec<Arc<Matrix>> = idx.iter().map(|&i| self.val(i)).collect();
        let first = shape(&vals[0]);
        for v in &vals[1..] {
            let ok = match axis {
                Axis::Rows => v.ncols() == first.1,
                Axis::Cols => v.nrows() == first.0,
            };
            if !ok {
                return Err(NdiffError::ShapeMismatch {
                    primitive: "concat",
                    left: first,
                    right: shape(v),
                });
            }
        }
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(axis.nd(), &views).expect("checked shapes");
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, Op::Concat(idx, axis), rg)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.val(ia);
        let extent = match axis {
            Axis::Rows => va.nrows(),
            Axis::Cols => va.ncols(),
        };
        if start + len > extent {
            return Err(NdiffError::InvalidArgument {
                primitive: "slice",
                reason: format!("range {start}..{} exceeds extent {extent}", start + len),
            });
        }
        let out = match axis {
            Axis::Rows => va.slice(s![start..start + len, ..]).to_owned(),
            Axis::Cols => va.slice(s![.., start..start + len]).to_owned(),
        };
        self.push(out, Op::Slice { input: ia, axis, start }, self.rg(ia))
    }

    /// Rows of `a` at `rows`, in the given order.
    pub fn gather_rows(&self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.val(ia);
        if let Some(&bad) = rows.iter().find(|&&r| r >= va.nrows()) {
            return Err(NdiffError::InvalidArgument {
                primitive: "gather",
                reason: format!("row {bad} out of range for {} rows", va.nrows()),
            });
        }
        let out = va.select(NdAxis(0), rows);
        self.push(
            out,
            Op::Gather {
                input: ia,
                rows: rows.to_vec(),
            },
            self.rg(ia),
        )
    }

    /// Embedding lookup: rows of `table` at token ids.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = self.val(it);
        if let Some(&bad) = ids.iter().find(|&&r| r >= vt.nrows()) {
            return Err(NdiffError::InvalidArgument {
                primitive: "embedding",
                reason: format!("id {bad} out of range for vocabulary {}", vt.nrows()),
            });
        }
        let out = vt.select(NdAxis(0), ids);
        self.push(
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            self.rg(it),
        )
    }

    /// Mean along `axis`, keeping the reduced dimension with extent 1.
    pub fn mean(&self, a: Var, axis: Axis) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.val(ia);
        let extent = match axis {
            Axis::Rows => va.nrows(),
            Axis::Cols => va.ncols(),
        };
        if extent == 0 {
            return Err(NdiffError::InvalidArgument {
                primitive: "mean",
                reason: "empty axis".into(),
            });
        }
        let out = va
            .mean_axis(axis.nd())
            .expect("nonempty")
            .insert_axis(axis.nd());
        self.push(out, Op::Mean(ia, axis), self.rg(ia))
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = Matrix::from_elem((1, 1), self.val(ia).sum());
        self.push(out, Op::Sum(ia), self.rg(ia))
    }

    /// Softmax over each row.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = row_softmax(&self.val(ia));
        self.push(out, Op::Softmax(ia), self.rg(ia))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).mapv(f64::ln);
        self.push(out, Op::Log(ia), self.rg(ia))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).mapv(f64::exp);
        self.push(out, Op::Exp(ia), self.rg(ia))
    }

    pub fn pow(&self, a: Var, p: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).mapv(|v| v.powf(p));
        self.push(out, Op::Pow(ia, p), self.rg(ia))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (both `1 × C`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let (vx, vg, vb) = (self.val(ix), self.val(ig), self.val(ib));
        let c = vx.ncols();
        for v in [&vg, &vb] {
            if shape(v) != (1, c) {
                return Err(NdiffError::ShapeMismatch {
                    primitive: "layer_norm",
                    left: shape(&vx),
                    right: shape(v),
                });
            }
        }
        let mut xhat = (*vx).clone();
        let mut inv_std = Vec::with_capacity(vx.nrows());
        for mut row in xhat.rows_mut() {
            let mu = row.sum() / c as f64;
            row.mapv_inplace(|v| v - mu);
            let var = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let mut out = &xhat * &*vg;
        out += &*vb;
        let rg = self.rg(ix) || self.rg(ig) || self.rg(ib);
        self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val(ia).mapv(|v| gelu_parts(v).0);
        self.push(out, Op::Gelu(ia), self.rg(ia))
    }

    /// Mean over rows of `-log softmax(logits)[target]`. Returns `1 × 1`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = self.val(il);
        if vl.nrows() != targets.len() || vl.nrows() == 0 {
            return Err(NdiffError::ShapeMismatch {
                primitive: "cross_entropy",
                left: shape(&vl),
                right: (targets.len(), 1),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vl.ncols()) {
            return Err(NdiffError::InvalidArgument {
                primitive: "cross_entropy",
                reason: format!("target {bad} out of range"),
            });
        }
        let probs = row_softmax(&vl);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            Matrix::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
            },
            self.rg(il),
        )
    }

    /// Pairwise cosine similarity between the rows of `a` (`m × d`) and `b`
    /// (`n × d`). Zero-norm rows have similarity 0 with everything.
    pub fn cosine(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (self.val(ia), self.val(ib));
        if va.ncols() != vb.ncols() {
            return Err(NdiffError::ShapeMismatch {
                primitive: "cosine",
                left: shape(&va),
                right: shape(&vb),
            });
        }
        let normalize = |m: &Matrix| {
            let mut hat = m.clone();
            let mut norms = Vec::with_capacity(m.nrows());
            for mut row in hat.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row.mapv_inplace(|v| v / n);
                } else {
                    row.fill(0.0);
                }
                norms.push(n);
            }
            (hat, norms)
        };
        let (a_hat, a_norm) = normalize(&va);
        let (b_hat, b_norm) = normalize(&vb);
        let out = a_hat.dot(&b_hat.t());
        let rg = self.rg(ia) || self.rg(ib);
        self.push(
            out,
            Op::Cosine {
                a: ia,
                b: ib,
                a_hat,
                b_hat,
                a_norm,
                b_norm,
            },
            rg,
        )
    }

    /// Identity in value, zero in gradient.
    pub fn stop_gradient(&self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.val(ia);
        self.push_arc(v, Op::StopGradient, false)
    }

    /// `a + noise` where the noise is a non-differentiable source.
    pub fn gumbel_noise(&self, a: Var, noise: &Matrix) -> Result<Var> {
        let ia = self.check(a)?;
        let va = self.val(ia);
        if shape(&va) != shape(noise) {
            return Err(NdiffError::ShapeMismatch {
                primitive: "gumbel_noise",
                left: shape(&va),
                right: shape(noise),
            });
        }
        let out = &*va + noise;
        self.push(out, Op::GumbelNoise(ia), self.rg(ia))
    }

    /// Gradient of a scalar node with respect to `wrt`. Nodes not on any path
    /// to `output` receive exact zeros.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Result<Vec<Matrix>> {
        for &w in wrt {
            self.check(w)?;
        }
        let grads = self.backward(output)?;
        Ok(wrt.iter().map(|&w| grads.get(w)).collect())
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let nodes = self.nodes.borrow();
        let sh = shape(&nodes[out].value);
        if sh != (1, 1) {
            return Err(NdiffError::NonScalarTarget {
                node: out,
                shape: sh,
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[out] = Some(Matrix::ones((1, 1)));

        fn acc(slot: &mut Option<Matrix>, g: Matrix) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for i in (0..=out).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Leaf | Op::StopGradient => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if wants(*a) {
                        let ga = g.dot(&nodes[*b].value.t());
                        acc(&mut grads[*a], ga);
                    }
                    if wants(*b) {
                        let gb = nodes[*a].value.t().dot(&g);
                        acc(&mut grads[*b], gb);
                    }
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        acc(&mut grads[*a], unbroadcast(g.clone(), shape(&nodes[*a].value)));
                    }
                    if wants(*b) {
                        acc(&mut grads[*b], unbroadcast(g, shape(&nodes[*b].value)));
                    }
                }
                Op::Mul(a, b) => {
                    let sh = shape(&g);
                    if wants(*a) {
                        let mut ga = g.clone();
                        ga *= &nodes[*b].value.broadcast(sh).expect("forward shape");
                        acc(&mut grads[*a], unbroadcast(ga, shape(&nodes[*a].value)));
                    }
                    if wants(*b) {
                        let mut gb = g;
                        gb *= &nodes[*a].value.broadcast(sh).expect("forward shape");
                        acc(&mut grads[*b], unbroadcast(gb, shape(&nodes[*b].value)));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    acc(&mut grads[*a], g.mapv(|v| v * c));
                }
                Op::Transpose(a) => {
                    acc(&mut grads[*a], g.t().to_owned());
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let psh = shape(&nodes[p].value);
                        let (len, piece) = match axis {
                            Axis::Rows => (psh.0, g.slice(s![offset..offset + psh.0, ..])),
                            Axis::Cols => (psh.1, g.slice(s![.., offset..offset + psh.1])),
                        };
                        if wants(p) {
                            acc(&mut grads[p], piece.to_owned());
                        }
                        offset += len;
                    }
                }
                Op::Slice { input, axis, start } => {
                    let ish = shape(&nodes[*input].value);
                    let mut gi = Matrix::zeros(ish);
                    match axis {
                        Axis::Rows => gi
                            .slice_mut(s![*start..*start + g.nrows(), ..])
                            .assign(&g),
                        Axis::Cols => gi
                            .slice_mut(s![.., *start..*start + g.ncols()])
                            .assign(&g),
                    }
                    acc(&mut grads[*input], gi);
                }
                Op::Gather { input: src, rows: idx } | Op::Embedding { table: src, ids: idx } => {
                    let ish = shape(&nodes[*src].value);
                    let mut gi = Matrix::zeros(ish);
                    for (r, &row) in idx.iter().enumerate() {
                        let mut dst = gi.row_mut(row);
                        dst += &g.row(r);
                    }
                    acc(&mut grads[*src], gi);
                }
                Op::Mean(a, axis) => {
                    let ish = shape(&nodes[*a].value);
                    let n = match axis {
                        Axis::Rows => ish.0,
                        Axis::Cols => ish.1,
                    } as f64;
                    let gi = g.broadcast(ish).expect("keepdims").mapv(|v| v / n);
                    acc(&mut grads[*a], gi);
                }
                Op::Sum(a) => {
                    let ish = shape(&nodes[*a].value);
                    acc(&mut grads[*a], Matrix::from_elem(ish, g[[0, 0]]));
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut gi = g;
                    for (mut grow, yrow) in gi.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gv, &yv| *gv = yv * (*gv - dot));
                    }
                    acc(&mut grads[*a], gi);
                }
                Op::Log(a) => {
                    let mut gi = g;
                    gi /= &*nodes[*a].value;
                    acc(&mut grads[*a], gi);
                }
                Op::Exp(a) => {
                    let mut gi = g;
                    gi *= &*node.value;
                    acc(&mut grads[*a], gi);
                }
                Op::Pow(a, p) => {
                    let p = *p;
                    let mut gi = g;
                    Zip::from(&mut gi)
                        .and(&*nodes[*a].value)
                        .for_each(|gv, &x| *gv *= p * x.powf(p - 1.0));
                    acc(&mut grads[*a], gi);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if wants(*gamma) {
                        let gg = (&g * xhat).sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
                        acc(&mut grads[*gamma], gg);
                    }
                    if wants(*beta) {
                        let gb = g.sum_axis(NdAxis(0)).insert_axis(NdAxis(0));
                        acc(&mut grads[*beta], gb);
                    }
                    if wants(*x) {
                        let mut dxhat = g;
                        dxhat *= &*nodes[*gamma].value;
                        let c = dxhat.ncols() as f64;
                        for ((mut row, xh), &is) in
                            dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                        {
                            let m1 = row.sum() / c;
                            let m2 = row.dot(&xh) / c;
                            Zip::from(&mut row)
                                .and(&xh)
                                .for_each(|d, &xv| *d = is * (*d - m1 - xv * m2));
                        }
                        acc(&mut grads[*x], dxhat);
                    }
                }
                Op::Gelu(a) => {
                    let mut gi = g;
                    Zip::from(&mut gi)
                        .and(&*nodes[*a].value)
                        .for_each(|gv, &x| *gv *= gelu_parts(x).1);
                    acc(&mut grads[*a], gi);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut gi = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gi[[r, t]] -= 1.0;
                    }
                    gi.mapv_inplace(|v| v * scale);
                    acc(&mut grads[*logits], gi);
                }
                Op::Cosine {
                    a,
                    b,
                    a_hat,
                    b_hat,
                    a_norm,
                    b_norm,
                } => {
                    // d/dx of x̂ = (I - x̂x̂ᵀ)/|x| applied to the upstream gradient.
                    let project = |dhat: Matrix, hat: &Matrix, norms: &[f64]| {
                        let mut out = dhat;
                        for ((mut row, h), &n) in
                            out.rows_mut().into_iter().zip(hat.rows()).zip(norms)
                        {
                            if n > 0.0 {
                                let d = row.dot(&h);
                                Zip::from(&mut row)
                                    .and(&h)
                                    .for_each(|r, &hv| *r = (*r - d * hv) / n);
                            } else {
                                row.fill(0.0);
                            }
                        }
                        out
                    };
                    if wants(*a) {
                        let da = project(g.dot(b_hat), a_hat, a_norm);
                        acc(&mut grads[*a], da);
                    }
                    if wants(*b) {
                        let db = project(g.t().dot(a_hat), b_hat, b_norm);
                        acc(&mut grads[*b], db);
                    }
                }
                Op::GumbelNoise(a) => {
                    acc(&mut grads[*a], g);
                }
            }
        }

        Ok(Gradients {
            graph: self.id,
            shapes: nodes.iter().map(|n| shape(&n.value)).collect(),
            grads,
        })
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    graph: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for a leaf; zeros when the leaf is not on a path to the output.
    pub fn get(&self, v: Var) -> Matrix {
        assert_eq!(v.graph, self.graph, "var from another graph");
        self.grads[v.index]
            .clone()
            .unwrap_or_else(|| Matrix::zeros(self.shapes[v.index]))
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        assert_eq!(v.graph, self.graph, "var from another graph");
        self.grads[v.index]
            .take()
            .unwrap_or_else(|| Matrix::zeros(self.shapes[v.index]))
    }
}

/// Central-difference step used by [`check_gradients`].
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative error so that vanishing gradients are
/// compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub param: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub entries_checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    /// Parameters whose max relative error exceeds the tolerance.
    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params
            .iter()
            .filter(|p| p.max_rel_error > self.tolerance)
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.failures().is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compare reverse-mode gradients of `f` against central finite differences
/// at every entry of every parameter in `point`.
pub fn check_gradients<F>(f: F, point: &[Matrix], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(p, m)| {
            let (r, c) = shape(m);
            (0..r).flat_map(move |i| (0..c).map(move |j| (p, i, j)))
        })
        .collect();
    check_gradients_at(f, point, &probes, tolerance)
}

/// Like [`check_gradients`] but only at the listed `(param, row, col)` entries.
pub fn check_gradients_at<F>(
    f: F,
    point: &[Matrix],
    probes: &[(usize, usize, usize)],
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |pt: &[Matrix]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = pt.iter().map(|m| g.param(m.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(g.item(out))
    };

    let g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|m| g.param(m.clone())).collect();
    let out = f(&g, &vars)?;
    let analytic = g.gradient(out, &vars)?;

    let mut params: Vec<ParamCheck> = (0..point.len())
        .map(|param| ParamCheck {
            param,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            entries_checked: 0,
        })
        .collect();
    let mut work: Vec<Matrix> = point.to_vec();
    for &(p, i, j) in probes {
        let orig = work[p][[i, j]];
        work[p][[i, j]] = orig + FD_STEP;
        let plus = eval(&work)?;
        work[p][[i, j]] = orig - FD_STEP;
        let minus = eval(&work)?;
        work[p][[i, j]] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[p][[i, j]];
        let entry = &mut params[p];
        entry.max_rel_error = entry.max_rel_error.max(relative_error(a, numeric));
        entry.max_abs_error = entry.max_abs_error.max((a - numeric).abs());
        entry.entries_checked += 1;
    }
    Ok(GradCheckReport { tolerance, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    fn positive_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(0.5..2.0))
    }

    #[test]
    fn matmul_identity() {
        let g = Graph::new();
        let m = array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.5]];
        let i = g.constant(Matrix::eye(3));
        let x = g.constant(m.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(*g.value(y), m);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Matrix::zeros((1, 3)));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let g = Graph::new();
        let x = g.constant(Matrix::from_elem((1, 8), 4.2));
        let gamma = g.constant(Matrix::ones((1, 8)));
        let beta = g.constant(Matrix::zeros((1, 8)));
        let y = g.layer_norm(x, gamma, beta).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3)));
        let b = g.constant(Matrix::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NdiffError::ShapeMismatch {
                primitive: "matmul",
                left: (2, 3),
                right: (2, 3)
            }
        );
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Matrix::zeros((1, 2)));
        let err = g.log(a).unwrap_err();
        assert!(matches!(err, NdiffError::NonFinite { primitive: "log", .. }));
    }

    #[test]
    fn product_rule() {
        let g = Graph::new();
        let x = g.param(Matrix::from_elem((1, 1), 2.0));
        let y = g.param(Matrix::from_elem((1, 1), 3.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.gradient(z, &[x, y]).unwrap();
        assert_eq!(grads[0][[0, 0]], 3.0);
        assert_eq!(grads[1][[0, 0]], 2.0);
    }

    #[test]
    fn non_scalar_target_and_unknown_node() {
        let g = Graph::new();
        let x = g.param(Matrix::zeros((2, 2)));
        assert!(matches!(
            g.gradient(x, &[x]),
            Err(NdiffError::NonScalarTarget { .. })
        ));
        let other = Graph::new();
        let y = other.param(Matrix::zeros((1, 1)));
        let s = g.sum(x).unwrap();
        assert!(matches!(
            g.gradient(s, &[y]),
            Err(NdiffError::UnknownNode(_))
        ));
    }

    #[test]
    fn unreachable_param_gets_exact_zero() {
        let g = Graph::new();
        let x = g.param(Matrix::from_elem((2, 2), 1.5));
        let unused = g.param(Matrix::from_elem((3, 1), 1.0));
        let s = g.sum(x).unwrap();
        let grads = g.gradient(s, &[unused]).unwrap();
        assert!(grads[0].iter().all(|&v| v == 0.0));
        assert_eq!(grads[0].dim(), (3, 1));
    }

    #[test]
    fn stop_gradient_blocks() {
        let g = Graph::new();
        let x = g.param(array![[1.0, -2.0, 0.5]]);
        let w = g.constant(array![[0.3, 0.1, 2.0]]);
        let sx = g.stop_gradient(x).unwrap();
        assert_eq!(*g.value(sx), *g.value(x));
        let y = g.mul(sx, w).unwrap();
        let y = g.sum(y).unwrap();
        let grads = g.gradient(y, &[x]).unwrap();
        assert!(grads[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_is_p_minus_onehot() {
        let g = Graph::new();
        let z = g.param(array![[0.2, -1.0, 0.7, 0.0]]);
        let loss = g.cross_entropy(z, &[2]).unwrap();
        let grad = &g.gradient(loss, &[z]).unwrap()[0];
        let p = row_softmax(&array![[0.2, -1.0, 0.7, 0.0]]);
        for j in 0..4 {
            let expect = p[[0, j]] - if j == 2 { 1.0 } else { 0.0 };
            assert!((grad[[0, j]] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn named_inputs() {
        let g = Graph::new();
        let x = g.input("x", array![[1.0]]);
        assert_eq!(g.input_named("x").unwrap(), x);
        assert!(matches!(
            g.input_named("y"),
            Err(NdiffError::UnboundInput(_))
        ));
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        let report = check_gradients(
            |g, _| Ok(g.scalar(3.0)),
            &[array![[1.0, 2.0]]],
            1e-6,
        )
        .unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn linear_layer_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let point = [
            rand_matrix(&mut rng, 4, 5),
            rand_matrix(&mut rng, 5, 3),
            rand_matrix(&mut rng, 1, 3),
        ];
        let report = check_gradients(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add(y, v[2])?;
                let y = g.mul(y, y)?;
                g.sum(y)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    /// Every primitive against central differences.
    #[test]
    fn primitive_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand_matrix(&mut rng, 3, 4);
        let b = rand_matrix(&mut rng, 3, 4);
        let w = rand_matrix(&mut rng, 3, 4);
        let pos = positive_matrix(&mut rng, 3, 4);
        let row = rand_matrix(&mut rng, 1, 4);
        let col = rand_matrix(&mut rng, 3, 1);
        type Case = (&'static str, Vec<Matrix>, Box<dyn Fn(&Graph, &[Var]) -> Result<Var>>);
        let wv = w.clone();
        let weighted = move |g: &Graph, y: Var| -> Result<Var> {
            let w = g.constant(wv.clone());
            let p = g.mul(y, w)?;
            g.sum(p)
        };
        let wsum = std::rc::Rc::new(weighted);
        macro_rules! case {
            ($name:expr, $pts:expr, |$g:ident, $v:ident| $body:expr) => {{
                let ws = wsum.clone();
                let c: Case = (
                    $name,
                    $pts,
                    Box::new(move |$g: &Graph, $v: &[Var]| {
                        let y: Var = $body?;
                        if $g.shape(y) == (3, 4) {
                            ws($g, y)
                        } else {
                            let t = $g.mul(y, y)?;
                            $g.sum(t)
                        }
                    }),
                );
                c
            }};
        }
        let cases: Vec<Case> = vec![
            case!("matmul", vec![a.clone(), rand_matrix(&mut rng, 4, 2)], |g, v| g.matmul(v[0], v[1])),
            case!("add", vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1])),
            case!("add_row", vec![a.clone(), row.clone()], |g, v| g.add(v[0], v[1])),
            case!("mul_col", vec![a.clone(), col.clone()], |g, v| g.mul(v[0], v[1])),
            case!("mul", vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])),
            case!("scale", vec![a.clone()], |g, v| g.scale(v[0], -2.5)),
            case!("transpose", vec![a.clone()], |g, v| g.transpose(v[0])),
            case!("concat_rows", vec![a.clone(), row.clone()], |g, v| g.concat(&[v[0], v[1]], Axis::Rows)),
            case!("concat_cols", vec![a.clone(), col.clone()], |g, v| g.concat(&[v[0], v[1]], Axis::Cols)),
            case!("slice", vec![a.clone()], |g, v| g.slice(v[0], Axis::Cols, 1, 2)),
            case!("gather", vec![a.clone()], |g, v| g.gather_rows(v[0], &[2, 0, 2])),
            case!("embedding", vec![a.clone()], |g, v| g.embedding(v[0], &[1, 1, 0, 2])),
            case!("mean_rows", vec![a.clone()], |g, v| g.mean(v[0], Axis::Rows)),
            case!("mean_cols", vec![a.clone()], |g, v| g.mean(v[0], Axis::Cols)),
            case!("softmax", vec![a.clone()], |g, v| g.softmax(v[0])),
            case!("log", vec![pos.clone()], |g, v| g.log(v[0])),
            case!("exp", vec![a.clone()], |g, v| g.exp(v[0])),
            case!("pow", vec![pos.clone()], |g, v| g.pow(v[0], -1.5)),
            case!("layer_norm", vec![a.clone(), row.clone(), rand_matrix(&mut rng, 1, 4)], |g, v| g.layer_norm(v[0], v[1], v[2])),
            case!("gelu", vec![a.scaled(3.0)], |g, v| g.gelu(v[0])),
            case!("cross_entropy", vec![a.clone()], |g, v| g.cross_entropy(v[0], &[3, 0, 1])),
            case!("cosine", vec![a.clone(), rand_matrix(&mut rng, 2, 4)], |g, v| g.cosine(v[0], v[1])),
            case!("gumbel_noise", vec![a.clone()], |g, v| g.gumbel_noise(v[0], &Matrix::from_elem((3, 4), 0.3))),
        ];
        for (name, point, f) in cases {
            let report = check_gradients(|g, v| f(g, v), &point, 1e-4).unwrap();
            assert!(report.passed(), "{name}: {report:?}");
        }
    }

    trait Scaled {
        fn scaled(&self, s: f64) -> Matrix;
    }
    impl Scaled for Matrix {
        fn scaled(&self, s: f64) -> Matrix {
            self.mapv(|v| v * s)
        }
    }

    #[test]
    fn records_are_topological() {
        let g = Graph::new();
        let x = g.param(Matrix::ones((2, 2)));
        let y = g.exp(x).unwrap();
        let _ = g.matmul(x, y).unwrap();
        for (i, rec) in g.records().iter().enumerate() {
            assert!(rec.inputs.iter().all(|&j| j < i));
        }
    }

    proptest::proptest! {
        #[test]
        fn batch_gradient_is_sum_of_example_gradients(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = rand_matrix(&mut rng, 4, 3);
            let xs = rand_matrix(&mut rng, 5, 4);
            let loss = |g: &Graph, wv: Var, rows: &[usize]| -> Result<Var> {
                let x = g.constant(xs.select(NdAxis(0), rows));
                let h = g.matmul(x, wv)?;
                let h = g.gelu(h)?;
                let h = g.mul(h, h)?;
                g.sum(h)
            };
            let g = Graph::new();
            let wv = g.param(w.clone());
            let total = loss(&g, wv, &[0, 1, 2, 3, 4]).unwrap();
            let batch = g.gradient(total, &[wv]).unwrap().remove(0);
            let mut summed = Matrix::zeros((4, 3));
            for r in 0..5 {
                let g = Graph::new();
                let wv = g.param(w.clone());
                let l = loss(&g, wv, &[r]).unwrap();
                summed += &g.gradient(l, &[wv]).unwrap()[0];
            }
            for (a, b) in batch.iter().zip(summed.iter()) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
