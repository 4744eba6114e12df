//! Dense f64 tensors and a reverse-mode autodiff tape.
//!
//! All reductions run in a fixed left-to-right index order so that forward
//! results are bitwise reproducible across runs and thread counts.

use std::fmt;
use std::sync::Arc;

use crate::nn::AttentionMask;

// ── Errors ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Dimension mismatch between two operands; carries both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    /// Slice or index range falls outside the tensor.
    OutOfRange {
        op: &'static str,
        detail: String,
    },
    NonScalarLoss {
        shape: Vec<usize>,
    },
    /// backward called on a graph that was already consumed.
    DeadGraph,
    FullyMaskedRow {
        row: usize,
    },
    InvalidValue {
        op: &'static str,
        detail: String,
    },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch {lhs:?} vs {rhs:?}")
            }
            TensorError::InvalidAxis { op, axis, shape } => {
                write!(f, "{op}: axis {axis} invalid for shape {shape:?}")
            }
            TensorError::OutOfRange { op, detail } => write!(f, "{op}: {detail}"),
            TensorError::NonScalarLoss { shape } => {
                write!(f, "backward: loss must be scalar, got shape {shape:?}")
            }
            TensorError::DeadGraph => {
                write!(f, "backward: graph already consumed (reset required)")
            }
            TensorError::FullyMaskedRow { row } => {
                write!(f, "attention: query row {row} has no allowed keys")
            }
            TensorError::InvalidValue { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Tensor value ────────────────────────────────────────────────────

/// A dense row-major tensor of f64 scalars.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![v], &[1]).unwrap()
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ── Parameter store ─────────────────────────────────────────────────

/// Stable identifier for a learnable parameter within one `ParamStore`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

/// Ordered collection of named parameters. Registration order is the
/// canonical order used by the optimizer and the checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "param {name}: shape/data mismatch");
        assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate param name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            value: Arc::new(data),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    /// Mutable access for the optimizer. Panics if any graph still holds the
    /// buffer (steps must run after all graphs are dropped).
    pub fn value_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::get_mut(&mut self.entries[id.0].value)
            .expect("param buffer still shared; drop graphs before mutating")
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All parameter scalars concatenated in registration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_scalars());
        for e in &self.entries {
            out.extend_from_slice(&e.value);
        }
        out
    }

    /// Inverse of `flatten`; lengths must agree.
    pub fn write_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.total_scalars());
        let mut off = 0;
        for i in 0..self.entries.len() {
            let n = self.entries[i].value.len();
            self.value_mut(ParamId(i)).copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }
}

// ── Graph ───────────────────────────────────────────────────────────

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddScalar { a: NodeId, c: f64 },
    /// Broadcast a length-n vector across every row of an [m×n] matrix.
    AddRow { a: NodeId, v: NodeId },
    MulRow { a: NodeId, v: NodeId },
    /// Broadcast a length-m vector down every column of an [m×n] matrix.
    AddCol { a: NodeId, v: NodeId },
    MulCol { a: NodeId, v: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Softmax { a: NodeId, axis: usize },
    SoftmaxMasked { a: NodeId, mask: Arc<AttentionMask> },
    LayerNorm { x: NodeId, gain: Option<NodeId>, bias: Option<NodeId>, eps: f64 },
    Embed { table: NodeId, indices: Arc<Vec<usize>> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize, len: usize },
    SumAll { a: NodeId },
    MeanAll { a: NodeId },
    SumAxis { a: NodeId, axis: usize },
    Mse { a: NodeId, b: NodeId },
    Detach { a: NodeId },
    Reshape { a: NodeId },
}

struct Node {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Reverse-mode tape: records executed operations in order; `backward`
/// replays them in exact reverse order. A graph can be walked backward once.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            data: Arc::new(data),
            op,
            needs_grad,
            param: None,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id].data[0]
    }

    /// Gradient buffer of a node after `backward`, if one was produced.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, data: &[f64], shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf, false)
    }

    /// Constant leaf sharing an existing buffer (no copy, no gradient).
    pub fn shared_input(&mut self, data: Arc<Vec<f64>>, shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape: shape.to_vec(),
            data,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Differentiable leaf bound to a store parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let e = store.entry(id);
        self.nodes.push(Node {
            shape: e.shape.clone(),
            data: Arc::clone(&e.value),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    /// Frozen view of a parameter: participates in the forward pass only.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let e = store.entry(id);
        self.shared_input(Arc::clone(&e.value), &e.shape.clone())
    }

    /// Differentiable leaf with an explicit value (used by gradient checks).
    pub fn variable(&mut self, data: &[f64], shape: &[usize]) -> NodeId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data.to_vec(), Op::Leaf, true)
    }

    // ── Forward ops ─────────────────────────────────────────────────

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[id].shape;
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(TensorError::InvalidAxis { op, axis: 2, shape: s.clone() }),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_flags(a, b, false, false)
    }

    /// a @ b with optional transposes applied to either operand.
    pub fn matmul_flags(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        let out = matmul_kernel(
            &self.nodes[a].data, ar, ac, ta,
            &self.nodes[b].data, br, bc, tb,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::Matmul { a, b, ta, tb }, needs))
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "add")?;
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Add { a, b }, needs))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "sub")?;
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Sub { a, b }, needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mul")?;
        let out: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::Scale { a, c }, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::AddScalar { a, c }, needs)
    }

    fn row_broadcast_check(&self, a: NodeId, v: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(a, op)?;
        let vn = self.nodes[v].data.len();
        if vn != n {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        Ok((m, n))
    }

    fn col_broadcast_check(&self, a: NodeId, v: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(a, op)?;
        let vm = self.nodes[v].data.len();
        if vm != m {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[v].shape.clone(),
            });
        }
        Ok((m, n))
    }

    pub fn add_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.row_broadcast_check(a, v, "add_row")?;
        let av = &self.nodes[a].data;
        let vv = &self.nodes[v].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + vv[j]);
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::AddRow { a, v }, needs))
    }

    pub fn mul_row(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.row_broadcast_check(a, v, "mul_row")?;
        let av = &self.nodes[a].data;
        let vv = &self.nodes[v].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] * vv[j]);
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::MulRow { a, v }, needs))
    }

    pub fn add_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.col_broadcast_check(a, v, "add_col")?;
        let av = &self.nodes[a].data;
        let vv = &self.nodes[v].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] + vv[i]);
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::AddCol { a, v }, needs))
    }

    pub fn mul_col(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (m, n) = self.col_broadcast_check(a, v, "mul_col")?;
        let av = &self.nodes[a].data;
        let vv = &self.nodes[v].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(av[i * n + j] * vv[i]);
            }
        }
        let needs = self.needs(a) || self.needs(v);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::MulCol { a, v }, needs))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|&x| gelu_fwd(x)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::Gelu { a }, needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::Exp { a }, needs)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::Ln { a }, needs)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[a].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let needs = self.needs(a);
        self.push(self.nodes[a].shape.clone(), out, Op::Clamp { a, lo, hi }, needs)
    }

    /// Numerically stabilized softmax along `axis` of a 2-D (or 1-D) tensor.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "softmax")?;
        let nd = self.nodes[a].shape.len();
        if axis >= nd.max(1) {
            return Err(TensorError::InvalidAxis {
                op: "softmax",
                axis,
                shape: self.nodes[a].shape.clone(),
            });
        }
        let av = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        // axis semantics: for 2-D, axis 1 normalizes rows, axis 0 columns.
        // 1-D tensors normalize over their single axis.
        let row_axis = nd == 1 || axis == 1;
        if row_axis {
            for i in 0..m {
                softmax_slice(&av[i * n..(i + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        } else {
            let mut col = vec![0.0; m];
            let mut res = vec![0.0; m];
            for j in 0..n {
                for i in 0..m {
                    col[i] = av[i * n + j];
                }
                softmax_slice(&col, &mut res);
                for i in 0..m {
                    out[i * n + j] = res[i];
                }
            }
        }
        let needs = self.needs(a);
        let ax = if row_axis { 1 } else { 0 };
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Softmax { a, axis: ax }, needs))
    }

    /// Row softmax over allowed keys only; disallowed entries are exactly 0.
    pub fn softmax_masked(&mut self, a: NodeId, mask: Arc<AttentionMask>) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "softmax_masked")?;
        if m != mask.q_len() || n != mask.k_len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                lhs: vec![m, n],
                rhs: vec![mask.q_len(), mask.k_len()],
            });
        }
        let av = &self.nodes[a].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            let mut any = false;
            for j in 0..n {
                if mask.allowed(i, j) {
                    any = true;
                    if row[j] > mx {
                        mx = row[j];
                    }
                }
            }
            if !any {
                return Err(TensorError::FullyMaskedRow { row: i });
            }
            let mut denom = 0.0;
            for j in 0..n {
                if mask.allowed(i, j) {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                if mask.allowed(i, j) {
                    out[i * n + j] /= denom;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::SoftmaxMasked { a, mask }, needs))
    }

    /// Per-row normalization over the last dimension, optional affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if let Some(g) = gain {
            if self.nodes[g].data.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![n],
                    rhs: self.nodes[g].shape.clone(),
                });
            }
        }
        if let Some(b) = bias {
            if self.nodes[b].data.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: vec![n],
                    rhs: self.nodes[b].shape.clone(),
                });
            }
        }
        let xv = &self.nodes[x].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mut mean = 0.0;
            for &v in row {
                mean += v;
            }
            mean /= n as f64;
            let mut var = 0.0;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        if let Some(g) = gain {
            let gv = &self.nodes[g].data;
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] *= gv[j];
                }
            }
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b].data;
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bv[j];
                }
            }
        }
        let needs =
            self.needs(x) || gain.is_some_and(|g| self.needs(g)) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::LayerNorm { x, gain, bias, eps }, needs))
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds.
    pub fn embed(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.dims2(table, "embed")?;
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::OutOfRange {
                    op: "embed",
                    detail: format!("index {ix} >= table rows {rows}"),
                });
            }
        }
        let tv = &self.nodes[table].data;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            out.extend_from_slice(&tv[ix * d..(ix + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![indices.len(), d],
            out,
            Op::Embed { table, indices: Arc::new(indices.to_vec()) },
            needs,
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let first = &self.nodes[parts[0]].shape;
        let nd = first.len();
        if axis >= nd {
            return Err(TensorError::InvalidAxis { op: "concat", axis, shape: first.clone() });
        }
        for &p in parts {
            let s = &self.nodes[p].shape;
            if s.len() != nd {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            for d in 0..nd {
                if d != axis && s[d] != first[d] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        lhs: first.clone(),
                        rhs: s.clone(),
                    });
                }
            }
        }
        let mut out_shape = first.clone();
        out_shape[axis] = parts.iter().map(|&p| self.nodes[p].shape[axis]).sum();
        let numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(numel);
        if nd == 1 || axis == 0 {
            for &p in parts {
                out.extend_from_slice(&self.nodes[p].data);
            }
        } else {
            // axis == 1 on 2-D: interleave row blocks
            let m = first[0];
            for i in 0..m {
                for &p in parts {
                    let n = self.nodes[p].shape[1];
                    out.extend_from_slice(&self.nodes[p].data[i * n..(i + 1) * n]);
                }
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out_shape, out, Op::Concat { parts: parts.to_vec(), axis }, needs))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[a].shape.clone();
        let nd = shape.len();
        if axis >= nd {
            return Err(TensorError::InvalidAxis { op: "slice", axis, shape });
        }
        if start + len > shape[axis] {
            return Err(TensorError::OutOfRange {
                op: "slice",
                detail: format!("range {start}..{} exceeds dim {}", start + len, shape[axis]),
            });
        }
        let av = &self.nodes[a].data;
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(out_shape.iter().product());
        if nd == 1 || axis == 0 {
            let row: usize = shape[1..].iter().product::<usize>().max(1);
            out.extend_from_slice(&av[start * row..(start + len) * row]);
        } else {
            let m = shape[0];
            let n = shape[1];
            for i in 0..m {
                out.extend_from_slice(&av[i * n + start..i * n + start + len]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(out_shape, out, Op::Slice { a, axis, start, len }, needs))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let mut s = 0.0;
        for &v in self.nodes[a].data.iter() {
            s += v;
        }
        let needs = self.needs(a);
        self.push(vec![1], vec![s], Op::SumAll { a }, needs)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].data.len();
        let mut s = 0.0;
        for &v in self.nodes[a].data.iter() {
            s += v;
        }
        let needs = self.needs(a);
        self.push(vec![1], vec![s / n as f64], Op::MeanAll { a }, needs)
    }

    /// Sum a 2-D tensor along an axis; result is 1-D.
    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a, "sum_axis")?;
        if self.nodes[a].shape.len() != 2 || axis > 1 {
            return Err(TensorError::InvalidAxis {
                op: "sum_axis",
                axis,
                shape: self.nodes[a].shape.clone(),
            });
        }
        let av = &self.nodes[a].data;
        let out = if axis == 1 {
            let mut o = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    o[i] += av[i * n + j];
                }
            }
            o
        } else {
            let mut o = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    o[j] += av[i * n + j];
                }
            }
            o
        };
        let len = out.len();
        let needs = self.needs(a);
        Ok(self.push(vec![len], out, Op::SumAxis { a, axis }, needs))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(a, b, "mse")?;
        let n = self.nodes[a].data.len();
        let mut s = 0.0;
        for (x, y) in self.nodes[a].data.iter().zip(self.nodes[b].data.iter()) {
            let d = x - y;
            s += d * d;
        }
        let needs = self.needs(a) || self.needs(b);
        self.binary_same_shape(a, b, "mse")?;
        Ok(self.push(vec![1], vec![s / n as f64], Op::Mse { a, b }, needs))
    }

    /// Stop-gradient: forward identity, backward blocks.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].data.to_vec();
        self.push(self.nodes[a].shape.clone(), out, Op::Detach { a }, false)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a].data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.nodes[a].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.nodes[a].data.to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape { a }, needs))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        if self.grads[id].is_none() {
            self.grads[id] = Some(vec![0.0; self.nodes[id].data.len()]);
        }
        self.grads[id].as_mut().unwrap()
    }

    /// Populate gradients of every `needs_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::DeadGraph);
        }
        if self.nodes[loss].data.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        self.consumed = true;
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = self.grads[id].take().unwrap();
            let op = self.nodes[id].op.clone();
            self.propagate(id, &op, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf | Op::Detach { .. } => {}
            Op::Matmul { a, b, ta, tb } => {
                let (ar, ac) = self.dims2(a, "matmul").unwrap();
                let (br, bc) = self.dims2(b, "matmul").unwrap();
                let (m, _) = {
                    let s = &self.nodes[id].shape;
                    (s[0], s[1])
                };
                let n = self.nodes[id].shape[1];
                if self.needs(a) {
                    // dA depends on transpose flags.
                    let da = match (ta, tb) {
                        // C = A B: dA = dC B^T
                        (false, false) => matmul_kernel(g, m, n, false, &self.nodes[b].data, br, bc, true),
                        // C = A B^T: dA = dC B
                        (false, true) => matmul_kernel(g, m, n, false, &self.nodes[b].data, br, bc, false),
                        // C = A^T B: dA = B dC^T
                        (true, false) => matmul_kernel(&self.nodes[b].data, br, bc, false, g, m, n, true),
                        // C = A^T B^T: dA = B^T dC^T
                        (true, true) => matmul_kernel(&self.nodes[b].data, br, bc, true, g, m, n, true),
                    };
                    accumulate(self.grad_buf(a), &da);
                }
                if self.needs(b) {
                    let db = match (ta, tb) {
                        // C = A B: dB = A^T dC
                        (false, false) => matmul_kernel(&self.nodes[a].data, ar, ac, true, g, m, n, false),
                        // C = A B^T: dB = dC^T A
                        (false, true) => matmul_kernel(g, m, n, true, &self.nodes[a].data, ar, ac, false),
                        // C = A^T B: dB = A dC
                        (true, false) => matmul_kernel(&self.nodes[a].data, ar, ac, false, g, m, n, false),
                        // C = A^T B^T: dB = dC^T A^T
                        (true, true) => matmul_kernel(g, m, n, true, &self.nodes[a].data, ar, ac, true),
                    };
                    accumulate(self.grad_buf(b), &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs(b) {
                    accumulate(self.grad_buf(b), g);
                }
            }
            Op::Sub { a, b } => {
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs(b) {
                    let buf = self.grad_buf(b);
                    for (o, &gi) in buf.iter_mut().zip(g.iter()) {
                        *o -= gi;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(a) {
                    let bv = Arc::clone(&self.nodes[b].data);
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * bv[i];
                    }
                }
                if self.needs(b) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(b);
                    for i in 0..g.len() {
                        buf[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * c;
                    }
                }
            }
            Op::AddScalar { a, .. } => {
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
            }
            Op::AddRow { a, v } => {
                let (m, n) = self.dims2(a, "add_row").unwrap();
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs(v) {
                    let buf = self.grad_buf(v);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::MulRow { a, v } => {
                let (m, n) = self.dims2(a, "mul_row").unwrap();
                if self.needs(a) {
                    let vv = Arc::clone(&self.nodes[v].data);
                    let buf = self.grad_buf(a);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * vv[j];
                        }
                    }
                }
                if self.needs(v) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(v);
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::AddCol { a, v } => {
                let (m, n) = self.dims2(a, "add_col").unwrap();
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
                if self.needs(v) {
                    let buf = self.grad_buf(v);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i] += g[i * n + j];
                        }
                    }
                }
            }
            Op::MulCol { a, v } => {
                let (m, n) = self.dims2(a, "mul_col").unwrap();
                if self.needs(a) {
                    let vv = Arc::clone(&self.nodes[v].data);
                    let buf = self.grad_buf(a);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * vv[i];
                        }
                    }
                }
                if self.needs(v) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(v);
                    for i in 0..m {
                        for j in 0..n {
                            buf[i] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if self.needs(a) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_bwd(av[i]);
                    }
                }
            }
            Op::Exp { a } => {
                if self.needs(a) {
                    let yv = Arc::clone(&self.nodes[id].data);
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Ln { a } => {
                if self.needs(a) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        buf[i] += g[i] / av[i];
                    }
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.needs(a) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let buf = self.grad_buf(a);
                    for i in 0..g.len() {
                        if av[i] > lo && av[i] < hi {
                            buf[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.needs(a) {
                    let y = Arc::clone(&self.nodes[id].data);
                    let (m, n) = self.dims2(id, "softmax").unwrap();
                    let buf = self.grad_buf(a);
                    if axis == 1 {
                        for i in 0..m {
                            let yrow = &y[i * n..(i + 1) * n];
                            let grow = &g[i * n..(i + 1) * n];
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += yrow[j] * grow[j];
                            }
                            for j in 0..n {
                                buf[i * n + j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..n {
                            let mut dot = 0.0;
                            for i in 0..m {
                                dot += y[i * n + j] * g[i * n + j];
                            }
                            for i in 0..m {
                                buf[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxMasked { a, ref mask } => {
                if self.needs(a) {
                    let y = Arc::clone(&self.nodes[id].data);
                    let (m, n) = self.dims2(id, "softmax_masked").unwrap();
                    let mask = Arc::clone(mask);
                    let buf = self.grad_buf(a);
                    for i in 0..m {
                        let mut dot = 0.0;
                        for j in 0..n {
                            if mask.allowed(i, j) {
                                dot += y[i * n + j] * g[i * n + j];
                            }
                        }
                        for j in 0..n {
                            if mask.allowed(i, j) {
                                buf[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (m, n) = self.dims2(x, "layer_norm").unwrap();
                let xv = Arc::clone(&self.nodes[x].data);
                let gv = gain.map(|gid| Arc::clone(&self.nodes[gid].data));
                // Recompute per-row stats and normalized values.
                let mut xhat = vec![0.0; m * n];
                let mut inv_std = vec![0.0; m];
                let mut means = vec![0.0; m];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mut mean = 0.0;
                    for &v in row {
                        mean += v;
                    }
                    mean /= n as f64;
                    let mut var = 0.0;
                    for &v in row {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    means[i] = mean;
                    inv_std[i] = inv;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv;
                    }
                }
                if let Some(b) = bias {
                    if self.needs(b) {
                        let buf = self.grad_buf(b);
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += g[i * n + j];
                            }
                        }
                    }
                }
                if let Some(gn) = gain {
                    if self.needs(gn) {
                        let buf = self.grad_buf(gn);
                        for i in 0..m {
                            for j in 0..n {
                                buf[j] += g[i * n + j] * xhat[i * n + j];
                            }
                        }
                    }
                }
                if self.needs(x) {
                    let buf = self.grad_buf(x);
                    for i in 0..m {
                        // d(xhat) = gain ⊙ g for affine output
                        let mut dxhat = vec![0.0; n];
                        for j in 0..n {
                            let gg = match &gv {
                                Some(gvv) => gvv[j],
                                None => 1.0,
                            };
                            dxhat[j] = g[i * n + j] * gg;
                        }
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xhat[i * n + j];
                        }
                        let nf = n as f64;
                        for j in 0..n {
                            buf[i * n + j] += inv_std[i] / nf
                                * (nf * dxhat[j] - s1 - xhat[i * n + j] * s2);
                        }
                    }
                }
            }
            Op::Embed { table, ref indices } => {
                if self.needs(table) {
                    let d = self.nodes[id].shape[1];
                    let indices = Arc::clone(indices);
                    let buf = self.grad_buf(table);
                    for (r, &ix) in indices.iter().enumerate() {
                        for j in 0..d {
                            buf[ix * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Concat { ref parts, axis } => {
                let parts = parts.clone();
                let nd = self.nodes[id].shape.len();
                if nd == 1 || axis == 0 {
                    let mut off = 0;
                    for &p in &parts {
                        let len = self.nodes[p].data.len();
                        if self.needs(p) {
                            let buf = self.grad_buf(p);
                            for i in 0..len {
                                buf[i] += g[off + i];
                            }
                        }
                        off += len;
                    }
                } else {
                    let m = self.nodes[id].shape[0];
                    let total_n = self.nodes[id].shape[1];
                    let mut col_off = 0;
                    for &p in &parts {
                        let n = self.nodes[p].shape[1];
                        if self.needs(p) {
                            let buf = self.grad_buf(p);
                            for i in 0..m {
                                for j in 0..n {
                                    buf[i * n + j] += g[i * total_n + col_off + j];
                                }
                            }
                        }
                        col_off += n;
                    }
                }
            }
            Op::Slice { a, axis, start, len } => {
                if self.needs(a) {
                    let shape = self.nodes[a].shape.clone();
                    let nd = shape.len();
                    let buf = self.grad_buf(a);
                    if nd == 1 || axis == 0 {
                        let row: usize = shape[1..].iter().product::<usize>().max(1);
                        for i in 0..len * row {
                            buf[start * row + i] += g[i];
                        }
                    } else {
                        let m = shape[0];
                        let n = shape[1];
                        for i in 0..m {
                            for j in 0..len {
                                buf[i * n + start + j] += g[i * len + j];
                            }
                        }
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(a) {
                    let buf = self.grad_buf(a);
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(a) {
                    let n = self.nodes[a].data.len() as f64;
                    let buf = self.grad_buf(a);
                    for v in buf.iter_mut() {
                        *v += g[0] / n;
                    }
                }
            }
            Op::SumAxis { a, axis } => {
                if self.needs(a) {
                    let (m, n) = self.dims2(a, "sum_axis").unwrap();
                    let buf = self.grad_buf(a);
                    if axis == 1 {
                        for i in 0..m {
                            for j in 0..n {
                                buf[i * n + j] += g[i];
                            }
                        }
                    } else {
                        for i in 0..m {
                            for j in 0..n {
                                buf[i * n + j] += g[j];
                            }
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let n = self.nodes[a].data.len() as f64;
                let coef = 2.0 * g[0] / n;
                if self.needs(a) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let bv = Arc::clone(&self.nodes[b].data);
                    let buf = self.grad_buf(a);
                    for i in 0..av.len() {
                        buf[i] += coef * (av[i] - bv[i]);
                    }
                }
                if self.needs(b) {
                    let av = Arc::clone(&self.nodes[a].data);
                    let bv = Arc::clone(&self.nodes[b].data);
                    let buf = self.grad_buf(b);
                    for i in 0..av.len() {
                        buf[i] -= coef * (av[i] - bv[i]);
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(a) {
                    accumulate(self.grad_buf(a), g);
                }
            }
        }
    }

    /// Collect gradients of all parameter leaves into `sink` (keyed by ParamId).
    pub fn param_grads_into(&self, sink: &mut GradAccum) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(pid) = node.param {
                if let Some(g) = &self.grads[i] {
                    sink.add(pid, g);
                }
            }
        }
    }
}

/// Per-parameter gradient accumulator with deterministic merge order.
#[derive(Debug, Clone)]
pub struct GradAccum {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradAccum {
    pub fn new(n_params: usize) -> Self {
        GradAccum { grads: vec![None; n_params] }
    }

    pub fn add(&mut self, id: ParamId, g: &[f64]) {
        match &mut self.grads[id.0] {
            Some(buf) => accumulate(buf, g),
            slot => *slot = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &GradAccum) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }
}

// ── Kernels ─────────────────────────────────────────────────────────

fn accumulate(buf: &mut [f64], g: &[f64]) {
    debug_assert_eq!(buf.len(), g.len());
    for (o, &v) in buf.iter_mut().zip(g.iter()) {
        *o += v;
    }
}

fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(row.iter()) {
        let e = (v - mx).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Matrix product with optional operand transposes. Row-major buffers.
/// Accumulation over the shared dimension always runs in ascending index
/// order, so results are bitwise stable.
pub fn matmul_kernel(
    a: &[f64], ar: usize, ac: usize, ta: bool,
    b: &[f64], br: usize, bc: usize, tb: bool,
) -> Vec<f64> {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let n = if tb { br } else { bc };
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            // C[i,j] += A[i,p] * B[p,j]; p ascending via ikj loop.
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let crow = &mut out[i * n..(i + 1) * n];
                for (p, &ap) in arow.iter().enumerate() {
                    let brow = &b[p * bc..(p + 1) * bc];
                    for j in 0..n {
                        crow[j] += ap * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            // C[i,j] = dot(A row i, B row j). Four output columns are
            // produced together for instruction-level parallelism; each
            // element's sum still runs left-to-right over p.
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                let crow = &mut out[i * n..(i + 1) * n];
                let mut j = 0;
                while j + 4 <= n {
                    let b0 = &b[j * bc..(j + 1) * bc];
                    let b1 = &b[(j + 1) * bc..(j + 2) * bc];
                    let b2 = &b[(j + 2) * bc..(j + 3) * bc];
                    let b3 = &b[(j + 3) * bc..(j + 4) * bc];
                    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
                    for p in 0..k {
                        let ap = arow[p];
                        s0 += ap * b0[p];
                        s1 += ap * b1[p];
                        s2 += ap * b2[p];
                        s3 += ap * b3[p];
                    }
                    crow[j] = s0;
                    crow[j + 1] = s1;
                    crow[j + 2] = s2;
                    crow[j + 3] = s3;
                    j += 4;
                }
                while j < n {
                    let brow = &b[j * bc..(j + 1) * bc];
                    let mut s = 0.0;
                    for p in 0..k {
                        s += arow[p] * brow[p];
                    }
                    crow[j] = s;
                    j += 1;
                }
            }
        }
        (true, false) => {
            // C[i,j] += A[p,i] * B[p,j]; p ascending in outer loop.
            for p in 0..ar {
                let arow = &a[p * ac..(p + 1) * ac];
                let brow = &b[p * bc..(p + 1) * bc];
                for i in 0..m {
                    let api = arow[i];
                    let crow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += api * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            // C[i,j] += A[p,i] * B[j,p]
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * ac + i] * b[j * bc + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.input(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let b = g.input(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.input(&vec![0.0; 6], &[2, 3]);
        let b = g.input(&[1.0, -2.0, 3.0, 0.5, 2.5, -1.5], &[3, 2]);
        let c = g.matmul(z, b).unwrap();
        assert!(g.value(c).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let an = g.input(&a, &[3, 3]);
        let bn = g.input(&b, &[3, 3]);
        let cn = g.matmul(an, bn).unwrap();
        let want = triple_loop(&a, &b, 3, 3, 3);
        for (x, y) in g.value(cn).iter().zip(want.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(&[1.0, 2.0], &[1, 2]);
        let b = g.input(&[1.0, 2.0, 3.0], &[3, 1]);
        let err = g.matmul(a, b).unwrap_err();
        let text = err.to_string();
        assert!(text.contains("[1, 2]") && text.contains("[3, 1]"), "{text}");
    }

    #[test]
    fn matmul_transpose_flags_consistent() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // a: 2x3, b: 3x2 reference
        let want = triple_loop(&a, &b, 2, 3, 2);
        // A^T path: store a transposed (3x2), request ta
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        // B^T path: store b transposed (2x3), request tb
        let mut bt = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                bt[j * 3 + i] = b[i * 2 + j];
            }
        }
        let c1 = matmul_kernel(&at, 3, 2, true, &b, 3, 2, false);
        let c2 = matmul_kernel(&a, 2, 3, false, &bt, 2, 3, true);
        let c3 = matmul_kernel(&at, 3, 2, true, &bt, 2, 3, true);
        for (c, w) in [&c1, &c2, &c3].iter().zip([&want, &want, &want]) {
            for (x, y) in c.iter().zip(w.iter()) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn softmax_uniform_on_constant() {
        let mut g = Graph::new();
        let x = g.input(&[3.7; 5], &[5]);
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y) {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut g = Graph::new();
        let x = g.input(&[0.1, -0.4, 2.0], &[3]);
        let y1 = g.softmax(x, 0).unwrap();
        let xs = g.add_scalar(x, 123.456);
        let y2 = g.softmax(xs, 0).unwrap();
        for (a, b) in g.value(y1).iter().zip(g.value(y2).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        let mut g = Graph::new();
        let x = g.input(&[1.0, 2.0, 3.0], &[3]);
        let y = g.softmax(x, 0).unwrap();
        let denom: f64 = (1f64).exp() + (2f64).exp() + (3f64).exp();
        for (i, &v) in g.value(y).iter().enumerate() {
            let want = ((i + 1) as f64).exp() / denom;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(&[0.3, -1.0, 0.5, 9.0, -2.0, 0.0], &[2, 3]);
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y);
        for i in 0..2 {
            let s: f64 = v[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(v[i * 3..(i + 1) * 3].iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.input(&[4.2; 6], &[2, 3]);
        let y = g.layer_norm(x, None, None, 1e-6).unwrap();
        for &v in g.value(y) {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut g = Graph::new();
        let x = g.input(&[1.0, 3.0], &[1, 2]);
        let gain = g.input(&[1.0, 1.0], &[2]);
        let bias = g.input(&[0.0, 0.0], &[2]);
        let y = g.layer_norm(x, Some(gain), Some(bias), 1e-12).unwrap();
        let v = g.value(y);
        assert!((v[0] + 1.0).abs() < 1e-5);
        assert!((v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moment_check() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 64;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gain_c = 1.7;
        let bias_c = -0.3;
        let mut g = Graph::new();
        let xn = g.input(&x, &[1, n]);
        let gn = g.input(&vec![gain_c; n], &[n]);
        let bn = g.input(&vec![bias_c; n], &[n]);
        let y = g.layer_norm(xn, Some(gn), Some(bn), 1e-10).unwrap();
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / n as f64;
        let var: f64 = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n as f64;
        assert!((mean - bias_c).abs() < 1e-6);
        assert!((var - gain_c * gain_c).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(&[1.0, -2.0, 0.5], &[3]);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_square_gives_2x() {
        let mut g = Graph::new();
        let x = g.variable(&[1.0, -2.0, 0.5], &[3]);
        let xx = g.mul(x, x).unwrap();
        let s = g.sum_all(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_is_error() {
        let mut g = Graph::new();
        let x = g.variable(&[1.0], &[1]);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::DeadGraph);
    }

    #[test]
    fn backward_nonscalar_is_error() {
        let mut g = Graph::new();
        let x = g.variable(&[1.0, 2.0], &[2]);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn concat_then_slice_identity() {
        let mut g = Graph::new();
        let a = g.input(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = g.input(&[5.0, 6.0], &[1, 2]);
        let c = g.concat(&[a, b], 0).unwrap();
        let a2 = g.slice(c, 0, 0, 2).unwrap();
        let b2 = g.slice(c, 0, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn concat_axis1_and_slice_back() {
        let mut g = Graph::new();
        let a = g.input(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = g.input(&[9.0, 8.0], &[2, 1]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let a2 = g.slice(c, 1, 0, 2).unwrap();
        let b2 = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(a2), g.value(a));
        assert_eq!(g.value(b2), g.value(b));
    }

    #[test]
    fn embed_scatter_add_backward() {
        let mut g = Graph::new();
        let table = g.variable(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let rows = g.embed(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = g.sum_all(rows);
        g.backward(s).unwrap();
        // Row 2 used twice, row 0 once, row 1 never.
        assert_eq!(g.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.variable(&[2.0], &[1]);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap(); // y = x * sg(x); dy/dx = sg(x) = 2
        let s = g.sum_all(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn mse_forward_and_backward() {
        let mut g = Graph::new();
        let a = g.variable(&[1.0, 2.0], &[2]);
        let b = g.input(&[0.0, 0.0], &[2]);
        let l = g.mse(a, b).unwrap();
        assert!((g.scalar_value(l) - 2.5).abs() < 1e-15);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0]); // 2(a-b)/n
    }

    #[test]
    fn forward_bitwise_deterministic() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let a: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = || {
            let mut g = Graph::new();
            let an = g.input(&a, &[8, 8]);
            let bn = g.input(&b, &[8, 8]);
            let c = g.matmul(an, bn).unwrap();
            let sm = g.softmax(c, 1).unwrap();
            let ln = g.layer_norm(sm, None, None, 1e-6).unwrap();
            g.value(ln).to_vec()
        };
        let r1 = run();
        let r2 = run();
        assert!(r1.iter().zip(r2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn finite_forward_on_finite_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..32).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g = Graph::new();
        let xn = g.input(&x, &[4, 8]);
        let e = g.exp(xn);
        let sm = g.softmax(e, 1).unwrap();
        let gl = g.gelu(sm);
        let ln = g.layer_norm(gl, None, None, 1e-6).unwrap();
        let s = g.sum_all(ln);
        assert!(g.value(gl).iter().all(|v| v.is_finite()));
        assert!(g.value(ln).iter().all(|v| v.is_finite()));
        assert!(g.scalar_value(s).is_finite());
    }
}
