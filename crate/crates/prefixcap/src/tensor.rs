//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors live on a [`Tape`] and are addressed by [`TensorId`]. The tape
//! records every operation together with the saved values its backward rule
//! needs, then replays in reverse on [`Tape::backward`]. Generic over the
//! scalar type: f32 for training and inference, f64 for gradient checking.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

/// Scalar types the tape can compute with.
pub trait Scalar:
    Copy
    + Clone
    + Debug
    + PartialEq
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn neg_infinity() -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {op} with shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("cross_entropy: all positions masked out, loss is undefined")]
    EmptyLoss,
    #[error("target id {id} out of range for vocabulary size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("embedding id {id} out of range for table with {rows} rows")]
    EmbeddingOutOfRange { id: usize, rows: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("slice [{start}, {start}+{len}) out of bounds for axis of size {size}")]
    SliceOutOfBounds {
        start: usize,
        len: usize,
        size: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataShapeMismatch { len: usize, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A tensor node on the tape.
#[derive(Debug, Clone)]
pub struct Tensor<F: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        a: TensorId,
        bias: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        c: F,
    },
    Gelu {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
    },
    /// Row-wise softmax over a t x s matrix where row i may only attend to
    /// columns j <= i + offset. The mask is applied in the forward pass;
    /// masked outputs are exactly zero, so backward matches plain softmax.
    CausalSoftmax {
        a: TensorId,
    },
    LayerNorm {
        a: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Saved (xhat, rstd) per row: rows * (n + 1) values.
        aux: Vec<F>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        live: usize,
        /// Softmax probabilities of the live rows (zeros elsewhere).
        probs: Vec<F>,
    },
    Embedding {
        table: TensorId,
        ids: Vec<usize>,
    },
    Transpose {
        a: TensorId,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceRows {
        a: TensorId,
        start: usize,
        len: usize,
    },
    SliceCols {
        a: TensorId,
        start: usize,
        len: usize,
    },
    Reshape {
        a: TensorId,
    },
    Sum {
        a: TensorId,
    },
}

struct Node<F: Scalar> {
    tensor: Tensor<F>,
    op: Op<F>,
    /// True if a gradient must be propagated into this node.
    needs_grad: bool,
}

/// Records a forward computation and replays it in reverse for gradients.
/// A tape and its tensors are confined to a single logical thread.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<F>, op: Op<F>, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node<F> {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.node(id).tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.node(id).tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.node(id).tensor.grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor<F> {
        &self.node(id).tensor
    }

    /// Insert a leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataShapeMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad,
                grad: None,
            },
            Op::Leaf,
            requires_grad,
        ))
    }

    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        match s {
            [m, n] => Ok((*m, *n)),
            _ => Err(TensorError::BadRank {
                op,
                expected: "a 2-D tensor",
                shape: s.to_vec(),
            }),
        }
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
                requires_grad: false,
                grad: None,
            },
            Op::MatMul { a, b },
            needs,
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Add { a, b },
            needs,
        ))
    }

    /// Broadcast a length-n bias over the rows of an m x n matrix. The only
    /// broadcasting the engine supports.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let av = self.data(a);
        let bv = self.data(bias);
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(av[i * n + j] + bv[j]);
            }
        }
        let needs = self.node(a).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::AddBias { a, bias },
            needs,
        ))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data: Vec<F> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad || self.node(b).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Mul { a, b },
            needs,
        ))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId> {
        let data: Vec<F> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Scale { a, c },
            needs,
        ))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<F> = self.data(a).iter().map(|&x| gelu_fwd(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Gelu { a },
            needs,
        ))
    }

    /// Row-wise softmax over the last axis of a 2-D tensor (a 1-D tensor is
    /// treated as a single row). Max-subtraction for stability.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, n) = match self.shape(a) {
            [n] => (1, *n),
            [m, n] => (*m, *n),
            s => {
                return Err(TensorError::BadRank {
                    op: "softmax",
                    expected: "a 1-D or 2-D tensor",
                    shape: s.to_vec(),
                })
            }
        };
        let mut data = self.data(a).to_vec();
        for i in 0..rows {
            softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Softmax { a },
            needs,
        ))
    }

    /// Softmax with a causal mask: row i attends to columns j <= i + offset.
    pub fn causal_softmax(&mut self, a: TensorId, offset: usize) -> Result<TensorId> {
        let (rows, n) = self.dims2(a, "causal_softmax")?;
        let mut data = self.data(a).to_vec();
        for i in 0..rows {
            let row = &mut data[i * n..(i + 1) * n];
            for (j, v) in row.iter_mut().enumerate() {
                if j > i + offset {
                    *v = F::neg_infinity();
                }
            }
            softmax_row(row);
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::CausalSoftmax { a },
            needs,
        ))
    }

    /// Per-row standardization with affine gain/bias, eps = 1e-5.
    pub fn layer_norm(&mut self, a: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, n) = self.dims2(a, "layer_norm")?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = F::from_f64(1e-5);
        let inv_n = F::from_f64(1.0 / n as f64);
        let av = self.data(a);
        let gv = self.data(gain).to_vec();
        let bv = self.data(bias).to_vec();
        let mut data = Vec::with_capacity(rows * n);
        let mut aux = Vec::with_capacity(rows * (n + 1));
        for i in 0..rows {
            let row = &av[i * n..(i + 1) * n];
            let mut mean = F::ZERO;
            for &x in row {
                mean += x;
            }
            mean *= inv_n;
            let mut var = F::ZERO;
            for &x in row {
                let d = x - mean;
                var += d * d;
            }
            var *= inv_n;
            let rstd = F::ONE / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * rstd;
                aux.push(xhat);
                data.push(xhat * gv[j] + bv[j]);
            }
            aux.push(rstd);
        }
        let needs =
            self.node(a).needs_grad || self.node(gain).needs_grad || self.node(bias).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::LayerNorm { a, gain, bias, aux },
            needs,
        ))
    }

    /// Mean of -log softmax(logits)[target] over masked-in rows. Masked-out
    /// rows contribute exactly zero to both value and gradient.
    pub fn cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let (rows, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let live = mask.iter().filter(|&&m| m).count();
        if live == 0 {
            return Err(TensorError::EmptyLoss);
        }
        for (&t, &m) in targets.iter().zip(mask) {
            if m && t >= v {
                return Err(TensorError::TargetOutOfRange { id: t, vocab: v });
            }
        }
        let lv = self.data(logits);
        let mut probs = vec![F::ZERO; rows * v];
        let mut total = F::ZERO;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &x in row {
                mx = mx.maximum(x);
            }
            let mut sum = F::ZERO;
            for &x in row {
                sum += (x - mx).exp();
            }
            let lse = mx + sum.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[targets[i]];
        }
        let loss = total * F::from_f64(1.0 / live as f64);
        let needs = self.node(logits).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![loss],
                requires_grad: false,
                grad: None,
            },
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                live,
                probs,
            },
            needs,
        ))
    }

    /// Row lookup: out[i] = table[ids[i]].
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (rows, d) = self.dims2(table, "embedding")?;
        for &id in ids {
            if id >= rows {
                return Err(TensorError::EmbeddingOutOfRange { id, rows });
            }
        }
        let tv = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.node(table).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![ids.len(), d],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "transpose")?;
        let av = self.data(a);
        let mut data = vec![F::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av[i * n + j];
            }
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Transpose { a },
            needs,
        ))
    }

    /// Concatenate 2-D tensors along axis 0. All parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (m, n2) = self.dims2(p, "concat_rows")?;
            if n2 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += m;
        }
        let mut data = Vec::with_capacity(rows * n);
        for &p in parts {
            data.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            Tensor {
                shape: vec![rows, n],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenate 2-D tensors along axis 1. All parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (m2, n) = self.dims2(p, "concat_cols")?;
            if m2 != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            cols += n;
        }
        let mut data = Vec::with_capacity(m * cols);
        for i in 0..m {
            for &p in parts {
                let n = self.shape(p)[1];
                data.extend_from_slice(&self.data(p)[i * n..(i + 1) * n]);
            }
        }
        let needs = parts.iter().any(|&p| self.node(p).needs_grad);
        Ok(self.push(
            Tensor {
                shape: vec![m, cols],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start + len > m {
            return Err(TensorError::SliceOutOfBounds { start, len, size: m });
        }
        let data = self.data(a)[start * n..(start + len) * n].to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![len, n],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::SliceRows { a, start, len },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::SliceOutOfBounds { start, len, size: n });
        }
        let av = self.data(a);
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
                requires_grad: false,
                grad: None,
            },
            Op::SliceCols { a, start, len },
            needs,
        ))
    }

    /// View with a new shape; product of dims must match.
    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(a).len() {
            return Err(TensorError::DataShapeMismatch {
                len: self.data(a).len(),
                shape,
            });
        }
        let data = self.data(a).to_vec();
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape,
                data,
                requires_grad: false,
                grad: None,
            },
            Op::Reshape { a },
            needs,
        ))
    }

    /// Sum of all entries, as a scalar (shape [1]).
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let mut s = F::ZERO;
        for &x in self.data(a) {
            s += x;
        }
        let needs = self.node(a).needs_grad;
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![s],
                requires_grad: false,
                grad: None,
            },
            Op::Sum { a },
            needs,
        ))
    }

    /// Mean of a list of scalar tensors, as a scalar. Used to average
    /// per-record losses over a batch.
    pub fn concat_scalars_mean(&mut self, ids: &[TensorId]) -> Result<TensorId> {
        assert!(!ids.is_empty(), "mean of zero scalars");
        let mut rows = Vec::with_capacity(ids.len());
        for &id in ids {
            rows.push(self.reshape(id, vec![1, 1])?);
        }
        let stacked = self.concat_rows(&rows)?;
        let total = self.sum(stacked)?;
        self.scale(total, F::from_f64(1.0 / ids.len() as f64))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires (or feeds) a gradient. Deterministic for a fixed tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.node(loss).tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = vec![None; n];
        grads[loss.0] = Some(vec![F::ONE]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].needs_grad {
                    self.nodes[idx].tensor.grad = Some(g);
                }
            }
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<F>>], id: TensorId, contrib: &[F]) {
        let slot = &mut grads[id.0];
        match slot {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => *slot = Some(contrib.to_vec()),
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop_node(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        // Clone the op descriptor cheaply where possible; saved buffers are
        // referenced through self.
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    // dA = G * B^T
                    let bv = self.data(*b);
                    let mut bt = vec![F::ZERO; n * k];
                    for i in 0..k {
                        for j in 0..n {
                            bt[j * k + i] = bv[i * n + j];
                        }
                    }
                    let da = matmul_raw(g, &bt, m, n, k);
                    Self::accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let av = self.data(*a);
                    let mut at = vec![F::ZERO; k * m];
                    for i in 0..m {
                        for j in 0..k {
                            at[j * m + i] = av[i * k + j];
                        }
                    }
                    let db = matmul_raw(&at, g, k, m, n);
                    Self::accum(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accum(grads, *a, g);
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, g);
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    Self::accum(grads, *a, g);
                }
                if self.needs(*bias) {
                    let n = self.shape(*bias)[0];
                    let rows = g.len() / n;
                    let mut db = vec![F::ZERO; n];
                    for i in 0..rows {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    Self::accum(grads, *bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<F> = g.iter().zip(self.data(*b)).map(|(&gi, &bi)| gi * bi).collect();
                    Self::accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<F> = g.iter().zip(self.data(*a)).map(|(&gi, &ai)| gi * ai).collect();
                    Self::accum(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let da: Vec<F> = g.iter().map(|&gi| gi * *c).collect();
                    Self::accum(grads, *a, &da);
                }
            }
            Op::Gelu { a } => {
                if self.needs(*a) {
                    let da: Vec<F> = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(&gi, &x)| gi * gelu_bwd(x))
                        .collect();
                    Self::accum(grads, *a, &da);
                }
            }
            Op::Softmax { a } | Op::CausalSoftmax { a } => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].tensor.data;
                    let total = y.len();
                    let n = *self.nodes[idx].tensor.shape.last().unwrap();
                    let rows = total / n;
                    let mut da = vec![F::ZERO; total];
                    for i in 0..rows {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut dot = F::ZERO;
                        for j in 0..n {
                            dot += gr[j] * yr[j];
                        }
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    Self::accum(grads, *a, &da);
                }
            }
            Op::LayerNorm { a, gain, bias, aux } => {
                let n = self.shape(*gain)[0];
                let rows = self.nodes[idx].tensor.data.len() / n;
                let gv = self.data(*gain);
                let inv_n = F::from_f64(1.0 / n as f64);
                if self.needs(*gain) {
                    let mut dg = vec![F::ZERO; n];
                    for i in 0..rows {
                        let xhat = &aux[i * (n + 1)..i * (n + 1) + n];
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[j];
                        }
                    }
                    Self::accum(grads, *gain, &dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![F::ZERO; n];
                    for i in 0..rows {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    Self::accum(grads, *bias, &db);
                }
                if self.needs(*a) {
                    let mut da = vec![F::ZERO; rows * n];
                    for i in 0..rows {
                        let xhat = &aux[i * (n + 1)..i * (n + 1) + n];
                        let rstd = aux[i * (n + 1) + n];
                        let mut mean_dxhat = F::ZERO;
                        let mut mean_dxhat_xhat = F::ZERO;
                        for j in 0..n {
                            let dxhat = g[i * n + j] * gv[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat[j];
                        }
                        mean_dxhat *= inv_n;
                        mean_dxhat_xhat *= inv_n;
                        for j in 0..n {
                            let dxhat = g[i * n + j] * gv[j];
                            da[i * n + j] =
                                rstd * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    Self::accum(grads, *a, &da);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                live,
                probs,
            } => {
                if self.needs(*logits) {
                    let v = self.shape(*logits)[1];
                    let rows = targets.len();
                    let scale = g[0] * F::from_f64(1.0 / *live as f64);
                    let mut dl = vec![F::ZERO; rows * v];
                    for i in 0..rows {
                        if !mask[i] {
                            continue; // exactly zero gradient at masked rows
                        }
                        for j in 0..v {
                            let p = probs[i * v + j];
                            let indicator = if j == targets[i] { F::ONE } else { F::ZERO };
                            dl[i * v + j] = scale * (p - indicator);
                        }
                    }
                    Self::accum(grads, *logits, &dl);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let rows = self.shape(*table)[0];
                    let mut dt = vec![F::ZERO; rows * d];
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                    Self::accum(grads, *table, &dt);
                }
            }
            Op::Transpose { a } => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![F::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    Self::accum(grads, *a, &da);
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.data(p).len();
                    if self.needs(p) {
                        Self::accum(grads, p, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let m = self.nodes[idx].tensor.shape[0];
                let cols = self.nodes[idx].tensor.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[1];
                    if self.needs(p) {
                        let mut dp = vec![F::ZERO; m * n];
                        for i in 0..m {
                            dp[i * n..(i + 1) * n]
                                .copy_from_slice(&g[i * cols + offset..i * cols + offset + n]);
                        }
                        Self::accum(grads, p, &dp);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { a, start, len } => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![F::ZERO; m * n];
                    da[start * n..(start + len) * n].copy_from_slice(g);
                    Self::accum(grads, *a, &da);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.needs(*a) {
                    let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![F::ZERO; m * n];
                    for i in 0..m {
                        for j in 0..*len {
                            da[i * n + start + j] = g[i * len + j];
                        }
                    }
                    Self::accum(grads, *a, &da);
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    Self::accum(grads, *a, g);
                }
            }
            Op::Sum { a } => {
                if self.needs(*a) {
                    let da = vec![g[0]; self.data(*a).len()];
                    Self::accum(grads, *a, &da);
                }
            }
        }
    }
}

fn softmax_row<F: Scalar>(row: &mut [F]) {
    let mut mx = F::neg_infinity();
    for &x in row.iter() {
        mx = mx.maximum(x);
    }
    let mut sum = F::ZERO;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    let inv = F::ONE / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::ONE + u.tanh())
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let a = F::from_f64(GELU_A);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::ONE - t * t;
    half * (F::ONE + t) + half * x * sech2 * c * (F::ONE + three * a * x * x)
}

/// Row-major m x k times k x n.
pub fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::ZERO; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::ZERO {
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
