//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every forward primitive appends a node holding the output value and the
//! information its backward rule needs. Nodes only ever reference earlier
//! nodes, so the tape is topologically ordered by construction and one
//! reverse sweep propagates gradients to every leaf that requires them.
//!
//! All primitives operate on rank-2 tensors (scalars are 1x1). Reductions
//! accumulate sequentially in row-major order (in f64, cast to storage
//! precision at the end), and dense matrix products go through a fixed
//! single-threaded kernel, so identical inputs always produce bitwise
//! identical outputs. Every primitive verifies its output is finite and
//! fails loudly otherwise.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Variance floor added inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T: Element> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// out = a + c * b
    AddScaled(Var, Var, T),
    Scale(Var, T),
    AddScalar(Var, T),
    /// Broadcast a 1xM row onto every row of an NxM matrix.
    AddRow(Var, Var),
    /// out[i][j] = a[i][j] - c[i][0]
    SubColBroadcast(Var, Var),
    /// Elementwise product with a constant mask (no gradient to the mask).
    MulConst(Var, Tensor<T>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    MeanRows(Var),
    /// Mean absolute elementwise difference, as a scalar.
    L1Distance(Var, Var),
    Exp(Var),
    Log(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        inv_norm: Vec<T>,
    },
    /// Scaled-dot-product attention over per-image blocks of `n_tok` rows,
    /// with heads split along the feature axis.
    Attention {
        q: Var,
        k: Var,
        v: Var,
        n_tok: usize,
        heads: usize,
        probs: Vec<T>,
    },
    /// Mean binary cross-entropy of logits against constant targets.
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
        sig: Vec<T>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradient per tape variable, populated by [`Tape::backward`].
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Recorded forward computation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn view<T: Element>(t: &Tensor<T>) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((t.rows(), t.cols()), t.data()).expect("tensor is contiguous rank-2")
}

fn view_mut<T: Element>(t: &mut Tensor<T>) -> ArrayViewMut2<'_, T> {
    let (r, c) = (t.rows(), t.cols());
    ArrayViewMut2::from_shape((r, c), t.data_mut()).expect("tensor is contiguous rank-2")
}

/// out = alpha * op(a) . op(b) + beta * out, with optional transposes.
fn mm_into<T: Element>(
    alpha: T,
    a: &Tensor<T>,
    a_t: bool,
    b: &Tensor<T>,
    b_t: bool,
    beta: T,
    out: &mut Tensor<T>,
) {
    let av = view(a);
    let bv = view(b);
    let av = if a_t { av.reversed_axes() } else { av };
    let bv = if b_t { bv.reversed_axes() } else { bv };
    general_mat_mul(alpha, &av, &bv, beta, &mut view_mut(out));
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value recorded at `var`.
    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    /// Record an input tensor. Gradient flows into it only when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        if !t.is_matrix() {
            return Err(Error::shape("leaf", format!("rank-2 required, got {:?}", t.shape())));
        }
        let needs = t.requires_grad();
        self.push("leaf", t.clone(), needs, Op::Leaf)
    }

    /// Record an input with gradient flow disabled regardless of its flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        if !t.is_matrix() {
            return Err(Error::shape("constant", format!("rank-2 required, got {:?}", t.shape())));
        }
        self.push("constant", t.clone(), false, Op::Leaf)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let (br, bc) = (self.value(b).rows(), self.value(b).cols());
        if ac != br {
            return Err(Error::shape("matmul", format!("[{ar}x{ac}] . [{br}x{bc}]")));
        }
        let mut out = Tensor::zeros(vec![ar, bc]);
        mm_into(T::one(), self.value(a), false, self.value(b), false, T::zero(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", out, needs, Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                *out.at_mut(j, i) = self.value(a).at(i, j);
            }
        }
        let needs = self.needs(a);
        self.push("transpose", out, needs, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push("add", out, needs, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push("sub", out, needs, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push("mul", out, needs, Op::Mul(a, b))
    }

    /// out = a + c * b, elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: T) -> Result<Var> {
        self.check_same_shape("add_scaled", a, b)?;
        let out = self.zip(a, b, |x, y| x + c * y);
        let needs = self.needs(a) || self.needs(b);
        self.push("add_scaled", out, needs, Op::AddScaled(a, b, c))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.map(a, |x| c * x);
        let needs = self.needs(a);
        self.push("scale", out, needs, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.map(a, |x| x + c);
        let needs = self.needs(a);
        self.push("add_scalar", out, needs, Op::AddScalar(a, c))
    }

    /// Broadcast-add a 1xM row vector to each row of an NxM matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let rv = self.value(row);
        if rv.rows() != 1 || rv.cols() != m {
            return Err(Error::shape(
                "add_row",
                format!("[{n}x{m}] + {:?}", rv.shape()),
            ));
        }
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..n {
            for j in 0..m {
                *out.at_mut(i, j) = self.value(a).at(i, j) + self.value(row).at(0, j);
            }
        }
        let needs = self.needs(a) || self.needs(row);
        self.push("add_row", out, needs, Op::AddRow(a, row))
    }

    /// out[i][j] = a[i][j] - col[i][0], broadcasting an Nx1 column.
    pub fn sub_col_broadcast(&mut self, a: Var, col: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let cv = self.value(col);
        if cv.rows() != n || cv.cols() != 1 {
            return Err(Error::shape(
                "sub_col_broadcast",
                format!("[{n}x{m}] - {:?}", cv.shape()),
            ));
        }
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..n {
            let c = self.value(col).at(i, 0);
            for j in 0..m {
                *out.at_mut(i, j) = self.value(a).at(i, j) - c;
            }
        }
        let needs = self.needs(a) || self.needs(col);
        self.push("sub_col_broadcast", out, needs, Op::SubColBroadcast(a, col))
    }

    /// Elementwise product with a constant tensor; no gradient to the mask.
    pub fn mul_const(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != mask.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", self.value(a).shape(), mask.shape()),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(mask.data().iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push("mul_const", out, needs, Op::MulConst(a, mask.clone()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows", "no parts"));
        }
        let m = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != m {
                return Err(Error::shape("concat_rows", "column counts differ"));
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * m);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(vec![rows, m], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_rows", out, needs, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols", "no parts"));
        }
        let n = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::shape("concat_cols", "row counts differ"));
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(vec![n, cols]);
        let mut off = 0;
        for &p in parts {
            let pc = self.value(p).cols();
            for i in 0..n {
                for j in 0..pc {
                    *out.at_mut(i, off + j) = self.value(p).at(i, j);
                }
            }
            off += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push("concat_cols", out, needs, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if start + len > n || len == 0 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of [{n}x{m}]", start + len),
            ));
        }
        let data = self.value(a).data()[start * m..(start + len) * m].to_vec();
        let out = Tensor::from_vec(vec![len, m], data)?;
        let needs = self.needs(a);
        self.push("slice_rows", out, needs, Op::SliceRows(a, start, len))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if start + len > m || len == 0 {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of [{n}x{m}]", start + len),
            ));
        }
        let mut out = Tensor::zeros(vec![n, len]);
        for i in 0..n {
            for j in 0..len {
                *out.at_mut(i, j) = self.value(a).at(i, start + j);
            }
        }
        let needs = self.needs(a);
        self.push("slice_cols", out, needs, Op::SliceCols(a, start, len))
    }

    /// Gather rows by index; duplicate indices are allowed.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        if indices.is_empty() {
            return Err(Error::invalid("gather_rows", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::invalid("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.value(a).row_slice(i));
        }
        let out = Tensor::from_vec(vec![indices.len(), m], data)?;
        let needs = self.needs(a);
        self.push("gather_rows", out, needs, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        let out = Tensor::scalar(T::from_f64(s));
        let needs = self.needs(a);
        self.push("sum_all", out, needs, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        let out = Tensor::scalar(T::from_f64(s / n));
        let needs = self.needs(a);
        self.push("mean_all", out, needs, Op::MeanAll(a))
    }

    /// Sum over the column axis: [N x M] -> [N x 1].
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(vec![n, 1]);
        for i in 0..n {
            let mut s = 0.0f64;
            for j in 0..m {
                s += self.value(a).at(i, j).to_f64();
            }
            *out.at_mut(i, 0) = T::from_f64(s);
        }
        let needs = self.needs(a);
        self.push("sum_cols", out, needs, Op::SumCols(a))
    }

    /// Mean over the row axis: [N x M] -> [1 x M].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(vec![1, m]);
        for j in 0..m {
            let mut s = 0.0f64;
            for i in 0..n {
                s += self.value(a).at(i, j).to_f64();
            }
            *out.at_mut(0, j) = T::from_f64(s / n as f64);
        }
        let needs = self.needs(a);
        self.push("mean_rows", out, needs, Op::MeanRows(a))
    }

    /// Mean absolute elementwise difference between two same-shape tensors.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("l1_distance", a, b)?;
        let n = self.value(a).numel() as f64;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
            .sum();
        let out = Tensor::scalar(T::from_f64(s / n));
        let needs = self.needs(a) || self.needs(b);
        self.push("l1_distance", out, needs, Op::L1Distance(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| T::from_f64(x.to_f64().exp()));
        let needs = self.needs(a);
        self.push("exp", out, needs, Op::Exp(a))
    }

    /// Natural logarithm; non-positive inputs surface as non-finite errors.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| T::from_f64(x.to_f64().ln()));
        let needs = self.needs(a);
        self.push("log", out, needs, Op::Log(a))
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = (self.value(a).rows(), self.value(a).cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..n {
            let row = self.value(a).row_slice(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
            let mut den = 0.0f64;
            let mut expd = vec![0.0f64; m];
            for j in 0..m {
                let e = (row[j].to_f64() - max).exp();
                expd[j] = e;
                den += e;
            }
            for j in 0..m {
                *out.at_mut(i, j) = T::from_f64(expd[j] / den);
            }
        }
        let needs = self.needs(a);
        self.push("softmax_rows", out, needs, Op::SoftmaxRows(a))
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| {
            let v = x.to_f64();
            T::from_f64(0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2)))
        });
        let needs = self.needs(a);
        self.push("gelu", out, needs, Op::Gelu(a))
    }

    /// Per-row layer normalization with affine parameters (1xM each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, m) = (self.value(x).rows(), self.value(x).cols());
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(v);
            if t.rows() != 1 || t.cols() != m {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} must be [1x{m}], got {:?}", t.shape()),
                ));
            }
        }
        let mut xhat = Tensor::zeros(vec![n, m]);
        let mut inv_std = Vec::with_capacity(n);
        let mut out = Tensor::zeros(vec![n, m]);
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            let xhd = xhat.data_mut();
            let od = out.data_mut();
            for i in 0..n {
                let row = &xd[i * m..][..m];
                let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / m as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / m as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std.push(T::from_f64(inv));
                let xhrow = &mut xhd[i * m..][..m];
                let orow = &mut od[i * m..][..m];
                for j in 0..m {
                    let xh = (row[j].to_f64() - mean) * inv;
                    xhrow[j] = T::from_f64(xh);
                    orow[j] = T::from_f64(gd[j].to_f64() * xh + bd[j].to_f64());
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            out,
            needs,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = (self.value(x).rows(), self.value(x).cols());
        let mut out = Tensor::zeros(vec![n, m]);
        let mut inv_norm = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.value(x).row_slice(i);
            let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            let inv = 1.0 / norm;
            inv_norm.push(T::from_f64(inv));
            for j in 0..m {
                *out.at_mut(i, j) = T::from_f64(row[j].to_f64() * inv);
            }
        }
        let needs = self.needs(x);
        self.push("l2_normalize_rows", out, needs, Op::L2NormalizeRows { x, inv_norm })
    }

    /// Multi-head scaled-dot-product attention. Inputs are [B*n_tok x D]
    /// with one independent attention per block of `n_tok` rows; heads split
    /// the feature axis evenly and scores are scaled by 1/sqrt(D/heads).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_tok: usize, heads: usize) -> Result<Var> {
        self.check_same_shape("attention", q, k)?;
        self.check_same_shape("attention", q, v)?;
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if n_tok == 0 || rows % n_tok != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows not divisible by {n_tok} tokens"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{d} features not divisible by {heads} heads"),
            ));
        }
        let blocks = rows / n_tok;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(vec![rows, d]);
        let mut probs = vec![T::zero(); blocks * heads * n_tok * n_tok];
        {
            let qd = self.value(q).data();
            let kd = self.value(k).data();
            let vd = self.value(v).data();
            let od = out.data_mut();
            let mut scores = vec![0.0f64; n_tok];
            let mut mixed = vec![0.0f64; dh];
            for b in 0..blocks {
                let r0 = b * n_tok;
                for h in 0..heads {
                    let c0 = h * dh;
                    let pbase = (b * heads + h) * n_tok * n_tok;
                    for i in 0..n_tok {
                        // scores against every key, then softmax
                        let qrow = &qd[(r0 + i) * d + c0..][..dh];
                        let mut max = f64::NEG_INFINITY;
                        for j in 0..n_tok {
                            let krow = &kd[(r0 + j) * d + c0..][..dh];
                            let mut s = 0.0f64;
                            for c in 0..dh {
                                s += qrow[c].to_f64() * krow[c].to_f64();
                            }
                            let s = s * scale;
                            scores[j] = s;
                            max = max.max(s);
                        }
                        let mut den = 0.0f64;
                        for s in scores.iter_mut() {
                            *s = (*s - max).exp();
                            den += *s;
                        }
                        mixed.fill(0.0);
                        for j in 0..n_tok {
                            let p = scores[j] / den;
                            probs[pbase + i * n_tok + j] = T::from_f64(p);
                            let vrow = &vd[(r0 + j) * d + c0..][..dh];
                            for c in 0..dh {
                                mixed[c] += p * vrow[c].to_f64();
                            }
                        }
                        let orow = &mut od[(r0 + i) * d + c0..][..dh];
                        for c in 0..dh {
                            orow[c] = T::from_f64(mixed[c]);
                        }
                    }
                }
            }
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "attention",
            out,
            needs,
            Op::Attention {
                q,
                k,
                v,
                n_tok,
                heads,
                probs,
            },
        )
    }

    /// Mean over all elements of binary cross-entropy between logits and
    /// constant 0/1 targets, computed in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        if self.value(logits).shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?} vs {:?}", self.value(logits).shape(), targets.shape()),
            ));
        }
        let n = self.value(logits).numel();
        let mut sig = Vec::with_capacity(n);
        let mut acc = 0.0f64;
        for (xv, yv) in self.value(logits).data().iter().zip(targets.data().iter()) {
            let x = xv.to_f64();
            let y = yv.to_f64();
            // max(x,0) - x*y + ln(1 + exp(-|x|))
            acc += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
            sig.push(T::from_f64(1.0 / (1.0 + (-x).exp())));
        }
        let out = Tensor::scalar(T::from_f64(acc / n as f64));
        let needs = self.needs(logits);
        self.push(
            "bce_with_logits",
            out,
            needs,
            Op::BceWithLogits {
                logits,
                targets: targets.clone(),
                sig,
            },
        )
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let src = self.value(a);
        let mut out = Tensor::zeros(src.shape().to_vec());
        for (o, &x) in out.data_mut().iter_mut().zip(src.data().iter()) {
            *o = f(x);
        }
        out
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (sa, sb) = (self.value(a), self.value(b));
        let mut out = Tensor::zeros(sa.shape().to_vec());
        for i in 0..out.numel() {
            out.data_mut()[i] = f(sa.data()[i], sb.data()[i]);
        }
        out
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per variable
    /// that participated and required it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("loss var {} not on this tape", loss.0)));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    mm_into(T::one(), g, false, self.value(*b), true, T::one(), ga);
                }
                if self.needs(*b) {
                    let gb = slot(grads, *b, self.value(*b).shape());
                    mm_into(T::one(), self.value(*a), true, g, false, T::one(), gb);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            *ga.at_mut(c, r) = ga.at(c, r) + g.at(r, c);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(slot(grads, v, g.shape()), g.data(), T::one());
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), T::one());
                }
                if self.needs(*b) {
                    add_into(slot(grads, *b, g.shape()), g.data(), -T::one());
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data().iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_into(slot(grads, *a, g.shape()), &prod, T::one());
                }
                if self.needs(*b) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_into(slot(grads, *b, g.shape()), &prod, T::one());
                }
            }
            Op::AddScaled(a, b, c) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), T::one());
                }
                if self.needs(*b) {
                    add_into(slot(grads, *b, g.shape()), g.data(), *c);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), *c);
                }
            }
            Op::AddScalar(a, _) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), T::one());
                }
            }
            Op::AddRow(a, row) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), T::one());
                }
                if self.needs(*row) {
                    let gr = slot(grads, *row, self.value(*row).shape());
                    for i2 in 0..g.rows() {
                        for j in 0..g.cols() {
                            *gr.at_mut(0, j) = gr.at(0, j) + g.at(i2, j);
                        }
                    }
                }
            }
            Op::SubColBroadcast(a, col) => {
                if self.needs(*a) {
                    add_into(slot(grads, *a, g.shape()), g.data(), T::one());
                }
                if self.needs(*col) {
                    let gc = slot(grads, *col, self.value(*col).shape());
                    for i2 in 0..g.rows() {
                        let mut s = 0.0f64;
                        for j in 0..g.cols() {
                            s += g.at(i2, j).to_f64();
                        }
                        *gc.at_mut(i2, 0) = gc.at(i2, 0) - T::from_f64(s);
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if self.needs(*a) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(mask.data().iter())
                        .map(|(&x, &m)| x * m)
                        .collect();
                    add_into(slot(grads, *a, g.shape()), &prod, T::one());
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.needs(p) {
                        let m = g.cols();
                        let gp = slot(grads, p, self.value(p).shape());
                        add_into(gp, &g.data()[r0 * m..(r0 + pr) * m], T::one());
                    }
                    r0 += pr;
                }
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.needs(p) {
                        let gp = slot(grads, p, self.value(p).shape());
                        for i2 in 0..g.rows() {
                            for j in 0..pc {
                                *gp.at_mut(i2, j) = gp.at(i2, j) + g.at(i2, c0 + j);
                            }
                        }
                    }
                    c0 += pc;
                }
            }
            Op::SliceRows(a, start, _len) => {
                if self.needs(*a) {
                    let m = g.cols();
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for i2 in 0..g.rows() {
                        for j in 0..m {
                            *ga.at_mut(start + i2, j) = ga.at(start + i2, j) + g.at(i2, j);
                        }
                    }
                }
            }
            Op::SliceCols(a, start, _len) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for i2 in 0..g.rows() {
                        for j in 0..g.cols() {
                            *ga.at_mut(i2, start + j) = ga.at(i2, start + j) + g.at(i2, j);
                        }
                    }
                }
            }
            Op::GatherRows(a, indices) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for (r, &src) in indices.iter().enumerate() {
                        for j in 0..g.cols() {
                            *ga.at_mut(src, j) = ga.at(src, j) + g.at(r, j);
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let gi = g.item();
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for v in ga.data_mut() {
                        *v = *v + gi;
                    }
                }
            }
            Op::MeanAll(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).numel();
                    let gi = g.item() * T::from_f64(1.0 / n as f64);
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for v in ga.data_mut() {
                        *v = *v + gi;
                    }
                }
            }
            Op::SumCols(a) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for i2 in 0..ga.rows() {
                        let gi = g.at(i2, 0);
                        for j in 0..ga.cols() {
                            *ga.at_mut(i2, j) = ga.at(i2, j) + gi;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if self.needs(*a) {
                    let n = self.value(*a).rows();
                    let inv = T::from_f64(1.0 / n as f64);
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for i2 in 0..ga.rows() {
                        for j in 0..ga.cols() {
                            *ga.at_mut(i2, j) = ga.at(i2, j) + g.at(0, j) * inv;
                        }
                    }
                }
            }
            Op::L1Distance(a, b) => {
                let n = self.value(*a).numel();
                let w = g.item().to_f64() / n as f64;
                let diffs: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data().iter())
                    .map(|(x, y)| {
                        let d = x.to_f64() - y.to_f64();
                        T::from_f64(if d > 0.0 { w } else if d < 0.0 { -w } else { 0.0 })
                    })
                    .collect();
                if self.needs(*a) {
                    add_into(slot(grads, *a, self.value(*a).shape()), &diffs, T::one());
                }
                if self.needs(*b) {
                    add_into(slot(grads, *b, self.value(*b).shape()), &diffs, -T::one());
                }
            }
            Op::Exp(a) => {
                if self.needs(*a) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(out.data().iter())
                        .map(|(&x, &y)| x * y)
                        .collect();
                    add_into(slot(grads, *a, g.shape()), &prod, T::one());
                }
            }
            Op::Log(a) => {
                if self.needs(*a) {
                    let prod: Vec<T> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data().iter())
                        .map(|(&x, &y)| x / y)
                        .collect();
                    add_into(slot(grads, *a, g.shape()), &prod, T::one());
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for i2 in 0..out.rows() {
                        let mut dot = 0.0f64;
                        for j in 0..out.cols() {
                            dot += g.at(i2, j).to_f64() * out.at(i2, j).to_f64();
                        }
                        for j in 0..out.cols() {
                            let d = out.at(i2, j).to_f64() * (g.at(i2, j).to_f64() - dot);
                            *ga.at_mut(i2, j) = ga.at(i2, j) + T::from_f64(d);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let derivs: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(g.data().iter())
                        .map(|(x, gd)| {
                            let v = x.to_f64();
                            let cdf = 0.5 * (1.0 + libm::erf(v / std::f64::consts::SQRT_2));
                            let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                            T::from_f64((cdf + v * pdf) * gd.to_f64())
                        })
                        .collect();
                    add_into(slot(grads, *a, g.shape()), &derivs, T::one());
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = (xhat.rows(), xhat.cols());
                let gd = g.data();
                let xhd = xhat.data();
                if self.needs(*gamma) {
                    let mut sums = vec![0.0f64; m];
                    for i2 in 0..n {
                        let grow = &gd[i2 * m..][..m];
                        let xhrow = &xhd[i2 * m..][..m];
                        for j in 0..m {
                            sums[j] += grow[j].to_f64() * xhrow[j].to_f64();
                        }
                    }
                    let gg = slot(grads, *gamma, self.value(*gamma).shape());
                    for (o, s) in gg.data_mut().iter_mut().zip(sums.iter()) {
                        *o = *o + T::from_f64(*s);
                    }
                }
                if self.needs(*beta) {
                    let mut sums = vec![0.0f64; m];
                    for i2 in 0..n {
                        let grow = &gd[i2 * m..][..m];
                        for j in 0..m {
                            sums[j] += grow[j].to_f64();
                        }
                    }
                    let gb = slot(grads, *beta, self.value(*beta).shape());
                    for (o, s) in gb.data_mut().iter_mut().zip(sums.iter()) {
                        *o = *o + T::from_f64(*s);
                    }
                }
                if self.needs(*x) {
                    let gmd = self.value(*gamma).data();
                    let gx = slot(grads, *x, self.value(*x).shape());
                    let gxd = gx.data_mut();
                    for i2 in 0..n {
                        let inv = inv_std[i2].to_f64();
                        let grow = &gd[i2 * m..][..m];
                        let xhrow = &xhd[i2 * m..][..m];
                        let mut mean_dxhat = 0.0f64;
                        let mut mean_dxhat_xhat = 0.0f64;
                        for j in 0..m {
                            let dxh = grow[j].to_f64() * gmd[j].to_f64();
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhrow[j].to_f64();
                        }
                        mean_dxhat /= m as f64;
                        mean_dxhat_xhat /= m as f64;
                        let gxrow = &mut gxd[i2 * m..][..m];
                        for j in 0..m {
                            let dxh = grow[j].to_f64() * gmd[j].to_f64();
                            let d = inv * (dxh - mean_dxhat - xhrow[j].to_f64() * mean_dxhat_xhat);
                            gxrow[j] = gxrow[j] + T::from_f64(d);
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, inv_norm } => {
                if self.needs(*x) {
                    let gx = slot(grads, *x, self.value(*x).shape());
                    for i2 in 0..out.rows() {
                        let inv = inv_norm[i2].to_f64();
                        let mut dot = 0.0f64;
                        for j in 0..out.cols() {
                            dot += g.at(i2, j).to_f64() * out.at(i2, j).to_f64();
                        }
                        for j in 0..out.cols() {
                            let d = inv * (g.at(i2, j).to_f64() - out.at(i2, j).to_f64() * dot);
                            *gx.at_mut(i2, j) = gx.at(i2, j) + T::from_f64(d);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                n_tok,
                heads,
                probs,
            } => {
                let d = self.value(*q).cols();
                let dh = d / heads;
                let blocks = self.value(*q).rows() / n_tok;
                let scale = 1.0 / (dh as f64).sqrt();
                let needs_q = self.needs(*q);
                let needs_k = self.needs(*k);
                let needs_v = self.needs(*v);
                // per-block scratch in f64; gradients land in one full-shape
                // buffer per input so each element gets a single rounded add
                let nt = *n_tok;
                let numel = self.value(*q).numel();
                let mut acc_q = if needs_q { vec![0.0f64; numel] } else { Vec::new() };
                let mut acc_k = if needs_k { vec![0.0f64; numel] } else { Vec::new() };
                let mut acc_v = if needs_v { vec![0.0f64; numel] } else { Vec::new() };
                {
                    let qd = self.value(*q).data();
                    let kd = self.value(*k).data();
                    let vd = self.value(*v).data();
                    let gd = g.data();
                    let mut d_scores = vec![0.0f64; nt * nt];
                    for b in 0..blocks {
                        let r0 = b * nt;
                        for h in 0..*heads {
                            let c0 = h * dh;
                            let pbase = (b * heads + h) * nt * nt;
                            // dA[i][j] = sum_c dOut[i][c] * V[j][c]
                            for i2 in 0..nt {
                                let grow = &gd[(r0 + i2) * d + c0..][..dh];
                                for j in 0..nt {
                                    let vrow = &vd[(r0 + j) * d + c0..][..dh];
                                    let mut s = 0.0f64;
                                    for c in 0..dh {
                                        s += grow[c].to_f64() * vrow[c].to_f64();
                                    }
                                    d_scores[i2 * nt + j] = s;
                                }
                            }
                            // softmax backward rows: dS = A*(dA - sum_j dA*A)
                            for i2 in 0..nt {
                                let mut dot = 0.0f64;
                                for j in 0..nt {
                                    dot += d_scores[i2 * nt + j] * probs[pbase + i2 * nt + j].to_f64();
                                }
                                for j in 0..nt {
                                    let a_ij = probs[pbase + i2 * nt + j].to_f64();
                                    d_scores[i2 * nt + j] = a_ij * (d_scores[i2 * nt + j] - dot) * scale;
                                }
                            }
                            if needs_v {
                                for i2 in 0..nt {
                                    let grow = &gd[(r0 + i2) * d + c0..][..dh];
                                    for j in 0..nt {
                                        let p = probs[pbase + i2 * nt + j].to_f64();
                                        let vacc = &mut acc_v[(r0 + j) * d + c0..][..dh];
                                        for c in 0..dh {
                                            vacc[c] += p * grow[c].to_f64();
                                        }
                                    }
                                }
                            }
                            if needs_q {
                                for i2 in 0..nt {
                                    let qacc = &mut acc_q[(r0 + i2) * d + c0..][..dh];
                                    for j in 0..nt {
                                        let ds = d_scores[i2 * nt + j];
                                        let krow = &kd[(r0 + j) * d + c0..][..dh];
                                        for c in 0..dh {
                                            qacc[c] += ds * krow[c].to_f64();
                                        }
                                    }
                                }
                            }
                            if needs_k {
                                for i2 in 0..nt {
                                    let grow2 = &qd[(r0 + i2) * d + c0..][..dh];
                                    for j in 0..nt {
                                        let ds = d_scores[i2 * nt + j];
                                        let kacc = &mut acc_k[(r0 + j) * d + c0..][..dh];
                                        for c in 0..dh {
                                            kacc[c] += ds * grow2[c].to_f64();
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                for (need, var, acc) in [
                    (needs_v, *v, &acc_v),
                    (needs_q, *q, &acc_q),
                    (needs_k, *k, &acc_k),
                ] {
                    if need {
                        let gt = slot(grads, var, self.value(var).shape());
                        for (o, s) in gt.data_mut().iter_mut().zip(acc.iter()) {
                            *o = *o + T::from_f64(*s);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                sig,
            } => {
                if self.needs(*logits) {
                    let n = targets.numel() as f64;
                    let w = g.item().to_f64() / n;
                    let contrib: Vec<T> = sig
                        .iter()
                        .zip(targets.data().iter())
                        .map(|(s, y)| T::from_f64((s.to_f64() - y.to_f64()) * w))
                        .collect();
                    add_into(slot(grads, *logits, self.value(*logits).shape()), &contrib, T::one());
                }
            }
        }
        Ok(())
    }
}

fn slot<'g, T: Element>(
    grads: &'g mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'g mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
}

fn add_into<T: Element>(acc: &mut Tensor<T>, contrib: &[T], scale: T) {
    for (a, &c) in acc.data_mut().iter_mut().zip(contrib.iter()) {
        *a = *a + scale * c;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        let id = tape.leaf(&t64(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        let out = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![1, 2], vec![0.0, 0.0])).unwrap();
        let s = tape.softmax_rows(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape
            .leaf(&t64(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, -30.0]))
            .unwrap();
        let s = tape.softmax_rows(a).unwrap();
        for i in 0..2 {
            let sum: f64 = tape.value(s).row_slice(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero_before_affine() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 4], vec![3.0, 3.0, 3.0, 3.0])).unwrap();
        let gamma = tape.leaf(&t64(vec![1, 4], vec![1.0; 4])).unwrap();
        let beta = tape.leaf(&t64(vec![1, 4], vec![0.0; 4])).unwrap();
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        for &v in tape.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(&t64(vec![2, 3], vec![5.0, -1.0, 2.0, 0.5, 9.0, -4.0]).with_grad())
            .unwrap();
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_square_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0).with_grad()).unwrap();
        let loss = tape.mul(x, x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 2], vec![1.0, 2.0]).with_grad()).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 2], vec![1.0, 2.0])).unwrap();
        let loss = tape.sum_all(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn log_of_negative_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 1], vec![-1.0])).unwrap();
        assert!(matches!(tape.log(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn exp_overflow_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 1], vec![1000.0])).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![2, 3], vec![0.0; 6])).unwrap();
        let b = tape.leaf(&t64(vec![2, 3], vec![0.0; 6])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn bce_zero_logits_two_classes_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&t64(vec![3, 2], vec![0.0; 6])).unwrap();
        let targets = t64(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
        let loss = tape.bce_with_logits(logits, &targets).unwrap();
        assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_saturated_correct_logits_vanish() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(&t64(vec![1, 3], vec![40.0, -40.0, -40.0])).unwrap();
        let targets = t64(vec![1, 3], vec![1.0, 0.0, 0.0]);
        let loss = tape.bce_with_logits(logits, &targets).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn attention_probs_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let q = tape.leaf(&t64(vec![4, 4], (0..16).map(|i| i as f64 * 0.1).collect())).unwrap();
        let k = tape.leaf(&t64(vec![4, 4], (0..16).map(|i| (15 - i) as f64 * 0.1).collect())).unwrap();
        let ones = t64(vec![4, 4], vec![1.0; 16]);
        let v = tape.leaf(&ones).unwrap();
        // with V = all-ones, each output element is the row sum of the probs
        let out = tape.attention(q, k, v, 2, 2).unwrap();
        for &o in tape.value(out).data() {
            assert!((o - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn determinism_same_inputs_bitwise() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape
                .leaf(&Tensor::<f32>::from_vec(vec![3, 3], (0..9).map(|i| (i as f32).sin()).collect()).unwrap())
                .unwrap();
            let b = tape.matmul(a, a).unwrap();
            let c = tape.softmax_rows(b).unwrap();
            let d = tape.gelu(c).unwrap();
            let s = tape.sum_all(d).unwrap();
            tape.value(s).item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
