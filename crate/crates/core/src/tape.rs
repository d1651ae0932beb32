//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records every operation of a forward evaluation; [`Tape::backward`]
//! replays it in reverse, producing exact gradients. Gradient buffers are
//! allocated lazily, only when a node actually receives a contribution, so a
//! branch cut off by [`Tape::detach`] leaves its upstream nodes untouched
//! rather than accumulating explicit zeros. All loops run in a fixed order;
//! identical tapes produce bit-identical gradients.

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Dense row-major matrix. Row vectors are `1 x n`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{rows}x{cols} = {} values", rows * cols),
                got: format!("{} values", data.len()),
                context: "Matrix::new".into(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row_vec(data: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.cols + col] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a (m x n) * b (n x p)`.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a (m x n) * b^T` where `b` is `p x n`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = &a.data[i * a.cols..(i + 1) * a.cols];
        for j in 0..b.rows {
            let brow = &b.data[j * b.cols..(j + 1) * b.cols];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    out
}

/// `a^T * b` where `a` is `n x m` and `b` is `n x p`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = &a.data[k * a.cols..(k + 1) * a.cols];
        let brow = &b.data[k * b.cols..(k + 1) * b.cols];
        for (i, av) in arow.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const LAYERNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param { offset: usize },
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { a: NodeId, mul: f64 },
    AddRow { a: NodeId, row: NodeId },
    MulRow { a: NodeId, row: NodeId },
    LayerNorm { a: NodeId, inv_std: Vec<f64> },
    Silu { a: NodeId },
    Relu { a: NodeId },
    Softplus { a: NodeId },
    SoftmaxRows { a: NodeId },
    Transpose { a: NodeId },
    ConcatRows { a: NodeId, b: NodeId },
    SliceRows { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    Gather { a: NodeId, map: Arc<Vec<usize>> },
    Detach,
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients of one backward pass, indexed by node. Nodes that received no
/// contribution stay `None`.
pub struct Gradients {
    by_node: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows, v.cols)
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, context: &str) -> Result<()> {
        if !self.value(a).same_shape(self.value(b)) {
            let (ar, ac) = self.shape_of(a);
            let (br, bc) = self.shape_of(b);
            return Err(CoreError::ShapeMismatch {
                expected: format!("{ar}x{ac}"),
                got: format!("{br}x{bc}"),
                context: context.into(),
            });
        }
        Ok(())
    }

    /// A constant input: no gradient is tracked into it, but its gradient is
    /// still available from [`Gradients::get`] if contributions reach it.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    /// A leaf bound to `offset` in a flat parameter vector; its gradient is
    /// scattered there by [`Tape::backward`].
    pub fn param(&mut self, value: Matrix, offset: usize) -> NodeId {
        self.push(value, Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape_of(a);
        let (br, bc) = self.shape_of(b);
        if ac != br {
            return Err(CoreError::ShapeMismatch {
                expected: format!("inner dims to agree ({ar}x{ac} * {br}x{bc})"),
                got: format!("{ac} vs {br}"),
                context: "matmul".into(),
            });
        }
        let value = matmul_nn(self.value(a), self.value(b));
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x + y).collect();
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "sub")?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x - y).collect();
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "mul")?;
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let data = va.data.iter().zip(vb.data.iter()).map(|(x, y)| x * y).collect();
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data,
            }
        };
        Ok(self.push(value, Op::Mul { a, b }))
    }

    /// Elementwise `mul * a + add`.
    pub fn affine(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let va = self.value(a);
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| mul * x + add).collect(),
        };
        self.push(value, Op::Affine { a, mul })
    }

    pub fn scale(&mut self, a: NodeId, mul: f64) -> NodeId {
        self.affine(a, mul, 0.0)
    }

    /// Adds a `1 x cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape_of(a);
        let (rr, rc) = self.shape_of(row);
        if rr != 1 || rc != ac {
            return Err(CoreError::ShapeMismatch {
                expected: format!("1x{ac}"),
                got: format!("{rr}x{rc}"),
                context: "add_row".into(),
            });
        }
        let value = {
            let (va, vr) = (self.value(a), self.value(row));
            let mut data = va.data.clone();
            for r in 0..va.rows {
                for c in 0..va.cols {
                    data[r * va.cols + c] += vr.data[c];
                }
            }
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data,
            }
        };
        Ok(self.push(value, Op::AddRow { a, row }))
    }

    /// Multiplies every row of `a` elementwise with a `1 x cols` row vector.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape_of(a);
        let (rr, rc) = self.shape_of(row);
        if rr != 1 || rc != ac {
            return Err(CoreError::ShapeMismatch {
                expected: format!("1x{ac}"),
                got: format!("{rr}x{rc}"),
                context: "mul_row".into(),
            });
        }
        let value = {
            let (va, vr) = (self.value(a), self.value(row));
            let mut data = va.data.clone();
            for r in 0..va.rows {
                for c in 0..va.cols {
                    data[r * va.cols + c] *= vr.data[c];
                }
            }
            Matrix {
                rows: va.rows,
                cols: va.cols,
                data,
            }
        };
        Ok(self.push(value, Op::MulRow { a, row }))
    }

    /// Per-row normalization `(x - mean) / sqrt(var + eps)` without affine
    /// parameters; modulation supplies scale and shift separately.
    pub fn layernorm_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = (va.rows, va.cols);
        let mut data = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &va.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                data[r * cols + c] = (row[c] - mean) * inv;
            }
        }
        let value = Matrix { rows, cols, data };
        self.push(value, Op::LayerNorm { a, inv_std })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x * sigmoid(*x)).collect(),
        };
        self.push(value, Op::Silu { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| x.max(0.0)).collect(),
        };
        self.push(value, Op::Relu { a })
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let value = Matrix {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().map(|x| softplus(*x)).collect(),
        };
        self.push(value, Op::Softplus { a })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = (va.rows, va.cols);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &va.data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                total += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= total;
            }
        }
        let value = Matrix { rows, cols, data };
        self.push(value, Op::SoftmaxRows { a })
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Matrix::zeros(va.cols, va.rows);
        for r in 0..va.rows {
            for c in 0..va.cols {
                value.data[c * va.rows + r] = va.data[r * va.cols + c];
            }
        }
        self.push(value, Op::Transpose { a })
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (_, ac) = self.shape_of(a);
        let (_, bc) = self.shape_of(b);
        if ac != bc {
            return Err(CoreError::ShapeMismatch {
                expected: format!("matching column counts, {ac}"),
                got: format!("{bc}"),
                context: "concat_rows".into(),
            });
        }
        let value = {
            let (va, vb) = (self.value(a), self.value(b));
            let mut data = Vec::with_capacity(va.len() + vb.len());
            data.extend_from_slice(&va.data);
            data.extend_from_slice(&vb.data);
            Matrix {
                rows: va.rows + vb.rows,
                cols: ac,
                data,
            }
        };
        Ok(self.push(value, Op::ConcatRows { a, b }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (ar, ac) = self.shape_of(a);
        if start + len > ar {
            return Err(CoreError::IndexOutOfRange {
                index: start + len,
                len: ar,
            });
        }
        let value = {
            let va = self.value(a);
            Matrix {
                rows: len,
                cols: ac,
                data: va.data[start * ac..(start + len) * ac].to_vec(),
            }
        };
        Ok(self.push(value, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Config("concat_cols needs at least one part".into()));
        }
        let rows = self.shape_of(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape_of(p);
            if pr != rows {
                return Err(CoreError::ShapeMismatch {
                    expected: format!("{rows} rows"),
                    got: format!("{pr} rows"),
                    context: "concat_cols".into(),
                });
            }
            cols += pc;
        }
        let mut value = Matrix::zeros(rows, cols);
        let mut col_base = 0;
        for &p in parts {
            let vp = self.value(p);
            for r in 0..rows {
                for c in 0..vp.cols {
                    value.data[r * cols + col_base + c] = vp.data[r * vp.cols + c];
                }
            }
            col_base += vp.cols;
        }
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (ar, ac) = self.shape_of(a);
        if start + len > ac {
            return Err(CoreError::IndexOutOfRange {
                index: start + len,
                len: ac,
            });
        }
        let value = {
            let va = self.value(a);
            let mut m = Matrix::zeros(ar, len);
            for r in 0..ar {
                for c in 0..len {
                    m.data[r * len + c] = va.data[r * ac + start + c];
                }
            }
            m
        };
        Ok(self.push(value, Op::SliceCols { a, start }))
    }

    /// `out.data[i] = a.data[map[i]]`; the backward pass scatter-adds, so
    /// maps may repeat source indices (overlapping convolution windows).
    pub fn gather(&mut self, a: NodeId, map: Arc<Vec<usize>>, rows: usize, cols: usize) -> Result<NodeId> {
        if map.len() != rows * cols {
            return Err(CoreError::ShapeMismatch {
                expected: format!("map of length {}", rows * cols),
                got: format!("{}", map.len()),
                context: "gather".into(),
            });
        }
        let va = self.value(a);
        let mut data = Vec::with_capacity(map.len());
        for &src in map.iter() {
            if src >= va.len() {
                return Err(CoreError::IndexOutOfRange {
                    index: src,
                    len: va.len(),
                });
            }
            data.push(va.data[src]);
        }
        let value = Matrix { rows, cols, data };
        Ok(self.push(value, Op::Gather { a, map }))
    }

    /// Copies the value and blocks all gradient flow into `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mean = va.data.iter().sum::<f64>() / va.len() as f64;
        self.push(Matrix::scalar(mean), Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let sum = va.data.iter().sum::<f64>();
        self.push(Matrix::scalar(sum), Op::SumAll { a })
    }

    /// Mean squared difference, `mean((a - b)^2)`, as a composed subgraph.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    /// Reverse pass from a `1 x 1` root. Parameter-leaf gradients are
    /// accumulated into `param_grads` (which must already be sized to the
    /// full flat parameter vector); gradients of all other nodes are
    /// returned for inspection.
    pub fn backward(&self, root: NodeId, param_grads: &mut [f64]) -> Result<Gradients> {
        {
            let rv = self.value(root);
            if rv.rows != 1 || rv.cols != 1 {
                return Err(CoreError::Config(format!(
                    "backward root must be a 1x1 scalar, got {}x{}",
                    rv.rows, rv.cols
                )));
            }
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            // Inputs always precede their consumers on the tape, so the split
            // lets the current gradient be read while earlier slots are
            // written.
            let (earlier, rest) = grads.split_at_mut(idx);
            let Some(gout) = rest[0].as_ref() else {
                continue;
            };
            let grads = earlier;
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param { offset } => {
                    let out = &mut param_grads[*offset..*offset + gout.len()];
                    for (p, g) in out.iter_mut().zip(gout.data.iter()) {
                        *p += g;
                    }
                }
                Op::Matmul { a, b } => {
                    let da = matmul_nt(gout, self.value(*b));
                    let db = matmul_tn(self.value(*a), gout);
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::Add { a, b } => {
                    accumulate(grads, *a, gout.clone());
                    accumulate(grads, *b, gout.clone());
                }
                Op::Sub { a, b } => {
                    let mut neg = gout.clone();
                    for v in &mut neg.data {
                        *v = -*v;
                    }
                    accumulate(grads, *a, gout.clone());
                    accumulate(grads, *b, neg);
                }
                Op::Mul { a, b } => {
                    let da = elementwise_product(gout, self.value(*b));
                    let db = elementwise_product(gout, self.value(*a));
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::Affine { a, mul } => {
                    let mut da = gout.clone();
                    for v in &mut da.data {
                        *v *= mul;
                    }
                    accumulate(grads, *a, da);
                }
                Op::AddRow { a, row } => {
                    let mut drow = Matrix::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            drow.data[c] += gout.data[r * gout.cols + c];
                        }
                    }
                    accumulate(grads, *a, gout.clone());
                    accumulate(grads, *row, drow);
                }
                Op::MulRow { a, row } => {
                    let va = self.value(*a);
                    let vrow = self.value(*row);
                    let mut da = gout.clone();
                    for r in 0..da.rows {
                        for c in 0..da.cols {
                            da.data[r * da.cols + c] *= vrow.data[c];
                        }
                    }
                    let mut drow = Matrix::zeros(1, gout.cols);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            drow.data[c] += gout.data[r * gout.cols + c] * va.data[r * va.cols + c];
                        }
                    }
                    accumulate(grads, *a, da);
                    accumulate(grads, *row, drow);
                }
                Op::LayerNorm { a, inv_std } => {
                    // With xhat the stored output: dx = inv_std * (g - mean(g)
                    // - xhat * mean(g * xhat)), per row.
                    let xhat = &self.nodes[idx].value;
                    let cols = xhat.cols;
                    let mut da = Matrix::zeros(xhat.rows, cols);
                    for r in 0..xhat.rows {
                        let g = &gout.data[r * cols..(r + 1) * cols];
                        let h = &xhat.data[r * cols..(r + 1) * cols];
                        let mean_g = g.iter().sum::<f64>() / cols as f64;
                        let mean_gh = g.iter().zip(h.iter()).map(|(x, y)| x * y).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            da.data[r * cols + c] = inv_std[r] * (g[c] - mean_g - h[c] * mean_gh);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Silu { a } => {
                    let va = self.value(*a);
                    let mut da = gout.clone();
                    for (g, x) in da.data.iter_mut().zip(va.data.iter()) {
                        let s = sigmoid(*x);
                        *g *= s * (1.0 + x * (1.0 - s));
                    }
                    accumulate(grads, *a, da);
                }
                Op::Relu { a } => {
                    let va = self.value(*a);
                    let mut da = gout.clone();
                    for (g, x) in da.data.iter_mut().zip(va.data.iter()) {
                        if *x <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Softplus { a } => {
                    let va = self.value(*a);
                    let mut da = gout.clone();
                    for (g, x) in da.data.iter_mut().zip(va.data.iter()) {
                        *g *= sigmoid(*x);
                    }
                    accumulate(grads, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    let y = &self.nodes[idx].value;
                    let cols = y.cols;
                    let mut da = Matrix::zeros(y.rows, cols);
                    for r in 0..y.rows {
                        let g = &gout.data[r * cols..(r + 1) * cols];
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let dot = g.iter().zip(yr.iter()).map(|(x, v)| x * v).sum::<f64>();
                        for c in 0..cols {
                            da.data[r * cols + c] = yr[c] * (g[c] - dot);
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Transpose { a } => {
                    let mut da = Matrix::zeros(gout.cols, gout.rows);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            da.data[c * gout.rows + r] = gout.data[r * gout.cols + c];
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::ConcatRows { a, b } => {
                    let (ar, ac) = self.shape_of(*a);
                    let (br, _) = self.shape_of(*b);
                    let da = Matrix {
                        rows: ar,
                        cols: ac,
                        data: gout.data[..ar * ac].to_vec(),
                    };
                    let db = Matrix {
                        rows: br,
                        cols: ac,
                        data: gout.data[ar * ac..].to_vec(),
                    };
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
                Op::SliceRows { a, start } => {
                    let (ar, ac) = self.shape_of(*a);
                    let mut da = Matrix::zeros(ar, ac);
                    da.data[start * ac..start * ac + gout.len()].copy_from_slice(&gout.data);
                    accumulate(grads, *a, da);
                }
                Op::ConcatCols { parts } => {
                    let mut col_base = 0;
                    for &p in parts {
                        let (pr, pc) = self.shape_of(p);
                        let mut dp = Matrix::zeros(pr, pc);
                        for r in 0..pr {
                            for c in 0..pc {
                                dp.data[r * pc + c] = gout.data[r * gout.cols + col_base + c];
                            }
                        }
                        accumulate(grads, p, dp);
                        col_base += pc;
                    }
                }
                Op::SliceCols { a, start } => {
                    let (ar, ac) = self.shape_of(*a);
                    let mut da = Matrix::zeros(ar, ac);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            da.data[r * ac + start + c] = gout.data[r * gout.cols + c];
                        }
                    }
                    accumulate(grads, *a, da);
                }
                Op::Gather { a, map } => {
                    let va = self.value(*a);
                    let mut da = Matrix::zeros(va.rows, va.cols);
                    for (g, &src) in gout.data.iter().zip(map.iter()) {
                        da.data[src] += g;
                    }
                    accumulate(grads, *a, da);
                }
                Op::Detach => {}
                Op::MeanAll { a } => {
                    let va = self.value(*a);
                    let g = gout.data[0] / va.len() as f64;
                    let da = Matrix {
                        rows: va.rows,
                        cols: va.cols,
                        data: vec![g; va.len()],
                    };
                    accumulate(grads, *a, da);
                }
                Op::SumAll { a } => {
                    let va = self.value(*a);
                    let da = Matrix {
                        rows: va.rows,
                        cols: va.cols,
                        data: vec![gout.data[0]; va.len()],
                    };
                    accumulate(grads, *a, da);
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.data.iter_mut().zip(contribution.data.iter()) {
                *e += c;
            }
        }
        slot @ None => {
            *slot = Some(contribution);
        }
    }
}

fn elementwise_product(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect(),
    }
}
