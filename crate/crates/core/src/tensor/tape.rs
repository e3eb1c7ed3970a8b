use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::{Result, Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

/// Square boolean attention mask; `allowed(r, c)` means row `r` may attend to
/// column `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(size: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != size * size {
            return Err(TensorError::InvalidShape {
                shape: vec![size, size],
                len: allowed.len(),
            });
        }
        Ok(Self { size, allowed })
    }

    pub fn from_fn(size: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(size * size);
        for r in 0..size {
            for c in 0..size {
                allowed.push(f(r, c));
            }
        }
        Self { size, allowed }
    }

    pub fn full(size: usize) -> Self {
        Self::from_fn(size, |_, _| true)
    }

    pub fn lower_triangular(size: usize) -> Self {
        Self::from_fn(size, |r, c| c <= r)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.size + col]
    }

    pub fn row(&self, row: usize) -> &[bool] {
        &self.allowed[row * self.size..(row + 1) * self.size]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    /// When every row allows exactly a non-empty prefix of columns, returns
    /// maximal runs `(first_row, end_row, prefix_len)` of rows sharing the
    /// same prefix.
    pub fn prefix_runs(&self) -> Option<Vec<(usize, usize, usize)>> {
        let mut runs: Vec<(usize, usize, usize)> = Vec::new();
        for r in 0..self.size {
            let row = self.row(r);
            let p = row.iter().take_while(|b| **b).count();
            if p == 0 || row[p..].iter().any(|b| *b) {
                return None;
            }
            match runs.last_mut() {
                Some(last) if last.2 == p && last.1 == r => last.1 = r + 1,
                _ => runs.push((r, r + 1, p)),
            }
        }
        Some(runs)
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        alpha: T,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddRow {
        a: usize,
        row: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax {
        a: usize,
        mask: Arc<AttentionMask>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: T,
        runs: Vec<(usize, usize, usize)>,
        probs: Vec<T>,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    Variance {
        a: usize,
        mean: T,
    },
    Mse {
        pred: usize,
        target: usize,
        weights: Arc<Vec<T>>,
        total: T,
    },
    GatherRows {
        table: usize,
        index: Arc<Vec<Option<usize>>>,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    ConcatCols {
        parts: Vec<usize>,
    },
    Dropout {
        a: usize,
        scale: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Inputs of a node always precede it, so the reverse sweep in
/// [`Tape::backward`] visits each node exactly once after all its consumers.
pub struct Tape<T: Scalar> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(SQRT_2_OVER_PI);
    let u = k * (x + T::c(GELU_CUBIC) * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0 * GELU_CUBIC) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * du
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index as usize >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index as usize)
    }

    fn node(&self, v: Var) -> Result<(usize, &Tensor<T>)> {
        let i = self.index(v)?;
        Ok((i, &self.nodes[i].value))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        let index = u32::try_from(self.nodes.len()).map_err(|_| TensorError::Invalid("tape overflow".into()))?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "param" });
        }
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "constant" });
        }
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(self.node(v)?.1)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.1.shape())
    }

    fn mat_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let (_, t) = self.node(v)?;
        t.dims2().map_err(|_| TensorError::ShapeMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, T::one())
    }

    /// `alpha · a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        self.matmul_ex(a, b, true, alpha)
    }

    fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (m, k) = self.mat_dims("matmul", a)?;
        let (br, bc) = self.mat_dims("matmul", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        let (ia, ta) = self.node(a)?;
        let (ib, tb) = self.node(b)?;
        if k != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, alpha, ta.data(), false, tb.data(), trans_b, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a: ia,
                b: ib,
                trans_b,
                alpha,
            },
            &[ia, ib],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ta) = self.node(a)?;
        let (ib, tb) = self.node(b)?;
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("add", a, b)?;
        let ta = &self.nodes[ia].value;
        let tb = &self.nodes[ib].value;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", value, Op::Add { a: ia, b: ib }, &[ia, ib])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.same_shape("mul", a, b)?;
        let ta = &self.nodes[ia].value;
        let tb = &self.nodes[ib].value;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", value, Op::Mul { a: ia, b: ib }, &[ia, ib])
    }

    /// Broadcast-adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.mat_dims("add_row", a)?;
        let (ia, ta) = self.node(a)?;
        let (ir, tr) = self.node(row)?;
        if tr.numel() != n || tr.shape().len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        let r = tr.data();
        let data = ta
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| *x + *y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow { a: ia, row: ir }, &[ia, ir])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let data = ta.data().iter().map(|x| *x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("scale", value, Op::Scale { a: ia, factor }, &[ia])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let data = ta.data().iter().map(|x| gelu(*x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("gelu", value, Op::Gelu { a: ia }, &[ia])
    }

    /// Row-wise layer normalization of an `[m, n]` matrix with affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.mat_dims("layer_norm", x)?;
        let (ix, tx) = self.node(x)?;
        let (ig, tg) = self.node(gamma)?;
        let (ib, tb) = self.node(beta)?;
        for t in [tg, tb] {
            if t.shape() != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let nf = T::from_usize(n).unwrap();
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in tx.data().chunks_exact(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (*v - mean) * r;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            &[ix, ig, ib],
        )
    }

    /// Row-wise softmax restricted to the allowed columns of `mask`;
    /// disallowed entries get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let (m, n) = self.mat_dims("masked_softmax", a)?;
        let (ia, ta) = self.node(a)?;
        if mask.size() != m || m != n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: ta.shape().to_vec(),
                rhs: vec![mask.size(), mask.size()],
            });
        }
        let mut out = vec![T::zero(); m * n];
        for (r, (row, dst)) in ta.data().chunks_exact(n).zip(out.chunks_exact_mut(n)).enumerate() {
            let allow = mask.row(r);
            let mut max = T::neg_infinity();
            for (v, ok) in row.iter().zip(allow) {
                if *ok && *v > max {
                    max = *v;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::EmptyAttentionRow { row: r });
            }
            let mut sum = T::zero();
            for ((v, ok), d) in row.iter().zip(allow).zip(dst.iter_mut()) {
                if *ok {
                    *d = (*v - max).exp();
                    sum += *d;
                }
            }
            let inv = T::one() / sum;
            for d in dst.iter_mut() {
                *d *= inv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            "masked_softmax",
            value,
            Op::MaskedSoftmax {
                a: ia,
                mask: Arc::clone(mask),
            },
            &[ia],
        )
    }

    /// `softmax(Q Kᵀ / sqrt(dh)) V` over the allowed positions of `mask`.
    pub fn masked_attention(&mut self, q: Var, k: Var, v: Var, mask: &Arc<AttentionMask>) -> Result<Var> {
        let (_, dh) = self.mat_dims("masked_attention", q)?;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let scores = self.matmul_nt(q, k, scale)?;
        let weights = self.masked_softmax(scores, mask)?;
        self.matmul(weights, v)
    }

    /// Multi-head masked attention on `[L, d]` projections split into
    /// `heads` column groups. Masks whose rows are column prefixes (such as
    /// block-causal masks) run a fused kernel that only touches allowed
    /// entries; other masks fall back to per-head [`Tape::masked_attention`].
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Arc<AttentionMask>,
    ) -> Result<Var> {
        let (l, d) = self.mat_dims("multi_head_attention", q)?;
        for other in [k, v] {
            if self.shape(other)? != [l, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "multi_head_attention",
                    lhs: vec![l, d],
                    rhs: self.shape(other)?.to_vec(),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid(format!("width {d} not divisible into {heads} heads")));
        }
        if mask.size() != l {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                lhs: vec![l, d],
                rhs: vec![mask.size(), mask.size()],
            });
        }
        let dh = d / heads;
        let Some(runs) = mask.prefix_runs() else {
            if let Some(r) = (0..l).find(|&r| !mask.row(r).iter().any(|b| *b)) {
                return Err(TensorError::EmptyAttentionRow { row: r });
            }
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = self.slice_cols(q, h * dh, dh)?;
                let kh = self.slice_cols(k, h * dh, dh)?;
                let vh = self.slice_cols(v, h * dh, dh)?;
                outs.push(self.masked_attention(qh, kh, vh, mask)?);
            }
            return self.concat_cols(&outs);
        };
        let (iq, ik, iv) = (self.index(q)?, self.index(k)?, self.index(v)?);
        let (qd, kd, vd) = (
            self.nodes[iq].value.data(),
            self.nodes[ik].value.data(),
            self.nodes[iv].value.data(),
        );
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); l * d];
        let total: usize = runs.iter().map(|(a, b, p)| (b - a) * p).sum();
        let mut probs = vec![T::zero(); total * heads];
        let mut off = 0;
        for h in 0..heads {
            let col = h * dh;
            for &(r0, r1, p) in &runs {
                let m = r1 - r0;
                let s = &mut probs[off..off + m * p];
                T::gemm_strided(m, dh, p, scale, (&qd[r0 * d + col..], d, 1), (&kd[col..], 1, d), T::zero(), (s, p, 1));
                for row in s.chunks_exact_mut(p) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    let inv = T::one() / sum;
                    row.iter_mut().for_each(|x| *x *= inv);
                }
                T::gemm_strided(m, p, dh, T::one(), (s, p, 1), (&vd[col..], d, 1), T::zero(), (&mut out[r0 * d + col..], d, 1));
                off += m * p;
            }
        }
        let value = Tensor::new(vec![l, d], out)?;
        self.push(
            "multi_head_attention",
            value,
            Op::Attention {
                q: iq,
                k: ik,
                v: iv,
                heads,
                scale,
                runs,
                probs,
            },
            &[iq, ik, iv],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let value = ta.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { a: ia }, &[ia])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.mat_dims("transpose", a)?;
        let (ia, ta) = self.node(a)?;
        let src = ta.data();
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push("transpose", value, Op::Transpose { a: ia }, &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let value = Tensor::scalar(ta.data().iter().copied().sum());
        self.push("sum", value, Op::Sum { a: ia }, &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let n = T::from_usize(ta.numel()).unwrap();
        let value = Tensor::scalar(ta.data().iter().copied().sum::<T>() / n);
        self.push("mean", value, Op::Mean { a: ia }, &[ia])
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        let (ia, ta) = self.node(a)?;
        let n = T::from_usize(ta.numel()).unwrap();
        let mean = ta.data().iter().copied().sum::<T>() / n;
        let var = ta.data().iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
        self.push("variance", Tensor::scalar(var), Op::Variance { a: ia, mean }, &[ia])
    }

    /// Weighted mean squared error `Σ w (p − t)² / Σ w`.
    pub fn mse(&mut self, pred: Var, target: Var, weights: Arc<Vec<T>>) -> Result<Var> {
        let (ip, it) = self.same_shape("mse", pred, target)?;
        let tp = &self.nodes[ip].value;
        let tt = &self.nodes[it].value;
        if weights.len() != tp.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: tp.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total: T = weights.iter().copied().sum();
        if total <= T::zero() {
            return Err(TensorError::Invalid("mse: weights sum to zero".into()));
        }
        let mut acc = T::zero();
        for ((p, t), w) in tp.data().iter().zip(tt.data()).zip(weights.iter()) {
            if *w != T::zero() {
                let d = *p - *t;
                acc += *w * d * d;
            }
        }
        let value = Tensor::scalar(acc / total);
        self.push(
            "mse",
            value,
            Op::Mse {
                pred: ip,
                target: it,
                weights,
                total,
            },
            &[ip, it],
        )
    }

    /// Stacks rows of a `[rows, n]` table; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, index: Arc<Vec<Option<usize>>>) -> Result<Var> {
        let (rows, n) = self.mat_dims("gather_rows", table)?;
        let (it, tt) = self.node(table)?;
        if let Some(bad) = index.iter().flatten().find(|&&r| r >= rows) {
            return Err(TensorError::Invalid(format!(
                "gather_rows: row {bad} out of range for table of {rows} rows"
            )));
        }
        let mut out = vec![T::zero(); index.len() * n];
        for (dst, src) in out.chunks_exact_mut(n).zip(index.iter()) {
            if let Some(r) = src {
                dst.copy_from_slice(&tt.data()[r * n..(r + 1) * n]);
            }
        }
        let value = Tensor::new(vec![index.len(), n], out)?;
        self.push("gather_rows", value, Op::GatherRows { table: it, index }, &[it])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.mat_dims("slice_cols", a)?;
        let (ia, ta) = self.node(a)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid(format!(
                "slice_cols: columns {start}..{} out of range for width {n}",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in ta.data().chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { a: ia, start }, &[ia])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat_cols: no inputs".into()))?;
        let (m, _) = self.mat_dims("concat_cols", first)?;
        let mut idx = Vec::with_capacity(parts.len());
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.mat_dims("concat_cols", *p)?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r, c],
                });
            }
            idx.push(self.index(*p)?);
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (i, w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[*i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let inputs = idx.clone();
        self.push("concat_cols", value, Op::ConcatCols { parts: idx }, &inputs)
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        if p >= 1.0 {
            return Err(TensorError::Invalid(format!("dropout probability {p} not in [0,1)")));
        }
        let (ia, ta) = self.node(a)?;
        let keep = T::c(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..ta.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = ta.data().iter().zip(&scale).map(|(x, s)| *x * *s).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Dropout { a: ia, scale }, &[ia])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.index(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(li + 1);
        grads.resize_with(li + 1, || None);
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![T::one()]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|d| Tensor::new(self.nodes[i].value.shape().to_vec(), d).expect("gradient shape")))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    /// Gradients of `loss` with respect to named leaves; parameters that did
    /// not participate get zeros of their own shape.
    pub fn grad_named<S: AsRef<str>>(&self, loss: Var, params: &[(S, Var)]) -> Result<BTreeMap<String, Tensor<T>>> {
        let grads = self.backward(loss)?;
        params
            .iter()
            .map(|(name, v)| {
                let shape = self.shape(*v)?.to_vec();
                let g = grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
                Ok((name.as_ref().to_string(), g))
            })
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[target].requires_grad {
                return;
            }
            let buf = grads[target].get_or_insert_with(|| vec![T::zero(); nodes[target].value.numel()]);
            f(buf);
        };
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b, alpha } => {
                let (m, k) = nodes[*a].value.dims2().unwrap();
                let n = out.shape()[1];
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |da| {
                    // dA = alpha · dC · op(B)ᵀ
                    T::gemm(m, n, k, *alpha, g, false, vb, !*trans_b, da, true);
                });
                acc(*b, &mut |db| {
                    if *trans_b {
                        // B is [n,k]: dB = alpha · dCᵀ · A
                        T::gemm(n, m, k, *alpha, g, true, va, false, db, true);
                    } else {
                        // dB = alpha · Aᵀ · dC
                        T::gemm(k, m, n, *alpha, va, true, g, false, db, true);
                    }
                });
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    acc(t, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(vb) {
                        *x += *y * *w;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, y), w) in d.iter_mut().zip(g).zip(va) {
                        *x += *y * *w;
                    }
                });
            }
            Op::AddRow { a, row } => {
                let n = nodes[*row].value.numel();
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
                acc(*row, &mut |d| {
                    for chunk in g.chunks_exact(n) {
                        d.iter_mut().zip(chunk).for_each(|(x, y)| *x += *y);
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y * *factor));
            }
            Op::Gelu { a } => {
                let va = nodes[*a].value.data();
                acc(*a, &mut |d| {
                    for ((x, y), v) in d.iter_mut().zip(g).zip(va) {
                        *x += *y * gelu_grad(*v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = nodes[*gamma].value.numel();
                let nf = T::from_usize(n).unwrap();
                let vg = nodes[*gamma].value.data();
                acc(*gamma, &mut |d| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((x, y), h) in d.iter_mut().zip(gr).zip(hr) {
                            *x += *y * *h;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for gr in g.chunks_exact(n) {
                        d.iter_mut().zip(gr).for_each(|(x, y)| *x += *y);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![T::zero(); n];
                    for (r, ((dr, gr), hr)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..n {
                            dh[j] = gr[j] * vg[j];
                            s1 += dh[j];
                            s2 += dh[j] * hr[j];
                        }
                        let m1 = s1 / nf;
                        let m2 = s2 / nf;
                        for j in 0..n {
                            dr[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { a, mask } => {
                let n = mask.size();
                let p = out.data();
                acc(*a, &mut |d| {
                    for (r, ((dr, gr), pr)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(p.chunks_exact(n))
                        .enumerate()
                    {
                        let allow = mask.row(r);
                        let mut dot = T::zero();
                        for j in 0..n {
                            if allow[j] {
                                dot += pr[j] * gr[j];
                            }
                        }
                        for j in 0..n {
                            if allow[j] {
                                dr[j] += pr[j] * (gr[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                runs,
                probs,
            } => {
                let (l, d) = out.dims2().unwrap();
                let dh = d / heads;
                let (qd, kd, vd) = (nodes[*q].value.data(), nodes[*k].value.data(), nodes[*v].value.data());
                let mut dq = vec![T::zero(); l * d];
                let mut dk = vec![T::zero(); l * d];
                let mut dv = vec![T::zero(); l * d];
                let mut off = 0;
                let mut ds = Vec::new();
                for h in 0..*heads {
                    let col = h * dh;
                    for &(r0, r1, p) in runs {
                        let m = r1 - r0;
                        let pr = &probs[off..off + m * p];
                        ds.clear();
                        ds.resize(m * p, T::zero());
                        // dP = dO Vᵀ
                        T::gemm_strided(m, dh, p, T::one(), (&g[r0 * d + col..], d, 1), (&vd[col..], 1, d), T::zero(), (&mut ds, p, 1));
                        for (dr, prow) in ds.chunks_exact_mut(p).zip(pr.chunks_exact(p)) {
                            let dot = dr.iter().zip(prow).fold(T::zero(), |a, (x, y)| a + *x * *y);
                            for (x, y) in dr.iter_mut().zip(prow) {
                                *x = *y * (*x - dot) * *scale;
                            }
                        }
                        T::gemm_strided(m, p, dh, T::one(), (&ds, p, 1), (&kd[col..], d, 1), T::one(), (&mut dq[r0 * d + col..], d, 1));
                        T::gemm_strided(p, m, dh, T::one(), (&ds, 1, p), (&qd[r0 * d + col..], d, 1), T::one(), (&mut dk[col..], d, 1));
                        T::gemm_strided(p, m, dh, T::one(), (pr, 1, p), (&g[r0 * d + col..], d, 1), T::one(), (&mut dv[col..], d, 1));
                        off += m * p;
                    }
                }
                for (t, src) in [(*q, &dq), (*k, &dk), (*v, &dv)] {
                    acc(t, &mut |d| d.iter_mut().zip(src.iter()).for_each(|(x, y)| *x += *y));
                }
            }
            Op::Reshape { a } => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += *y));
            }
            Op::Transpose { a } => {
                let (m, n) = nodes[*a].value.dims2().unwrap();
                acc(*a, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let s = g[0] / T::from_usize(nodes[*a].value.numel()).unwrap();
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Variance { a, mean } => {
                let va = nodes[*a].value.data();
                let s = T::c(2.0) * g[0] / T::from_usize(va.len()).unwrap();
                acc(*a, &mut |d| {
                    for (x, v) in d.iter_mut().zip(va) {
                        *x += s * (*v - *mean);
                    }
                });
            }
            Op::Mse {
                pred,
                target,
                weights,
                total,
            } => {
                let (vp, vt) = (nodes[*pred].value.data(), nodes[*target].value.data());
                let s = T::c(2.0) * g[0] / *total;
                acc(*pred, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        if weights[j] != T::zero() {
                            *x += s * weights[j] * (vp[j] - vt[j]);
                        }
                    }
                });
                acc(*target, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        if weights[j] != T::zero() {
                            *x -= s * weights[j] * (vp[j] - vt[j]);
                        }
                    }
                });
            }
            Op::GatherRows { table, index } => {
                let n = nodes[*table].value.shape()[1];
                acc(*table, &mut |d| {
                    for (gr, src) in g.chunks_exact(n).zip(index.iter()) {
                        if let Some(r) = src {
                            d[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(x, y)| *x += *y);
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let n = nodes[*a].value.shape()[1];
                let len = out.shape()[1];
                acc(*a, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                        dr[*start..*start + len].iter_mut().zip(gr).for_each(|(x, y)| *x += *y);
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let n = out.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = nodes[*p].value.shape()[1];
                    acc(*p, &mut |d| {
                        for (dr, gr) in d.chunks_exact_mut(w).zip(g.chunks_exact(n)) {
                            dr.iter_mut().zip(&gr[offset..offset + w]).for_each(|(x, y)| *x += *y);
                        }
                    });
                    offset += w;
                }
            }
            Op::Dropout { a, scale } => {
                acc(*a, &mut |d| {
                    for ((x, y), s) in d.iter_mut().zip(g).zip(scale) {
                        *x += *y * *s;
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u32,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` did not
    /// influence the loss or does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index as usize).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index as usize).and_then(|g| g.take())
    }
}
