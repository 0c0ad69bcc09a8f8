//! Reverse-mode differentiation over a fixed kernel vocabulary.
//!
//! Operations are recorded into an arena as they execute; `backward` replays
//! them in reverse, accumulating vector-Jacobian products. There is no graph
//! compiler: every kernel is one enum variant with a hand-written VJP, and
//! each is validated against central finite differences.

use crate::error::{Error, Result};

use super::scalar::Scalar;
use super::tensor::Tensor;

/// Names of the supported kernels, used for checked-mode diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddBias,
    MulRow,
    Matmul,
    Transpose,
    Gelu,
    Exp,
    Log,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Sdpa,
    SplitHeads,
    MergeHeads,
    Embedding,
    GatherRows,
    ConcatRows,
    SliceRows,
    Reshape,
    SumAll,
    MeanAll,
    MeanRows,
    CosineRows,
    L2NormRows,
}

impl Kernel {
    pub fn name(self) -> &'static str {
        match self {
            Kernel::Leaf => "leaf",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::Neg => "neg",
            Kernel::Scale => "scale",
            Kernel::AddBias => "add_bias",
            Kernel::MulRow => "mul_row",
            Kernel::Matmul => "matmul",
            Kernel::Transpose => "transpose",
            Kernel::Gelu => "gelu",
            Kernel::Exp => "exp",
            Kernel::Log => "log",
            Kernel::LayerNorm => "layer_norm",
            Kernel::Softmax => "softmax",
            Kernel::LogSoftmax => "log_softmax",
            Kernel::Sdpa => "sdpa",
            Kernel::SplitHeads => "split_heads",
            Kernel::MergeHeads => "merge_heads",
            Kernel::Embedding => "embedding",
            Kernel::GatherRows => "gather_rows",
            Kernel::ConcatRows => "concat_rows",
            Kernel::SliceRows => "slice_rows",
            Kernel::Reshape => "reshape",
            Kernel::SumAll => "sum_all",
            Kernel::MeanAll => "mean_all",
            Kernel::MeanRows => "mean_rows",
            Kernel::CosineRows => "cosine_rows",
            Kernel::L2NormRows => "l2_normalize_rows",
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Sdpa { q: Var, k: Var, v: Var, probs: Vec<T>, scale: T },
    SplitHeads { x: Var, heads: usize },
    MergeHeads { x: Var, heads: usize },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    CosineRows(Var, Var),
    L2NormRows(Var),
}

impl<T> Op<T> {
    fn kernel(&self) -> Kernel {
        match self {
            Op::Leaf => Kernel::Leaf,
            Op::Add(..) => Kernel::Add,
            Op::Sub(..) => Kernel::Sub,
            Op::Mul(..) => Kernel::Mul,
            Op::Neg(..) => Kernel::Neg,
            Op::Scale(..) => Kernel::Scale,
            Op::AddBias(..) => Kernel::AddBias,
            Op::MulRow(..) => Kernel::MulRow,
            Op::Matmul(..) => Kernel::Matmul,
            Op::Transpose(..) => Kernel::Transpose,
            Op::Gelu(..) => Kernel::Gelu,
            Op::Exp(..) => Kernel::Exp,
            Op::Log(..) => Kernel::Log,
            Op::LayerNorm { .. } => Kernel::LayerNorm,
            Op::Softmax(..) => Kernel::Softmax,
            Op::LogSoftmax(..) => Kernel::LogSoftmax,
            Op::Sdpa { .. } => Kernel::Sdpa,
            Op::SplitHeads { .. } => Kernel::SplitHeads,
            Op::MergeHeads { .. } => Kernel::MergeHeads,
            Op::Embedding { .. } => Kernel::Embedding,
            Op::GatherRows { .. } => Kernel::GatherRows,
            Op::ConcatRows(..) => Kernel::ConcatRows,
            Op::SliceRows { .. } => Kernel::SliceRows,
            Op::Reshape(..) => Kernel::Reshape,
            Op::SumAll(..) => Kernel::SumAll,
            Op::MeanAll(..) => Kernel::MeanAll,
            Op::MeanRows(..) => Kernel::MeanRows,
            Op::CosineRows(..) => Kernel::CosineRows,
            Op::L2NormRows(..) => Kernel::L2NormRows,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording arena for one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    checked: bool,
    backward_fault: Option<Kernel>,
}

// ---- raw matrix helpers ----------------------------------------------------

/// C[m,n] = A[m,k] B[k,n]
pub(crate) fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow.iter()) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

/// C[m,n] = A[m,k] B[n,k]^T  (dot products of rows)
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                s = s + x * y;
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// C[k,n] = A[m,k]^T B[m,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow.iter()) {
                *cj = *cj + aip * bj;
            }
        }
    }
    c
}

fn softmax_rows<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let x = &data[r * cols..(r + 1) * cols];
        let y = &mut out[r * cols..(r + 1) * cols];
        let mut mx = x[0];
        for &v in x.iter() {
            if v > mx {
                mx = v;
            }
        }
        let mut sum = T::zero();
        for (yi, &xi) in y.iter_mut().zip(x.iter()) {
            *yi = (xi - mx).exp();
            sum = sum + *yi;
        }
        for yi in y.iter_mut() {
            *yi = *yi / sum;
        }
    }
    out
}

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let u = c0 * (x + c1 * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c0 = T::from_f64(GELU_C0);
    let c1 = T::from_f64(GELU_C1);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c0 * (x + c1 * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c0 * (T::one() + three * c1 * x * x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), checked: true, backward_fault: None }
    }

    pub fn unchecked() -> Self {
        let mut g = Self::new();
        g.checked = false;
        g
    }

    /// Multiply gradients flowing out of the named kernel by a wrong factor.
    /// Exists so the finite-difference checker can be validated by mutation.
    pub fn inject_backward_fault(&mut self, kernel: Kernel) {
        self.backward_fault = Some(kernel);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zero-filled when nothing flowed into it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.checked && !value.all_finite() {
            return Err(Error::NonFinite { kernel: op.kernel().name() });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf node; participates in backward iff the tensor requires grad.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradient (inputs, masks, targets).
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar_const(&mut self, v: T) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("sub", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| -x);
        let needs = self.needs(a);
        self.push(value, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x * c);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, c), needs)
    }

    /// `[rows.., d] + [d]`, bias broadcast over leading dimensions.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let d = *ta.shape().last().unwrap();
        if tb.shape() != [d] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let mut data = Vec::with_capacity(ta.numel());
        for chunk in ta.data().chunks_exact(d) {
            for (x, &b) in chunk.iter().zip(tb.data()) {
                data.push(*x + b);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias(a, bias), needs)
    }

    /// `[rows.., d] * [d]`, vector broadcast over leading dimensions.
    pub fn mul_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        let d = *ta.shape().last().unwrap();
        if tv.shape() != [d] {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", ta.shape(), tv.shape())));
        }
        let mut data = Vec::with_capacity(ta.numel());
        for chunk in ta.data().chunks_exact(d) {
            for (x, &b) in chunk.iter().zip(tv.data()) {
                data.push(*x * b);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(v);
        self.push(value, Op::MulRow(a, v), needs)
    }

    // ---- matrix ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let data = mm(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Matmul(a, b), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (m, n) = ta.dims2()?;
        let src = ta.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs)
    }

    // ---- nonlinearities ----

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(gelu_scalar);
        let needs = self.needs(a);
        self.push(value, Op::Gelu(a), needs)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.exp());
        let needs = self.needs(a);
        self.push(value, Op::Exp(a), needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.map(|x| x.ln());
        let needs = self.needs(a);
        self.push(value, Op::Log(a), needs)
    }

    /// Row-wise normalization over the last dimension, no affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d;
        let eps = T::from_f64(1e-6);
        let mut data = Vec::with_capacity(ta.numel());
        let mut rstds = Vec::with_capacity(rows);
        for chunk in ta.data().chunks_exact(d) {
            let mut mean = T::zero();
            for &x in chunk {
                mean = mean + x;
            }
            mean = mean / T::from_usize(d);
            let mut var = T::zero();
            for &x in chunk {
                let c = x - mean;
                var = var + c * c;
            }
            var = var / T::from_usize(d);
            let rstd = T::one() / (var + eps).sqrt();
            rstds.push(rstd);
            for &x in chunk {
                data.push((x - mean) * rstd);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(value, Op::LayerNorm { x: a, rstd: rstds }, needs)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d;
        let data = softmax_rows(ta.data(), rows, d);
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs)
    }

    /// Numerically stable log∘softmax over the last dimension.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let d = *ta.shape().last().unwrap();
        let rows = ta.numel() / d;
        let mut data = vec![T::zero(); ta.numel()];
        for r in 0..rows {
            let x = &ta.data()[r * d..(r + 1) * d];
            let y = &mut data[r * d..(r + 1) * d];
            let mut mx = x[0];
            for &v in x.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for &xi in x.iter() {
                sum = sum + (xi - mx).exp();
            }
            let lse = mx + sum.ln();
            for (yi, &xi) in y.iter_mut().zip(x.iter()) {
                *yi = xi - lse;
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(value, Op::LogSoftmax(a), needs)
    }

    /// Fused scaled-dot-product attention over `[heads, len, head_dim]`.
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rank() != 3 {
            return Err(Error::shape(
                "sdpa",
                format!("{:?} / {:?} / {:?}", tq.shape(), tk.shape(), tv.shape()),
            ));
        }
        let (h, l, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
        let scale = T::one() / T::from_usize(dh).sqrt();
        let mut probs = Vec::with_capacity(h * l * l);
        let mut out = Vec::with_capacity(h * l * dh);
        for head in 0..h {
            let qh = &tq.data()[head * l * dh..(head + 1) * l * dh];
            let kh = &tk.data()[head * l * dh..(head + 1) * l * dh];
            let vh = &tv.data()[head * l * dh..(head + 1) * l * dh];
            let mut scores = mm_nt(qh, kh, l, dh, l);
            for s in scores.iter_mut() {
                *s = *s * scale;
            }
            let p = softmax_rows(&scores, l, l);
            out.extend_from_slice(&mm(&p, vh, l, l, dh));
            probs.extend_from_slice(&p);
        }
        let value = Tensor::new(vec![h, l, dh], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(value, Op::Sdpa { q, k, v, probs, scale }, needs)
    }

    /// `[len, heads*head_dim]` -> `[heads, len, head_dim]`
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (l, d) = ta.dims2()?;
        if d % heads != 0 {
            return Err(Error::shape("split_heads", format!("dim {d} not divisible by {heads}")));
        }
        let dh = d / heads;
        let src = ta.data();
        let mut data = vec![T::zero(); l * d];
        for i in 0..l {
            for h in 0..heads {
                for c in 0..dh {
                    data[h * l * dh + i * dh + c] = src[i * d + h * dh + c];
                }
            }
        }
        let value = Tensor::new(vec![heads, l, dh], data)?;
        let needs = self.needs(a);
        self.push(value, Op::SplitHeads { x: a, heads }, needs)
    }

    /// `[heads, len, head_dim]` -> `[len, heads*head_dim]`
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.rank() != 3 {
            return Err(Error::shape("merge_heads", format!("{:?}", ta.shape())));
        }
        let (heads, l, dh) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let src = ta.data();
        let mut data = vec![T::zero(); heads * l * dh];
        for h in 0..heads {
            for i in 0..l {
                for c in 0..dh {
                    data[i * heads * dh + h * dh + c] = src[h * l * dh + i * dh + c];
                }
            }
        }
        let value = Tensor::new(vec![l, heads * dh], data)?;
        let needs = self.needs(a);
        self.push(value, Op::MergeHeads { x: a, heads }, needs)
    }

    // ---- lookups ----

    /// Row lookup: `table[V, d]`, ids of length L -> `[L, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = &self.nodes[table.0].value;
        let (v, d) = tt.dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenRange { id: bad, vocab: v });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        self.push(value, Op::Embedding { table, ids: ids.to_vec() }, needs)
    }

    /// Per-row element pick: `x[N, V]`, ids of length N -> `[N]`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        let (n, v) = tx.dims2()?;
        if ids.len() != n || ids.iter().any(|&i| i >= v) {
            return Err(Error::shape("gather_rows", format!("ids {} rows {}", ids.len(), n)));
        }
        let data: Vec<T> = ids.iter().enumerate().map(|(r, &i)| tx.data()[r * v + i]).collect();
        let value = Tensor::new(vec![n], data)?;
        let needs = self.needs(x);
        self.push(value, Op::GatherRows { x, ids: ids.to_vec() }, needs)
    }

    // ---- structural ----

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        let d = self.nodes[parts[0].0].value.dims2()?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            let (r, dp) = tp.dims2()?;
            if dp != d {
                return Err(Error::shape("concat_rows", format!("cols {dp} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(tp.data());
        }
        let value = Tensor::new(vec![rows, d], data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (r, d) = ta.dims2()?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {r}")));
        }
        let data = ta.data()[start * d..(start + len) * d].to_vec();
        let value = Tensor::new(vec![len, d], data)?;
        let needs = self.needs(a);
        self.push(value, Op::SliceRows { x: a, start }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let needs = self.needs(a);
        self.push(value, Op::Reshape(a), needs)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut s = T::zero();
        for &x in self.nodes[a.0].value.data() {
            s = s + x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel();
        let mut s = T::zero();
        for &x in self.nodes[a.0].value.data() {
            s = s + x;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / T::from_usize(n)), Op::MeanAll(a), needs)
    }

    /// Column means of a 2-D tensor: `[N, D] -> [D]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, d) = ta.dims2()?;
        let mut data = vec![T::zero(); d];
        for row in ta.data().chunks_exact(d) {
            for (acc, &x) in data.iter_mut().zip(row) {
                *acc = *acc + x;
            }
        }
        for acc in data.iter_mut() {
            *acc = *acc / T::from_usize(n);
        }
        let value = Tensor::new(vec![d], data)?;
        let needs = self.needs(a);
        self.push(value, Op::MeanRows(a), needs)
    }

    /// Row-wise cosine similarity of two `[N, D]` tensors -> `[N]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("cosine_rows", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let (n, d) = ta.dims2()?;
        let mut data = Vec::with_capacity(n);
        for r in 0..n {
            let xa = &ta.data()[r * d..(r + 1) * d];
            let xb = &tb.data()[r * d..(r + 1) * d];
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for (&x, &y) in xa.iter().zip(xb.iter()) {
                dot = dot + x * y;
                na = na + x * x;
                nb = nb + y * y;
            }
            if na == T::zero() || nb == T::zero() {
                return Err(Error::NonFinite { kernel: Kernel::CosineRows.name() });
            }
            data.push(dot / (na.sqrt() * nb.sqrt()));
        }
        let value = Tensor::new(vec![n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::CosineRows(a, b), needs)
    }

    /// Row-wise L2 normalization of a `[N, D]` tensor.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, d) = ta.dims2()?;
        let mut data = Vec::with_capacity(n * d);
        for r in 0..n {
            let x = &ta.data()[r * d..(r + 1) * d];
            let mut nrm = T::zero();
            for &v in x {
                nrm = nrm + v * v;
            }
            if nrm == T::zero() {
                return Err(Error::NonFinite { kernel: Kernel::L2NormRows.name() });
            }
            let inv = T::one() / nrm.sqrt();
            for &v in x {
                data.push(v * inv);
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(value, Op::L2NormRows(a), needs)
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = Tensor::full(self.nodes[loss.0].value.shape().to_vec(), T::one());
        self.backward_seeded(&[(loss, seed)])
    }

    /// Backpropagate from explicit output cotangents. Used by the training
    /// step to stitch per-sample graphs to the batch-coupling graph.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor<T>)]) -> Result<()> {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let mut max_id = 0;
        for (v, seed) in seeds {
            if seed.shape() != self.nodes[v.0].value.shape() {
                return Err(Error::shape("backward_seed", format!("{:?}", seed.shape())));
            }
            accumulate(&mut self.grads, v.0, seed.clone());
            max_id = max_id.max(v.0);
        }
        for id in (0..=max_id).rev() {
            let Some(gout) = self.grads[id].take() else { continue };
            let kernel = self.nodes[id].op.kernel();
            if self.checked && !gout.all_finite() {
                return Err(Error::NonFinite { kernel: kernel.name() });
            }
            if self.backward_fault == Some(kernel) {
                let corrupted = gout.map(|x| x * T::from_f64(1.5));
                self.propagate(id, &corrupted)?;
            } else {
                self.propagate(id, &gout)?;
            }
            self.grads[id] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize, gout: &Tensor<T>) -> Result<()> {
        // split borrows: read node data, write self.grads
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, gout.clone());
                }
                if self.needs(b) {
                    accumulate(&mut self.grads, b.0, gout.clone());
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, gout.clone());
                }
                if self.needs(b) {
                    accumulate(&mut self.grads, b.0, gout.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let tb = &self.nodes[b.0].value;
                    let g = zip_map(gout, tb, |g, y| g * y);
                    accumulate(&mut self.grads, a.0, g);
                }
                if self.needs(b) {
                    let ta = &self.nodes[a.0].value;
                    let g = zip_map(gout, ta, |g, x| g * x);
                    accumulate(&mut self.grads, b.0, g);
                }
            }
            Op::Neg(a) => {
                let a = *a;
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, gout.map(|x| -x));
                }
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, gout.map(|x| x * c));
                }
            }
            Op::AddBias(a, bias) => {
                let (a, bias) = (*a, *bias);
                let d = *self.nodes[bias.0].value.shape().last().unwrap();
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, gout.clone());
                }
                if self.needs(bias) {
                    let mut gb = vec![T::zero(); d];
                    for chunk in gout.data().chunks_exact(d) {
                        for (acc, &g) in gb.iter_mut().zip(chunk) {
                            *acc = *acc + g;
                        }
                    }
                    accumulate(&mut self.grads, bias.0, Tensor::new(vec![d], gb)?);
                }
            }
            Op::MulRow(a, v) => {
                let (a, v) = (*a, *v);
                let d = *self.nodes[v.0].value.shape().last().unwrap();
                if self.needs(a) {
                    let tv = self.nodes[v.0].value.data().to_vec();
                    let mut data = Vec::with_capacity(gout.numel());
                    for chunk in gout.data().chunks_exact(d) {
                        for (g, &b) in chunk.iter().zip(&tv) {
                            data.push(*g * b);
                        }
                    }
                    accumulate(
                        &mut self.grads,
                        a.0,
                        Tensor::new(gout.shape().to_vec(), data)?,
                    );
                }
                if self.needs(v) {
                    let ta = &self.nodes[a.0].value;
                    let mut gv = vec![T::zero(); d];
                    for (gchunk, xchunk) in
                        gout.data().chunks_exact(d).zip(ta.data().chunks_exact(d))
                    {
                        for ((acc, &g), &x) in gv.iter_mut().zip(gchunk).zip(xchunk) {
                            *acc = *acc + g * x;
                        }
                    }
                    accumulate(&mut self.grads, v.0, Tensor::new(vec![d], gv)?);
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let n = self.nodes[b.0].value.dims2()?.1;
                if self.needs(a) {
                    let tb = &self.nodes[b.0].value;
                    let ga = mm_nt(gout.data(), tb.data(), m, n, k);
                    accumulate(&mut self.grads, a.0, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs(b) {
                    let ta = &self.nodes[a.0].value;
                    let gb = mm_tn(ta.data(), gout.data(), m, k, n);
                    accumulate(&mut self.grads, b.0, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Transpose(a) => {
                let a = *a;
                if self.needs(a) {
                    let (n, m) = gout.dims2()?;
                    let mut data = vec![T::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            data[j * n + i] = gout.data()[i * m + j];
                        }
                    }
                    accumulate(&mut self.grads, a.0, Tensor::new(vec![m, n], data)?);
                }
            }
            Op::Gelu(a) => {
                let a = *a;
                if self.needs(a) {
                    let ta = &self.nodes[a.0].value;
                    let g = zip_map(gout, ta, |g, x| g * gelu_grad_scalar(x));
                    accumulate(&mut self.grads, a.0, g);
                }
            }
            Op::Exp(a) => {
                let a = *a;
                if self.needs(a) {
                    let y = &self.nodes[id].value;
                    let g = zip_map(gout, y, |g, y| g * y);
                    accumulate(&mut self.grads, a.0, g);
                }
            }
            Op::Log(a) => {
                let a = *a;
                if self.needs(a) {
                    let ta = &self.nodes[a.0].value;
                    let g = zip_map(gout, ta, |g, x| g / x);
                    accumulate(&mut self.grads, a.0, g);
                }
            }
            Op::LayerNorm { x, rstd } => {
                let x = *x;
                if self.needs(x) {
                    let rstd = rstd.clone();
                    let y = &self.nodes[id].value;
                    let d = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.numel());
                    for (r, (gchunk, ychunk)) in
                        gout.data().chunks_exact(d).zip(y.data().chunks_exact(d)).enumerate()
                    {
                        let mut gmean = T::zero();
                        let mut gymean = T::zero();
                        for (&g, &yv) in gchunk.iter().zip(ychunk) {
                            gmean = gmean + g;
                            gymean = gymean + g * yv;
                        }
                        gmean = gmean / T::from_usize(d);
                        gymean = gymean / T::from_usize(d);
                        for (&g, &yv) in gchunk.iter().zip(ychunk) {
                            data.push(rstd[r] * (g - gmean - yv * gymean));
                        }
                    }
                    accumulate(
                        &mut self.grads,
                        x.0,
                        Tensor::new(y.shape().to_vec(), data)?,
                    );
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                if self.needs(a) {
                    let y = &self.nodes[id].value;
                    let d = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.numel());
                    for (gchunk, ychunk) in
                        gout.data().chunks_exact(d).zip(y.data().chunks_exact(d))
                    {
                        let mut dot = T::zero();
                        for (&g, &yv) in gchunk.iter().zip(ychunk) {
                            dot = dot + g * yv;
                        }
                        for (&g, &yv) in gchunk.iter().zip(ychunk) {
                            data.push(yv * (g - dot));
                        }
                    }
                    accumulate(
                        &mut self.grads,
                        a.0,
                        Tensor::new(y.shape().to_vec(), data)?,
                    );
                }
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                if self.needs(a) {
                    let y = &self.nodes[id].value;
                    let d = *y.shape().last().unwrap();
                    let mut data = Vec::with_capacity(y.numel());
                    for (gchunk, ychunk) in
                        gout.data().chunks_exact(d).zip(y.data().chunks_exact(d))
                    {
                        let mut gsum = T::zero();
                        for &g in gchunk {
                            gsum = gsum + g;
                        }
                        for (&g, &yv) in gchunk.iter().zip(ychunk) {
                            data.push(g - yv.exp() * gsum);
                        }
                    }
                    accumulate(
                        &mut self.grads,
                        a.0,
                        Tensor::new(y.shape().to_vec(), data)?,
                    );
                }
            }
            Op::Sdpa { q, k, v, probs, scale } => {
                let (q, k, v, scale) = (*q, *k, *v, *scale);
                let probs = probs.clone();
                let tq = self.nodes[q.0].value.clone();
                let tk = self.nodes[k.0].value.clone();
                let tv = self.nodes[v.0].value.clone();
                let (h, l, dh) = (tq.shape()[0], tq.shape()[1], tq.shape()[2]);
                let mut gq = vec![T::zero(); h * l * dh];
                let mut gk = vec![T::zero(); h * l * dh];
                let mut gv = vec![T::zero(); h * l * dh];
                for head in 0..h {
                    let span = head * l * dh;
                    let pspan = head * l * l;
                    let p = &probs[pspan..pspan + l * l];
                    let go = &gout.data()[span..span + l * dh];
                    // dV = P^T dO
                    let dv = mm_tn(p, go, l, l, dh);
                    gv[span..span + l * dh].copy_from_slice(&dv);
                    // dP = dO V^T
                    let dp = mm_nt(go, &tv.data()[span..span + l * dh], l, dh, l);
                    // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                    let mut ds = vec![T::zero(); l * l];
                    for r in 0..l {
                        let mut dot = T::zero();
                        for c in 0..l {
                            dot = dot + dp[r * l + c] * p[r * l + c];
                        }
                        for c in 0..l {
                            ds[r * l + c] = p[r * l + c] * (dp[r * l + c] - dot) * scale;
                        }
                    }
                    // dQ = dS K ; dK = dS^T Q   (scale already folded into dS)
                    let dq = mm(&ds, &tk.data()[span..span + l * dh], l, l, dh);
                    gq[span..span + l * dh].copy_from_slice(&dq);
                    let dk = mm_tn(&ds, &tq.data()[span..span + l * dh], l, l, dh);
                    gk[span..span + l * dh].copy_from_slice(&dk);
                }
                if self.needs(q) {
                    accumulate(&mut self.grads, q.0, Tensor::new(vec![h, l, dh], gq)?);
                }
                if self.needs(k) {
                    accumulate(&mut self.grads, k.0, Tensor::new(vec![h, l, dh], gk)?);
                }
                if self.needs(v) {
                    accumulate(&mut self.grads, v.0, Tensor::new(vec![h, l, dh], gv)?);
                }
            }
            Op::SplitHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                if self.needs(x) {
                    let (h, l, dh) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
                    debug_assert_eq!(h, heads);
                    let mut data = vec![T::zero(); l * h * dh];
                    for hh in 0..h {
                        for i in 0..l {
                            for c in 0..dh {
                                data[i * h * dh + hh * dh + c] =
                                    gout.data()[hh * l * dh + i * dh + c];
                            }
                        }
                    }
                    accumulate(&mut self.grads, x.0, Tensor::new(vec![l, h * dh], data)?);
                }
            }
            Op::MergeHeads { x, heads } => {
                let (x, heads) = (*x, *heads);
                if self.needs(x) {
                    let (l, d) = gout.dims2()?;
                    let dh = d / heads;
                    let mut data = vec![T::zero(); heads * l * dh];
                    for i in 0..l {
                        for h in 0..heads {
                            for c in 0..dh {
                                data[h * l * dh + i * dh + c] = gout.data()[i * d + h * dh + c];
                            }
                        }
                    }
                    accumulate(&mut self.grads, x.0, Tensor::new(vec![heads, l, dh], data)?);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.needs(table) {
                    let ids = ids.clone();
                    let (v, d) = self.nodes[table.0].value.dims2()?;
                    let mut data = vec![T::zero(); v * d];
                    for (row, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            data[i * d + c] = data[i * d + c] + gout.data()[row * d + c];
                        }
                    }
                    accumulate(&mut self.grads, table.0, Tensor::new(vec![v, d], data)?);
                }
            }
            Op::GatherRows { x, ids } => {
                let x = *x;
                if self.needs(x) {
                    let ids = ids.clone();
                    let (n, v) = self.nodes[x.0].value.dims2()?;
                    let mut data = vec![T::zero(); n * v];
                    for (r, &i) in ids.iter().enumerate() {
                        data[r * v + i] = gout.data()[r];
                    }
                    accumulate(&mut self.grads, x.0, Tensor::new(vec![n, v], data)?);
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let d = gout.dims2()?.1;
                let mut offset = 0;
                for p in parts {
                    let rows = self.nodes[p.0].value.dims2()?.0;
                    if self.needs(p) {
                        let slice = gout.data()[offset * d..(offset + rows) * d].to_vec();
                        accumulate(&mut self.grads, p.0, Tensor::new(vec![rows, d], slice)?);
                    }
                    offset += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                if self.needs(x) {
                    let (r, d) = self.nodes[x.0].value.dims2()?;
                    let (len, _) = gout.dims2()?;
                    let mut data = vec![T::zero(); r * d];
                    data[start * d..(start + len) * d].copy_from_slice(gout.data());
                    accumulate(&mut self.grads, x.0, Tensor::new(vec![r, d], data)?);
                }
            }
            Op::Reshape(a) => {
                let a = *a;
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut self.grads, a.0, gout.reshaped(shape)?);
                }
            }
            Op::SumAll(a) => {
                let a = *a;
                if self.needs(a) {
                    let g = gout.item();
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    accumulate(&mut self.grads, a.0, Tensor::full(shape, g));
                }
            }
            Op::MeanAll(a) => {
                let a = *a;
                if self.needs(a) {
                    let shape = self.nodes[a.0].value.shape().to_vec();
                    let n = self.nodes[a.0].value.numel();
                    let g = gout.item() / T::from_usize(n);
                    accumulate(&mut self.grads, a.0, Tensor::full(shape, g));
                }
            }
            Op::MeanRows(a) => {
                let a = *a;
                if self.needs(a) {
                    let (n, d) = self.nodes[a.0].value.dims2()?;
                    let mut data = Vec::with_capacity(n * d);
                    for _ in 0..n {
                        for &g in gout.data() {
                            data.push(g / T::from_usize(n));
                        }
                    }
                    accumulate(&mut self.grads, a.0, Tensor::new(vec![n, d], data)?);
                }
            }
            Op::CosineRows(a, b) => {
                let (a, b) = (*a, *b);
                let ta = self.nodes[a.0].value.clone();
                let tb = self.nodes[b.0].value.clone();
                let (n, d) = ta.dims2()?;
                let cos = self.nodes[id].value.clone();
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); n * d];
                for r in 0..n {
                    let xa = &ta.data()[r * d..(r + 1) * d];
                    let xb = &tb.data()[r * d..(r + 1) * d];
                    let (mut na2, mut nb2) = (T::zero(), T::zero());
                    for (&x, &y) in xa.iter().zip(xb.iter()) {
                        na2 = na2 + x * x;
                        nb2 = nb2 + y * y;
                    }
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let c = cos.data()[r];
                    let g = gout.data()[r];
                    for i in 0..d {
                        ga[r * d + i] = g * (xb[i] / (na * nb) - c * xa[i] / na2);
                        gb[r * d + i] = g * (xa[i] / (na * nb) - c * xb[i] / nb2);
                    }
                }
                if self.needs(a) {
                    accumulate(&mut self.grads, a.0, Tensor::new(vec![n, d], ga)?);
                }
                if self.needs(b) {
                    accumulate(&mut self.grads, b.0, Tensor::new(vec![n, d], gb)?);
                }
            }
            Op::L2NormRows(a) => {
                let a = *a;
                if self.needs(a) {
                    let ta = &self.nodes[a.0].value;
                    let y = &self.nodes[id].value;
                    let (n, d) = ta.dims2()?;
                    let mut data = vec![T::zero(); n * d];
                    for r in 0..n {
                        let x = &ta.data()[r * d..(r + 1) * d];
                        let yr = &y.data()[r * d..(r + 1) * d];
                        let gr = &gout.data()[r * d..(r + 1) * d];
                        let mut nrm = T::zero();
                        for &v in x {
                            nrm = nrm + v * v;
                        }
                        let nrm = nrm.sqrt();
                        let mut dot = T::zero();
                        for (&g, &yv) in gr.iter().zip(yr) {
                            dot = dot + g * yv;
                        }
                        for i in 0..d {
                            data[r * d + i] = (gr[i] - yr[i] * dot) / nrm;
                        }
                    }
                    accumulate(&mut self.grads, a.0, Tensor::new(vec![n, d], data)?);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}
