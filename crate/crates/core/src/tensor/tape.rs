use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive op kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    AddRow,
    Scale,
    MulConst,
    Gelu,
    Sigmoid,
    SoftmaxRows,
    LayerNorm,
    Gather,
    SliceRows,
    CausalAttention,
    PointerMix,
    NllMean,
    Sum,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    PointerMix {
        vocab: Var,
        attn: Var,
        gate: Option<Var>,
        ext_ids: Vec<usize>,
    },
    NllMean {
        probs: Var,
        targets: Vec<usize>,
        floor: T,
    },
    Sum(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::MulConst(..) => OpKind::MulConst,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather(..) => OpKind::Gather,
            Op::SliceRows(..) => OpKind::SliceRows,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
            Op::PointerMix { .. } => OpKind::PointerMix,
            Op::NllMean { .. } => OpKind::NllMean,
            Op::Sum(..) => OpKind::Sum,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Ordered record of primitive ops. Inputs always precede the ops that use
/// them, so backward is a single reverse sweep.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit(SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// `out[m×k] += a[m×n] · b[k×n]ᵀ`
fn gemm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + j] = out[i * k + j] + dot;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::DimMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Adds into the adjoint slot of `v`, allocating zeros on first touch.
fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Deliberately mis-scales the backward rule of one op kind. Only meant
    /// for negative-control tests of the gradient checker.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
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

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Records an input. The tensor's own `requires_grad` flag is kept.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let mut value = t;
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a copy of `t` that takes part in differentiation.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("valid tensor")
            .with_requires_grad(true);
        self.leaf(value)
    }

    /// Records a copy of `t` treated as a constant.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        self.leaf(value)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Result<Var> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires = self.inputs(&op).iter().any(|v| self.nodes[v.0].value.requires_grad());
        let value = Tensor::new(shape, data)?.with_requires_grad(requires);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::SoftmaxRows(a)
            | Op::Gather(a, _)
            | Op::SliceRows(a, _)
            | Op::Sum(a) => vec![*a],
            Op::NllMean { probs, .. } => vec![*probs],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::PointerMix {
                vocab, attn, gate, ..
            } => {
                let mut v = vec![*vocab, *attn];
                v.extend(gate.iter().copied());
                v
            }
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", shape, out, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.nodes[bias.0].value.numel() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale(a, c))
    }

    /// Elementwise product with a constant buffer (dropout masks).
    pub fn mul_const(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.numel() {
            return Err(mismatch("mul_const", self.shape(a), &[mask.len()]));
        }
        let out = self.data(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push("mul_const", shape, out, Op::MulConst(a, mask))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push("sigmoid", shape, out, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let (_, n) = self.dims(a);
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax_rows", shape, out, Op::SoftmaxRows(a))
    }

    /// Normalizes each length-`d` vector to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, d) = self.dims(x);
        if self.nodes[gain.0].value.numel() != d || self.nodes[bias.0].value.numel() != d {
            return Err(mismatch("layer_norm", self.shape(x), self.shape(gain)));
        }
        let dn = T::lit(d as f64);
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if ids.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "no ids".into(),
            });
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    limit: rows,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push("gather_rows", vec![ids.len(), d], out, Op::Gather(table, ids.to_vec()))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > m {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("range {start}..{end} of {m} rows"),
            });
        }
        let out = self.data(a)[start * n..end * n].to_vec();
        self.push("slice_rows", vec![end - start, n], out, Op::SliceRows(a, start))
    }

    /// Multi-head causal self-attention over `[T×d]` query/key/value rows,
    /// scaled by `1/sqrt(d/heads)`. Row `t` only sees rows `0..=t`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = self.dims(q);
        if self.dims(k) != (t, d) || self.dims(v) != (t, d) {
            return Err(mismatch("causal_attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Invalid {
                op: "causal_attention",
                msg: format!("{d} not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut probs = vec![T::zero(); heads * t * t];
        let mut out = vec![T::zero(); t * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                let qi = &qd[i * d + off..i * d + off + dh];
                for (j, pj) in p.iter_mut().enumerate().take(i + 1) {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *pj = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pj) in p.iter().enumerate().take(i + 1) {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo = *oo + pj * vv;
                    }
                }
            }
        }
        self.push(
            "causal_attention",
            vec![t, d],
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Gated copy/generate mixture over an extended vocabulary of `width` ids.
    ///
    /// Row `r` of the result is `g_r * vocab[r]` on ids `< V`, plus
    /// `(1 - g_r) * attn[r, i]` scatter-added onto `ext_ids[i]` for every
    /// source position `i`. With `gate = None`, `g_r = 1`.
    pub fn pointer_mix(
        &mut self,
        vocab: Var,
        attn: Var,
        gate: Option<Var>,
        ext_ids: &[usize],
        width: usize,
    ) -> Result<Var> {
        let (n, v) = self.dims(vocab);
        let (n2, s) = self.dims(attn);
        if n != n2 || s != ext_ids.len() {
            return Err(mismatch("pointer_mix", self.shape(vocab), self.shape(attn)));
        }
        if width < v {
            return Err(TensorError::Invalid {
                op: "pointer_mix",
                msg: format!("extended width {width} below vocabulary {v}"),
            });
        }
        if let Some(&bad) = ext_ids.iter().find(|&&id| id >= width) {
            return Err(TensorError::IndexOutOfRange {
                op: "pointer_mix",
                index: bad,
                limit: width,
            });
        }
        if let Some(g) = gate {
            if self.nodes[g.0].value.numel() != n {
                return Err(mismatch("pointer_mix", self.shape(vocab), self.shape(g)));
            }
        }
        let vd = self.data(vocab);
        let ad = self.data(attn);
        let gd = gate.map(|g| self.data(g));
        let mut out = vec![T::zero(); n * width];
        for r in 0..n {
            let g = gd.map_or(T::one(), |g| g[r]);
            let orow = &mut out[r * width..(r + 1) * width];
            for (o, &p) in orow.iter_mut().zip(&vd[r * v..(r + 1) * v]) {
                *o = g * p;
            }
            let copy = T::one() - g;
            for (i, &id) in ext_ids.iter().enumerate() {
                orow[id] = orow[id] + copy * ad[r * s + i];
            }
        }
        self.push(
            "pointer_mix",
            vec![n, width],
            out,
            Op::PointerMix {
                vocab,
                attn,
                gate,
                ext_ids: ext_ids.to_vec(),
            },
        )
    }

    /// Mean negative log of `probs[r, targets[r]]`, each probability floored
    /// at `floor` (the floor contributes no gradient).
    pub fn nll_mean(&mut self, probs: Var, targets: &[usize], floor: T) -> Result<Var> {
        let (n, w) = self.dims(probs);
        if targets.len() != n {
            return Err(mismatch("nll_mean", self.shape(probs), &[targets.len()]));
        }
        let pd = self.data(probs);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= w {
                return Err(TensorError::IndexOutOfRange {
                    op: "nll_mean",
                    index: t,
                    limit: w,
                });
            }
            total = total - pd[r * w + t].max(floor).ln();
        }
        let loss = total / T::lit(n as f64);
        self.push(
            "nll_mean",
            vec![1],
            vec![loss],
            Op::NllMean {
                probs,
                targets: targets.to_vec(),
                floor,
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum(a))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// is already stored, so callers reset between independent passes.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.value.requires_grad() {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if self.fault == Some(node.op.kind()) {
                let bad: Vec<T> = g.iter().map(|&x| x * T::lit(1.5)).collect();
                self.backward_node(idx, &bad, &mut adj);
            } else {
                self.backward_node(idx, &g, &mut adj);
            }
            adj[idx] = Some(g);
        }
        for (idx, a) in adj.into_iter().enumerate() {
            if let Some(a) = a {
                let value = &mut self.nodes[idx].value;
                if value.requires_grad() {
                    value.accumulate_grad(&a)?;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn backward_node(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.wants(*a) {
                    let da = slot(adj, *a, m * k);
                    gemm_nt_acc(g, self.data(*b), da, m, n, k);
                }
                if self.wants(*b) {
                    let db = slot(adj, *b, k * n);
                    gemm_tn_acc(self.data(*a), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                if self.wants(*a) {
                    let (m, n) = self.dims(*a);
                    let da = slot(adj, *a, m * n);
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = da[i * n + j] + g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        let dv = slot(adj, v, g.len());
                        for (d, &x) in dv.iter_mut().zip(g) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    let da = slot(adj, *a, g.len());
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d = *d + x;
                    }
                }
                if self.wants(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let db = slot(adj, *bias, n);
                    for row in g.chunks(n) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d = *d + x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let da = slot(adj, *a, g.len());
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d = *d + *c * x;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if self.wants(*a) {
                    let da = slot(adj, *a, g.len());
                    for ((d, &x), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d = *d + m * x;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xs = self.data(*a);
                    let da = slot(adj, *a, g.len());
                    for ((d, &x), &gx) in da.iter_mut().zip(xs).zip(g) {
                        *d = *d + gelu_parts(x).1 * gx;
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.wants(*a) {
                    let da = slot(adj, *a, g.len());
                    for ((d, &y), &gx) in da.iter_mut().zip(out).zip(g) {
                        *d = *d + y * (T::one() - y) * gx;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let (_, n) = self.dims(*a);
                    let da = slot(adj, *a, g.len());
                    for ((drow, yrow), grow) in da.chunks_mut(n).zip(out.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &gg)| y * gg).sum();
                        for ((d, &y), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d = *d + y * (gg - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (m, d) = self.dims(*x);
                if self.wants(*gain) {
                    let dg = slot(adj, *gain, d);
                    for i in 0..m {
                        for j in 0..d {
                            dg[j] = dg[j] + g[i * d + j] * xhat[i * d + j];
                        }
                    }
                }
                if self.wants(*bias) {
                    let db = slot(adj, *bias, d);
                    for row in g.chunks(d) {
                        for (b, &x) in db.iter_mut().zip(row) {
                            *b = *b + x;
                        }
                    }
                }
                if self.wants(*x) {
                    let gn = self.data(*gain);
                    let dn = T::lit(d as f64);
                    let dx = slot(adj, *x, m * d);
                    for i in 0..m {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[i * d + j] * gn[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[i * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = g[i * d + j] * gn[j];
                            let v = rstd[i] * (dh - mean_dh - xhat[i * d + j] * mean_dh_h);
                            dx[i * d + j] = dx[i * d + j] + v;
                        }
                    }
                }
            }
            Op::Gather(table, ids) => {
                if self.wants(*table) {
                    let (rows, d) = self.dims(*table);
                    let dt = slot(adj, *table, rows * d);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] = dt[id * d + j] + g[r * d + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.wants(*a) {
                    let (m, n) = self.dims(*a);
                    let da = slot(adj, *a, m * n);
                    let base = start * n;
                    for (k, &x) in g.iter().enumerate() {
                        da[base + k] = da[base + k] + x;
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, adj),
            Op::PointerMix {
                vocab,
                attn,
                gate,
                ext_ids,
            } => {
                let (n, vsize) = self.dims(*vocab);
                let (_, s) = self.dims(*attn);
                let width = node.value.dims2().1;
                let gd = gate.map(|gv| self.data(gv).to_vec());
                let gate_at = |r: usize| gd.as_ref().map_or(T::one(), |gd| gd[r]);
                if self.wants(*vocab) {
                    let dv = slot(adj, *vocab, n * vsize);
                    for r in 0..n {
                        let gr = gate_at(r);
                        for w in 0..vsize {
                            dv[r * vsize + w] = dv[r * vsize + w] + gr * g[r * width + w];
                        }
                    }
                }
                if self.wants(*attn) {
                    let da = slot(adj, *attn, n * s);
                    for r in 0..n {
                        let copy = T::one() - gate_at(r);
                        for (i, &id) in ext_ids.iter().enumerate() {
                            da[r * s + i] = da[r * s + i] + copy * g[r * width + id];
                        }
                    }
                }
                if let Some(gv) = gate {
                    if self.wants(*gv) {
                        let vd = self.data(*vocab);
                        let ad = self.data(*attn);
                        let dg = slot(adj, *gv, n);
                        for r in 0..n {
                            let gen: T = (0..vsize).map(|w| vd[r * vsize + w] * g[r * width + w]).sum();
                            let cp: T = ext_ids
                                .iter()
                                .enumerate()
                                .map(|(i, &id)| ad[r * s + i] * g[r * width + id])
                                .sum();
                            dg[r] = dg[r] + gen - cp;
                        }
                    }
                }
            }
            Op::NllMean {
                probs,
                targets,
                floor,
            } => {
                if self.wants(*probs) {
                    let (n, w) = self.dims(*probs);
                    let pd = self.data(*probs);
                    let dp = slot(adj, *probs, n * w);
                    let scale = g[0] / T::lit(n as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        let p = pd[r * w + t];
                        if p > *floor {
                            dp[r * w + t] = dp[r * w + t] - scale / p;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.wants(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let da = slot(adj, *a, n);
                    for d in da.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &[T],
        adj: &mut [Option<Vec<T>>],
    ) {
        let (t, d) = self.dims(q);
        let dh = d / heads;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        let mut dp = vec![T::zero(); t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                let go = &g[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for (x, &gg) in dvj.iter_mut().zip(go) {
                        *x = *x + p[j] * gg;
                    }
                }
                let dot: T = (0..=i).map(|j| p[j] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        dq[i * d + off + c] = dq[i * d + off + c] + ds * kd[j * d + off + c];
                        dk[j * d + off + c] = dk[j * d + off + c] + ds * qd[i * d + off + c];
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                let s = slot(adj, var, t * d);
                for (x, y) in s.iter_mut().zip(buf) {
                    *x = *x + y;
                }
            }
        }
    }
}
