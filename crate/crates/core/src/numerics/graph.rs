use std::borrow::Cow;

use crate::error::{Error, Result};

use super::{Scalar, Tensor, LAYER_NORM_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention problem inside a ragged batch: query rows
/// `q_start..q_start+q_len` attend key/value rows `k_start..k_start+k_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gather { x: Var, idx: Vec<usize> },
    Concat(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Attention { q: Var, k: Var, v: Var, blocks: Vec<AttnBlock>, heads: usize, causal: bool, probs: Vec<T> },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<'a, T: Scalar> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Append-only computation tape.
///
/// Nodes are evaluated eagerly as they are appended, so every node's inputs
/// precede it and a reverse sweep over the tape is a valid topological order
/// for backpropagation. Parameter leaves borrow their storage from the caller.
pub struct Graph<'a, T: Scalar = f32> {
    nodes: Vec<Node<'a, T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (lead.iter().product(), c),
        None => (1, 1),
    }
}

fn add_into<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradients, for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an owned tensor as a leaf; it tracks gradients if the tensor does.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(t.into_data()),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a borrowed tensor (typically a model parameter) as a leaf.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: self.grad_enabled && t.requires_grad(),
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shapes are consistent")
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn matrix(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    /// `a · b` for `a: [m×k]`, `b: [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (br, bc) = self.matrix(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                self.shape(a),
                self.shape(b),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); m * n];
        let bs = if trans_b { (1, bc as isize) } else { (bc as isize, 1) };
        T::gemm(m, k, n, self.value(a), (k as isize, 1), self.value(b), bs, T::zero(), &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what} needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector `b: [d]` to every row of `a: [..×d]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, d) = rows_cols(self.shape(a));
        if self.shape(b) != [d] {
            return Err(Error::Shape(format!(
                "add_row: bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        let bias = self.value(b);
        let out = self
            .value(a)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&x, &y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} invalid for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalisation over the last dimension with affine `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gain {:?} / bias {:?} vs input {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            )));
        }
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Selects rows of a matrix; doubles as embedding lookup.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(x, "gather")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Shape("gather of zero rows".into()));
        }
        let src = self.value(x);
        let out = idx.iter().flat_map(|&i| src[i * d..(i + 1) * d].iter().copied()).collect();
        Ok(self.push(vec![idx.len(), d], out, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather(table, &idx)
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let (_, d) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != d {
                return Err(Error::Shape(format!(
                    "concat_rows: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Mean negative log-likelihood over positions whose target is not `pad_id`.
    ///
    /// `logits` has shape `[..×V]`; `targets` holds one id per leading position.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], pad_id: u32) -> Result<Var> {
        let (rows, vocab) = rows_cols(self.shape(logits));
        if self.shape(logits).len() < 2 || targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy: logits {:?} vs {} targets",
                self.shape(logits),
                targets.len()
            )));
        }
        let mut mapped = Vec::with_capacity(rows);
        for &t in targets {
            if t == pad_id {
                mapped.push(None);
            } else if (t as usize) < vocab {
                mapped.push(Some(t as usize));
            } else {
                return Err(Error::Index(format!("target id {t} outside vocabulary of {vocab}")));
            }
        }
        let count = mapped.iter().flatten().count();
        let src = self.value(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = 0.0f64;
        for (r, target) in mapped.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = &src[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            probs[r * vocab..(r + 1) * vocab].iter_mut().for_each(|p| *p /= z);
            total += (max + z.ln() - row[t]).as_f64();
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy { logits, targets: mapped, probs, count };
        Ok(self.push(Vec::new(), vec![T::from_f64_lossy(loss)], op, &[logits]))
    }

    /// Scaled dot-product multi-head attention over a ragged batch.
    ///
    /// `q` is `[Nq×d]`, `k` and `v` are `[Nk×d]`; each block is independent.
    /// With `causal`, query `i` of a block only sees keys `0..=i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        blocks: &[AttnBlock],
        heads: usize,
        causal: bool,
    ) -> Result<Var> {
        let (nq, d) = self.matrix(q, "attention")?;
        let (nk, dk) = self.matrix(k, "attention")?;
        if self.shape(v) != [nk, dk] || dk != d {
            return Err(Error::Shape(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("{heads} heads do not divide width {d}")));
        }
        for b in blocks {
            if b.q_start + b.q_len > nq || b.k_start + b.k_len > nk || b.k_len == 0 {
                return Err(Error::Shape(format!("attention block {b:?} outside q[{nq}] / k[{nk}]")));
            }
            if causal && b.q_len > b.k_len {
                return Err(Error::Shape(format!("causal block {b:?} has more queries than keys")));
            }
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); nq * d];
        let total: usize = blocks.iter().map(|b| b.q_len * b.k_len * heads).sum();
        let mut probs = vec![T::zero(); total];
        let mut off = 0;
        for b in blocks {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..b.q_len {
                    let qrow = &qv[(b.q_start + i) * d + c0..][..dh];
                    let p = &mut probs[off + i * b.k_len..off + (i + 1) * b.k_len];
                    let visible = if causal { i + 1 } else { b.k_len };
                    let mut max = T::neg_infinity();
                    for (j, pj) in p.iter_mut().enumerate().take(visible) {
                        let krow = &kv[(b.k_start + j) * d + c0..][..dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum::<T>() * scale;
                        *pj = s;
                        max = max.max(s);
                    }
                    let mut z = T::zero();
                    for pj in p.iter_mut().take(visible) {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    for pj in p.iter_mut().take(visible) {
                        *pj /= z;
                    }
                    let orow = &mut out[(b.q_start + i) * d + c0..][..dh];
                    for (j, &pj) in p.iter().enumerate().take(visible) {
                        let vrow = &vv[(b.k_start + j) * d + c0..][..dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, &x)| *o += pj * x);
                    }
                }
                off += b.q_len * b.k_len;
            }
        }
        let op = Op::Attention { q, k, v, blocks: blocks.to_vec(), heads, causal, probs };
        Ok(self.push(vec![nq, d], out, op, &[q, k, v]))
    }

    /// Reverse sweep from a scalar; fills gradients of every reachable node
    /// that requires them. Gradients from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        add_into(&mut self.nodes[loss.0].grad, &[T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.take() else { continue };
            backprop(before, node, &g);
            node.grad = Some(g);
        }
        Ok(())
    }

    /// Human-readable op name of a node, for diagnostics.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn backprop<T: Scalar>(before: &mut [Node<'_, T>], node: &Node<'_, T>, g: &[T]) {
    macro_rules! wants {
        ($v:expr) => {
            before[$v.0].requires_grad
        };
    }
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, k) = (before[a.0].shape[0], before[a.0].shape[1]);
            let n = node.shape[1];
            if wants!(a) {
                // da = g · bᵀ  (or g · b when b was used transposed)
                let mut da = vec![T::zero(); m * k];
                let bs = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                T::gemm(m, n, k, g, (n as isize, 1), &before[b.0].value, bs, T::zero(), &mut da);
                add_into(&mut before[a.0].grad, &da);
            }
            if wants!(b) {
                let len = before[b.0].value.len();
                let mut db = vec![T::zero(); len];
                if *trans_b {
                    // b is [n×k]: db = gᵀ · a
                    T::gemm(n, m, k, g, (1, n as isize), &before[a.0].value, (k as isize, 1), T::zero(), &mut db);
                } else {
                    // b is [k×n]: db = aᵀ · g
                    T::gemm(k, m, n, &before[a.0].value, (1, k as isize), g, (n as isize, 1), T::zero(), &mut db);
                }
                add_into(&mut before[b.0].grad, &db);
            }
        }
        Op::Add(a, b) => {
            if wants!(a) {
                add_into(&mut before[a.0].grad, g);
            }
            if wants!(b) {
                add_into(&mut before[b.0].grad, g);
            }
        }
        Op::AddRow(a, b) => {
            if wants!(a) {
                add_into(&mut before[a.0].grad, g);
            }
            if wants!(b) {
                let d = before[b.0].value.len();
                let mut db = vec![T::zero(); d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                }
                add_into(&mut before[b.0].grad, &db);
            }
        }
        Op::Mul(a, b) => {
            if wants!(a) {
                let da: Vec<T> = g.iter().zip(before[b.0].value.iter()).map(|(&x, &y)| x * y).collect();
                add_into(&mut before[a.0].grad, &da);
            }
            if wants!(b) {
                let db: Vec<T> = g.iter().zip(before[a.0].value.iter()).map(|(&x, &y)| x * y).collect();
                add_into(&mut before[b.0].grad, &db);
            }
        }
        Op::Scale(a, s) => {
            if wants!(a) {
                let da: Vec<T> = g.iter().map(|&x| x * *s).collect();
                add_into(&mut before[a.0].grad, &da);
            }
        }
        Op::Relu(a) => {
            if wants!(a) {
                let da: Vec<T> = g
                    .iter()
                    .zip(node.value.iter())
                    .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                    .collect();
                add_into(&mut before[a.0].grad, &da);
            }
        }
        Op::Softmax { x, outer, len, inner } => {
            if wants!(x) {
                let y = &node.value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot = (0..*len).map(|j| y[at(j)] * g[at(j)]).sum::<T>();
                        for j in 0..*len {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                add_into(&mut before[x.0].grad, &dx);
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let d = before[gain.0].value.len();
            if wants!(x) {
                let gv = &before[gain.0].value;
                let dn = T::from_usize(d).unwrap();
                let mut dx = vec![T::zero(); xhat.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let dh: Vec<T> = gr.iter().zip(gv.iter()).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / dn;
                    let mean_dhh = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dx[r * d + j] = rs * (dh[j] - mean_dh - hr[j] * mean_dhh);
                    }
                }
                add_into(&mut before[x.0].grad, &dx);
            }
            if wants!(gain) {
                let mut dg = vec![T::zero(); d];
                for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                    }
                }
                add_into(&mut before[gain.0].grad, &dg);
            }
            if wants!(bias) {
                let mut db = vec![T::zero(); d];
                for gr in g.chunks(d) {
                    db.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                }
                add_into(&mut before[bias.0].grad, &db);
            }
        }
        Op::Gather { x, idx } => {
            if wants!(x) {
                let d = node.shape[1];
                let mut dx = vec![T::zero(); before[x.0].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    dx[src * d..(src + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                add_into(&mut before[x.0].grad, &dx);
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for p in parts {
                let len = before[p.0].value.len();
                if wants!(p) {
                    add_into(&mut before[p.0].grad, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::Reshape(x) => {
            if wants!(x) {
                add_into(&mut before[x.0].grad, g);
            }
        }
        Op::Sum(x) => {
            if wants!(x) {
                let dx = vec![g[0]; before[x.0].value.len()];
                add_into(&mut before[x.0].grad, &dx);
            }
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            if wants!(logits) && *count > 0 {
                let vocab = probs.len() / targets.len();
                let w = g[0] / T::from_usize(*count).unwrap();
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..vocab {
                        dl[r * vocab + j] = probs[r * vocab + j] * w;
                    }
                    dl[r * vocab + t] -= w;
                }
                add_into(&mut before[logits.0].grad, &dl);
            }
        }
        Op::Attention { q, k, v, blocks, heads, causal, probs } => {
            let d = node.shape[1];
            let dh = d / heads;
            let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
            let qv = &before[q.0].value;
            let kv = &before[k.0].value;
            let vv = &before[v.0].value;
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            let mut off = 0;
            let mut dp = Vec::new();
            for b in blocks {
                for h in 0..*heads {
                    let c0 = h * dh;
                    for i in 0..b.q_len {
                        let visible = if *causal { i + 1 } else { b.k_len };
                        let p = &probs[off + i * b.k_len..][..visible];
                        let go = &g[(b.q_start + i) * d + c0..][..dh];
                        dp.clear();
                        for (j, &pj) in p.iter().enumerate() {
                            let vr = (b.k_start + j) * d + c0;
                            dp.push(go.iter().zip(&vv[vr..vr + dh]).map(|(&a, &c)| a * c).sum::<T>());
                            dv[vr..vr + dh].iter_mut().zip(go).for_each(|(x, &y)| *x += pj * y);
                        }
                        let dot = p.iter().zip(&dp).map(|(&a, &c)| a * c).sum::<T>();
                        let qr = (b.q_start + i) * d + c0;
                        for (j, &pj) in p.iter().enumerate() {
                            let ds = pj * (dp[j] - dot) * scale;
                            let kr = (b.k_start + j) * d + c0;
                            for t in 0..dh {
                                dq[qr + t] += ds * kv[kr + t];
                                dk[kr + t] += ds * qv[qr + t];
                            }
                        }
                    }
                    off += b.q_len * b.k_len;
                }
            }
            if wants!(q) {
                add_into(&mut before[q.0].grad, &dq);
            }
            if wants!(k) {
                add_into(&mut before[k.0].grad, &dk);
            }
            if wants!(v) {
                add_into(&mut before[v.0].grad, &dv);
            }
        }
    }
}
