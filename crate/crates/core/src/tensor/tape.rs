use super::{dot, gemm, slice_norms, softmax_in_place, Axis, Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2Normalize { x: Var, axis: Axis, norms: Vec<f64> },
    Standardize { x: Var, axis: Axis, inv_std: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows { sources: Vec<Var>, index: Vec<(usize, usize)> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// Nodes are appended in evaluation order, so every node's parents precede
/// it and a single reverse sweep visits each node once. A fresh tape is built
/// for every training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `v`; zero when `v` did not
    /// participate.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Like [`Gradients::get`] but `None` when no gradient reached `v`.
    pub fn try_get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a value that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid
    /// out as `[batch, heads, q_len, seq_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn mm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.mm(a, b, true, false)
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let av = &self.nodes[a.0].value;
        let rv = &self.nodes[row.0].value;
        let (r, c) = av.dims2()?;
        let (rr, rc) = rv.dims2()?;
        if rr != 1 || rc != c {
            return Err(Error::shape(name, av.shape(), rv.shape()));
        }
        Ok((r, c))
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(a, row, "add_row")?;
        let rv = self.nodes[row.0].value.data();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv) {
                *x += b;
            }
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast(a, row, "mul_row")?;
        let rv = self.nodes[row.0].value.data();
        let mut data = self.nodes[a.0].value.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(rv) {
                *x *= b;
            }
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * factor);
        self.push(v, Op::Scale(a, factor), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + c);
        self.push(v, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// Square root; the derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    fn check_nan(&self, a: Var, name: &str) -> Result<()> {
        if self.nodes[a.0].value.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric(format!("{name} received NaN")));
        }
        Ok(())
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_nan(a, "softmax_rows")?;
        let v = super::softmax_rows(&self.nodes[a.0].value)?;
        Ok(self.push(v, Op::SoftmaxRows(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check_nan(a, "log_softmax_rows")?;
        let x = &self.nodes[a.0].value;
        let (r, c) = x.dims2()?;
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::LogSoftmaxRows(a), &[a]))
    }

    /// Unit-normalizes every slice along `axis`. Slices with norm below
    /// [`NORM_EPS`] pass through unchanged; their indices are returned.
    pub fn l2_normalize(&mut self, x: Var, axis: Axis) -> Result<(Var, Vec<usize>)> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims2()?;
        let norms = slice_norms(xv.data(), r, c, axis);
        let mut data = xv.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                let n = match axis {
                    Axis::Rows => norms[i],
                    Axis::Cols => norms[j],
                };
                if n >= NORM_EPS {
                    data[i * c + j] /= n;
                }
            }
        }
        let degenerate = norms
            .iter()
            .enumerate()
            .filter(|(_, &n)| n < NORM_EPS)
            .map(|(i, _)| i)
            .collect();
        let v = Tensor::new(xv.shape().to_vec(), data)?;
        Ok((self.push(v, Op::L2Normalize { x, axis, norms }, &[x]), degenerate))
    }

    /// `(x - mean) / sqrt(var + eps)` per slice, with the biased variance.
    /// Rows give layer normalization, columns give batch normalization.
    pub fn standardize(&mut self, x: Var, axis: Axis, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (r, c) = xv.dims2()?;
        let mut data = xv.data().to_vec();
        let inv_std = match axis {
            Axis::Rows => {
                let mut inv = Vec::with_capacity(r);
                for row in data.chunks_mut(c) {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let s = 1.0 / (var + eps).sqrt();
                    for v in row.iter_mut() {
                        *v = (*v - mean) * s;
                    }
                    inv.push(s);
                }
                inv
            }
            Axis::Cols => {
                let (mean, var) = column_moments(&data, r, c);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                for row in data.chunks_mut(c) {
                    for j in 0..c {
                        row[j] = (row[j] - mean[j]) * inv[j];
                    }
                }
                inv
            }
        };
        let v = Tensor::new(vec![r, c], data)?;
        Ok(self.push(v, Op::Standardize { x, axis, inv_std }, &[x]))
    }

    /// Multi-head scaled dot-product self-attention core.
    ///
    /// `q`, `k`, `v` hold `batch · seq_len` rows of width `D`, grouped in
    /// consecutive blocks of `seq_len` rows per sequence. Each head attends
    /// over a `D / heads` column slice; the head outputs are written back
    /// into their slices (concatenation).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        self.attention_prefix(q, k, v, seq_len, seq_len, heads)
    }

    /// Like [`Tape::attention`], but `q` only holds the first `q_len`
    /// positions of every sequence (`batch · q_len` rows). Keys and values
    /// still cover all `seq_len` positions.
    pub fn attention_prefix(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_len: usize,
        seq_len: usize,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        same_shape("attention", kv, vv)?;
        let (rows, d) = kv.dims2()?;
        let (q_rows, qd_cols) = qv.dims2()?;
        if qd_cols != d {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("model width {d} not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::Contract(format!("{rows} rows do not split into sequences of {seq_len}")));
        }
        let batch = rows / seq_len;
        if q_len == 0 || q_len > seq_len || q_rows != batch * q_len {
            return Err(Error::Contract(format!(
                "{q_rows} query rows do not match {batch} sequences of {q_len} queries"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; batch * heads * q_len * seq_len];
        let mut out = vec![0.0; q_rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let p = &mut probs[((b * heads + h) * q_len) * seq_len..][..q_len * seq_len];
                for i in 0..q_len {
                    let qi = &qd[(b * q_len + i) * d + off..][..dh];
                    let prow = &mut p[i * seq_len..(i + 1) * seq_len];
                    for (j, s) in prow.iter_mut().enumerate() {
                        let kj = &kd[(b * seq_len + j) * d + off..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let oi = &mut out[(b * q_len + i) * d + off..][..dh];
                    for (j, &w) in prow.iter().enumerate() {
                        let vj = &vd[(b * seq_len + j) * d + off..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![q_rows, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                q_len,
                seq_len,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Assembles a matrix whose row `r` is row `index[r].1` of
    /// `sources[index[r].0]`. All sources must share a column count.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var> {
        let first = sources
            .first()
            .ok_or_else(|| Error::Contract("gather_rows needs at least one source".into()))?;
        let c = self.nodes[first.0].value.cols();
        for s in sources {
            let sv = &self.nodes[s.0].value;
            if sv.cols() != c || sv.shape().len() != 2 {
                return Err(Error::shape("gather_rows", self.nodes[first.0].value.shape(), sv.shape()));
            }
        }
        if index.is_empty() {
            return Err(Error::Contract("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &(src, row) in index {
            let sv = &self
                .nodes
                .get(sources.get(src).ok_or_else(|| Error::Contract(format!("no source {src}")))?.0)
                .expect("var from this tape")
                .value;
            if row >= sv.rows() {
                return Err(Error::Contract(format!("row {row} out of range for {:?}", sv.shape())));
            }
            data.extend_from_slice(sv.row(row));
        }
        let v = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                sources: sources.to_vec(),
                index: index.to_vec(),
            },
            sources,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match (g, &n.op) {
                (Some(g), Op::Leaf) => Some(Tensor::new(n.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (ar, ac) = av.dims2().expect("matrix");
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = g.len() / m;
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    if *ta {
                        gemm(k, n, m, bv.data(), *tb, g, true, &mut da, false);
                    } else {
                        gemm(m, n, k, g, false, bv.data(), !*tb, &mut da, false);
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    if *tb {
                        gemm(n, m, k, g, true, av.data(), *ta, &mut db, false);
                    } else {
                        gemm(k, m, n, av.data(), !*ta, g, false, &mut db, false);
                    }
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*b) {
                    acc(*b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    acc(*a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                }
                if wants(*b) {
                    acc(*b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                let c = val(*row).len();
                if wants(*a) {
                    acc(*a, g.to_vec());
                }
                if wants(*row) {
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row).data();
                let c = rv.len();
                if wants(*a) {
                    let da = g
                        .chunks(c)
                        .flat_map(|chunk| chunk.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    acc(*a, da);
                }
                if wants(*row) {
                    let av = val(*a).data();
                    let mut dr = vec![0.0; c];
                    for (gc, ac) in g.chunks(c).zip(av.chunks(c)) {
                        for j in 0..c {
                            dr[j] += gc[j] * ac[j];
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|x| x * f).collect()),
            Op::AddScalar(a) => acc(*a, g.to_vec()),
            Op::Relu(a) => {
                let av = val(*a).data();
                acc(*a, g.iter().zip(av).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect());
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
            }
            Op::Log(a) => {
                let av = val(*a).data();
                acc(*a, g.iter().zip(av).map(|(g, x)| g / x).collect());
            }
            Op::Sqrt(a) => {
                let y = node.value.data();
                acc(
                    *a,
                    g.iter()
                        .zip(y)
                        .map(|(g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 })
                        .collect(),
                );
            }
            Op::Square(a) => {
                let av = val(*a).data();
                acc(*a, g.iter().zip(av).map(|(g, x)| 2.0 * g * x).collect());
            }
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let inner = dot(gr, yr);
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| y * (g - inner)));
                }
                acc(*a, dx);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let total: f64 = gr.iter().sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| g - y.exp() * total));
                }
                acc(*a, dx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &node.value;
                let (r, c) = y.dims2().expect("matrix");
                let yd = y.data();
                let mut dx = g.to_vec();
                match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            let n = norms[i];
                            if n < NORM_EPS {
                                continue;
                            }
                            let yr = &yd[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let inner = dot(yr, gr);
                            for j in 0..c {
                                dx[i * c + j] = (gr[j] - yr[j] * inner) / n;
                            }
                        }
                    }
                    Axis::Cols => {
                        let mut inner = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                inner[j] += yd[i * c + j] * g[i * c + j];
                            }
                        }
                        for i in 0..r {
                            for j in 0..c {
                                let n = norms[j];
                                if n >= NORM_EPS {
                                    dx[i * c + j] = (g[i * c + j] - yd[i * c + j] * inner[j]) / n;
                                }
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Standardize { x, axis, inv_std } => {
                let y = &node.value;
                let (r, c) = y.dims2().expect("matrix");
                let yd = y.data();
                let mut dx = vec![0.0; r * c];
                match axis {
                    Axis::Rows => {
                        for i in 0..r {
                            let yr = &yd[i * c..(i + 1) * c];
                            let gr = &g[i * c..(i + 1) * c];
                            let mg = gr.iter().sum::<f64>() / c as f64;
                            let mgy = dot(gr, yr) / c as f64;
                            for j in 0..c {
                                dx[i * c + j] = inv_std[i] * (gr[j] - mg - yr[j] * mgy);
                            }
                        }
                    }
                    Axis::Cols => {
                        let mut mg = vec![0.0; c];
                        let mut mgy = vec![0.0; c];
                        for i in 0..r {
                            for j in 0..c {
                                mg[j] += g[i * c + j];
                                mgy[j] += g[i * c + j] * yd[i * c + j];
                            }
                        }
                        for i in 0..r {
                            for j in 0..c {
                                let k = i * c + j;
                                dx[k] = inv_std[j] * (g[k] - mg[j] / r as f64 - yd[k] * mgy[j] / r as f64);
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                q_len,
                seq_len,
                heads,
                probs,
            } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let (rows, d) = val(*k).dims2().expect("matrix");
                let (ql, l) = (*q_len, *seq_len);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let batch = rows / l;
                let mut dq = vec![0.0; batch * ql * d];
                let mut dk = vec![0.0; rows * d];
                let mut dv = vec![0.0; rows * d];
                let mut dp = vec![0.0; l];
                for b in 0..batch {
                    for h in 0..*heads {
                        let off = h * dh;
                        let p = &probs[((b * heads + h) * ql) * l..][..ql * l];
                        for i in 0..ql {
                            let gi = &g[(b * ql + i) * d + off..][..dh];
                            let prow = &p[i * l..(i + 1) * l];
                            for j in 0..l {
                                let vj = &vd[(b * l + j) * d + off..][..dh];
                                dp[j] = dot(gi, vj);
                                let dvj = &mut dv[(b * l + j) * d + off..][..dh];
                                for (x, y) in dvj.iter_mut().zip(gi) {
                                    *x += prow[j] * y;
                                }
                            }
                            let inner = dot(prow, &dp);
                            let qi = &qd[(b * ql + i) * d + off..][..dh];
                            for j in 0..l {
                                let ds = prow[j] * (dp[j] - inner) * scale;
                                let kj = &kd[(b * l + j) * d + off..][..dh];
                                let dqi = &mut dq[(b * ql + i) * d + off..][..dh];
                                for (x, y) in dqi.iter_mut().zip(kj) {
                                    *x += ds * y;
                                }
                                let dkj = &mut dk[(b * l + j) * d + off..][..dh];
                                for (x, y) in dkj.iter_mut().zip(qi) {
                                    *x += ds * y;
                                }
                            }
                        }
                    }
                }
                if wants(*q) {
                    acc(*q, dq);
                }
                if wants(*k) {
                    acc(*k, dk);
                }
                if wants(*v) {
                    acc(*v, dv);
                }
            }
            Op::GatherRows { sources, index } => {
                let c = node.value.cols();
                let mut parts: Vec<Option<Vec<f64>>> = sources
                    .iter()
                    .map(|s| wants(*s).then(|| vec![0.0; val(*s).len()]))
                    .collect();
                for (r, &(src, row)) in index.iter().enumerate() {
                    if let Some(buf) = parts[src].as_mut() {
                        for (x, y) in buf[row * c..(row + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                            *x += y;
                        }
                    }
                }
                for (s, part) in sources.iter().zip(parts) {
                    if let Some(part) = part {
                        acc(*s, part);
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Per-column mean and biased variance of an `r×c` buffer.
pub(crate) fn column_moments(data: &[f64], r: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; c];
    for row in data.chunks(c) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= r as f64;
    }
    let mut var = vec![0.0; c];
    for row in data.chunks(c) {
        for j in 0..c {
            let d = row[j] - mean[j];
            var[j] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= r as f64;
    }
    (mean, var)
}
