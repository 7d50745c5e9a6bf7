//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to produce vector-Jacobian products. Nodes are only ever appended,
//! so inputs always precede the operations that consume them and a single
//! reverse sweep visits the graph in topological order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, strides, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    BatchMatMul {
        a: usize,
        b: usize,
        transpose_b: bool,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBroadcast(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    Gelu { a: usize, tanh: Vec<f64> },
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Reshape(usize),
    Permute {
        a: usize,
        source_index: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    SumAll(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SymmetricKl {
        p: usize,
        q: usize,
        p_probs: Vec<f64>,
        q_probs: Vec<f64>,
        log_ratio: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    leaves: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.tape {
            return Err(Error::State("variable belongs to a different tape".into()));
        }
        self.leaves
            .get(&v.index)
            .ok_or_else(|| Error::State(format!("node {} is not a leaf", v.index)))
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::State("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var { tape: self.id, index }
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.check(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(
            self.nodes[ia].value.data(),
            self.nodes[ib].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ia, ib), needs))
    }

    /// Batched product of `[bs×m×k]` with `[bs×k×n]`, or with `[bs×n×k]ᵀ`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("batch_matmul {sa:?} × {sb:?}")));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::Dimension(format!(
                "batch_matmul inner mismatch {sa:?} × {sb:?} (transpose_b={transpose_b})"
            )));
        }
        let mut out = vec![0.0; bs * m * n];
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        for s in 0..bs {
            let a_s = &da[s * m * k..(s + 1) * m * k];
            let b_s = &db[s * k * n..(s + 1) * k * n];
            let c_s = &mut out[s * m * n..(s + 1) * m * n];
            if transpose_b {
                gemm_nt(a_s, b_s, c_s, m, k, n);
            } else {
                gemm_nn(a_s, b_s, c_s, m, k, n);
            }
        }
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(
            Tensor::new(vec![bs, m, n], out)?,
            Op::BatchMatMul {
                a: ia,
                b: ib,
                transpose_b,
            },
            needs,
        ))
    }

    fn same_shape(&self, ia: usize, ib: usize, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa != sb {
            return Err(Error::Dimension(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(ia, ib, what)?;
        let va = &self.nodes[ia].value;
        let data = va
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((ia, ib, Tensor::new(va.shape().to_vec(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, Op::Add(ia, ib), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, Op::Sub(ia, ib), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, Op::Mul(ia, ib), needs))
    }

    fn suffix_inner(&self, ia: usize, ib: usize, what: &str) -> Result<usize> {
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!(
                "{what}: {sb:?} is not a trailing shape of {sa:?}"
            )));
        }
        Ok(self.nodes[ib].value.len())
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positions).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let inner = self.suffix_inner(ia, ib, "add_broadcast")?;
        let bd = self.nodes[ib].value.data();
        let va = &self.nodes[ia].value;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(inner) {
            add_into(row, bd);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, Op::AddBroadcast(ia, ib), needs))
    }

    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let inner = self.suffix_inner(ia, ib, "mul_broadcast")?;
        let bd = self.nodes[ib].value.data();
        let va = &self.nodes[ia].value;
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(inner) {
            row.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.grad_flag(&[ia, ib]);
        Ok(self.push(t, Op::MulBroadcast(ia, ib), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let data = va.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Scale(ia, factor), needs))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let tanh: Vec<f64> = va.data().iter().map(|&x| gelu_tanh(x)).collect();
        let data = va.data().iter().zip(&tanh).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Gelu { a: ia, tanh }, needs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let width = *va.shape().last().unwrap();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(width) {
            softmax_in_place(row);
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Softmax(ia), needs))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let vx = &self.nodes[ix].value;
        let width = *vx.shape().last().unwrap();
        let (g, b) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if g.shape() != [width] || b.shape() != [width] {
            return Err(Error::Dimension(format!(
                "layer_norm affine {:?}/{:?} for width {width}",
                g.shape(),
                b.shape()
            )));
        }
        let rows = vx.len() / width;
        let mut xhat = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let needs = self.grad_flag(&[ix, ig, ib]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = self.nodes[ia].value.reshaped(shape)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Reshape(ia), needs))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Dimension(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let in_strides = strides(va.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| va.shape()[p]).collect();
        let n = va.len();
        let mut source_index = Vec::with_capacity(n);
        let mut counter = vec![0usize; rank];
        let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut src = 0usize;
        for _ in 0..n {
            source_index.push(src);
            for axis in (0..rank).rev() {
                counter[axis] += 1;
                src += step[axis];
                if counter[axis] < out_shape[axis] {
                    break;
                }
                src -= step[axis] * out_shape[axis];
                counter[axis] = 0;
            }
        }
        let data = source_index.iter().map(|&s| va.data()[s]).collect();
        let t = Tensor::new(out_shape, data)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Permute { a: ia, source_index }, needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = self.nodes[*idx.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?]
            .value
            .shape()
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y)
            {
                return Err(Error::Dimension(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &idx {
                let v = &self.nodes[i].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(out_shape, data)?;
        let needs = self.grad_flag(&idx);
        Ok(self.push(t, Op::Concat { inputs: idx, axis }, needs))
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let va = &self.nodes[ia].value;
        let s = va.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            data.extend_from_slice(&va.data()[base..base + len * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(t, Op::Slice { a: ia, axis, start }, needs))
    }

    /// Rows of a 2-D `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.check(table)?;
        let vt = &self.nodes[it].value;
        if vt.rank() != 2 {
            return Err(Error::Dimension(format!("gather_rows on {:?}", vt.shape())));
        }
        let (rows, width) = (vt.shape()[0], vt.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index(format!("row {bad} out of range for {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Dimension("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            data.extend_from_slice(&vt.data()[id * width..(id + 1) * width]);
        }
        let t = Tensor::new(vec![ids.len(), width], data)?;
        let needs = self.grad_flag(&[it]);
        Ok(self.push(
            t,
            Op::GatherRows {
                table: it,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let needs = self.grad_flag(&[ia]);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ia), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.check(logits)?;
        let vl = &self.nodes[il].value;
        if vl.rank() != 2 || vl.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross entropy logits {:?} with {} labels",
                vl.shape(),
                labels.len()
            )));
        }
        let (b, c) = (vl.shape()[0], vl.shape()[1]);
        if let Some(bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vl.data().to_vec();
        let mut total = 0.0;
        for (row, &y) in probs.chunks_mut(c).zip(labels) {
            let lse = log_sum_exp(row);
            total += lse - row[y];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / b as f64;
        let needs = self.grad_flag(&[il]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Mean over rows of `KL(p‖q) + KL(q‖p)` between the row softmaxes.
    ///
    /// Evaluated as `Σ (p−q)(log p − log q)`, which is bitwise symmetric in
    /// its arguments.
    pub fn symmetric_kl(&mut self, p_logits: Var, q_logits: Var) -> Result<Var> {
        let (ip, iq) = (self.check(p_logits)?, self.check(q_logits)?);
        self.same_shape(ip, iq, "symmetric_kl")?;
        let vp = &self.nodes[ip].value;
        if vp.rank() != 2 {
            return Err(Error::Dimension(format!("symmetric_kl on {:?}", vp.shape())));
        }
        let (b, c) = (vp.shape()[0], vp.shape()[1]);
        let vq = &self.nodes[iq].value;
        let mut p_probs = vec![0.0; b * c];
        let mut q_probs = vec![0.0; b * c];
        let mut log_ratio = vec![0.0; b * c];
        let mut total = 0.0;
        for r in 0..b {
            let pr = &vp.data()[r * c..(r + 1) * c];
            let qr = &vq.data()[r * c..(r + 1) * c];
            let (lp, lq) = (log_sum_exp(pr), log_sum_exp(qr));
            let mut row_total = 0.0;
            for j in 0..c {
                let log_p = pr[j] - lp;
                let log_q = qr[j] - lq;
                let (p, q) = (log_p.exp(), log_q.exp());
                let d = log_p - log_q;
                p_probs[r * c + j] = p;
                q_probs[r * c + j] = q;
                log_ratio[r * c + j] = d;
                row_total += (p - q) * d;
            }
            total += row_total;
        }
        let needs = self.grad_flag(&[ip, iq]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::SymmetricKl {
                p: ip,
                q: iq,
                p_probs,
                q_probs,
                log_ratio,
            },
            needs,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every leaf.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if !self.nodes[il].value.is_scalar() {
            return Err(Error::State(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[il].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |j: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[j].needs_grad {
                    let buf = grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]);
                    f(buf);
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves.insert(i, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let bv = nodes[*b].value.data();
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |da| gemm_nt(&g, bv, da, m, n, k));
                    acc(*b, &mut |db| gemm_tn(av, &g, db, m, k, n));
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let sa = nodes[*a].value.shape();
                    let (bs, m, k) = (sa[0], sa[1], sa[2]);
                    let n = node.value.shape()[2];
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let t = *transpose_b;
                    acc(*a, &mut |da| {
                        for s in 0..bs {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let bs_ = &bv[s * k * n..(s + 1) * k * n];
                            let das = &mut da[s * m * k..(s + 1) * m * k];
                            if t {
                                gemm_nn(gs, bs_, das, m, n, k);
                            } else {
                                gemm_nt(gs, bs_, das, m, n, k);
                            }
                        }
                    });
                    acc(*b, &mut |db| {
                        for s in 0..bs {
                            let gs = &g[s * m * n..(s + 1) * m * n];
                            let as_ = &av[s * m * k..(s + 1) * m * k];
                            let dbs = &mut db[s * k * n..(s + 1) * k * n];
                            if t {
                                gemm_tn(gs, as_, dbs, m, n, k);
                            } else {
                                gemm_tn(as_, gs, dbs, m, k, n);
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| add_into(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, &mut |d| {
                        for ((x, gy), y) in d.iter_mut().zip(&g).zip(bv) {
                            *x += gy * y;
                        }
                    });
                    acc(*b, &mut |d| {
                        for ((x, gy), y) in d.iter_mut().zip(&g).zip(av) {
                            *x += gy * y;
                        }
                    });
                }
                Op::AddBroadcast(a, b) => {
                    let inner = nodes[*b].value.len();
                    acc(*a, &mut |d| add_into(d, &g));
                    acc(*b, &mut |d| {
                        for row in g.chunks(inner) {
                            add_into(d, row);
                        }
                    });
                }
                Op::MulBroadcast(a, b) => {
                    let inner = nodes[*b].value.len();
                    let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                    acc(*a, &mut |d| {
                        for (drow, grow) in d.chunks_mut(inner).zip(g.chunks(inner)) {
                            for ((x, gy), y) in drow.iter_mut().zip(grow).zip(bv) {
                                *x += gy * y;
                            }
                        }
                    });
                    acc(*b, &mut |d| {
                        for (grow, arow) in g.chunks(inner).zip(av.chunks(inner)) {
                            for ((x, gy), y) in d.iter_mut().zip(grow).zip(arow) {
                                *x += gy * y;
                            }
                        }
                    });
                }
                Op::Scale(a, factor) => {
                    acc(*a, &mut |d| d.iter_mut().zip(&g).for_each(|(x, y)| *x += factor * y));
                }
                Op::Gelu { a, tanh } => {
                    let av = nodes[*a].value.data();
                    acc(*a, &mut |d| {
                        for (((x, gy), &v), &t) in d.iter_mut().zip(&g).zip(av).zip(tanh) {
                            let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                            *x += gy * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                        }
                    });
                }
                Op::Softmax(a) => {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    acc(*a, &mut |d| {
                        for ((drow, grow), yrow) in d
                            .chunks_mut(width)
                            .zip(g.chunks(width))
                            .zip(y.chunks(width))
                        {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((x, gy), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *x += yv * (gy - dot);
                            }
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
                    let width = nodes[*gamma].value.len();
                    let gv = nodes[*gamma].value.data();
                    acc(*x, &mut |d| {
                        let mut dxhat = vec![0.0; width];
                        for (r, ((drow, grow), hrow)) in d
                            .chunks_mut(width)
                            .zip(g.chunks(width))
                            .zip(xhat.chunks(width))
                            .enumerate()
                        {
                            for j in 0..width {
                                dxhat[j] = grow[j] * gv[j];
                            }
                            let mean_d = dxhat.iter().sum::<f64>() / width as f64;
                            let mean_dh =
                                dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / width as f64;
                            for j in 0..width {
                                drow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                            }
                        }
                    });
                    acc(*gamma, &mut |d| {
                        for (grow, hrow) in g.chunks(width).zip(xhat.chunks(width)) {
                            for ((x, gy), h) in d.iter_mut().zip(grow).zip(hrow) {
                                *x += gy * h;
                            }
                        }
                    });
                    acc(*beta, &mut |d| {
                        for grow in g.chunks(width) {
                            add_into(d, grow);
                        }
                    });
                }
                Op::Reshape(a) => acc(*a, &mut |d| add_into(d, &g)),
                Op::Permute { a, source_index } => {
                    acc(*a, &mut |d| {
                        for (gy, &s) in g.iter().zip(source_index) {
                            d[s] += gy;
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let out_shape = node.value.shape();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let row = out_shape[*axis] * inner;
                    let mut offset = 0;
                    for &part in inputs {
                        let chunk = nodes[part].value.shape()[*axis] * inner;
                        acc(part, &mut |d| {
                            for o in 0..outer {
                                let src = &g[o * row + offset..o * row + offset + chunk];
                                add_into(&mut d[o * chunk..(o + 1) * chunk], src);
                            }
                        });
                        offset += chunk;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let in_shape = nodes[*a].value.shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let full = in_shape[*axis];
                    acc(*a, &mut |d| {
                        for o in 0..outer {
                            let base = (o * full + start) * inner;
                            add_into(
                                &mut d[base..base + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                }
                Op::GatherRows { table, ids } => {
                    let width = nodes[*table].value.shape()[1];
                    acc(*table, &mut |d| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut d[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                        }
                    });
                }
                Op::SumAll(a) => {
                    let g0 = g[0];
                    acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g0));
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = nodes[*logits].value.shape()[1];
                    let scale = g[0] / labels.len() as f64;
                    acc(*logits, &mut |d| {
                        for (r, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let target = if j == y { 1.0 } else { 0.0 };
                                d[r * c + j] += scale * (probs[r * c + j] - target);
                            }
                        }
                    });
                }
                Op::SymmetricKl {
                    p,
                    q,
                    p_probs,
                    q_probs,
                    log_ratio,
                } => {
                    let c = nodes[*p].value.shape()[1];
                    let rows = p_probs.len() / c;
                    let scale = g[0] / rows as f64;
                    // d/dp_logits = p ⊙ (d − ⟨p, d⟩) + p − q with d = log p − log q,
                    // and the mirror image for q with −d.
                    let side = |own: &[f64], other: &[f64], sign: f64, d: &mut [f64]| {
                        for r in 0..rows {
                            let span = r * c..(r + 1) * c;
                            let (pr, qr, lr) = (&own[span.clone()], &other[span.clone()], &log_ratio[span.clone()]);
                            let inner: f64 = pr.iter().zip(lr).map(|(a, b)| a * sign * b).sum();
                            for j in 0..c {
                                d[r * c + j] += scale * (pr[j] * (sign * lr[j] - inner) + pr[j] - qr[j]);
                            }
                        }
                    };
                    acc(*p, &mut |d| side(p_probs, q_probs, 1.0, d));
                    acc(*q, &mut |d| side(q_probs, p_probs, -1.0, d));
                }
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && !leaves.contains_key(&i) {
                leaves.insert(i, Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            leaves,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh(√(2/π)(x + 0.044715x³))`, via `exp` (several times faster than `f64::tanh`).
fn gelu_tanh(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
