use std::sync::Arc;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    BatchMatMul(Var, Var),
    BatchMatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Atan2(Var, Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanAxis(Var, usize),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    GatherRows(Var, Arc<[Option<usize>]>),
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::BatchMatMul(..) => "bmm",
            Op::BatchMatMulNt(..) => "bmm_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(..) => "sigmoid",
            Op::Atan2(..) => "atan2",
            Op::ConcatLast(..) => "concat_lastdim",
            Op::ConcatRows(..) => "concat_rows",
            Op::MeanAxis(..) => "mean_axis",
            Op::Sum(..) => "sum",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::GatherRows(..) => "gather_rows",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::BatchMatMul(a, b)
            | Op::BatchMatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Mul(a, b)
            | Op::Atan2(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Sigmoid(a)
            | Op::MeanAxis(a, _)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::GatherRows(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::ConcatLast(parts) | Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only operation tape. One graph per forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    score_evals: u64,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` call's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Number of query-key score evaluations performed through
    /// [`Graph::attention_scores`] so far.
    pub fn score_evals(&self) -> u64 {
        self.score_evals
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match *self.shape(v) {
            [b, r, c] => Ok((b, r, c)),
            ref s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::Dimension {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push_op(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push_op(Op::MatMulNt(a, b), Tensor::new(vec![m, n], out)?))
    }

    /// `[B, m, k] x [B, k, n] -> [B, m, n]`
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k) = self.dims3("bmm", a)?;
        let (bs2, k2, n) = self.dims3("bmm", b)?;
        if bs != bs2 || k != k2 {
            return Err(self.mismatch("bmm", a, b));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            mm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(Op::BatchMatMul(a, b), Tensor::new(vec![bs, m, n], out)?))
    }

    /// `[B, m, k] x [B, n, k]^T -> [B, m, n]`
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, m, k) = self.dims3("bmm_nt", a)?;
        let (bs2, n, k2) = self.dims3("bmm_nt", b)?;
        if bs != bs2 || k != k2 {
            return Err(self.mismatch("bmm_nt", a, b));
        }
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            mm_nt(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * n * k..(i + 1) * n * k],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(Op::BatchMatMulNt(a, b), Tensor::new(vec![bs, m, n], out)?))
    }

    /// Scaled query-key scores `q k^T * scale`, for rank-2 or batched rank-3
    /// operands. Every score evaluated here is added to the instrumented
    /// counter reported by [`Graph::score_evals`].
    pub fn attention_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        let raw = match self.shape(q).len() {
            2 => self.matmul_nt(q, k)?,
            _ => self.bmm_nt(q, k)?,
        };
        self.score_evals += self.value(raw).numel() as u64;
        Ok(self.scale(raw, scale))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || self.value(b).numel() == 1 {
            Ok(sa.to_vec())
        } else if self.value(a).numel() == 1 {
            Ok(sb.to_vec())
        } else {
            Err(self.mismatch(op, a, b))
        }
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if ad.len() == bd.len() {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else if bd.len() == 1 {
            ad.iter().map(|&x| f(x, bd[0])).collect()
        } else {
            bd.iter().map(|&y| f(ad[0], y)).collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push_op(Op::Add(a, b), Tensor::new(shape, out)?))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_check("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push_op(Op::Mul(a, b), Tensor::new(shape, out)?))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| x * c).collect(),
        };
        self.push_op(Op::Scale(a, c), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&x| sigmoid(x)).collect(),
        };
        self.push_op(Op::Sigmoid(a), out)
    }

    /// Elementwise two-argument arctangent `atan2(y, x)` in `(-pi, pi]`.
    /// The coincident point `(0, 0)` maps to 0 with zero derivative.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        if self.shape(y) != self.shape(x) {
            return Err(self.mismatch("atan2", y, x));
        }
        let out = self.binary(y, x, |yy, xx| {
            if yy == 0.0 && xx == 0.0 {
                0.0
            } else {
                yy.atan2(xx)
            }
        });
        let shape = self.shape(y).to_vec();
        Ok(self.push_op(Op::Atan2(y, x), Tensor::new(shape, out)?))
    }

    pub fn concat_lastdim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let lead = self.shape(first)[..self.shape(first).len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(self.mismatch("concat_lastdim", first, p));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push_op(Op::ConcatLast(parts.to_vec()), Tensor::new(shape, out)?))
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.mismatch("concat_rows", first, p));
            }
            lead += s[0];
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push_op(Op::ConcatRows(parts.to_vec()), Tensor::new(shape, out)?))
    }

    /// Mean over `axis`; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Dimension {
                op: "mean_axis",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (pre, dim, post) = split_axis(&shape, axis);
        let data = self.value(a).data();
        let mut out = vec![0.0; pre * post];
        for p in 0..pre {
            for d in 0..dim {
                let src = &data[(p * dim + d) * post..(p * dim + d + 1) * post];
                for (o, s) in out[p * post..(p + 1) * post].iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        let inv = 1.0 / dim as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push_op(Op::MeanAxis(a, axis), Tensor::new(out_shape, out)?))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Op::Sum(a), Tensor::scalar(s))
    }

    /// Softmax over the last dimension. Masked positions (`false` in `mask`)
    /// output exactly zero and receive zero gradient.
    pub fn softmax_lastdim(&mut self, a: Var, mask: Option<Arc<[bool]>>) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        if let Some(m) = &mask {
            if m.len() != t.numel() {
                return Err(Error::Dimension {
                    op: "softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; t.numel()];
        for (row, (x, y)) in t.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |i: usize| mask.as_ref().map_or(true, |m| m[row * n + i]);
            if !(0..n).any(keep) {
                return Err(Error::FullyMaskedRow { row });
            }
            // non-finite scores propagate as NaN rather than being skipped
            let max = (0..n)
                .filter(|&i| keep(i))
                .map(|i| x[i])
                .fold(f64::NEG_INFINITY, |m, v| if v.is_nan() || m.is_nan() { f64::NAN } else { m.max(v) });
            let mut total = 0.0;
            for i in 0..n {
                if keep(i) {
                    y[i] = (x[i] - max).exp();
                    total += y[i];
                }
            }
            y.iter_mut().for_each(|v| *v /= total);
        }
        let shape = t.shape().to_vec();
        Ok(self.push_op(Op::Softmax(a), Tensor::new(shape, out)?))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("log_softmax of a scalar".into()))?;
        let mut out = vec![0.0; t.numel()];
        for (x, y) in t.data().chunks(n).zip(out.chunks_mut(n)) {
            let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in y.iter_mut().zip(x) {
                *o = v - lse;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push_op(Op::LogSoftmax(a), Tensor::new(shape, out)?))
    }

    /// Select rows (slices along axis 0). `None` produces a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: Arc<[Option<usize>]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&n_rows, tail)) = shape.split_first() else {
            return Err(Error::Contract("gather_rows on a scalar".into()));
        };
        let width: usize = tail.iter().product();
        let data = self.value(a).data();
        let mut out = vec![0.0; rows.len() * width];
        for (dst, r) in out.chunks_mut(width.max(1)).zip(rows.iter()) {
            if let Some(r) = *r {
                if r >= n_rows {
                    return Err(Error::Contract(format!(
                        "gather_rows index {r} out of range for {n_rows} rows"
                    )));
                }
                dst.copy_from_slice(&data[r * width..(r + 1) * width]);
            }
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(tail);
        Ok(self.push_op(Op::GatherRows(a, rows), Tensor::new(out_shape, out)?))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push_op(Op::Reshape(a), t))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of earlier calls
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &gout, &mut grads);
            }
            grads[id] = Some(gout);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if wants(v) {
                let n = self.nodes[v.0].value.numel();
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
                f(g);
            }
        };

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                acc(a, &mut |g| mm_nt(gout, val(b), m, n, k, g));
                acc(b, &mut |g| mm_tn(val(a), gout, m, k, n, g));
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[0];
                acc(a, &mut |g| mm(gout, val(b), m, n, k, g));
                acc(b, &mut |g| mm_tn(gout, val(a), m, n, k, g));
            }
            &Op::BatchMatMul(a, b) => {
                let (bs, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = shp(b)[2];
                acc(a, &mut |g| {
                    for i in 0..bs {
                        mm_nt(
                            &gout[i * m * n..(i + 1) * m * n],
                            &val(b)[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut g[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..bs {
                        mm_tn(
                            &val(a)[i * m * k..(i + 1) * m * k],
                            &gout[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut g[i * k * n..(i + 1) * k * n],
                        );
                    }
                });
            }
            &Op::BatchMatMulNt(a, b) => {
                let (bs, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = shp(b)[1];
                acc(a, &mut |g| {
                    for i in 0..bs {
                        mm(
                            &gout[i * m * n..(i + 1) * m * n],
                            &val(b)[i * n * k..(i + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut g[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                acc(b, &mut |g| {
                    for i in 0..bs {
                        mm_tn(
                            &gout[i * m * n..(i + 1) * m * n],
                            &val(a)[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut g[i * n * k..(i + 1) * n * k],
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    acc(v, &mut |g| accumulate_broadcast(g, gout, |_| 1.0));
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (val(a), val(b));
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                acc(a, &mut |g| accumulate_broadcast(g, gout, |i| pick(bd, i)));
                acc(b, &mut |g| accumulate_broadcast(g, gout, |i| pick(ad, i)));
            }
            &Op::Scale(a, c) => acc(a, &mut |g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go * c;
                }
            }),
            &Op::Sigmoid(a) => acc(a, &mut |g| {
                for ((gi, go), s) in g.iter_mut().zip(gout).zip(out) {
                    *gi += go * s * (1.0 - s);
                }
            }),
            &Op::Atan2(y, x) => {
                let (yd, xd) = (val(y), val(x));
                let denom = |i: usize| xd[i] * xd[i] + yd[i] * yd[i];
                acc(y, &mut |g| {
                    for i in 0..g.len() {
                        let d = denom(i);
                        if d > 0.0 {
                            g[i] += gout[i] * xd[i] / d;
                        }
                    }
                });
                acc(x, &mut |g| {
                    for i in 0..g.len() {
                        let d = denom(i);
                        if d > 0.0 {
                            g[i] -= gout[i] * yd[i] / d;
                        }
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| *shp(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = out.len() / total.max(1);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    acc(p, &mut |g| {
                        for r in 0..rows {
                            let src = &gout[r * total + offset..r * total + offset + w];
                            for (gi, s) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *gi += s;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.numel();
                    acc(p, &mut |g| {
                        for (gi, s) in g.iter_mut().zip(&gout[offset..offset + n]) {
                            *gi += s;
                        }
                    });
                    offset += n;
                }
            }
            &Op::MeanAxis(a, axis) => {
                let (pre, dim, post) = split_axis(shp(a), axis);
                let inv = 1.0 / dim as f64;
                acc(a, &mut |g| {
                    for p in 0..pre {
                        let src = &gout[p * post..(p + 1) * post];
                        for d in 0..dim {
                            let dst = &mut g[(p * dim + d) * post..(p * dim + d + 1) * post];
                            for (gi, s) in dst.iter_mut().zip(src) {
                                *gi += s * inv;
                            }
                        }
                    }
                });
            }
            &Op::Sum(a) => acc(a, &mut |g| g.iter_mut().for_each(|gi| *gi += gout[0])),
            &Op::Softmax(a) => {
                let n = *shp(a).last().unwrap();
                acc(a, &mut |g| {
                    for ((gr, dy), y) in g.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = dy.iter().zip(y).map(|(d, s)| d * s).sum();
                        for i in 0..n {
                            gr[i] += y[i] * (dy[i] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = *shp(a).last().unwrap();
                acc(a, &mut |g| {
                    for ((gr, dy), y) in g.chunks_mut(n).zip(gout.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = dy.iter().sum();
                        for i in 0..n {
                            gr[i] += dy[i] - y[i].exp() * total;
                        }
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let width: usize = shp(*a)[1..].iter().product();
                acc(*a, &mut |g| {
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let src = &gout[k * width..(k + 1) * width];
                            for (gi, s) in g[r * width..(r + 1) * width].iter_mut().zip(src) {
                                *gi += s;
                            }
                        }
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |g| {
                for (gi, s) in g.iter_mut().zip(gout) {
                    *gi += s;
                }
            }),
        }
    }
}

fn accumulate_broadcast(g: &mut [f64], gout: &[f64], factor: impl Fn(usize) -> f64) {
    if g.len() == gout.len() {
        for (i, (gi, go)) in g.iter_mut().zip(gout).enumerate() {
            *gi += go * factor(i);
        }
    } else {
        // scalar operand broadcast across the output
        g[0] += gout.iter().enumerate().map(|(i, go)| go * factor(i)).sum::<f64>();
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let pre = shape[..axis].iter().product();
    let post = shape[axis + 1..].iter().product();
    (pre, shape[axis], post)
}

/// `out[m, n] += a[m, k] * b[k, n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (a4, b4) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in a4.zip(b4) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[k, n] += a[m, k]^T * c[m, n]`
fn mm_tn(a: &[f64], c: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let cr = &c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, cv) in out[p * n..(p + 1) * n].iter_mut().zip(cr) {
                *o += av * cv;
            }
        }
    }
}
