//! Reverse-mode autodiff over a linear tape of rank-2 tensors.
//!
//! Every primitive appends one node holding its output value and the op that
//! produced it; `backward` walks the tape once in reverse, accumulating
//! gradients additively (a node feeding several consumers, or one parameter
//! leased at several sites, sums every contribution). The tape also carries
//! the forward matmul FLOP counter: each recorded matmul adds 2·m·n·k, the
//! multiply-and-add convention shared with the analytic ledger. Backward
//! work is deliberately not counted — the ledger models inference cost.

use crate::error::{Error, Result};
use crate::nn::param::{ParamId, ParamStore};
use crate::nn::tensor::{
    gelu_grad_scalar, gelu_scalar, matmul_nt, matmul_raw, matmul_tn, rows_block, sigmoid_scalar,
    Tensor,
};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant leaf; no gradient flows out.
    Input,
    /// Leased parameter value; backward adds into the store accumulator.
    Param(ParamId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// [n,d] + [1,d], broadcast down rows.
    AddRowVec(NodeId, NodeId),
    /// [n,d] ⊙ [1,d], broadcast down rows.
    MulRowVec(NodeId, NodeId),
    /// Row i of [n,d] scaled by entry i of [n,1].
    ScaleRows(NodeId, NodeId),
    /// Whole tensor scaled by a [1,1] graph scalar.
    MulScalarT(NodeId, NodeId),
    /// Constant scale (not differentiated w.r.t. the constant).
    Scale(NodeId, f64),
    Gelu(NodeId),
    Sigmoid(NodeId),
    /// Row-wise softmax; −inf logits get exactly zero weight.
    Softmax(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId },
    /// Mean of the listed rows → [1,d].
    MeanRows { x: NodeId, rows: Vec<usize> },
    SumAll(NodeId),
    Abs(NodeId),
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Copy of `base` with `rows` written at `idx`. Untouched rows keep the
    /// base bytes bit for bit — this is what makes pruning bypass exact.
    PasteRows { base: NodeId, rows: NodeId, idx: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    /// Sample-blocked masked attention: block i of the queries attends to
    /// block i of the keys/values only. One node where the composed
    /// per-sample form (transpose/matmul/scale/add/softmax/matmul) would
    /// cost six per block; softmax probabilities are cached for backward.
    BlockAttn { q: NodeId, k: NodeId, v: NodeId, scale: f64, sq: usize, sk: usize, probs: Vec<Tensor> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: u64,
    /// One lease per parameter per tape: repeat calls return the original
    /// node, so a batch graph shares weights instead of re-cloning them
    /// (backward accumulates through shared nodes either way).
    param_cache: std::collections::HashMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forward matmul FLOPs recorded so far (2·m·n·k per matmul).
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn want_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        let t = self.value(id);
        if t.rank() != 2 {
            return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_cache.get(&id.0) {
            return node;
        }
        let node = self.push(store.value(id).clone(), Op::Param(id));
        self.param_cache.insert(id.0, node);
        node
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.want_rank2("matmul", a)?;
        let (k2, n) = self.want_rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] × [{k2},{n}]")));
        }
        self.flops += 2 * (m as u64) * (n as u64) * (k as u64);
        let v = matmul_raw(self.value(a), self.value(b));
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        self.want_rank2("transpose", x)?;
        let v = self.value(x).transpose2();
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_elementwise(
        &mut self,
        opname: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                opname,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut v = self.value(a).clone();
        for (o, s) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = f(*o, *s);
        }
        Ok(self.push(v, op))
    }

    pub fn add_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, d) = self.want_rank2("add_row_vec", x)?;
        let (one, dv) = self.want_rank2("add_row_vec", v)?;
        if one != 1 || dv != d {
            return Err(Error::shape("add_row_vec", format!("vector [{one},{dv}] against width {d}")));
        }
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for i in 0..out.rows() {
            for (o, s) in out.row_mut(i).iter_mut().zip(&vec) {
                *o += s;
            }
        }
        Ok(self.push(out, Op::AddRowVec(x, v)))
    }

    pub fn mul_row_vec(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (_, d) = self.want_rank2("mul_row_vec", x)?;
        let (one, dv) = self.want_rank2("mul_row_vec", v)?;
        if one != 1 || dv != d {
            return Err(Error::shape("mul_row_vec", format!("vector [{one},{dv}] against width {d}")));
        }
        let mut out = self.value(x).clone();
        let vec = self.value(v).data().to_vec();
        for i in 0..out.rows() {
            for (o, s) in out.row_mut(i).iter_mut().zip(&vec) {
                *o *= s;
            }
        }
        Ok(self.push(out, Op::MulRowVec(x, v)))
    }

    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (n, _) = self.want_rank2("scale_rows", x)?;
        let (ns, one) = self.want_rank2("scale_rows", s)?;
        if ns != n || one != 1 {
            return Err(Error::shape("scale_rows", format!("scales [{ns},{one}] against {n} rows")));
        }
        let mut out = self.value(x).clone();
        let sc = self.value(s).data().to_vec();
        for i in 0..n {
            for o in out.row_mut(i) {
                *o *= sc[i];
            }
        }
        Ok(self.push(out, Op::ScaleRows(x, s)))
    }

    pub fn mul_scalar_t(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s).item().map_err(|_| {
            Error::shape("mul_scalar_t", format!("scale must be [1,1], got {:?}", self.value(s).shape()))
        })?;
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= sv;
        }
        Ok(self.push(out, Op::MulScalarT(x, s)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        self.push(out, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = gelu_scalar(*o);
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = sigmoid_scalar(*o);
        }
        self.push(out, Op::Sigmoid(x))
    }

    /// Row-wise softmax with the max-shift trick. Rows must contain at least
    /// one finite logit; a fully −inf row is a caller bug surfaced as an
    /// error (attention rejects such masks before ever building logits).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.want_rank2("softmax", x)?;
        let mut out = self.value(x).clone();
        for i in 0..n {
            let row = out.row_mut(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !m.is_finite() {
                return Err(Error::contract("softmax", format!("row {i} of {n}×{d} has no finite logit")));
            }
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// y = gain ⊙ (x − μ)/√(σ² + ε) + bias, per row, ε inside the root.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = self.want_rank2("layer_norm", x)?;
        if d < 2 {
            return Err(Error::contract("layer_norm", format!("feature width {d} < 2")));
        }
        let (gr, gd) = self.want_rank2("layer_norm", gain)?;
        let (br, bd) = self.want_rank2("layer_norm", bias)?;
        if (gr, gd) != (1, d) || (br, bd) != (1, d) {
            return Err(Error::shape("layer_norm", format!("gain [{gr},{gd}] bias [{br},{bd}] for width {d}")));
        }
        let mut out = Tensor::zeros(&[n, d]);
        let xs = self.value(x).clone();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for i in 0..n {
            let row = xs.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..d {
                out.set2(i, j, (row[j] - mean) * inv * g[j] + b[j]);
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }))
    }

    pub fn mean_rows(&mut self, x: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let (n, d) = self.want_rank2("mean_rows", x)?;
        if rows.is_empty() {
            return Err(Error::contract("mean_rows", "empty row set"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::contract("mean_rows", format!("row {bad} out of {n}")));
        }
        let mut out = Tensor::zeros(&[1, d]);
        let xs = self.value(x);
        for &r in &rows {
            for (o, s) in out.data_mut().iter_mut().zip(xs.row(r)) {
                *o += s;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        for o in out.data_mut() {
            *o *= inv;
        }
        Ok(self.push(out, Op::MeanRows { x, rows }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.abs();
        }
        self.push(out, Op::Abs(x))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (n, d) = self.want_rank2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&r| r >= n) {
            return Err(Error::contract("gather_rows", format!("row {bad} out of {n}")));
        }
        let mut out = Tensor::zeros(&[idx.len(), d]);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.value(x).row(r));
        }
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    /// Rows at `idx` (strictly increasing) replaced by `rows`; every other
    /// row of `base` is copied untouched.
    pub fn paste_rows(&mut self, base: NodeId, rows: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (n, d) = self.want_rank2("paste_rows", base)?;
        let (rn, rd) = self.want_rank2("paste_rows", rows)?;
        if rn != idx.len() || rd != d {
            return Err(Error::shape(
                "paste_rows",
                format!("rows [{rn},{rd}] for {} slots at width {d}", idx.len()),
            ));
        }
        if !idx.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::contract("paste_rows", "indices must be strictly increasing"));
        }
        if let Some(&bad) = idx.last().filter(|&&r| r >= n) {
            return Err(Error::contract("paste_rows", format!("row {bad} out of {n}")));
        }
        let mut out = self.value(base).clone();
        for (i, &r) in idx.iter().enumerate() {
            let src = self.value(rows).row(i).to_vec();
            out.row_mut(r).copy_from_slice(&src);
        }
        Ok(self.push(out, Op::PasteRows { base, rows, idx }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no parts"));
        }
        let (_, d) = self.want_rank2("concat_rows", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pn, pd) = self.want_rank2("concat_rows", p)?;
            if pd != d {
                return Err(Error::shape("concat_rows", format!("width {pd} != {d}")));
            }
            total += pn;
        }
        let mut out = Tensor::zeros(&[total, d]);
        let mut at = 0;
        for &p in parts {
            let t = self.value(p);
            for i in 0..t.rows() {
                out.row_mut(at).copy_from_slice(t.row(i));
                at += 1;
            }
        }
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Sample-blocked self-attention: queries/keys/values are stacked as
    /// `masks.len()` consecutive row blocks, and block i attends only within
    /// block i under `masks[i]` (additive, entries 0 or −inf, no fully
    /// blocked row). Per block this reproduces the composed
    /// transpose/matmul/scale/add/softmax/matmul chain value for value, and
    /// counts the same FLOPs (the two matmuls).
    pub fn block_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        masks: &[Tensor],
    ) -> Result<NodeId> {
        let (qr, d) = self.want_rank2("block_attention", q)?;
        let (kr, kd) = self.want_rank2("block_attention", k)?;
        let (vr, vd) = self.want_rank2("block_attention", v)?;
        if kd != d || vd != d || kr != vr {
            return Err(Error::shape(
                "block_attention",
                format!("q [{qr},{d}] k [{kr},{kd}] v [{vr},{vd}]"),
            ));
        }
        let b = masks.len();
        if b == 0 || qr % b != 0 || kr % b != 0 {
            return Err(Error::shape(
                "block_attention",
                format!("{qr} query rows / {kr} key rows not divisible into {b} blocks"),
            ));
        }
        let (sq, sk) = (qr / b, kr / b);
        for (bi, mask) in masks.iter().enumerate() {
            if mask.shape() != [sq, sk] {
                return Err(Error::shape(
                    "block_attention",
                    format!("mask {bi} is {:?} for blocks [{sq},{sk}]", mask.shape()),
                ));
            }
            for (pos, &e) in mask.data().iter().enumerate() {
                if e != 0.0 && e != f64::NEG_INFINITY {
                    return Err(Error::contract(
                        "block_attention",
                        format!("mask {bi} entry {e} at flat index {pos}; entries must be 0 or -inf"),
                    ));
                }
            }
            for row in 0..sq {
                if mask.row(row).iter().all(|&e| e == f64::NEG_INFINITY) {
                    return Err(Error::BlockedRow { row: bi * sq + row });
                }
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Tensor::zeros(&[qr, d]);
        let mut probs = Vec::with_capacity(b);
        for bi in 0..b {
            let qb = rows_block(self.value(q), bi * sq, sq);
            let kb = rows_block(self.value(k), bi * sk, sk);
            let vb = rows_block(self.value(v), bi * sk, sk);
            let mut logits = matmul_nt(&qb, &kb);
            for (l, &m) in logits.data_mut().iter_mut().zip(masks[bi].data()) {
                *l = *l * scale + m;
            }
            for r in 0..sq {
                let row = logits.row_mut(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    sum += *x;
                }
                for x in row.iter_mut() {
                    *x /= sum;
                }
            }
            let ob = matmul_raw(&logits, &vb);
            for r in 0..sq {
                out.row_mut(bi * sq + r).copy_from_slice(ob.row(r));
            }
            probs.push(logits);
        }
        self.flops += (b as u64) * 4 * (sq as u64) * (sk as u64) * (d as u64);
        Ok(self.push(out, Op::BlockAttn { q, k, v, scale, sq, sk, probs }))
    }

    /// Reverse sweep from a scalar loss node. Parameter gradients accumulate
    /// into `store`; call `store.zero_grads()` first if starting fresh.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Tensor> = self.nodes.iter().map(|n| Tensor::zeros(n.value.shape())).collect();
        // Reach flags replace scanning each buffer for nonzeros: a node is
        // processed iff some consumer actually routed gradient into it.
        let mut reached = vec![false; self.nodes.len()];
        grads[loss.0].data_mut()[0] = 1.0;
        reached[loss.0] = true;

        for i in (0..self.nodes.len()).rev() {
            if !reached[i] {
                continue;
            }
            // Reverse topological order means node i's gradient is complete
            // here, so it can be moved out instead of cloned.
            let mut g = std::mem::replace(&mut grads[i], Tensor::zeros(&[0]));
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::Matmul(a, b) => {
                    let da = matmul_nt(&g, &self.nodes[b.0].value);
                    let db = matmul_tn(&self.nodes[a.0].value, &g);
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Transpose(x) => {
                    let (n, d) = (g.rows(), g.cols());
                    let dst = grads[x.0].data_mut();
                    for r in 0..n {
                        for c in 0..d {
                            dst[c * n + r] += g.data()[r * d + c];
                        }
                    }
                    reached[x.0] = true;
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_into(&mut grads[a.0], &g);
                    sub_into(&mut grads[b.0], &g);
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let bv = &self.nodes[b.0].value;
                    for (dst, (gk, bk)) in
                        grads[a.0].data_mut().iter_mut().zip(g.data().iter().zip(bv.data()))
                    {
                        *dst += gk * bk;
                    }
                    let av = &self.nodes[a.0].value;
                    for (dst, (gk, ak)) in
                        grads[b.0].data_mut().iter_mut().zip(g.data().iter().zip(av.data()))
                    {
                        *dst += gk * ak;
                    }
                    reached[a.0] = true;
                    reached[b.0] = true;
                }
                Op::AddRowVec(x, v) => {
                    let (x, v) = (*x, *v);
                    add_into(&mut grads[x.0], &g);
                    let d = g.cols();
                    for i in 0..g.rows() {
                        for j in 0..d {
                            grads[v.0].data_mut()[j] += g.get2(i, j);
                        }
                    }
                    reached[x.0] = true;
                    reached[v.0] = true;
                }
                Op::MulRowVec(x, v) => {
                    let (x, v) = (*x, *v);
                    let xv = &self.nodes[x.0].value;
                    let vv = &self.nodes[v.0].value;
                    let d = g.cols();
                    for i in 0..g.rows() {
                        for j in 0..d {
                            grads[x.0].data_mut()[i * d + j] += g.get2(i, j) * vv.data()[j];
                            grads[v.0].data_mut()[j] += g.get2(i, j) * xv.get2(i, j);
                        }
                    }
                    reached[x.0] = true;
                    reached[v.0] = true;
                }
                Op::ScaleRows(x, s) => {
                    let (x, s) = (*x, *s);
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let d = g.cols();
                    for i in 0..g.rows() {
                        let si = sv.data()[i];
                        let mut acc = 0.0;
                        for j in 0..d {
                            grads[x.0].data_mut()[i * d + j] += g.get2(i, j) * si;
                            acc += g.get2(i, j) * xv.get2(i, j);
                        }
                        grads[s.0].data_mut()[i] += acc;
                    }
                    reached[x.0] = true;
                    reached[s.0] = true;
                }
                Op::MulScalarT(x, s) => {
                    let (x, s) = (*x, *s);
                    let sv = self.nodes[s.0].value.data()[0];
                    let xv = &self.nodes[x.0].value;
                    let mut acc = 0.0;
                    for (k, gk) in g.data().iter().enumerate() {
                        grads[x.0].data_mut()[k] += gk * sv;
                        acc += gk * xv.data()[k];
                    }
                    grads[s.0].data_mut()[0] += acc;
                    reached[x.0] = true;
                    reached[s.0] = true;
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    for v in g.data_mut() {
                        *v *= c;
                    }
                    add_into(&mut grads[x.0], &g);
                    reached[x.0] = true;
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let xv = &self.nodes[x.0].value;
                    for (k, gk) in g.data().iter().enumerate() {
                        grads[x.0].data_mut()[k] += gk * gelu_grad_scalar(xv.data()[k]);
                    }
                    reached[x.0] = true;
                }
                Op::Sigmoid(x) => {
                    let x = *x;
                    let yv = &self.nodes[i].value;
                    for (k, gk) in g.data().iter().enumerate() {
                        let s = yv.data()[k];
                        grads[x.0].data_mut()[k] += gk * s * (1.0 - s);
                    }
                    reached[x.0] = true;
                }
                Op::Softmax(x) => {
                    let x = *x;
                    let y = &self.nodes[i].value;
                    let d = y.cols();
                    for r in 0..y.rows() {
                        let dot: f64 = (0..d).map(|j| g.get2(r, j) * y.get2(r, j)).sum();
                        for j in 0..d {
                            grads[x.0].data_mut()[r * d + j] += y.get2(r, j) * (g.get2(r, j) - dot);
                        }
                    }
                    reached[x.0] = true;
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (x, gain, bias) = (*x, *gain, *bias);
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gain.0].value;
                    let d = xv.cols();
                    let df = d as f64;
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let mean = row.iter().sum::<f64>() / df;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / df;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> = (0..d).map(|j| g.get2(r, j) * gv.data()[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / df;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / df;
                        for j in 0..d {
                            grads[x.0].data_mut()[r * d + j] += inv * (dxhat[j] - m1 - xhat[j] * m2);
                            grads[gain.0].data_mut()[j] += g.get2(r, j) * xhat[j];
                            grads[bias.0].data_mut()[j] += g.get2(r, j);
                        }
                    }
                    reached[x.0] = true;
                    reached[gain.0] = true;
                    reached[bias.0] = true;
                }
                Op::MeanRows { x, rows } => {
                    let x = *x;
                    let inv = 1.0 / rows.len() as f64;
                    let d = g.cols();
                    for &r in rows {
                        for j in 0..d {
                            grads[x.0].data_mut()[r * d + j] += g.data()[j] * inv;
                        }
                    }
                    reached[x.0] = true;
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let gs = g.data()[0];
                    for v in grads[x.0].data_mut() {
                        *v += gs;
                    }
                    reached[x.0] = true;
                }
                Op::Abs(x) => {
                    let x = *x;
                    let xv = &self.nodes[x.0].value;
                    for (k, gk) in g.data().iter().enumerate() {
                        let s = xv.data()[k];
                        let sign = if s > 0.0 {
                            1.0
                        } else if s < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        grads[x.0].data_mut()[k] += gk * sign;
                    }
                    reached[x.0] = true;
                }
                Op::GatherRows { x, idx } => {
                    let x = *x;
                    let d = g.cols();
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            grads[x.0].data_mut()[r * d + j] += g.get2(i, j);
                        }
                    }
                    reached[x.0] = true;
                }
                Op::PasteRows { base, rows, idx } => {
                    let (base, rows) = (*base, *rows);
                    let d = g.cols();
                    // Pasted rows route to the patch tensor first, then their
                    // slots are zeroed so the base sees everything else.
                    for (i, &r) in idx.iter().enumerate() {
                        for j in 0..d {
                            grads[rows.0].data_mut()[i * d + j] += g.get2(r, j);
                        }
                    }
                    let idx = idx.clone();
                    for &r in &idx {
                        g.row_mut(r).fill(0.0);
                    }
                    add_into(&mut grads[base.0], &g);
                    reached[base.0] = true;
                    reached[rows.0] = true;
                }
                Op::ConcatRows(parts) => {
                    let d = g.cols();
                    let mut at = 0;
                    for p in parts {
                        let pn = self.nodes[p.0].value.rows();
                        for i in 0..pn {
                            for j in 0..d {
                                grads[p.0].data_mut()[i * d + j] += g.get2(at + i, j);
                            }
                        }
                        at += pn;
                        reached[p.0] = true;
                    }
                }
                Op::BlockAttn { q, k, v, scale, sq, sk, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let (scale, sq, sk) = (*scale, *sq, *sk);
                    let d = self.nodes[v.0].value.cols();
                    for (bi, p) in probs.iter().enumerate() {
                        let gb = rows_block(&g, bi * sq, sq);
                        let qb = rows_block(&self.nodes[q.0].value, bi * sq, sq);
                        let kb = rows_block(&self.nodes[k.0].value, bi * sk, sk);
                        let vb = rows_block(&self.nodes[v.0].value, bi * sk, sk);
                        // out = P·V ⟹ dV = Pᵀ·g, dP = g·Vᵀ.
                        let dv = matmul_tn(p, &gb);
                        let dp = matmul_nt(&gb, &vb);
                        // Through the row softmax, then the 1/√d scaling.
                        let mut ds = Tensor::zeros(&[sq, sk]);
                        for r in 0..sq {
                            let dot: f64 =
                                (0..sk).map(|j| dp.get2(r, j) * p.get2(r, j)).sum();
                            for j in 0..sk {
                                ds.set2(r, j, scale * p.get2(r, j) * (dp.get2(r, j) - dot));
                            }
                        }
                        let dq = matmul_raw(&ds, &kb);
                        let dk = matmul_tn(&ds, &qb);
                        for r in 0..sq {
                            for (dst, src) in grads[q.0]
                                .row_mut(bi * sq + r)
                                .iter_mut()
                                .zip(dq.row(r))
                            {
                                *dst += src;
                            }
                        }
                        for r in 0..sk {
                            let at = bi * sk + r;
                            for j in 0..d {
                                grads[k.0].data_mut()[at * d + j] += dk.get2(r, j);
                                grads[v.0].data_mut()[at * d + j] += dv.get2(r, j);
                            }
                        }
                    }
                    reached[q.0] = true;
                    reached[k.0] = true;
                    reached[v.0] = true;
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn sub_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d -= s;
    }
}

fn mul_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d *= s;
    }
}
