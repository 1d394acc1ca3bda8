use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::counters;
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::Tensor;
use crate::attention::kernel::{self, LocalPattern};
use crate::error::{Error, Result};
use crate::posenc::RelativeBuckets;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Which logits a dense attention call may use.
#[derive(Clone, Debug)]
pub enum Mask {
    None,
    /// Query `i` sees keys `j <= i`.
    Causal,
    /// Row-major `[Lq, Lk]` (shared by heads) or `[h, Lq, Lk]`; `true` = permitted.
    Explicit(Arc<Vec<bool>>),
}

impl Mask {
    pub(crate) fn allows(&self, head: usize, i: usize, j: usize, lq: usize, lk: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal => j <= i,
            Mask::Explicit(m) => {
                if m.len() == lq * lk {
                    m[i * lk + j]
                } else {
                    m[(head * lq + i) * lk + j]
                }
            }
        }
    }

    fn validate(&self, heads: usize, lq: usize, lk: usize) -> Result<()> {
        match self {
            Mask::Explicit(m) if m.len() != lq * lk && m.len() != heads * lq * lk => {
                Err(Error::shape("attention mask", &[m.len()], &[heads, lq, lk]))
            }
            _ => Ok(()),
        }
    }
}

/// Learned per-head bias indexed by relative-position bucket.
#[derive(Clone, Debug)]
pub struct RelBias {
    /// `[heads, num_buckets]`
    pub table: Var,
    pub buckets: Arc<RelativeBuckets>,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Transpose { x: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Gelu { x: usize },
    Relu { x: usize },
    Dropout { x: usize, mask: Vec<f64> },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64> },
    Sum { x: usize },
    SplitHeads { x: usize, heads: usize },
    MergeHeads { x: usize },
    Rope { x: usize, positions: Arc<Vec<usize>>, base: f64 },
    SliceRows { x: usize, start: usize },
    ConcatRows { a: usize, b: usize },
    DenseAttention {
        q: usize,
        k: usize,
        v: usize,
        bias: Option<(usize, Arc<RelativeBuckets>)>,
        probs: Vec<f64>,
    },
    LocalAttention {
        q: usize,
        k: usize,
        v: usize,
        pattern: Arc<LocalPattern>,
        bias: Option<(usize, Arc<RelativeBuckets>)>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so it can be differentiated once.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`; `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads[var.id]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient of `var`, zeros when it did not receive any.
    pub fn wrt(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Output batch shape plus (a, b) batch offsets for every output batch index.
fn broadcast_batches(a: &[usize], b: &[usize]) -> Option<(Vec<usize>, Vec<(usize, usize)>)> {
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        match (x, y) {
            (x, y) if x == y => out.push(x),
            (1, y) => out.push(y),
            (x, 1) => out.push(x),
            _ => return None,
        }
    }
    let total = numel(&out);
    let mut pairs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        let (mut ao, mut bo) = (0, 0);
        for d in 0..rank {
            ao = ao * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
            bo = bo * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
        }
        pairs.push((ao, bo));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some((out, pairs))
}

/// `small` must equal a trailing slice of `big`.
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    fn idx(&self, v: Var) -> usize {
        assert_eq!(
            v.tape, self.id,
            "variable recorded on a different tape was passed to this tape"
        );
        v.id
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { id, tape: self.id }
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v)].requires_grad
    }

    /// Batched matrix product `[..., m, k] × [..., k, n]` with batch broadcasting.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ai].value.shape(), self.nodes[bi].value.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (batch, pairs) = broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2])
            .ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let (ad, bd) = (self.nodes[ai].value.data(), self.nodes[bi].value.data());
        let mut out = vec![0.0; pairs.len() * m * n];
        for (o, &(pa, pb)) in pairs.iter().enumerate() {
            gemm_nn(
                m,
                k,
                n,
                &ad[pa * m * k..(pa + 1) * m * k],
                &bd[pb * k * n..(pb + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
            );
        }
        counters::add_dense((pairs.len() * m * k * n) as u64);
        check_finite("matmul", &out)?;
        let mut shape = batch;
        shape.extend([m, n]);
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::from_parts(shape, out), rg, Op::MatMul { a: ai, b: bi }))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.shape().to_vec();
        if s.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "transpose needs rank >= 2, got {s:?}"
            )));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_last2(self.nodes[xi].value.data(), r, c);
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Transpose { x: xi }))
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        op_name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let (big, small, swapped) = if is_suffix(va.shape(), vb.shape()) {
            (va, vb, false)
        } else if is_suffix(vb.shape(), va.shape()) {
            (vb, va, true)
        } else {
            return Err(Error::shape(op_name, va.shape(), vb.shape()));
        };
        let sn = small.numel();
        let data: Vec<f64> = big
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = small.data()[i % sn];
                if swapped {
                    f(y, x)
                } else {
                    f(x, y)
                }
            })
            .collect();
        check_finite(op_name, &data)?;
        Ok((ai, bi, Tensor::from_parts(big.shape().to_vec(), data)))
    }

    /// Elementwise sum; one operand may be a trailing-suffix broadcast of the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.broadcast_binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, rg, Op::Add { a: ai, b: bi }))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, t) = self.broadcast_binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(t, rg, Op::Mul { a: ai, b: bi }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(|v| v * c);
        check_finite("scale", t.data())?;
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Scale { x: xi, c }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(gelu_scalar);
        check_finite("gelu", t.data())?;
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Gelu { x: xi }))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let t = self.nodes[xi].value.map(|v| v.max(0.0));
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Relu { x: xi }))
    }

    /// Inverted dropout. Returns `x` itself when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let xi = self.idx(x);
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[xi].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = &self.nodes[xi].value;
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Dropout { x: xi, mask }))
    }

    /// Softmax along `axis`, stabilized by subtracting each slice's max.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xi = self.idx(x);
        let src = &self.nodes[xi].value;
        let s = src.shape();
        if axis >= s.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of bounds for shape {s:?}"
            )));
        }
        let (outer, n, inner) = axis_split(s, axis);
        let xs = src.data();
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for inn in 0..inner {
                let at = |j: usize| (o * n + j) * inner + inn;
                let mx = (0..n).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (xs[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        check_finite("softmax", &out)?;
        let t = Tensor::from_parts(s.to_vec(), out);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Softmax { x: xi, axis }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x), self.idx(gain), self.idx(bias));
        let (xv, gv, bv) = (
            &self.nodes[xi].value,
            &self.nodes[gi].value,
            &self.nodes[bi].value,
        );
        let c = *xv.shape().last().ok_or_else(|| {
            Error::InvalidArgument("layer_norm on a rank-0 tensor".into())
        })?;
        if c == 0 {
            return Err(Error::InvalidArgument("layer_norm over a zero-length axis".into()));
        }
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.numel() / c;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(
            t,
            rg,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                xhat,
                rstd,
            },
        ))
    }

    /// Gathers rows of `table` (`[V, d]`) into `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.idx(table);
        let tv = &self.nodes[ti].value;
        if tv.rank() != 2 {
            return Err(Error::InvalidArgument(format!(
                "embedding table must be rank 2, got {:?}",
                tv.shape()
            )));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("embedding lookup of zero ids".into()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(&[ti]);
        Ok(self.push(
            t,
            rg,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let li = self.idx(logits);
        let lv = &self.nodes[li].value;
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let v = lv.shape()[1];
        let mut probs = vec![0.0; lv.numel()];
        let mut tgt = Vec::with_capacity(targets.len());
        let mut total = 0.0;
        let mut count = 0usize;
        for (t, &target) in targets.iter().enumerate() {
            let row = &lv.data()[t * v..(t + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..v {
                probs[t * v + j] = (row[j] - mx).exp() / z;
            }
            if target == ignore_id {
                tgt.push(None);
                continue;
            }
            if target >= v {
                return Err(Error::IndexOutOfRange {
                    index: target,
                    extent: v,
                });
            }
            total += mx + z.ln() - row[target];
            count += 1;
            tgt.push(Some(target));
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        check_finite("cross_entropy", &[loss])?;
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits: li,
                targets: tgt,
                probs,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let s = self.nodes[xi].value.sum();
        check_finite("sum", &[s])?;
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum { x: xi }))
    }

    /// `[L, h·d]` → `[h, L, d]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        if xv.rank() != 2 || heads == 0 || xv.shape()[1] % heads != 0 {
            return Err(Error::shape("split_heads", xv.shape(), &[heads]));
        }
        let (l, dm) = (xv.shape()[0], xv.shape()[1]);
        let d = dm / heads;
        let mut out = vec![0.0; l * dm];
        for p in 0..l {
            for h in 0..heads {
                out[(h * l + p) * d..(h * l + p + 1) * d]
                    .copy_from_slice(&xv.data()[p * dm + h * d..p * dm + (h + 1) * d]);
            }
        }
        let t = Tensor::from_parts(vec![heads, l, d], out);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::SplitHeads { x: xi, heads }))
    }

    /// `[h, L, d]` → `[L, h·d]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        if xv.rank() != 3 {
            return Err(Error::shape("merge_heads", xv.shape(), &[0, 0, 0]));
        }
        let (heads, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let out = merge_heads_data(xv.data(), heads, l, d);
        let t = Tensor::from_parts(vec![l, heads * d], out);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::MergeHeads { x: xi }))
    }

    /// Rotates channel pairs `(2i, 2i+1)` of rows `0..positions.len()` in `[h, L, d]`
    /// by `positions[r] · base^(-2i/d)`. Remaining rows pass through unchanged.
    pub fn rope(&mut self, x: Var, positions: Arc<Vec<usize>>, base: f64) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        if xv.rank() != 3 {
            return Err(Error::shape("rope", xv.shape(), &[0, 0, 0]));
        }
        let (heads, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if d % 2 != 0 {
            return Err(Error::InvalidArgument(format!("rope needs an even head_dim, got {d}")));
        }
        if positions.len() > l {
            return Err(Error::shape("rope", xv.shape(), &[positions.len()]));
        }
        let out = rope_rotate(xv.data(), heads, l, d, &positions, base, 1.0);
        check_finite("rope", &out)?;
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(&[xi]);
        Ok(self.push(t, rg, Op::Rope { x: xi, positions, base }))
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xi = self.idx(x);
        let xv = &self.nodes[xi].value;
        let rows = *xv.shape().first().unwrap_or(&0);
        if start >= end || end > rows {
            return Err(Error::InvalidArgument(format!(
                "slice_rows {start}..{end} of {rows} rows"
            )));
        }
        let w = xv.numel() / rows;
        let data = xv.data()[start * w..end * w].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let rg = self.rg(&[xi]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::SliceRows { x: xi, start }))
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.rank() == 0 || va.shape()[1..] != vb.shape()[1..] || vb.rank() == 0 {
            return Err(Error::shape("concat_rows", va.shape(), vb.shape()));
        }
        let mut data = va.data().to_vec();
        data.extend_from_slice(vb.data());
        let mut shape = va.shape().to_vec();
        shape[0] += vb.shape()[0];
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::ConcatRows { a: ai, b: bi }))
    }

    fn attention_inputs(&self, q: Var, k: Var, v: Var) -> Result<(usize, usize, usize, [usize; 4])> {
        let (qi, ki, vi) = (self.idx(q), self.idx(k), self.idx(v));
        let (sq, sk, sv) = (
            self.nodes[qi].value.shape(),
            self.nodes[ki].value.shape(),
            self.nodes[vi].value.shape(),
        );
        if sq.len() != 3 || sk.len() != 3 || sk != sv || sq[0] != sk[0] || sq[2] != sk[2] {
            return Err(Error::shape("attention", sq, sk));
        }
        Ok((qi, ki, vi, [sq[0], sq[1], sk[1], sq[2]]))
    }

    fn bias_table(&self, bias: &Option<RelBias>, heads: usize) -> Result<Option<(usize, Arc<RelativeBuckets>)>> {
        match bias {
            None => Ok(None),
            Some(b) => {
                let ti = self.idx(b.table);
                let s = self.nodes[ti].value.shape();
                if s != [heads, b.buckets.num_buckets()] {
                    return Err(Error::shape("relative bias table", s, &[heads, b.buckets.num_buckets()]));
                }
                Ok(Some((ti, Arc::clone(&b.buckets))))
            }
        }
    }

    /// Scaled dot-product attention over `[h, L, d]` inputs with a dense mask.
    ///
    /// Masked logits are set to −1e9; rows with no permitted key produce zeros.
    pub fn dense_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Mask,
        bias: Option<RelBias>,
    ) -> Result<Var> {
        let (qi, ki, vi, [h, lq, lk, d]) = self.attention_inputs(q, k, v)?;
        mask.validate(h, lq, lk)?;
        let bias = self.bias_table(&bias, h)?;
        let dims = kernel::Dims { heads: h, lq, lk, d };
        let (out, probs) = kernel::dense_forward(
            dims,
            self.nodes[qi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[vi].value.data(),
            &mask,
            bias.as_ref().map(|(t, b)| (self.nodes[*t].value.data(), b.as_ref())),
        );
        check_finite("dense_attention", &out)?;
        let mut ids = vec![qi, ki, vi];
        if let Some((t, _)) = &bias {
            ids.push(*t);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![h, lq, d], out),
            rg,
            Op::DenseAttention {
                q: qi,
                k: ki,
                v: vi,
                bias,
                probs,
            },
        ))
    }

    /// Block-local attention with optional global rows.
    ///
    /// `q`, `k`, `v` are `[h, L + g, d]`: the first `L` rows are tokens laid out
    /// by `pattern.layout`, the last `g` rows are global tokens.
    pub fn local_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        pattern: Arc<LocalPattern>,
        bias: Option<RelBias>,
    ) -> Result<Var> {
        let (qi, ki, vi, [h, lq, lk, d]) = self.attention_inputs(q, k, v)?;
        let n = pattern.layout.seq_len + pattern.globals;
        if lq != n || lk != n {
            return Err(Error::shape("local_attention", &[lq, lk], &[n, n]));
        }
        let bias = self.bias_table(&bias, h)?;
        let (out, probs) = kernel::local_forward(
            h,
            d,
            &pattern,
            self.nodes[qi].value.data(),
            self.nodes[ki].value.data(),
            self.nodes[vi].value.data(),
            bias.as_ref().map(|(t, b)| (self.nodes[*t].value.data(), b.as_ref())),
        );
        check_finite("local_attention", &out)?;
        let mut ids = vec![qi, ki, vi];
        if let Some((t, _)) = &bias {
            ids.push(*t);
        }
        let rg = self.rg(&ids);
        Ok(self.push(
            Tensor::from_parts(vec![h, n, d], out),
            rg,
            Op::LocalAttention {
                q: qi,
                k: ki,
                v: vi,
                pattern,
                bias,
                probs,
            },
        ))
    }

    /// Attention weights recorded by the most recent attention node producing `out`.
    pub fn attention_probs(&self, out: Var) -> Option<&[f64]> {
        match &self.nodes[self.idx(out)].op {
            Op::DenseAttention { probs, .. } | Op::LocalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from a scalar `loss`. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id {
            return Err(Error::Tape("loss is not recorded on this tape".into()));
        }
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.nodes[loss.id].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got shape {:?}",
                self.nodes[loss.id].value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |i: usize| &nodes[i].value;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut acc = |i: usize, contrib: Vec<f64>| {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
                let (_, pairs) =
                    broadcast_batches(&sa[..sa.len() - 2], &sb[..sb.len() - 2]).expect("checked");
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if wants(*a) {
                    let mut da = vec![0.0; ad.len()];
                    for (o, &(pa, pb)) in pairs.iter().enumerate() {
                        gemm_nt(
                            m,
                            n,
                            k,
                            &g[o * m * n..(o + 1) * m * n],
                            &bd[pb * k * n..(pb + 1) * k * n],
                            &mut da[pa * m * k..(pa + 1) * m * k],
                        );
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![0.0; bd.len()];
                    for (o, &(pa, pb)) in pairs.iter().enumerate() {
                        gemm_tn(
                            k,
                            m,
                            n,
                            &ad[pa * m * k..(pa + 1) * m * k],
                            &g[o * m * n..(o + 1) * m * n],
                            &mut db[pb * k * n..(pb + 1) * k * n],
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::Transpose { x } => {
                let s = val(id).shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                acc(*x, transpose_last2(g, r, c));
            }
            Op::Add { a, b } => {
                for &i in [a, b] {
                    acc(i, reduce_to(g, val(i).numel()));
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let (na, nb) = (va.len(), vb.len());
                if wants(*a) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * vb[i % nb])
                        .collect();
                    acc(*a, reduce_to(&full, na));
                }
                if wants(*b) {
                    let full: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * va[i % na])
                        .collect();
                    acc(*b, reduce_to(&full, nb));
                }
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Gelu { x } => {
                let xs = val(*x).data();
                acc(*x, g.iter().zip(xs).map(|(gv, &xv)| gv * gelu_grad(xv)).collect());
            }
            Op::Relu { x } => {
                let xs = val(*x).data();
                acc(
                    *x,
                    g.iter()
                        .zip(xs)
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
            }
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect()),
            Op::Softmax { x, axis } => {
                let y = val(id).data();
                let (outer, n, inner) = axis_split(val(id).shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + inn;
                        let dot: f64 = (0..n).map(|j| y[at(j)] * g[at(j)]).sum();
                        for j in 0..n {
                            dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain).data();
                let c = gv.len();
                let rows = rstd.len();
                if wants(*x) {
                    let mut dx = vec![0.0; rows * c];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dxh = gr[j] * gv[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[r * c + j] = rstd[r] * (gr[j] * gv[j] - m1 - xh[j] * m2);
                        }
                    }
                    acc(*x, dx);
                }
                if wants(*gain) {
                    let mut dg = vec![0.0; c];
                    for (i, gvl) in g.iter().enumerate() {
                        dg[i % c] += gvl * xhat[i];
                    }
                    acc(*gain, dg);
                }
                if wants(*bias) {
                    acc(*bias, reduce_to(g, c));
                }
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &row) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[row * d + j] += g[r * d + j];
                    }
                }
                acc(*table, dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = val(*logits).shape()[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut dl = vec![0.0; probs.len()];
                if count > 0 {
                    let s = g[0] / count as f64;
                    for (t, target) in targets.iter().enumerate() {
                        if let Some(target) = target {
                            for j in 0..v {
                                dl[t * v + j] = s * probs[t * v + j];
                            }
                            dl[t * v + target] -= s;
                        }
                    }
                }
                acc(*logits, dl);
            }
            Op::Sum { x } => acc(*x, vec![g[0]; val(*x).numel()]),
            Op::SplitHeads { x, heads } => {
                let s = val(id).shape();
                acc(*x, merge_heads_data(g, *heads, s[1], s[2]));
            }
            Op::MergeHeads { x } => {
                let s = val(*x).shape();
                let (heads, l, d) = (s[0], s[1], s[2]);
                let dm = heads * d;
                let mut dx = vec![0.0; g.len()];
                for p in 0..l {
                    for h in 0..heads {
                        dx[(h * l + p) * d..(h * l + p + 1) * d]
                            .copy_from_slice(&g[p * dm + h * d..p * dm + (h + 1) * d]);
                    }
                }
                acc(*x, dx);
            }
            Op::Rope { x, positions, base } => {
                let s = val(*x).shape();
                acc(*x, rope_rotate(g, s[0], s[1], s[2], positions, *base, -1.0));
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let w = xv.numel() / xv.shape()[0];
                let mut dx = vec![0.0; xv.numel()];
                dx[start * w..start * w + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::ConcatRows { a, b } => {
                let na = val(*a).numel();
                acc(*a, g[..na].to_vec());
                acc(*b, g[na..].to_vec());
            }
            Op::DenseAttention {
                q,
                k,
                v,
                bias,
                probs,
            } => {
                let (sq, sk) = (val(*q).shape(), val(*k).shape());
                let dims = kernel::Dims {
                    heads: sq[0],
                    lq: sq[1],
                    lk: sk[1],
                    d: sq[2],
                };
                let grads_out = kernel::dense_backward(
                    dims,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    bias.as_ref().map(|(_, b)| b.as_ref()),
                    g,
                );
                acc(*q, grads_out.dq);
                acc(*k, grads_out.dk);
                acc(*v, grads_out.dv);
                if let (Some((t, _)), Some(dt)) = (bias, grads_out.dbias) {
                    acc(*t, dt);
                }
            }
            Op::LocalAttention {
                q,
                k,
                v,
                pattern,
                bias,
                probs,
            } => {
                let sq = val(*q).shape();
                let grads_out = kernel::local_backward(
                    sq[0],
                    sq[2],
                    pattern,
                    val(*q).data(),
                    val(*k).data(),
                    val(*v).data(),
                    probs,
                    bias.as_ref().map(|(_, b)| b.as_ref()),
                    g,
                );
                acc(*q, grads_out.dq);
                acc(*k, grads_out.dk);
                acc(*v, grads_out.dv);
                if let (Some((t, _)), Some(dt)) = (bias, grads_out.dbias) {
                    acc(*t, dt);
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Sums a broadcast gradient back down to a trailing-suffix operand of `n` elements.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    out
}

fn transpose_last2(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let per = r * c;
    for b in 0..x.len() / per {
        let src = &x[b * per..(b + 1) * per];
        let dst = &mut out[b * per..(b + 1) * per];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn merge_heads_data(x: &[f64], heads: usize, l: usize, d: usize) -> Vec<f64> {
    let dm = heads * d;
    let mut out = vec![0.0; x.len()];
    for h in 0..heads {
        for p in 0..l {
            out[p * dm + h * d..p * dm + (h + 1) * d]
                .copy_from_slice(&x[(h * l + p) * d..(h * l + p + 1) * d]);
        }
    }
    out
}

/// Rotation by `sign · angle`; `sign = -1` applies the transpose (the backward rule).
pub(crate) fn rope_rotate(
    x: &[f64],
    heads: usize,
    l: usize,
    d: usize,
    positions: &[usize],
    base: f64,
    sign: f64,
) -> Vec<f64> {
    let mut out = x.to_vec();
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-(2.0 * i as f64) / d as f64))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        for (i, &f) in freqs.iter().enumerate() {
            let (s, c) = (sign * pos as f64 * f).sin_cos();
            for h in 0..heads {
                let o = (h * l + r) * d + 2 * i;
                let (x0, x1) = (x[o], x[o + 1]);
                out[o] = x0 * c - x1 * s;
                out[o + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
