use super::kernels::{self, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows belonging to one sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Sum(Var),
    Dot(Var, Var),
    RowsDot(Var, Var),
    SegmentMean(Var, Vec<Segment>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    NormalizeRows(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    MaskedNce {
        scores: Var,
        hard: Option<Var>,
        tau: f64,
        w_pos: Vec<f64>,
        w_hard: Vec<f64>,
        w_in: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Dynamic tape. Nodes are appended in evaluation order, so the node list is
/// topologically sorted by construction and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Result of one row of the masked in-batch NCE objective.
pub(crate) struct NceRow {
    pub loss: f64,
    pub w_pos: f64,
    pub w_hard: f64,
}

/// Evaluates one row of the masked NCE loss in log space. `weights` receives
/// the softmax weight of every in-batch term (zero where masked out).
pub(crate) fn nce_row(
    pos: f64,
    hard: Option<f64>,
    row: &[f64],
    mask_row: &[bool],
    tau: f64,
    weights: &mut [f64],
) -> NceRow {
    let t_pos = pos / tau;
    let t_hard = hard.map(|h| h / tau);
    let mut max = t_pos;
    if let Some(h) = t_hard {
        max = max.max(h);
    }
    for (s, &m) in row.iter().zip(mask_row) {
        if m {
            max = max.max(s / tau);
        }
    }
    let e_pos = (t_pos - max).exp();
    let e_hard = t_hard.map_or(0.0, |h| (h - max).exp());
    let mut sum = e_pos + e_hard;
    for ((w, s), &m) in weights.iter_mut().zip(row).zip(mask_row) {
        *w = if m { (s / tau - max).exp() } else { 0.0 };
        sum += *w;
    }
    for w in weights.iter_mut() {
        *w /= sum;
    }
    NceRow {
        loss: max + sum.ln() - t_pos,
        w_pos: e_pos / sum,
        w_hard: e_hard / sum,
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let out = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|v| v * c).collect(),
        };
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = super::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data[i * c + j];
            }
        }
        let out = Tensor::matrix(c, r, data)?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Adds a length-n bias vector to every row of an m×n matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != c {
            return Err(Error::dim("add_row_bias", format!("{r}x{c} + {:?}", b.shape())));
        }
        let mut data = self.value(x).data.clone();
        for row in data.chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b.data) {
                *v += bv;
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = kernels::dot(self.value(a).data(), self.value(b).data());
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b), &[a, b]))
    }

    /// Per-row inner products of two m×n matrices, giving a length-m vector.
    pub fn rows_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("rows_dot", a, b)?;
        let (r, c) = self.value(a).dims2()?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data = (0..r)
            .map(|i| kernels::dot(&xa[i * c..(i + 1) * c], &xb[i * c..(i + 1) * c]))
            .collect();
        Ok(self.push(Tensor::vector(data), Op::RowsDot(a, b), &[a, b]))
    }

    /// Averages each segment's rows, giving one row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Segment>) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if segments.is_empty() {
            return Err(Error::Input("segment_mean over zero segments".into()));
        }
        let xd = self.value(x).data();
        let mut data = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.len == 0 || seg.start + seg.len > r {
                return Err(Error::Input(format!(
                    "segment {s} ({}..{}) invalid for {r} rows",
                    seg.start,
                    seg.start + seg.len
                )));
            }
            let out = &mut data[s * c..(s + 1) * c];
            for i in seg.start..seg.start + seg.len {
                for (o, v) in out.iter_mut().zip(&xd[i * c..(i + 1) * c]) {
                    *o += v;
                }
            }
            let inv = 1.0 / seg.len as f64;
            out.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::matrix(segments.len(), c, data)?;
        Ok(self.push(out, Op::SegmentMean(x, segments), &[x]))
    }

    /// Mean over all rows, as a 1×n matrix.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (r, _) = self.value(x).dims2()?;
        self.segment_mean(x, vec![Segment { start: 0, len: r }])
    }

    pub const LAYER_NORM_EPS: f64 = 1e-6;

    /// Per-row layer normalization with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", format!("width {c} vs gain/bias")));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + Self::LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| kernels::gelu(v)).collect(),
        };
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::dim("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {c}")));
        }
        let w = end - start;
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&xd[i * c + start..i * c + end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        Ok(self.push(out, Op::SliceCols(x, start, end), &[x]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > r {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {r}")));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let out = Tensor::matrix(end - start, c, data)?;
        Ok(self.push(out, Op::SliceRows(x, start), &[x]))
    }

    /// Scales every row to unit L2 norm. A zero row is a domain error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Domain(format!("row {i} has norm {n}")));
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        Ok(self.push(out, Op::NormalizeRows(x, norms), &[x]))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row i.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("gather_rows with no ids".into()));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Input(format!("row id {id} out of range 0..{r}")));
            }
            data.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let out = Tensor::matrix(ids.len(), c, data)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = super::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Full (non-causal) scaled dot-product attention, run independently for
    /// every segment and head. `q`, `k`, `v` are T×d with d divisible by `heads`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let (t, d) = self.value(q).dims2()?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("segment_attention", format!("{d} not divisible by {heads}")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::new();
        for seg in segments {
            if seg.len == 0 || seg.start + seg.len > t {
                return Err(Error::Input("attention segment out of range".into()));
            }
            let l = seg.len;
            for h in 0..heads {
                let qh = head_block(qd, seg, d, h, dh);
                let kh = head_block(kd, seg, d, h, dh);
                let vh = head_block(vd, seg, d, h, dh);
                let mut p = vec![0.0; l * l];
                gemm(l, dh, l, &qh, false, &kh, true, &mut p, 0.0);
                for row in p.chunks_mut(l) {
                    row.iter_mut().for_each(|s| *s *= scale);
                    kernels::softmax_in_place(row);
                }
                let mut oh = vec![0.0; l * dh];
                gemm(l, l, dh, &p, false, &vh, false, &mut oh, 0.0);
                scatter_head(&mut out, &oh, seg, d, h, dh);
                probs.extend_from_slice(&p);
            }
        }
        let out = Tensor::matrix(t, d, out)?;
        Ok(self.push(
            out,
            Op::SegmentAttention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Masked in-batch NCE loss over a B×B cosine score matrix whose diagonal
    /// holds the positive scores, plus optional per-row hard-negative scores.
    /// `mask` is B×B row-major; masked-out entries are dropped from the
    /// denominator.
    pub fn masked_nce(
        &mut self,
        scores: Var,
        hard: Option<Var>,
        mask: &[bool],
        tau: f64,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        let (b, b2) = self.value(scores).dims2()?;
        if b != b2 || mask.len() != b * b {
            return Err(Error::dim("masked_nce", format!("scores {b}x{b2}, mask {}", mask.len())));
        }
        if let Some(h) = hard {
            if self.value(h).len() != b {
                return Err(Error::dim("masked_nce", "hard-negative scores length"));
            }
        }
        let sd = self.value(scores).data();
        let hd = hard.map(|h| self.value(h).data());
        let mut w_in = vec![0.0; b * b];
        let mut w_pos = vec![0.0; b];
        let mut w_hard = vec![0.0; b];
        let mut total = 0.0;
        for i in 0..b {
            let row = nce_row(
                sd[i * b + i],
                hd.map(|h| h[i]),
                &sd[i * b..(i + 1) * b],
                &mask[i * b..(i + 1) * b],
                tau,
                &mut w_in[i * b..(i + 1) * b],
            );
            total += row.loss;
            w_pos[i] = row.w_pos;
            w_hard[i] = row.w_hard;
        }
        let mut inputs = vec![scores];
        inputs.extend(hard);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::MaskedNce {
                scores,
                hard,
                tau,
                w_pos,
                w_hard,
                w_in,
            },
            &inputs,
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        if let Op::SegmentAttention {
            q,
            k,
            v,
            segments,
            heads,
            probs,
        } = &node.op
        {
            return self.attention_backward(*q, *k, *v, segments, *heads, probs, g, grads);
        }
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |buf| {
                buf.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bd[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * ad[i];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                acc(*a, &mut |buf| gemm(m, n, k, g, false, bd, true, buf, 1.0));
                acc(*b, &mut |buf| gemm(k, m, n, ad, true, g, false, buf, 1.0));
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2()?;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let c = self.value(*b).len();
                acc(*x, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |buf| {
                    for row in g.chunks(c) {
                        buf.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Dot(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| buf.iter_mut().zip(bd).for_each(|(x, y)| *x += g[0] * y));
                acc(*b, &mut |buf| buf.iter_mut().zip(ad).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::RowsDot(a, b) => {
                let (_, c) = self.value(*a).dims2()?;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |buf| {
                    for (i, x) in buf.iter_mut().enumerate() {
                        *x += g[i / c] * bd[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for (i, x) in buf.iter_mut().enumerate() {
                        *x += g[i / c] * ad[i];
                    }
                });
            }
            Op::SegmentMean(x, segments) => {
                let (_, c) = self.value(*x).dims2()?;
                acc(*x, &mut |buf| {
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len as f64;
                        let gs = &g[s * c..(s + 1) * c];
                        for i in seg.start..seg.start + seg.len {
                            for (bv, gv) in buf[i * c..(i + 1) * c].iter_mut().zip(gs) {
                                *bv += gv * inv;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.value(*x).dims2()?;
                let gd = self.value(*gain).data();
                acc(*gain, &mut |buf| {
                    for i in 0..r * c {
                        buf[i % c] += g[i] * xhat[i];
                    }
                });
                acc(*bias, &mut |buf| {
                    for i in 0..r * c {
                        buf[i % c] += g[i];
                    }
                });
                acc(*x, &mut |buf| {
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = kernels::dot(&dxhat, &xhat[row.clone()]) / c as f64;
                        for j in 0..c {
                            buf[i * c + j] +=
                                inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    let gs = &g[offset..offset + n];
                    acc(p, &mut |buf| buf.iter_mut().zip(gs).for_each(|(x, y)| *x += y));
                    offset += n;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (r, c) = self.value(*x).dims2()?;
                let w = end - start;
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        for j in 0..w {
                            buf[i * c + start + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows(x, start) => {
                let (_, c) = self.value(*x).dims2()?;
                acc(*x, &mut |buf| {
                    buf[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y)
                });
            }
            Op::NormalizeRows(x, norms) => {
                let (_, c) = node.value.dims2()?;
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for (i, n) in norms.iter().enumerate() {
                        let row = i * c..(i + 1) * c;
                        let proj = kernels::dot(&y[row.clone()], &g[row.clone()]);
                        for j in row {
                            buf[j] += (g[j] - y[j] * proj) / n;
                        }
                    }
                });
            }
            Op::GatherRows(table, ids) => {
                let (_, c) = self.value(*table).dims2()?;
                acc(*table, &mut |buf| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            buf[id * c + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let (_, c) = node.value.dims2()?;
                let y = node.value.data();
                acc(*x, &mut |buf| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            buf[r * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::SegmentAttention { .. } => unreachable!("handled above"),
            Op::MaskedNce {
                scores,
                hard,
                tau,
                w_pos,
                w_hard,
                w_in,
            } => {
                let b = w_pos.len();
                let coef = g[0] / (b as f64 * tau);
                acc(*scores, &mut |buf| {
                    for i in 0..b {
                        for j in 0..b {
                            buf[i * b + j] += coef * w_in[i * b + j];
                        }
                        buf[i * b + i] += coef * (w_pos[i] - 1.0);
                    }
                });
                if let Some(h) = hard {
                    acc(*h, &mut |buf| {
                        for i in 0..b {
                            buf[i] += coef * w_hard[i];
                        }
                    });
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let (_, d) = self.value(q).dims2()?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![0.0; qd.len()];
        let mut dk = vec![0.0; kd.len()];
        let mut dv = vec![0.0; vd.len()];
        let mut p_off = 0;
        for seg in segments {
            let l = seg.len;
            for h in 0..heads {
                let p = &probs[p_off..p_off + l * l];
                p_off += l * l;
                let qh = head_block(qd, seg, d, h, dh);
                let kh = head_block(kd, seg, d, h, dh);
                let vh = head_block(vd, seg, d, h, dh);
                let go = head_block(g, seg, d, h, dh);
                let mut dvh = vec![0.0; l * dh];
                gemm(l, l, dh, p, true, &go, false, &mut dvh, 0.0);
                let mut dp = vec![0.0; l * l];
                gemm(l, dh, l, &go, false, &vh, true, &mut dp, 0.0);
                for (pr, dr) in p.chunks(l).zip(dp.chunks_mut(l)) {
                    let s = kernels::dot(pr, dr);
                    for (dv_, pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - s) * scale;
                    }
                }
                let mut dqh = vec![0.0; l * dh];
                gemm(l, l, dh, &dp, false, &kh, false, &mut dqh, 0.0);
                let mut dkh = vec![0.0; l * dh];
                gemm(l, l, dh, &dp, true, &qh, false, &mut dkh, 0.0);
                add_head(&mut dq, &dqh, seg, d, h, dh);
                add_head(&mut dk, &dkh, seg, d, h, dh);
                add_head(&mut dv, &dvh, seg, d, h, dh);
            }
        }
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(buf) => buf.iter_mut().zip(&delta).for_each(|(x, y)| *x += y),
                slot => *slot = Some(delta),
            }
        }
        Ok(())
    }
}

fn head_block(x: &[f64], seg: &Segment, d: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.len * dh);
    for i in seg.start..seg.start + seg.len {
        out.extend_from_slice(&x[i * d + h * dh..i * d + (h + 1) * dh]);
    }
    out
}

fn scatter_head(x: &mut [f64], block: &[f64], seg: &Segment, d: usize, h: usize, dh: usize) {
    for (r, i) in (seg.start..seg.start + seg.len).enumerate() {
        x[i * d + h * dh..i * d + (h + 1) * dh].copy_from_slice(&block[r * dh..(r + 1) * dh]);
    }
}

fn add_head(x: &mut [f64], block: &[f64], seg: &Segment, d: usize, h: usize, dh: usize) {
    for (r, i) in (seg.start..seg.start + seg.len).enumerate() {
        for (xv, bv) in x[i * d + h * dh..i * d + (h + 1) * dh]
            .iter_mut()
            .zip(&block[r * dh..(r + 1) * dh])
        {
            *xv += bv;
        }
    }
}
