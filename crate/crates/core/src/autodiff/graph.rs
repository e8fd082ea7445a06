//! Recorded computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so node ids are a topological
//! order by construction. `backward` walks ids in descending order and
//! accumulates into input gradients in that fixed order, which makes
//! gradients bitwise reproducible.

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{PmoeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: NodeId, axis: usize },
    Gather { table: NodeId, ids: Vec<usize> },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, segments: Vec<Segment>, probs: Vec<Vec<f64>> },
    ScaleRowsByColumn { x: NodeId, gate: NodeId, col: usize },
    SegmentMean { x: NodeId, segments: Vec<Segment> },
    CrossEntropy { logits: NodeId, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    NllOfProbs { probs: NodeId, cols: Vec<Option<usize>>, count: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::CausalAttention { .. } => "causal_attention",
            Op::ScaleRowsByColumn { .. } => "scale_rows_by_column",
            Op::SegmentMean { .. } => "segment_mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::NllOfProbs { .. } => "nll_of_probs",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Graph {
    /// Graph that rejects NaN/Inf at node creation.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), checked: true }
    }

    pub fn unchecked() -> Self {
        Self { nodes: Vec::new(), checked: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Leaf ids that carry a gradient slot.
    pub fn trainable_leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if self.checked && !value.is_finite() {
            return Err(PmoeError::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (m, k) = av.require_matrix("matmul lhs")?;
        let (br, bc) = bv.require_matrix("matmul rhs")?;
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(PmoeError::Dimension(format!(
                "matmul inner dimensions disagree: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "ᵀ" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        let bref = if trans_b {
            MatRef::transposed(bv.data(), bc)
        } else {
            MatRef::row_major(bv.data(), bc)
        };
        gemm(m, k, n, MatRef::row_major(av.data(), k), bref, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg)
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`, used for `x·Wᵀ` with weights stored as `out x in`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(PmoeError::Dimension(format!("{what}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let av = &self.nodes[a.0].value;
        let data = av.data().iter().zip(self.nodes[b.0].value.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * factor).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.nodes[a.0].value.data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let av = &self.nodes[a.0].value;
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| gelu(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Normalizes each row of `x` to zero mean and unit variance, then
    /// applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        if gv.len() != d || bv.len() != d {
            return Err(PmoeError::Dimension(format!(
                "layer_norm: input rows have {d} features, gamma {:?}, beta {:?}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = if xv.is_empty() { 0 } else { xv.rows() };
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = gv.data()[c] * h + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.nodes[x.0].value.softmax(axis)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::Softmax { x, axis }, rg)
    }

    /// Selects rows of `table` by index.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        let (rows, d) = tv.require_matrix("gather table")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(PmoeError::Index(format!("row {i} out of range for table with {rows} rows")));
            }
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(&[table]);
        self.push(t, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    /// Multi-head causal self-attention over packed sequences. `q`, `k`, `v`
    /// are `n x d` with heads laid out as contiguous column blocks; each
    /// segment attends only to earlier-or-equal rows within itself.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
    ) -> Result<NodeId> {
        let qv = &self.nodes[q.0].value;
        let kv = &self.nodes[k.0].value;
        let vv = &self.nodes[v.0].value;
        let (n, d) = qv.require_matrix("attention q")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(PmoeError::Dimension(format!(
                "attention q {:?}, k {:?}, v {:?} must share a shape",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || d % heads != 0 {
            return Err(PmoeError::Dimension(format!("{heads} heads do not divide width {d}")));
        }
        check_segments(segments, n)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let off = h * dh;
                let mut p = vec![0.0; len * len];
                for i in 0..len {
                    let qi = &qd[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &kd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        let s = dot(qi, kj) * scale;
                        p[i * len + j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (p[i * len + j] - max).exp();
                        p[i * len + j] = e;
                        sum += e;
                    }
                    let orow = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                    for j in 0..=i {
                        let pij = p[i * len + j] / sum;
                        p[i * len + j] = pij;
                        let vj = &vd[(seg.start + j) * d + off..(seg.start + j) * d + off + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pij * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[q, k, v]);
        self.push(
            t,
            Op::CausalAttention { q, k, v, heads, segments: segments.to_vec(), probs },
            rg,
        )
    }

    /// Scales row `i` of `x` by `gate[i, col]`.
    pub fn scale_rows_by_column(&mut self, x: NodeId, gate: NodeId, col: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gate.0].value;
        let (n, d) = xv.require_matrix("scaled rows")?;
        let (gn, gt) = gv.require_matrix("gate")?;
        if gn != n || col >= gt {
            return Err(PmoeError::Dimension(format!(
                "gate {:?} column {col} cannot scale rows of {:?}",
                gv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for i in 0..n {
            let w = gv.at(i, col);
            out[i * d..(i + 1) * d].iter_mut().for_each(|v| *v *= w);
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x, gate]);
        self.push(t, Op::ScaleRowsByColumn { x, gate, col }, rg)
    }

    /// Replaces each row with the mean of the rows in its segment.
    pub fn segment_mean(&mut self, x: NodeId, segments: &[Segment]) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let (n, d) = xv.require_matrix("segment_mean input")?;
        check_segments(segments, n)?;
        let mut out = vec![0.0; n * d];
        for seg in segments {
            let mut mean = vec![0.0; d];
            for r in seg.start..seg.start + seg.len {
                for (m, v) in mean.iter_mut().zip(xv.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= seg.len as f64);
            for r in seg.start..seg.start + seg.len {
                out[r * d..(r + 1) * d].copy_from_slice(&mean);
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let rg = self.rg(&[x]);
        self.push(t, Op::SegmentMean { x, segments: segments.to_vec() }, rg)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let lv = &self.nodes[logits.0].value;
        let (n, vocab) = lv.require_matrix("logits")?;
        if targets.len() != n {
            return Err(PmoeError::Dimension(format!("{} targets for {n} logit rows", targets.len())));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (i, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            if t >= vocab {
                return Err(PmoeError::Index(format!("target {t} out of range for vocabulary {vocab}")));
            }
            let row = lv.row(i);
            // log-sum-exp as max + ln(1 + rest) keeps precision when one
            // logit dominates
            let (amax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, x)| if x > acc.1 { (j, x) } else { acc });
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != amax)
                .map(|(_, x)| (x - max).exp())
                .sum();
            let offset = rest.ln_1p();
            total += (max - row[t]) + offset;
            for (p, x) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max - offset).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(PmoeError::Contract("cross_entropy over zero target positions".into()));
        }
        let rg = self.rg(&[logits]);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            rg,
        )
    }

    /// Mean of `-ln probs[i, cols[i]]` over rows with a column.
    pub fn nll_of_probs(&mut self, probs: NodeId, cols: &[Option<usize>]) -> Result<NodeId> {
        let pv = &self.nodes[probs.0].value;
        let (n, width) = pv.require_matrix("probabilities")?;
        if cols.len() != n {
            return Err(PmoeError::Dimension(format!("{} columns for {n} rows", cols.len())));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (i, col) in cols.iter().enumerate() {
            let Some(c) = *col else { continue };
            if c >= width {
                return Err(PmoeError::Index(format!("column {c} out of range for width {width}")));
            }
            total -= pv.at(i, c).ln();
            count += 1;
        }
        if count == 0 {
            return Err(PmoeError::Contract("nll_of_probs over zero rows".into()));
        }
        let rg = self.rg(&[probs]);
        self.push(Tensor::scalar(total / count as f64), Op::NllOfProbs { probs, cols: cols.to_vec(), count }, rg)
    }

    /// Populates gradients of `loss` for every node that requires one.
    /// Leaves that require gradients but do not feed `loss` get zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(PmoeError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad {
                Some(g.unwrap_or_else(|| vec![0.0; node.value.len()]))
            } else {
                None
            };
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! acc {
            ($id:expr) => {
                grad_slot(nodes, grads, $id)
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = if *trans_b { br } else { bc };
                if let Some(ga) = acc!(*a) {
                    // dA = dC · Bᵀ   (or dC · B when C = A·Bᵀ)
                    let bref = if *trans_b {
                        MatRef::row_major(bv.data(), bc)
                    } else {
                        MatRef::transposed(bv.data(), bc)
                    };
                    gemm(m, n, k, MatRef::row_major(g, n), bref, ga, 1.0);
                }
                if let Some(gb) = acc!(*b) {
                    if *trans_b {
                        // dB = dCᵀ · A, shape n x k
                        gemm(n, m, k, MatRef::transposed(g, n), MatRef::row_major(av.data(), k), gb, 1.0);
                    } else {
                        // dB = Aᵀ · dC, shape k x n
                        gemm(k, m, n, MatRef::transposed(av.data(), k), MatRef::row_major(g, n), gb, 1.0);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = acc!(*b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = acc!(*b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = acc!(*a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = nodes[gamma.0].value.data();
                let d = gv.len();
                let rows = rstd.len();
                if let Some(gg) = acc!(*gamma) {
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if let Some(gbeta) = acc!(*beta) {
                    for r in 0..rows {
                        for c in 0..d {
                            gbeta[c] += g[r * d + c];
                        }
                    }
                }
                if let Some(gx) = acc!(*x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = &nodes[idx].value;
                if let Some(gx) = acc!(*x) {
                    let shape = y.shape();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let yd = y.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[base + j * inner] * yd[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += yd[p] * (g[p] - dotp);
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = acc!(*table) {
                    let d = nodes[table.0].value.cols();
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads, segments, probs } => {
                let qd = nodes[q.0].value.data();
                let kd = nodes[k.0].value.data();
                let vd = nodes[v.0].value.data();
                let d = nodes[q.0].value.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (mut gq, mut gk, mut gv) = (
                    vec![0.0; qd.len()],
                    vec![0.0; kd.len()],
                    vec![0.0; vd.len()],
                );
                let mut p_iter = probs.iter();
                for seg in segments {
                    let len = seg.len;
                    for h in 0..*heads {
                        let p = p_iter.next().expect("probability block per segment and head");
                        let off = h * dh;
                        let row = |r: usize| (seg.start + r) * d + off;
                        let mut ds = vec![0.0; len];
                        for i in 0..len {
                            let gi = &g[row(i)..row(i) + dh];
                            let mut wsum = 0.0;
                            for j in 0..=i {
                                let vj = &vd[row(j)..row(j) + dh];
                                let dp = dot(gi, vj);
                                ds[j] = dp;
                                wsum += p[i * len + j] * dp;
                                let pij = p[i * len + j];
                                for (x, y) in gv[row(j)..row(j) + dh].iter_mut().zip(gi) {
                                    *x += pij * y;
                                }
                            }
                            for j in 0..=i {
                                let s = p[i * len + j] * (ds[j] - wsum) * scale;
                                let (qi, kj) = (row(i), row(j));
                                for c in 0..dh {
                                    gq[qi + c] += s * kd[kj + c];
                                    gk[kj + c] += s * qd[qi + c];
                                }
                            }
                        }
                    }
                }
                for (id, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(gt) = acc!(id) {
                        gt.iter_mut().zip(&local).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::ScaleRowsByColumn { x, gate, col } => {
                let xv = &nodes[x.0].value;
                let gtv = &nodes[gate.0].value;
                let d = xv.cols();
                let t = gtv.cols();
                let n = xv.rows();
                if let Some(gx) = acc!(*x) {
                    for i in 0..n {
                        let w = gtv.at(i, *col);
                        for c in 0..d {
                            gx[i * d + c] += w * g[i * d + c];
                        }
                    }
                }
                if let Some(gg) = acc!(*gate) {
                    for i in 0..n {
                        gg[i * t + col] += dot(&g[i * d..(i + 1) * d], xv.row(i));
                    }
                }
            }
            Op::SegmentMean { x, segments } => {
                if let Some(gx) = acc!(*x) {
                    let d = nodes[x.0].value.cols();
                    for seg in segments {
                        let mut total = vec![0.0; d];
                        for r in seg.start..seg.start + seg.len {
                            for c in 0..d {
                                total[c] += g[r * d + c];
                            }
                        }
                        for r in seg.start..seg.start + seg.len {
                            for c in 0..d {
                                gx[r * d + c] += total[c] / seg.len as f64;
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                if let Some(gl) = acc!(*logits) {
                    let vocab = nodes[logits.0].value.cols();
                    let w = g[0] / *count as f64;
                    for (i, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        for c in 0..vocab {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[i * vocab + c] += w * (probs[i * vocab + c] - onehot);
                        }
                    }
                }
            }
            Op::NllOfProbs { probs, cols, count } => {
                let pv = &nodes[probs.0].value;
                if let Some(gp) = acc!(*probs) {
                    let width = pv.cols();
                    let w = g[0] / *count as f64;
                    for (i, col) in cols.iter().enumerate() {
                        let Some(c) = *col else { continue };
                        gp[i * width + c] -= w / pv.at(i, c);
                    }
                }
            }
        }
    }
}

fn grad_slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
}

fn check_segments(segments: &[Segment], n: usize) -> Result<()> {
    let mut next = 0;
    for seg in segments {
        if seg.start != next {
            return Err(PmoeError::Contract(format!("segments must tile rows contiguously, got {seg:?}")));
        }
        next += seg.len;
    }
    if next != n {
        return Err(PmoeError::Contract(format!("segments cover {next} rows of {n}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
