//! Tape-based reverse-mode automatic differentiation over [`Mat`].
//!
//! Forward values are computed eagerly as nodes are pushed; `backward` walks
//! the tape in reverse once and accumulates exact gradients. Nodes that no
//! trainable parameter feeds into are skipped (frozen parameters therefore
//! receive structurally zero gradients). A tape can be consumed by `backward`
//! exactly once; building per-instance tapes and summing parameter gradients
//! outside is the intended batch pattern.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use super::crf::crf_nll_backward;
use super::mat::{matmul, matmul_acc, Mat};
use super::params::{Gradients, ParamStore};
use super::ModelError;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: f64 },
    Gather { table: NodeId, ids: Vec<u32> },
    SelectRows { a: NodeId, rows: Vec<usize> },
    MeanRows { a: NodeId, rows: Vec<usize> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, rstd: Vec<f64> },
    SoftmaxRows { a: NodeId },
    LogSoftmaxRows { a: NodeId },
    Gelu { a: NodeId },
    MulConst { a: NodeId, mask: Vec<f64> },
    AddConst { a: NodeId },
    NllSum { logp: NodeId, targets: Vec<usize>, weights: Vec<f64> },
    CrfNll { em: NodeId, trans: NodeId, start: NodeId, end: NodeId, tags: Vec<usize> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// The autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
    consumed: bool,
    param_leaves: Vec<(usize, NodeId)>,
    param_cache: BTreeMap<usize, NodeId>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
            param_leaves: Vec::new(),
            param_cache: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.rows == 1 && v.cols == 1);
        v.data[0]
    }

    /// Gradient of the last backward pass with respect to a node, if any
    /// reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Mat> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Constant input: participates in values, never in gradients.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Named parameter leaf. Repeated requests for the same parameter return
    /// the same node, so tied uses (input and output embeddings) accumulate
    /// into one gradient. Frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let entry = store
            .entry_index(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&id) = self.param_cache.get(&entry) {
            return id;
        }
        let frozen = store.is_frozen_entry(entry);
        let id = self.push(store.entry_value(entry).clone(), Op::Leaf, !frozen);
        self.param_cache.insert(entry, id);
        self.param_leaves.push((entry, id));
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        let needs = self.wants(a) || self.wants(b);
        self.push(value, Op::MatMul { a, b, ta, tb }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert!(va.same_shape(vb), "add shape mismatch");
        let mut value = va.clone();
        value.add_assign(vb);
        let needs = self.wants(a) || self.wants(b);
        self.push(value, Op::Add { a, b }, needs)
    }

    /// Adds a 1×cols row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!(vr.rows, 1);
        assert_eq!(va.cols, vr.cols);
        let mut value = va.clone();
        for i in 0..value.rows {
            for (x, r) in value.row_mut(i).iter_mut().zip(&vr.data) {
                *x += r;
            }
        }
        let needs = self.wants(a) || self.wants(row);
        self.push(value, Op::AddRow { a, row }, needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_assign(c);
        let needs = self.wants(a);
        self.push(value, Op::Scale { a, c }, needs)
    }

    /// Rows of `table` selected by token ids.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> NodeId {
        let vt = self.value(table);
        let mut value = Mat::zeros(ids.len(), vt.cols);
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(vt.row(id as usize));
        }
        let needs = self.wants(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn select_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let va = self.value(a);
        let mut value = Mat::zeros(rows.len(), va.cols);
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).copy_from_slice(va.row(r));
        }
        let needs = self.wants(a);
        self.push(
            value,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    /// Mean of the selected rows, as a 1×cols matrix.
    pub fn mean_rows(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        assert!(!rows.is_empty());
        let va = self.value(a);
        let mut value = Mat::zeros(1, va.cols);
        for &r in rows {
            for (o, x) in value.row_mut(0).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        value.scale_assign(1.0 / rows.len() as f64);
        let needs = self.wants(a);
        self.push(
            value,
            Op::MeanRows {
                a,
                rows: rows.to_vec(),
            },
            needs,
        )
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        assert_eq!(vg.rows, 1);
        assert_eq!(vb.rows, 1);
        assert_eq!(vx.cols, vg.cols);
        let d = vx.cols as f64;
        let mut value = Mat::zeros(vx.rows, vx.cols);
        let mut mean = Vec::with_capacity(vx.rows);
        let mut rstd = Vec::with_capacity(vx.rows);
        for i in 0..vx.rows {
            let row = vx.row(i);
            let mu: f64 = row.iter().sum::<f64>() / d;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            for (j, out) in value.row_mut(i).iter_mut().enumerate() {
                *out = (row[j] - mu) * rs * vg.data[j] + vb.data[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let needs = self.wants(x) || self.wants(gain) || self.wants(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            needs,
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Mat::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            let row = va.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = value.row_mut(i);
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = libm::exp(x - m);
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.wants(a);
        self.push(value, Op::SoftmaxRows { a }, needs)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Mat::zeros(va.rows, va.cols);
        for i in 0..va.rows {
            let row = va.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|&x| libm::exp(x - m)).sum::<f64>());
            for (o, &x) in value.row_mut(i).iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        let needs = self.wants(a);
        self.push(value, Op::LogSoftmaxRows { a }, needs)
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`; smooth, so finite differences
    /// verify it cleanly.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = va.clone();
        for x in &mut value.data {
            *x = 0.5 * *x * (1.0 + libm::erf(*x / core::f64::consts::SQRT_2));
        }
        let needs = self.wants(a);
        self.push(value, Op::Gelu { a }, needs)
    }

    /// Elementwise multiply by a constant mask (dropout, fixed scaling).
    pub fn mul_const(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        let va = self.value(a);
        assert_eq!(mask.len(), va.data.len());
        let mut value = va.clone();
        for (x, m) in value.data.iter_mut().zip(&mask) {
            *x *= m;
        }
        let needs = self.wants(a);
        self.push(value, Op::MulConst { a, mask }, needs)
    }

    /// Adds a constant matrix (attention masks).
    pub fn add_const(&mut self, a: NodeId, konst: &[f64]) -> NodeId {
        let va = self.value(a);
        assert_eq!(konst.len(), va.data.len());
        let mut value = va.clone();
        for (x, k) in value.data.iter_mut().zip(konst) {
            *x += k;
        }
        let needs = self.wants(a);
        self.push(value, Op::AddConst { a }, needs)
    }

    /// Weighted negative log-likelihood sum: `Σ_i w_i · (−logp[i, t_i])`,
    /// a 1×1 node.
    pub fn nll_sum(&mut self, logp: NodeId, targets: Vec<usize>, weights: Vec<f64>) -> NodeId {
        let v = self.value(logp);
        assert_eq!(targets.len(), v.rows);
        assert_eq!(weights.len(), v.rows);
        let mut total = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            total -= w * v.at(i, t);
        }
        let needs = self.wants(logp);
        self.push(
            Mat::scalar(total),
            Op::NllSum {
                logp,
                targets,
                weights,
            },
            needs,
        )
    }

    /// CRF negative log-likelihood as a differentiable scalar node.
    pub fn crf_nll(
        &mut self,
        em: NodeId,
        trans: NodeId,
        start: NodeId,
        end: NodeId,
        tags: Vec<usize>,
    ) -> Result<NodeId, ModelError> {
        let nll = super::crf::crf_nll(
            self.value(em),
            self.value(trans),
            self.value(start),
            self.value(end),
            &tags,
        )?;
        let needs = self.wants(em) || self.wants(trans) || self.wants(start) || self.wants(end);
        Ok(self.push(
            Mat::scalar(nll),
            Op::CrfNll {
                em,
                trans,
                start,
                end,
                tags,
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols);
        let mut value = Mat::zeros(va.rows, len);
        for i in 0..va.rows {
            value
                .row_mut(i)
                .copy_from_slice(&va.row(i)[start..start + len]);
        }
        let needs = self.wants(a);
        self.push(value, Op::SliceCols { a, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.rows, rows);
            for i in 0..rows {
                value.row_mut(i)[off..off + vp.cols].copy_from_slice(vp.row(i));
            }
            off += vp.cols;
        }
        let needs = parts.iter().any(|p| self.wants(*p));
        self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar loss node. Fails on a second call without
    /// rebuilding the graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), ModelError> {
        if self.consumed {
            return Err(ModelError::GraphReuse);
        }
        self.consumed = true;
        {
            let v = self.value(loss);
            if v.rows != 1 || v.cols != 1 {
                return Err(ModelError::ShapeMismatch("backward needs a scalar loss"));
            }
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Mat::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        // Ensures a zeroed gradient slot, or None when the node opted out.
        fn slot<'g>(
            nodes: &[Node],
            grads: &'g mut [Option<Mat>],
            nid: NodeId,
        ) -> Option<&'g mut Mat> {
            if !nodes[nid.0].needs_grad {
                return None;
            }
            let shape = (nodes[nid.0].value.rows, nodes[nid.0].value.cols);
            Some(grads[nid.0].get_or_insert_with(|| Mat::zeros(shape.0, shape.1)))
        }
        let nodes = &self.nodes;
        let val = |nid: NodeId| -> &Mat { &nodes[nid.0].value };
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    match (ta, tb) {
                        (false, false) => matmul_acc(ga, g, false, vb, true),
                        (false, true) => matmul_acc(ga, g, false, vb, false),
                        (true, false) => matmul_acc(ga, vb, false, g, true),
                        (true, true) => matmul_acc(ga, vb, true, g, true),
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    match (ta, tb) {
                        (false, false) => matmul_acc(gb, va, true, g, false),
                        (false, true) => matmul_acc(gb, g, true, va, false),
                        (true, false) => matmul_acc(gb, va, false, g, false),
                        (true, true) => matmul_acc(gb, g, true, va, true),
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    gb.add_assign(g);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = slot(nodes, grads, *row) {
                    for i in 0..g.rows {
                        for (o, x) in gr.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (o, x) in ga.data.iter_mut().zip(&g.data) {
                        *o += c * x;
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = slot(nodes, grads, *table) {
                    for (i, &tid) in ids.iter().enumerate() {
                        for (o, x) in gt.row_mut(tid as usize).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::SelectRows { a, rows } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for (i, &r) in rows.iter().enumerate() {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::MeanRows { a, rows } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                            *o += inv * x;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let vx = val(*x);
                let vg = val(*gain);
                let d = vx.cols as f64;
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for i in 0..g.rows {
                        for (o, gv) in gb.row_mut(0).iter_mut().zip(g.row(i)) {
                            *o += gv;
                        }
                    }
                }
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for i in 0..g.rows {
                        let row = vx.row(i);
                        for (j, (o, gv)) in gg.row_mut(0).iter_mut().zip(g.row(i)).enumerate() {
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            *o += gv * xhat;
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    for i in 0..g.rows {
                        let row = vx.row(i);
                        let grow = g.row(i);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..vx.cols {
                            let dxhat = grow[j] * vg.data[j];
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            m1 += dxhat;
                            m2 += dxhat * xhat;
                        }
                        m1 /= d;
                        m2 /= d;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            let dxhat = grow[j] * vg.data[j];
                            let xhat = (row[j] - mean[i]) * rstd[i];
                            *o += rstd[i] * (dxhat - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let y = &nodes[id].value;
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for (o, (yv, gv)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o += yv * (gv - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let y = &nodes[id].value;
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s: f64 = gr.iter().sum();
                        for (o, (yv, gv)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                            *o += gv - libm::exp(*yv) * s;
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    let vx = val(*a);
                    for ((o, &x), &gv) in ga.data.iter_mut().zip(&vx.data).zip(&g.data) {
                        let cdf = 0.5 * (1.0 + libm::erf(x / core::f64::consts::SQRT_2));
                        let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
                        *o += gv * (cdf + x * pdf);
                    }
                }
            }
            Op::MulConst { a, mask } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((o, &m), &gv) in ga.data.iter_mut().zip(mask).zip(&g.data) {
                        *o += m * gv;
                    }
                }
            }
            Op::AddConst { a } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    ga.add_assign(g);
                }
            }
            Op::NllSum {
                logp,
                targets,
                weights,
            } => {
                if let Some(gl) = slot(nodes, grads, *logp) {
                    let u = g.data[0];
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let v = gl.at(i, t) - u * w;
                        gl.set(i, t, v);
                    }
                }
            }
            Op::CrfNll {
                em,
                trans,
                start,
                end,
                tags,
            } => {
                let u = g.data[0];
                let (d_em, d_trans, d_start, d_end) =
                    crf_nll_backward(val(*em), val(*trans), val(*start), val(*end), tags, u);
                if let Some(ge) = slot(nodes, grads, *em) {
                    ge.add_assign(&d_em);
                }
                if let Some(gt) = slot(nodes, grads, *trans) {
                    gt.add_assign(&d_trans);
                }
                if let Some(gs) = slot(nodes, grads, *start) {
                    gs.add_assign(&d_start);
                }
                if let Some(gn) = slot(nodes, grads, *end) {
                    gn.add_assign(&d_end);
                }
            }
            Op::SliceCols { a, start } => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    for i in 0..g.rows {
                        let dst = &mut ga.row_mut(i)[*start..*start + g.cols];
                        for (o, x) in dst.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for p in parts {
                    let cols = nodes[p.0].value.cols;
                    if let Some(gp) = slot(nodes, grads, *p) {
                        for i in 0..g.rows {
                            for (o, x) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + cols]) {
                                *o += x;
                            }
                        }
                    }
                    off += cols;
                }
            }
        }
    }

    /// Adds `scale ×` this tape's parameter gradients into `out`. Frozen
    /// parameters contribute nothing.
    pub fn accumulate_param_grads(&self, store: &ParamStore, out: &mut Gradients, scale: f64) {
        debug_assert!(self.consumed, "accumulate before backward");
        for &(entry, node) in &self.param_leaves {
            if let Some(g) = self.grad(node) {
                out.add_scaled_entry(entry, g, scale);
            }
        }
        let _ = store;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a = Mat::from_vec(2, 3, vec![0.5, -1.0, 2.0, 0.1, 0.7, -0.3]);
        let b = Mat::from_vec(3, 2, vec![1.0, 2.0, -0.5, 0.3, 0.9, -1.1]);
        for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
            let (am, bm) = match (ta, tb) {
                (false, false) => (a.clone(), b.clone()),
                (false, true) => (a.clone(), transpose(&b)),
                (true, false) => (transpose(&a), b.clone()),
                (true, true) => (transpose(&a), transpose(&b)),
            };
            let loss_of = |am: &Mat, bm: &Mat| -> f64 {
                let c = matmul(am, ta, bm, tb);
                c.data.iter().enumerate().map(|(i, x)| (i as f64 + 1.0) * x).sum()
            };
            let mut tape = Tape::new();
            let na = tape.push(am.clone(), Op::Leaf, true);
            let nb = tape.push(bm.clone(), Op::Leaf, true);
            let c = tape.matmul(na, nb, ta, tb);
            // Weighted sum via nll-style trick: use mul_const then sum by
            // matmul with ones; simpler to test through a weighted scalar.
            let weights: Vec<f64> = (0..tape.value(c).data.len())
                .map(|i| i as f64 + 1.0)
                .collect();
            let weighted = tape.mul_const(c, weights);
            let rows = tape.value(weighted).rows;
            let cols = tape.value(weighted).cols;
            let ones_r = tape.constant(Mat::from_vec(1, rows, vec![1.0; rows]));
            let ones_c = tape.constant(Mat::from_vec(cols, 1, vec![1.0; cols]));
            let summed = tape.matmul(ones_r, weighted, false, false);
            let total = tape.matmul(summed, ones_c, false, false);
            tape.backward(total).unwrap();

            let eps = 1e-6;
            for (mat, node, name) in [(&am, na, "a"), (&bm, nb, "b")] {
                let g = tape.grad(node).unwrap();
                for idx in 0..mat.data.len() {
                    let mut p = mat.clone();
                    p.data[idx] += eps;
                    let mut m = mat.clone();
                    m.data[idx] -= eps;
                    let (lp, lm) = if name == "a" {
                        (loss_of(&p, &bm), loss_of(&m, &bm))
                    } else {
                        (loss_of(&am, &p), loss_of(&am, &m))
                    };
                    let num = (lp - lm) / (2.0 * eps);
                    assert!(
                        (g.data[idx] - num).abs() < 1e-6,
                        "ta={ta} tb={tb} {name}[{idx}]: {} vs {num}",
                        g.data[idx]
                    );
                }
            }
        }
    }

    fn transpose(m: &Mat) -> Mat {
        let mut t = Mat::zeros(m.cols, m.rows);
        for i in 0..m.rows {
            for j in 0..m.cols {
                t.set(j, i, m.at(i, j));
            }
        }
        t
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut tape = Tape::new();
        let a = tape.push(Mat::scalar(2.0), Op::Leaf, true);
        let b = tape.scale(a, 3.0);
        tape.backward(b).unwrap();
        assert!(matches!(tape.backward(b), Err(ModelError::GraphReuse)));
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut tape = Tape::new();
        let a = tape.constant(Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 3.0, 3.0, 3.0]));
        let ls = tape.log_softmax_rows(a);
        for i in 0..2 {
            let s: f64 = tape.value(ls).row(i).iter().map(|&x| libm::exp(x)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let frozen = tape.push(Mat::scalar(2.0), Op::Leaf, false);
        let live = tape.push(Mat::scalar(4.0), Op::Leaf, true);
        let prod = tape.matmul(frozen, live, false, false);
        tape.backward(prod).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(live).unwrap().data[0], 2.0);
    }
}
