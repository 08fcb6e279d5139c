//! Reverse-mode differentiation over a linear tape of fused tensor ops.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards visits every
//! node after all of its consumers. Parameter leaves remember their index in
//! [`Params`](super::params::Params) and [`Tape::backward`] folds their gradients into
//! a matching gradient buffer.

use super::tensor::{self, axpy, dot, Tensor};

pub type NodeId = usize;

enum Op {
    Param(usize),
    Const,
    Embed { table: NodeId, ids: Vec<usize>, scale: f64 },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    LayerNorm { x: NodeId, g: NodeId, b: NodeId, xhat: Tensor, rstd: Vec<f64> },
    Attention { q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, probs: Vec<Tensor> },
    CumAvg(NodeId),
    ConcatCols(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    LogSoftmax(NodeId),
    SmoothedNll { logp: NodeId, targets: Vec<usize>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Tensor],
    param_nodes: Vec<Option<NodeId>>,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Tensor]) -> Self {
        Self { params, param_nodes: vec![None; params.len()], nodes: Vec::with_capacity(256) }
    }

    #[inline]
    fn val(&self, id: NodeId) -> &Tensor {
        match self.nodes[id].op {
            Op::Param(i) => &self.params[i],
            _ => &self.nodes[id].value,
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.val(id)
    }

    /// Leaf node for parameter `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        let id = self.push(Tensor::zeros(0, 0), Op::Param(index));
        self.param_nodes[index] = Some(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Rows of `table` selected by `ids`, times `scale`, plus the constant `offset`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize], scale: f64, offset: &Tensor) -> NodeId {
        let t = self.val(table);
        let mut out = offset.clone();
        for (r, &id) in ids.iter().enumerate() {
            axpy(scale, t.row(id), out.row_mut(r));
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec(), scale })
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let out = tensor::linear(self.val(x), self.val(w), Some(self.val(b)));
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.val(a).clone();
        out.add_assign(self.val(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.val(a).clone();
        for (o, v) in out.data.iter_mut().zip(&self.val(b).data) {
            *o *= v;
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.val(a).clone();
        out.data.iter_mut().for_each(|v| *v = tensor::gelu(*v));
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.val(a).clone();
        out.data.iter_mut().for_each(|v| *v = tensor::sigmoid(*v));
        self.push(out, Op::Sigmoid(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, g: NodeId, b: NodeId) -> NodeId {
        let xv = self.val(x);
        let (gv, bv) = (self.val(g), self.val(b));
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut xhat = Tensor::zeros(xv.rows, xv.cols);
        let mut rstds = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let (mean, rstd) = tensor::layer_norm_row(xv.row(r), &gv.data, &bv.data, out.row_mut(r));
            for (h, v) in xhat.row_mut(r).iter_mut().zip(xv.row(r)) {
                *h = (v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.push(out, Op::LayerNorm { x, g, b, xhat, rstd: rstds })
    }

    /// Multi-head scaled dot-product attention. With `causal`, query row `i` only sees
    /// key rows `0..=i`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let (tq, tk, d) = (qv.rows, kv.rows, qv.cols);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(tq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let lo = h * dh;
            let mut p = Tensor::zeros(tq, tk);
            for i in 0..tq {
                let visible = if causal { (i + 1).min(tk) } else { tk };
                let qi = &qv.row(i)[lo..lo + dh];
                let prow = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..visible {
                    let s = dot(qi, &kv.row(j)[lo..lo + dh]) * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for pj in prow.iter_mut().take(visible) {
                    *pj = (*pj - max).exp();
                    sum += *pj;
                }
                for pj in prow.iter_mut().take(visible) {
                    *pj /= sum;
                }
                let orow = &mut out.data[i * d + lo..i * d + lo + dh];
                for j in 0..visible {
                    axpy(prow[j], &vv.row(j)[lo..lo + dh], orow);
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, causal, probs })
    }

    /// Row `j` becomes the mean of input rows `0..=j`.
    pub fn cum_avg(&mut self, x: NodeId) -> NodeId {
        let xv = self.val(x);
        let mut out = Tensor::zeros(xv.rows, xv.cols);
        let mut sum = vec![0.0; xv.cols];
        for r in 0..xv.rows {
            for (s, v) in sum.iter_mut().zip(xv.row(r)) {
                *s += v;
            }
            let inv = 1.0 / (r + 1) as f64;
            for (o, s) in out.row_mut(r).iter_mut().zip(&sum) {
                *o = s * inv;
            }
        }
        self.push(out, Op::CumAvg(x))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.val(a), self.val(b));
        let mut out = Tensor::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, width: usize) -> NodeId {
        let xv = self.val(x);
        let mut out = Tensor::zeros(xv.rows, width);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let mut out = self.val(x).clone();
        for r in 0..out.rows {
            tensor::log_softmax_row(out.row_mut(r));
        }
        self.push(out, Op::LogSoftmax(x))
    }

    /// Summed label-smoothed negative log-likelihood: `(1 - eps) * nll + eps * uniform`.
    pub fn smoothed_nll(&mut self, logp: NodeId, targets: &[usize], eps: f64) -> NodeId {
        let lp = self.val(logp);
        let v = lp.cols as f64;
        let mut loss = 0.0;
        for (r, &y) in targets.iter().enumerate() {
            let row = lp.row(r);
            let mean_nll = -row.iter().sum::<f64>() / v;
            loss += (1.0 - eps) * (-row[y]) + eps * mean_nll;
        }
        self.push(Tensor::from_vec(1, 1, vec![loss]), Op::SmoothedNll { logp, targets: targets.to_vec(), eps })
    }

    /// Backpropagates from the scalar node `root`, adding `seed * dL/dparam` into
    /// `param_grads`.
    pub fn backward(&self, root: NodeId, seed: f64, param_grads: &mut [Tensor]) {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::filled(1, 1, seed));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Param(index) => param_grads[*index].add_assign(&g),
                Op::Const => {}
                Op::Embed { table, ids, scale } => {
                    let tv = self.val(*table);
                    let acc = grad_slot(&mut grads, *table, tv);
                    for (r, &tok) in ids.iter().enumerate() {
                        axpy(*scale, g.row(r), acc.row_mut(tok));
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.val(*x);
                    let wv = self.val(*w);
                    {
                        let gb = grad_slot(&mut grads, *b, self.val(*b));
                        for r in 0..g.rows {
                            for (a, v) in gb.data.iter_mut().zip(g.row(r)) {
                                *a += v;
                            }
                        }
                    }
                    {
                        let gw = grad_slot(&mut grads, *w, wv);
                        for r in 0..g.rows {
                            let grow = g.row(r);
                            for (p, &xp) in xv.row(r).iter().enumerate() {
                                if xp != 0.0 {
                                    axpy(xp, grow, gw.row_mut(p));
                                }
                            }
                        }
                    }
                    if needs_grad(&self.nodes[*x].op) {
                        let gx = grad_slot(&mut grads, *x, xv);
                        for r in 0..g.rows {
                            let grow = g.row(r);
                            let gxrow = gx.row_mut(r);
                            for (p, gxp) in gxrow.iter_mut().enumerate() {
                                *gxp += dot(grow, wv.row(p));
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for n in [*a, *b] {
                        if needs_grad(&self.nodes[n].op) {
                            grad_slot(&mut grads, n, self.val(n)).add_assign(&g);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a), self.val(*b));
                    if needs_grad(&self.nodes[*a].op) {
                        let ga = grad_slot(&mut grads, *a, av);
                        for ((o, gv), bx) in ga.data.iter_mut().zip(&g.data).zip(&bv.data) {
                            *o += gv * bx;
                        }
                    }
                    if needs_grad(&self.nodes[*b].op) {
                        let gb = grad_slot(&mut grads, *b, bv);
                        for ((o, gv), ax) in gb.data.iter_mut().zip(&g.data).zip(&av.data) {
                            *o += gv * ax;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = self.val(*a);
                    let ga = grad_slot(&mut grads, *a, av);
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += gv * tensor::gelu_grad(*x);
                    }
                }
                Op::Sigmoid(a) => {
                    let av = self.val(*a);
                    let ga = grad_slot(&mut grads, *a, av);
                    for ((o, gv), y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        *o += gv * y * (1.0 - y);
                    }
                }
                Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                    let gv = self.val(*gain);
                    {
                        let gg = grad_slot(&mut grads, *gain, gv);
                        for r in 0..g.rows {
                            for ((o, dy), h) in gg.data.iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                                *o += dy * h;
                            }
                        }
                    }
                    {
                        let gb = grad_slot(&mut grads, *b, self.val(*b));
                        for r in 0..g.rows {
                            for (o, dy) in gb.data.iter_mut().zip(g.row(r)) {
                                *o += dy;
                            }
                        }
                    }
                    let xv = self.val(*x);
                    let gx = grad_slot(&mut grads, *x, xv);
                    let n = xv.cols as f64;
                    let mut dxhat = vec![0.0; xv.cols];
                    for r in 0..g.rows {
                        for ((d, dy), gj) in dxhat.iter_mut().zip(g.row(r)).zip(&gv.data) {
                            *d = dy * gj;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dh = dot(&dxhat, xhat.row(r)) / n;
                        for ((o, d), h) in gx.row_mut(r).iter_mut().zip(&dxhat).zip(xhat.row(r)) {
                            *o += rstd[r] * (d - mean_d - h * mean_dh);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, causal, probs } => {
                    let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                    let (tq, d) = (qv.rows, qv.cols);
                    let tk = kv.rows;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(tq, d);
                    let mut gk = Tensor::zeros(tk, d);
                    let mut gvv = Tensor::zeros(tk, d);
                    let mut dp = vec![0.0; tk];
                    for (h, p) in probs.iter().enumerate() {
                        let lo = h * dh;
                        for i in 0..tq {
                            let visible = if *causal { (i + 1).min(tk) } else { tk };
                            let go = &g.row(i)[lo..lo + dh];
                            let prow = p.row(i);
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                axpy(prow[j], go, &mut gvv.row_mut(j)[lo..lo + dh]);
                                dp[j] = dot(go, &vv.row(j)[lo..lo + dh]);
                                weighted += prow[j] * dp[j];
                            }
                            let qi = &qv.row(i)[lo..lo + dh];
                            for j in 0..visible {
                                let ds = prow[j] * (dp[j] - weighted) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                axpy(ds, &kv.row(j)[lo..lo + dh], &mut gq.row_mut(i)[lo..lo + dh]);
                                axpy(ds, qi, &mut gk.row_mut(j)[lo..lo + dh]);
                            }
                        }
                    }
                    grad_slot(&mut grads, *q, qv).add_assign(&gq);
                    grad_slot(&mut grads, *k, kv).add_assign(&gk);
                    grad_slot(&mut grads, *v, vv).add_assign(&gvv);
                }
                Op::CumAvg(a) => {
                    let av = self.val(*a);
                    let ga = grad_slot(&mut grads, *a, av);
                    // dx_k = sum_{j >= k} dy_j / (j + 1)
                    let mut suffix = vec![0.0; av.cols];
                    for r in (0..av.rows).rev() {
                        axpy(1.0 / (r + 1) as f64, g.row(r), &mut suffix);
                        for (o, s) in ga.row_mut(r).iter_mut().zip(&suffix) {
                            *o += s;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.val(*a).cols;
                    {
                        let ga = grad_slot(&mut grads, *a, self.val(*a));
                        for r in 0..g.rows {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(&g.row(r)[..ac]) {
                                *o += v;
                            }
                        }
                    }
                    let gb = grad_slot(&mut grads, *b, self.val(*b));
                    for r in 0..g.rows {
                        for (o, v) in gb.row_mut(r).iter_mut().zip(&g.row(r)[ac..]) {
                            *o += v;
                        }
                    }
                }
                Op::SliceCols { x, start } => {
                    let gx = grad_slot(&mut grads, *x, self.val(*x));
                    for r in 0..g.rows {
                        for (o, v) in gx.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::LogSoftmax(a) => {
                    let ga = grad_slot(&mut grads, *a, self.val(*a));
                    for r in 0..g.rows {
                        let gsum: f64 = g.row(r).iter().sum();
                        for ((o, gv), lp) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(node.value.row(r)) {
                            *o += gv - lp.exp() * gsum;
                        }
                    }
                }
                Op::SmoothedNll { logp, targets, eps } => {
                    let seed = g.data[0];
                    let lpv = self.val(*logp);
                    let uniform = -eps / lpv.cols as f64 * seed;
                    let gl = grad_slot(&mut grads, *logp, lpv);
                    for (r, &y) in targets.iter().enumerate() {
                        let row = gl.row_mut(r);
                        row.iter_mut().for_each(|o| *o += uniform);
                        row[y] -= (1.0 - eps) * seed;
                    }
                }
            }
        }
    }
}

fn needs_grad(op: &Op) -> bool {
    !matches!(op, Op::Const)
}

fn grad_slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'a mut Tensor {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.rows, like.cols))
}
