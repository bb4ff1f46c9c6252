//! Matrix-level reverse-mode autodiff, just enough for the transformer.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeId(usize);

/// Shape and mask of a batched multi-head attention block. Rows of the score matrix are
/// ordered `(b * heads + h) * tq + i`; columns index keys.
#[derive(Debug, Clone)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub heads: usize,
    pub dk: usize,
    pub causal: bool,
    pub key_valid: Vec<bool>,
}

impl AttnGeom {
    #[inline]
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.tk + j] && (!self.causal || j <= i)
    }
}

enum Op<F> {
    Leaf,
    Param(usize),
    Gather { table: NodeId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, F),
    Relu(NodeId),
    Dropout { x: NodeId, mask: Array2<F> },
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<F>, inv_std: Vec<F> },
    AttnScores { q: NodeId, k: NodeId, geom: Rc<AttnGeom> },
    AttnApply { scores: NodeId, v: NodeId, probs: Array2<F>, drop: Option<Array2<F>>, geom: Rc<AttnGeom> },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub(crate) struct Tape<F> {
    nodes: Vec<Node<F>>,
    param_nodes: Vec<Option<NodeId>>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Tape<F> {
    pub fn new(num_params: usize) -> Self {
        Self {
            nodes: Vec::new(),
            param_nodes: vec![None; num_params],
        }
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Array2<F> {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Array2<F>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Parameter `idx`, recorded once per tape.
    pub fn param(&mut self, idx: usize, value: &Array2<F>) -> NodeId {
        if let Some(id) = self.param_nodes[idx] {
            return id;
        }
        let id = self.push(value.clone(), Op::Param(idx));
        self.param_nodes[idx] = Some(id);
        id
    }

    pub fn gather(&mut self, table: NodeId, ids: Vec<usize>) -> NodeId {
        let t = self.value(table);
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    /// `mask` holds `0` or `1 / (1 - p)` per element.
    pub fn dropout(&mut self, x: NodeId, mask: Array2<F>) -> NodeId {
        let v = self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = F::of(xv.ncols() as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    /// Pre-softmax scores `Q_h K_h^T / sqrt(d_k)` for every batch element and head.
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId, geom: Rc<AttnGeom>) -> NodeId {
        let (qv, kv) = (self.value(q), self.value(k));
        let g = &*geom;
        let scale = F::of(1.0 / (g.dk as f64).sqrt());
        let mut out = Array2::zeros((g.batch * g.heads * g.tq, g.tk));
        for b in 0..g.batch {
            for h in 0..g.heads {
                let qs = qv.slice(s![b * g.tq..(b + 1) * g.tq, h * g.dk..(h + 1) * g.dk]);
                let ks = kv.slice(s![b * g.tk..(b + 1) * g.tk, h * g.dk..(h + 1) * g.dk]);
                let r0 = (b * g.heads + h) * g.tq;
                let mut block = out.slice_mut(s![r0..r0 + g.tq, ..]);
                ndarray::linalg::general_mat_mul(scale, &qs, &ks.t(), F::zero(), &mut block);
            }
        }
        self.push(out, Op::AttnScores { q, k, geom })
    }

    /// Masked softmax over keys followed by the value average; masked keys get weight 0.
    pub fn attn_apply(&mut self, scores: NodeId, v: NodeId, geom: Rc<AttnGeom>, drop: Option<Array2<F>>) -> NodeId {
        let g = &*geom;
        let sv = self.value(scores);
        let mut probs = Array2::zeros(sv.raw_dim());
        for b in 0..g.batch {
            for h in 0..g.heads {
                for i in 0..g.tq {
                    let r = (b * g.heads + h) * g.tq + i;
                    let row = sv.row(r);
                    let mut max = F::neg_infinity();
                    for j in 0..g.tk {
                        if g.allowed(b, i, j) && row[j] > max {
                            max = row[j];
                        }
                    }
                    if max == F::neg_infinity() {
                        continue;
                    }
                    let mut sum = F::zero();
                    let mut prow = probs.row_mut(r);
                    for j in 0..g.tk {
                        if g.allowed(b, i, j) {
                            let e = (row[j] - max).exp();
                            prow[j] = e;
                            sum = sum + e;
                        }
                    }
                    prow.mapv_inplace(|p| p / sum);
                }
            }
        }
        let weights = match &drop {
            Some(m) => &probs * m,
            None => probs.clone(),
        };
        let vv = self.value(v);
        let mut out = Array2::zeros((g.batch * g.tq, g.heads * g.dk));
        for b in 0..g.batch {
            for h in 0..g.heads {
                let r0 = (b * g.heads + h) * g.tq;
                let p = weights.slice(s![r0..r0 + g.tq, ..]);
                let vs = vv.slice(s![b * g.tk..(b + 1) * g.tk, h * g.dk..(h + 1) * g.dk]);
                let mut block = out.slice_mut(s![b * g.tq..(b + 1) * g.tq, h * g.dk..(h + 1) * g.dk]);
                ndarray::linalg::general_mat_mul(F::one(), &p, &vs, F::zero(), &mut block);
            }
        }
        self.push(out, Op::AttnApply { scores, v, probs, drop, geom })
    }

    /// Propagates `seeds` (gradients of a scalar w.r.t. the given nodes) back to every
    /// recorded parameter. Returned tensors follow parameter order; unused ones are zero.
    pub fn backward(&self, seeds: Vec<(NodeId, Array2<F>)>, shapes: &[(usize, usize)]) -> Vec<Array2<F>> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads, id, g);
        }
        let mut param_grads: Vec<Array2<F>> = shapes.iter().map(|&s| Array2::zeros(s)).collect();

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => param_grads[*p] += &g,
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Array2::zeros(tv.raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g * *s),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|gv, &out| {
                        if out <= F::zero() {
                            *gv = F::zero();
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Dropout { x, mask } => accumulate(&mut grads, *x, g * mask),
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let gv = self.value(*gain);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let n = F::of(xhat.ncols() as f64);
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut out) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let m1 = dh.sum() / n;
                        let m2 = dh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for c in 0..out.len() {
                            out[c] = inv_std[r] * (dh[c] - m1 - xh[c] * m2);
                        }
                    }
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *gain, gg);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AttnScores { q, k, geom } => {
                    let g_ = &**geom;
                    let scale = F::of(1.0 / (g_.dk as f64).sqrt());
                    let (qv, kv) = (self.value(*q), self.value(*k));
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    for b in 0..g_.batch {
                        for h in 0..g_.heads {
                            let r0 = (b * g_.heads + h) * g_.tq;
                            let gs = g.slice(s![r0..r0 + g_.tq, ..]);
                            let qcols = s![b * g_.tq..(b + 1) * g_.tq, h * g_.dk..(h + 1) * g_.dk];
                            let kcols = s![b * g_.tk..(b + 1) * g_.tk, h * g_.dk..(h + 1) * g_.dk];
                            let ks = kv.slice(kcols);
                            let qs = qv.slice(qcols);
                            let mut gqs = gq.slice_mut(qcols);
                            ndarray::linalg::general_mat_mul(scale, &gs, &ks, F::one(), &mut gqs);
                            let mut gks = gk.slice_mut(kcols);
                            ndarray::linalg::general_mat_mul(scale, &gs.t(), &qs, F::one(), &mut gks);
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                }
                Op::AttnApply { scores, v, probs, drop, geom } => {
                    let g_ = &**geom;
                    let vv = self.value(*v);
                    let weights = match drop {
                        Some(m) => probs * m,
                        None => probs.clone(),
                    };
                    let mut gv = Array2::zeros(vv.raw_dim());
                    let mut gw = Array2::zeros(probs.raw_dim());
                    for b in 0..g_.batch {
                        for h in 0..g_.heads {
                            let r0 = (b * g_.heads + h) * g_.tq;
                            let out_cols = s![b * g_.tq..(b + 1) * g_.tq, h * g_.dk..(h + 1) * g_.dk];
                            let v_cols = s![b * g_.tk..(b + 1) * g_.tk, h * g_.dk..(h + 1) * g_.dk];
                            let go = g.slice(out_cols);
                            let vs = vv.slice(v_cols);
                            let w = weights.slice(s![r0..r0 + g_.tq, ..]);
                            let mut gws = gw.slice_mut(s![r0..r0 + g_.tq, ..]);
                            ndarray::linalg::general_mat_mul(F::one(), &go, &vs.t(), F::zero(), &mut gws);
                            let mut gvs = gv.slice_mut(v_cols);
                            ndarray::linalg::general_mat_mul(F::one(), &w.t(), &go, F::one(), &mut gvs);
                        }
                    }
                    if let Some(m) = drop {
                        gw *= m;
                    }
                    // softmax backward: dS = P * (dP - <dP, P>)
                    let mut gs = gw;
                    Zip::from(gs.rows_mut()).and(probs.rows()).for_each(|mut gr, pr| {
                        let dot = gr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<F>();
                        Zip::from(&mut gr).and(&pr).for_each(|x, &p| *x = p * (*x - dot));
                    });
                    accumulate(&mut grads, *scores, gs);
                    accumulate(&mut grads, *v, gv);
                }
            }
        }
        param_grads
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], id: NodeId, g: Array2<F>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}
