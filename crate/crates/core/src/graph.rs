//! Reverse-mode automatic differentiation over 2-D f64 matrices.
//!
//! A `Graph` records every operation of one forward pass as a node holding its
//! value. `backward` walks the nodes in reverse and accumulates gradients into
//! a `Grads` buffer for the parameters that were marked trainable. Nodes whose
//! inputs are all constant or frozen skip gradient work entirely.

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{dot, logsumexp, matmul_acc, matmul_nt_acc, matmul_tn_acc, softmax_in_place, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every position attends to every position.
    Full,
    /// Position i attends to positions j ≤ i.
    Causal,
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Mat, rstd: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Mat> },
    Gather { table: Var, ids: Vec<usize> },
    Concat(Vec<Var>),
    Rows { x: Var, start: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Mat, count: usize },
    SqErr { pred: Var, target: Mat },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    trainable: &'p [bool],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    /// `trainable[i]` says whether parameter i receives gradients.
    pub fn new(params: &'p ParamStore, trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Graph { params, trainable, param_vars: vec![None; params.len()], nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.value(id).clone(), Op::Param(id), self.trainable[id.0]);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).add(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a 1×m row to every row of an n×m matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows, 1);
        assert_eq!(rv.cols, av.cols);
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(&[a, row]);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a, b]);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(&[a]);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data.iter().map(|&x| x / (1.0 + (-x).exp())).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// x·W + b.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let y = self.matmul(x, wv);
        self.add_row(y, bv)
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        let g = self.param(gain);
        let b = self.param(bias);
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut rstd = vec![0.0; n];
        let mut out = Mat::zeros(n, d);
        let (gv, bv) = (&self.nodes[g.0].value.data, &self.nodes[b.0].value.data);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * gv[c] + bv[c];
            }
        }
        let ng = self.ng(&[x, g, b]);
        self.push(out, Op::LayerNorm { x, gain: g, bias: b, xhat, rstd }, ng)
    }

    /// Multi-head scaled dot-product attention over already-projected q, k, v.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: AttnMask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = qv.shape();
        assert_eq!(kv.shape(), (n, d));
        assert_eq!(vv.shape(), (n, d));
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros(n, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &qv.data[i * d + off..i * d + off + dh];
                let limit = match mask {
                    AttnMask::Full => n,
                    AttnMask::Causal => i + 1,
                };
                let prow = &mut p.data[i * n..(i + 1) * n];
                for j in 0..limit {
                    prow[j] = dot(qi, &kv.data[j * d + off..j * d + off + dh]) * scale;
                }
                softmax_in_place(&mut prow[..limit]);
                let orow = &mut out.data[i * d + off..i * d + off + dh];
                for j in 0..limit {
                    let pij = prow[j];
                    let vj = &vv.data[j * d + off..j * d + off + dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pij * x;
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// Rows of an embedding table.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Var {
        let t = self.param(table);
        let tv = self.value(t);
        let d = tv.cols;
        let mut out = Mat::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "gather id {id} out of range {}", tv.rows);
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(&[t]);
        self.push(out, Op::Gather { table: t, ids: ids.to_vec() }, ng)
    }

    /// Vertical concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|p| self.value(*p)).collect();
        let out = Mat::vstack(&mats);
        let ng = self.ng(parts);
        self.push(out, Op::Concat(parts.to_vec()), ng)
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).rows_range(start, len);
        let ng = self.ng(&[x]);
        self.push(out, Op::Rows { x, start }, ng)
    }

    /// Rows of `x` picked by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::SelectRows { x, idx: idx.to_vec() }, ng)
    }

    /// Mean over rows with `Some(target)` of −log softmax(row)[target]. Rows
    /// with `None` contribute nothing. Returns a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len());
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "cross_entropy with no supervised rows");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            softmax_in_place(probs.row_mut(r));
            if let Some(t) = *t {
                assert!(t < lv.cols, "target {t} out of range {}", lv.cols);
                let row = lv.row(r);
                loss += logsumexp(row) - row[t];
            }
        }
        let loss = loss / count as f64;
        let ng = self.ng(&[logits]);
        self.push(
            Mat::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            ng,
        )
    }

    /// Mean over rows of the squared Euclidean distance between `pred` rows and
    /// `target` rows. Returns a 1×1 node.
    pub fn sq_err(&mut self, pred: Var, target: &Mat) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape());
        let loss = pv.sub(target).sum_sq() / pv.rows as f64;
        let ng = self.ng(&[pred]);
        self.push(Mat::scalar(loss), Op::SqErr { pred, target: target.clone() }, ng)
    }

    /// Σ wᵢ·xᵢ over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let first = self.value(terms[0].0);
        let mut out = Mat::zeros(first.rows, first.cols);
        for &(v, w) in terms {
            out.add_scaled(self.value(v), w);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let ng = self.ng(&vars);
        self.push(out, Op::WeightedSum(terms.to_vec()), ng)
    }

    /// Backpropagates `seed · d(root)` into parameter gradients.
    pub fn backward_into(&self, root: Var, seed: f64, grads: &mut Grads) {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Mat::scalar(seed));

        fn acc(slot: &mut Option<Mat>, shape: (usize, usize)) -> &mut Mat {
            slot.get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = g[idx].take() else { continue };
            let need = |v: Var| self.nodes[v.0].needs_grad;
            let shape = |v: Var| self.nodes[v.0].value.shape();
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.accumulate(*id, &dy, 1.0),
                Op::MatMul(a, b) => {
                    if need(*a) {
                        let s = shape(*a);
                        matmul_nt_acc(&dy, self.value(*b), acc(&mut g[a.0], s));
                    }
                    if need(*b) {
                        let s = shape(*b);
                        matmul_tn_acc(self.value(*a), &dy, acc(&mut g[b.0], s));
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if need(v) {
                            let s = shape(v);
                            acc(&mut g[v.0], s).add_assign(&dy);
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if need(*a) {
                        let s = shape(*a);
                        acc(&mut g[a.0], s).add_assign(&dy);
                    }
                    if need(*row) {
                        let s = shape(*row);
                        let gr = acc(&mut g[row.0], s);
                        for r in 0..dy.rows {
                            for (o, &v) in gr.data.iter_mut().zip(dy.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if need(*a) {
                        let ga = acc(&mut g[a.0], av.shape());
                        for i in 0..dy.len() {
                            ga.data[i] += dy.data[i] * bv.data[i];
                        }
                    }
                    if need(*b) {
                        let gb = acc(&mut g[b.0], bv.shape());
                        for i in 0..dy.len() {
                            gb.data[i] += dy.data[i] * av.data[i];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let sh = shape(*a);
                    acc(&mut g[a.0], sh).add_scaled(&dy, *s);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let ga = acc(&mut g[a.0], av.shape());
                    for i in 0..dy.len() {
                        let x = av.data[i];
                        let sig = 1.0 / (1.0 + (-x).exp());
                        ga.data[i] += dy.data[i] * sig * (1.0 + x * (1.0 - sig));
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let (n, d) = dy.shape();
                    let gv = &self.value(*gain).data;
                    if need(*gain) {
                        let gg = acc(&mut g[gain.0], (1, d));
                        for r in 0..n {
                            for c in 0..d {
                                gg.data[c] += dy.data[r * d + c] * xhat.data[r * d + c];
                            }
                        }
                    }
                    if need(*bias) {
                        let gb = acc(&mut g[bias.0], (1, d));
                        for r in 0..n {
                            for c in 0..d {
                                gb.data[c] += dy.data[r * d + c];
                            }
                        }
                    }
                    if need(*x) {
                        let gx = acc(&mut g[x.0], (n, d));
                        let mut dxh = vec![0.0; d];
                        for r in 0..n {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..d {
                                dxh[c] = dy.data[r * d + c] * gv[c];
                                mean_d += dxh[c];
                                mean_dx += dxh[c] * xhat.data[r * d + c];
                            }
                            mean_d /= d as f64;
                            mean_dx /= d as f64;
                            for c in 0..d {
                                gx.data[r * d + c] += rstd[r] * (dxh[c] - mean_d - xhat.data[r * d + c] * mean_dx);
                            }
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (n, d) = qv.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(n, d);
                    let mut gk = Mat::zeros(n, d);
                    let mut gv = Mat::zeros(n, d);
                    let mut dp = vec![0.0; n];
                    for (h, p) in probs.iter().enumerate() {
                        let off = h * dh;
                        for i in 0..n {
                            let doi = &dy.data[i * d + off..i * d + off + dh];
                            let prow = &p.data[i * n..(i + 1) * n];
                            let mut rowdot = 0.0;
                            for j in 0..n {
                                if prow[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.data[j * d + off..j * d + off + dh];
                                dp[j] = dot(doi, vj);
                                rowdot += dp[j] * prow[j];
                                let gvj = &mut gv.data[j * d + off..j * d + off + dh];
                                for (o, &x) in gvj.iter_mut().zip(doi) {
                                    *o += prow[j] * x;
                                }
                            }
                            for j in 0..n {
                                if prow[j] == 0.0 {
                                    continue;
                                }
                                let ds = prow[j] * (dp[j] - rowdot) * scale;
                                let (qs, ks) = (i * d + off, j * d + off);
                                for c in 0..dh {
                                    gq.data[qs + c] += ds * kv.data[ks + c];
                                    gk.data[ks + c] += ds * qv.data[qs + c];
                                }
                            }
                        }
                    }
                    for (var, gm) in [(*q, gq), (*k, gk), (*v, gv)] {
                        if need(var) {
                            acc(&mut g[var.0], (n, d)).add_assign(&gm);
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let s = shape(*table);
                    let gt = acc(&mut g[table.0], s);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let s = shape(*p);
                        if need(*p) {
                            acc(&mut g[p.0], s).add_assign(&dy.rows_range(start, s.0));
                        }
                        start += s.0;
                    }
                }
                Op::Rows { x, start } => {
                    let s = shape(*x);
                    let gx = acc(&mut g[x.0], s);
                    let c = s.1;
                    for (o, &v) in gx.data[start * c..start * c + dy.len()].iter_mut().zip(&dy.data) {
                        *o += v;
                    }
                }
                Op::SelectRows { x, idx } => {
                    let s = shape(*x);
                    let gx = acc(&mut g[x.0], s);
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs, count } => {
                    let s = shape(*logits);
                    let gl = acc(&mut g[logits.0], s);
                    let w = dy.item() / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let prow = probs.row(r);
                            let grow = gl.row_mut(r);
                            for c in 0..prow.len() {
                                grow[c] += w * prow[c];
                            }
                            grow[t] -= w;
                        }
                    }
                }
                Op::SqErr { pred, target } => {
                    let pv = self.value(*pred);
                    let w = 2.0 * dy.item() / pv.rows as f64;
                    let gp = acc(&mut g[pred.0], pv.shape());
                    for i in 0..pv.len() {
                        gp.data[i] += w * (pv.data[i] - target.data[i]);
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, wt) in terms {
                        if need(v) {
                            let s = shape(v);
                            acc(&mut g[v.0], s).add_scaled(&dy, wt);
                        }
                    }
                }
            }
        }
    }

    pub fn backward(&self, root: Var) -> Grads {
        let mut grads = Grads::new(self.params.len());
        self.backward_into(root, 1.0, &mut grads);
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;
    use crate::rng;

    /// Central finite-difference check of every parameter entry of a small
    /// composite function exercising each op.
    #[test]
    fn ops_match_finite_differences() {
        let mut r = rng::rng(3, &[]);
        let mut ps = ParamStore::new();
        let emb = ps.add("emb", Group::TextEmbed, Mat::randn(5, 4, 0.5, &mut r));
        let w = ps.add("w", Group::Trunk, Mat::randn(4, 4, 0.5, &mut r));
        let b = ps.add("b", Group::Trunk, Mat::randn(1, 4, 0.5, &mut r));
        let lg = ps.add("lg", Group::Trunk, Mat::randn(1, 4, 0.5, &mut r).add(&Mat::filled(1, 4, 1.0)));
        let lb = ps.add("lb", Group::Trunk, Mat::randn(1, 4, 0.5, &mut r));
        let wo = ps.add("wo", Group::Trunk, Mat::randn(4, 3, 0.5, &mut r));
        let bo = ps.add("bo", Group::Trunk, Mat::randn(1, 3, 0.5, &mut r));
        let extra = Mat::randn(2, 4, 1.0, &mut r);
        let target = Mat::randn(3, 3, 1.0, &mut r);
        let trainable = vec![true; ps.len()];

        let f = |ps: &ParamStore, mask: AttnMask| -> (f64, Grads) {
            let mut g = Graph::new(ps, &trainable);
            let e = g.gather(emb, &[1, 3, 0]);
            let c = g.constant(extra.clone());
            let x = g.concat(&[e, c]);
            let h = g.layer_norm(x, lg, lb);
            let q = g.linear(h, w, b);
            let a = g.attention(q, h, x, 2, mask);
            let s = g.silu(a);
            let m = g.mul(s, h);
            let sc = g.scale(m, 0.7);
            let sum = g.add(sc, x);
            let tail = g.rows(sum, 1, 3);
            let tail = g.select_rows(tail, &[2, 0, 1]);
            let logits = g.linear(tail, wo, bo);
            let ce = g.cross_entropy(logits, &[Some(2), None, Some(0)]);
            let se = g.sq_err(logits, &target);
            let tot = g.weighted_sum(&[(ce, 1.0), (se, 0.3)]);
            (g.value(tot).item(), g.backward(tot))
        };

        for mask in [AttnMask::Full, AttnMask::Causal] {
            let (_, grads) = f(&ps, mask);
            for (id, p) in ps.iter() {
                let gm = grads.get(id).expect("every param has a gradient");
                for j in 0..p.value.len() {
                    let h = 1e-5;
                    let mut plus = ps.clone();
                    plus.value_mut(id).data[j] += h;
                    let mut minus = ps.clone();
                    minus.value_mut(id).data[j] -= h;
                    let fd = (f(&plus, mask).0 - f(&minus, mask).0) / (2.0 * h);
                    let an = gm.data[j];
                    let err = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-6);
                    assert!(err < 1e-5, "{} [{j}] fd {fd} analytic {an} ({mask:?})", p.name);
                }
            }
        }
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParamStore::new();
        let w = ps.add("w", Group::Encoder, Mat::filled(2, 2, 0.5));
        let v = ps.add("v", Group::Trunk, Mat::filled(2, 1, 0.5));
        let trainable = vec![false, true];
        let mut g = Graph::new(&ps, &trainable);
        let x = g.constant(Mat::filled(1, 2, 1.0));
        let wv = g.param(w);
        let h = g.matmul(x, wv);
        let vv = g.param(v);
        let y = g.matmul(h, vv);
        let l = g.sq_err(y, &Mat::scalar(0.0));
        let grads = g.backward(l);
        assert!(grads.get(w).is_none());
        assert!(grads.get(v).is_some());
    }
}
