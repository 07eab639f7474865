use crate::error::{AutodiffError, Result};
use crate::graph::{Gradients, Graph, NodeId, Op};
use crate::ops::sigmoid;
use crate::tensor::{gemm, Tensor};

impl Graph {
    /// Reverse sweep from a scalar `root`.
    ///
    /// Nodes are visited once each in reverse recording order, which is a
    /// reverse topological order. Every leaf gets an entry in the result;
    /// leaves with no path to `root` get zeros.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        let root_val = self.value(root);
        if root_val.numel() != 1 {
            return Err(AutodiffError::NonScalarRoot {
                node: root.0,
                shape: root_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_val.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(
                    grads
                        .get_mut(i)
                        .and_then(Option::take)
                        .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
                );
            }
        }
        Ok(Gradients { grads: out })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.wants(*a) {
                    let ga = slot(grads, *a, av.shape());
                    gemm(g.data(), bv.data(), ga.data_mut(), (m, n, k), false, true, true);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    gemm(av.data(), g.data(), gb.data_mut(), (k, m, n), true, false, true);
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(*p) {
                        slot(grads, *p, g.shape()).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (p, other) in [(a, b), (b, a)] {
                    if self.wants(*p) {
                        let ov = self.value(*other).data();
                        let gp = slot(grads, *p, g.shape());
                        for ((d, gi), o) in gp.data_mut().iter_mut().zip(g.data()).zip(ov) {
                            *d += gi * o;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for (d, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                        *d += gi * c;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.shape());
                    for r in 0..out.rows() {
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let n = xv.cols();
                if self.wants(*gain) {
                    let gg = slot(grads, *gain, gv.shape());
                    for (r, inv) in inv_rms.iter().enumerate() {
                        for ((d, xi), gi) in gg.data_mut().iter_mut().zip(xv.row(r)).zip(g.row(r)) {
                            *d += gi * xi * inv;
                        }
                    }
                }
                if self.wants(*x) {
                    let gx = slot(grads, *x, xv.shape());
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let (xr, gr) = (xv.row(r), g.row(r));
                        let dot: f64 = xr
                            .iter()
                            .zip(gr)
                            .zip(gv.data())
                            .map(|((xi, gi), wi)| xi * gi * wi)
                            .sum();
                        let c = inv * inv * inv * dot / n as f64;
                        for (((d, xi), gi), wi) in gx.row_mut(r).iter_mut().zip(xr).zip(gr).zip(gv.data()) {
                            *d += inv * gi * wi - c * xi;
                        }
                    }
                }
            }
            Op::Silu(a) => {
                if self.wants(*a) {
                    let xv = self.value(*a).data();
                    let ga = slot(grads, *a, g.shape());
                    for ((d, gi), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(xv) {
                        let s = sigmoid(x);
                        *d += gi * s * (1.0 + x * (1.0 - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let gt = slot(grads, *table, self.value(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, gi) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let lv = self.value(*logits);
                    let v = lv.cols();
                    let gl = slot(grads, *logits, lv.shape());
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g.data()[r];
                        if gr == 0.0 {
                            continue;
                        }
                        let p = &probs[r * v..(r + 1) * v];
                        let row = gl.row_mut(r);
                        for (d, pi) in row.iter_mut().zip(p) {
                            *d += gr * pi;
                        }
                        row[t] -= gr;
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::Sum(a) => {
                if self.wants(*a) {
                    let gi = g.data()[0];
                    let ga = slot(grads, *a, self.value(*a).shape());
                    ga.data_mut().iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Mean(a) => {
                if self.wants(*a) {
                    let shape = self.value(*a).shape();
                    let gi = g.data()[0] / self.value(*a).numel() as f64;
                    let ga = slot(grads, *a, shape);
                    ga.data_mut().iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::Pick(a, idx) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    ga.data_mut()[*idx] += g.data()[0];
                }
            }
            Op::GatherRows(a, rows) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, gi) in ga.row_mut(r).iter_mut().zip(g.row(i)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::ScatterRows(a, rows) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, gi) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::SliceCol(a, j) => {
                if self.wants(*a) {
                    let ga = slot(grads, *a, self.value(*a).shape());
                    for (r, gi) in g.data().iter().enumerate() {
                        ga.row_mut(r)[*j] += gi;
                    }
                }
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (self.value(*a), self.value(*c));
                if self.wants(*a) {
                    let ga = slot(grads, *a, av.shape());
                    for (r, &s) in cv.data().iter().enumerate() {
                        for (d, gi) in ga.row_mut(r).iter_mut().zip(g.row(r)) {
                            *d += gi * s;
                        }
                    }
                }
                if self.wants(*c) {
                    let gc = slot(grads, *c, cv.shape());
                    for (r, d) in gc.data_mut().iter_mut().enumerate() {
                        *d += av.row(r).iter().zip(g.row(r)).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
            Op::RowMerge(a, b, use_b) => {
                for (p, from_b) in [(a, false), (b, true)] {
                    if self.wants(*p) {
                        let gp = slot(grads, *p, g.shape());
                        for (r, _) in use_b.iter().enumerate().filter(|(_, &u)| u == from_b) {
                            for (d, gi) in gp.row_mut(r).iter_mut().zip(g.row(r)) {
                                *d += gi;
                            }
                        }
                    }
                }
            }
            Op::NormalizeRows(a) => {
                if self.wants(*a) {
                    let av = self.value(*a);
                    let ga = slot(grads, *a, av.shape());
                    for r in 0..out.rows() {
                        let s: f64 = av.row(r).iter().sum();
                        if s == 0.0 {
                            continue;
                        }
                        let (y, gr) = (out.row(r), g.row(r));
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (d, q) in ga.row_mut(r).iter_mut().zip(gr) {
                            *d += (q - dot) / s;
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.shape()[0], qv.shape()[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(&[t, d]);
        let mut dk = Tensor::zeros(&[t, d]);
        let mut dv = Tensor::zeros(&[t, d]);
        let mut dp = vec![0.0; t];
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let p = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                let go = &gd[i * d + off..i * d + off + dh];
                for (j, &pij) in p.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    let dvj = &mut dv.data_mut()[j * d + off..j * d + off + dh];
                    for (x, y) in dvj.iter_mut().zip(go) {
                        *x += pij * y;
                    }
                }
                let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let qi = &qd[i * d + off..i * d + off + dh];
                for (j, &pij) in p.iter().enumerate() {
                    let ds = pij * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let dqi = &mut dq.data_mut()[i * d + off..i * d + off + dh];
                    for (x, y) in dqi.iter_mut().zip(kj) {
                        *x += ds * y;
                    }
                    let dkj = &mut dk.data_mut()[j * d + off..j * d + off + dh];
                    for (x, y) in dkj.iter_mut().zip(qi) {
                        *x += ds * y;
                    }
                }
            }
        }
        for (id, gt) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(id) {
                slot(grads, id, gt.shape()).add_assign(&gt);
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], id: NodeId, shape: &[usize]) -> &'a mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(shape))
}
