//! Forward definitions of the primitive set.
//!
//! Matrices are 2-D tensors; "rows" always means the leading dimension.

use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::tensor::{gemm, log_sum_exp, softmax_in_place, Tensor};

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    fn shape_err(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::Shape {
            node: self.next_id(),
            op,
            detail,
        }
    }

    fn index_err(&self, op: &'static str, detail: String) -> AutodiffError {
        AutodiffError::Index {
            node: self.next_id(),
            op,
            detail,
        }
    }

    fn matrix(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        self.check(id)?;
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(self.shape_err(op, format!("node {} has shape {s:?}, expected a matrix", id.0)));
        }
        Ok((s[0], s[1]))
    }

    fn record(&mut self, op: Op, value: Tensor, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push(op, Arc::new(value), requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            (m, k, n),
            false,
            false,
            false,
        );
        Ok(self.record(Op::MatMul(a, b), out, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(self.shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.record(Op::Add(a, b), out, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, y) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= y;
        }
        Ok(self.record(Op::Mul(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let out = self.value(a).map(|v| v * c);
        Ok(self.record(Op::Scale(a, c), out, &[a]))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix("softmax_rows", a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        Ok(self.record(Op::SoftmaxRows(a), out, &[a]))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain`, row-wise.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        let (m, n) = self.matrix("rms_norm", x)?;
        self.check(gain)?;
        if self.value(gain).numel() != n {
            return Err(self.shape_err(
                "rms_norm",
                format!("gain has {} entries, rows have {n}", self.value(gain).numel()),
            ));
        }
        let xv = self.value(x);
        let gv = self.value(gain).data();
        let mut out = Tensor::zeros(&[m, n]);
        let mut inv_rms = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, v), g) in out.row_mut(r).iter_mut().zip(row).zip(gv) {
                *o = v * inv * g;
            }
        }
        Ok(self.record(Op::RmsNorm { x, gain, inv_rms }, out, &[x, gain]))
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let out = self.value(a).map(|v| v * sigmoid(v));
        Ok(self.record(Op::Silu(a), out, &[a]))
    }

    /// Gathers rows of `table` for each id.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.matrix("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(self.index_err("embedding", format!("id {bad} >= table rows {v}")));
        }
        let tv = self.value(table);
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        Ok(self.record(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            out,
            &[table],
        ))
    }

    /// Per-row `-log softmax(logits)[target]`; returns a vector with one loss per row.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, v) = self.matrix("cross_entropy_rows", logits)?;
        if targets.len() != m {
            return Err(self.shape_err(
                "cross_entropy_rows",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(self.index_err("cross_entropy_rows", format!("target {bad} >= classes {v}")));
        }
        let lv = self.value(logits);
        let mut losses = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m * v);
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            losses.push(lse - row[t]);
            probs.extend(row.iter().map(|z| (z - lse).exp()));
        }
        let out = Tensor::new(vec![m], losses)?;
        Ok(self.record(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
            &[logits],
        ))
    }

    /// Multi-head causal scaled dot-product attention over `T×d` inputs;
    /// head `h` owns columns `h*d/heads .. (h+1)*d/heads`.
    pub fn causal_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId> {
        let (t, d) = self.matrix("causal_attention", q)?;
        for id in [k, v] {
            let s = self.matrix("causal_attention", id)?;
            if s != (t, d) {
                return Err(self.shape_err("causal_attention", format!("q is {t}x{d}, got {s:?}")));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(self.shape_err("causal_attention", format!("{d} columns not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = Tensor::zeros(&[t, d]);
        let mut probs = vec![0.0; heads * t * t];
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                for (j, s) in scores[..=i].iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut scores[..=i]);
                let p_row = &mut probs[(h * t + i) * t..(h * t + i + 1) * t];
                p_row[..=i].copy_from_slice(&scores[..=i]);
                let o = &mut out.data_mut()[i * d + off..i * d + off + dh];
                for (j, &p) in scores[..=i].iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += p * vc;
                    }
                }
            }
        }
        Ok(self.record(
            Op::CausalAttention { q, k, v, heads, probs },
            out,
            &[q, k, v],
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.record(Op::Sum(a), Tensor::scalar(s), &[a]))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(self.shape_err("mean", "mean of an empty tensor".into()));
        }
        let s: f64 = self.value(a).data().iter().sum();
        Ok(self.record(Op::Mean(a), Tensor::scalar(s / n as f64), &[a]))
    }

    /// Scalar element at a flat index.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        self.check(a)?;
        let n = self.value(a).numel();
        if index >= n {
            return Err(self.index_err("pick", format!("index {index} >= {n} elements")));
        }
        let v = self.value(a).data()[index];
        Ok(self.record(Op::Pick(a, index), Tensor::scalar(v), &[a]))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(self.index_err("gather_rows", format!("row {bad} >= {m}")));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(&[rows.len(), n]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(r));
        }
        Ok(self.record(Op::GatherRows(a, rows.to_vec()), out, &[a]))
    }

    /// Places row `i` of `a` at row `rows[i]` of a zero `total×n` matrix.
    /// `rows` must be distinct.
    pub fn scatter_rows(&mut self, a: NodeId, rows: &[usize], total: usize) -> Result<NodeId> {
        let (m, n) = self.matrix("scatter_rows", a)?;
        if rows.len() != m {
            return Err(self.shape_err("scatter_rows", format!("{} targets for {m} rows", rows.len())));
        }
        let mut seen = vec![false; total];
        for &r in rows {
            if r >= total || std::mem::replace(&mut seen[r], true) {
                return Err(self.index_err("scatter_rows", format!("row {r} out of range or repeated")));
            }
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(&[total, n]);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        Ok(self.record(Op::ScatterRows(a, rows.to_vec()), out, &[a]))
    }

    /// Column `j` as an `m×1` matrix.
    pub fn slice_col(&mut self, a: NodeId, j: usize) -> Result<NodeId> {
        let (m, n) = self.matrix("slice_col", a)?;
        if j >= n {
            return Err(self.index_err("slice_col", format!("column {j} >= {n}")));
        }
        let av = self.value(a);
        let data = (0..m).map(|r| av.row(r)[j]).collect();
        let out = Tensor::new(vec![m, 1], data)?;
        Ok(self.record(Op::SliceCol(a, j), out, &[a]))
    }

    /// Scales row `r` of `a` (`m×n`) by `c[r]` (`c` is `m×1`).
    pub fn mul_col(&mut self, a: NodeId, c: NodeId) -> Result<NodeId> {
        let (m, _) = self.matrix("mul_col", a)?;
        let cs = self.matrix("mul_col", c)?;
        if cs != (m, 1) {
            return Err(self.shape_err("mul_col", format!("scale is {cs:?}, expected ({m}, 1)")));
        }
        let mut out = self.value(a).clone();
        let cv = self.value(c).data();
        for (r, &s) in cv.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= s;
            }
        }
        Ok(self.record(Op::MulCol(a, c), out, &[a, c]))
    }

    /// Row `r` comes from `b` where `use_b[r]`, otherwise from `a`.
    pub fn row_merge(&mut self, a: NodeId, b: NodeId, use_b: &[bool]) -> Result<NodeId> {
        self.same_shape("row_merge", a, b)?;
        let m = self.value(a).rows();
        if use_b.len() != m {
            return Err(self.shape_err("row_merge", format!("{} selectors for {m} rows", use_b.len())));
        }
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        for (r, _) in use_b.iter().enumerate().filter(|(_, &u)| u) {
            out.row_mut(r).copy_from_slice(bv.row(r));
        }
        Ok(self.record(Op::RowMerge(a, b, use_b.to_vec()), out, &[a, b]))
    }

    /// Divides each row by its sum; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.matrix("normalize_rows", a)?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Ok(self.record(Op::NormalizeRows(a), out, &[a]))
    }
}
