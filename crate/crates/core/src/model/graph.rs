//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows the parameter store, records every operation in
//! creation order and walks the tape backwards in [`Graph::backward`].
//! Gradients are only propagated into nodes that depend on a trainable
//! parameter, so frozen parts of the network cost forward time only.

use super::params::{Grads, ParamGroup, ParamId, ParamStore};
use super::tensor::{gemm, Mat, MatMut, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys a query row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    /// Query row `i` sees keys `0..=i + offset`.
    Causal { offset: usize },
    Full,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

enum Op {
    Leaf,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SumSqDiff {
        x: Var,
        target: Tensor,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    trainable: [bool; 4],
}

fn group_index(g: ParamGroup) -> usize {
    match g {
        ParamGroup::Backbone => 0,
        ParamGroup::Queries => 1,
        ParamGroup::Connector => 2,
        ParamGroup::Dit => 3,
    }
}

impl<'a> Graph<'a> {
    /// A graph in which every parameter group receives gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, &ParamGroup::ALL)
    }

    /// A graph that only differentiates with respect to `groups`.
    pub fn with_trainable(store: &'a ParamStore, groups: &[ParamGroup]) -> Self {
        let mut trainable = [false; 4];
        for g in groups {
            trainable[group_index(*g)] = true;
        }
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node.value.as_ref().expect("non-param node without value"),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let group = self.store.param(id).group;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: self.trainable[group_index(group)],
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Parameter by name; panics on a missing name, which is a wiring bug.
    pub fn p(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// `x · w + b` with `x: n×din`, `w: din×dout`, `b: 1×dout`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: shape mismatch");
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, out.cols), "linear: bias shape");
            for r in 0..out.rows {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bv.data) {
                    *o += bb;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// Adds the single row `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Var {
        let mut out = self.value(x).clone();
        let rv = self.value(r);
        assert_eq!(rv.shape(), (1, out.cols), "add_row: shape mismatch");
        for i in 0..out.rows {
            for (o, v) in out.row_mut(i).iter_mut().zip(&rv.data) {
                *o += v;
            }
        }
        let needs = self.needs(x) || self.needs(r);
        self.push(out, Op::AddRow(x, r), needs)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale_assign(s);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, s), needs)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (1×cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = Tensor::zeros(n, d);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out.data[i * d + j] = h * gv.data[j] + bv.data[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Tensor::from_vec(xv.rows, xv.cols, data);
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    /// Multi-head scaled dot-product attention. `q: nq×D`, `k, v: nk×D`;
    /// heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Mask) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let nk = kv.rows;
        assert_eq!(kv.shape(), vv.shape(), "attention: k/v shape mismatch");
        assert_eq!(kv.cols, d, "attention: width mismatch");
        assert_eq!(d % heads, 0, "attention: width not divisible by heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = Tensor::zeros(nq, d);
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            gemm(
                nq,
                dh,
                nk,
                scale,
                Mat::new(&qv.data[h * dh..], d, 1),
                Mat::new(&kv.data[h * dh..], d, 1).t(),
                0.0,
                MatMut::new(p, nk, 1),
            );
            for i in 0..nq {
                let limit = match mask {
                    Mask::Causal { offset } => (i + offset + 1).min(nk),
                    Mask::Full => nk,
                };
                let row = &mut p[i * nk..(i + 1) * nk];
                let m = row[..limit].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for e in &mut row[..limit] {
                    *e = (*e - m).exp();
                    s += *e;
                }
                for e in &mut row[..limit] {
                    *e /= s;
                }
                for e in &mut row[limit..] {
                    *e = 0.0;
                }
            }
            gemm(
                nq,
                nk,
                dh,
                1.0,
                Mat::new(p, nk, 1),
                Mat::new(&vv.data[h * dh..], d, 1),
                0.0,
                MatMut::new(&mut out.data[h * dh..], d, 1),
            );
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            needs,
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "embedding: id {id} out of range");
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let needs = self.needs(table);
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|p| self.value(*p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.cols, cols, "concat_rows: width mismatch");
            data.extend_from_slice(&v.data);
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows, "slice_rows: out of range");
        let out = xv.slice_rows(start, len);
        let needs = self.needs(x);
        self.push(out, Op::SliceRows { x, start }, needs)
    }

    /// Mean softmax cross-entropy of each logits row against its target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "cross_entropy: one target per row");
        let (n, c) = lv.shape();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + s.ln();
            loss += lse - row[targets[i]];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// `Σ (x − target)²` as a 1×1 value.
    pub fn sum_sq_diff(&mut self, x: Var, target: Tensor) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "sum_sq_diff: shape mismatch");
        let s = xv
            .data
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumSqDiff { x, target }, needs)
    }

    /// Back-propagates from the scalar `loss`, accumulating parameter
    /// gradients into `grads`.
    pub fn backward_into(&self, loss: Var, grads: &mut Grads) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut g: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        g.resize_with(self.nodes.len(), || None);
        g[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = g[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut g, grads);
        }
    }

    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads = Grads::new(self.store);
        self.backward_into(loss, &mut grads);
        grads
    }

    fn acc(&self, g: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut g[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }

    fn backprop_node(&self, i: usize, dy: &Tensor, g: &mut [Option<Tensor>], grads: &mut Grads) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => grads.accumulate(*id, dy),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, din, dout) = (xv.rows, xv.cols, wv.cols);
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(n, din);
                    gemm(
                        n,
                        dout,
                        din,
                        1.0,
                        Mat::new(&dy.data, dout, 1),
                        Mat::new(&wv.data, dout, 1).t(),
                        0.0,
                        MatMut::new(&mut dx.data, din, 1),
                    );
                    self.acc(g, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = Tensor::zeros(din, dout);
                    gemm(
                        din,
                        n,
                        dout,
                        1.0,
                        Mat::new(&xv.data, din, 1).t(),
                        Mat::new(&dy.data, dout, 1),
                        0.0,
                        MatMut::new(&mut dw.data, dout, 1),
                    );
                    self.acc(g, *w, dw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        self.acc(g, *b, col_sum(dy));
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(g, *a, dy.clone());
                self.acc(g, *b, dy.clone());
            }
            Op::AddRow(x, r) => {
                self.acc(g, *x, dy.clone());
                if self.needs(*r) {
                    self.acc(g, *r, col_sum(dy));
                }
            }
            Op::Scale(x, s) => {
                let mut dx = dy.clone();
                dx.scale_assign(*s);
                self.acc(g, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (n, d) = dy.shape();
                let gv = self.value(*gamma);
                if self.needs(*gamma) {
                    let mut dg = Tensor::zeros(1, d);
                    for r in 0..n {
                        for j in 0..d {
                            dg.data[j] += dy.data[r * d + j] * xhat[r * d + j];
                        }
                    }
                    self.acc(g, *gamma, dg);
                }
                if self.needs(*beta) {
                    self.acc(g, *beta, col_sum(dy));
                }
                if self.needs(*x) {
                    let mut dx = Tensor::zeros(n, d);
                    for r in 0..n {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = dy.data[r * d + j] * gv.data[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let dh = dy.data[r * d + j] * gv.data[j];
                            dx.data[r * d + j] = rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                    self.acc(g, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data
                    .iter()
                    .zip(&dy.data)
                    .map(|(&v, &d)| {
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        d * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                self.acc(g, *x, Tensor::from_vec(xv.rows, xv.cols, data));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, dy, g),
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.rows, tv.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *a += b;
                    }
                }
                self.acc(g, *table, dt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.value(*p).rows;
                    if self.needs(*p) {
                        self.acc(g, *p, dy.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows, xv.cols);
                let off = start * xv.cols;
                dx.data[off..off + dy.len()].copy_from_slice(&dy.data);
                self.acc(g, *x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let lv = self.value(*logits);
                let (n, c) = lv.shape();
                let s = dy.data[0] / n as f64;
                let mut dl = Tensor::from_vec(n, c, probs.clone());
                for (r, &t) in targets.iter().enumerate() {
                    dl.data[r * c + t] -= 1.0;
                }
                dl.scale_assign(s);
                self.acc(g, *logits, dl);
            }
            Op::SumSqDiff { x, target } => {
                let xv = self.value(*x);
                let s = 2.0 * dy.data[0];
                let data = xv
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(a, b)| s * (a - b))
                    .collect();
                self.acc(g, *x, Tensor::from_vec(xv.rows, xv.cols, data));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        dy: &Tensor,
        g: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, d) = qv.shape();
        let nk = kv.rows;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = Tensor::zeros(nq, d);
        let mut dk = Tensor::zeros(nk, d);
        let mut dv = Tensor::zeros(nk, d);
        let mut ds = vec![0.0; nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dP = dO_h · V_hᵀ
            gemm(
                nq,
                dh,
                nk,
                1.0,
                Mat::new(&dy.data[h * dh..], d, 1),
                Mat::new(&vv.data[h * dh..], d, 1).t(),
                0.0,
                MatMut::new(&mut ds, nk, 1),
            );
            if self.needs(v) {
                gemm(
                    nk,
                    nq,
                    dh,
                    1.0,
                    Mat::new(p, nk, 1).t(),
                    Mat::new(&dy.data[h * dh..], d, 1),
                    0.0,
                    MatMut::new(&mut dv.data[h * dh..], d, 1),
                );
            }
            for i in 0..nq {
                let row_p = &p[i * nk..(i + 1) * nk];
                let row_d = &mut ds[i * nk..(i + 1) * nk];
                let dot: f64 = row_p.iter().zip(row_d.iter()).map(|(a, b)| a * b).sum();
                for (dd, pp) in row_d.iter_mut().zip(row_p) {
                    *dd = pp * (*dd - dot);
                }
            }
            if self.needs(q) {
                gemm(
                    nq,
                    nk,
                    dh,
                    scale,
                    Mat::new(&ds, nk, 1),
                    Mat::new(&kv.data[h * dh..], d, 1),
                    0.0,
                    MatMut::new(&mut dq.data[h * dh..], d, 1),
                );
            }
            if self.needs(k) {
                gemm(
                    nk,
                    nq,
                    dh,
                    scale,
                    Mat::new(&ds, nk, 1).t(),
                    Mat::new(&qv.data[h * dh..], d, 1),
                    0.0,
                    MatMut::new(&mut dk.data[h * dh..], d, 1),
                );
            }
        }
        self.acc(g, q, dq);
        self.acc(g, k, dk);
        self.acc(g, v, dv);
    }
}

fn col_sum(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for (o, v) in out.data.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}
