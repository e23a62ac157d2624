//! Minimal reverse-mode automatic differentiation over row-major `f64`
//! matrices.
//!
//! Every value on the [`Tape`] is a 2-D matrix; scalars are `1 x 1`. Batched
//! sequence data is laid out as `(batch * len) x features`, and operations
//! that need per-example structure (FiLM, rotary encodings, attention) take
//! the sequence length as a `group` argument.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Array1<f64>),
    Silu(Var),
    LayerNorm { x: Var, xhat: Mat, inv_std: Array1<f64> },
    Film { x: Var, scale: Var, shift: Var, group: usize },
    Rotary { x: Var, heads: usize, group: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, group: usize, probs: Vec<Mat> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather { table: Var, rows: Vec<usize> },
    NormalizeRows { raw: Var, norms: Array1<f64>, target: f64 },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Mat },
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

const LN_EPS: f64 = 1e-5;
const ROPE_BASE: f64 = 10_000.0;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Mat, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// `a + row`, broadcasting a `1 x m` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Multiplies row `r` of `a` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: Array1<f64>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, f) in v.rows_mut().into_iter().zip(factors.iter()) {
            row *= *f;
        }
        self.push(v, Op::ScaleRows(a, factors), &[a])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x / (1.0 + (-x).exp()));
        self.push(v, Op::Silu(a), &[a])
    }

    /// Row-wise layer normalisation without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Mat::zeros((n, m));
        let mut inv_std = Array1::zeros(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..m {
                xhat[[r, c]] = (row[c] - mean) * is;
            }
        }
        let v = xhat.clone();
        self.push(v, Op::LayerNorm { x, xhat, inv_std }, &[x])
    }

    /// `x * (1 + scale[g]) + shift[g]` where `g = row / group` selects the
    /// per-example conditioning row.
    pub fn film(&mut self, x: Var, scale: Var, shift: Var, group: usize) -> Var {
        let xv = self.value(x);
        let sc = self.value(scale);
        let sh = self.value(shift);
        let mut v = xv.clone();
        for (r, mut row) in v.rows_mut().into_iter().enumerate() {
            let g = r / group;
            row.zip_mut_with(&sc.row(g), |a, s| *a *= 1.0 + s);
            row += &sh.row(g);
        }
        self.push(v, Op::Film { x, scale, shift, group }, &[x, scale, shift])
    }

    /// Rotary position encoding applied per head; the position of row `r`
    /// is `r % group`.
    pub fn rotary(&mut self, x: Var, heads: usize, group: usize) -> Var {
        let v = rotate(self.value(x), heads, group, 1.0);
        self.push(v, Op::Rotary { x, heads, group }, &[x])
    }

    /// Unmasked multi-head scaled dot-product attention within each group of
    /// `group` consecutive rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, group: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, w) = qv.dim();
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, w));
        let mut probs = Vec::with_capacity((n / group) * heads);
        for b in 0..n / group {
            let rows = b * group..(b + 1) * group;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![rows.clone(), cols.clone()]);
                let ks = kv.slice(s![rows.clone(), cols.clone()]);
                let vs = vv.slice(s![rows.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t()) * scale;
                for mut row in p.rows_mut() {
                    crate::numerics::softmax_in_place(row.as_slice_mut().expect("contiguous"));
                }
                out.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, group, probs }, &[q, k, v])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let v = self.value(table).select(Axis(0), rows);
        self.push(v, Op::Gather { table, rows: rows.to_vec() }, &[table])
    }

    /// Rescales every row to L2 norm `target`.
    pub fn normalize_rows(&mut self, raw: Var, target: f64) -> Var {
        let rv = self.value(raw);
        let norms: Array1<f64> = rv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut v = rv.clone();
        for (mut row, n) in v.rows_mut().into_iter().zip(norms.iter()) {
            row *= target / n;
        }
        self.push(v, Op::NormalizeRows { raw, norms, target }, &[raw])
    }

    /// `sum_r weights[r] * (-log softmax(logits[r])[targets[r]])` as a `1 x 1`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let lse = crate::numerics::log_sum_exp(row.as_slice().expect("contiguous"));
            if weights[r] != 0.0 {
                total += weights[r] * (lse - row[targets[r]]);
            }
            row.mapv_inplace(|z| (z - lse).exp());
        }
        let v = Mat::from_elem((1, 1), total);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Reverse sweep from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, d: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if needs(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if needs(*row) {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g * self.value(*b));
                }
                if needs(*b) {
                    acc(*b, g * self.value(*a));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::ScaleRows(a, f) => {
                let mut d = g.clone();
                for (mut row, s) in d.rows_mut().into_iter().zip(f.iter()) {
                    row *= *s;
                }
                acc(*a, d);
            }
            Op::Silu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |gi, &x| {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *gi *= sig * (1.0 + x * (1.0 - sig));
                });
                acc(*a, d);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let m = xhat.ncols() as f64;
                let mut d = Mat::zeros(xhat.dim());
                for r in 0..xhat.nrows() {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let mean_g = gr.sum() / m;
                    let mean_gx = gr.dot(&xr) / m;
                    for c in 0..xhat.ncols() {
                        d[[r, c]] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                    }
                }
                acc(*x, d);
            }
            Op::Film { x, scale, shift, group } => {
                let xv = self.value(*x);
                let sc = self.value(*scale);
                let groups = sc.nrows();
                if needs(*x) {
                    let mut d = g.clone();
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        row.zip_mut_with(&sc.row(r / group), |a, s| *a *= 1.0 + s);
                    }
                    acc(*x, d);
                }
                if needs(*scale) || needs(*shift) {
                    let mut dsc = Mat::zeros(sc.dim());
                    let mut dsh = Mat::zeros(sc.dim());
                    for gi in 0..groups {
                        let rows = gi * group..(gi + 1) * group;
                        let gs = g.slice(s![rows.clone(), ..]);
                        let xs = xv.slice(s![rows, ..]);
                        dsc.row_mut(gi).assign(&(&gs * &xs).sum_axis(Axis(0)));
                        dsh.row_mut(gi).assign(&gs.sum_axis(Axis(0)));
                    }
                    acc(*scale, dsc);
                    acc(*shift, dsh);
                }
            }
            Op::Rotary { x, heads, group } => acc(*x, rotate(g, *heads, *group, -1.0)),
            Op::Attention { q, k, v, heads, group, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (n, w) = qv.dim();
                let dh = w / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Mat::zeros((n, w));
                let mut dk = Mat::zeros((n, w));
                let mut dv = Mat::zeros((n, w));
                for b in 0..n / group {
                    let rows = b * group..(b + 1) * group;
                    for h in 0..*heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[b * heads + h];
                        let go = g.slice(s![rows.clone(), cols.clone()]);
                        let qs = qv.slice(s![rows.clone(), cols.clone()]);
                        let ks = kv.slice(s![rows.clone(), cols.clone()]);
                        let vs = vv.slice(s![rows.clone(), cols.clone()]);
                        dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        let dp = go.dot(&vs.t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            row.zip_mut_with(&prow, |d, &pi| *d -= pi * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                        dk.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.t().dot(&qs));
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).ncols();
                    if needs(*p) {
                        acc(*p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut d = Mat::zeros(self.value(*a).dim());
                let w = g.ncols();
                d.slice_mut(s![.., *start..*start + w]).assign(g);
                acc(*a, d);
            }
            Op::Gather { table, rows } => {
                let mut d = Mat::zeros(self.value(*table).dim());
                for (r, &src) in rows.iter().enumerate() {
                    let mut dst = d.row_mut(src);
                    dst += &g.row(r);
                }
                acc(*table, d);
            }
            Op::NormalizeRows { raw, norms, target } => {
                let rv = self.value(*raw);
                let mut d = Mat::zeros(rv.dim());
                for r in 0..rv.nrows() {
                    let n = norms[r];
                    let xr = rv.row(r);
                    let gr = g.row(r);
                    let proj = gr.dot(&xr) / (n * n);
                    for c in 0..rv.ncols() {
                        d[[r, c]] = target / n * (gr[c] - xr[c] * proj);
                    }
                }
                acc(*raw, d);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let go = g[[0, 0]];
                let mut d = probs.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    if weights[r] == 0.0 {
                        row.fill(0.0);
                    } else {
                        row[targets[r]] -= 1.0;
                        row *= weights[r] * go;
                    }
                }
                acc(*logits, d);
            }
            Op::Sum(a) => {
                let d = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                acc(*a, d);
            }
        }
    }
}

fn rotate(x: &Mat, heads: usize, group: usize, direction: f64) -> Mat {
    let (n, w) = x.dim();
    let dh = w / heads;
    let half = dh / 2;
    let mut out = x.clone();
    for r in 0..n {
        let pos = (r % group) as f64;
        for h in 0..heads {
            let base = h * dh;
            for i in 0..half {
                let theta = pos * ROPE_BASE.powf(-2.0 * i as f64 / dh as f64);
                let (sin, cos) = (direction * theta).sin_cos();
                let a = x[[r, base + i]];
                let b = x[[r, base + i + half]];
                out[[r, base + i]] = a * cos - b * sin;
                out[[r, base + i + half]] = a * sin + b * cos;
            }
        }
    }
    out
}
