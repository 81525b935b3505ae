//! A small tape-based reverse-mode autodiff over 2-D `f64` matrices.
//!
//! Every op appends a node holding its forward value and whatever the
//! backward pass needs. Parameters are read in place from a [`ParamStore`]
//! and their gradients are accumulated per storage slot, so aliased
//! (tied) weights receive the sum of all their uses.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    /// a + row-broadcast b
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// a / s with s a 1×1 node
    DivScalar(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        scale: f64,
        probs: Vec<Array2<f64>>,
    },
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    /// Σ over rows with a target of (logsumexp(row) - row[target]); 1×1.
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
    },
    /// logsumexp over all entries; 1×1.
    LogSumExp {
        x: Var,
        probs: Array2<f64>,
    },
    SumAll(Var),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Gradients from one backward pass.
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    /// Indexed by parameter slot.
    pub params: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params[id].as_ref()
    }
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn add_into(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn masked_softmax_rows(scores: &mut Array2<f64>, mask: Option<&ArrayView2<bool>>) {
    for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, v) in row.iter().enumerate() {
            if mask.is_none_or(|m| m[[i, j]]) && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if mask.is_none_or(|m| m[[i, j]]) {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

fn logsumexp(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(1024),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(val), _) => val,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("only parameters borrow their value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is recorded.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let d = self.scalar(s);
        let out = self.value(a) / d;
        self.push(out, Op::DivScalar(a, s), &[a, s])
    }

    /// x·W + b
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_row(h, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Multi-head scaled dot-product attention over pre-projected q, k, v.
    /// `mask[i][j]` allows query i to see key j.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Array2<bool>>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "width must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::<f64>::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        let mask_view = mask.map(|m| m.view());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = qv.slice(cols);
            let kh = kv.slice(cols);
            let vh = vv.slice(cols);
            let mut scores = qh.dot(&kh.t()) * scale;
            masked_softmax_rows(&mut scores, mask_view.as_ref());
            out.slice_mut(cols).assign(&scores.dot(&vh));
            probs.push(scores);
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        )
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), rows);
        self.push(out, Op::SelectRows(a, rows.to_vec()), &[a])
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let val = self.value(a);
        let out = val.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(out, Op::MeanRows(a), &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching widths");
        self.push(out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("matching heights");
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Row-wise L2 normalization; all-zero rows become e_1.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            if n > 0.0 {
                row.mapv_inplace(|v| v / n);
            } else {
                row.fill(0.0);
                row[0] = 1.0;
            }
            norms.push(n);
        }
        self.push(out, Op::NormalizeRows { x, norms }, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = Array2::<f64>::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(i);
            let (arg, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            // ln Σ exp(z_j − z_t) written so a dominant target keeps full
            // relative precision.
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != arg)
                .map(|(_, v)| (v - max).exp())
                .sum();
            total += (max - row[t]) + rest.ln_1p();
            let lse = max + rest.ln_1p();
            for (j, p) in probs.row_mut(i).iter_mut().enumerate() {
                *p = (row[j] - lse).exp();
            }
        }
        self.push(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let flat = xv.iter().copied().collect::<ndarray::Array1<f64>>();
        let lse = logsumexp(flat.view());
        let probs = xv.mapv(|v| (v - lse).exp());
        self.push(Array2::from_elem((1, 1), lse), Op::LogSumExp { x, probs }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(x), &[x])
    }

    /// Sum of 1×1 nodes.
    pub fn add_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Reverse pass from a 1×1 node, seeded with `seed`.
    pub fn backward_with(&self, root: Var, seed: f64) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params: Vec<Option<Array2<f64>>> = (0..self.params.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem(self.value(root).raw_dim(), seed));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            let needs = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => add_into(&mut params[*id], g.clone()),
                Op::MatMul(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], g.dot(&self.value(*b).t()));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulNT(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], g.dot(self.value(*b)));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], -&g);
                    }
                }
                Op::AddRow(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], g.clone());
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], &g * self.value(*b));
                    }
                    if needs(b) {
                        add_into(&mut grads[b.0], &g * self.value(*a));
                    }
                }
                Op::Scale(a, k) => {
                    if needs(a) {
                        add_into(&mut grads[a.0], &g * *k);
                    }
                }
                Op::DivScalar(a, sv) => {
                    let d = self.scalar(*sv);
                    if needs(a) {
                        add_into(&mut grads[a.0], &g / d);
                    }
                    if needs(sv) {
                        let num = (&g * self.value(*a)).sum();
                        add_into(&mut grads[sv.0], Array2::from_elem((1, 1), -num / (d * d)));
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let local = x.mapv(|x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
                    });
                    add_into(&mut grads[a.0], &g * &local);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    if needs(gamma) {
                        add_into(
                            &mut grads[gamma.0],
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if needs(beta) {
                        add_into(&mut grads[beta.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if needs(x) {
                        let n = xhat.ncols() as f64;
                        let dxhat = &g * gam;
                        let mut dx = Array2::<f64>::zeros(xhat.raw_dim());
                        for i in 0..xhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let sum_d = dr.sum();
                            let sum_dx = dr.dot(&xr);
                            let is = inv_std[i];
                            for j in 0..xhat.ncols() {
                                dx[[i, j]] = is / n * (n * dr[j] - sum_d - xr[j] * sum_dx);
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dh = qv.ncols() / heads;
                    let mut dq = Array2::<f64>::zeros(qv.raw_dim());
                    let mut dk = Array2::<f64>::zeros(kv.raw_dim());
                    let mut dv = Array2::<f64>::zeros(vv.raw_dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = g.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = row.sum();
                            for (d, &pp) in row.iter_mut().zip(prow) {
                                *d -= pp * dot;
                            }
                        }
                        ds.mapv_inplace(|x| x * scale);
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    if needs(q) {
                        add_into(&mut grads[q.0], dq);
                    }
                    if needs(k) {
                        add_into(&mut grads[k.0], dk);
                    }
                    if needs(v) {
                        add_into(&mut grads[v.0], dv);
                    }
                }
                Op::SelectRows(a, rows) => {
                    if needs(a) {
                        let mut da = Array2::<f64>::zeros(self.value(*a).raw_dim());
                        for (i, &r) in rows.iter().enumerate() {
                            let mut dst = da.row_mut(r);
                            dst += &g.row(i);
                        }
                        add_into(&mut grads[a.0], da);
                    }
                }
                Op::MeanRows(a) => {
                    if needs(a) {
                        let n = self.value(*a).nrows();
                        let row = g.row(0).mapv(|x| x / n as f64);
                        let da = Array2::from_shape_fn((n, row.len()), |(_, j)| row[j]);
                        add_into(&mut grads[a.0], da);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        if needs(p) {
                            add_into(&mut grads[p.0], g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let n = self.value(*p).ncols();
                        if needs(p) {
                            add_into(&mut grads[p.0], g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::NormalizeRows { x, norms } => {
                    let y = node.value.as_ref().expect("owned");
                    let mut dx = Array2::<f64>::zeros(y.raw_dim());
                    for i in 0..y.nrows() {
                        if norms[i] == 0.0 {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot = yr.dot(&gr);
                        for j in 0..y.ncols() {
                            dx[[i, j]] = (gr[j] - yr[j] * dot) / norms[i];
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut d = probs * up;
                    for (i, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            d[[i, *t]] -= up;
                        }
                    }
                    add_into(&mut grads[logits.0], d);
                }
                Op::LogSumExp { x, probs } => {
                    add_into(&mut grads[x.0], probs * g[[0, 0]]);
                }
                Op::SumAll(x) => {
                    let up = g[[0, 0]];
                    add_into(&mut grads[x.0], Array2::from_elem(self.value(*x).raw_dim(), up));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with(root, 1.0)
    }
}
