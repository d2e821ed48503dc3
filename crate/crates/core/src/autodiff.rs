//! Minimal reverse-mode autodiff over row-major 2-D `f32` tensors.
//!
//! A [`Graph`] is a tape rebuilt for every forward pass. It carries exactly the
//! ops the desk-scale transformer needs: gather, matmul, bias add, layer norm,
//! GELU, masked multi-head attention, row pooling, dropout, and a masked
//! binary cross-entropy on logits.

use half::f16;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f32) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a.data[i * k + p];
            let b_row = &b.data[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(n, m, out)
}

/// `a (n x m) * b^T` where `b` is `(k x m)`.
fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let (n, k) = (a.rows, b.rows);
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        let ar = a.row(i);
        for j in 0..k {
            out[i * k + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_vec(n, k, out)
}

/// `a^T * b` where `a` is `(n x k)` and `b` is `(n x m)`.
fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; k * m];
    for i in 0..n {
        let b_row = b.row(i);
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * m..(p + 1) * m];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_vec(k, m, out)
}

fn acc(v: Var, t: Tensor, grads: &mut [Option<Tensor>]) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Fp32,
    /// Activations and gradients rounded to IEEE half after every op.
    Fp16,
}

/// Static loss scale used in fp16 mode; gradients are unscaled before return.
pub const FP16_LOSS_SCALE: f32 = 1024.0;

fn round_half(t: &mut Tensor) {
    for v in &mut t.data {
        *v = f16::from_f32(*v).to_f32();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Geometry of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    Gather { table: Var, ids: Vec<u32> },
    Add(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, rstd: Vec<f32> },
    Gelu(Var),
    Attention { qkv: Var, shape: AttentionShape, probs: Vec<f32> },
    RowCombine { x: Var, picks: Vec<Vec<(usize, f32)>> },
    Scale { x: Var, factors: Vec<f32> },
    Bce { logits: Var, grad: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

const LN_EPS: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
        }
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Var {
        if self.precision == Precision::Fp16 {
            round_half(&mut value);
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// Leaf bound to parameter slot `index`; its gradient is returned by [`Graph::backward`].
    pub fn param(&mut self, index: usize, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Param(index))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let d = t.cols;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(t.row(id as usize));
        }
        let value = Tensor::from_vec(ids.len(), d, out);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, value.cols), "bias shape");
        for row in value.data.chunks_mut(b.cols) {
            for (x, y) in row.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = matmul(self.value(a), self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `x * w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut xhat = Tensor::zeros(n, d);
        let mut out = Tensor::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat.data[r * d + c] = h;
                out.data[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for v in &mut value.data {
            let u = GELU_C * (*v + 0.044715 * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        self.push(value, Op::Gelu(x))
    }

    /// Masked multi-head self-attention. `qkv` is `(batch*seq_len) x 3d`
    /// holding queries, keys, values side by side; output is `(batch*seq_len) x d`.
    /// Keys with mask 0 are never attended to.
    pub fn attention(&mut self, qkv: Var, mask: &[u8], shape: AttentionShape) -> Var {
        let AttentionShape {
            batch,
            seq_len: t,
            heads,
            causal,
        } = shape;
        let x = self.value(qkv);
        let d = x.cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut out = Tensor::zeros(batch * t, d);
        let mut probs = vec![0.0f32; batch * heads * t * t];
        for b in 0..batch {
            let m = &mask[b * t..(b + 1) * t];
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                for i in 0..t {
                    let q = &x.row(b * t + i)[qo..qo + dh];
                    let p = &mut probs[((b * heads + h) * t + i) * t..][..t];
                    let mut max = f32::NEG_INFINITY;
                    for j in 0..t {
                        if m[j] == 0 || (causal && j > i) {
                            continue;
                        }
                        let k = &x.row(b * t + j)[ko..ko + dh];
                        let s = q.iter().zip(k).map(|(a, c)| a * c).sum::<f32>() * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    if max == f32::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..t {
                        if m[j] == 0 || (causal && j > i) {
                            p[j] = 0.0;
                            continue;
                        }
                        p[j] = (p[j] - max).exp();
                        z += p[j];
                    }
                    let o = &mut out.data[(b * t + i) * d + qo..][..dh];
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        p[j] /= z;
                        let v = &x.row(b * t + j)[vo..vo + dh];
                        for (oc, vc) in o.iter_mut().zip(v) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                qkv,
                shape: AttentionShape {
                    batch,
                    seq_len: t,
                    heads,
                    causal,
                },
                probs,
            },
        )
    }

    /// Output row `r` is `sum(w * x[row])` over `picks[r]`.
    pub fn row_combine(&mut self, x: Var, picks: Vec<Vec<(usize, f32)>>) -> Var {
        let xv = self.value(x);
        let d = xv.cols;
        let mut out = Tensor::zeros(picks.len(), d);
        for (r, pick) in picks.iter().enumerate() {
            let o = &mut out.data[r * d..(r + 1) * d];
            for &(src, w) in pick {
                for (a, b) in o.iter_mut().zip(xv.row(src)) {
                    *a += w * b;
                }
            }
        }
        self.push(out, Op::RowCombine { x, picks })
    }

    /// Elementwise multiply by constant factors (dropout masks).
    pub fn scale(&mut self, x: Var, factors: Vec<f32>) -> Var {
        let mut value = self.value(x).clone();
        assert_eq!(value.data.len(), factors.len());
        for (v, f) in value.data.iter_mut().zip(&factors) {
            *v *= f;
        }
        self.push(value, Op::Scale { x, factors })
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets`, counting
    /// only cells with weight 1. Computed in f64; returns the loss node and its
    /// f64 value. An all-zero weight matrix yields loss 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor, weights: &Tensor) -> (Var, f64) {
        let z = self.value(logits);
        assert_eq!(z.shape(), targets.shape());
        assert_eq!(z.shape(), weights.shape());
        let count: f64 = weights.data.iter().map(|&w| w as f64).sum();
        let mut loss = 0.0f64;
        let mut grad = Tensor::zeros(z.rows, z.cols);
        if count > 0.0 {
            for i in 0..z.data.len() {
                let w = weights.data[i] as f64;
                if w == 0.0 {
                    continue;
                }
                let x = z.data[i] as f64;
                let y = targets.data[i] as f64;
                // softplus(x) - y*x, stable for large |x|
                let softplus = x.max(0.0) + (-x.abs()).exp().ln_1p();
                loss += w * (softplus - y * x);
                let sig = 1.0 / (1.0 + (-x).exp());
                grad.data[i] = (w * (sig - y) / count) as f32;
            }
            loss /= count;
        }
        let var = self.push(Tensor::from_vec(1, 1, vec![loss as f32]), Op::Bce { logits, grad });
        (var, loss)
    }

    /// Backpropagate from the scalar `loss`; returns `(param index, gradient)`
    /// for every parameter leaf reached. In fp16 mode gradients flow scaled by
    /// [`FP16_LOSS_SCALE`] and are unscaled here.
    pub fn backward(&self, loss: Var) -> Vec<(usize, Tensor)> {
        let scale = match self.precision {
            Precision::Fp32 => 1.0,
            Precision::Fp16 => FP16_LOSS_SCALE,
        };
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, scale));
        let mut params = Vec::new();

        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            if self.precision == Precision::Fp16 {
                round_half(&mut g);
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(p) => {
                    let mut g = g;
                    if scale != 1.0 {
                        for v in &mut g.data {
                            *v /= scale;
                        }
                    }
                    params.push((*p, g));
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows, tv.cols);
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut dt.data[id as usize * tv.cols..(id as usize + 1) * tv.cols];
                        for (a, b) in dst.iter_mut().zip(g.row(r)) {
                            *a += b;
                        }
                    }
                    acc(*table, dt, &mut grads);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (x, y) in db.data.iter_mut().zip(row) {
                            *x += y;
                        }
                    }
                    acc(*bias, db, &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MatMul(a, b) => {
                    let da = matmul_bt(&g, self.value(*b));
                    let db = matmul_at(self.value(*a), &g);
                    acc(*a, da, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (n, d) = xhat.shape();
                    let gv = &self.value(*gamma).data;
                    let mut dx = Tensor::zeros(n, d);
                    let mut dg = Tensor::zeros(1, d);
                    let mut dbeta = Tensor::zeros(1, d);
                    for r in 0..n {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                            dg.data[c] += gr[c] * hr[c];
                            dbeta.data[c] += gr[c];
                        }
                        mean_dh /= d as f32;
                        mean_dh_h /= d as f32;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dx.data[r * d + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    acc(*x, dx, &mut grads);
                    acc(*gamma, dg, &mut grads);
                    acc(*beta, dbeta, &mut grads);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Attention {
                    qkv,
                    shape,
                    probs,
                } => {
                    let x = self.value(*qkv);
                    let (batch, t, heads) = (shape.batch, shape.seq_len, shape.heads);
                    let d = x.cols / 3;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f32).sqrt();
                    let mut dx = Tensor::zeros(x.rows, x.cols);
                    let mut dp = vec![0.0f32; t];
                    for b in 0..batch {
                        for h in 0..heads {
                            let qo = h * dh;
                            let ko = d + h * dh;
                            let vo = 2 * d + h * dh;
                            for i in 0..t {
                                let p = &probs[((b * heads + h) * t + i) * t..][..t];
                                let go = &g.row(b * t + i)[qo..qo + dh];
                                let mut dot = 0.0;
                                for j in 0..t {
                                    if p[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let v = &x.row(b * t + j)[vo..vo + dh];
                                    dp[j] = go.iter().zip(v).map(|(a, c)| a * c).sum();
                                    dot += p[j] * dp[j];
                                    let dv = &mut dx.data[(b * t + j) * x.cols + vo..][..dh];
                                    for (a, c) in dv.iter_mut().zip(go) {
                                        *a += p[j] * c;
                                    }
                                }
                                for j in 0..t {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    for c in 0..dh {
                                        let qc = x.data[(b * t + i) * x.cols + qo + c];
                                        let kc = x.data[(b * t + j) * x.cols + ko + c];
                                        dx.data[(b * t + i) * x.cols + qo + c] += ds * kc;
                                        dx.data[(b * t + j) * x.cols + ko + c] += ds * qc;
                                    }
                                }
                            }
                        }
                    }
                    acc(*qkv, dx, &mut grads);
                }
                Op::RowCombine { x, picks } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for (r, pick) in picks.iter().enumerate() {
                        for &(src, w) in pick {
                            let dst = &mut dx.data[src * xv.cols..(src + 1) * xv.cols];
                            for (a, b) in dst.iter_mut().zip(g.row(r)) {
                                *a += w * b;
                            }
                        }
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Scale { x, factors } => {
                    let mut dx = g;
                    for (d, f) in dx.data.iter_mut().zip(factors) {
                        *d *= f;
                    }
                    acc(*x, dx, &mut grads);
                }
                Op::Bce { logits, grad } => {
                    let upstream = g.data[0];
                    let mut dz = grad.clone();
                    for v in &mut dz.data {
                        *v *= upstream;
                    }
                    acc(*logits, dz, &mut grads);
                }
            }
        }
        params.sort_by_key(|(p, _)| *p);
        params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, seed: u32) -> Tensor {
        // Deterministic pseudo-random fill in [-1, 1].
        let data = (0..rows * cols)
            .map(|i| {
                let x = ((i as u32).wrapping_mul(2654435761).wrapping_add(seed.wrapping_mul(40503))) % 2001;
                x as f32 / 1000.0 - 1.0
            })
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Central-difference check of every parameter coordinate of `build`.
    fn check(params: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let run = |ps: &[Tensor]| {
            let mut g = Graph::new(Precision::Fp32);
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| g.param(i, p)).collect();
            let out = build(&mut g, &vars);
            (g, out)
        };
        let (g, out) = run(&params);
        let analytic = g.backward(out);
        for (pi, grad) in analytic {
            for c in 0..params[pi].len() {
                let eps = 1e-2f32;
                let mut plus = params.clone();
                plus[pi].data[c] += eps;
                let mut minus = params.clone();
                minus[pi].data[c] -= eps;
                let (gp, op) = run(&plus);
                let (gm, om) = run(&minus);
                let fd = (gp.value(op).data[0] as f64 - gm.value(om).data[0] as f64) / (2.0 * eps as f64);
                let a = grad.data[c] as f64;
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-2);
                assert!(err < tol, "param {pi}[{c}]: analytic {a} vs fd {fd}");
            }
        }
    }

    /// Reduce any node to a scalar through a fixed-target BCE so every op is exercised.
    fn reduce(g: &mut Graph, x: Var) -> Var {
        let (r, c) = g.value(x).shape();
        let targets = Tensor::from_vec(r, c, (0..r * c).map(|i| (i % 2) as f32).collect());
        g.bce_with_logits(x, &targets, &Tensor::filled(r, c, 1.0)).0
    }

    #[test]
    fn matmul_and_bias_gradients() {
        check(vec![t(3, 4, 1), t(4, 2, 2), t(1, 2, 3)], |g, v| {
            let y = g.linear(v[0], v[1], v[2]);
            reduce(g, y)
        }, 2e-2);
    }

    #[test]
    fn layer_norm_and_gelu_gradients() {
        check(vec![t(3, 5, 4), t(1, 5, 5), t(1, 5, 6)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            let y = g.gelu(y);
            reduce(g, y)
        }, 2e-2);
    }

    #[test]
    fn attention_gradients() {
        for causal in [false, true] {
            check(vec![t(6, 12, 7)], |g, v| {
                let shape = AttentionShape { batch: 2, seq_len: 3, heads: 2, causal };
                let y = g.attention(v[0], &[1, 1, 0, 1, 1, 1], shape);
                reduce(g, y)
            }, 2e-2);
        }
    }

    #[test]
    fn gather_and_pool_gradients() {
        check(vec![t(5, 3, 8)], |g, v| {
            let e = g.gather(v[0], &[4, 1, 1, 0]);
            let p = g.row_combine(e, vec![vec![(0, 1.0)], vec![(1, 0.5), (2, 0.5)], vec![(3, 1.0)]]);
            let s = g.scale(p, vec![1.1; 9]);
            reduce(g, s)
        }, 2e-2);
    }

    #[test]
    fn bce_of_zero_logits_is_ln2() {
        let mut g = Graph::new(Precision::Fp32);
        let z = g.constant(Tensor::zeros(4, 3));
        let targets = Tensor::from_vec(4, 3, vec![1., 0., 1., 0., 0., 1., 1., 1., 0., 0., 0., 0.]);
        let (_, loss) = g.bce_with_logits(z, &targets, &Tensor::filled(4, 3, 1.0));
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn masked_attention_matches_unpadded() {
        let full = t(4, 6, 9);
        let mut g = Graph::new(Precision::Fp32);
        let a = g.constant(full.clone());
        let shape = AttentionShape { batch: 1, seq_len: 4, heads: 1, causal: false };
        let out = g.attention(a, &[1, 1, 1, 0], shape);
        let padded = g.value(out).clone();

        let mut g2 = Graph::new(Precision::Fp32);
        let b = g2.constant(Tensor::from_vec(3, 6, full.data[..18].to_vec()));
        let shape = AttentionShape { batch: 1, seq_len: 3, heads: 1, causal: false };
        let out2 = g2.attention(b, &[1, 1, 1], shape);
        assert_eq!(&padded.data[..6], &g2.value(out2).data[..]);
    }
}
