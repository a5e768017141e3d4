//! Forward kernels and their vector-Jacobian products.

use std::sync::Arc;

use super::tape::AttentionGeometry;
use super::{axis_split, Scalar};
use crate::error::{Error, Result};

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Scale { x: usize, s: T },
    MulConst { x: usize, c: Arc<Vec<T>> },
    Square { x: usize },
    Gelu { x: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    GatherRows { table: usize, ids: Vec<usize> },
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    MaskFill { x: usize, mask: Vec<bool> },
    Sum { x: usize },
    WeightedSum { x: usize, weights: Vec<T> },
    MeanLast { x: usize },
    Kl { p: usize, q: usize, axis: usize, eps: T },
    CrossEntropy { logits: usize, targets: Vec<usize>, rows: Vec<usize>, probs: Vec<T> },
    Attention { q: usize, k: usize, v: usize, geometry: AttentionGeometry, probs: Vec<T> },
}

pub(crate) fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            c_row.iter_mut().zip(b_row).for_each(|(c, &b)| *c += a_ip * b);
        }
    }
    c
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

/// Applies `f` to every slice along the split axis, passing (outer, inner) offsets.
fn for_each_slice(outer: usize, inner: usize, mut f: impl FnMut(usize, usize)) {
    for o in 0..outer {
        for j in 0..inner {
            f(o, j);
        }
    }
}

pub(crate) fn softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for_each_slice(outer, inner, |o, j| {
        let idx = |i: usize| (o * n + i) * inner + j;
        let max = (0..n).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            // fully masked slice: leave zeros
            return;
        }
        let mut total = T::zero();
        for i in 0..n {
            let e = (x[idx(i)] - max).exp();
            y[idx(i)] = e;
            total += e;
        }
        for i in 0..n {
            y[idx(i)] = y[idx(i)] / total;
        }
    });
    y
}

pub(crate) fn log_softmax<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for_each_slice(outer, inner, |o, j| {
        let idx = |i: usize| (o * n + i) * inner + j;
        let max = (0..n).map(|i| x[idx(i)]).fold(T::neg_infinity(), T::max);
        let total: T = (0..n).map(|i| (x[idx(i)] - max).exp()).sum();
        let lse = max + total.ln();
        for i in 0..n {
            y[idx(i)] = x[idx(i)] - lse;
        }
    });
    y
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let inv_d = T::one() / T::lit(d as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain[c] + bias[c];
        }
    }
    (out, xhat, rstd)
}

pub(crate) fn check_stochastic<T: Scalar>(
    op: &'static str,
    x: &[T],
    outer: usize,
    n: usize,
    inner: usize,
) -> Result<()> {
    let mut bad = None;
    for_each_slice(outer, inner, |o, j| {
        if bad.is_some() {
            return;
        }
        let mut total = 0.0;
        for i in 0..n {
            let v = x[(o * n + i) * inner + j].as_f64();
            if v < 0.0 || !v.is_finite() {
                bad = Some(format!("entry {v} is not a probability"));
                return;
            }
            total += v;
        }
        if (total - 1.0).abs() > 1e-6 {
            bad = Some(format!("slice ({o}, {j}) sums to {total}, expected 1"));
        }
    });
    match bad {
        Some(detail) => Err(Error::domain(op, detail)),
        None => Ok(()),
    }
}

pub(crate) fn kl<T: Scalar>(p: &[T], q: &[T], outer: usize, n: usize, inner: usize, eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); outer * inner];
    for_each_slice(outer, inner, |o, j| {
        let mut acc = T::zero();
        for i in 0..n {
            let idx = (o * n + i) * inner + j;
            let (pc, qc) = (p[idx].max(eps), q[idx].max(eps));
            acc += pc * (pc.ln() - qc.ln());
        }
        out[o * inner + j] = acc;
    });
    out
}

pub(crate) fn cross_entropy<T: Scalar>(logits: &[T], v: usize, targets: &[usize], rows: &[usize]) -> (T, Vec<T>) {
    let mut probs = Vec::with_capacity(rows.len() * v);
    let mut total = T::zero();
    for &r in rows {
        let row = &logits[r * v..(r + 1) * v];
        let p = softmax(row, 1, v, 1);
        let logp = log_softmax(row, 1, v, 1);
        total += -logp[targets[r]];
        probs.extend(p);
    }
    (total / T::lit(rows.len() as f64), probs)
}

pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    geo: AttentionGeometry,
    d: usize,
    key_pad: &[bool],
) -> (Vec<T>, Vec<T>) {
    let AttentionGeometry { batch, len, heads } = geo;
    let dh = d / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = vec![T::zero(); batch * len * d];
    let mut probs = vec![T::zero(); batch * heads * len * len];
    let mut scores = vec![T::zero(); len];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..len {
                let qi = &q[(b * len + i) * d + col..][..dh];
                for j in 0..len {
                    scores[j] = if key_pad[b * len + j] {
                        T::neg_infinity()
                    } else {
                        dot(qi, &k[(b * len + j) * d + col..][..dh]) * scale
                    };
                }
                let p = softmax(&scores, 1, len, 1);
                let o = &mut out[(b * len + i) * d + col..][..dh];
                for (j, &pj) in p.iter().enumerate() {
                    if pj == T::zero() {
                        continue;
                    }
                    let vj = &v[(b * len + j) * d + col..][..dh];
                    o.iter_mut().zip(vj).for_each(|(o, &x)| *o += pj * x);
                }
                probs[((b * heads + h) * len + i) * len..][..len].copy_from_slice(&p);
            }
        }
    }
    (out, probs)
}

/// Dispatches the vector-Jacobian product of `op`. `input(i)` yields the
/// shape and value of node `i`; `sink(i, g)` accumulates `g` into node `i`.
pub(crate) fn backward<'a, T: Scalar>(
    op: &Op<T>,
    out_shape: &[usize],
    out: &[T],
    g: &[T],
    input: impl Fn(usize) -> (&'a [usize], &'a [T]),
    sink: &mut impl FnMut(usize, Vec<T>),
) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (sa, av) = input(*a);
            let (_, bv) = input(*b);
            let (m, k, n) = (sa[0], sa[1], out_shape[1]);
            // dA = dC · Bᵀ
            sink(*a, matmul_nt(g, bv, m, n, k));
            // dB = Aᵀ · dC
            let mut db = vec![T::zero(); k * n];
            for i in 0..m {
                let g_row = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let a_ip = av[i * k + p];
                    db[p * n..(p + 1) * n]
                        .iter_mut()
                        .zip(g_row)
                        .for_each(|(d, &gv)| *d += a_ip * gv);
                }
            }
            sink(*b, db);
        }
        Op::MatMulNt { a, b } => {
            let (sa, av) = input(*a);
            let (sb, bv) = input(*b);
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            // dA = dC · B, dB = dCᵀ · A
            sink(*a, matmul(g, bv, m, n, k));
            let mut db = vec![T::zero(); n * k];
            for i in 0..m {
                let a_row = &av[i * k..(i + 1) * k];
                for j in 0..n {
                    let gij = g[i * n + j];
                    if gij == T::zero() {
                        continue;
                    }
                    db[j * k..(j + 1) * k]
                        .iter_mut()
                        .zip(a_row)
                        .for_each(|(d, &x)| *d += gij * x);
                }
            }
            sink(*b, db);
        }
        Op::Add { a, b } => {
            sink(*a, g.to_vec());
            sink(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            sink(*a, g.to_vec());
            sink(*b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (_, av) = input(*a);
            let (_, bv) = input(*b);
            sink(*a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect());
            sink(*b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect());
        }
        Op::AddBias { x, bias } => {
            let n = *out_shape.last().expect("rank >= 1");
            let mut db = vec![T::zero(); n];
            for row in g.chunks(n) {
                db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
            }
            sink(*x, g.to_vec());
            sink(*bias, db);
        }
        Op::Scale { x, s } => sink(*x, g.iter().map(|&v| v * *s).collect()),
        Op::MulConst { x, c } => sink(*x, g.iter().zip(c.iter()).map(|(&v, &m)| v * m).collect()),
        Op::Square { x } => {
            let (_, xv) = input(*x);
            let two = T::lit(2.0);
            sink(*x, g.iter().zip(xv).map(|(&v, &x)| two * x * v).collect());
        }
        Op::Gelu { x } => {
            let (_, xv) = input(*x);
            sink(*x, g.iter().zip(xv).map(|(&v, &x)| v * gelu_grad(x)).collect());
        }
        Op::Softmax { x, axis } => {
            let (outer, n, inner) = axis_split(out_shape, *axis).expect("validated axis");
            let mut dx = vec![T::zero(); g.len()];
            for_each_slice(outer, inner, |o, j| {
                let idx = |i: usize| (o * n + i) * inner + j;
                let inner_prod: T = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                for i in 0..n {
                    dx[idx(i)] = out[idx(i)] * (g[idx(i)] - inner_prod);
                }
            });
            sink(*x, dx);
        }
        Op::LogSoftmax { x, axis } => {
            let (outer, n, inner) = axis_split(out_shape, *axis).expect("validated axis");
            let mut dx = vec![T::zero(); g.len()];
            for_each_slice(outer, inner, |o, j| {
                let idx = |i: usize| (o * n + i) * inner + j;
                let total: T = (0..n).map(|i| g[idx(i)]).sum();
                for i in 0..n {
                    dx[idx(i)] = g[idx(i)] - out[idx(i)].exp() * total;
                }
            });
            sink(*x, dx);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (_, gv) = input(*gain);
            let d = gv.len();
            let inv_d = T::one() / T::lit(d as f64);
            let mut dx = vec![T::zero(); g.len()];
            let mut dgain = vec![T::zero(); d];
            let mut dbias = vec![T::zero(); d];
            for (r, &rs) in rstd.iter().enumerate() {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for c in 0..d {
                    let dh = gr[c] * gv[c];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[c];
                    dgain[c] += gr[c] * hr[c];
                    dbias[c] += gr[c];
                }
                mean_dh *= inv_d;
                mean_dh_h *= inv_d;
                for c in 0..d {
                    let dh = gr[c] * gv[c];
                    dx[r * d + c] = rs * (dh - mean_dh - hr[c] * mean_dh_h);
                }
            }
            sink(*x, dx);
            sink(*gain, dgain);
            sink(*bias, dbias);
        }
        Op::GatherRows { table, ids } => {
            let (st, _) = input(*table);
            let d = st[1];
            let mut dt = vec![T::zero(); st[0] * d];
            for (r, &id) in ids.iter().enumerate() {
                dt[id * d..(id + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(t, &v)| *t += v);
            }
            sink(*table, dt);
        }
        Op::SliceRows { x, start } => {
            let (sx, _) = input(*x);
            let d = sx[1];
            let mut dx = vec![T::zero(); sx[0] * d];
            dx[start * d..start * d + g.len()].copy_from_slice(g);
            sink(*x, dx);
        }
        Op::SliceCols { x, start } => {
            let (sx, _) = input(*x);
            let (rows, cols, width) = (sx[0], sx[1], out_shape[1]);
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
            }
            sink(*x, dx);
        }
        Op::MaskFill { x, mask } => sink(
            *x,
            g.iter()
                .zip(mask)
                .map(|(&v, &m)| if m { T::zero() } else { v })
                .collect(),
        ),
        Op::Sum { x } => {
            let (sx, _) = input(*x);
            let numel = sx.iter().product();
            sink(*x, vec![g[0]; numel]);
        }
        Op::WeightedSum { x, weights } => sink(*x, weights.iter().map(|&w| w * g[0]).collect()),
        Op::MeanLast { x } => {
            let (sx, _) = input(*x);
            let d = *sx.last().expect("rank >= 1");
            let inv = T::one() / T::lit(d as f64);
            sink(*x, g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, d)).collect());
        }
        Op::Kl { p, q, axis, eps } => {
            let (sp, pv) = input(*p);
            let (_, qv) = input(*q);
            let (outer, n, inner) = axis_split(sp, *axis).expect("validated axis");
            let mut dp = vec![T::zero(); pv.len()];
            let mut dq = vec![T::zero(); qv.len()];
            for_each_slice(outer, inner, |o, j| {
                let gs = g[o * inner + j];
                for i in 0..n {
                    let idx = (o * n + i) * inner + j;
                    let (pc, qc) = (pv[idx].max(*eps), qv[idx].max(*eps));
                    if pv[idx] > *eps {
                        dp[idx] = gs * (pc.ln() - qc.ln() + T::one());
                    }
                    if qv[idx] > *eps {
                        dq[idx] = -gs * pc / qc;
                    }
                }
            });
            sink(*p, dp);
            sink(*q, dq);
        }
        Op::CrossEntropy {
            logits,
            targets,
            rows,
            probs,
        } => {
            let (sl, _) = input(*logits);
            let v = sl[1];
            let coef = g[0] / T::lit(rows.len() as f64);
            let mut dl = vec![T::zero(); sl[0] * v];
            for (k, &r) in rows.iter().enumerate() {
                let dst = &mut dl[r * v..(r + 1) * v];
                dst.iter_mut()
                    .zip(&probs[k * v..(k + 1) * v])
                    .for_each(|(d, &p)| *d = coef * p);
                dst[targets[r]] -= coef;
            }
            sink(*logits, dl);
        }
        Op::Attention {
            q,
            k,
            v,
            geometry,
            probs,
        } => {
            let (sq, qv) = input(*q);
            let (_, kv) = input(*k);
            let (_, vv) = input(*v);
            let d = sq[1];
            let AttentionGeometry { batch, len, heads } = *geometry;
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = vec![T::zero(); qv.len()];
            let mut dk = vec![T::zero(); kv.len()];
            let mut dv = vec![T::zero(); vv.len()];
            let mut dp = vec![T::zero(); len];
            for b in 0..batch {
                for h in 0..heads {
                    let col = h * dh;
                    for i in 0..len {
                        let row = (b * len + i) * d + col;
                        let p = &probs[((b * heads + h) * len + i) * len..][..len];
                        let go = &g[row..row + dh];
                        // dP = dO · Vᵀ ; dV += Pᵀ · dO
                        for j in 0..len {
                            let vrow = (b * len + j) * d + col;
                            dp[j] = dot(go, &vv[vrow..vrow + dh]);
                            if p[j] != T::zero() {
                                dv[vrow..vrow + dh]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(dv, &x)| *dv += p[j] * x);
                            }
                        }
                        let inner_prod: T = (0..len).map(|j| dp[j] * p[j]).sum();
                        for j in 0..len {
                            let ds = p[j] * (dp[j] - inner_prod) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let krow = (b * len + j) * d + col;
                            for c in 0..dh {
                                dq[row + c] += ds * kv[krow + c];
                                dk[krow + c] += ds * qv[row + c];
                            }
                        }
                    }
                }
            }
            sink(*q, dq);
            sink(*k, dk);
            sink(*v, dv);
        }
    }
}
