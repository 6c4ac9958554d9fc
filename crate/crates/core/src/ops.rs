//! Dense kernels with hand-written gradients over row-major matrices.
//!
//! All reductions run in a fixed order so results are bit-reproducible.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Floating point element type of parameters and activations.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub const RMS_EPS: f64 = 1e-6;

/// `a (n x k) @ b (k x m)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `dy (n x m) @ b^T` where `b` is `k x m`.
pub fn matmul_bt<T: Real>(dy: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let br = &b[p * m..(p + 1) * m];
            out[i * k + p] = dot(dyr, br);
        }
    }
    out
}

/// `grad (k x m) += a^T (k x n) @ dy (n x m)`.
pub fn accumulate_at_b<T: Real>(grad: &mut [T], a: &[T], dy: &[T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let dyr = &dy[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let gr = &mut grad[p * m..(p + 1) * m];
            for (g, &d) in gr.iter_mut().zip(dyr) {
                *g += av * d;
            }
        }
    }
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// RMSNorm with a learned gain, row by row. Returns the output and the
/// per-row inverse rms.
pub fn rmsnorm<T: Real>(x: &[T], gain: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(n);
    let eps = T::lit(RMS_EPS);
    let dt = T::from_usize(d).unwrap();
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let ms = dot(row, row) / dt;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        for j in 0..d {
            out[i * d + j] = row[j] * r * gain[j];
        }
    }
    (out, inv)
}

pub fn rmsnorm_backward<T: Real>(
    x: &[T],
    gain: &[T],
    inv: &[T],
    dy: &[T],
    d: usize,
    dgain: &mut [T],
) -> Vec<T> {
    let n = x.len() / d;
    let dt = T::from_usize(d).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let dyr = &dy[i * d..(i + 1) * d];
        let r = inv[i];
        let mut s = T::zero();
        for j in 0..d {
            dgain[j] += dyr[j] * row[j] * r;
            s += gain[j] * dyr[j] * row[j];
        }
        let coef = s * r * r * r / dt;
        for j in 0..d {
            dx[i * d + j] = gain[j] * dyr[j] * r - row[j] * coef;
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * u * (T::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let t = (c * (u + a * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * u * u)
}

/// Elementwise nonlinearity of feed-forward layers and experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    /// Identity; only for exact linear tests.
    Linear,
}

impl Activation {
    pub fn apply<T: Real>(self, u: T) -> T {
        match self {
            Activation::Gelu => gelu(u),
            Activation::Linear => u,
        }
    }

    pub fn grad<T: Real>(self, u: T) -> T {
        match self {
            Activation::Gelu => gelu_grad(u),
            Activation::Linear => T::one(),
        }
    }
}

/// Cached tensors of one multi-head attention call.
#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Per head, `nq x nk` softmax probabilities.
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
}

/// Scaled dot-product attention over heads laid out as column blocks.
/// `q` is `nq x d`, `k` and `v` are `nk x d`.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    causal: bool,
) -> AttnCache<T> {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut probs = vec![T::zero(); heads * nq * nk];
    let mut ctx = vec![T::zero(); nq * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let qi = &q[i * d + off..i * d + off + dh];
            let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let limit = if causal { (i + 1).min(nk) } else { nk };
            let mut max = T::neg_infinity();
            for j in 0..limit {
                let s = dot(qi, &k[j * d + off..j * d + off + dh]) * scale;
                p[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut sum = T::zero();
            for pj in p.iter_mut().take(limit) {
                *pj = (*pj - max).exp();
                sum += *pj;
            }
            for pj in p.iter_mut().take(limit) {
                *pj = *pj / sum;
            }
            let ci = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..limit {
                let pj = p[j];
                let vj = &v[j * d + off..j * d + off + dh];
                for (c, &vv) in ci.iter_mut().zip(vj) {
                    *c += pj * vv;
                }
            }
        }
    }
    AttnCache {
        q,
        k,
        v,
        probs,
        ctx,
    }
}

/// Returns `(dq, dk, dv)` given the gradient of the context.
pub fn attention_backward<T: Real>(
    cache: &AttnCache<T>,
    dctx: &[T],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = vec![T::zero(); nq * d];
    let mut dk = vec![T::zero(); nk * d];
    let mut dv = vec![T::zero(); nk * d];
    let mut dp = vec![T::zero(); nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let p = &cache.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut weighted = T::zero();
            for j in 0..nk {
                if p[j] == T::zero() {
                    dp[j] = T::zero();
                    continue;
                }
                let vj = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dot(dci, vj);
                weighted += dp[j] * p[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                for (g, &c) in dvj.iter_mut().zip(dci) {
                    *g += p[j] * c;
                }
            }
            let qi = &cache.q[i * d + off..i * d + off + dh];
            for j in 0..nk {
                if p[j] == T::zero() {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &cache.k[j * d + off..j * d + off + dh];
                let dqi = &mut dq[i * d + off..i * d + off + dh];
                for (g, &kv) in dqi.iter_mut().zip(kj) {
                    *g += ds * kv;
                }
                let dkj = &mut dk[j * d + off..j * d + off + dh];
                for (g, &qv) in dkj.iter_mut().zip(qi) {
                    *g += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Mean-free cross-entropy of one row: returns `(loss, dlogits)` with the
/// gradient scaled by `weight`.
pub fn cross_entropy<T: Real>(logits: &[T], target: usize, weight: T) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    let mut probs: Vec<T> = logits
        .iter()
        .map(|&l| {
            let e = (l - max).exp();
            sum += e;
            e
        })
        .collect();
    let loss = sum.ln() + max - logits[target];
    for p in probs.iter_mut() {
        *p = *p / sum * weight;
    }
    probs[target] -= weight;
    (loss, probs)
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                let mut m = x.to_vec();
                p[i] += h;
                m[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                "{a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn matmul_hand_computed() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(matmul_bt(&a, &b, 2, 2, 2), vec![17.0, 23.0, 39.0, 53.0]);
        let mut g = vec![0.0; 4];
        accumulate_at_b(&mut g, &a, &b, 2, 2, 2);
        assert_eq!(g, vec![26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn gelu_gradient() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let n = (gelu(u + 1e-6) - gelu(u - 1e-6)) / 2e-6;
            assert!((gelu_grad(u) - n).abs() < 1e-8);
        }
    }

    #[test]
    fn rmsnorm_gradient() {
        let x = [0.3, -1.2, 0.8, 2.0, 0.1, -0.4];
        let g = [1.1, 0.9, -0.5];
        let w = [0.7, -0.2, 0.5, 1.3, -0.9, 0.4];
        let f = |x: &[f64]| dot(&rmsnorm(x, &g, 3).0, &w);
        let (_, inv) = rmsnorm(&x, &g, 3);
        let mut dg = vec![0.0; 3];
        let dx = rmsnorm_backward(&x, &g, &inv, &w, 3, &mut dg);
        close(&dx, &numeric(f, &x), 1e-6);
        let fg = |g: &[f64]| dot(&rmsnorm(&x, g, 3).0, &w);
        close(&dg, &numeric(fg, &g), 1e-6);
    }

    #[test]
    fn attention_gradient() {
        let (nq, nk, d, heads) = (3, 3, 4, 2);
        let q: Vec<f64> = (0..nq * d)
            .map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0)
            .collect();
        let k: Vec<f64> = (0..nk * d)
            .map(|i| ((i * 5 % 13) as f64 - 6.0) / 7.0)
            .collect();
        let v: Vec<f64> = (0..nk * d)
            .map(|i| ((i * 3 % 7) as f64 - 3.0) / 4.0)
            .collect();
        let w: Vec<f64> = (0..nq * d)
            .map(|i| ((i * 2 % 5) as f64 - 2.0) / 3.0)
            .collect();
        for causal in [false, true] {
            let c = attention(q.clone(), k.clone(), v.clone(), nq, nk, d, heads, causal);
            let (dq, dk, dv) = attention_backward(&c, &w, nq, nk, d, heads);
            let fq = |x: &[f64]| {
                dot(
                    &attention(x.to_vec(), k.clone(), v.clone(), nq, nk, d, heads, causal).ctx,
                    &w,
                )
            };
            let fk = |x: &[f64]| {
                dot(
                    &attention(q.clone(), x.to_vec(), v.clone(), nq, nk, d, heads, causal).ctx,
                    &w,
                )
            };
            let fv = |x: &[f64]| {
                dot(
                    &attention(q.clone(), k.clone(), x.to_vec(), nq, nk, d, heads, causal).ctx,
                    &w,
                )
            };
            close(&dq, &numeric(fq, &q), 1e-6);
            close(&dk, &numeric(fk, &k), 1e-6);
            close(&dv, &numeric(fv, &v), 1e-6);
        }
    }

    #[test]
    fn causal_attention_ignores_future() {
        let d = 2;
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let k = vec![1.0, 1.0, 5.0, -5.0];
        let v = vec![1.0, 2.0, 30.0, 40.0];
        let c = attention(q, k, v, 2, 2, d, 1, true);
        assert_eq!(&c.ctx[..2], &[1.0, 2.0]);
        assert_eq!(c.probs[1], 0.0);
    }

    #[test]
    fn cross_entropy_gradient() {
        let logits = [0.5, -1.0, 2.0, 0.1];
        let (loss, g) = cross_entropy(&logits, 2, 1.0);
        let f = |l: &[f64]| cross_entropy(l, 2, 1.0).0;
        close(&g, &numeric(f, &logits), 1e-6);
        assert!(loss > 0.0);
    }
}
