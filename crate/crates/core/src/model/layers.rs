//! Layer primitives with hand-written backward passes.
//!
//! Activations are row-major `(positions, features)` matrices; linear weights
//! are stored `(fan_in, fan_out)` so a layer computes `x · W + b`.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{lit, Float};

pub const NORM_EPS: f64 = 1e-5;

pub fn linear<T: Float>(x: &ArrayView2<T>, w: &Array2<T>, b: &Array2<T>) -> Array2<T> {
    let mut y = x.dot(w);
    y += b;
    y
}

pub struct LinearGrads<T> {
    pub dx: Option<Array2<T>>,
    pub dw: Option<Array2<T>>,
    pub db: Option<Array2<T>>,
}

pub fn linear_backward<T: Float>(
    x: &ArrayView2<T>,
    w: &Array2<T>,
    dy: &Array2<T>,
    want_dx: bool,
    want_params: bool,
) -> LinearGrads<T> {
    LinearGrads {
        dx: want_dx.then(|| dy.dot(&w.t())),
        dw: want_params.then(|| x.t().dot(dy)),
        db: want_params.then(|| dy.sum_axis(Axis(0)).insert_axis(Axis(0))),
    }
}

pub struct NormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layer_norm<T: Float>(x: &Array2<T>, gamma: &Array2<T>, beta: &Array2<T>) -> (Array2<T>, NormCache<T>) {
    let d = lit::<T>(x.ncols() as f64);
    let eps = lit::<T>(NORM_EPS);
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).fold(T::zero(), |a, b| a + b) / d;
        *r = T::one() / (var + eps).sqrt();
        let k = *r;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * gamma + beta;
    (y, NormCache { xhat, rstd })
}

pub struct NormGrads<T> {
    pub dx: Array2<T>,
    pub dgamma: Array2<T>,
    pub dbeta: Array2<T>,
}

pub fn layer_norm_backward<T: Float>(dy: &Array2<T>, cache: &NormCache<T>, gamma: &Array2<T>) -> NormGrads<T> {
    let d = lit::<T>(dy.ncols() as f64);
    let dgamma = (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &r) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&g)
            .and(&xh)
            .for_each(|o, &gi, &xi| *o = r * (gi - mean_g - xi * mean_gx));
    }
    NormGrads { dx, dgamma, dbeta }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Float>(x: &Array2<T>) -> Array2<T> {
    let (c, a, half) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5));
    x.mapv(|v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
}

pub fn gelu_backward<T: Float>(x: &Array2<T>, dy: &Array2<T>) -> Array2<T> {
    let (c, a, half, three) = (lit::<T>(GELU_C), lit::<T>(GELU_A), lit::<T>(0.5), lit::<T>(3.0));
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let t = (c * (v + a * v * v * v)).tanh();
        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
        *g = *g * (half * (T::one() + t) + half * v * dt);
    });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Float>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Multi-head scaled dot-product attention over already-projected q, k, v.
/// Returns the concatenated head outputs and per-head probabilities.
pub fn attention<T: Float>(q: &Array2<T>, k: &Array2<T>, v: &Array2<T>, heads: usize, causal: bool) -> (Array2<T>, Vec<Array2<T>>) {
    let (n, d) = q.dim();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut out = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores.mapv_inplace(|x| x * scale);
        if causal {
            for i in 0..n {
                for j in i + 1..n {
                    scores[[i, j]] = T::neg_infinity();
                }
            }
        }
        softmax_rows(&mut scores);
        out.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    (out, probs)
}

pub fn attention_backward<T: Float>(
    dout: &Array2<T>,
    q: &Array2<T>,
    k: &Array2<T>,
    v: &Array2<T>,
    probs: &[Array2<T>],
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (_, d) = q.dim();
    let heads = probs.len();
    let dh = d / heads;
    let scale = lit::<T>(1.0 / (dh as f64).sqrt());
    let mut dq = Array2::zeros(q.raw_dim());
    let mut dk = Array2::zeros(k.raw_dim());
    let mut dv = Array2::zeros(v.raw_dim());
    for (h, p) in probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout_h = dout.slice(cols);
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let dp = dout_h.dot(&v.slice(cols).t());
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        let mut ds = &dp * p;
        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
            let sum = row.sum();
            Zip::from(&mut row).and(&prow).for_each(|x, &pi| *x = *x - pi * sum);
        }
        ds.mapv_inplace(|x| x * scale);
        dq.slice_mut(cols).assign(&ds.dot(&k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&q.slice(cols)));
    }
    (dq, dk, dv)
}
