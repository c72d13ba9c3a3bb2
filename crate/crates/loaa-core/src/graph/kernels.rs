//! Raw forward/backward kernels on flat slices. All loops run in a fixed
//! order so repeated passes produce bit-identical results.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Element;

pub(crate) fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (t, &av) in a_row.iter().enumerate() {
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose<T: Copy>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for j in 0..cols {
        for i in 0..rows {
            out.push(x[i * cols + j]);
        }
    }
    out
}

#[inline]
pub(crate) fn gelu_value<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    half * x * (T::one() + (x * inv_sqrt2).erf())
}

/// d/dx gelu(x) = Phi(x) + x * phi(x).
#[inline]
pub(crate) fn gelu_derivative<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(core::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * core::f64::consts::PI).sqrt());
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
    cdf + x * pdf
}

/// Softmax over the middle extent of an `[outer, len, inner]` view.
pub(crate) fn softmax_lanes<T: Element>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut m = x[at(0)];
            for j in 1..len {
                let v = x[at(j)];
                if v > m {
                    m = v;
                }
            }
            let mut denom = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                denom = denom + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / denom;
            }
        }
    }
    y
}

/// VJP of softmax given its output: dx = y * (dy - <dy, y>) per lane.
pub(crate) fn softmax_backward_lanes<T: Element>(
    y: &[T],
    dy: &[T],
    outer: usize,
    len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..len {
                dot = dot + dy[at(j)] * y[at(j)];
            }
            for j in 0..len {
                dx[at(j)] = y[at(j)] * (dy[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) struct RowStats<T> {
    pub mean: T,
    pub rstd: T,
}

pub(crate) fn row_stats<T: Element>(row: &[T], eps: T) -> RowStats<T> {
    let n = T::from_f64(row.len() as f64);
    let mut sum = T::zero();
    for &v in row {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = T::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    RowStats { mean, rstd: T::one() / (var + eps).sqrt() }
}

pub(crate) fn layer_norm_forward<T: Element>(
    x: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let stats = row_stats(row, eps);
        let out = &mut y[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - stats.mean) * stats.rstd;
            out[j] = xh * gamma[j] + beta[j];
        }
    }
    y
}

pub(crate) struct LayerNormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn layer_norm_backward<T: Element>(
    x: &[T],
    dy: &[T],
    rows: usize,
    d: usize,
    gamma: &[T],
    eps: T,
) -> LayerNormGrads<T> {
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let stats = row_stats(row, eps);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            let xh = (row[j] - stats.mean) * stats.rstd;
            let dxh = dyr[j] * gamma[j];
            dgamma[j] = dgamma[j] + dyr[j] * xh;
            dbeta[j] = dbeta[j] + dyr[j];
            mean_dxhat = mean_dxhat + dxh;
            mean_dxhat_xhat = mean_dxhat_xhat + dxh * xh;
        }
        mean_dxhat = mean_dxhat * inv_d;
        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xh = (row[j] - stats.mean) * stats.rstd;
            let dxh = dyr[j] * gamma[j];
            out[j] = stats.rstd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
        }
    }
    LayerNormGrads { dx, dgamma, dbeta }
}

/// Zero-padded cross-correlation over an `[f, t, c_in]` grid with an
/// `[k_f, k_t, c_in, c_out]` kernel; output keeps the grid extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_grid_forward<T: Element>(
    x: &[T],
    f_ext: usize,
    t_ext: usize,
    c_in: usize,
    w: &[T],
    k_f: usize,
    k_t: usize,
    c_out: usize,
    bias: &[T],
) -> Vec<T> {
    let pad_f = (k_f - 1) / 2;
    let pad_t = (k_t - 1) / 2;
    let mut y = vec![T::zero(); f_ext * t_ext * c_out];
    for f in 0..f_ext {
        for t in 0..t_ext {
            let out = &mut y[(f * t_ext + t) * c_out..(f * t_ext + t + 1) * c_out];
            out.copy_from_slice(bias);
            for df in 0..k_f {
                let sf = f + df;
                if sf < pad_f || sf - pad_f >= f_ext {
                    continue;
                }
                let sf = sf - pad_f;
                for dt in 0..k_t {
                    let st = t + dt;
                    if st < pad_t || st - pad_t >= t_ext {
                        continue;
                    }
                    let st = st - pad_t;
                    let src = &x[(sf * t_ext + st) * c_in..(sf * t_ext + st + 1) * c_in];
                    let w_base = (df * k_t + dt) * c_in * c_out;
                    for (ci, &xv) in src.iter().enumerate() {
                        let w_row = &w[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        for (ov, &wv) in out.iter_mut().zip(w_row) {
                            *ov = *ov + xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_grid_backward<T: Element>(
    x: &[T],
    dy: &[T],
    f_ext: usize,
    t_ext: usize,
    c_in: usize,
    w: &[T],
    k_f: usize,
    k_t: usize,
    c_out: usize,
) -> ConvGrads<T> {
    let pad_f = (k_f - 1) / 2;
    let pad_t = (k_t - 1) / 2;
    let mut dx = vec![T::zero(); f_ext * t_ext * c_in];
    let mut dw = vec![T::zero(); k_f * k_t * c_in * c_out];
    let mut db = vec![T::zero(); c_out];
    for f in 0..f_ext {
        for t in 0..t_ext {
            let dyv = &dy[(f * t_ext + t) * c_out..(f * t_ext + t + 1) * c_out];
            for (co, &g) in dyv.iter().enumerate() {
                db[co] = db[co] + g;
            }
            for df in 0..k_f {
                let sf = f + df;
                if sf < pad_f || sf - pad_f >= f_ext {
                    continue;
                }
                let sf = sf - pad_f;
                for dt in 0..k_t {
                    let st = t + dt;
                    if st < pad_t || st - pad_t >= t_ext {
                        continue;
                    }
                    let st = st - pad_t;
                    let src_base = (sf * t_ext + st) * c_in;
                    let w_base = (df * k_t + dt) * c_in * c_out;
                    for ci in 0..c_in {
                        let xv = x[src_base + ci];
                        let w_row = &w[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        let dw_row = &mut dw[w_base + ci * c_out..w_base + (ci + 1) * c_out];
                        let mut acc = T::zero();
                        for (co, &g) in dyv.iter().enumerate() {
                            acc = acc + w_row[co] * g;
                            dw_row[co] = dw_row[co] + xv * g;
                        }
                        dx[src_base + ci] = dx[src_base + ci] + acc;
                    }
                }
            }
        }
    }
    ConvGrads { dx, dw, db }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_triple_loop() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        let mut expect = [0.0f64; 4];
        for i in 0..2 {
            for j in 0..2 {
                for t in 0..3 {
                    expect[i * 2 + j] += a[i * 3 + t] * b[t * 2 + j];
                }
            }
        }
        assert_eq!(c, expect);
    }

    #[test]
    fn transpose_roundtrip() {
        let x: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let t = transpose(&x, 3, 4);
        let back = transpose(&t, 4, 3);
        assert_eq!(x, back);
    }
}
