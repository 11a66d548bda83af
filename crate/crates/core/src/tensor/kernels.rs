//! Shared numeric kernels. Both the tape ops and the incremental decode
//! paths call these, so training and decoding see identical arithmetic.

use super::Mask;

/// `a (m x k) * b (k x n)`, row-major.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// Row vector times matrix: `x (k) * m (k x n)`.
pub(crate) fn vecmat(x: &[f64], mat: &[f64], k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(x.len(), k);
    let mut out = vec![0.0; n];
    for p in 0..k {
        let xv = x[p];
        if xv == 0.0 {
            continue;
        }
        let row = &mat[p * n..(p + 1) * n];
        for j in 0..n {
            out[j] += xv * row[j];
        }
    }
    out
}

pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Numerically stable logistic function; exact saturation past |x| > 30 is
/// fine in f64 and avoids overflow in exp.
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with an optional allow-mask. Masked entries get weight
/// exactly 0.0 and never enter the max/sum, so their logits cannot leak
/// through. Returns per-row flags for rows with no allowed entries; such
/// rows come back as all zeros.
pub(crate) fn softmax_rows(
    x: &[f64],
    n: usize,
    m: usize,
    mask: Option<&Mask>,
) -> (Vec<f64>, Vec<bool>) {
    let mut out = vec![0.0; n * m];
    let mut empty = vec![false; n];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mut max = f64::NEG_INFINITY;
        for j in 0..m {
            if mask.map_or(true, |mk| mk.allowed(i, j)) && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            empty[i] = true;
            continue;
        }
        let orow = &mut out[i * m..(i + 1) * m];
        let mut sum = 0.0;
        for j in 0..m {
            if mask.map_or(true, |mk| mk.allowed(i, j)) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        for j in 0..m {
            orow[j] /= sum;
        }
    }
    (out, empty)
}

pub(crate) fn log_softmax_rows(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..m {
            sum += (row[j] - max).exp();
        }
        let lse = max + sum.ln();
        let orow = &mut out[i * m..(i + 1) * m];
        for j in 0..m {
            orow[j] = row[j] - lse;
        }
    }
    out
}

/// Exclusive running product along each row: output j is the product of
/// entries 0..j, so output 0 is always 1.
pub(crate) fn exclusive_cumprod_rows(x: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let mut acc = 1.0;
        for j in 0..m {
            out[i * m + j] = acc;
            acc *= x[i * m + j];
        }
    }
    out
}

/// Per-row layer norm. Returns the output together with the normalized rows
/// and per-row inverse stddev needed by the backward pass.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    n: usize,
    m: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; n * m];
    let mut normed = vec![0.0; n * m];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * m..(i + 1) * m];
        let mean = row.iter().sum::<f64>() / m as f64;
        let mut var = 0.0;
        for v in row {
            let d = v - mean;
            var += d * d;
        }
        var /= m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[i] = is;
        for j in 0..m {
            let nv = (row[j] - mean) * is;
            normed[i * m + j] = nv;
            out[i * m + j] = nv * gain[j] + bias[j];
        }
    }
    (out, normed, inv_std)
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Vec<f64> {
    let (out, _, _) = layer_norm_rows(x, 1, x.len(), gain, bias, eps);
    out
}

/// 2-D convolution forward. `x` is `(c_in, h, w)`, `weight` is
/// `(c_out, c_in, k, k)`, stride fixed at 2, symmetric zero padding `pad`.
pub(crate) fn conv2d(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    k: usize,
    pad: usize,
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let stride = 2;
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * h_out * w_out];
    for co in 0..c_out {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x[ci * h * w + iy as usize * w + ix as usize]
                                * weight[((co * c_in + ci) * k + ky) * k + kx];
                        }
                    }
                }
                out[co * h_out * w_out + oy * w_out + ox] = acc;
            }
        }
    }
    (out, h_out, w_out)
}

/// Log-space addition with a floor standing in for -inf.
pub(crate) const LOG_ZERO: f64 = -1e10;

pub(crate) fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_ZERO {
        return b;
    }
    if b <= LOG_ZERO {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
