//! Forward and backward kernels for the encoder layers. Activations are laid
//! out `[batch][channel][position]`.

use crate::tensor::{axpy, dot};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Left/right zero padding that keeps the length for stride-1 convolution.
pub(crate) fn same_padding(kernel: usize) -> (usize, usize) {
    let left = (kernel - 1) / 2;
    (left, kernel - 1 - left)
}

pub(crate) fn pooled_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

fn pool_left_pad(len: usize, size: usize, stride: usize) -> usize {
    let out = pooled_len(len, stride);
    ((out - 1) * stride + size).saturating_sub(len) / 2
}

pub(crate) struct ConvShape {
    pub batch: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvShape {
    fn padded_len(&self) -> usize {
        self.len + self.kernel - 1
    }
}

/// Copies `x` into a zero-padded buffer of length `len + kernel - 1` per channel.
pub(crate) fn pad_input(x: &[f64], s: &ConvShape) -> Vec<f64> {
    let (left, _) = same_padding(s.kernel);
    let plen = s.padded_len();
    let mut out = vec![0.0; s.batch * s.in_c * plen];
    for (src, dst) in x.chunks_exact(s.len).zip(out.chunks_exact_mut(plen)) {
        dst[left..left + s.len].copy_from_slice(src);
    }
    out
}

pub(crate) fn conv_forward(xpad: &[f64], weight: &[f64], bias: &[f64], s: &ConvShape) -> Vec<f64> {
    let plen = s.padded_len();
    let mut y = vec![0.0; s.batch * s.out_c * s.len];
    for n in 0..s.batch {
        let xs = &xpad[n * s.in_c * plen..(n + 1) * s.in_c * plen];
        for o in 0..s.out_c {
            let yo = &mut y[(n * s.out_c + o) * s.len..(n * s.out_c + o + 1) * s.len];
            yo.iter_mut().for_each(|v| *v = bias[o]);
            for i in 0..s.in_c {
                let xi = &xs[i * plen..(i + 1) * plen];
                let w = &weight[(o * s.in_c + i) * s.kernel..(o * s.in_c + i + 1) * s.kernel];
                for (t, wt) in w.iter().enumerate() {
                    axpy(*wt, &xi[t..t + s.len], yo);
                }
            }
        }
    }
    y
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
pub(crate) fn conv_backward(
    xpad: &[f64],
    weight: &[f64],
    dy: &[f64],
    s: &ConvShape,
    dweight: &mut [f64],
    dbias: &mut [f64],
    need_input: bool,
) -> Option<Vec<f64>> {
    let plen = s.padded_len();
    let (left, _) = same_padding(s.kernel);
    let mut dxpad = need_input.then(|| vec![0.0; s.in_c * plen]);
    let mut dx = need_input.then(|| vec![0.0; s.batch * s.in_c * s.len]);
    for n in 0..s.batch {
        let xs = &xpad[n * s.in_c * plen..(n + 1) * s.in_c * plen];
        if let Some(buf) = dxpad.as_mut() {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        for o in 0..s.out_c {
            let dyo = &dy[(n * s.out_c + o) * s.len..(n * s.out_c + o + 1) * s.len];
            dbias[o] += dyo.iter().sum::<f64>();
            for i in 0..s.in_c {
                let xi = &xs[i * plen..(i + 1) * plen];
                let base = (o * s.in_c + i) * s.kernel;
                for t in 0..s.kernel {
                    dweight[base + t] += dot(dyo, &xi[t..t + s.len]);
                }
                if let Some(buf) = dxpad.as_mut() {
                    let dxi = &mut buf[i * plen..(i + 1) * plen];
                    for t in 0..s.kernel {
                        axpy(weight[base + t], dyo, &mut dxi[t..t + s.len]);
                    }
                }
            }
        }
        if let (Some(buf), Some(dx)) = (dxpad.as_ref(), dx.as_mut()) {
            for i in 0..s.in_c {
                let dst = &mut dx[(n * s.in_c + i) * s.len..(n * s.in_c + i + 1) * s.len];
                dst.copy_from_slice(&buf[i * plen + left..i * plen + left + s.len]);
            }
        }
    }
    dx
}

pub(crate) struct BnCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Training-mode batch norm over (batch, position) per channel. Returns the
/// output, the cache, and the batch mean and unbiased variance.
pub(crate) fn bn_forward_train(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<f64>, BnCache, Vec<f64>, Vec<f64>) {
    let m = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let xs = &x[(n * channels + c) * len..(n * channels + c + 1) * len];
            mean[c] += xs.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for n in 0..batch {
        for c in 0..channels {
            let xs = &x[(n * channels + c) * len..(n * channels + c + 1) * len];
            var[c] += xs.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

    let mut x_hat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let r = (n * channels + c) * len..(n * channels + c + 1) * len;
            for k in r {
                let h = (x[k] - mean[c]) * inv_std[c];
                x_hat[k] = h;
                y[k] = gamma[c] * h + beta[c];
            }
        }
    }
    let unbiased = if m > 1.0 {
        var.iter().map(|v| v * m / (m - 1.0)).collect()
    } else {
        var.clone()
    };
    (y, BnCache { x_hat, inv_std }, mean, unbiased)
}

pub(crate) fn bn_forward_eval(
    x: &mut [f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    channels: usize,
    len: usize,
) {
    for (idx, row) in x.chunks_exact_mut(len).enumerate() {
        let c = idx % channels;
        let scale = gamma[c] / (running_var[c] + BN_EPS).sqrt();
        let shift = beta[c] - running_mean[c] * scale;
        row.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
}

pub(crate) fn bn_backward(
    dy: &[f64],
    cache: &BnCache,
    gamma: &[f64],
    batch: usize,
    channels: usize,
    len: usize,
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let m = (batch * len) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let r = (n * channels + c) * len..(n * channels + c + 1) * len;
            sum_dy[c] += dy[r.clone()].iter().sum::<f64>();
            sum_dy_xhat[c] += dot(&dy[r.clone()], &cache.x_hat[r]);
        }
    }
    for c in 0..channels {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let mut dx = vec![0.0; dy.len()];
    for n in 0..batch {
        for c in 0..channels {
            let k = gamma[c] * cache.inv_std[c] / m;
            for idx in (n * channels + c) * len..(n * channels + c + 1) * len {
                dx[idx] = k * (m * dy[idx] - sum_dy[c] - cache.x_hat[idx] * sum_dy_xhat[c]);
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Nonlinearity {
    Elu,
    Relu,
}

pub(crate) fn act_forward(x: &mut [f64], kind: Nonlinearity) {
    match kind {
        Nonlinearity::Elu => x.iter_mut().for_each(|v| {
            if *v <= 0.0 {
                *v = v.exp_m1();
            }
        }),
        Nonlinearity::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
    }
}

/// `pre` is the activation input.
pub(crate) fn act_backward(dy: &mut [f64], pre: &[f64], kind: Nonlinearity) {
    match kind {
        Nonlinearity::Elu => {
            for (g, x) in dy.iter_mut().zip(pre) {
                if *x <= 0.0 {
                    *g *= x.exp();
                }
            }
        }
        Nonlinearity::Relu => {
            for (g, x) in dy.iter_mut().zip(pre) {
                if *x <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

/// Max pooling with "same" padding. Returns the output and, per output cell,
/// the flat index of the winning input.
pub(crate) fn pool_forward(x: &[f64], rows: usize, len: usize, size: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let out_len = pooled_len(len, stride);
    let left = pool_left_pad(len, size, stride);
    let mut y = vec![0.0; rows * out_len];
    let mut arg = vec![0; rows * out_len];
    for r in 0..rows {
        let xs = &x[r * len..(r + 1) * len];
        for o in 0..out_len {
            let start = (o * stride).saturating_sub(left);
            let end = (o * stride + size).saturating_sub(left).min(len);
            let mut best = start;
            for k in start + 1..end {
                if xs[k] > xs[best] {
                    best = k;
                }
            }
            y[r * out_len + o] = xs[best];
            arg[r * out_len + o] = r * len + best;
        }
    }
    (y, arg)
}

pub(crate) fn pool_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}

/// `y = W x + b` for each row of `x`; `W` is `out x in`.
pub(crate) fn linear_forward(x: &[f64], weight: &[f64], bias: &[f64], in_f: usize, out_f: usize) -> Vec<f64> {
    let batch = x.len() / in_f;
    let mut y = vec![0.0; batch * out_f];
    for n in 0..batch {
        let xn = &x[n * in_f..(n + 1) * in_f];
        for o in 0..out_f {
            y[n * out_f + o] = bias[o] + dot(&weight[o * in_f..(o + 1) * in_f], xn);
        }
    }
    y
}

pub(crate) fn linear_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    in_f: usize,
    out_f: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let batch = x.len() / in_f;
    let mut dx = vec![0.0; x.len()];
    for n in 0..batch {
        let xn = &x[n * in_f..(n + 1) * in_f];
        let dxn = &mut dx[n * in_f..(n + 1) * in_f];
        for o in 0..out_f {
            let g = dy[n * out_f + o];
            dbias[o] += g;
            axpy(g, xn, &mut dweight[o * in_f..(o + 1) * in_f]);
            axpy(g, &weight[o * in_f..(o + 1) * in_f], dxn);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_same_padding_matches_direct_sum() {
        let s = ConvShape {
            batch: 1,
            in_c: 2,
            out_c: 1,
            len: 5,
            kernel: 4,
        };
        let x: Vec<f64> = (0..10).map(|v| v as f64 * 0.5 - 1.0).collect();
        let w: Vec<f64> = (0..8).map(|v| (v as f64 - 3.0) * 0.25).collect();
        let y = conv_forward(&pad_input(&x, &s), &w, &[0.5], &s);
        let (left, _) = same_padding(4);
        for p in 0..5 {
            let mut expected = 0.5;
            for i in 0..2 {
                for t in 0..4 {
                    let src = p as isize + t as isize - left as isize;
                    if (0..5).contains(&src) {
                        expected += w[i * 4 + t] * x[i * 5 + src as usize];
                    }
                }
            }
            assert!((y[p] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_windows_follow_same_padding() {
        // length 10, size 8, stride 4 -> 3 outputs, 3 padding on the left
        let x: Vec<f64> = vec![9.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 1.0];
        let (y, arg) = pool_forward(&x, 1, 10, 8, 4);
        assert_eq!(y, vec![9.0, 5.0, 5.0]);
        assert_eq!(arg, vec![0, 7, 7]);
        assert_eq!(pooled_len(10_000, 4), 2_500);
        assert_eq!(pooled_len(625, 4), 157);
    }
}
