//! Dense kernels on flat `f64` buffers. Activations are laid out
//! `[batch, channel, row, col]`; convolutions are 3x3, stride 1, zero pad 1.

pub const BN_EPS: f64 = 1e-5;

/// Unfolds one `[cin, h, w]` image into `[cin * 9, h * w]` patch columns.
pub fn im2col3x3(input: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let hw = h * w;
    debug_assert_eq!(col.len(), cin * 9 * hw);
    for ci in 0..cin {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = 0.0;
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = 0.0;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3x3`]: accumulates patch-column gradients into `dinput`.
pub fn col2im3x3_add(dcol: &[f64], cin: usize, h: usize, w: usize, dinput: &mut [f64]) {
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut dinput[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcol[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
}

/// `out[m, n] = sum_k a[m, k] * b[k, n]` (overwrites `out`).
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the asserted lengths cover every strided access.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[k, n] = sum_m a[m, k] * b[m, n]` (overwrites `out`).
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && out.len() >= k * n);
    // SAFETY: as above; `a` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            0.0,
            out.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `out[m, k] += sum_n a[m, n] * b[k, n]`.
pub fn matmul_a_bt_add(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && out.len() >= m * k);
    // SAFETY: as above; `b` is read transposed through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            1.0,
            out.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// 3x3 convolution without bias over a batch.
pub fn conv3x3_forward(
    input: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; batch * cout * hw];
    let mut col = vec![0.0; cin * 9 * hw];
    for b in 0..batch {
        im2col3x3(&input[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut col);
        matmul(weight, &col, cout, cin * 9, hw, &mut out[b * cout * hw..(b + 1) * cout * hw]);
    }
    out
}

/// Returns the input gradient and accumulates into `dweight`.
#[allow(clippy::too_many_arguments)]
pub fn conv3x3_backward(
    input: &[f64],
    dout: &[f64],
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    dweight: &mut [f64],
    need_dinput: bool,
) -> Vec<f64> {
    let hw = h * w;
    let k = cin * 9;
    let mut col = vec![0.0; k * hw];
    let mut dcol = vec![0.0; k * hw];
    let mut dinput = if need_dinput {
        vec![0.0; batch * cin * hw]
    } else {
        Vec::new()
    };
    for b in 0..batch {
        let x = &input[b * cin * hw..(b + 1) * cin * hw];
        let dy = &dout[b * cout * hw..(b + 1) * cout * hw];
        im2col3x3(x, cin, h, w, &mut col);
        matmul_a_bt_add(dy, &col, cout, hw, k, dweight);
        if need_dinput {
            matmul_at_b(weight, dy, cout, k, hw, &mut dcol);
            col2im3x3_add(&dcol, cin, h, w, &mut dinput[b * cin * hw..(b + 1) * cin * hw]);
        }
    }
    dinput
}

/// Per-channel statistics captured by a training-mode normalization pass.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used for the running estimate.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub train: bool,
    pub stats: Option<NormStats>,
}

/// Batch normalization over `[batch, channels, hw]`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    hw: usize,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    train: bool,
) -> (Vec<f64>, NormCache) {
    let n = (batch * hw) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    if train {
        for c in 0..channels {
            let mut s = 0.0;
            for b in 0..batch {
                s += x[(b * channels + c) * hw..][..hw].iter().sum::<f64>();
            }
            let m = s / n;
            let mut v = 0.0;
            for b in 0..batch {
                v += x[(b * channels + c) * hw..][..hw]
                    .iter()
                    .map(|&t| (t - m) * (t - m))
                    .sum::<f64>();
            }
            mean[c] = m;
            var[c] = v / n;
        }
    } else {
        mean.copy_from_slice(running_mean);
        var.copy_from_slice(running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = xh;
                y[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    let stats = train.then(|| NormStats {
        var_unbiased: var
            .iter()
            .map(|v| if n > 1.0 { v * n / (n - 1.0) } else { *v })
            .collect(),
        mean,
    });
    (
        y,
        NormCache {
            xhat,
            inv_std,
            train,
            stats,
        },
    )
}

/// Returns `dx`; accumulates into `dgamma` / `dbeta`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    dy: &[f64],
    cache: &NormCache,
    batch: usize,
    channels: usize,
    hw: usize,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = (batch * hw) as f64;
    let mut dx = vec![0.0; dy.len()];
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * hw;
            for (&g, &xh) in dy[off..off + hw].iter().zip(&cache.xhat[off..off + hw]) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let scale = gamma[c] * cache.inv_std[c];
        for b in 0..batch {
            let off = (b * channels + c) * hw;
            for i in off..off + hw {
                dx[i] = if cache.train {
                    scale * (dy[i] - sum_dy / n - cache.xhat[i] * sum_dy_xhat / n)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    dx
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Zeroes `grad` wherever the rectifier output was not positive.
pub fn relu_backward_inplace(grad: &mut [f64], out: &[f64]) {
    grad.iter_mut()
        .zip(out)
        .for_each(|(g, &o)| {
            if o <= 0.0 {
                *g = 0.0
            }
        });
}

/// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
pub fn avgpool2_forward(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..];
        let dst = &mut out[p * oh * ow..];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

pub fn avgpool2_backward(dy: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..];
        let dst = &mut dx[p * h * w..];
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * src[y * ow + xx];
                let i = 2 * y * w + 2 * xx;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
    dx
}

/// Fully connected layer: `y[b, o] = sum_i w[o, i] x[b, i] + bias[o]`.
pub fn linear_forward(x: &[f64], batch: usize, nin: usize, w: &[f64], bias: &[f64], nout: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * nout];
    for b in 0..batch {
        let xr = &x[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let wr = &w[o * nin..(o + 1) * nin];
            y[b * nout + o] = bias[o] + wr.iter().zip(xr).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

/// Returns `dx`; accumulates weight and bias gradients.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    dy: &[f64],
    batch: usize,
    nin: usize,
    w: &[f64],
    nout: usize,
    dw: &mut [f64],
    dbias: &mut [f64],
) -> Vec<f64> {
    let mut dx = vec![0.0; batch * nin];
    for b in 0..batch {
        let xr = &x[b * nin..(b + 1) * nin];
        let dxr = &mut dx[b * nin..(b + 1) * nin];
        for o in 0..nout {
            let g = dy[b * nout + o];
            if g == 0.0 {
                continue;
            }
            dbias[o] += g;
            let wr = &w[o * nin..(o + 1) * nin];
            let dwr = &mut dw[o * nin..(o + 1) * nin];
            for i in 0..nin {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}
