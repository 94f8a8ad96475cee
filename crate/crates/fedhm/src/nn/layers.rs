//! Forward and backward passes for the individual layer kinds.
//!
//! All functions are pure: inputs in, new tensors out. Convolution is plain
//! cross-correlation with stride and zero padding; kernels may be rectangular
//! so the separable factorized pair can reuse the same code path.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// `out[i,j] = Σ_k x[i,k]·W[k,j] + b[j]` for x (batch, m), W (m, n), b (n).
pub fn dense_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::dimension(format!(
            "dense forward: x {:?} vs W {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let n = w.shape()[1];
    if b.len() != n {
        return Err(Error::dimension("dense bias length"));
    }
    let mut out = matmul(x, w)?;
    let batch = out.shape()[0];
    for i in 0..batch {
        for j in 0..n {
            out.data_mut()[i * n + j] += b.data()[j];
        }
    }
    Ok(out)
}

/// Gradients of the dense layer: returns (dx, dW, db).
pub fn dense_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dw = matmul_tn(x, dy)?;
    let dx = matmul_nt(dy, w)?;
    let n = dy.shape()[1];
    let mut db = Tensor::zeros(&[n]);
    for i in 0..dy.shape()[0] {
        for j in 0..n {
            db.data_mut()[j] += dy.at2(i, j);
        }
    }
    Ok((dx, dw, db))
}

/// `out = (x·U)·Vᵀ` without materializing UVᵀ; also returns the hidden
/// activation z = x·U needed for the backward pass.
pub fn factorized_dense_forward(x: &Tensor, u: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let z = matmul(x, u)?;
    let out = matmul_nt(&z, v)?;
    Ok((out, z))
}

/// Gradients of the factorized dense layer: returns (dx, dU, dV).
pub fn factorized_dense_backward(
    x: &Tensor,
    u: &Tensor,
    v: &Tensor,
    z: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dz = matmul(dy, v)?;
    let dv = matmul_tn(dy, z)?;
    let du = matmul_tn(x, &dz)?;
    let dx = matmul_nt(&dz, u)?;
    Ok((dx, du, dv))
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::dimension(format!(
            "conv output extent non-positive: input {input}, kernel {kernel}, pad {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Cross-correlation of x (batch, m, H, W) with w (n, m, kh, kw).
pub fn conv2d_forward(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<Tensor> {
    if x.ndim() != 4 || w.ndim() != 4 {
        return Err(Error::dimension("conv expects 4D input and weight"));
    }
    let (batch, in_ch, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_ch, wm, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if wm != in_ch {
        return Err(Error::dimension(format!(
            "conv channels: input {in_ch} vs weight {wm}"
        )));
    }
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.pad;
    let oh = conv_extent(h, kh, sh, ph)?;
    let ow = conv_extent(wd, kw, sw, pw)?;

    let mut out = Tensor::zeros(&[batch, out_ch, oh, ow]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for b in 0..batch {
        for o in 0..out_ch {
            for i in 0..in_ch {
                let wbase = (o * in_ch + i) * kh * kw;
                let xbase = (b * in_ch + i) * h * wd;
                for oy in 0..oh {
                    let iy0 = (oy * sh) as isize - ph as isize;
                    for ky in 0..kh {
                        let iy = iy0 + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = xbase + iy as usize * wd;
                        let wrow = wbase + ky * kw;
                        let orow = ((b * out_ch + o) * oh + oy) * ow;
                        for ox in 0..ow {
                            let ix0 = (ox * sw) as isize - pw as isize;
                            let mut acc = 0.0;
                            for kx in 0..kw {
                                let ix = ix0 + kx as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdat[wrow + kx] * xd[xrow + ix as usize];
                            }
                            od[orow + ox] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of the conv layer: returns (dx, dW).
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geo: ConvGeometry,
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (batch, in_ch, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (out_ch, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.pad;
    let (oh, ow) = (dy.shape()[2], dy.shape()[3]);

    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let xd = x.data();
    let wdat = w.data();
    let dyd = dy.data();
    {
        let dwd = dw.data_mut();
        for b in 0..batch {
            for o in 0..out_ch {
                for i in 0..in_ch {
                    let wbase = (o * in_ch + i) * kh * kw;
                    let xbase = (b * in_ch + i) * h * wd;
                    for oy in 0..oh {
                        let iy0 = (oy * sh) as isize - ph as isize;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            let dyrow = ((b * out_ch + o) * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix0 = (ox * sw) as isize - pw as isize;
                                let g = dyd[dyrow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dwd[wrow + kx] += g * xd[xrow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    {
        let dxd = dx.data_mut();
        for b in 0..batch {
            for o in 0..out_ch {
                for i in 0..in_ch {
                    let wbase = (o * in_ch + i) * kh * kw;
                    let xbase = (b * in_ch + i) * h * wd;
                    for oy in 0..oh {
                        let iy0 = (oy * sh) as isize - ph as isize;
                        for ky in 0..kh {
                            let iy = iy0 + ky as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let xrow = xbase + iy as usize * wd;
                            let wrow = wbase + ky * kw;
                            let dyrow = ((b * out_ch + o) * oh + oy) * ow;
                            for ox in 0..ow {
                                let ix0 = (ox * sw) as isize - pw as isize;
                                let g = dyd[dyrow + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ix0 + kx as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    dxd[xrow + ix as usize] += g * wdat[wrow + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((dx, dw))
}

/// Factorized conv forward: U (r, m, k, 1) with stride (s, 1) and padding
/// (p, 0), then V (n, r, 1, k) with stride (1, s) and padding (0, p).
/// Returns the output and the intermediate activation.
pub fn factorized_conv_forward(
    x: &Tensor,
    u: &Tensor,
    v: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let z = conv2d_forward(
        x,
        u,
        ConvGeometry {
            stride: (stride, 1),
            pad: (pad, 0),
        },
    )?;
    let out = conv2d_forward(
        &z,
        v,
        ConvGeometry {
            stride: (1, stride),
            pad: (0, pad),
        },
    )?;
    Ok((out, z))
}

/// Gradients of the factorized conv pair: returns (dx, dU, dV).
pub fn factorized_conv_backward(
    x: &Tensor,
    u: &Tensor,
    v: &Tensor,
    z: &Tensor,
    stride: usize,
    pad: usize,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (dz, dv) = conv2d_backward(
        z,
        v,
        ConvGeometry {
            stride: (1, stride),
            pad: (0, pad),
        },
        dy,
    )?;
    let (dx, du) = conv2d_backward(
        x,
        u,
        ConvGeometry {
            stride: (stride, 1),
            pad: (pad, 0),
        },
        &dz,
    )?;
    Ok((dx, du, dv))
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics cached by the training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch norm over (batch, ch, H, W): normalizes by batch
/// statistics and updates the running estimates in place with momentum 0.1.
pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
) -> Result<(Tensor, BnCache)> {
    let (batch, ch, h, w) = bn_dims(x, gamma, beta)?;
    let count = batch * h * w;
    if count == 0 {
        return Err(Error::Data("batch norm over an empty batch".into()));
    }
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut sum = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                sum += x.data()[base + i];
            }
        }
        let m = sum / count as f64;
        let mut vs = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                let d = x.data()[base + i] - m;
                vs += d * d;
            }
        }
        mean[c] = m;
        var[c] = vs / count as f64;
        running_mean.data_mut()[c] = (1.0 - BN_MOMENTUM) * running_mean.data()[c] + BN_MOMENTUM * m;
        running_var.data_mut()[c] =
            (1.0 - BN_MOMENTUM) * running_var.data()[c] + BN_MOMENTUM * var[c];
    }
    let y = bn_apply(x, gamma, beta, &mean, &var);
    Ok((y, BnCache { mean, var }))
}

/// Eval-mode batch norm: normalizes by the running statistics.
pub fn batchnorm_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<Tensor> {
    bn_dims(x, gamma, beta)?;
    Ok(bn_apply(
        x,
        gamma,
        beta,
        running_mean.data(),
        running_var.data(),
    ))
}

fn bn_dims(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if x.ndim() != 4 {
        return Err(Error::dimension("batch norm expects 4D input"));
    }
    let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if gamma.len() != ch || beta.len() != ch {
        return Err(Error::dimension(format!(
            "batch norm channel mismatch: {ch} vs gamma {}",
            gamma.len()
        )));
    }
    Ok((batch, ch, h, w))
}

fn bn_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut y = Tensor::zeros(x.shape());
    for c in 0..ch {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let g = gamma.data()[c];
        let bta = beta.data()[c];
        for b in 0..batch {
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                y.data_mut()[base + i] = (x.data()[base + i] - mean[c]) * inv * g + bta;
            }
        }
    }
    y
}

/// Training-mode batch norm gradients: returns (dx, dgamma, dbeta).
pub fn batchnorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &BnCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let count = (batch * h * w) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[ch]);
    let mut dbeta = Tensor::zeros(&[ch]);

    for c in 0..ch {
        let m = cache.mean[c];
        let v = cache.var[c];
        let inv = 1.0 / (v + BN_EPS).sqrt();
        let g = gamma.data()[c];

        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                let xhat = (x.data()[base + i] - m) * inv;
                let d = dy.data()[base + i];
                sum_dy += d;
                sum_dy_xhat += d * xhat;
            }
        }
        dbeta.data_mut()[c] = sum_dy;
        dgamma.data_mut()[c] = sum_dy_xhat;

        for b in 0..batch {
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                let xhat = (x.data()[base + i] - m) * inv;
                let d = dy.data()[base + i];
                dx.data_mut()[base + i] =
                    g * inv / count * (count * d - sum_dy - xhat * sum_dy_xhat);
            }
        }
    }
    Ok((dx, dgamma, dbeta))
}

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward through ReLU using the forward output as the mask.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data().iter()) {
        if yv <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

/// Global average pool (batch, ch, H, W) -> (batch, ch, 1, 1).
pub fn global_avg_pool_forward(x: &Tensor) -> Result<(Tensor, (usize, usize))> {
    if x.ndim() != 4 {
        return Err(Error::dimension("pool expects 4D input"));
    }
    let (batch, ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut out = Tensor::zeros(&[batch, ch, 1, 1]);
    let scale = 1.0 / (h * w) as f64;
    for b in 0..batch {
        for c in 0..ch {
            let base = (b * ch + c) * h * w;
            let sum: f64 = x.data()[base..base + h * w].iter().sum();
            out.data_mut()[b * ch + c] = sum * scale;
        }
    }
    Ok((out, (h, w)))
}

pub fn global_avg_pool_backward(dy: &Tensor, hw: (usize, usize)) -> Tensor {
    let (batch, ch) = (dy.shape()[0], dy.shape()[1]);
    let (h, w) = hw;
    let scale = 1.0 / (h * w) as f64;
    let mut dx = Tensor::zeros(&[batch, ch, h, w]);
    for b in 0..batch {
        for c in 0..ch {
            let g = dy.data()[b * ch + c] * scale;
            let base = (b * ch + c) * h * w;
            for i in 0..h * w {
                dx.data_mut()[base + i] = g;
            }
        }
    }
    dx
}

/// (batch, ch, H, W) -> (batch, ch·H·W).
pub fn flatten_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 4 {
        return Err(Error::dimension("flatten expects 4D input"));
    }
    let batch = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    Ok((x.reshape(&[batch, rest])?, x.shape().to_vec()))
}

pub fn flatten_backward(dy: &Tensor, original: &[usize]) -> Result<Tensor> {
    dy.reshape(original)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn dense_identity_and_basis_rows() {
        let x = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);

        let x = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let w = Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = dense_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn dense_random_matches_triple_loop() {
        let x = rng_tensor(&[4, 3], 1);
        let w = rng_tensor(&[3, 5], 2);
        let b = rng_tensor(&[5], 3);
        let y = dense_forward(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = b.data()[j];
                for k in 0..3 {
                    acc += x.at2(i, k) * w.at2(k, j);
                }
                assert!((y.at2(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn factorized_dense_rank_one_projector_and_zero() {
        // U = first column of I(2), V likewise: out = (x·u) v^T keeps dim 0
        let u = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(&[2, 1], vec![1.0, 0.0]).unwrap();
        let x = Tensor::new(&[1, 2], vec![5.0, 7.0]).unwrap();
        let (y, _) = factorized_dense_forward(&x, &u, &v).unwrap();
        assert_eq!(y.data(), &[5.0, 0.0]);

        let zeros = Tensor::zeros(&[3, 2]);
        let (y, _) = factorized_dense_forward(&zeros, &u, &v).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn factorized_dense_full_rank_equals_dense_path() {
        let w = rng_tensor(&[4, 6], 5);
        let pair = crate::factorize::spectral_factorize(&w, 4).unwrap();
        let x = rng_tensor(&[3, 4], 6);
        let (via_factors, _) = factorized_dense_forward(&x, &pair.u, &pair.v).unwrap();
        let dense = dense_forward(&x, &w, &Tensor::zeros(&[6])).unwrap();
        let rel = via_factors.sub(&dense).unwrap().frob_norm() / dense.frob_norm();
        assert!(rel <= 1e-10, "paths disagree: {rel}");
    }

    #[test]
    fn conv_identity_1x1_kernel() {
        let x = rng_tensor(&[2, 3, 4, 5], 7);
        // identity 1x1: w[o,i,0,0] = delta(o,i)
        let w = Tensor::from_fn(&[3, 3, 1, 1], |idx| {
            let o = idx / 3;
            let i = idx % 3;
            if o == i { 1.0 } else { 0.0 }
        });
        let y = conv2d_forward(&x, &w, ConvGeometry { stride: (1, 1), pad: (0, 0) }).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_all_ones_3x3_on_ones_gives_nine() {
        let x = Tensor::filled(&[1, 1, 5, 5], 1.0);
        let w = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, ConvGeometry { stride: (1, 1), pad: (0, 0) }).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| (v - 9.0).abs() < 1e-12));
    }

    #[test]
    fn conv_matches_direct_six_loop_oracle() {
        let x = rng_tensor(&[2, 3, 6, 7], 11);
        let w = rng_tensor(&[4, 3, 3, 3], 12);
        for (stride, pad) in [(1usize, 0usize), (1, 1), (2, 0), (2, 1)] {
            let y = conv2d_forward(
                &x,
                &w,
                ConvGeometry {
                    stride: (stride, stride),
                    pad: (pad, pad),
                },
            )
            .unwrap();
            let (oh, ow) = (y.shape()[2], y.shape()[3]);
            for b in 0..2 {
                for o in 0..4 {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..3 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if iy < 0 || iy >= 6 || ix < 0 || ix >= 7 {
                                            continue;
                                        }
                                        acc += w.at4(o, i, ky, kx)
                                            * x.at4(b, i, iy as usize, ix as usize);
                                    }
                                }
                            }
                            let diff = (y.at4(b, o, oy, ox) - acc).abs();
                            assert!(diff <= 1e-12, "s={stride} p={pad} diff {diff}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_non_positive_output() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(conv2d_forward(&x, &w, ConvGeometry { stride: (1, 1), pad: (0, 0) }).is_err());
    }

    #[test]
    fn factorized_conv_zero_input_gives_zero() {
        let u = rng_tensor(&[2, 3, 3, 1], 13);
        let v = rng_tensor(&[4, 2, 1, 3], 14);
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        let (y, _) = factorized_conv_forward(&x, &u, &v, 1, 1).unwrap();
        assert!(y.data().iter().all(|&val| val == 0.0));
    }

    #[test]
    fn factorized_conv_k1_equals_per_pixel_dense() {
        // 1x1 factorized channel mixing equals the dense path per pixel
        let (m, n, r) = (3usize, 4usize, 2usize);
        let u = rng_tensor(&[r, m, 1, 1], 15);
        let v = rng_tensor(&[n, r, 1, 1], 16);
        let x = rng_tensor(&[2, m, 3, 3], 17);
        let (y, _) = factorized_conv_forward(&x, &u, &v, 1, 0).unwrap();

        // dense equivalents: U_mat (m, r), V_mat (n, r)
        let u_mat = Tensor::from_fn(&[m, r], |idx| u.at4(idx % r, idx / r, 0, 0));
        let v_mat = Tensor::from_fn(&[n, r], |idx| v.at4(idx / r, idx % r, 0, 0));
        for b in 0..2 {
            for py in 0..3 {
                for px in 0..3 {
                    let pixel = Tensor::from_fn(&[1, m], |i| x.at4(b, i, py, px));
                    let (want, _) = factorized_dense_forward(&pixel, &u_mat, &v_mat).unwrap();
                    for o in 0..n {
                        let diff = (y.at4(b, o, py, px) - want.data()[o]).abs();
                        assert!(diff <= 1e-12, "pixel mix differs by {diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn batchnorm_identity_on_standardized_input_and_beta_shift() {
        // per-channel zero-mean unit-var input, gamma = 1, beta = 0
        let x = Tensor::new(
            &[2, 1, 1, 2],
            vec![-1.0, 1.0, 1.0, -1.0],
        )
        .unwrap();
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        let (y, _) = batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
        for (a, b) in y.data().iter().zip(x.data().iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }

        // beta shift lands exactly in the output mean
        let beta = Tensor::filled(&[1], 0.7);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        let (y, _) = batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!((mean - 0.7).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_running_stats_update_with_momentum() {
        let x = Tensor::new(&[1, 1, 1, 4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv).unwrap();
        assert!((rm.data()[0] - 0.2).abs() < 1e-12); // 0.9*0 + 0.1*2
        assert!((rv.data()[0] - 0.9).abs() < 1e-12); // 0.9*1 + 0.1*0
    }

    #[test]
    fn batchnorm_rejects_empty_batch() {
        let x = Tensor::zeros(&[0, 1, 2, 2]);
        let gamma = Tensor::filled(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::filled(&[1], 1.0);
        assert!(batchnorm_forward_train(&x, &gamma, &beta, &mut rm, &mut rv).is_err());
    }

    #[test]
    fn pool_and_flatten_shapes() {
        let x = rng_tensor(&[2, 3, 4, 4], 19);
        let (y, hw) = global_avg_pool_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 1, 1]);
        assert_eq!(hw, (4, 4));
        for b in 0..2 {
            for c in 0..3 {
                let mut sum = 0.0;
                for i in 0..16 {
                    sum += x.data()[(b * 3 + c) * 16 + i];
                }
                assert!((y.data()[b * 3 + c] - sum / 16.0).abs() < 1e-12);
            }
        }
        let (f, shape) = flatten_forward(&y).unwrap();
        assert_eq!(f.shape(), &[2, 3]);
        assert_eq!(shape, vec![2, 3, 1, 1]);
    }
}
