//! Low-rank factorization of layer weights.
//!
//! Conv kernels (n, m, k, k) are unrolled to (mk, nk) matrices, truncated by
//! SVD, split into balanced factors U·sqrt(S), V·sqrt(S), and reshaped into a
//! pair of separable conv kernels (r, m, k, 1) and (n, r, 1, k). Dense weights
//! factorize directly. The same module carries the Frobenius-decay gradient,
//! rank selection from a rank ratio, and parameter / MAC accounting.

use crate::error::{Error, Result};
use crate::modelspec::{BlockDesc, InputSpec, LayerDesc, ModelSpec};
use crate::svd::truncated_svd;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Low-rank replacement for a full weight: `W ≈ U Vᵀ` on the unrolled form.
///
/// Dense: `u` is (m, r), `v` is (n, r). Conv: `u` is (r, m, k, 1), `v` is
/// (n, r, 1, k); `rank` is the effective (possibly clamped) rank.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPair {
    pub u: Tensor,
    pub v: Tensor,
    pub rank: usize,
}

/// Unrolls a 4D conv weight (n, m, k, k) into an (mk, nk) matrix.
///
/// Index convention: `M[i·k + ky, o·k + kx] = W[o, i, ky, kx]` for input
/// channel `i`, output channel `o`, kernel row `ky`, kernel column `kx`.
pub fn unroll_conv(w: &Tensor) -> Result<Tensor> {
    if w.ndim() != 4 {
        return Err(Error::dimension(format!(
            "unroll expects a 4D conv weight, got {:?}",
            w.shape()
        )));
    }
    let (n, m, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kh != kw {
        return Err(Error::dimension(format!(
            "unroll expects a square kernel, got {}x{}",
            kh, kw
        )));
    }
    let k = kh;
    let mut out = Tensor::zeros(&[m * k, n * k]);
    for o in 0..n {
        for i in 0..m {
            for ky in 0..k {
                for kx in 0..k {
                    let v = w.at4(o, i, ky, kx);
                    out.data_mut()[(i * k + ky) * (n * k) + (o * k + kx)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`unroll_conv`].
pub fn fold_conv(m_unrolled: &Tensor, n: usize, m: usize, k: usize) -> Result<Tensor> {
    if m_unrolled.ndim() != 2 || m_unrolled.shape() != [m * k, n * k] {
        return Err(Error::dimension(format!(
            "fold expects ({}, {}), got {:?}",
            m * k,
            n * k,
            m_unrolled.shape()
        )));
    }
    let mut w = Tensor::zeros(&[n, m, k, k]);
    for o in 0..n {
        for i in 0..m {
            for ky in 0..k {
                for kx in 0..k {
                    let v = m_unrolled.at2(i * k + ky, o * k + kx);
                    let idx = w.idx4(o, i, ky, kx);
                    w.data_mut()[idx] = v;
                }
            }
        }
    }
    Ok(w)
}

/// Reshapes an unrolled U factor (mk, r) into a conv kernel (r, m, k, 1).
pub fn u_mat_to_conv(u: &Tensor, m: usize, k: usize) -> Result<Tensor> {
    let r = u.shape()[1];
    if u.shape()[0] != m * k {
        return Err(Error::dimension("u factor rows != mk"));
    }
    let mut out = Tensor::zeros(&[r, m, k, 1]);
    for j in 0..r {
        for i in 0..m {
            for ky in 0..k {
                let idx = out.idx4(j, i, ky, 0);
                out.data_mut()[idx] = u.at2(i * k + ky, j);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`u_mat_to_conv`].
pub fn u_conv_to_mat(u: &Tensor) -> Tensor {
    let (r, m, k) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let mut out = Tensor::zeros(&[m * k, r]);
    for j in 0..r {
        for i in 0..m {
            for ky in 0..k {
                out.data_mut()[(i * k + ky) * r + j] = u.at4(j, i, ky, 0);
            }
        }
    }
    out
}

/// Reshapes an unrolled V factor (nk, r) into a conv kernel (n, r, 1, k).
pub fn v_mat_to_conv(v: &Tensor, n: usize, k: usize) -> Result<Tensor> {
    let r = v.shape()[1];
    if v.shape()[0] != n * k {
        return Err(Error::dimension("v factor rows != nk"));
    }
    let mut out = Tensor::zeros(&[n, r, 1, k]);
    for o in 0..n {
        for j in 0..r {
            for kx in 0..k {
                let idx = out.idx4(o, j, 0, kx);
                out.data_mut()[idx] = v.at2(o * k + kx, j);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`v_mat_to_conv`].
pub fn v_conv_to_mat(v: &Tensor) -> Tensor {
    let (n, r, k) = (v.shape()[0], v.shape()[1], v.shape()[3]);
    let mut out = Tensor::zeros(&[n * k, r]);
    for o in 0..n {
        for j in 0..r {
            for kx in 0..k {
                out.data_mut()[(o * k + kx) * r + j] = v.at4(o, j, 0, kx);
            }
        }
    }
    out
}

/// Spectral factorization of a dense (m, n) or conv (n, m, k, k) weight.
///
/// Computes the truncated SVD of the (unrolled) weight and splits the
/// singular values evenly: `U' = U_r sqrt(S_r)`, `V' = V_r sqrt(S_r)`.
/// Ranks above the unrolled minimum dimension are clamped; the pair reports
/// the effective rank.
pub fn spectral_factorize(w: &Tensor, r: usize) -> Result<FactorizedPair> {
    if r == 0 {
        return Err(Error::InvalidArgument("rank must be >= 1".into()));
    }
    match w.ndim() {
        2 => {
            let svd = truncated_svd(w, r)?;
            let (u, v) = balanced_split(&svd.u, &svd.v, &svd.singular_values);
            Ok(FactorizedPair {
                rank: svd.rank(),
                u,
                v,
            })
        }
        4 => {
            let (n, m, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
            let unrolled = unroll_conv(w)?;
            let svd = truncated_svd(&unrolled, r)?;
            let (u_mat, v_mat) = balanced_split(&svd.u, &svd.v, &svd.singular_values);
            Ok(FactorizedPair {
                rank: svd.rank(),
                u: u_mat_to_conv(&u_mat, m, k)?,
                v: v_mat_to_conv(&v_mat, n, k)?,
            })
        }
        _ => Err(Error::dimension(format!(
            "cannot factorize weight of shape {:?}",
            w.shape()
        ))),
    }
}

fn balanced_split(u: &Tensor, v: &Tensor, sigma: &[f64]) -> (Tensor, Tensor) {
    let scale = |t: &Tensor| {
        let rows = t.shape()[0];
        let r = t.shape()[1];
        let mut out = t.clone();
        for i in 0..rows {
            for j in 0..r {
                out.data_mut()[i * r + j] *= sigma[j].max(0.0).sqrt();
            }
        }
        out
    };
    (scale(u), scale(v))
}

/// Recovers the full weight from a factorized pair: `fold(U_mat · V_matᵀ)`.
pub fn recover_layer(pair: &FactorizedPair) -> Result<Tensor> {
    match (pair.u.ndim(), pair.v.ndim()) {
        (2, 2) => matmul_nt(&pair.u, &pair.v),
        (4, 4) => {
            let (m, k) = (pair.u.shape()[1], pair.u.shape()[2]);
            let n = pair.v.shape()[0];
            if pair.v.shape()[3] != k {
                return Err(Error::dimension("factor kernel extents disagree"));
            }
            let u_mat = u_conv_to_mat(&pair.u);
            let v_mat = v_conv_to_mat(&pair.v);
            let full = matmul_nt(&u_mat, &v_mat)?;
            fold_conv(&full, n, m, k)
        }
        _ => Err(Error::dimension("mismatched factor ranks")),
    }
}

/// Gradient of the Frobenius-decay penalty `(λ/2)‖U Vᵀ‖²_F` with respect to
/// the (unrolled) factors: `dU = λ U (VᵀV)`, `dV = λ V (UᵀU)`.
///
/// Conv factors are unrolled, differentiated, and reshaped back.
pub fn frobenius_decay_grad(pair: &FactorizedPair, lambda: f64) -> Result<(Tensor, Tensor)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument("lambda must be >= 0".into()));
    }
    if lambda == 0.0 {
        return Ok((
            Tensor::zeros(pair.u.shape()),
            Tensor::zeros(pair.v.shape()),
        ));
    }
    let (u_mat, v_mat, conv) = match pair.u.ndim() {
        2 => (pair.u.clone(), pair.v.clone(), None),
        4 => {
            let dims = (
                pair.u.shape()[1],
                pair.v.shape()[0],
                pair.u.shape()[2],
            );
            (u_conv_to_mat(&pair.u), v_conv_to_mat(&pair.v), Some(dims))
        }
        _ => return Err(Error::dimension("bad factor shape")),
    };
    let vtv = matmul_tn(&v_mat, &v_mat)?;
    let utu = matmul_tn(&u_mat, &u_mat)?;
    let gu = matmul(&u_mat, &vtv)?.scale(lambda);
    let gv = matmul(&v_mat, &utu)?.scale(lambda);
    match conv {
        None => Ok((gu, gv)),
        Some((m, n, k)) => Ok((u_mat_to_conv(&gu, m, k)?, v_mat_to_conv(&gv, n, k)?)),
    }
}

/// Rank for a conv layer from a rank ratio: `max(1, floor(γ · min(mk, nk)))`.
pub fn layer_rank_conv(in_ch: usize, out_ch: usize, k: usize, gamma: f64) -> Result<usize> {
    check_ratio(gamma)?;
    let full = (in_ch * k).min(out_ch * k);
    Ok(((gamma * full as f64).floor() as usize).max(1))
}

/// Rank for a dense layer from a rank ratio: `max(1, floor(γ · min(m, n)))`.
pub fn layer_rank_dense(in_dim: usize, out_dim: usize, gamma: f64) -> Result<usize> {
    check_ratio(gamma)?;
    let full = in_dim.min(out_dim);
    Ok(((gamma * full as f64).floor() as usize).max(1))
}

fn check_ratio(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "rank ratio must lie in (0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Trainable parameter count of a single layer descriptor.
///
/// Dense mn (+n bias), factorized dense r(m+n) (+n bias), conv mnk²,
/// factorized conv rk(m+n), batch norm 2·channels.
pub fn layer_params(desc: &LayerDesc) -> usize {
    match *desc {
        LayerDesc::Dense { in_dim, out_dim, bias } => {
            in_dim * out_dim + if bias { out_dim } else { 0 }
        }
        LayerDesc::FactorizedDense {
            in_dim,
            out_dim,
            rank,
            bias,
        } => rank * (in_dim + out_dim) + if bias { out_dim } else { 0 },
        LayerDesc::Conv {
            in_ch,
            out_ch,
            kernel,
            ..
        } => in_ch * out_ch * kernel * kernel,
        LayerDesc::FactorizedConv {
            in_ch,
            out_ch,
            kernel,
            rank,
            ..
        } => rank * kernel * (in_ch + out_ch),
        LayerDesc::BatchNorm { channels } => 2 * channels,
        LayerDesc::Relu | LayerDesc::GlobalAvgPool | LayerDesc::Flatten => 0,
    }
}

/// Total trainable parameter count of a model spec.
pub fn count_params(spec: &ModelSpec) -> usize {
    let mut total = 0usize;
    for block in &spec.blocks {
        match &block.desc {
            BlockDesc::Plain(l) => total += layer_params(l),
            BlockDesc::Residual { main, shortcut } => {
                total += main.iter().map(layer_params).sum::<usize>();
                total += shortcut.iter().map(layer_params).sum::<usize>();
            }
        }
    }
    total
}

/// Forward multiply-accumulate count of a model spec for one input sample.
///
/// Conv layers cost mnk²·H'W' with output spatial dims; factorized conv
/// pairs cost rk·(m·H_u W_u + n·H_v W_v), which at stride 1 equals
/// rkHW(m+n). Dense layers cost mn, factorized dense r(m+n). Normalization,
/// activations, and pooling are not counted.
pub fn count_macs(spec: &ModelSpec, input_hw: (usize, usize)) -> Result<u64> {
    let mut shape = match spec.input {
        InputSpec::Image { channels } => SymShape::Image {
            ch: channels,
            h: input_hw.0,
            w: input_hw.1,
        },
        InputSpec::Vector { dim } => SymShape::Vector { dim },
    };
    let mut total: u64 = 0;
    for block in &spec.blocks {
        match &block.desc {
            BlockDesc::Plain(l) => {
                let (macs, next) = layer_macs(l, &shape)?;
                total += macs;
                shape = next;
            }
            BlockDesc::Residual { main, shortcut } => {
                let mut s_main = shape.clone();
                for l in main {
                    let (macs, next) = layer_macs(l, &s_main)?;
                    total += macs;
                    s_main = next;
                }
                let mut s_short = shape.clone();
                for l in shortcut {
                    let (macs, next) = layer_macs(l, &s_short)?;
                    total += macs;
                    s_short = next;
                }
                shape = s_main;
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug)]
enum SymShape {
    Image { ch: usize, h: usize, w: usize },
    Vector { dim: usize },
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::dimension(format!(
            "conv output extent non-positive: input {extent}, kernel {k}, pad {pad}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn layer_macs(desc: &LayerDesc, shape: &SymShape) -> Result<(u64, SymShape)> {
    match (desc, shape) {
        (
            LayerDesc::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
            },
            SymShape::Image { ch, h, w },
        ) => {
            if ch != in_ch {
                return Err(Error::dimension("conv input channels"));
            }
            let oh = conv_out(*h, *kernel, *stride, *pad)?;
            let ow = conv_out(*w, *kernel, *stride, *pad)?;
            let macs = (in_ch * out_ch * kernel * kernel) as u64 * (oh * ow) as u64;
            Ok((
                macs,
                SymShape::Image {
                    ch: *out_ch,
                    h: oh,
                    w: ow,
                },
            ))
        }
        (
            LayerDesc::FactorizedConv {
                in_ch,
                out_ch,
                kernel,
                stride,
                pad,
                rank,
            },
            SymShape::Image { ch, h, w },
        ) => {
            if ch != in_ch {
                return Err(Error::dimension("factorized conv input channels"));
            }
            // U conv: (k,1) kernel, stride (s,1), pad (p,0)
            let uh = conv_out(*h, *kernel, *stride, *pad)?;
            let uw = *w;
            let u_macs = (rank * in_ch * kernel) as u64 * (uh * uw) as u64;
            // V conv: (1,k) kernel, stride (1,s), pad (0,p)
            let vh = uh;
            let vw = conv_out(*w, *kernel, *stride, *pad)?;
            let v_macs = (out_ch * rank * kernel) as u64 * (vh * vw) as u64;
            Ok((
                u_macs + v_macs,
                SymShape::Image {
                    ch: *out_ch,
                    h: vh,
                    w: vw,
                },
            ))
        }
        (LayerDesc::Dense { in_dim, out_dim, .. }, SymShape::Vector { dim }) => {
            if dim != in_dim {
                return Err(Error::dimension("dense input dim"));
            }
            Ok(((in_dim * out_dim) as u64, SymShape::Vector { dim: *out_dim }))
        }
        (
            LayerDesc::FactorizedDense {
                in_dim,
                out_dim,
                rank,
                ..
            },
            SymShape::Vector { dim },
        ) => {
            if dim != in_dim {
                return Err(Error::dimension("factorized dense input dim"));
            }
            Ok((
                (rank * (in_dim + out_dim)) as u64,
                SymShape::Vector { dim: *out_dim },
            ))
        }
        (LayerDesc::BatchNorm { channels }, SymShape::Image { ch, .. }) => {
            if ch != channels {
                return Err(Error::dimension("batchnorm channels"));
            }
            Ok((0, shape.clone()))
        }
        (LayerDesc::Relu, _) => Ok((0, shape.clone())),
        (LayerDesc::GlobalAvgPool, SymShape::Image { ch, .. }) => Ok((
            0,
            SymShape::Image {
                ch: *ch,
                h: 1,
                w: 1,
            },
        )),
        (LayerDesc::Flatten, SymShape::Image { ch, h, w }) => Ok((
            0,
            SymShape::Vector { dim: ch * h * w },
        )),
        _ => Err(Error::dimension(format!(
            "layer {:?} does not accept shape {:?}",
            desc, shape
        ))),
    }
}
