//! Forward and backward passes of the individual layers.
//!
//! Activations are `(rows, time, maps)` arrays where each row is one EEG
//! channel of one window; filters slide along time only, so rows never mix
//! except in batch normalisation and the global head.

use ndarray::{linalg::general_mat_mul, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Result, SdaError};

pub const KERNEL: usize = 3;
pub const POOL_SIZE: usize = 4;
pub const POOL_STRIDE: usize = 3;
pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// `(rows, time, maps)` activation tensor.
pub type Tensor3 = Array3<f64>;

fn check_finite_shape(x: &ArrayView3<f64>) -> Result<()> {
    let (r, l, f) = x.dim();
    if r == 0 || l == 0 || f == 0 {
        return Err(SdaError::Shape(format!("empty tensor {r}x{l}x{f}")));
    }
    Ok(())
}

/// Unfolds `x` into `(rows*len, KERNEL*maps)` with zero "same" padding:
/// column `k*maps + f` of row `(r, t)` holds `x[r, t+k-1, f]`.
fn im2col(x: &ArrayView3<f64>) -> Array2<f64> {
    let (rows, len, maps) = x.dim();
    let mut cols = Array2::zeros((rows * len, KERNEL * maps));
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    let row_w = KERNEL * maps;
    for r in 0..rows {
        for t in 0..len {
            let out = &mut dst[(r * len + t) * row_w..(r * len + t + 1) * row_w];
            for k in 0..KERNEL {
                let ti = t as isize + k as isize - 1;
                if ti < 0 || ti >= len as isize {
                    continue;
                }
                let at = (r * len + ti as usize) * maps;
                out[k * maps..(k + 1) * maps].copy_from_slice(&src[at..at + maps]);
            }
        }
    }
    cols
}

/// Inverse scatter of [`im2col`]: accumulates column gradients back onto
/// the input positions they were read from.
fn col2im(gcols: &Array2<f64>, rows: usize, len: usize, maps: usize) -> Array3<f64> {
    let mut gx = Array3::zeros((rows, len, maps));
    let src = gcols.as_slice().expect("standard layout");
    let dst = gx.as_slice_mut().expect("fresh array");
    let row_w = KERNEL * maps;
    for r in 0..rows {
        for t in 0..len {
            let g = &src[(r * len + t) * row_w..(r * len + t + 1) * row_w];
            for k in 0..KERNEL {
                let ti = t as isize + k as isize - 1;
                if ti < 0 || ti >= len as isize {
                    continue;
                }
                let at = (r * len + ti as usize) * maps;
                for (d, s) in dst[at..at + maps].iter_mut().zip(&g[k * maps..(k + 1) * maps]) {
                    *d += s;
                }
            }
        }
    }
    gx
}

fn weight_matrix<'a>(w: &'a Array3<f64>) -> ArrayView2<'a, f64> {
    let (k, f, g) = w.dim();
    w.view()
        .into_shape_with_order((k * f, g))
        .expect("weights in standard layout")
}

/// Kernel-3, stride-1 convolution along time with zero "same" padding.
/// `weights` is `(KERNEL, maps_in, maps_out)`.
pub fn conv1d_forward(x: &ArrayView3<f64>, weights: &Array3<f64>, bias: &Array1<f64>) -> Result<Tensor3> {
    check_finite_shape(x)?;
    let (rows, len, maps_in) = x.dim();
    let (k, w_in, maps_out) = weights.dim();
    if k != KERNEL || w_in != maps_in || bias.len() != maps_out {
        return Err(SdaError::Shape(format!(
            "conv weights {k}x{w_in}x{maps_out} / bias {} do not fit input with {maps_in} maps",
            bias.len()
        )));
    }
    let cols = im2col(x);
    let mut out = Array2::zeros((rows * len, maps_out));
    out.rows_mut().into_iter().for_each(|mut r| r.assign(bias));
    general_mat_mul(1.0, &cols, &weight_matrix(weights), 1.0, &mut out);
    Ok(out
        .into_shape_with_order((rows, len, maps_out))
        .expect("row-major result"))
}

pub struct ConvGrads {
    /// `None` when the input gradient was not requested.
    pub input: Option<Tensor3>,
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
}

/// Exact gradients of [`conv1d_forward`] given its input and the
/// upstream gradient.
pub fn conv1d_backward(
    x: &ArrayView3<f64>,
    weights: &Array3<f64>,
    grad_out: &ArrayView3<f64>,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let (rows, len, maps_in) = x.dim();
    let (k, w_in, maps_out) = weights.dim();
    if grad_out.dim() != (rows, len, maps_out) || k != KERNEL || w_in != maps_in {
        return Err(SdaError::Shape(format!(
            "conv backward: input {:?}, weights {:?}, upstream {:?}",
            x.dim(),
            weights.dim(),
            grad_out.dim()
        )));
    }
    let gy_std = grad_out.as_standard_layout();
    let gy = gy_std
        .view()
        .into_shape_with_order((rows * len, maps_out))
        .expect("standard layout");
    let cols = im2col(x);

    let mut gw = Array2::zeros((KERNEL * maps_in, maps_out));
    general_mat_mul(1.0, &cols.t(), &gy, 0.0, &mut gw);
    let gb = gy.sum_axis(Axis(0));

    let input = if need_input_grad {
        let mut gcols = Array2::zeros((rows * len, KERNEL * maps_in));
        general_mat_mul(1.0, &gy, &weight_matrix(weights).t(), 0.0, &mut gcols);
        Some(col2im(&gcols, rows, len, maps_in))
    } else {
        None
    };
    Ok(ConvGrads {
        input,
        weights: gw
            .into_shape_with_order((KERNEL, maps_in, maps_out))
            .expect("row-major"),
        bias: gb,
    })
}

pub fn relu_forward(x: &mut Tensor3) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` where the activation was not strictly positive. Works with
/// either the pre- or post-activation values since both share a sign.
pub fn relu_backward(activation: &Tensor3, grad: &mut Tensor3) {
    ndarray::Zip::from(grad)
        .and(activation)
        .for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Saved state from a training-mode batch-norm forward.
pub struct BatchNormCache {
    pub normalized: Tensor3,
    pub inv_std: Array1<f64>,
    pub batch_mean: Array1<f64>,
    pub batch_var: Array1<f64>,
}

/// Per-map statistics over (window, EEG channel, time).
fn map_statistics(x: &Tensor3) -> (Array1<f64>, Array1<f64>) {
    let (r, l, f) = x.dim();
    let flat = x.view().into_shape_with_order((r * l, f)).expect("standard layout");
    let n = (r * l) as f64;
    let mean = flat.sum_axis(Axis(0)) / n;
    let mut var = Array1::zeros(f);
    for row in flat.rows() {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    (mean, var / n)
}

/// Training-mode batch norm using the batch's own statistics.
pub fn batchnorm_forward_train(x: &Tensor3, gamma: &Array1<f64>, beta: &Array1<f64>) -> Result<(Tensor3, BatchNormCache)> {
    let f = x.dim().2;
    if gamma.len() != f || beta.len() != f {
        return Err(SdaError::Shape(format!("batch norm over {f} maps with {} gammas", gamma.len())));
    }
    let (mean, var) = map_statistics(x);
    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPSILON).sqrt());
    let mut normalized = x.clone();
    for mut lane in normalized.lanes_mut(Axis(2)) {
        for ((v, &m), &s) in lane.iter_mut().zip(&mean).zip(&inv_std) {
            *v = (*v - m) * s;
        }
    }
    let mut out = normalized.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        for ((v, &g), &b) in lane.iter_mut().zip(gamma).zip(beta) {
            *v = *v * g + b;
        }
    }
    Ok((
        out,
        BatchNormCache {
            normalized,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    ))
}

/// Inference-mode batch norm with fixed running statistics.
pub fn batchnorm_forward_infer(
    x: &Tensor3,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    running_mean: &Array1<f64>,
    running_var: &Array1<f64>,
) -> Tensor3 {
    let scale: Array1<f64> = gamma
        .iter()
        .zip(running_var)
        .map(|(g, v)| g / (v + BN_EPSILON).sqrt())
        .collect();
    let shift: Array1<f64> = beta
        .iter()
        .zip(running_mean)
        .zip(&scale)
        .map(|((b, m), s)| b - m * s)
        .collect();
    let mut out = x.clone();
    for mut lane in out.lanes_mut(Axis(2)) {
        for ((v, &s), &b) in lane.iter_mut().zip(&scale).zip(&shift) {
            *v = *v * s + b;
        }
    }
    out
}

pub struct BatchNormGrads {
    pub input: Tensor3,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub fn batchnorm_backward(cache: &BatchNormCache, gamma: &Array1<f64>, grad_out: &Tensor3) -> BatchNormGrads {
    let (r, l, f) = grad_out.dim();
    let n = (r * l) as f64;
    let mut g_gamma = Array1::zeros(f);
    let mut g_beta = Array1::zeros(f);
    for (gl, xl) in grad_out.lanes(Axis(2)).into_iter().zip(cache.normalized.lanes(Axis(2))) {
        for m in 0..f {
            g_gamma[m] += gl[m] * xl[m];
            g_beta[m] += gl[m];
        }
    }
    // d xhat = dy * gamma; sum(d xhat) = gamma * g_beta; sum(d xhat * xhat) = gamma * g_gamma.
    let mut input = Array3::zeros((r, l, f));
    for ((mut il, gl), xl) in input
        .lanes_mut(Axis(2))
        .into_iter()
        .zip(grad_out.lanes(Axis(2)))
        .zip(cache.normalized.lanes(Axis(2)))
    {
        for m in 0..f {
            let dxhat = gl[m] * gamma[m];
            il[m] = cache.inv_std[m] / n
                * (n * dxhat - gamma[m] * g_beta[m] - xl[m] * gamma[m] * g_gamma[m]);
        }
    }
    BatchNormGrads {
        input,
        gamma: g_gamma,
        beta: g_beta,
    }
}

pub fn pooled_len(len: usize) -> Option<usize> {
    (len >= POOL_SIZE).then(|| (len - POOL_SIZE) / POOL_STRIDE + 1)
}

/// Average pooling over time, size 4, stride 3.
pub fn avgpool_forward(x: &Tensor3) -> Result<Tensor3> {
    let (r, l, f) = x.dim();
    let lo = pooled_len(l).ok_or_else(|| SdaError::Shape(format!("pooling needs length >= {POOL_SIZE}, got {l}")))?;
    let mut out = Array3::zeros((r, lo, f));
    for ri in 0..r {
        for t in 0..lo {
            let mut o = out.slice_mut(ndarray::s![ri, t, ..]);
            for k in 0..POOL_SIZE {
                o += &x.slice(ndarray::s![ri, t * POOL_STRIDE + k, ..]);
            }
            o /= POOL_SIZE as f64;
        }
    }
    Ok(out)
}

pub fn avgpool_backward(grad_out: &Tensor3, input_len: usize) -> Tensor3 {
    let (r, lo, f) = grad_out.dim();
    let mut gx = Array3::zeros((r, input_len, f));
    for ri in 0..r {
        for t in 0..lo {
            let g = grad_out.slice(ndarray::s![ri, t, ..]).mapv(|v| v / POOL_SIZE as f64);
            for k in 0..POOL_SIZE {
                let mut dst = gx.slice_mut(ndarray::s![ri, t * POOL_STRIDE + k, ..]);
                dst += &g;
            }
        }
    }
    gx
}

pub struct HeadCache {
    /// Winning EEG channel per (window, map).
    pub argmax: Array2<usize>,
    pub len: usize,
    pub channels: usize,
}

/// Global pooling: mean over time per (channel, map), then max over the
/// EEG channels of each window. Rows are grouped `channels` at a time.
/// Returns `(windows, maps)` logits. Ties go to the first channel.
pub fn global_head_forward(x: &Tensor3, channels: usize) -> Result<(Array2<f64>, HeadCache)> {
    let (rows, len, maps) = x.dim();
    if channels == 0 || rows % channels != 0 {
        return Err(SdaError::Shape(format!("{rows} rows do not split into windows of {channels} channels")));
    }
    let windows = rows / channels;
    let means = x.mean_axis(Axis(1)).expect("non-empty time axis");
    let mut logits = Array2::zeros((windows, maps));
    let mut argmax = Array2::zeros((windows, maps));
    for w in 0..windows {
        for m in 0..maps {
            let mut best = 0;
            for c in 1..channels {
                if means[[w * channels + c, m]] > means[[w * channels + best, m]] {
                    best = c;
                }
            }
            logits[[w, m]] = means[[w * channels + best, m]];
            argmax[[w, m]] = best;
        }
    }
    Ok((logits, HeadCache { argmax, len, channels }))
}

pub fn global_head_backward(cache: &HeadCache, grad_logits: &Array2<f64>) -> Tensor3 {
    let (windows, maps) = grad_logits.dim();
    let mut gx = Array3::zeros((windows * cache.channels, cache.len, maps));
    let scale = 1.0 / cache.len as f64;
    for w in 0..windows {
        for m in 0..maps {
            let row = w * cache.channels + cache.argmax[[w, m]];
            let g = grad_logits[[w, m]] * scale;
            gx.slice_mut(ndarray::s![row, .., m]).fill(g);
        }
    }
    gx
}

/// Max-shifted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
