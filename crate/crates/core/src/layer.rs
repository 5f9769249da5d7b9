//! Layer definitions and their forward/backward kernels.
//!
//! Layout conventions, chosen so the hot inner loops run over contiguous
//! memory:
//! - activations are NHWC: `[batch, height, width, channels]`
//! - conv weights are `[ky, kx, in_channel, out_channel]` (out contiguous)
//! - dense weights are `[input, output]` (output contiguous)
//!
//! Backward kernels take the parameter-gradient buffers as an `Option` so
//! attack code that only needs input gradients can skip that work.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One layer of a feed-forward network.
///
/// Spatial layers use square kernels/windows and symmetric zero padding.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Fully connected layer; `l2` is the weight-decay coefficient applied
    /// to its weights (not biases) during training.
    Dense {
        inputs: usize,
        outputs: usize,
        l2: f64,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    /// Inverted dropout: training scales kept activations by `1 / keep`, so
    /// evaluation is the identity and expectations match between modes.
    Dropout {
        keep: f64,
    },
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
        }
    }

    /// Validates the layer's own hyperparameters.
    pub fn validate(&self, context: &str) -> Result<()> {
        match *self {
            LayerSpec::Dense {
                inputs,
                outputs,
                l2,
            } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::config(context, "dense dimensions must be positive"));
                }
                if !(l2 >= 0.0 && l2.is_finite()) {
                    return Err(Error::config(context, "dense l2 must be finite and >= 0"));
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(Error::config(
                        context,
                        "conv2d channels, kernel, and stride must be positive",
                    ));
                }
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if window == 0 || stride == 0 {
                    return Err(Error::config(
                        context,
                        "maxpool2d window and stride must be positive",
                    ));
                }
            }
            LayerSpec::Dropout { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(Error::config(context, "dropout keep must be in (0, 1]"));
                }
            }
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Per-example output shape for a given per-example input shape.
    pub fn output_shape(&self, input: &[usize], context: &str) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => {
                if input != [inputs] {
                    return Err(Error::shape(
                        context,
                        format!("dense expects input shape [{inputs}], got {input:?}"),
                    ));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                stride,
                padding,
                out_channels,
            } => {
                let [h, w, c] = spatial3(input, context, "conv2d")?;
                if c != in_channels {
                    return Err(Error::shape(
                        context,
                        format!("conv2d expects {in_channels} input channels, got {c}"),
                    ));
                }
                let oh = conv_out_dim(h, kernel, stride, padding, context)?;
                let ow = conv_out_dim(w, kernel, stride, padding, context)?;
                Ok(vec![oh, ow, out_channels])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let [h, w, c] = spatial3(input, context, "maxpool2d")?;
                let oh = conv_out_dim(h, window, stride, 0, context)?;
                let ow = conv_out_dim(w, window, stride, 0, context)?;
                Ok(vec![oh, ow, c])
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::shape(
                        context,
                        format!("softmax expects a rank-1 input, got {input:?}"),
                    ));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Weight and bias shapes, when the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Dense {
                inputs, outputs, ..
            } => Some((vec![inputs, outputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![kernel, kernel, in_channels, out_channels],
                vec![out_channels],
            )),
            _ => None,
        }
    }

    /// Fan-in used for weight initialization.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { inputs, .. } => Some(inputs),
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => Some(kernel * kernel * in_channels),
            _ => None,
        }
    }
}

fn spatial3(input: &[usize], context: &str, kind: &str) -> Result<[usize; 3]> {
    match input {
        [h, w, c] => Ok([*h, *w, *c]),
        other => Err(Error::shape(
            context,
            format!("{kind} expects input shape [h, w, c], got {other:?}"),
        )),
    }
}

fn conv_out_dim(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    context: &str,
) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel {
        return Err(Error::shape(
            context,
            format!("window {kernel} larger than padded input extent {padded}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// Dense kernels
// ---------------------------------------------------------------------------

pub(crate) fn dense_forward<F: Scalar>(
    x: &[F],
    n: usize,
    d_in: usize,
    d_out: usize,
    w: &[F],
    b: &[F],
    y: &mut [F],
) {
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let yi = &mut y[i * d_out..(i + 1) * d_out];
        yi.copy_from_slice(b);
        for (k, xv) in xi.iter().enumerate() {
            // Post-relu activations are often exactly zero; skipping them
            // roughly halves the axpy work.
            if *xv == F::zero() {
                continue;
            }
            let wrow = &w[k * d_out..(k + 1) * d_out];
            for (a, wv) in yi.iter_mut().zip(wrow) {
                *a += *xv * *wv;
            }
        }
    }
}

pub(crate) fn dense_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    n: usize,
    d_in: usize,
    d_out: usize,
    w: &[F],
    dx: &mut [F],
    mut params: Option<(&mut [F], &mut [F])>,
) {
    for i in 0..n {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let gi = &dy[i * d_out..(i + 1) * d_out];
        let dxi = &mut dx[i * d_in..(i + 1) * d_in];
        if let Some((_, db)) = params.as_mut() {
            for (d, gv) in db.iter_mut().zip(gi) {
                *d += *gv;
            }
        }
        for k in 0..d_in {
            let wrow = &w[k * d_out..(k + 1) * d_out];
            let mut s = F::zero();
            for (gv, wv) in gi.iter().zip(wrow) {
                s += *gv * *wv;
            }
            dxi[k] = s;
            if let Some((dw, _)) = params.as_mut() {
                let xv = xi[k];
                if xv != F::zero() {
                    let dwrow = &mut dw[k * d_out..(k + 1) * d_out];
                    for (d, gv) in dwrow.iter_mut().zip(gi) {
                        *d += xv * *gv;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conv2d kernels
// ---------------------------------------------------------------------------

pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv2d_forward<F: Scalar>(x: &[F], wt: &[F], b: &[F], y: &mut [F], d: &ConvDims) {
    let in_plane = d.h * d.w * d.c_in;
    let out_plane = d.oh * d.ow * d.c_out;
    for i in 0..d.n {
        let xi = &x[i * in_plane..(i + 1) * in_plane];
        let yi = &mut y[i * out_plane..(i + 1) * out_plane];
        for oy in 0..d.oh {
            let iy0 = (oy * d.stride) as isize - d.padding as isize;
            for ox in 0..d.ow {
                let ix0 = (ox * d.stride) as isize - d.padding as isize;
                let acc = &mut yi[(oy * d.ow + ox) * d.c_out..][..d.c_out];
                acc.copy_from_slice(b);
                for ky in 0..d.kernel {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kernel {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * d.w + ix as usize) * d.c_in;
                        let woff = (ky * d.kernel + kx) * d.c_in * d.c_out;
                        for ic in 0..d.c_in {
                            let xv = xi[xoff + ic];
                            if xv == F::zero() {
                                continue;
                            }
                            let wrow = &wt[woff + ic * d.c_out..][..d.c_out];
                            for (a, wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * *wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<F: Scalar>(
    x: &[F],
    dy: &[F],
    wt: &[F],
    dx: &mut [F],
    mut params: Option<(&mut [F], &mut [F])>,
    d: &ConvDims,
) {
    let in_plane = d.h * d.w * d.c_in;
    let out_plane = d.oh * d.ow * d.c_out;
    for i in 0..d.n {
        let xi = &x[i * in_plane..(i + 1) * in_plane];
        let dxi = &mut dx[i * in_plane..(i + 1) * in_plane];
        let dyi = &dy[i * out_plane..(i + 1) * out_plane];
        for oy in 0..d.oh {
            let iy0 = (oy * d.stride) as isize - d.padding as isize;
            for ox in 0..d.ow {
                let ix0 = (ox * d.stride) as isize - d.padding as isize;
                let g = &dyi[(oy * d.ow + ox) * d.c_out..][..d.c_out];
                if let Some((_, db)) = params.as_mut() {
                    for (dbv, gv) in db.iter_mut().zip(g) {
                        *dbv += *gv;
                    }
                }
                for ky in 0..d.kernel {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    for kx in 0..d.kernel {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        let xoff = (iy as usize * d.w + ix as usize) * d.c_in;
                        let woff = (ky * d.kernel + kx) * d.c_in * d.c_out;
                        for ic in 0..d.c_in {
                            let wrow = &wt[woff + ic * d.c_out..][..d.c_out];
                            let mut s = F::zero();
                            for (gv, wv) in g.iter().zip(wrow) {
                                s += *gv * *wv;
                            }
                            dxi[xoff + ic] += s;
                            if let Some((dw, _)) = params.as_mut() {
                                let xv = xi[xoff + ic];
                                if xv != F::zero() {
                                    let dwrow = &mut dw[woff + ic * d.c_out..][..d.c_out];
                                    for (dv, gv) in dwrow.iter_mut().zip(g) {
                                        *dv += xv * *gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Relu
// ---------------------------------------------------------------------------

pub(crate) fn relu_forward<F: Scalar>(x: &[F], y: &mut [F]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = if *xv > F::zero() { *xv } else { F::zero() };
    }
}

/// Subgradient at the kink is taken as zero.
pub(crate) fn relu_backward<F: Scalar>(x: &[F], dy: &[F], dx: &mut [F]) {
    for ((dxv, xv), gv) in dx.iter_mut().zip(x).zip(dy) {
        *dxv = if *xv > F::zero() { *gv } else { F::zero() };
    }
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

pub(crate) struct PoolDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Forward max pooling; `idx` records, per output element, the flat offset of
/// the winning input element within its example (first occurrence wins ties).
pub(crate) fn maxpool_forward<F: Scalar>(x: &[F], y: &mut [F], idx: &mut [u32], d: &PoolDims) {
    let in_plane = d.h * d.w * d.c;
    let out_plane = d.oh * d.ow * d.c;
    let mut best = vec![F::neg_infinity(); d.c];
    let mut best_at = vec![0u32; d.c];
    for i in 0..d.n {
        let xi = &x[i * in_plane..(i + 1) * in_plane];
        let yi = &mut y[i * out_plane..(i + 1) * out_plane];
        let idxi = &mut idx[i * out_plane..(i + 1) * out_plane];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                best.fill(F::neg_infinity());
                for wy in 0..d.window {
                    let iy = oy * d.stride + wy;
                    for wx in 0..d.window {
                        let ix = ox * d.stride + wx;
                        let off = (iy * d.w + ix) * d.c;
                        let row = &xi[off..off + d.c];
                        for (c, v) in row.iter().enumerate() {
                            if *v > best[c] {
                                best[c] = *v;
                                best_at[c] = (off + c) as u32;
                            }
                        }
                    }
                }
                let o = (oy * d.ow + ox) * d.c;
                yi[o..o + d.c].copy_from_slice(&best);
                idxi[o..o + d.c].copy_from_slice(&best_at);
            }
        }
    }
}

/// Smallest gap between a pool window's maximum and its runner-up, over all
/// windows. A gap near zero means the argmax can flip under a finite
/// perturbation, making the pooled output locally non-differentiable.
pub(crate) fn maxpool_tie_margin<F: Scalar>(x: &[F], d: &PoolDims) -> f64 {
    let in_plane = d.h * d.w * d.c;
    let mut best = vec![F::neg_infinity(); d.c];
    let mut second = vec![F::neg_infinity(); d.c];
    let mut margin = f64::INFINITY;
    for i in 0..d.n {
        let xi = &x[i * in_plane..(i + 1) * in_plane];
        for oy in 0..d.oh {
            for ox in 0..d.ow {
                best.fill(F::neg_infinity());
                second.fill(F::neg_infinity());
                for wy in 0..d.window {
                    let iy = oy * d.stride + wy;
                    for wx in 0..d.window {
                        let ix = ox * d.stride + wx;
                        let off = (iy * d.w + ix) * d.c;
                        for (c, v) in xi[off..off + d.c].iter().enumerate() {
                            if *v > best[c] {
                                second[c] = best[c];
                                best[c] = *v;
                            } else if *v > second[c] {
                                second[c] = *v;
                            }
                        }
                    }
                }
                for c in 0..d.c {
                    if second[c].is_finite() {
                        margin = margin.min((best[c] - second[c]).as_f64());
                    }
                }
            }
        }
    }
    margin
}

pub(crate) fn maxpool_backward<F: Scalar>(dy: &[F], idx: &[u32], dx: &mut [F], d: &PoolDims) {
    let in_plane = d.h * d.w * d.c;
    let out_plane = d.oh * d.ow * d.c;
    for i in 0..d.n {
        let dxi = &mut dx[i * in_plane..(i + 1) * in_plane];
        let dyi = &dy[i * out_plane..(i + 1) * out_plane];
        let idxi = &idx[i * out_plane..(i + 1) * out_plane];
        for (gv, at) in dyi.iter().zip(idxi) {
            dxi[*at as usize] += *gv;
        }
    }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

/// Training-mode dropout; writes the applied mask (0 or 1/keep) for backward.
pub(crate) fn dropout_forward_train<F: Scalar>(
    x: &[F],
    keep: f64,
    rng: &mut impl Rng,
    y: &mut [F],
    mask: &mut [F],
) {
    let scale = F::from_f64(1.0 / keep);
    for ((yv, mv), xv) in y.iter_mut().zip(mask.iter_mut()).zip(x) {
        let m = if rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        };
        *mv = m;
        *yv = *xv * m;
    }
}

pub(crate) fn dropout_backward_train<F: Scalar>(dy: &[F], mask: &[F], dx: &mut [F]) {
    for ((dxv, gv), mv) in dx.iter_mut().zip(dy).zip(mask) {
        *dxv = *gv * *mv;
    }
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

/// Numerically stable row-wise softmax.
pub(crate) fn softmax_forward<F: Scalar>(x: &[F], n: usize, k: usize, y: &mut [F]) {
    for i in 0..n {
        let xi = &x[i * k..(i + 1) * k];
        let yi = &mut y[i * k..(i + 1) * k];
        let m = xi.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for (yv, xv) in yi.iter_mut().zip(xi) {
            let e = (*xv - m).exp();
            *yv = e;
            sum += e;
        }
        for yv in yi.iter_mut() {
            *yv /= sum;
        }
    }
}

/// Vector-Jacobian product of softmax: `dx = p * (dy - <dy, p>)` per row.
pub(crate) fn softmax_vjp<F: Scalar>(p: &[F], dy: &[F], n: usize, k: usize, dx: &mut [F]) {
    for i in 0..n {
        let pi = &p[i * k..(i + 1) * k];
        let gi = &dy[i * k..(i + 1) * k];
        let dxi = &mut dx[i * k..(i + 1) * k];
        let mut dot = F::zero();
        for (gv, pv) in gi.iter().zip(pi) {
            dot += *gv * *pv;
        }
        for ((dxv, pv), gv) in dxi.iter_mut().zip(pi).zip(gi) {
            *dxv = *pv * (*gv - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes_follow_conv_arithmetic() {
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 16,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!(
            conv.output_shape(&[28, 28, 1], "test").unwrap(),
            vec![14, 14, 16]
        );
        let pool = LayerSpec::MaxPool2d {
            window: 2,
            stride: 2,
        };
        assert_eq!(
            pool.output_shape(&[14, 14, 16], "test").unwrap(),
            vec![7, 7, 16]
        );
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let conv = LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            padding: 0,
        };
        assert!(conv.output_shape(&[8, 8, 1], "test").is_err());
    }

    #[test]
    fn dense_forward_matches_hand_computation() {
        // x = [1, 2], W = [[1, -1], [0.5, 2]], b = [0.25, -0.25]
        // y = [1*1 + 2*0.5 + 0.25, 1*-1 + 2*2 - 0.25] = [2.25, 2.75]
        let x = [1.0f64, 2.0];
        let w = [1.0, -1.0, 0.5, 2.0];
        let b = [0.25, -0.25];
        let mut y = [0.0; 2];
        dense_forward(&x, 1, 2, 2, &w, &b, &mut y);
        assert!((y[0] - 2.25).abs() < 1e-12);
        assert!((y[1] - 2.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_order_is_preserved() {
        let x = [2.0f64, -1.0, 0.5, 1000.0, 999.0, -1000.0];
        let mut y = [0.0; 6];
        softmax_forward(&x, 2, 3, &mut y);
        for i in 0..2 {
            let s: f64 = y[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(y[0] > y[2] && y[2] > y[1]);
        assert!(y[3] > y[4] && y[4] > y[5]);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn maxpool_ties_take_first_occurrence() {
        // 2x2 input, one channel, all equal: index 0 must win.
        let x = [3.0f32, 3.0, 3.0, 3.0];
        let d = PoolDims {
            n: 1,
            h: 2,
            w: 2,
            c: 1,
            window: 2,
            stride: 2,
            oh: 1,
            ow: 1,
        };
        let mut y = [0.0f32; 1];
        let mut idx = [0u32; 1];
        maxpool_forward(&x, &mut y, &mut idx, &d);
        assert_eq!(y[0], 3.0);
        assert_eq!(idx[0], 0);
    }
}
