//! Forward kernels for every tensor operation, plus the matching analytic
//! backward kernels used by the recorded graph.
//!
//! Forward functions are pure: inputs are borrowed, the output is a fresh
//! tensor. Backward kernels take the upstream gradient and scatter into
//! freshly allocated input gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{ConvSpec, Tensor};

// ---------------------------------------------------------------------------
// conv2d

fn check_conv_shapes(input: &Tensor, weight: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<()> {
    let [_, c_in, _, _] = input.shape();
    let [c_out, wc, wkh, wkw] = weight.shape();
    let g = spec.groups;
    if g == 0 {
        return Err(Error::invalid("group count must be >= 1"));
    }
    if c_in % g != 0 {
        return Err(Error::shape("input channels", c_in.next_multiple_of(g), c_in, format!("not divisible by {g} groups")));
    }
    if c_out % g != 0 {
        return Err(Error::shape("output channels", c_out.next_multiple_of(g), c_out, format!("not divisible by {g} groups")));
    }
    if wc != c_in / g {
        return Err(Error::shape("weight channels", c_in / g, wc, "conv2d weight vs input channels / groups"));
    }
    if (wkh, wkw) != spec.kernel {
        return Err(Error::shape("weight kernel height", spec.kernel.0, wkh, "conv2d weight vs spec kernel"));
    }
    if bias.len() != c_out {
        return Err(Error::shape("bias length", c_out, bias.len(), "conv2d bias vs output channels"));
    }
    Ok(())
}

/// Grouped 2-D convolution (cross-correlation, the CNN convention).
///
/// `input` is (N, C_in, H, W), `weight` is (C_out, C_in/g, kh, kw), `bias`
/// has one entry per output channel. Channels are partitioned into `g`
/// independent blocks.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &[f64], spec: &ConvSpec) -> Result<Tensor> {
    check_conv_shapes(input, weight, bias, spec)?;
    let [n, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = weight.shape();
    let (oh, ow) = spec.out_size(h, w)?;
    let g = spec.groups;
    let cig = c_in / g;
    let cog = c_out / g;
    let pad = spec.padding as isize;
    let stride = spec.stride;

    let mut out = Tensor::zeros([n, c_out, oh, ow]);
    for b in 0..n {
        for oc in 0..c_out {
            let gi = oc / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for icl in 0..cig {
                        let ic = gi * cig + icl;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at(b, ic, iy as usize, ix as usize)
                                    * weight.at(oc, icl, ky, kx);
                            }
                        }
                    }
                    *out.at_mut(b, oc, oy, ox) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`conv2d`]: gradients w.r.t. input, weight and bias.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Vec<f64>) {
    let [n, c_in, h, w] = input.shape();
    let [c_out, _, kh, kw] = weight.shape();
    let [_, _, oh, ow] = grad_out.shape();
    let g = spec.groups;
    let cig = c_in / g;
    let cog = c_out / g;
    let pad = spec.padding as isize;
    let stride = spec.stride;

    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = vec![0.0; c_out];
    for b in 0..n {
        for oc in 0..c_out {
            let gi = oc / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out.at(b, oc, oy, ox);
                    gb[oc] += go;
                    for icl in 0..cig {
                        let ic = gi * cig + icl;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                *gx.at_mut(b, ic, iy as usize, ix as usize) +=
                                    go * weight.at(oc, icl, ky, kx);
                                *gw.at_mut(oc, icl, ky, kx) +=
                                    go * input.at(b, ic, iy as usize, ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// bilinear resize

#[inline]
fn bilinear_taps(out_i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    // Half-pixel-center convention: src = (dst + 0.5) * in/out - 0.5,
    // edge taps clamped into bounds.
    let scale = in_len as f64 / out_len as f64;
    let src = (out_i as f64 + 0.5) * scale - 0.5;
    let i0f = src.floor();
    let t = src - i0f;
    let i0 = (i0f as isize).clamp(0, in_len as isize - 1) as usize;
    let i1 = (i0f as isize + 1).clamp(0, in_len as isize - 1) as usize;
    (i0, i1, t)
}

/// Bilinear interpolation to (`out_h`, `out_w`) with half-pixel centers.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be >= 1 in both dims"));
    }
    if h == 0 || w == 0 || n == 0 || c == 0 {
        return Err(Error::invalid("resize input must be non-empty"));
    }
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1, ty) = bilinear_taps(oy, out_h, h);
                for ox in 0..out_w {
                    let (x0, x1, tx) = bilinear_taps(ox, out_w, w);
                    let v = (1.0 - ty) * (1.0 - tx) * input.at(b, ch, y0, x0)
                        + (1.0 - ty) * tx * input.at(b, ch, y0, x1)
                        + ty * (1.0 - tx) * input.at(b, ch, y1, x0)
                        + ty * tx * input.at(b, ch, y1, x1);
                    *out.at_mut(b, ch, oy, ox) = v;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn resize_bilinear_backward(in_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    let [_, _, oh, ow] = grad_out.shape();
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                let (y0, y1, ty) = bilinear_taps(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, tx) = bilinear_taps(ox, ow, w);
                    let go = grad_out.at(b, ch, oy, ox);
                    *gx.at_mut(b, ch, y0, x0) += (1.0 - ty) * (1.0 - tx) * go;
                    *gx.at_mut(b, ch, y0, x1) += (1.0 - ty) * tx * go;
                    *gx.at_mut(b, ch, y1, x0) += ty * (1.0 - tx) * go;
                    *gx.at_mut(b, ch, y1, x1) += ty * tx * go;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// nearest upsample (FPN top-down pathway)

/// Nearest-neighbour upsample by an integer factor.
pub fn upsample_nearest(input: &Tensor, factor: usize) -> Result<Tensor> {
    if factor == 0 {
        return Err(Error::invalid("upsample factor must be >= 1"));
    }
    let [n, c, h, w] = input.shape();
    let mut out = Tensor::zeros([n, c, h * factor, w * factor]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h * factor {
                for ox in 0..w * factor {
                    *out.at_mut(b, ch, oy, ox) = input.at(b, ch, oy / factor, ox / factor);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn upsample_nearest_backward(in_shape: [usize; 4], factor: usize, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..h * factor {
                for ox in 0..w * factor {
                    *gx.at_mut(b, ch, oy / factor, ox / factor) += grad_out.at(b, ch, oy, ox);
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// concat / slice on the channel axis

/// Concatenate along channels; all parts must agree on N, H, W.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("concat_channels on empty list"))?;
    let [n, _, h, w] = first.shape();
    for (i, p) in parts.iter().enumerate() {
        let [pn, _, ph, pw] = p.shape();
        if pn != n {
            return Err(Error::shape("batch", n, pn, format!("concat_channels part {i}")));
        }
        if ph != h {
            return Err(Error::shape("height", h, ph, format!("concat_channels part {i}")));
        }
        if pw != w {
            return Err(Error::shape("width", w, pw, format!("concat_channels part {i}")));
        }
    }
    let c_total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut out = Tensor::zeros([n, c_total, h, w]);
    for b in 0..n {
        let mut c_off = 0;
        for p in parts {
            for c in 0..p.channels() {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(b, c_off + c, y, x) = p.at(b, c, y, x);
                    }
                }
            }
            c_off += p.channels();
        }
    }
    Ok(out)
}

/// Contiguous channel slice `[start, start+len)`.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if start + len > c {
        return Err(Error::shape("channels", start + len, c, "slice_channels out of range"));
    }
    let mut out = Tensor::zeros([n, len, h, w]);
    for b in 0..n {
        for ch in 0..len {
            for y in 0..h {
                for x in 0..w {
                    *out.at_mut(b, ch, y, x) = input.at(b, start + ch, y, x);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn slice_channels_backward(in_shape: [usize; 4], start: usize, grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    let [n, len, h, w] = grad_out.shape();
    for b in 0..n {
        for ch in 0..len {
            for y in 0..h {
                for x in 0..w {
                    *gx.at_mut(b, start + ch, y, x) = grad_out.at(b, ch, y, x);
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// max pooling

/// Max pooling; returns the pooled map and the row-major argmax of each window.
pub(crate) fn max_pool2d_with_argmax(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, Vec<usize>)> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pool window and stride must be >= 1"));
    }
    let [n, c, h, w] = input.shape();
    if window > h {
        return Err(Error::shape("pool window height", h, window, "window larger than input"));
    }
    if window > w {
        return Err(Error::shape("pool window width", w, window, "window larger than input"));
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = vec![0usize; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..window {
                        for kx in 0..window {
                            let iy = oy * stride + ky;
                            let ix = ox * stride + kx;
                            let v = input.at(b, ch, iy, ix);
                            // strict > keeps the first (row-major) max on ties
                            if v > best {
                                best = v;
                                best_idx = input.idx(b, ch, iy, ix);
                            }
                        }
                    }
                    let oi = out.idx(b, ch, oy, ox);
                    out.data_mut()[oi] = best;
                    argmax[oi] = best_idx;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Max pooling over square windows.
pub fn max_pool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    Ok(max_pool2d_with_argmax(input, window, stride)?.0)
}

pub(crate) fn max_pool2d_backward(in_shape: [usize; 4], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(in_shape);
    for (oi, &ii) in argmax.iter().enumerate() {
        gx.data_mut()[ii] += grad_out.data()[oi];
    }
    gx
}

// ---------------------------------------------------------------------------
// pooling to a 1x1 map

/// Spatial mean per (batch, channel); output is (N, C, 1, 1).
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool needs H, W >= 1"));
    }
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let inv = 1.0 / (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            let mut acc = 0.0;
            for y in 0..h {
                for x in 0..w {
                    acc += input.at(b, ch, y, x);
                }
            }
            *out.at_mut(b, ch, 0, 0) = acc * inv;
        }
    }
    Ok(out)
}

pub(crate) fn global_avg_pool_backward(in_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = in_shape;
    let inv = 1.0 / (h * w) as f64;
    let mut gx = Tensor::zeros(in_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_out.at(b, ch, 0, 0) * inv;
            for y in 0..h {
                for x in 0..w {
                    *gx.at_mut(b, ch, y, x) = g;
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// softmax

/// Shift-invariant softmax over a vector of finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax on empty vector"));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input {bad}")));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / sum).collect())
}

/// Softmax along the channel axis, independently per (batch, y, x).
pub fn softmax_channels(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.shape();
    if c == 0 {
        return Err(Error::invalid("softmax over zero channels"));
    }
    let mut out = Tensor::zeros(input.shape());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let logits: Vec<f64> = (0..c).map(|ch| input.at(b, ch, y, x)).collect();
                let probs = softmax(&logits)?;
                for (ch, p) in probs.iter().enumerate() {
                    *out.at_mut(b, ch, y, x) = *p;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn softmax_channels_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = output.shape();
    let mut gx = Tensor::zeros(output.shape());
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += output.at(b, ch, y, x) * grad_out.at(b, ch, y, x);
                }
                for ch in 0..c {
                    let s = output.at(b, ch, y, x);
                    *gx.at_mut(b, ch, y, x) = s * (grad_out.at(b, ch, y, x) - dot);
                }
            }
        }
    }
    gx
}

// ---------------------------------------------------------------------------
// batch-weighted sum (expert combination)

/// `sum_i weights[i] * x[i]` over the batch axis; `weights` is (N,1,1,1),
/// output is (1, C, H, W).
pub fn weighted_batch_sum(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if weights.shape() != [n, 1, 1, 1] {
        return Err(Error::shape(
            "weights batch",
            n,
            weights.shape()[0],
            "weighted_batch_sum expects (N,1,1,1) weights",
        ));
    }
    let mut out = Tensor::zeros([1, c, h, w]);
    for b in 0..n {
        let alpha = weights.at(b, 0, 0, 0);
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    *out.at_mut(0, ch, y, x_) += alpha * x.at(b, ch, y, x_);
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn weighted_batch_sum_backward(x: &Tensor, weights: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(weights.shape());
    for b in 0..n {
        let alpha = weights.at(b, 0, 0, 0);
        let mut acc = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let g = grad_out.at(0, ch, y, x_);
                    *gx.at_mut(b, ch, y, x_) = alpha * g;
                    acc += g * x.at(b, ch, y, x_);
                }
            }
        }
        *gw.at_mut(b, 0, 0, 0) = acc;
    }
    (gx, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: [usize; 4], data: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let x = t([1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t([1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, &[0.0], &ConvSpec::pointwise(1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_all_ones_3x3_padded_counts_neighbourhood() {
        let x = Tensor::filled([1, 1, 3, 3], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &[0.0], &ConvSpec::same(3, 1)).unwrap();
        // padded 3x3 window over an all-ones image counts in-bounds taps
        assert_eq!(y.shape(), [1, 1, 3, 3]);
        assert_abs_diff_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_abs_diff_eq!(y.at(0, 0, 0, 0), 4.0);
        assert_abs_diff_eq!(y.at(0, 0, 0, 1), 6.0);
        assert_abs_diff_eq!(y.at(0, 0, 2, 2), 4.0);
    }

    #[test]
    fn conv_bias_shifts_each_output_channel() {
        let x = Tensor::filled([1, 1, 2, 2], 0.0);
        let w = Tensor::zeros([2, 1, 1, 1]);
        let y = conv2d(&x, &w, &[1.5, -2.0], &ConvSpec::pointwise(1)).unwrap();
        for v in 0..4 {
            assert_abs_diff_eq!(y.data()[v], 1.5);
            assert_abs_diff_eq!(y.data()[4 + v], -2.0);
        }
    }

    #[test]
    fn conv_stride_two_halves_output() {
        let x = Tensor::filled([1, 1, 4, 4], 1.0);
        let w = Tensor::filled([1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &w, &[0.0], &ConvSpec::same(3, 2)).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
    }

    #[test]
    fn conv_rejects_mismatched_weight_channels() {
        let x = Tensor::zeros([1, 4, 2, 2]);
        let w = Tensor::zeros([2, 3, 1, 1]);
        let err = conv2d(&x, &w, &[0.0; 2], &ConvSpec::pointwise(1)).unwrap_err();
        assert!(err.to_string().contains("weight channels"), "{err}");
    }

    #[test]
    fn conv_rejects_channels_not_divisible_by_groups() {
        let x = Tensor::zeros([1, 3, 2, 2]);
        let w = Tensor::zeros([2, 1, 1, 1]);
        let err = conv2d(&x, &w, &[0.0; 2], &ConvSpec::pointwise(2)).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    /// Grouped conv must equal running each group's slice through its own
    /// dense conv and concatenating the results.
    fn grouped_equals_independent(x: &Tensor, w: &Tensor, bias: &[f64], groups: usize) {
        let spec = ConvSpec::pointwise(groups);
        let grouped = conv2d(x, w, bias, &spec).unwrap();

        let cig = x.channels() / groups;
        let cog = w.shape()[0] / groups;
        let mut parts = Vec::new();
        for g in 0..groups {
            let xs = slice_channels(x, g * cig, cig).unwrap();
            let mut wd = Tensor::zeros([cog, cig, 1, 1]);
            for oc in 0..cog {
                for ic in 0..cig {
                    *wd.at_mut(oc, ic, 0, 0) = w.at(g * cog + oc, ic, 0, 0);
                }
            }
            let bs: Vec<f64> = bias[g * cog..(g + 1) * cog].to_vec();
            parts.push(conv2d(&xs, &wd, &bs, &ConvSpec::pointwise(1)).unwrap());
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let stacked = concat_channels(&refs).unwrap();
        for (a, b) in grouped.data().iter().zip(stacked.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn grouped_conv_matches_independent_group_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::randn([2, 8, 3, 3], 1.0, &mut rng);
        let w = Tensor::randn([4, 2, 1, 1], 1.0, &mut rng);
        grouped_equals_independent(&x, &w, &[0.1, -0.2, 0.3, 0.4], 4);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 2, 5, 7], 1.0, &mut rng);
        let y = resize_bilinear(&x, 5, 7).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_2x2_to_4x4_half_pixel_oracle() {
        let x = t([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = resize_bilinear(&x, 4, 4).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        for (a, b) in y.data().iter().zip(want.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn resize_downscale_preserves_mean_of_constant_field() {
        let x = Tensor::filled([1, 1, 8, 8], 3.25);
        let y = resize_bilinear(&x, 2, 2).unwrap();
        for v in y.data() {
            assert_abs_diff_eq!(*v, 3.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn upsample_nearest_repeats_pixels() {
        let x = t([1, 1, 1, 2], vec![5.0, 7.0]);
        let y = upsample_nearest(&x, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 4]);
        assert_eq!(y.data(), &[5.0, 5.0, 7.0, 7.0, 5.0, 5.0, 7.0, 7.0]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn([2, 3, 4, 4], 1.0, &mut rng);
        let b = Tensor::randn([2, 5, 4, 4], 1.0, &mut rng);
        let joined = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(joined.channels(), 8);
        assert_eq!(slice_channels(&joined, 0, 3).unwrap(), a);
        assert_eq!(slice_channels(&joined, 3, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_mismatched_heights() {
        let a = Tensor::zeros([1, 1, 4, 4]);
        let b = Tensor::zeros([1, 1, 3, 4]);
        let err = concat_channels(&[&a, &b]).unwrap_err();
        assert!(err.to_string().contains("height"), "{err}");
    }

    #[test]
    fn max_pool_2x2_takes_window_maxima() {
        let x = t(
            [1, 1, 2, 4],
            vec![1.0, 2.0, 5.0, 3.0, 4.0, 0.0, -1.0, 6.0],
        );
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 2]);
        assert_eq!(y.data(), &[4.0, 6.0]);
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first_row_major_cell() {
        let x = Tensor::filled([1, 1, 2, 2], 1.0);
        let (y, argmax) = max_pool2d_with_argmax(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(argmax, vec![0]);
        let gx = max_pool2d_backward(x.shape(), &argmax, &Tensor::filled([1, 1, 1, 1], 1.0));
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn max_pool_rejects_window_larger_than_input() {
        let x = Tensor::zeros([1, 1, 1, 1]);
        assert!(max_pool2d(&x, 2, 2).is_err());
    }

    #[test]
    fn global_avg_pool_is_spatial_mean() {
        let x = t([1, 2, 1, 2], vec![1.0, 3.0, 10.0, 20.0]);
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.shape(), [1, 2, 1, 1]);
        assert_abs_diff_eq!(y.data()[0], 2.0);
        assert_abs_diff_eq!(y.data()[1], 15.0);
    }

    #[test]
    fn softmax_of_zero_and_ln3_is_quarter_three_quarters() {
        let p = softmax(&[0.0, 3.0f64.ln()]).unwrap();
        assert_abs_diff_eq!(p[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn softmax_handles_large_logits_without_overflow() {
        let p = softmax(&[1000.0, 1000.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_empty_and_non_finite() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn weighted_batch_sum_combines_experts() {
        let x = t([2, 1, 1, 2], vec![1.0, 2.0, 10.0, 20.0]);
        let w = t([2, 1, 1, 1], vec![0.5, 0.25]);
        let y = weighted_batch_sum(&x, &w).unwrap();
        assert_eq!(y.shape(), [1, 1, 1, 2]);
        assert_abs_diff_eq!(y.data()[0], 0.5 + 2.5);
        assert_abs_diff_eq!(y.data()[1], 1.0 + 5.0);
    }

    proptest! {
        #[test]
        fn softmax_channels_sums_to_one(
            vals in proptest::collection::vec(-30.0f64..30.0, 12),
        ) {
            let x = t([1, 3, 2, 2], vals);
            let y = softmax_channels(&x).unwrap();
            for yy in 0..2 {
                for xx in 0..2 {
                    let s: f64 = (0..3).map(|c| y.at(0, c, yy, xx)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn grouped_conv_matches_independent_convs_prop(
            seed in 0u64..1000,
            groups in prop_oneof![Just(1usize), Just(2), Just(4)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c_in = groups * 2;
            let c_out = groups * 3;
            let x = Tensor::randn([1, c_in, 3, 3], 1.0, &mut rng);
            let w = Tensor::randn([c_out, 2, 1, 1], 1.0, &mut rng);
            let bias: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
            grouped_equals_independent(&x, &w, &bias, groups);
        }

        #[test]
        fn resize_output_stays_within_input_range(
            seed in 0u64..1000,
            oh in 1usize..9,
            ow in 1usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut rng);
            let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let y = resize_bilinear(&x, oh, ow).unwrap();
            for v in y.data() {
                prop_assert!(*v >= lo - 1e-9 && *v <= hi + 1e-9);
            }
        }

        #[test]
        fn max_pool_never_below_any_window_member(
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([1, 1, 4, 4], 1.0, &mut rng);
            let y = max_pool2d(&x, 2, 2).unwrap();
            for oy in 0..2 {
                for ox in 0..2 {
                    for ky in 0..2 {
                        for kx in 0..2 {
                            prop_assert!(y.at(0, 0, oy, ox) >= x.at(0, 0, oy * 2 + ky, ox * 2 + kx));
                        }
                    }
                }
            }
        }
    }
}
