//! Convolution, transposed convolution, pooling and activation primitives
//! with explicit backward passes. All tensors are channel-major row-major.

use crate::error::{Error, Result};
use crate::grid::{Grid, Tensor3};

/// Geometry of a square-kernel convolution with "same" zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            dilation: 1,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn padding(&self) -> usize {
        self.dilation * (self.kernel - 1) / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::argument(format!("conv kernel must be odd, got {}", self.kernel)));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return Err(Error::Unsupported(format!("conv stride {}", self.stride)));
        }
        if self.dilation == 0 {
            return Err(Error::argument("dilation must be >= 1"));
        }
        Ok(())
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let p = self.padding();
        let span = self.dilation * (self.kernel - 1);
        let o = |n: usize| (n + 2 * p - span - 1) / self.stride + 1;
        (o(height), o(width))
    }

    fn check_input(&self, input: &Tensor3, weight: &[f64], bias: &[f64]) -> Result<()> {
        self.validate()?;
        if input.channels != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {}",
                self.in_channels, input.channels
            )));
        }
        if weight.len() != self.weight_len() || bias.len() != self.out_channels {
            return Err(Error::shape("conv weight/bias length does not match spec"));
        }
        Ok(())
    }
}

/// Output index range `[lo, hi)` along one axis for kernel offset `off`:
/// all `o` with `0 <= o*stride + off - pad < n`.
#[inline]
fn valid_range(out_len: usize, n: usize, stride: usize, off: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - off
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    // o*stride <= n - 1 + pad - off
    let top = n + pad;
    let hi = if top > off { ((top - 1 - off) / stride + 1).min(out_len) } else { 0 };
    (lo.min(hi), hi)
}

/// Dot product with four independent accumulators so it vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Cross-correlation with zero padding, stride and dilation.
pub fn conv2d(input: &Tensor3, weight: &[f64], bias: &[f64], spec: &ConvSpec) -> Result<Tensor3> {
    spec.check_input(input, weight, bias)?;
    let (h, w) = (input.height, input.width);
    let (oh, ow) = spec.output_dims(h, w);
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding());
    let mut out = Tensor3::zeros(spec.out_channels, oh, ow);
    let plane = input.plane_len();
    for oc in 0..spec.out_channels {
        let out_plane = out.channel_mut(oc);
        out_plane.fill(bias[oc]);
        for ic in 0..spec.in_channels {
            let in_plane = &input.data[ic * plane..(ic + 1) * plane];
            let wbase = (oc * spec.in_channels + ic) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, h, s, ky * d, p);
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(ow, w, s, kx * d, p);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let orow = &mut out_plane[oy * ow + ox0..oy * ow + ox1];
                        let ix0 = ox0 * s + kx * d - p;
                        let irow = &in_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            for (o, i) in orow.iter_mut().zip(&irow[ix0..ix0 + (ox1 - ox0)]) {
                                *o += wv * i;
                            }
                        } else {
                            for (j, o) in orow.iter_mut().enumerate() {
                                *o += wv * irow[ix0 + j * s];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of a convolution w.r.t. its input and parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub d_input: Option<Tensor3>,
    pub d_weight: Vec<f64>,
    pub d_bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor3,
    weight: &[f64],
    spec: &ConvSpec,
    grad_out: &Tensor3,
    need_input_grad: bool,
) -> Result<ParamGrads> {
    let zeros = vec![0.0; spec.out_channels];
    spec.check_input(input, weight, &zeros)?;
    let (h, w) = (input.height, input.width);
    let (oh, ow) = spec.output_dims(h, w);
    if (grad_out.channels, grad_out.height, grad_out.width) != (spec.out_channels, oh, ow) {
        return Err(Error::shape("conv backward: gradient does not match output shape"));
    }
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding());
    let mut d_input = need_input_grad.then(|| Tensor3::zeros(input.channels, h, w));
    let mut d_weight = vec![0.0; spec.weight_len()];
    let mut d_bias = vec![0.0; spec.out_channels];
    let plane = input.plane_len();
    for oc in 0..spec.out_channels {
        let g_plane = grad_out.channel(oc);
        d_bias[oc] = g_plane.iter().sum();
        for ic in 0..spec.in_channels {
            let in_plane = &input.data[ic * plane..(ic + 1) * plane];
            let wbase = (oc * spec.in_channels + ic) * k * k;
            for ky in 0..k {
                let (oy0, oy1) = valid_range(oh, h, s, ky * d, p);
                for kx in 0..k {
                    let (ox0, ox1) = valid_range(ow, w, s, kx * d, p);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let n = ox1 - ox0;
                    let wv = weight[wbase + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky * d - p;
                        let grow = &g_plane[oy * ow + ox0..oy * ow + ox1];
                        let ix0 = ox0 * s + kx * d - p;
                        let irow = &in_plane[iy * w..(iy + 1) * w];
                        if s == 1 {
                            acc += dot(grow, &irow[ix0..ix0 + n]);
                            if let Some(di) = d_input.as_mut() {
                                let drow = &mut di.data[ic * plane + iy * w..ic * plane + (iy + 1) * w];
                                for (dv, g) in drow[ix0..ix0 + n].iter_mut().zip(grow) {
                                    *dv += wv * g;
                                }
                            }
                        } else {
                            for (j, g) in grow.iter().enumerate() {
                                acc += g * irow[ix0 + j * s];
                            }
                            if let Some(di) = d_input.as_mut() {
                                let drow = &mut di.data[ic * plane + iy * w..ic * plane + (iy + 1) * w];
                                for (j, g) in grow.iter().enumerate() {
                                    drow[ix0 + j * s] += wv * g;
                                }
                            }
                        }
                    }
                    d_weight[wbase + ky * k + kx] += acc;
                }
            }
        }
    }
    Ok(ParamGrads {
        d_input,
        d_weight,
        d_bias,
    })
}

/// Transposed convolution; only kernel 2 with stride 2 is supported.
/// Weight layout is `[in_channels, out_channels, 2, 2]`.
pub fn transposed_conv2d(
    input: &Tensor3,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Result<Tensor3> {
    check_deconv(input, weight, bias.len(), out_channels, kernel, stride)?;
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor3::zeros(out_channels, oh, ow);
    for oc in 0..out_channels {
        out.channel_mut(oc).fill(bias[oc]);
    }
    let plane = input.plane_len();
    let oplane = oh * ow;
    for ic in 0..input.channels {
        let in_plane = &input.data[ic * plane..(ic + 1) * plane];
        for oc in 0..out_channels {
            let wb = (ic * out_channels + oc) * 4;
            let out_plane = &mut out.data[oc * oplane..(oc + 1) * oplane];
            for a in 0..2 {
                for y in 0..h {
                    let irow = &in_plane[y * w..(y + 1) * w];
                    let orow = &mut out_plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                    let (w0, w1) = (weight[wb + 2 * a], weight[wb + 2 * a + 1]);
                    for (pair, &v) in orow.chunks_exact_mut(2).zip(irow) {
                        pair[0] += w0 * v;
                        pair[1] += w1 * v;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn check_deconv(
    input: &Tensor3,
    weight: &[f64],
    bias_len: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
) -> Result<()> {
    if kernel != 2 || stride != 2 {
        return Err(Error::Unsupported(format!(
            "transposed conv with kernel {kernel}, stride {stride} (only 2/2)"
        )));
    }
    if weight.len() != input.channels * out_channels * 4 || bias_len != out_channels {
        return Err(Error::shape("transposed conv weight/bias length does not match channels"));
    }
    Ok(())
}

pub fn transposed_conv2d_backward(
    input: &Tensor3,
    weight: &[f64],
    out_channels: usize,
    grad_out: &Tensor3,
    need_input_grad: bool,
) -> Result<ParamGrads> {
    check_deconv(input, weight, out_channels, out_channels, 2, 2)?;
    let (h, w) = (input.height, input.width);
    let (oh, ow) = (2 * h, 2 * w);
    if (grad_out.channels, grad_out.height, grad_out.width) != (out_channels, oh, ow) {
        return Err(Error::shape("transposed conv backward: gradient does not match output"));
    }
    let mut d_input = need_input_grad.then(|| Tensor3::zeros(input.channels, h, w));
    let mut d_weight = vec![0.0; weight.len()];
    let d_bias = (0..out_channels).map(|oc| grad_out.channel(oc).iter().sum()).collect();
    let plane = input.plane_len();
    let oplane = oh * ow;
    for ic in 0..input.channels {
        let in_plane = &input.data[ic * plane..(ic + 1) * plane];
        for oc in 0..out_channels {
            let wb = (ic * out_channels + oc) * 4;
            let g_plane = &grad_out.data[oc * oplane..(oc + 1) * oplane];
            for a in 0..2 {
                let (w0, w1) = (weight[wb + 2 * a], weight[wb + 2 * a + 1]);
                let (mut acc0, mut acc1) = (0.0, 0.0);
                for y in 0..h {
                    let irow = &in_plane[y * w..(y + 1) * w];
                    let grow = &g_plane[(2 * y + a) * ow..(2 * y + a + 1) * ow];
                    for (pair, &v) in grow.chunks_exact(2).zip(irow) {
                        acc0 += pair[0] * v;
                        acc1 += pair[1] * v;
                    }
                    if let Some(di) = d_input.as_mut() {
                        let drow = &mut di.data[ic * plane + y * w..ic * plane + (y + 1) * w];
                        for (dv, pair) in drow.iter_mut().zip(grow.chunks_exact(2)) {
                            *dv += w0 * pair[0] + w1 * pair[1];
                        }
                    }
                }
                d_weight[wb + 2 * a] += acc0;
                d_weight[wb + 2 * a + 1] += acc1;
            }
        }
    }
    Ok(ParamGrads {
        d_input,
        d_weight,
        d_bias,
    })
}

/// 1D box sum with half-width `r` over a strided line, truncated at the ends.
fn box_sum_line(src: &[f64], dst: &mut [f64], r: usize) {
    let n = src.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for v in src {
        acc += v;
        prefix.push(acc);
    }
    for (i, out) in dst.iter_mut().enumerate() {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        *out = prefix[hi] - prefix[lo];
    }
}

fn window_counts(n: usize, r: usize) -> Vec<f64> {
    (0..n)
        .map(|i| ((i + r + 1).min(n) - i.saturating_sub(r)) as f64)
        .collect()
}

/// Separable box sum over a plane.
fn box_sum_plane(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        box_sum_line(&src[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], r);
    }
    let mut out = vec![0.0; h * w];
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        box_sum_line(&col, &mut col_out, r);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    out
}

fn check_window(window: usize) -> Result<usize> {
    if window % 2 == 0 {
        return Err(Error::argument(format!("pool window must be odd, got {window}")));
    }
    Ok(window / 2)
}

/// "Same"-size average pooling; windows clipped at the border are averaged
/// over their valid cells only.
pub fn avg_pool_same(input: &Grid, window: usize) -> Result<Grid> {
    let t = avg_pool_same_tensor(&Tensor3::from_grid(input), window)?;
    Ok(t.to_grid(0))
}

pub fn avg_pool_same_backward(grad_out: &Grid, window: usize) -> Result<Grid> {
    let t = avg_pool_same_tensor_backward(&Tensor3::from_grid(grad_out), window)?;
    Ok(t.to_grid(0))
}

pub fn avg_pool_same_tensor(input: &Tensor3, window: usize) -> Result<Tensor3> {
    let r = check_window(window)?;
    let (h, w) = (input.height, input.width);
    let (rc, cc) = (window_counts(h, r), window_counts(w, r));
    let mut out = Tensor3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let sums = box_sum_plane(input.channel(c), h, w, r);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = sums[y * w + x] / (rc[y] * cc[x]);
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_same_tensor_backward(grad_out: &Tensor3, window: usize) -> Result<Tensor3> {
    let r = check_window(window)?;
    let (h, w) = (grad_out.height, grad_out.width);
    let (rc, cc) = (window_counts(h, r), window_counts(w, r));
    let mut out = Tensor3::zeros(grad_out.channels, h, w);
    let mut scaled = vec![0.0; h * w];
    for c in 0..grad_out.channels {
        let g = grad_out.channel(c);
        for y in 0..h {
            for x in 0..w {
                scaled[y * w + x] = g[y * w + x] / (rc[y] * cc[x]);
            }
        }
        // the window relation is symmetric, so the adjoint is another box sum
        out.channel_mut(c).copy_from_slice(&box_sum_plane(&scaled, h, w, r));
    }
    Ok(out)
}

pub fn relu(input: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

pub fn relu_backward(input: &Tensor3, grad_out: &Tensor3) -> Tensor3 {
    Tensor3 {
        channels: input.channels,
        height: input.height,
        width: input.width,
        data: input
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(input: &Tensor3, factor: usize) -> Tensor3 {
    let (h, w) = (input.height * factor, input.width * factor);
    let mut out = Tensor3::zeros(input.channels, h, w);
    for c in 0..input.channels {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = src[(y / factor) * input.width + x / factor];
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(grad_out: &Tensor3, factor: usize) -> Tensor3 {
    let (h, w) = (grad_out.height / factor, grad_out.width / factor);
    let mut out = Tensor3::zeros(grad_out.channels, h, w);
    for c in 0..grad_out.channels {
        let src = grad_out.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..grad_out.height {
            for x in 0..grad_out.width {
                dst[(y / factor) * w + x / factor] += src[y * grad_out.width + x];
            }
        }
    }
    out
}
