//! Dense row-major tensors and the layer kernels built on them.
//!
//! Images are laid out `N×C×H×W`, feature vectors `N×F`. Everything is
//! computed in `f64`; the container formats narrow to `f32` at the file
//! boundary only.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {expected} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Rank-1 tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            data: values,
        }
    }

    /// Rank-2 tensor from nested rows. Panics on ragged input.
    pub fn matrix(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged matrix");
        Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Number of samples along the leading (batch) axis.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Elements per sample (product of all but the leading axis).
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Per-sample shape (all but the leading axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1.min(self.shape.len())..]
    }

    pub fn sample(&self, n: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Gathers the given samples (in order) into a new batch.
    pub fn select_samples(&self, indices: &[usize]) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor { shape, data }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take_samples(&self, n: usize) -> Tensor {
        let n = n.min(self.batch_size());
        let mut shape = self.shape.clone();
        shape[0] = n;
        Tensor {
            shape,
            data: self.data[..n * self.sample_len()].to_vec(),
        }
    }

    /// Stacks per-sample buffers of shape `sample_shape` into a batch.
    pub fn from_samples(sample_shape: &[usize], samples: Vec<Vec<f64>>) -> Result<Tensor> {
        let len: usize = sample_shape.iter().product();
        let mut data = Vec::with_capacity(len * samples.len());
        for s in &samples {
            if s.len() != len {
                return Err(Error::invalid(format!(
                    "sample of {} elements does not fit shape {sample_shape:?}",
                    s.len()
                )));
            }
            data.extend_from_slice(s);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(sample_shape);
        Ok(Tensor { shape, data })
    }

    /// Concatenates batches along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.sample_shape() != first.sample_shape() {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            n += p.batch_size();
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn relu(&self) -> Tensor {
        self.map(|v| v.max(0.0))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest element, or `None` for an empty tensor.
    pub fn max(&self) -> Option<f64> {
        self.data.iter().copied().reduce(f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of channels for a batch tensor: axis 1 (`N×C×…` or `N×F`).
    pub fn channels(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    /// Elements per channel per sample (`H·W` for images, 1 for vectors).
    pub fn channel_stride(&self) -> usize {
        self.shape.iter().skip(2).product()
    }

    /// Mean over the batch axis, giving a tensor of the per-sample shape.
    pub fn batch_mean(&self) -> Result<Tensor> {
        let n = self.batch_size();
        if n == 0 {
            return Err(Error::invalid("batch mean of an empty batch"));
        }
        let len = self.sample_len();
        let mut out = vec![0.0; len];
        for s in 0..n {
            for (o, v) in out.iter_mut().zip(self.sample(s)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Tensor::new(self.sample_shape().to_vec(), out)
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// `out[n,o] = Σ_i W[o,i]·in[n,i] (+ b[o])`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if input.rank() != 2 || weights.rank() != 2 || input.shape[1] != weights.shape[1] {
        return Err(Error::shape("linear_forward", &input.shape, &weights.shape));
    }
    let (n, i_dim) = (input.shape[0], input.shape[1]);
    let o_dim = weights.shape[0];
    if let Some(b) = bias {
        if b.shape != [o_dim] {
            return Err(Error::shape("linear_forward bias", &weights.shape, &b.shape));
        }
    }
    let wt = transpose(&weights.data, o_dim, i_dim);
    let mut out = vec![0.0; n * o_dim];
    if let Some(b) = bias {
        for row in out.chunks_mut(o_dim) {
            row.copy_from_slice(&b.data);
        }
    }
    gemm_acc(&input.data, &wt, &mut out, n, i_dim, o_dim);
    Tensor::new(vec![n, o_dim], out)
}

/// Gradients of a linear layer given `grad_out[N×O]`.
pub fn linear_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, i_dim) = (input.shape[0], input.shape[1]);
    let o_dim = weights.shape[0];
    if grad_out.shape != [n, o_dim] {
        return Err(Error::shape("linear_backward", &grad_out.shape, &[n, o_dim]));
    }
    let gt = transpose(&grad_out.data, n, o_dim);
    let mut gw = vec![0.0; o_dim * i_dim];
    gemm_acc(&gt, &input.data, &mut gw, o_dim, n, i_dim);
    let mut gb = vec![0.0; o_dim];
    for row in grad_out.data.chunks(o_dim) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    let mut gi = vec![0.0; n * i_dim];
    gemm_acc(&grad_out.data, &weights.data, &mut gi, n, o_dim, i_dim);
    Ok((
        Tensor::new(vec![o_dim, i_dim], gw)?,
        Tensor::new(vec![o_dim], gb)?,
        Tensor::new(vec![n, i_dim], gi)?,
    ))
}

/// Stride and zero padding of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::invalid("convolution stride must be positive"));
        }
        if kernel == 0 || kernel > input + 2 * self.padding {
            return Err(Error::invalid(format!(
                "kernel extent {kernel} exceeds padded input extent {}",
                input + 2 * self.padding
            )));
        }
        Ok((input + 2 * self.padding - kernel) / self.stride + 1)
    }
}

pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geo: ConvGeometry,
}

impl ConvDims {
    pub fn new(input: &[usize], weights: &[usize], geo: ConvGeometry) -> Result<Self> {
        if input.len() != 3 || weights.len() != 4 || input[0] != weights[1] {
            return Err(Error::shape("conv2d", input, weights));
        }
        let (c, h, w) = (input[0], input[1], input[2]);
        let (o, kh, kw) = (weights[0], weights[2], weights[3]);
        let ho = geo.output_extent(h, kh)?;
        let wo = geo.output_extent(w, kw)?;
        Ok(Self {
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho,
            wo,
            geo,
        })
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.o * self.ho * self.wo
    }

    /// Input coordinate for output position `oy` and kernel tap `ky`, if
    /// it falls inside the unpadded input.
    #[inline]
    fn source(&self, out: usize, tap: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.geo.stride + tap) as isize - self.geo.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// im2col for one sample: `[C·kh·kw] × [ho·wo]`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let hw = self.ho * self.wo;
        let mut col = vec![0.0; self.patch() * hw];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[oy * self.wo + ox] = x[(ci * self.h + iy) * self.w + ix];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a column buffer back onto an input-shaped gradient.
    pub fn col2im(&self, col: &[f64], gx: &mut [f64]) {
        let hw = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    for oy in 0..self.ho {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                gx[(ci * self.h + iy) * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Number of output neurons fed by input element `(c, iy, ix)`.
    pub fn fan_out(&self, iy: usize, ix: usize) -> usize {
        let count = |i: usize, k: usize, out: usize| {
            (0..k)
                .filter(|&t| {
                    let p = i + self.geo.padding;
                    p >= t && (p - t) % self.geo.stride == 0 && (p - t) / self.geo.stride < out
                })
                .count()
        };
        self.o * count(iy, self.kh, self.ho) * count(ix, self.kw, self.wo)
    }
}

/// Standard cross-correlation with zero padding.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>, geo: ConvGeometry) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape("conv2d_forward", &input.shape, &weights.shape));
    }
    let dims = ConvDims::new(&input.shape[1..], &weights.shape, geo)?;
    if let Some(b) = bias {
        if b.shape != [dims.o] {
            return Err(Error::shape("conv2d_forward bias", &weights.shape, &b.shape));
        }
    }
    let n = input.shape[0];
    let hw = dims.ho * dims.wo;
    let mut out = vec![0.0; n * dims.out_len()];
    for (s, dst) in out.chunks_mut(dims.out_len().max(1)).enumerate().take(n) {
        if let Some(b) = bias {
            for (oc, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(b.data[oc]);
            }
        }
        let col = dims.im2col(input.sample(s));
        gemm_acc(&weights.data, &col, dst, dims.o, dims.patch(), hw);
    }
    Tensor::new(vec![n, dims.o, dims.ho, dims.wo], out)
}

/// Gradients `(dW, db, dInput)` of a convolution given `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
) -> Result<(Tensor, Tensor, Tensor)> {
    conv2d_grads(input, weights, grad_out, geo, true)
}

/// Weight and bias gradients only.
pub(crate) fn conv2d_param_grads(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
) -> Result<(Tensor, Tensor)> {
    let (gw, gb, _) = conv2d_grads(input, weights, grad_out, geo, false)?;
    Ok((gw, gb))
}

fn conv2d_grads(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    geo: ConvGeometry,
    need_input: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dims = ConvDims::new(&input.shape[1..], &weights.shape, geo)?;
    let n = input.shape[0];
    if grad_out.shape != [n, dims.o, dims.ho, dims.wo] {
        return Err(Error::shape("conv2d_backward", &grad_out.shape, &weights.shape));
    }
    let hw = dims.ho * dims.wo;
    let patch = dims.patch();
    let wt = transpose(&weights.data, dims.o, patch);
    let mut gw = vec![0.0; dims.o * patch];
    let mut gb = vec![0.0; dims.o];
    let mut gi = vec![0.0; if need_input { input.len() } else { 0 }];
    for s in 0..n {
        let g = grad_out.sample(s);
        let col = dims.im2col(input.sample(s));
        let col_t = transpose(&col, patch, hw);
        gemm_acc(g, &col_t, &mut gw, dims.o, hw, patch);
        for (oc, plane) in g.chunks(hw).enumerate() {
            gb[oc] += plane.iter().sum::<f64>();
        }
        if !need_input {
            continue;
        }
        let mut gcol = vec![0.0; patch * hw];
        gemm_acc(&wt, g, &mut gcol, patch, dims.o, hw);
        let len = input.sample_len();
        dims.col2im(&gcol, &mut gi[s * len..(s + 1) * len]);
    }
    Ok((
        Tensor::new(weights.shape.clone(), gw)?,
        Tensor::new(vec![dims.o], gb)?,
        if need_input {
            Tensor::new(input.shape.clone(), gi)?
        } else {
            Tensor::zeros(&[0])
        },
    ))
}

/// Output extent of an unpadded pooling window.
pub(crate) fn pool_extent(input: usize, window: usize, stride: usize) -> Result<usize> {
    if window == 0 || stride == 0 {
        return Err(Error::invalid("pooling window and stride must be positive"));
    }
    if window > input {
        return Err(Error::invalid(format!(
            "pooling window {window} larger than spatial extent {input}"
        )));
    }
    Ok((input - window) / stride + 1)
}

/// Mean over each `window×window` patch, no padding.
pub fn avgpool2d(input: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::invalid(format!(
            "avgpool2d expects N×C×H×W, got {:?}",
            input.shape
        )));
    }
    let [n, c, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
    let ho = pool_extent(h, window, stride)?;
    let wo = pool_extent(w, window, stride)?;
    let mut out = vec![0.0; n * c * ho * wo];
    for (plane_idx, plane) in input.data.chunks(h * w).enumerate() {
        let dst = &mut out[plane_idx * ho * wo..(plane_idx + 1) * ho * wo];
        avgpool_plane(plane, dst, h, w, ho, wo, window, stride);
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn avgpool_plane(
    src: &[f64],
    dst: &mut [f64],
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    window: usize,
    stride: usize,
) {
    let _ = h;
    let norm = 1.0 / (window * window) as f64;
    for oy in 0..ho {
        for ox in 0..wo {
            let mut acc = 0.0;
            for ky in 0..window {
                let row = &src[(oy * stride + ky) * w + ox * stride..];
                acc += row[..window].iter().sum::<f64>();
            }
            dst[oy * wo + ox] = acc * norm;
        }
    }
}

/// Gradient of [`avgpool2d`] w.r.t. its input.
pub fn avgpool2d_backward(input_shape: &[usize], grad_out: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let [n, c, h, w] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let ho = pool_extent(h, window, stride)?;
    let wo = pool_extent(w, window, stride)?;
    if grad_out.shape != [n, c, ho, wo] {
        return Err(Error::shape("avgpool2d_backward", &grad_out.shape, input_shape));
    }
    let norm = 1.0 / (window * window) as f64;
    let mut gi = vec![0.0; n * c * h * w];
    for (p, g) in grad_out.data.chunks(ho * wo).enumerate() {
        let dst = &mut gi[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[oy * wo + ox] * norm;
                for ky in 0..window {
                    for kx in 0..window {
                        dst[(oy * stride + ky) * w + ox * stride + kx] += v;
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gi)
}

/// Per-channel mean over batch and spatial axes.
///
/// Accepts `N×C×H×W` as well as `N×F` (each feature is its own channel).
pub fn channel_spatial_mean(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::invalid(format!(
            "channel_spatial_mean expects a batched tensor, got {:?}",
            x.shape
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("channel_spatial_mean of an empty tensor"));
    }
    let c = x.channels();
    let stride = x.channel_stride();
    let mut acc = vec![0.0; c];
    for sample in x.data.chunks(c * stride) {
        for (ch, plane) in sample.chunks(stride).enumerate() {
            acc[ch] += plane.iter().sum::<f64>();
        }
    }
    let count = (x.batch_size() * stride) as f64;
    Ok(Tensor::vector(acc.into_iter().map(|v| v / count).collect()))
}
