//! Dense channel-major tensors and the handful of kernels the boundary
//! module needs: same-padded convolution (dense, grouped, depthwise),
//! half-pixel bilinear upsampling and channel concatenation, each with a
//! hand-derived backward pass.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32`
//! for production and in `f64` for finite-difference checks.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating point element type of a [`Tensor`].
pub trait Scalar: Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Rank-3 array laid out as `[channel][row][column]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}x{}x{})", self.channels, self.height, self.width)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        let expected = channels * height * width;
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("{channels}x{height}x{width} ({expected} values)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, T::zero())
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        let i = (c * self.height + y) * self.width + x;
        self.data[i] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn expect_shape(&self, op: &'static str, other: &Tensor<T>) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(op, shape_str(other.shape()), shape_str(self.shape())))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        other.expect_shape("zip_map", self)?;
        Ok(Self {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..*self
        })
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor<T>, scale: T) -> Result<()> {
        other.expect_shape("add_scaled", self)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v = *v * s;
        }
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Copies out a contiguous range of channels.
    pub fn slice_channels(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.channels {
            return Err(Error::InvalidArgument(format!(
                "channel range {start}..{} exceeds {} channels",
                start + count,
                self.channels
            )));
        }
        let n = self.plane_len();
        Ok(Self {
            channels: count,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + count) * n].to_vec(),
        })
    }
}

pub(crate) fn shape_str((c, h, w): (usize, usize, usize)) -> String {
    format!("{c}x{h}x{w}")
}

/// Convolution weights. `groups == 1` is an ordinary dense convolution;
/// `groups == in_channels` with one input channel per group is depthwise.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<T = f32> {
    out_channels: usize,
    in_per_group: usize,
    groups: usize,
    kernel_h: usize,
    kernel_w: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvKernel<T> {
    /// Dense kernel; `weights` is `[out][in][kh][kw]`.
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        Self::grouped(1, in_channels, out_channels, kernel_h, kernel_w, weights, bias)
    }

    /// Depthwise kernel: one filter per channel, output channel `c` reads only
    /// input channel `c`.
    pub fn depthwise(
        channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        Self::grouped(channels, 1, channels, kernel_h, kernel_w, weights, bias)
    }

    /// Grouped kernel with `groups` independent slices, each mapping
    /// `in_per_group` inputs to `out_channels / groups` outputs.
    pub fn grouped(
        groups: usize,
        in_per_group: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        weights: Vec<T>,
        bias: Vec<T>,
    ) -> Result<Self> {
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::InvalidKernel(format!(
                "kernel size {kernel_h}x{kernel_w} must be odd"
            )));
        }
        if groups == 0 || in_per_group == 0 || out_channels == 0 {
            return Err(Error::InvalidKernel("zero-sized kernel".into()));
        }
        if out_channels % groups != 0 {
            return Err(Error::InvalidKernel(format!(
                "{out_channels} output channels not divisible into {groups} groups"
            )));
        }
        let expected = out_channels * in_per_group * kernel_h * kernel_w;
        if weights.len() != expected {
            return Err(Error::InvalidKernel(format!(
                "expected {expected} weights for {out_channels}x{in_per_group}x{kernel_h}x{kernel_w}, found {}",
                weights.len()
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::InvalidKernel(format!(
                "expected {out_channels} biases, found {}",
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_per_group,
            groups,
            kernel_h,
            kernel_w,
            weights,
            bias,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weights: vec![T::zero(); self.weights.len()],
            bias: vec![T::zero(); self.bias.len()],
            ..*self
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn in_channels(&self) -> usize {
        self.in_per_group * self.groups
    }
    pub fn in_per_group(&self) -> usize {
        self.in_per_group
    }
    pub fn groups(&self) -> usize {
        self.groups
    }
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kernel_h, self.kernel_w)
    }
    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.in_per_group == 1
    }
    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        self.in_per_group * self.kernel_h * self.kernel_w
    }
    pub fn fan_out(&self) -> usize {
        (self.out_channels / self.groups) * self.kernel_h * self.kernel_w
    }

    #[inline]
    fn widx(&self, o: usize, i: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_per_group + i) * self.kernel_h + ky) * self.kernel_w + kx
    }

    pub fn cast<U: Scalar>(&self) -> ConvKernel<U> {
        ConvKernel {
            out_channels: self.out_channels,
            in_per_group: self.in_per_group,
            groups: self.groups,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            weights: self.weights.iter().map(|v| U::of(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.channels() != self.in_channels() {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input with {} channels for kernel {}x{}x{}x{} (groups {})",
                    self.in_channels(),
                    self.out_channels,
                    self.in_per_group,
                    self.kernel_h,
                    self.kernel_w,
                    self.groups
                ),
                format!("input {}", shape_str(input.shape())),
            ));
        }
        Ok(())
    }
}

/// Gradients of a convolution with respect to its weights and biases.
pub type ConvGrad<T = f32> = ConvKernel<T>;

/// Replicate-padded copy of one plane, `r` rows and `q` columns per side.
fn pad_plane<T: Scalar>(src: &[T], h: usize, w: usize, r: usize, q: usize) -> Vec<T> {
    let pw = w + 2 * q;
    let mut out = Vec::with_capacity((h + 2 * r) * pw);
    for py in 0..h + 2 * r {
        let row = &src[py.saturating_sub(r).min(h - 1) * w..][..w];
        out.extend(std::iter::repeat_n(row[0], q));
        out.extend_from_slice(row);
        out.extend(std::iter::repeat_n(row[w - 1], q));
    }
    out
}

/// Adjoint of [`pad_plane`]: folds border cells back onto the clamped pixel.
fn unpad_plane_add<T: Scalar>(padded: &[T], h: usize, w: usize, r: usize, q: usize, dst: &mut [T]) {
    let pw = w + 2 * q;
    for py in 0..h + 2 * r {
        let y = py.saturating_sub(r).min(h - 1);
        let row = &padded[py * pw..(py + 1) * pw];
        let drow = &mut dst[y * w..(y + 1) * w];
        for (px, &v) in row.iter().enumerate() {
            let x = px.saturating_sub(q).min(w - 1);
            drow[x] = drow[x] + v;
        }
    }
}

/// One input plane shifted by every kernel tap: `taps[ky * kw + kx]` holds the
/// replicate-padded plane read at offset `(ky - r, kx - q)`.
fn shifted_planes<T: Scalar>(plane: &[T], h: usize, w: usize, kh: usize, kw: usize) -> Vec<Vec<T>> {
    let (r, q) = (kh / 2, kw / 2);
    let pw = w + 2 * q;
    let padded = pad_plane(plane, h, w, r, q);
    let mut taps = Vec::with_capacity(kh * kw);
    for ky in 0..kh {
        for kx in 0..kw {
            let mut t = Vec::with_capacity(h * w);
            for y in 0..h {
                t.extend_from_slice(&padded[(y + ky) * pw + kx..][..w]);
            }
            taps.push(t);
        }
    }
    taps
}

/// Dot product with eight fixed partial sums so the loop vectorizes while the
/// summation order stays deterministic.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            lanes[k] = lanes[k] + x[k] * y[k];
        }
    }
    let mut acc = lanes.iter().fold(T::zero(), |s, &v| s + v);
    for (&x, &y) in ra.iter().zip(rb) {
        acc = acc + x * y;
    }
    acc
}

/// Same-size convolution with replicate (edge-clamp) padding.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &ConvKernel<T>) -> Result<Tensor<T>> {
    kernel.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let out_per_group = kernel.out_channels / kernel.groups;
    let mut out = Tensor::zeros(kernel.out_channels, h, w);
    for o in 0..kernel.out_channels {
        out.channel_mut(o).iter_mut().for_each(|v| *v = kernel.bias[o]);
    }
    for g in 0..kernel.groups {
        for i in 0..kernel.in_per_group {
            let taps = shifted_planes(input.channel(g * kernel.in_per_group + i), h, w, kh, kw);
            for o in g * out_per_group..(g + 1) * out_per_group {
                let plane = out.channel_mut(o);
                let wbase = kernel.widx(o, i, 0, 0);
                for (t, src) in taps.iter().enumerate() {
                    let wv = kernel.weights[wbase + t];
                    if wv == T::zero() {
                        continue;
                    }
                    for (d, &s) in plane.iter_mut().zip(src) {
                        *d = *d + wv * s;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] given the upstream gradient `grad_out`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &ConvKernel<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, ConvGrad<T>)> {
    kernel.check_input(input)?;
    let (h, w) = (input.height(), input.width());
    if grad_out.shape() != (kernel.out_channels, h, w) {
        return Err(Error::shape(
            "conv2d_backward",
            shape_str((kernel.out_channels, h, w)),
            shape_str(grad_out.shape()),
        ));
    }
    let (kh, kw) = (kernel.kernel_h, kernel.kernel_w);
    let (r, q) = (kh / 2, kw / 2);
    let pw = w + 2 * q;
    let out_per_group = kernel.out_channels / kernel.groups;
    let mut grad_k = kernel.zeros_like();
    for o in 0..kernel.out_channels {
        grad_k.bias[o] = grad_out.channel(o).iter().copied().sum();
    }
    let mut grad_in = Tensor::zeros(input.channels(), h, w);
    let mut grad_taps = vec![vec![T::zero(); h * w]; kh * kw];
    let mut grad_padded = vec![T::zero(); (h + 2 * r) * pw];

    for g in 0..kernel.groups {
        for i in 0..kernel.in_per_group {
            let ic = g * kernel.in_per_group + i;
            let taps = shifted_planes(input.channel(ic), h, w, kh, kw);
            grad_taps.iter_mut().for_each(|t| t.iter_mut().for_each(|v| *v = T::zero()));
            for o in g * out_per_group..(g + 1) * out_per_group {
                let go = grad_out.channel(o);
                let wbase = kernel.widx(o, i, 0, 0);
                for (t, src) in taps.iter().enumerate() {
                    grad_k.weights[wbase + t] = dot(go, src);
                    let wv = kernel.weights[wbase + t];
                    if wv != T::zero() {
                        for (d, &gv) in grad_taps[t].iter_mut().zip(go) {
                            *d = *d + wv * gv;
                        }
                    }
                }
            }
            grad_padded.iter_mut().for_each(|v| *v = T::zero());
            for ky in 0..kh {
                for kx in 0..kw {
                    let gt = &grad_taps[ky * kw + kx];
                    for y in 0..h {
                        let dst = &mut grad_padded[(y + ky) * pw + kx..][..w];
                        for (d, &v) in dst.iter_mut().zip(&gt[y * w..(y + 1) * w]) {
                            *d = *d + v;
                        }
                    }
                }
            }
            unpad_plane_add(&grad_padded, h, w, r, q, grad_in.channel_mut(ic));
        }
    }
    Ok((grad_in, grad_k))
}

/// Interpolation taps along one axis: `(lo, hi, frac)` per destination index.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = dst as f64 / src as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) / scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

fn check_upsample<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("zero upsample target size".into()));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::InvalidArgument("cannot upsample an empty tensor".into()));
    }
    if out_h < input.height() || out_w < input.width() {
        return Err(Error::InvalidArgument(format!(
            "upsample target {out_h}x{out_w} is smaller than input {}x{}",
            input.height(),
            input.width()
        )));
    }
    Ok(())
}

/// Bilinear upsampling with half-pixel centers (align-corners off).
pub fn bilinear_upsample<T: Scalar>(input: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check_upsample(input, out_h, out_w)?;
    if (out_h, out_w) == (input.height(), input.width()) {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(input.height(), out_h);
    let tx = bilinear_taps(input.width(), out_w);
    let w = input.width();
    let mut out = Tensor::zeros(input.channels(), out_h, out_w);
    for c in 0..input.channels() {
        let src = input.channel(c);
        let dst = out.channel_mut(c);
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                dst[y * out_w + x] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_upsample`]: scatters `grad_out` back onto the input grid.
pub fn bilinear_upsample_backward<T: Scalar>(
    input_h: usize,
    input_w: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, out_h, out_w) = grad_out.shape();
    let probe = Tensor::<T>::zeros(c, input_h, input_w);
    check_upsample(&probe, out_h, out_w)?;
    if (out_h, out_w) == (input_h, input_w) {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(input_h, out_h);
    let tx = bilinear_taps(input_w, out_w);
    let mut grad_in = probe;
    for ch in 0..c {
        let go = grad_out.channel(ch);
        let gi = grad_in.channel_mut(ch);
        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = go[y * out_w + x];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                gi[y0 * input_w + x0] = gi[y0 * input_w + x0] + gt * (T::one() - fx);
                gi[y0 * input_w + x1] = gi[y0 * input_w + x1] + gt * fx;
                gi[y1 * input_w + x0] = gi[y1 * input_w + x0] + gb * (T::one() - fx);
                gi[y1 * input_w + x1] = gi[y1 * input_w + x1] + gb * fx;
            }
        }
    }
    Ok(grad_in)
}

/// Stacks tensors along the channel axis, preserving order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of an empty list".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut channels = 0;
    for (i, t) in inputs.iter().enumerate() {
        if (t.height(), t.width()) != (h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("{h}x{w} spatial size"),
                format!("{}x{} at input index {i}", t.height(), t.width()),
            ));
        }
        channels += t.channels();
    }
    let mut data = Vec::with_capacity(channels * h * w);
    for t in inputs {
        data.extend_from_slice(t.data());
    }
    Tensor::new(channels, h, w, data)
}

/// Inverse of [`concat_channels`] for the given channel counts.
pub fn split_channels<T: Scalar>(input: &Tensor<T>, counts: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = counts.iter().sum();
    if total != input.channels() {
        return Err(Error::shape(
            "split_channels",
            format!("{total} channels"),
            format!("{} channels", input.channels()),
        ));
    }
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let t = input.slice_channels(start, n);
            start += n;
            t
        })
        .collect()
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| v.max(T::zero()))
}

/// Gradient through a ReLU given its pre-activation input.
pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    pre.zip_map(grad_out, |p, g| if p > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient through a sigmoid given its output.
pub fn sigmoid_backward<T: Scalar>(out: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    out.zip_map(grad_out, |s, g| g * s * (T::one() - s))
}
