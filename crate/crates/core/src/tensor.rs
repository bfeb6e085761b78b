//! Dense real arrays and the handful of layer primitives the other modules compose.
//!
//! Image and feature tensors use the channel-major `(C, H, W)` layout, row-major
//! within a channel. Convolutions are cross-correlations (no kernel flip) with
//! zero padding. Every operation returns an error rather than a tensor holding
//! NaN or infinity.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Default epsilon for batch and layer normalization.
pub const NORM_EPSILON: f64 = 1e-5;

/// Shaped, dense `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FeatureMap {
    /// Builds a map, checking that every dimension is positive, the element
    /// count matches, and all values are finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero or missing dimension")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InputDomain("feature map contains NaN or infinity".into()));
        }
        Ok(Self { shape, data })
    }

    /// All-zero map. Panics if any dimension is zero.
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "bad shape {shape:?}");
        assert!(value.is_finite());
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// `(C, H, W)` map with values from `f(c, i, j)`.
    pub fn from_fn3(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    data.push(f(ci, i, j));
                }
            }
        }
        Self::new(vec![c, h, w], data).expect("from_fn3 produced an invalid map")
    }

    /// Map with entries drawn uniformly from `[lo, hi)`.
    pub fn random_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(shape);
        for v in &mut m.data {
            *v = rng.random_range(lo..hi);
        }
        m
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// `(C, H, W)` of a rank-3 map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::dim(format!(
                "expected a (C, H, W) map, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + i) * w + j]
    }

    /// Contiguous slice of one channel of a `(C, H, W)` map.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Applies `f` elementwise.
    pub fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Self> {
        finite(op, self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        finite(op, self.shape.clone(), data)
    }

    /// Elementwise sum.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, a: f64) -> Result<Self> {
        self.map("scale", |v| a * v)
    }

    /// Largest absolute elementwise difference; infinite when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Stacks `(C_k, H, W)` maps along the channel axis.
    pub fn concat_channels(parts: &[FeatureMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero maps"))?;
        let (_, h, w) = first.dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = p.dims3()?;
            if (ph, pw) != (h, w) {
                return Err(Error::dim(format!("concat: spatial size {ph}x{pw} != {h}x{w}")));
            }
            c_total += c;
            data.extend_from_slice(&p.data);
        }
        Self::new(vec![c_total, h, w], data)
    }

    /// Swaps the two spatial axes of a `(C, H, W)` map.
    pub fn transpose_hw(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        Ok(Self::from_fn3(c, w, h, |ci, i, j| self.at3(ci, j, i)))
    }
}

fn finite(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<FeatureMap> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(FeatureMap { shape, data })
}

/// Kernel, bias, and geometry of a 2D convolution.
///
/// `kernel` has shape `(C_out, C_in / groups, k, k)`. Depthwise convolution is
/// `groups == C_in == C_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub kernel: FeatureMap,
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvWeights {
    pub fn new(
        kernel: FeatureMap,
        bias: Option<Vec<f64>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let &[c_out, _, kh, kw] = kernel.shape() else {
            return Err(Error::dim(format!(
                "conv kernel must be rank 4, got {:?}",
                kernel.shape()
            )));
        };
        if kh != kw {
            return Err(Error::dim(format!("conv kernel must be square, got {kh}x{kw}")));
        }
        if stride == 0 || groups == 0 {
            return Err(Error::param("stride and groups must be positive"));
        }
        if c_out % groups != 0 {
            return Err(Error::dim(format!("groups {groups} does not divide C_out {c_out}")));
        }
        if let Some(b) = &bias {
            if b.len() != c_out {
                return Err(Error::dim(format!("bias length {} != C_out {c_out}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::InputDomain("conv bias contains NaN or infinity".into()));
            }
        }
        Ok(Self {
            kernel,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// 1x1 convolution from a row-major `(C_out, C_in)` weight matrix.
    pub fn pointwise(c_out: usize, c_in: usize, weights: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let kernel = FeatureMap::new(vec![c_out, c_in, 1, 1], weights)?;
        Self::new(kernel, bias, 1, 0, 1)
    }

    /// All-zero weights (and zero bias when `with_bias`).
    pub fn zeros(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Self {
        let kernel = FeatureMap::zeros(&[c_out, c_in / groups, k, k]);
        let bias = with_bias.then(|| vec![0.0; c_out]);
        Self::new(kernel, bias, stride, padding, groups).expect("invalid conv geometry")
    }

    /// Uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    #[allow(clippy::too_many_arguments)]
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = (c_in / groups * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let kernel = FeatureMap::random_uniform(&[c_out, c_in / groups, k, k], -bound, bound, rng);
        let bias = with_bias.then(|| (0..c_out).map(|_| rng.random_range(-bound..bound)).collect());
        Self::new(kernel, bias, stride, padding, groups).expect("invalid conv geometry")
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1] * self.groups
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel_size();
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < k || wp < k {
            return Err(Error::dim(format!("kernel {k} larger than padded input {hp}x{wp}")));
        }
        Ok(((hp - k) / self.stride + 1, (wp - k) / self.stride + 1))
    }
}

/// Grouped 2D cross-correlation with zero padding.
pub fn conv2d(x: &FeatureMap, w: &ConvWeights) -> Result<FeatureMap> {
    let (c_in, h, wd) = x.dims3()?;
    if c_in != w.in_channels() {
        return Err(Error::dim(format!(
            "conv2d: input has {c_in} channels, weights expect {}",
            w.in_channels()
        )));
    }
    if c_in % w.groups != 0 {
        return Err(Error::dim(format!("groups {} does not divide C_in {c_in}", w.groups)));
    }
    let (ho, wo) = w.output_size(h, wd)?;
    let c_out = w.out_channels();
    let k = w.kernel_size();
    let cin_g = c_in / w.groups;
    let cout_g = c_out / w.groups;
    let (stride, pad) = (w.stride as isize, w.padding as isize);
    let kdata = w.kernel.data();
    let xdata = x.data();

    let mut out = vec![0.0; c_out * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(co, plane)| {
        let g = co / cout_g;
        let bias = w.bias.as_ref().map_or(0.0, |b| b[co]);
        for oi in 0..ho {
            for oj in 0..wo {
                let mut acc = bias;
                for ci in 0..cin_g {
                    let xc = g * cin_g + ci;
                    let kbase = (co * cin_g + ci) * k * k;
                    for ki in 0..k {
                        let ii = oi as isize * stride - pad + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let row = (xc * h + ii as usize) * wd;
                        for kj in 0..k {
                            let jj = oj as isize * stride - pad + kj as isize;
                            if jj < 0 || jj >= wd as isize {
                                continue;
                            }
                            acc += kdata[kbase + ki * k + kj] * xdata[row + jj as usize];
                        }
                    }
                }
                plane[oi * wo + oj] = acc;
            }
        }
    });
    finite("conv2d", vec![c_out, ho, wo], out)
}

/// Per-channel statistics and affine parameters for inference-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub epsilon: f64,
}

impl NormStats {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>, scale: Vec<f64>, shift: Vec<f64>, epsilon: f64) -> Result<Self> {
        let c = mean.len();
        if variance.len() != c || scale.len() != c || shift.len() != c {
            return Err(Error::dim("norm stats vectors differ in length"));
        }
        if variance.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::param("variance entries must be non-negative"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::param("norm epsilon must be positive"));
        }
        Ok(Self {
            mean,
            variance,
            scale,
            shift,
            epsilon,
        })
    }

    /// Mean 0, variance 1, scale 1, shift 0.
    pub fn identity(c: usize) -> Self {
        Self {
            mean: vec![0.0; c],
            variance: vec![1.0; c],
            scale: vec![1.0; c],
            shift: vec![0.0; c],
            epsilon: NORM_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, c: usize) -> Result<()> {
        if self.channels() != c {
            return Err(Error::dim(format!(
                "norm stats have {} channels, input has {c}",
                self.channels()
            )));
        }
        Ok(())
    }
}

/// `scale * (x - mean) / sqrt(var + eps) + shift`, per channel.
pub fn batch_norm_infer(x: &FeatureMap, s: &NormStats) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    s.check(c)?;
    let plane = h * w;
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = idx / plane;
            s.scale[ch] * (v - s.mean[ch]) / (s.variance[ch] + s.epsilon).sqrt() + s.shift[ch]
        })
        .collect();
    finite("batch_norm_infer", x.shape().to_vec(), data)
}

/// Algebraic inverse of [`batch_norm_infer`]; requires non-zero scales.
pub fn batch_norm_invert(y: &FeatureMap, s: &NormStats) -> Result<FeatureMap> {
    let (c, h, w) = y.dims3()?;
    s.check(c)?;
    if s.scale.contains(&0.0) {
        return Err(Error::param("cannot invert batch norm with a zero scale"));
    }
    let plane = h * w;
    let data = y
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let ch = idx / plane;
            (v - s.shift[ch]) * (s.variance[ch] + s.epsilon).sqrt() / s.scale[ch] + s.mean[ch]
        })
        .collect();
    finite("batch_norm_invert", y.shape().to_vec(), data)
}

/// Affine parameters of a channel-wise layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Vec<f64>,
    pub shift: Vec<f64>,
    pub epsilon: f64,
}

impl LayerNorm {
    pub fn new(scale: Vec<f64>, shift: Vec<f64>, epsilon: f64) -> Result<Self> {
        if scale.len() != shift.len() {
            return Err(Error::dim("layer norm scale and shift differ in length"));
        }
        if !(epsilon > 0.0) {
            return Err(Error::param("layer norm epsilon must be positive"));
        }
        Ok(Self { scale, shift, epsilon })
    }

    pub fn identity(c: usize) -> Self {
        Self {
            scale: vec![1.0; c],
            shift: vec![0.0; c],
            epsilon: NORM_EPSILON,
        }
    }
}

/// Normalizes the channel vector at every spatial site to zero mean and unit
/// (population) variance, then applies the per-channel affine map.
pub fn layer_norm(x: &FeatureMap, p: &LayerNorm) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    if p.scale.len() != c {
        return Err(Error::dim(format!(
            "layer norm has {} channels, input has {c}",
            p.scale.len()
        )));
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for site in 0..plane {
        let mean = (0..c).map(|ch| xd[ch * plane + site]).sum::<f64>() / c as f64;
        let var = (0..c)
            .map(|ch| {
                let d = xd[ch * plane + site] - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + p.epsilon).sqrt();
        for ch in 0..c {
            out[ch * plane + site] = p.scale[ch] * (xd[ch * plane + site] - mean) * inv + p.shift[ch];
        }
    }
    finite("layer_norm", x.shape().to_vec(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    /// Exact erf form.
    Gelu,
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + libm::erf(v / std::f64::consts::SQRT_2))
}

pub fn activate(kind: Activation, x: &FeatureMap) -> Result<FeatureMap> {
    match kind {
        Activation::Silu => x.map("silu", silu),
        Activation::Gelu => x.map("gelu", gelu),
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax_axis(x: &FeatureMap, axis: usize) -> Result<FeatureMap> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::dim(format!("axis {axis} out of range for rank {}", shape.len())));
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (k, b) in buf.iter_mut().enumerate() {
                *b = (xd[at(k)] - max).exp();
                sum += *b;
            }
            for (k, b) in buf.iter().enumerate() {
                out[at(k)] = b / sum;
            }
        }
    }
    finite("softmax_axis", shape.to_vec(), out)
}

/// Sub-pixel rearrangement `(C r^2, H, W) -> (C, rH, rW)`.
///
/// Output channel `k` at `(i, j)` reads input channel `k r^2 + (i mod r) r + (j mod r)`
/// at `(i / r, j / r)`.
pub fn pixel_shuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    if r == 0 {
        return Err(Error::param("pixel_shuffle factor must be positive"));
    }
    let rr = r * r;
    if c % rr != 0 {
        return Err(Error::dim(format!("channel count {c} not divisible by r^2 = {rr}")));
    }
    let c_out = c / rr;
    Ok(FeatureMap::from_fn3(c_out, h * r, w * r, |k, i, j| {
        x.at3(k * rr + (i % r) * r + (j % r), i / r, j / r)
    }))
}

/// Inverse of [`pixel_shuffle`] (space-to-depth): `(C, rH, rW) -> (C r^2, H, W)`.
pub fn pixel_unshuffle(x: &FeatureMap, r: usize) -> Result<FeatureMap> {
    let (c, h, w) = x.dims3()?;
    if r == 0 {
        return Err(Error::param("pixel_unshuffle factor must be positive"));
    }
    if h % r != 0 || w % r != 0 {
        return Err(Error::dim(format!("spatial size {h}x{w} not divisible by {r}")));
    }
    let rr = r * r;
    Ok(FeatureMap::from_fn3(c * rr, h / r, w / r, |ch, i, j| {
        let (k, phase) = (ch / rr, ch % rr);
        x.at3(k, i * r + phase / r, j * r + phase % r)
    }))
}
