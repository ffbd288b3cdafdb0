//! Fixed-size raster arithmetic.
//!
//! [`Raster`] is the value type for latents, clean images and noise
//! predictions alike. Everything here is a pure function of its inputs.

use crate::error::{Error, Result};

/// Dense H×W×C grid of reals, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "raster dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite raster entry at index {i}")));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Unchecked values; used for intermediate results whose finiteness is checked by callers.
    pub(crate) fn from_parts(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "raster length");
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn zeros_like(other: &Raster) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty raster");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.offset(y, x, c);
        self.data[i] = value;
    }

    pub fn ensure_same_shape(&self, other: &Raster) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        self.ensure_same_shape(other)?;
        Ok(Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn abs(&self) -> Raster {
        self.map(f64::abs)
    }

    pub fn add(&self, other: &Raster) -> Result<Raster> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Raster) -> Result<Raster> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Raster) -> Result<Raster> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Raster {
        self.map(|v| v * k)
    }

    pub fn add_scalar(&self, k: f64) -> Raster {
        self.map(|v| v + k)
    }

    /// `self + k * other`.
    pub fn axpy(&self, k: f64, other: &Raster) -> Result<Raster> {
        self.zip_map(other, |a, b| a + k * b)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Raster) -> Result<f64> {
        self.ensure_same_shape(other)?;
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

    /// Flat index of the largest entry (first one on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Raster {
        self.map(|v| v.clamp(lo, hi))
    }

    /// Single-channel raster holding channel `c`.
    pub fn channel(&self, c: usize) -> Raster {
        assert!(c < self.channels, "channel {c} out of range");
        Raster::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    /// Per-pixel mean of absolute values across channels.
    pub fn mean_abs_channels(&self) -> Raster {
        let inv = 1.0 / self.channels as f64;
        Raster::from_fn(self.height, self.width, 1, |y, x, _| {
            (0..self.channels).map(|c| self.get(y, x, c).abs()).sum::<f64>() * inv
        })
    }
}

/// Right-hand operand of [`elementwise`].
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Raster(&'a Raster),
    Scalar(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Abs,
    Add,
    Sub,
    Scale,
    Hadamard,
}

/// Pointwise arithmetic. `Abs` ignores `b`; `Scale` accepts a scalar or a
/// raster (the latter behaves like `Hadamard`); scalar `Add`/`Sub` broadcast.
pub fn elementwise(op: ElementwiseOp, a: &Raster, b: Operand<'_>) -> Result<Raster> {
    match (op, b) {
        (ElementwiseOp::Abs, _) => Ok(a.abs()),
        (ElementwiseOp::Add, Operand::Raster(r)) => a.add(r),
        (ElementwiseOp::Add, Operand::Scalar(k)) => Ok(a.add_scalar(k)),
        (ElementwiseOp::Sub, Operand::Raster(r)) => a.sub(r),
        (ElementwiseOp::Sub, Operand::Scalar(k)) => Ok(a.add_scalar(-k)),
        (ElementwiseOp::Scale, Operand::Scalar(k)) => Ok(a.scale(k)),
        (ElementwiseOp::Scale | ElementwiseOp::Hadamard, Operand::Raster(r)) => a.hadamard(r),
        (ElementwiseOp::Hadamard, Operand::Scalar(k)) => Ok(a.scale(k)),
    }
}

/// Square, odd-sized, normalized smoothing kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel2D {
    /// Builds a kernel from row-major weights, rescaling them to sum to one.
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if weights.len() != size * size {
            return Err(Error::invalid(format!(
                "kernel of size {size} needs {} weights, got {}",
                size * size,
                weights.len()
            )));
        }
        let total: f64 = weights.iter().sum();
        if !total.is_finite() || total <= 0.0 || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("kernel weights must be finite with a positive sum"));
        }
        Ok(Self {
            size,
            weights: weights.into_iter().map(|w| w / total).collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }
}

impl Default for Kernel2D {
    fn default() -> Self {
        gaussian_kernel(3, 1.0).expect("3x3 sigma=1 kernel is valid")
    }
}

/// Sampled Gaussian `exp(-d²/2σ²)` on integer offsets, normalized.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Kernel2D> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "kernel size must be odd and positive, got {size}"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::invalid(format!("kernel sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let two_var = 2.0 * sigma * sigma;
    let mut weights = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            weights.push((-(dy * dy + dx * dx) / two_var).exp());
        }
    }
    Kernel2D::new(size, weights)
}

/// Per-channel 2-D convolution with replicate-edge padding.
pub fn convolve_smooth(input: &Raster, kernel: &Kernel2D) -> Raster {
    let (h, w, ch) = input.shape();
    let r = kernel.radius() as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    Raster::from_fn(h, w, ch, |y, x, c| {
        let mut acc = 0.0;
        for dy in -r..=r {
            let sy = clamp(y as isize - dy, h);
            for dx in -r..=r {
                let sx = clamp(x as isize - dx, w);
                let k = kernel.weight((dy + r) as usize, (dx + r) as usize);
                acc += k * input.get(sy, sx, c);
            }
        }
        acc
    })
}

/// Softmax over all pixels of a single-channel raster.
pub fn softmax_over_pixels(input: &Raster) -> Result<Raster> {
    if input.channels() != 1 {
        return Err(Error::invalid(format!(
            "spatial softmax expects one channel, got {}",
            input.channels()
        )));
    }
    let max = input.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps = input.map(|v| (v - max).exp());
    let z = exps.sum();
    Ok(exps.scale(1.0 / z))
}
