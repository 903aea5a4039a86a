//! Pixel containers and the image math shared by the rest of the crate.
//!
//! Rasters are row-major with interleaved channels and `f32` samples. Image
//! data converted from 8-bit uses `x / 255`; the reverse is `round(x * 255)`
//! clamped to `0..=255`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
// libm-backed float methods for no_std builds
#[allow(unused_imports)]
use num_traits::Float;

/// A `width x height x channels` grid of finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(Dimension, "raster must be non-empty, got {width}x{height}");
        }
        if channels != 1 && channels != 3 {
            bail!(Dimension, "raster must have 1 or 3 channels, got {channels}");
        }
        if data.len() != width * height * channels {
            bail!(
                Dimension,
                "data length {} does not match {width}x{height}x{channels}",
                data.len()
            );
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(Input, "non-finite sample at index {i}");
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!(width > 0 && height > 0 && (channels == 1 || channels == 3));
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    /// Builds a raster from 8-bit samples using `x / 255`.
    pub fn from_u8(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, channels, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// True when every sample lies in `[0, 1]`.
    pub fn is_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Single-channel luminance as the plain mean of the channels.
    pub fn to_gray(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| (px.iter().map(|&v| f64::from(v)).sum::<f64>() / px.len() as f64) as f32)
            .collect();
        Raster { width: self.width, height: self.height, channels: 1, data }
    }

    /// Three-channel copy; grayscale samples are replicated.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Raster { width: self.width, height: self.height, channels: 3, data }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub fn to_byte(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Detector output: per-pixel probability that the pixel belongs to a grain.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl SaliencyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            bail!(Dimension, "saliency length {} does not match {width}x{height}", values.len());
        }
        if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            bail!(Input, "saliency value {} at index {i} outside [0, 1]", values[i]);
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Converts a single-channel raster; values must already be in `[0, 1]`.
    pub fn from_raster(r: &Raster) -> Result<Self> {
        let gray = r.to_gray();
        Self::new(gray.width, gray.height, gray.data)
    }
}

/// Row-major boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            bail!(Dimension, "mask length {} does not match {width}x{height}", bits.len());
        }
        Ok(Self { width, height, bits })
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, bits: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    /// Like [`get`](Self::get) but `false` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0
            && y >= 0
            && (x as usize) < self.width
            && (y as usize) < self.height
            && self.bits[y as usize * self.width + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-neighbour resampling; keeps the mask binary.
    pub fn resize_nearest(&self, out_w: usize, out_h: usize) -> Result<BinaryMask> {
        if out_w == 0 || out_h == 0 {
            bail!(Dimension, "resize target must be non-empty, got {out_w}x{out_h}");
        }
        let xs = nearest_indices(self.width, out_w);
        let ys = nearest_indices(self.height, out_h);
        let mut bits = Vec::with_capacity(out_w * out_h);
        for &sy in &ys {
            for &sx in &xs {
                bits.push(self.get(sx, sy));
            }
        }
        Ok(BinaryMask { width: out_w, height: out_h, bits })
    }
}

fn nearest_indices(n_in: usize, n_out: usize) -> Vec<usize> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|d| (((d as f64 + 0.5) * scale).floor() as usize).min(n_in - 1))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMethod {
    Bilinear,
    /// Catmull-Rom (`a = -0.5`), output clamped to `[0, 1]`.
    Bicubic,
}

/// Resamples `img` to `out_w x out_h` using pixel-centre alignment.
pub fn resize(img: &Raster, out_w: usize, out_h: usize, method: ResizeMethod) -> Result<Raster> {
    if out_w == 0 || out_h == 0 {
        bail!(Dimension, "resize target must be non-empty, got {out_w}x{out_h}");
    }
    let taps_x = taps(img.width, out_w, method);
    let taps_y = taps(img.height, out_h, method);
    let c = img.channels;

    // Horizontal pass into f64, then vertical.
    let mut tmp = vec![0.0f64; out_w * img.height * c];
    for y in 0..img.height {
        for (dx, tap) in taps_x.iter().enumerate() {
            for ch in 0..c {
                tmp[(y * out_w + dx) * c + ch] =
                    tap.apply(|sx| f64::from(img.get(sx, y, ch)));
            }
        }
    }
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for tap in &taps_y {
        for dx in 0..out_w {
            for ch in 0..c {
                let v = tap.apply(|sy| tmp[(sy * out_w + dx) * c + ch]);
                let v = match method {
                    ResizeMethod::Bilinear => v,
                    ResizeMethod::Bicubic => v.clamp(0.0, 1.0),
                };
                data.push(v as f32);
            }
        }
    }
    Ok(Raster { width: out_w, height: out_h, channels: c, data })
}

/// Single-channel `f64` resampling without output clamping.
pub fn resample_plane(
    values: &[f64],
    width: usize,
    height: usize,
    out_w: usize,
    out_h: usize,
    method: ResizeMethod,
) -> Result<Vec<f64>> {
    if values.len() != width * height || width == 0 || height == 0 {
        bail!(Dimension, "plane of {} values is not {width}x{height}", values.len());
    }
    if out_w == 0 || out_h == 0 {
        bail!(Dimension, "resize target must be non-empty, got {out_w}x{out_h}");
    }
    let taps_x = taps(width, out_w, method);
    let taps_y = taps(height, out_h, method);
    let mut tmp = vec![0.0f64; out_w * height];
    for y in 0..height {
        for (dx, tap) in taps_x.iter().enumerate() {
            tmp[y * out_w + dx] = tap.apply(|sx| values[y * width + sx]);
        }
    }
    let mut out = Vec::with_capacity(out_w * out_h);
    for tap in &taps_y {
        for dx in 0..out_w {
            out.push(tap.apply(|sy| tmp[sy * out_w + dx]));
        }
    }
    Ok(out)
}

/// Source indices and weights for one output coordinate.
struct Tap {
    anchor: usize,
    idx: [usize; 4],
    w: [f64; 4],
    n: usize,
}

impl Tap {
    // Evaluated as anchor + sum w_i (p_i - anchor) so constant inputs stay
    // exactly constant.
    #[inline]
    fn apply(&self, f: impl Fn(usize) -> f64) -> f64 {
        let base = f(self.anchor);
        let mut acc = 0.0;
        for i in 0..self.n {
            if self.w[i] != 0.0 {
                acc += self.w[i] * (f(self.idx[i]) - base);
            }
        }
        base + acc
    }
}

fn taps(n_in: usize, n_out: usize, method: ResizeMethod) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    let last = n_in as isize - 1;
    (0..n_out)
        .map(|d| {
            let src = (d as f64 + 0.5) * scale - 0.5;
            match method {
                ResizeMethod::Bilinear => {
                    let s = src.clamp(0.0, last as f64);
                    let x0 = s.floor() as usize;
                    let x1 = (x0 + 1).min(n_in - 1);
                    let t = s - x0 as f64;
                    Tap { anchor: x0, idx: [x0, x1, 0, 0], w: [1.0 - t, t, 0.0, 0.0], n: 2 }
                }
                ResizeMethod::Bicubic => {
                    let x0 = src.floor();
                    let t = src - x0;
                    let x0 = x0 as isize;
                    let clampi = |i: isize| i.clamp(0, last) as usize;
                    Tap {
                        anchor: clampi(x0),
                        idx: [clampi(x0 - 1), clampi(x0), clampi(x0 + 1), clampi(x0 + 2)],
                        w: [
                            cubic_weight(1.0 + t),
                            cubic_weight(t),
                            cubic_weight(1.0 - t),
                            cubic_weight(2.0 - t),
                        ],
                        n: 4,
                    }
                }
            }
        })
        .collect()
}

const CUBIC_A: f64 = -0.5;

fn cubic_weight(t: f64) -> f64 {
    let t = t.abs();
    let a = CUBIC_A;
    if t <= 1.0 {
        ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a
    } else {
        0.0
    }
}

/// Reflect-101 border index (`dcb|abcd|cba`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Normalised 1-D Gaussian kernel of radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with reflective borders. `sigma = 0` is the identity.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Result<Raster> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!(Parameter, "sigma must be finite and non-negative, got {sigma}");
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (w, h, c) = (img.width, img.height, img.channels);

    let mut tmp = vec![0.0f64; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sx = reflect(x as isize + j as isize - r, w);
                    acc += kv * f64::from(img.get(sx, y, ch));
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut data = vec![0.0f32; w * h * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                data[(y * w + x) * c + ch] = acc as f32;
            }
        }
    }
    Ok(Raster { width: w, height: h, channels: c, data })
}

/// 4-neighbour Laplacian (centre weight -4), reflective borders.
pub fn laplacian(img: &Raster) -> Result<Raster> {
    let resp = laplacian_f64(img)?;
    Ok(Raster {
        width: img.width,
        height: img.height,
        channels: 1,
        data: resp.into_iter().map(|v| v as f32).collect(),
    })
}

fn laplacian_f64(img: &Raster) -> Result<Vec<f64>> {
    if img.channels != 1 {
        bail!(Dimension, "laplacian expects a single-channel raster, got {}", img.channels);
    }
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        bail!(Dimension, "laplacian needs at least 3x3 pixels, got {w}x{h}");
    }
    let at = |x: isize, y: isize| f64::from(img.data[reflect(y, h) * w + reflect(x, w)]);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            out.push(at(x - 1, y) + at(x + 1, y) + at(x, y - 1) + at(x, y + 1) - 4.0 * at(x, y));
        }
    }
    Ok(out)
}

/// Focus measure: population variance of the Laplacian response.
pub fn laplacian_variance(img: &Raster) -> Result<f64> {
    let resp = laplacian_f64(img)?;
    let n = resp.len() as f64;
    let mean = resp.iter().sum::<f64>() / n;
    Ok(resp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

/// Index of the sharpest frame; ties go to the lowest index. RGB frames are
/// reduced to their channel mean first.
pub fn best_focus(stack: &[Raster]) -> Result<usize> {
    if stack.is_empty() {
        bail!(Input, "focus stack is empty");
    }
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, frame) in stack.iter().enumerate() {
        let score = laplacian_variance(&frame.to_gray())?;
        if score > best.1 {
            best = (i, score);
        }
    }
    Ok(best.0)
}
