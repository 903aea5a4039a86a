//! Model input preparation: padded square crops, slate-gray background
//! masking, resizing, ImageNet normalisation and gray-filled geometric
//! augmentation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detect::{fill_contour, GrainDetection};
use crate::error::{bail, Result};
// libm-backed float methods for no_std builds
#[allow(unused_imports)]
use num_traits::Float;
use crate::raster::{resize, BinaryMask, Raster, ResizeMethod};

/// Slate gray, `128 / 255`.
pub const GRAY: f32 = 128.0 / 255.0;

/// Model input side in pixels.
pub const CROP_SIDE: usize = 252;

pub const DEFAULT_PAD_FRAC: f64 = 0.20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormParams {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormParams {
    pub const IMAGENET: NormParams = NormParams {
        mean: [0.485, 0.456, 0.406],
        std: [0.229, 0.224, 0.225],
    };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            bail!(Parameter, "normalisation std must be strictly positive");
        }
        Ok(())
    }

    /// Value a slate-gray pixel takes after normalisation.
    ///
    /// With the ImageNet statistics this is `(0.0741, 0.2052, 0.4265)`. The
    /// often-quoted `(0.07, 0.02, -0.03)` agrees only in the red channel:
    ///
    /// ```
    /// use pollen_core::prep::NormParams;
    ///
    /// let g = NormParams::IMAGENET.normalized_gray();
    /// for (v, want) in g.iter().zip([0.0741, 0.2052, 0.4265]) {
    ///     assert!((v - want).abs() < 1e-4);
    /// }
    /// let quoted = [0.07, 0.02, -0.03];
    /// assert!((g[0] - quoted[0]).abs() < 0.005);
    /// assert!((g[1] - quoted[1]).abs() > 0.18);
    /// assert!((g[2] - quoted[2]).abs() > 0.45);
    /// ```
    pub fn normalized_gray(&self) -> [f64; 3] {
        core::array::from_fn(|c| (f64::from(GRAY) - self.mean[c]) / self.std[c])
    }
}

impl Default for NormParams {
    fn default() -> Self {
        Self::IMAGENET
    }
}

/// Where a crop came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrainRef {
    pub annotation: String,
    pub grain_id: u32,
}

/// Channel-major `3 x side x side` normalised tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCrop {
    side: usize,
    tensor: Vec<f32>,
    pub source: Option<GrainRef>,
}

impl NormalizedCrop {
    pub fn new(side: usize, tensor: Vec<f32>) -> Result<Self> {
        if side == 0 || tensor.len() != 3 * side * side {
            bail!(Dimension, "tensor length {} is not 3x{side}x{side}", tensor.len());
        }
        if tensor.iter().any(|v| !v.is_finite()) {
            bail!(Input, "tensor contains non-finite values");
        }
        Ok(Self { side, tensor, source: None })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn tensor(&self) -> &[f32] {
        &self.tensor
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.tensor[(c * self.side + y) * self.side + x]
    }

    /// Little-endian `f32` bytes, channel-major.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.tensor.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepConfig {
    pub side: usize,
    pub pad_frac: f64,
    pub norm: NormParams,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self { side: CROP_SIDE, pad_frac: DEFAULT_PAD_FRAC, norm: NormParams::IMAGENET }
    }
}

/// Square crop of side `ceil(max(w, h) * (1 + pad_frac))` centred on the
/// grain's box. Out-of-image pixels are slate gray; the mask is the filled
/// contour in crop coordinates.
pub fn square_crop(img: &Raster, grain: &GrainDetection, pad_frac: f64) -> Result<(Raster, BinaryMask)> {
    if !(pad_frac >= 0.0) || !pad_frac.is_finite() {
        bail!(Parameter, "pad fraction must be non-negative, got {pad_frac}");
    }
    let bb = grain.bbox;
    let (iw, ih) = (img.width() as i64, img.height() as i64);
    let (bx, by) = (i64::from(bb.x), i64::from(bb.y));
    if bb.w == 0 || bb.h == 0 || bx >= iw || by >= ih || bx + i64::from(bb.w) <= 0 || by + i64::from(bb.h) <= 0 {
        bail!(Geometry, "grain {} bounding box lies outside the image", grain.id);
    }
    let side = (f64::from(bb.w.max(bb.h)) * (1.0 + pad_frac) - 1e-9).ceil().max(1.0) as usize;
    let (cx, cy) = bb.center();
    let ox = (cx - side as f64 / 2.0).floor() as i64;
    let oy = (cy - side as f64 / 2.0).floor() as i64;

    let ch = img.channels();
    let mut crop = Raster::filled(side, side, ch, GRAY);
    for y in 0..side {
        let sy = oy + y as i64;
        if sy < 0 || sy >= ih {
            continue;
        }
        for x in 0..side {
            let sx = ox + x as i64;
            if sx >= 0 && sx < iw {
                crop.pixel_mut(x, y).copy_from_slice(img.pixel(sx as usize, sy as usize));
            }
        }
    }

    let region = fill_contour(&grain.contour)?;
    let mut mask = BinaryMask::filled(side, side, false);
    for y in 0..side {
        for x in 0..side {
            if region.contains((ox + x as i64) as i32, (oy + y as i64) as i32) {
                mask.set(x, y, true);
            }
        }
    }
    Ok((crop, mask))
}

/// Replaces every pixel outside the mask with slate gray.
pub fn mask_background(crop: &Raster, mask: &BinaryMask) -> Result<Raster> {
    if crop.width() != mask.width() || crop.height() != mask.height() {
        bail!(
            Dimension,
            "crop {}x{} and mask {}x{} differ",
            crop.width(),
            crop.height(),
            mask.width(),
            mask.height()
        );
    }
    let mut out = crop.clone();
    for y in 0..crop.height() {
        for x in 0..crop.width() {
            if !mask.get(x, y) {
                out.pixel_mut(x, y).iter_mut().for_each(|v| *v = GRAY);
            }
        }
    }
    Ok(out)
}

/// Per channel `(x - mean) / std`, producing a channel-major tensor. The
/// input must be a square RGB raster.
pub fn normalize(img: &Raster, p: &NormParams) -> Result<NormalizedCrop> {
    p.validate()?;
    if img.channels() != 3 || img.width() != img.height() {
        bail!(
            Dimension,
            "normalisation expects a square RGB raster, got {}x{}x{}",
            img.width(),
            img.height(),
            img.channels()
        );
    }
    let side = img.width();
    let mut tensor = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                tensor.push(((f64::from(img.get(x, y, c)) - p.mean[c]) / p.std[c]) as f32);
            }
        }
    }
    NormalizedCrop::new(side, tensor)
}

/// Inverse of [`normalize`].
pub fn denormalize(crop: &NormalizedCrop, p: &NormParams) -> Raster {
    let side = crop.side;
    let mut img = Raster::filled(side, side, 3, 0.0);
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let v = f64::from(crop.get(c, y, x)) * p.std[c] + p.mean[c];
                img.set(x, y, c, v as f32);
            }
        }
    }
    img
}

/// Deterministic inference transform for one grain: crop, gray background,
/// resize (bilinear image, nearest mask), re-mask, normalise.
///
/// The second masking pass keeps bilinear blending from leaking foreground
/// into background pixels of the resized mask.
pub fn prepare_grain(img: &Raster, grain: &GrainDetection, cfg: &PrepConfig) -> Result<NormalizedCrop> {
    let rgb = img.to_rgb();
    let (crop, mask) = square_crop(&rgb, grain, cfg.pad_frac)?;
    let masked = mask_background(&crop, &mask)?;
    let resized = resize(&masked, cfg.side, cfg.side, ResizeMethod::Bilinear)?;
    let rmask = mask.resize_nearest(cfg.side, cfg.side)?;
    normalize(&mask_background(&resized, &rmask)?, &cfg.norm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AugmentOp {
    HFlip,
    VFlip,
    /// Degrees, counter-clockwise on screen, about the image centre.
    Rotate(f64),
    /// Pixels; positive moves content right / down.
    Translate(f64, f64),
}

/// Ranges for [`random_ops`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    pub max_rotation_deg: f64,
    /// Fraction of the side.
    pub max_translate: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { flip_prob: 0.5, max_rotation_deg: 180.0, max_translate: 0.1 }
    }
}

/// Draws a reproducible op list for a crop of the given side.
pub fn random_ops(policy: &AugmentPolicy, side: usize, seed: u64) -> Vec<AugmentOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    if rng.random_bool(policy.flip_prob) {
        ops.push(AugmentOp::HFlip);
    }
    if rng.random_bool(policy.flip_prob) {
        ops.push(AugmentOp::VFlip);
    }
    let m = policy.max_rotation_deg;
    ops.push(AugmentOp::Rotate(rng.random_range(-m..=m)));
    let t = policy.max_translate * side as f64;
    if t > 0.0 {
        ops.push(AugmentOp::Translate(rng.random_range(-t..=t), rng.random_range(-t..=t)));
    }
    ops
}

/// Applies `ops` identically to image and mask. Pixels without source
/// support become gray (image) / unset (mask); the result is re-masked so
/// the background stays exactly gray.
pub fn augment(crop: &Raster, mask: &BinaryMask, ops: &[AugmentOp]) -> Result<(Raster, BinaryMask)> {
    if crop.width() != mask.width() || crop.height() != mask.height() {
        bail!(Dimension, "crop and mask dimensions differ");
    }
    let mut img = crop.clone();
    let mut m = mask.clone();
    for op in ops {
        if let AugmentOp::Rotate(deg) = op {
            if !(-180.0..=180.0).contains(deg) {
                bail!(Parameter, "rotation must lie in [-180, 180], got {deg}");
            }
        }
        (img, m) = apply_op(&img, &m, *op);
    }
    Ok((mask_background(&img, &m)?, m))
}

pub fn augment_random(
    crop: &Raster,
    mask: &BinaryMask,
    policy: &AugmentPolicy,
    seed: u64,
) -> Result<(Raster, BinaryMask)> {
    augment(crop, mask, &random_ops(policy, crop.width(), seed))
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-12 { r } else { v }
}

fn apply_op(img: &Raster, mask: &BinaryMask, op: AugmentOp) -> (Raster, BinaryMask) {
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    // Inverse map: destination pixel -> source coordinate.
    let inverse = |x: f64, y: f64| -> (f64, f64) {
        match op {
            AugmentOp::HFlip => (w as f64 - 1.0 - x, y),
            AugmentOp::VFlip => (x, h as f64 - 1.0 - y),
            AugmentOp::Translate(tx, ty) => (x - tx, y - ty),
            AugmentOp::Rotate(deg) => {
                let t = deg.to_radians();
                let (s, c) = (snap(t.sin()), snap(t.cos()));
                let (u, v) = (x - cx, y - cy);
                (cx + u * c - v * s, cy + u * s + v * c)
            }
        }
    };
    let ch = img.channels();
    let mut out = Raster::filled(w, h, ch, GRAY);
    let mut out_mask = BinaryMask::filled(w, h, false);
    const EPS: f64 = 1e-9;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            if sx < -EPS || sy < -EPS || sx > w as f64 - 1.0 + EPS || sy > h as f64 - 1.0 + EPS {
                continue;
            }
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
            for c in 0..ch {
                let p = |xx: usize, yy: usize| f64::from(img.get(xx, yy, c));
                let top = p(x0, y0) + (p(x1, y0) - p(x0, y0)) * tx;
                let bot = p(x0, y1) + (p(x1, y1) - p(x0, y1)) * tx;
                out.set(x, y, c, (top + (bot - top) * ty) as f32);
            }
            out_mask.set(x, y, mask.get(sx.round() as usize, sy.round() as usize));
        }
    }
    (out, out_mask)
}
