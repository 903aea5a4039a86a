//! Gradient-weighted CLS attention heatmaps.

use alloc::vec::Vec;

use crate::embed::{AttentionCapture, VitConfig};
use crate::error::{bail, Result};
use crate::raster::{resample_plane, Raster, ResizeMethod};

/// Ranges below this are treated as constant maps.
pub const CONSTANT_EPS: f64 = 1e-9;
pub const DEFAULT_BLEND: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub grain_id: Option<u32>,
}

impl Heatmap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Grayscale raster of the heat values.
    pub fn to_raster(&self) -> Raster {
        let data = self.values.iter().map(|&v| v as f32).collect();
        Raster::new(self.width, self.height, 1, data).expect("sized")
    }
}

fn check_capture(cap: &AttentionCapture, cfg: &VitConfig) -> Result<()> {
    let t = cfg.num_tokens();
    if cap.heads != cfg.heads || cap.tokens != t || cap.grid != cfg.grid() || cap.hidden != cfg.hidden {
        bail!(Dimension, "capture shape does not match the model configuration");
    }
    if cap.attention.len() != cfg.heads * t * t || cap.qkv.len() != t * 3 * cfg.hidden {
        bail!(Dimension, "capture buffers have the wrong length");
    }
    if cap.qkv_grad.as_ref().is_some_and(|g| g.len() != cap.qkv.len()) {
        bail!(Dimension, "gradient buffer has the wrong length");
    }
    Ok(())
}

/// Per head, the CLS row over patch tokens as a row-major `grid x grid` map.
pub fn cls_attention_map(cap: &AttentionCapture, cfg: &VitConfig) -> Result<Vec<Vec<f64>>> {
    check_capture(cap, cfg)?;
    let p = cfg.num_patches();
    Ok(cap.cls_attention().chunks(p).map(<[f64]>::to_vec).collect())
}

/// `h_j`: mean absolute QKV gradient over head `j`'s query, key and value
/// columns of every token.
pub fn head_weights(cap: &AttentionCapture) -> Result<Vec<f64>> {
    let Some(grad) = &cap.qkv_grad else {
        bail!(State, "capture carries no gradients");
    };
    let (d, dh) = (cap.hidden, cap.head_dim());
    let mut sums = alloc::vec![0.0; cap.heads];
    for row in grad.chunks(3 * d) {
        for part in 0..3 {
            for (j, s) in sums.iter_mut().enumerate() {
                let start = part * d + j * dh;
                *s += row[start..start + dh].iter().map(|v| v.abs()).sum::<f64>();
            }
        }
    }
    let count = (cap.tokens * 3 * dh) as f64;
    Ok(sums.into_iter().map(|s| s / count).collect())
}

/// Min-max normalisation to `[0, 1]`; constant inputs become zeros.
pub fn normalize_minmax(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range >= CONSTANT_EPS) {
        return alloc::vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// `sum_j h_j A_cls_j`, bicubic-upsampled to the model input and normalised.
pub fn weighted_heatmap_with(cap: &AttentionCapture, cfg: &VitConfig, h: &[f64]) -> Result<Heatmap> {
    check_capture(cap, cfg)?;
    combine(cap, h, cfg.image_size)
}

pub fn weighted_heatmap(cap: &AttentionCapture, cfg: &VitConfig) -> Result<Heatmap> {
    weighted_heatmap_with(cap, cfg, &head_weights(cap)?)
}

/// [`weighted_heatmap`] for a capture of unknown configuration, upsampled
/// to `side x side`.
pub fn capture_heatmap(cap: &AttentionCapture, side: usize) -> Result<Heatmap> {
    let t = cap.tokens;
    if cap.heads == 0 || t != cap.grid * cap.grid + 1 || cap.attention.len() != cap.heads * t * t {
        bail!(Dimension, "inconsistent attention capture");
    }
    if cap.hidden % cap.heads != 0 || cap.qkv.len() != t * 3 * cap.hidden {
        bail!(Dimension, "inconsistent attention capture");
    }
    combine(cap, &head_weights(cap)?, side)
}

fn combine(cap: &AttentionCapture, h: &[f64], side: usize) -> Result<Heatmap> {
    if h.len() != cap.heads {
        bail!(Dimension, "{} head weights for {} heads", h.len(), cap.heads);
    }
    let p = cap.num_patches();
    let mut combined = alloc::vec![0.0; p];
    for (w, m) in h.iter().zip(cap.cls_attention().chunks(p)) {
        combined.iter_mut().zip(m).for_each(|(c, v)| *c += w * v);
    }
    let g = cap.grid;
    let up = resample_plane(&combined, g, g, side, side, ResizeMethod::Bicubic)?;
    Ok(Heatmap { width: side, height: side, values: normalize_minmax(&up), grain_id: None })
}

fn heat_colour(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// `(1 - alpha) * image + alpha * colour(heat)`; the heatmap is resized to the
/// image first when their sizes differ.
pub fn blend_heatmap(image: &Raster, heat: &Heatmap, alpha: f32) -> Result<Raster> {
    if !(0.0..=1.0).contains(&alpha) {
        bail!(Parameter, "blend factor must be in [0, 1], got {alpha}");
    }
    let (w, h) = (image.width(), image.height());
    let values = if (heat.width, heat.height) == (w, h) {
        heat.values.clone()
    } else {
        resample_plane(&heat.values, heat.width, heat.height, w, h, ResizeMethod::Bilinear)?
    };
    let rgb = image.to_rgb();
    let mut out = rgb.clone();
    for y in 0..h {
        for x in 0..w {
            let c = heat_colour(values[y * w + x] as f32);
            let src = rgb.pixel(x, y);
            let dst = out.pixel_mut(x, y);
            for k in 0..3 {
                dst[k] = (1.0 - alpha) * src[k] + alpha * c[k];
            }
        }
    }
    Ok(out)
}
