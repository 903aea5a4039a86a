//! Synthetic fixtures: saliency maps and textured micrographs with grains at
//! known positions. Used by tests, the acceptance suite and the CLI's `synth`
//! command so the whole pipeline can run without an upstream detector.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::raster::{BinaryMask, Raster, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthShape {
    Disk { cx: f64, cy: f64, r: f64 },
    Rect { x: i64, y: i64, w: i64, h: i64 },
}

impl SynthShape {
    /// Pixel `(x, y)` is covered when its integer centre lies in the shape.
    pub fn contains(&self, x: usize, y: usize) -> bool {
        match *self {
            SynthShape::Disk { cx, cy, r } => {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                dx * dx + dy * dy <= r * r
            }
            SynthShape::Rect { x: rx, y: ry, w, h } => {
                let (x, y) = (x as i64, y as i64);
                x >= rx && x < rx + w && y >= ry && y < ry + h
            }
        }
    }
}

pub fn disk_mask(w: usize, h: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
    let shape = SynthShape::Disk { cx, cy, r };
    let bits = (0..w * h).map(|i| shape.contains(i % w, i / w)).collect();
    BinaryMask::new(w, h, bits).expect("sized")
}

/// Saliency map with `(shape, value)` pairs painted over a constant background.
/// Later shapes overwrite earlier ones.
pub fn paint_saliency(w: usize, h: usize, background: f32, shapes: &[(SynthShape, f32)]) -> SaliencyMap {
    let mut values = alloc::vec![background; w * h];
    for (shape, v) in shapes {
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x, y) {
                    values[y * w + x] = *v;
                }
            }
        }
    }
    SaliencyMap::new(w, h, values).expect("values in range")
}

/// `(cx, cy, r)` disks at saliency `inside` over `outside`.
pub fn disk_saliency(w: usize, h: usize, disks: &[(f64, f64, f64)], inside: f32, outside: f32) -> SaliencyMap {
    let shapes: Vec<_> = disks
        .iter()
        .map(|&(cx, cy, r)| (SynthShape::Disk { cx, cy, r }, inside))
        .collect();
    paint_saliency(w, h, outside, &shapes)
}

/// Bright-field style RGB image: pale background, each disk filled with a
/// stripe texture whose period and tint depend on `texture`.
pub fn textured_image(w: usize, h: usize, disks: &[(f64, f64, f64, u32)]) -> Raster {
    let mut img = Raster::filled(w, h, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let bg = 0.86 + 0.04 * (((x * 7 + y * 13) % 11) as f32 / 11.0);
            img.pixel_mut(x, y).copy_from_slice(&[bg, bg, bg * 0.98]);
        }
    }
    for &(cx, cy, r, texture) in disks {
        let shape = SynthShape::Disk { cx, cy, r };
        let period = 3 + (texture as usize % 5) * 2;
        let tint = [0.55 + 0.05 * (texture % 3) as f32, 0.45, 0.30 + 0.06 * (texture % 4) as f32];
        for y in 0..h {
            for x in 0..w {
                if shape.contains(x, y) {
                    let stripe = if ((x + y * (texture as usize % 2 + 1)) / period) % 2 == 0 { 1.0 } else { 0.7 };
                    let px = img.pixel_mut(x, y);
                    for c in 0..3 {
                        px[c] = (tint[c] * stripe).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    img
}

/// `size x size` checkerboard of `cell`-pixel squares with values `{0, 1}`.
pub fn checkerboard(size: usize, cell: usize) -> Raster {
    let data = (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            if (x / cell + y / cell) % 2 == 0 { 0.0 } else { 1.0 }
        })
        .collect();
    Raster::new(size, size, 1, data).expect("sized")
}

/// Scene description `WxH:cx,cy,r[,texture];cx,cy,r[,texture];...`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub disks: Vec<(f64, f64, f64, u32)>,
}

impl SynthSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (size, rest) = s.split_once(':').unwrap_or((s, ""));
        let Some((w, h)) = size.trim().split_once('x') else {
            bail!(Input, "synthetic spec must start with WxH, got {size:?}");
        };
        let width = parse_num::<usize>(w)?;
        let height = parse_num::<usize>(h)?;
        if width == 0 || height == 0 {
            bail!(Input, "synthetic image must be non-empty");
        }
        let mut disks = Vec::new();
        for (i, item) in rest.split(';').map(str::trim).filter(|t| !t.is_empty()).enumerate() {
            let f: Vec<&str> = item.split(',').collect();
            if f.len() != 3 && f.len() != 4 {
                bail!(Input, "disk {i}: expected cx,cy,r[,texture], got {item:?}");
            }
            let texture = if f.len() == 4 { parse_num::<u32>(f[3])? } else { i as u32 };
            disks.push((parse_num(f[0])?, parse_num(f[1])?, parse_num(f[2])?, texture));
        }
        Ok(Self { width, height, disks })
    }

    pub fn saliency(&self, inside: f32, outside: f32) -> SaliencyMap {
        let d: Vec<_> = self.disks.iter().map(|&(x, y, r, _)| (x, y, r)).collect();
        disk_saliency(self.width, self.height, &d, inside, outside)
    }

    pub fn image(&self) -> Raster {
        textured_image(self.width, self.height, &self.disks)
    }
}

fn parse_num<T: core::str::FromStr>(s: &str) -> Result<T> {
    match s.trim().parse() {
        Ok(v) => Ok(v),
        Err(_) => Err(crate::Error::Input(String::from("bad number in synthetic spec: ") + s.trim())),
    }
}
