//! Image and saliency-map files: PNG, the `RAW8` byte raster and the `SAL1`
//! float map. Formats are chosen by extension.

use std::fs;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use pollen_core::raster::{Raster, SaliencyMap};

use crate::error::{Error, Result};

pub const RAW8_MAGIC: &[u8; 4] = b"RAW8";
pub const SAL1_MAGIC: &[u8; 4] = b"SAL1";

fn ext(path: &Path) -> String {
    path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub fn encode_raw8(img: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data().len());
    out.extend_from_slice(RAW8_MAGIC);
    for v in [img.width(), img.height(), img.channels()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(img.to_u8());
    out
}

pub fn decode_raw8(path: &Path, bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 16 || &bytes[..4] != RAW8_MAGIC {
        return Err(Error::format(path, "not a RAW8 file"));
    }
    let (w, h, c) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize);
    let expected = w.checked_mul(h).and_then(|n| n.checked_mul(c));
    if expected != Some(bytes.len() - 16) {
        return Err(Error::format(path, format!("payload is {} bytes, header says {w}x{h}x{c}", bytes.len() - 16)));
    }
    Ok(Raster::from_u8(w, h, c, &bytes[16..])?)
}

pub fn encode_sal1(map: &SaliencyMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * map.values().len());
    out.extend_from_slice(SAL1_MAGIC);
    out.extend_from_slice(&(map.width() as u32).to_le_bytes());
    out.extend_from_slice(&(map.height() as u32).to_le_bytes());
    for v in map.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_sal1(path: &Path, bytes: &[u8]) -> Result<SaliencyMap> {
    if bytes.len() < 12 || &bytes[..4] != SAL1_MAGIC {
        return Err(Error::format(path, "not a SAL1 file"));
    }
    let (w, h) = (u32_at(bytes, 4) as usize, u32_at(bytes, 8) as usize);
    if w.checked_mul(h).and_then(|n| n.checked_mul(4)) != Some(bytes.len() - 12) {
        return Err(Error::format(path, format!("payload does not hold {w}x{h} floats")));
    }
    let values = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(SaliencyMap::new(w, h, values)?)
}

fn decode_png(path: &Path, bytes: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Decode { path: path.into(), message: e.to_string() })
}

/// Grayscale PNGs load with one channel, everything else as RGB.
pub fn load_image(path: &Path) -> Result<Raster> {
    let bytes = read(path)?;
    if matches!(ext(path).as_str(), "raw8" | "raw") {
        return decode_raw8(path, &bytes);
    }
    let img = decode_png(path, &bytes)?;
    let gray = matches!(img.color(), image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16);
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        Ok(Raster::from_u8(w, h, 1, img.to_luma8().as_raw())?)
    } else {
        Ok(Raster::from_u8(w, h, 3, img.to_rgb8().as_raw())?)
    }
}

pub fn save_image(path: &Path, img: &Raster) -> Result<()> {
    if matches!(ext(path).as_str(), "raw8" | "raw") {
        return write(path, &encode_raw8(img));
    }
    let (w, h) = (img.width() as u32, img.height() as u32);
    let bytes = img.to_u8();
    let dynimg = match img.channels() {
        1 => DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("sized")),
        _ => DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.to_rgb().to_u8()).expect("sized")),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    dynimg
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::format(path, e.to_string()))?;
    write(path, &out.into_inner())
}

/// `.sal` files hold floats; images are read as gray levels over 255.
pub fn load_saliency(path: &Path) -> Result<SaliencyMap> {
    if ext(path) == "sal" {
        return decode_sal1(path, &read(path)?);
    }
    let img = load_image(path)?;
    Ok(SaliencyMap::from_raster(&img.to_gray())?)
}

pub fn save_saliency(path: &Path, map: &SaliencyMap) -> Result<()> {
    if ext(path) == "sal" {
        return write(path, &encode_sal1(map));
    }
    let r = Raster::new(map.width(), map.height(), 1, map.values().to_vec())?;
    save_image(path, &r)
}
