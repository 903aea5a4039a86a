//! Drawing helpers for annotated overlays: outlined boxes, a 3x5 bitmap font
//! and a stable class palette.

use crate::detect::BBox;
use crate::raster::Raster;
use crate::seed::fnv1a;

/// Twelve well-separated RGB colours.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

/// Colour for grains without a class.
pub const UNCLASSIFIED_COLOUR: [u8; 3] = [128, 128, 128];

pub fn class_colour(class: &str) -> [u8; 3] {
    PALETTE[(fnv1a(class.as_bytes()) % PALETTE.len() as u64) as usize]
}

fn put(img: &mut Raster, x: i64, y: i64, rgb: [f32; 3]) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    img.pixel_mut(x as usize, y as usize).copy_from_slice(&rgb);
}

fn to_f32(c: [u8; 3]) -> [f32; 3] {
    c.map(|v| f32::from(v) / 255.0)
}

/// Outline of `b` drawn `thickness` pixels inward, clipped to the image.
pub fn draw_box(img: &mut Raster, b: &BBox, colour: [u8; 3], thickness: u32) {
    let rgb = to_f32(colour);
    let (x0, y0) = (i64::from(b.x), i64::from(b.y));
    let (x1, y1) = (x0 + i64::from(b.w) - 1, y0 + i64::from(b.h) - 1);
    for t in 0..i64::from(thickness) {
        for x in x0..=x1 {
            put(img, x, y0 + t, rgb);
            put(img, x, y1 - t, rgb);
        }
        for y in y0..=y1 {
            put(img, x0 + t, y, rgb);
            put(img, x1 - t, y, rgb);
        }
    }
}

fn glyph(c: char) -> [u8; 5] {
    match c.to_ascii_uppercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 2, 2],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'A' => [2, 5, 7, 5, 5],
        'B' => [6, 5, 6, 5, 6],
        'C' => [3, 4, 4, 4, 3],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'F' => [7, 4, 6, 4, 4],
        'G' => [3, 4, 5, 5, 3],
        'H' => [5, 5, 7, 5, 5],
        'I' => [7, 2, 2, 2, 7],
        'J' => [1, 1, 1, 5, 2],
        'K' => [5, 5, 6, 5, 5],
        'L' => [4, 4, 4, 4, 7],
        'M' => [5, 7, 7, 5, 5],
        'N' => [6, 5, 5, 5, 5],
        'O' => [2, 5, 5, 5, 2],
        'P' => [6, 5, 6, 4, 4],
        'Q' => [2, 5, 5, 6, 3],
        'R' => [6, 5, 6, 5, 5],
        'S' => [3, 4, 2, 1, 6],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        'V' => [5, 5, 5, 5, 2],
        'W' => [5, 5, 7, 7, 5],
        'X' => [5, 5, 2, 5, 5],
        'Y' => [5, 5, 2, 2, 2],
        'Z' => [7, 1, 2, 4, 7],
        '-' => [0, 0, 7, 0, 0],
        '.' => [0, 0, 0, 0, 2],
        '_' => [0, 0, 0, 0, 7],
        ':' => [0, 2, 0, 2, 0],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}

/// Pixel size of `text` rendered at `scale`.
pub fn text_size(text: &str, scale: u32) -> (u32, u32) {
    let n = text.chars().count() as u32;
    (if n == 0 { 0 } else { (4 * n - 1) * scale }, 5 * scale)
}

/// Renders `text` with its top-left corner at `(x, y)`.
pub fn draw_text(img: &mut Raster, x: i64, y: i64, text: &str, colour: [u8; 3], scale: u32) {
    let rgb = to_f32(colour);
    let s = i64::from(scale);
    for (i, c) in text.chars().enumerate() {
        let ox = x + i as i64 * 4 * s;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..3 {
                if bits & (4 >> col) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, ox + col * s + dx, y + row as i64 * s + dy, rgb);
                        }
                    }
                }
            }
        }
    }
}

/// A labelled box as drawn on an overlay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawnBox {
    pub grain_id: u32,
    pub bbox: BBox,
    pub colour: [u8; 3],
    pub label: alloc::string::String,
}

/// Draws every box with its label above it (inside the box when there is no
/// room above).
pub fn render_overlay(base: &Raster, boxes: &[DrawnBox]) -> Raster {
    let mut img = base.to_rgb();
    for b in boxes {
        draw_box(&mut img, &b.bbox, b.colour, 2);
        let (_, th) = text_size(&b.label, 2);
        let ty = if i64::from(b.bbox.y) >= i64::from(th) + 2 {
            i64::from(b.bbox.y) - i64::from(th) - 2
        } else {
            i64::from(b.bbox.y) + 3
        };
        draw_text(&mut img, i64::from(b.bbox.x), ty, &b.label, b.colour, 2);
    }
    img
}

/// Pixels of `img` exactly equal to `colour`.
pub fn count_colour(img: &Raster, colour: [u8; 3]) -> usize {
    let target = to_f32(colour);
    (0..img.height())
        .flat_map(|y| (0..img.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| img.pixel(x, y)[..3] == target)
        .count()
}
