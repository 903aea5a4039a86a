//! Saliency map post-processing: adaptive threshold, morphological cleanup,
//! outer contour tracing and geometric filtering.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
// libm-backed float methods for no_std builds
#[allow(unused_imports)]
use num_traits::Float;
use crate::raster::{BinaryMask, SaliencyMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectParams {
    /// Multiplier on the map's standard deviation.
    pub k: f64,
    pub t_min: f64,
    pub t_max: f64,
    /// Area bounds in px^2 (inclusive).
    pub min_area: f64,
    pub max_area: f64,
    pub min_circularity: f64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            k: 0.30,
            t_min: 0.15,
            t_max: 0.50,
            min_area: 1000.0,
            max_area: 120_000.0,
            min_circularity: 0.3,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.k, self.t_min, self.t_max, self.min_area, self.max_area, self.min_circularity];
        if all.iter().any(|v| !v.is_finite()) {
            bail!(Parameter, "detection parameters must be finite");
        }
        if !(0.0 <= self.t_min && self.t_min <= self.t_max && self.t_max <= 1.0) {
            bail!(Parameter, "threshold bounds must satisfy 0 <= t_min <= t_max <= 1");
        }
        if !(0.0 <= self.min_area && self.min_area <= self.max_area) {
            bail!(Parameter, "area bounds must satisfy 0 <= min_area <= max_area");
        }
        if !(0.0..=1.0).contains(&self.min_circularity) {
            bail!(Parameter, "min_circularity must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl Point {
    pub const fn new(x: i32, y: i32) -> Self {
        Self { x, y }
    }
}

/// Closed polygon through boundary pixel centres.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contour {
    pub points: Vec<Point>,
}

/// Axis-aligned box in pixels; `w`/`h` count pixels, so a single pixel has `w = h = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: i32,
    pub y: i32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (f64::from(self.x) + f64::from(self.w) / 2.0, f64::from(self.y) + f64::from(self.h) / 2.0)
    }
}

impl Contour {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Tight bounding box, `None` for an empty contour.
    pub fn bbox(&self) -> Option<BBox> {
        let first = self.points.first()?;
        let (mut x0, mut y0, mut x1, mut y1) = (first.x, first.y, first.x, first.y);
        for p in &self.points[1..] {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Some(BBox { x: x0, y: y0, w: (x1 - x0 + 1) as u32, h: (y1 - y0 + 1) as u32 })
    }

    /// Shoelace sum over raw pixel coordinates (y pointing down). Negative
    /// for contours that run counter-clockwise on screen.
    pub fn signed_area(&self) -> f64 {
        let n = self.points.len();
        let mut s = 0i64;
        for i in 0..n {
            let a = self.points[i];
            let b = self.points[(i + 1) % n];
            s += i64::from(a.x) * i64::from(b.y) - i64::from(b.x) * i64::from(a.y);
        }
        s as f64 / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeMeasure {
    pub area: f64,
    pub perimeter: f64,
    pub circularity: f64,
}

/// `4 pi A / P^2`, zero when the area is zero.
pub fn circularity(area: f64, perimeter: f64) -> f64 {
    if area == 0.0 || perimeter == 0.0 {
        0.0
    } else {
        4.0 * PI * area / (perimeter * perimeter)
    }
}

pub fn measure(contour: &Contour) -> Result<ShapeMeasure> {
    let n = contour.points.len();
    if n < 3 {
        bail!(Geometry, "contour needs at least 3 points, got {n}");
    }
    let area = contour.signed_area().abs();
    let perimeter = (0..n)
        .map(|i| {
            let a = contour.points[i];
            let b = contour.points[(i + 1) % n];
            let (dx, dy) = (f64::from(b.x - a.x), f64::from(b.y - a.y));
            (dx * dx + dy * dy).sqrt()
        })
        .sum::<f64>();
    Ok(ShapeMeasure { area, perimeter, circularity: circularity(area, perimeter) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrainDetection {
    pub id: u32,
    pub bbox: BBox,
    pub contour: Contour,
    /// Mean saliency inside the filled contour.
    pub saliency: f64,
    pub area: f64,
    pub perimeter: f64,
    pub circularity: f64,
}

/// `clamp(mean + k * std, t_min, t_max)` with the population standard deviation.
pub fn adaptive_threshold(map: &SaliencyMap, params: &DetectParams) -> Result<f64> {
    if map.is_empty() {
        bail!(Input, "saliency map is empty");
    }
    let n = map.values().len() as f64;
    let mean = map.values().iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = map
        .values()
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    Ok((mean + params.k * var.sqrt()).clamp(params.t_min, params.t_max))
}

pub fn binarize(map: &SaliencyMap, threshold: f64) -> BinaryMask {
    let bits = map.values().iter().map(|&v| f64::from(v) >= threshold).collect();
    BinaryMask::new(map.width(), map.height(), bits).expect("same dimensions")
}

const CROSS: [(isize, isize); 5] = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];

/// Dilation with the 3x3 cross; pixels outside the grid count as background.
pub fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let hit = CROSS
                .iter()
                .any(|&(dx, dy)| mask.get_signed(x as isize + dx, y as isize + dy));
            out.set(x, y, hit);
        }
    }
    out
}

/// Erosion with the 3x3 cross; pixels outside the grid are ignored.
pub fn erode(mask: &BinaryMask) -> BinaryMask {
    let (w, h) = (mask.width(), mask.height());
    let mut out = BinaryMask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let keep = CROSS.iter().all(|&(dx, dy)| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                let inside = sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h;
                !inside || mask.get(sx as usize, sy as usize)
            });
            out.set(x, y, keep);
        }
    }
    out
}

/// Closing followed by opening.
pub fn morph_refine(mask: &BinaryMask) -> BinaryMask {
    let closed = erode(&dilate(mask));
    dilate(&erode(&closed))
}

const DIRS: [(i32, i32); 8] = [
    (-1, 0),  // W
    (-1, -1), // NW
    (0, -1),  // N
    (1, -1),  // NE
    (1, 0),   // E
    (1, 1),   // SE
    (0, 1),   // S
    (-1, 1),  // SW
];

fn dir_index(dx: i32, dy: i32) -> usize {
    DIRS.iter().position(|&d| d == (dx, dy)).expect("unit offset")
}

/// Labels 8-connected components. Returns per-pixel labels (0 = background)
/// and the raster-order seed pixel of each component.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<Point>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = vec![0u32; w * h];
    let mut seeds = Vec::new();
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) || labels[y * w + x] != 0 {
                continue;
            }
            let id = seeds.len() as u32 + 1;
            seeds.push(Point::new(x as i32, y as i32));
            labels[y * w + x] = id;
            queue.push_back((x, y));
            while let Some((cx, cy)) = queue.pop_front() {
                for &(dx, dy) in &DIRS {
                    let (nx, ny) = (cx as isize + dx as isize, cy as isize + dy as isize);
                    if mask.get_signed(nx, ny) {
                        let i = ny as usize * w + nx as usize;
                        if labels[i] == 0 {
                            labels[i] = id;
                            queue.push_back((nx as usize, ny as usize));
                        }
                    }
                }
            }
        }
    }
    (labels, seeds)
}

/// Moore-neighbour trace of the outer boundary starting at `start`, which
/// must be the first foreground pixel of its component in raster order.
/// Points come back counter-clockwise on screen, starting at `start`.
fn trace_outer(mask: &BinaryMask, start: Point) -> Contour {
    let fg = |p: Point| mask.get_signed(p.x as isize, p.y as isize);
    // Entering from the west: the west neighbour of a raster-first pixel is background.
    let next = |p: Point, back: usize| -> Option<(Point, usize)> {
        for i in 1..8 {
            let k = (back + i) % 8;
            let q = Point::new(p.x + DIRS[k].0, p.y + DIRS[k].1);
            if fg(q) {
                let prev = (k + 7) % 8;
                let b = (p.x + DIRS[prev].0 - q.x, p.y + DIRS[prev].1 - q.y);
                return Some((q, dir_index(b.0, b.1)));
            }
        }
        None
    };

    let Some((first, mut back)) = next(start, 0) else {
        return Contour::new(vec![start]);
    };
    let mut points = vec![start, first];
    let mut p = first;
    // Jacob's criterion: stop when the move start -> first would repeat.
    let limit = 4 * mask.width() * mask.height() + 8;
    loop {
        let (q, b) = next(p, back).expect("connected pixel has a neighbour");
        if p == start && q == first {
            break;
        }
        points.push(q);
        p = q;
        back = b;
        if points.len() > limit {
            break;
        }
    }
    if points.len() > 1 && points.last() == Some(&start) {
        points.pop();
    }
    points[1..].reverse();
    Contour::new(points)
}

/// One outer contour per 8-connected foreground component, in raster order
/// of the components' first pixels. Holes are ignored.
pub fn extract_contours(mask: &BinaryMask) -> Vec<Contour> {
    let (_, seeds) = label_components(mask);
    seeds.into_iter().map(|s| trace_outer(mask, s)).collect()
}

/// Filled interior of a contour (boundary included), as a mask anchored at
/// the contour's bounding box origin.
#[derive(Debug, Clone, PartialEq)]
pub struct FilledRegion {
    pub x0: i32,
    pub y0: i32,
    pub mask: BinaryMask,
}

impl FilledRegion {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        self.mask.get_signed((x - self.x0) as isize, (y - self.y0) as isize)
    }

    pub fn count(&self) -> usize {
        self.mask.count_ones()
    }
}

pub fn fill_contour(contour: &Contour) -> Result<FilledRegion> {
    let Some(bb) = contour.bbox() else {
        bail!(Geometry, "cannot fill an empty contour");
    };
    // One pixel of padding on each side so the outside is connected.
    let (pw, ph) = (bb.w as usize + 2, bb.h as usize + 2);
    let mut wall = vec![false; pw * ph];
    for p in &contour.points {
        wall[(p.y - bb.y + 1) as usize * pw + (p.x - bb.x + 1) as usize] = true;
    }
    let mut outside = vec![false; pw * ph];
    let mut queue = VecDeque::from([(0usize, 0usize)]);
    outside[0] = true;
    while let Some((x, y)) = queue.pop_front() {
        let nbrs = [(x.wrapping_sub(1), y), (x + 1, y), (x, y.wrapping_sub(1)), (x, y + 1)];
        for (nx, ny) in nbrs {
            if nx < pw && ny < ph {
                let i = ny * pw + nx;
                if !outside[i] && !wall[i] {
                    outside[i] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
    }
    let (w, h) = (bb.w as usize, bb.h as usize);
    let mut bits = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            bits.push(!outside[(y + 1) * pw + x + 1]);
        }
    }
    Ok(FilledRegion { x0: bb.x, y0: bb.y, mask: BinaryMask::new(w, h, bits)? })
}

fn mean_saliency(map: &SaliencyMap, region: &FilledRegion) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    let m = &region.mask;
    for y in 0..m.height() {
        for x in 0..m.width() {
            if m.get(x, y) {
                let (gx, gy) = (region.x0 + x as i32, region.y0 + y as i32);
                if gx >= 0 && gy >= 0 && (gx as usize) < map.width() && (gy as usize) < map.height() {
                    sum += f64::from(map.get(gx as usize, gy as usize));
                    n += 1;
                }
            }
        }
    }
    if n == 0 { 0.0 } else { sum / n as f64 }
}

/// True when a measured shape passes the area and circularity filters.
pub fn passes_filters(shape: &ShapeMeasure, params: &DetectParams) -> bool {
    params.min_area <= shape.area
        && shape.area <= params.max_area
        && shape.circularity >= params.min_circularity
}

/// Threshold, binarize, refine, trace and filter. Ids follow the `(y, x)`
/// order of the bounding box origins.
pub fn detect_grains(map: &SaliencyMap, params: &DetectParams) -> Result<Vec<GrainDetection>> {
    params.validate()?;
    if map.is_empty() {
        return Ok(Vec::new());
    }
    let t = adaptive_threshold(map, params)?;
    let refined = morph_refine(&binarize(map, t));
    let mut grains = Vec::new();
    for contour in extract_contours(&refined) {
        if contour.len() < 3 {
            continue;
        }
        let shape = measure(&contour)?;
        if !passes_filters(&shape, params) {
            continue;
        }
        let region = fill_contour(&contour)?;
        grains.push(GrainDetection {
            id: 0,
            bbox: contour.bbox().expect("non-empty"),
            saliency: mean_saliency(map, &region),
            area: shape.area,
            perimeter: shape.perimeter,
            circularity: shape.circularity,
            contour,
        });
    }
    grains.sort_by_key(|g| (g.bbox.y, g.bbox.x));
    for (i, g) in grains.iter_mut().enumerate() {
        g.id = i as u32;
    }
    Ok(grains)
}
