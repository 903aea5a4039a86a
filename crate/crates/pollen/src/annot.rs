//! Plain-text detection sidecars (`<image>.pollen.txt`, format v1).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pollen_core::detect::{circularity, BBox, Contour, DetectParams, GrainDetection, Point};

use crate::error::{Error, Result};

pub const VERSION_LINE: &str = "# pollen-annotations v1";
pub const CIRCULARITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationFile {
    pub image_name: String,
    pub width: u32,
    pub height: u32,
    pub generated_at: String,
    pub detector_tag: String,
    pub params: DetectParams,
    pub grains: Vec<GrainDetection>,
}

/// `slide.png` -> `slide.pollen.txt`.
pub fn annotation_path(image: &Path) -> PathBuf {
    image.with_extension("pollen.txt")
}

/// Canonical v1 text.
pub fn format_annotations(f: &AnnotationFile) -> String {
    let p = &f.params;
    let mut s = String::new();
    let _ = writeln!(s, "{VERSION_LINE}");
    let _ = writeln!(s, "# image: {}", f.image_name);
    let _ = writeln!(s, "# size: {} {}", f.width, f.height);
    let _ = writeln!(s, "# generated: {}", f.generated_at);
    let _ = writeln!(
        s,
        "# detector: {} k={:?} area={:?}..{:?} circ>={:?} t={:?}..{:?}",
        f.detector_tag, p.k, p.min_area, p.max_area, p.min_circularity, p.t_min, p.t_max
    );
    let _ = writeln!(s, "# count: {}", f.grains.len());
    for g in &f.grains {
        let b = g.bbox;
        let _ = writeln!(
            s,
            "grain {} bbox {} {} {} {} saliency {:?} area {:?} perimeter {:?} circularity {:?}",
            g.id, b.x, b.y, b.w, b.h, g.saliency, g.area, g.perimeter, g.circularity
        );
        let _ = write!(s, "contour {}", g.id);
        for pt in &g.contour.points {
            let _ = write!(s, " {},{}", pt.x, pt.y);
        }
        s.push('\n');
    }
    s
}

pub fn write_annotations(f: &AnnotationFile, path: &Path) -> Result<()> {
    fs::write(path, format_annotations(f)).map_err(|e| Error::io(path, e))
}

pub fn read_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path)
}

/// Whitespace-separated tokens with 1-based start columns.
fn tokens(line: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s + 1, &line[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s + 1, &line[s..]));
    }
    out
}

struct Parser<'a> {
    path: &'a Path,
    line: usize,
}

impl Parser<'_> {
    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::Parse { path: self.path.into(), line: self.line, column, message: message.into() }
    }

    fn num<T: std::str::FromStr>(&self, (col, tok): (usize, &str), what: &str) -> Result<T> {
        tok.parse().map_err(|_| self.err(col, format!("expected {what}, found {tok:?}")))
    }

    fn keyword(&self, (col, tok): (usize, &str), want: &str) -> Result<()> {
        if tok == want {
            Ok(())
        } else {
            Err(self.err(col, format!("expected {want:?}, found {tok:?}")))
        }
    }

    fn range(&self, (col, tok): (usize, &str), key: &str) -> Result<(f64, f64)> {
        let body = tok.strip_prefix(key).ok_or_else(|| self.err(col, format!("expected {key}...")))?;
        let (a, b) = body.split_once("..").ok_or_else(|| self.err(col, format!("expected a range in {tok:?}")))?;
        Ok((self.num((col + key.len(), a), "number")?, self.num((col + key.len() + a.len() + 2, b), "number")?))
    }

    fn prefixed(&self, (col, tok): (usize, &str), key: &str) -> Result<f64> {
        let body = tok.strip_prefix(key).ok_or_else(|| self.err(col, format!("expected {key}...")))?;
        self.num((col + key.len(), body), "number")
    }
}

#[derive(Default)]
struct Header {
    image: Option<String>,
    size: Option<(u32, u32)>,
    generated: Option<String>,
    detector: Option<(String, DetectParams)>,
    count: Option<(usize, usize)>,
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<AnnotationFile> {
    let mut p = Parser { path, line: 0 };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, VERSION_LINE)) => {}
        Some((_, l)) if l.starts_with("# pollen-annotations ") => {
            return Err(Error::Version {
                path: path.into(),
                found: l["# pollen-annotations ".len()..].trim().to_string(),
            })
        }
        _ => {
            p.line = 1;
            return Err(p.err(1, "missing \"# pollen-annotations v1\" header"));
        }
    }
    let mut h = Header::default();
    let mut grains: Vec<GrainDetection> = Vec::new();
    let mut pending: Option<(GrainDetection, usize)> = None;
    for (n, line) in lines {
        p.line = n;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("# ") {
            if !grains.is_empty() || pending.is_some() {
                return Err(p.err(1, "header after grain records"));
            }
            let (key, value) = rest.split_once(": ").ok_or_else(|| p.err(3, "expected \"key: value\""))?;
            let vcol = 3 + key.len() + 2;
            let t: Vec<(usize, &str)> = tokens(value).into_iter().map(|(c, s)| (c + vcol - 1, s)).collect();
            match key {
                "image" => h.image = Some(value.to_string()),
                "generated" => h.generated = Some(value.to_string()),
                "size" => {
                    if t.len() != 2 {
                        return Err(p.err(vcol, "expected \"size: W H\""));
                    }
                    h.size = Some((p.num(t[0], "width")?, p.num(t[1], "height")?));
                }
                "count" => {
                    if t.len() != 1 {
                        return Err(p.err(vcol, "expected \"count: N\""));
                    }
                    h.count = Some((p.num(t[0], "grain count")?, n));
                }
                "detector" => {
                    if t.len() != 5 {
                        return Err(p.err(vcol, "expected \"detector: TAG k=K area=LO..HI circ>=C t=LO..HI\""));
                    }
                    let k = p.prefixed(t[1], "k=")?;
                    let (min_area, max_area) = p.range(t[2], "area=")?;
                    let min_circularity = p.prefixed(t[3], "circ>=")?;
                    let (t_min, t_max) = p.range(t[4], "t=")?;
                    let params = DetectParams { k, t_min, t_max, min_area, max_area, min_circularity };
                    h.detector = Some((t[0].1.to_string(), params));
                }
                other => return Err(p.err(3, format!("unknown header {other:?}"))),
            }
            continue;
        }
        let t = tokens(line);
        match t[0].1 {
            "grain" => {
                if pending.is_some() {
                    return Err(p.err(1, "grain record without a contour line"));
                }
                if t.len() != 15 {
                    let col = t.last().map_or(1, |(c, s)| c + s.len());
                    return Err(p.err(col, format!("grain line needs 15 fields, found {}", t.len())));
                }
                let id: u32 = p.num(t[1], "grain id")?;
                p.keyword(t[2], "bbox")?;
                let bbox = BBox { x: p.num(t[3], "x")?, y: p.num(t[4], "y")?, w: p.num(t[5], "w")?, h: p.num(t[6], "h")? };
                p.keyword(t[7], "saliency")?;
                let saliency: f64 = p.num(t[8], "saliency")?;
                p.keyword(t[9], "area")?;
                let area: f64 = p.num(t[10], "area")?;
                p.keyword(t[11], "perimeter")?;
                let perimeter: f64 = p.num(t[12], "perimeter")?;
                p.keyword(t[13], "circularity")?;
                let circ: f64 = p.num(t[14], "circularity")?;
                if (circularity(area, perimeter) - circ).abs() > CIRCULARITY_TOL {
                    return Err(p.err(t[14].0, "circularity disagrees with area and perimeter"));
                }
                if grains.iter().any(|g| g.id == id) {
                    return Err(p.err(t[1].0, format!("duplicate grain id {id}")));
                }
                let g = GrainDetection {
                    id,
                    bbox,
                    contour: Contour::new(Vec::new()),
                    saliency,
                    area,
                    perimeter,
                    circularity: circ,
                };
                pending = Some((g, n));
            }
            "contour" => {
                let Some((mut g, _)) = pending.take() else {
                    return Err(p.err(1, "contour line without a grain line"));
                };
                if t.len() < 2 {
                    return Err(p.err(8, "contour line needs an id"));
                }
                let id: u32 = p.num(t[1], "grain id")?;
                if id != g.id {
                    return Err(p.err(t[1].0, format!("contour {id} follows grain {}", g.id)));
                }
                let (w, hgt) = h.size.ok_or_else(|| p.err(1, "missing size header"))?;
                let mut pts = Vec::with_capacity(t.len() - 2);
                for &(col, tok) in &t[2..] {
                    let (x, y) = tok.split_once(',').ok_or_else(|| p.err(col, format!("expected x,y, found {tok:?}")))?;
                    let pt = Point { x: p.num((col, x), "x")?, y: p.num((col + x.len() + 1, y), "y")? };
                    if pt.x < 0 || pt.y < 0 || pt.x as u32 >= w || pt.y as u32 >= hgt {
                        return Err(p.err(col, format!("point {tok} lies outside the {w}x{hgt} image")));
                    }
                    pts.push(pt);
                }
                g.contour = Contour::new(pts);
                grains.push(g);
            }
            other => return Err(p.err(t[0].0, format!("unexpected record {other:?}"))),
        }
    }
    p.line = text.lines().count();
    if let Some((_, n)) = pending {
        p.line = n;
        return Err(p.err(1, "grain record without a contour line"));
    }
    let missing = |what: &str| Error::format(path, format!("missing {what} header"));
    let (count, count_line) = h.count.ok_or_else(|| missing("count"))?;
    if count != grains.len() {
        p.line = count_line;
        return Err(p.err(10, format!("count says {count} but the file has {} grains", grains.len())));
    }
    let (detector_tag, params) = h.detector.ok_or_else(|| missing("detector"))?;
    let (width, height) = h.size.ok_or_else(|| missing("size"))?;
    Ok(AnnotationFile {
        image_name: h.image.ok_or_else(|| missing("image"))?,
        width,
        height,
        generated_at: h.generated.ok_or_else(|| missing("generated"))?,
        detector_tag,
        params,
        grains,
    })
}
