//! Online ink to offline line images.
//!
//! Strokes are split into cubic Bézier segments sharing endpoints:
//! points `(p0..p3)`, `(p3..p6)`, ... so consecutive curves join without gaps.
//! Leftover tails of one or two points are drawn as straight segments and a
//! single-point stroke becomes a disc. Ink is binary (1.0) with no
//! anti-aliasing.

mod pgm;
mod record;
mod synth;

pub use pgm::{read_pgm, write_pgm, PgmEncoding};
pub use record::{read_ink_file, write_ink_file, InkRecord, INK_SCHEMA_VERSION};
pub use synth::{default_glyph_bank, synth_corpus, synth_line, Glyph, GlyphBank, JitterConfig, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default stroke thickness in pixels.
pub const DEFAULT_THICKNESS: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// One pen-down trajectory in temporal order.
#[derive(Clone, Debug, PartialEq)]
pub struct InkStroke {
    points: Vec<Point>,
}

impl InkStroke {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("stroke has no points".into()));
        }
        if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::Domain("stroke coordinates must be finite".into()));
        }
        Ok(InkStroke { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InkLine {
    pub strokes: Vec<InkStroke>,
    pub transcript: String,
}

/// Row-major intensity raster; 0 is background, 1 is ink.
#[derive(Clone, Debug, PartialEq)]
pub struct LineImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl LineImage {
    /// Blank (all-background) image.
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Domain(format!("image must be at least 1x1, got {width}x{height}")));
        }
        Ok(LineImage { width, height, pixels: vec![0.0; width * height] })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(Error::contract(format!(
                "pixel buffer of length {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("intensities must lie in [0, 1]".into()));
        }
        Ok(LineImage { width, height, pixels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn ink_count(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn is_binary(&self) -> bool {
        self.pixels.iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// Evaluates `B(t) = (1−t)³p0 + 3(1−t)²t·p1 + 3(1−t)t²·p2 + t³p3`.
pub fn eval_cubic_bezier(ctrl: &[Point; 4], t: f64) -> Result<Point> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("bezier parameter {t} outside [0, 1]")));
    }
    Ok(bezier_unchecked(ctrl, t))
}

fn bezier_unchecked(ctrl: &[Point; 4], t: f64) -> Point {
    // Exact endpoints, independent of rounding in the Bernstein sum.
    if t == 0.0 {
        return ctrl[0];
    }
    if t == 1.0 {
        return ctrl[3];
    }
    let u = 1.0 - t;
    let b0 = u * u * u;
    let b1 = 3.0 * u * u * t;
    let b2 = 3.0 * u * t * t;
    let b3 = t * t * t;
    Point::new(
        b0 * ctrl[0].x + b1 * ctrl[1].x + b2 * ctrl[2].x + b3 * ctrl[3].x,
        b0 * ctrl[0].y + b1 * ctrl[1].y + b2 * ctrl[2].y + b3 * ctrl[3].y,
    )
}

/// Summary of one rendering call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RenderReport {
    /// Disc pixels that fell outside the canvas.
    pub clipped: usize,
}

impl RenderReport {
    fn merge(&mut self, other: RenderReport) {
        self.clipped += other.clipped;
    }
}

fn stamp_disc(canvas: &mut LineImage, center: Point, radius: f64, report: &mut RenderReport) {
    let r2 = radius * radius;
    let x0 = (center.x - radius - 1.0).floor() as i64;
    let x1 = (center.x + radius + 1.0).ceil() as i64;
    let y0 = (center.y - radius - 1.0).floor() as i64;
    let y1 = (center.y + radius + 1.0).ceil() as i64;
    let home = (center.x.floor() as i64, center.y.floor() as i64);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - center.x;
            let dy = py as f64 + 0.5 - center.y;
            if dx * dx + dy * dy > r2 && (px, py) != home {
                continue;
            }
            if px < 0 || py < 0 || px as usize >= canvas.width || py as usize >= canvas.height {
                report.clipped += 1;
                continue;
            }
            canvas.set(px as usize, py as usize, 1.0);
        }
    }
}

/// Samples `f` on `[0, 1]` densely enough that consecutive samples are less
/// than half a pixel apart, given an upper bound on `|f'(t)|`.
fn sample_curve(speed_bound: f64, mut f: impl FnMut(f64)) {
    let n = ((speed_bound / 0.45).ceil() as usize).max(1);
    for i in 0..=n {
        f(i as f64 / n as f64);
    }
}

/// Deposits a stroke onto `canvas`. Pixels never lose intensity.
pub fn render_stroke(stroke: &InkStroke, thickness: f64, canvas: &mut LineImage) -> Result<RenderReport> {
    if !(thickness >= 1.0) {
        return Err(Error::Domain(format!("thickness must be >= 1, got {thickness}")));
    }
    let radius = thickness / 2.0;
    let pts = stroke.points();
    let mut report = RenderReport::default();
    if pts.len() == 1 {
        stamp_disc(canvas, pts[0], radius, &mut report);
        return Ok(report);
    }
    let mut start = 0;
    while start + 3 < pts.len() {
        let ctrl = [pts[start], pts[start + 1], pts[start + 2], pts[start + 3]];
        let bound = 3.0
            * ctrl[0].dist(ctrl[1]).max(ctrl[1].dist(ctrl[2])).max(ctrl[2].dist(ctrl[3]));
        sample_curve(bound, |t| stamp_disc(canvas, bezier_unchecked(&ctrl, t), radius, &mut report));
        start += 3;
    }
    // Tail of one or two points after the last full cubic: straight segments.
    for w in pts[start..].windows(2) {
        let (a, b) = (w[0], w[1]);
        sample_curve(a.dist(b), |t| {
            let p = Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t);
            stamp_disc(canvas, p, radius, &mut report)
        });
    }
    Ok(report)
}

/// Renders every stroke of a line onto a canvas sized to the ink bounding
/// box plus a margin of `2 × thickness` on all sides.
pub fn render_line(line: &InkLine, thickness: f64) -> Result<(LineImage, RenderReport)> {
    if line.strokes.is_empty() {
        return Err(Error::EmptyInput("ink line has no strokes".into()));
    }
    if !(thickness >= 1.0) {
        return Err(Error::Domain(format!("thickness must be >= 1, got {thickness}")));
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in line.strokes.iter().flat_map(|s| s.points()) {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let margin = 2.0 * thickness;
    let width = ((max_x - min_x + 2.0 * margin).ceil() as usize).max(1);
    let height = ((max_y - min_y + 2.0 * margin).ceil() as usize).max(1);
    let mut canvas = LineImage::new(width, height)?;
    let dx = margin - min_x;
    let dy = margin - min_y;
    let mut report = RenderReport::default();
    for stroke in &line.strokes {
        let moved = InkStroke {
            points: stroke.points().iter().map(|p| Point::new(p.x + dx, p.y + dy)).collect(),
        };
        report.merge(render_stroke(&moved, thickness, &mut canvas)?);
    }
    Ok((canvas, report))
}
