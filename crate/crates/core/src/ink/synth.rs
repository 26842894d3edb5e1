//! Synthetic online ink: per-character stroke templates laid out along a
//! baseline with a small random affine perturbation per glyph.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{InkLine, InkStroke, Point};
use crate::error::{Error, Result};
use crate::net::DEFAULT_SYMBOLS;

/// Stroke template in em units: `x ∈ [0, width]`, `y ∈ [0, 1]` (y grows downward).
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub strokes: Vec<Vec<Point>>,
    pub width: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GlyphBank {
    glyphs: BTreeMap<char, Glyph>,
}

impl GlyphBank {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, c: char, glyph: Glyph) {
        self.glyphs.insert(c, glyph);
    }

    pub fn get(&self, c: char) -> Option<&Glyph> {
        self.glyphs.get(&c)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.keys().copied()
    }
}

const GLYPH_WIDTH: f64 = 0.5;
const POINT_SPACING: f64 = 0.04;

fn polyline(a: Point, b: Point) -> Vec<Point> {
    let n = ((a.dist(b) / POINT_SPACING).ceil() as usize).max(1);
    (0..=n)
        .map(|i| {
            let t = i as f64 / n as f64;
            Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
        })
        .collect()
}

fn curve(ctrl: [Point; 4]) -> Vec<Point> {
    let n = 24;
    (0..=n).map(|i| super::bezier_unchecked(&ctrl, i as f64 / n as f64)).collect()
}

fn ring(cx: f64, cy: f64, r: f64) -> Vec<Point> {
    let n = 20;
    (0..=n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            Point::new(cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn candidate_strokes() -> Vec<Vec<Point>> {
    let w = GLYPH_WIDTH;
    let p = Point::new;
    vec![
        polyline(p(0.0, 0.0), p(w, 0.0)),
        polyline(p(0.0, 0.5), p(w, 0.5)),
        polyline(p(0.0, 1.0), p(w, 1.0)),
        polyline(p(0.0, 0.0), p(w, 1.0)),
        polyline(p(0.0, 1.0), p(w, 0.0)),
        curve([p(0.0, 0.05), p(1.15 * w, 0.05), p(1.15 * w, 0.5), p(0.0, 0.5)]),
        curve([p(w, 0.5), p(-0.15 * w, 0.5), p(-0.15 * w, 0.95), p(w, 0.95)]),
        ring(0.5 * w, 0.72, 0.16),
    ]
}

/// Procedural stroke font covering every non-space class of the default
/// alphabet. Each glyph is a full-height vertical stem (left, centre or
/// right) plus a distinct pair of the eight auxiliary strokes, so no two
/// glyphs share the same stroke set and every glyph spans the full line height.
pub fn default_glyph_bank() -> GlyphBank {
    let extras = candidate_strokes();
    let pairs: Vec<(usize, usize)> =
        (0..extras.len()).flat_map(|a| ((a + 1)..extras.len()).map(move |b| (a, b))).collect();
    let stems = [0.0, 0.5 * GLYPH_WIDTH, GLYPH_WIDTH];
    let mut bank = GlyphBank::new();
    for (i, c) in DEFAULT_SYMBOLS.chars().filter(|&c| c != ' ').enumerate() {
        let stem_x = stems[i % stems.len()];
        let (a, b) = pairs[i / stems.len()];
        let strokes = vec![
            polyline(Point::new(stem_x, 0.0), Point::new(stem_x, 1.0)),
            extras[a].clone(),
            extras[b].clone(),
        ];
        bank.insert(c, Glyph { strokes, width: GLYPH_WIDTH });
    }
    bank
}

/// Random perturbations; all magnitudes are half-widths of uniform ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JitterConfig {
    /// Relative glyph scale change.
    pub scale: f64,
    pub rotate_deg: f64,
    pub shear_deg: f64,
    /// Vertical glyph offset, pixels.
    pub offset_px: f64,
    /// Independent noise added to every ink point, pixels.
    pub point_noise_px: f64,
    /// Whole-line rotation applied after layout.
    pub line_rotate_deg: f64,
    /// Whole-line slant applied after layout.
    pub line_shear_deg: f64,
}

impl JitterConfig {
    pub fn none() -> Self {
        JitterConfig {
            scale: 0.0,
            rotate_deg: 0.0,
            shear_deg: 0.0,
            offset_px: 0.0,
            point_noise_px: 0.0,
            line_rotate_deg: 0.0,
            line_shear_deg: 0.0,
        }
    }
}

impl Default for JitterConfig {
    fn default() -> Self {
        JitterConfig {
            scale: 0.08,
            rotate_deg: 3.0,
            shear_deg: 6.0,
            offset_px: 1.5,
            point_noise_px: 0.3,
            line_rotate_deg: 0.0,
            line_shear_deg: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Glyph box height in pixels.
    pub glyph_height: f64,
    /// Gap between glyphs, em units.
    pub letter_gap: f64,
    /// Advance of a space, em units.
    pub word_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { glyph_height: 40.0, letter_gap: 0.12, word_gap: 0.45 }
    }
}

fn sym(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// Lays out one line of text. Fails on characters without a template and on
/// text that produces no ink.
pub fn synth_line(
    text: &str,
    bank: &GlyphBank,
    cfg: &SynthConfig,
    jitter: &JitterConfig,
    rng: &mut impl Rng,
) -> Result<InkLine> {
    let h = cfg.glyph_height;
    let mut cursor = 0.0;
    let mut strokes: Vec<Vec<Point>> = Vec::new();
    for c in text.chars() {
        if c == ' ' {
            cursor += cfg.word_gap * h;
            continue;
        }
        let glyph = bank.get(c).ok_or(Error::MissingGlyph(c))?;
        let s = 1.0 + sym(rng, jitter.scale);
        let rot = sym(rng, jitter.rotate_deg).to_radians();
        let shear = sym(rng, jitter.shear_deg).to_radians().tan();
        let dy = sym(rng, jitter.offset_px);
        let (sin, cos) = rot.sin_cos();
        let cx = 0.5 * glyph.width;
        for stroke in &glyph.strokes {
            let pts = stroke
                .iter()
                .map(|p| {
                    let (u, v) = (p.x - cx, p.y - 0.5);
                    let u = u - shear * v;
                    let (u, v) = (cos * u - sin * v, sin * u + cos * v);
                    Point::new(
                        cursor + (cx + s * u) * h + sym(rng, jitter.point_noise_px),
                        (0.5 + s * v) * h + dy + sym(rng, jitter.point_noise_px),
                    )
                })
                .collect();
            strokes.push(pts);
        }
        cursor += (glyph.width + cfg.letter_gap) * h * s;
    }
    if strokes.is_empty() {
        return Err(Error::EmptyInput(format!("text {text:?} produces no ink")));
    }
    if jitter.line_rotate_deg != 0.0 || jitter.line_shear_deg != 0.0 {
        let rot = sym(rng, jitter.line_rotate_deg).to_radians();
        let shear = sym(rng, jitter.line_shear_deg).to_radians().tan();
        let (sin, cos) = rot.sin_cos();
        let (mx, my) = (0.5 * cursor, 0.5 * h);
        for p in strokes.iter_mut().flatten() {
            let (u, v) = (p.x - mx, p.y - my);
            // Positive slant leans the tops of strokes to the right.
            let u = u - shear * v;
            // Positive rotation is counter-clockwise on screen (y down).
            let (u, v) = (cos * u + sin * v, -sin * u + cos * v);
            *p = Point::new(mx + u, my + v);
        }
    }
    let strokes = strokes.into_iter().map(InkStroke::new).collect::<Result<Vec<_>>>()?;
    Ok(InkLine { strokes, transcript: text.to_string() })
}

/// Deterministic corpus synthesis. Line `i` draws from its own ChaCha stream
/// `(seed, i)`, so output does not depend on generation order.
pub fn synth_corpus(
    texts: &[String],
    bank: &GlyphBank,
    seed: u64,
    jitter: &JitterConfig,
    cfg: &SynthConfig,
) -> Result<Vec<InkLine>> {
    texts
        .iter()
        .enumerate()
        .map(|(i, text)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            synth_line(text, bank, cfg, jitter, &mut rng)
        })
        .collect()
}
