//! Baseline and slant correction, then height normalization.
//!
//! Baseline: rotate over an angle grid, smooth with horizontal RLSA and keep
//! the rotation whose row projection is most concentrated. Slant: shear over
//! a grid and keep the most concentrated column projection. Binary
//! transforms use nearest-neighbour sampling; only the final height
//! normalization interpolates.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ink::LineImage;

/// Target height after normalization.
pub const TARGET_HEIGHT: usize = 60;
/// RLSA run threshold at [`TARGET_HEIGHT`]; scaled with the input height.
pub const RLSA_THRESHOLD_AT_TARGET: f64 = 20.0;

#[derive(Clone, Debug)]
pub struct CorrectionResult {
    pub image: LineImage,
    pub baseline_angle: f64,
    pub slant_angle: f64,
}

/// One evaluated grid point, kept for the debugging report.
#[derive(Clone, Debug, Serialize)]
pub struct Candidate {
    pub angle: f64,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AngleSearch {
    pub best_angle: f64,
    pub candidates: Vec<Candidate>,
}

pub fn binarize(image: &LineImage, threshold: f64) -> Result<LineImage> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Domain(format!("threshold {threshold} outside (0, 1)")));
    }
    let px = image.pixels().iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    LineImage::from_pixels(image.width(), image.height(), px)
}

fn require_binary(image: &LineImage) -> Result<()> {
    if image.is_binary() {
        Ok(())
    } else {
        Err(Error::contract("operation requires a binary image"))
    }
}

/// Fills background runs shorter than `run_threshold` that have ink on both
/// sides within the same row.
pub fn rlsa_horizontal(image: &LineImage, run_threshold: usize) -> Result<LineImage> {
    require_binary(image)?;
    let mut out = image.clone();
    for y in 0..image.height() {
        let row = image.row(y);
        let mut last_ink: Option<usize> = None;
        for (x, &v) in row.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            if let Some(prev) = last_ink {
                let gap = x - prev - 1;
                if gap > 0 && gap < run_threshold {
                    for fill in prev + 1..x {
                        out.set(fill, y, 1.0);
                    }
                }
            }
            last_ink = Some(x);
        }
    }
    Ok(out)
}

fn check_angle(angle: f64) -> Result<()> {
    if !(angle.abs() <= 45.0) {
        return Err(Error::Domain(format!("angle {angle} outside [-45, 45] degrees")));
    }
    Ok(())
}

/// Nearest-neighbour rotation about the image centre; positive angles turn
/// the content counter-clockwise on screen. The canvas grows to hold the
/// rotated content.
pub fn rotate(image: &LineImage, angle: f64) -> Result<LineImage> {
    check_angle(angle)?;
    Ok(rotate_unchecked(image, angle))
}

pub(crate) fn rotate_unchecked(image: &LineImage, angle: f64) -> LineImage {
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (sin, cos) = angle.to_radians().sin_cos();
    // Snap near-integers so right angles produce exact dimensions.
    let snap = |v: f64| if (v - v.round()).abs() < 1e-9 { v.round() } else { v.ceil() };
    // Keep the size parity so pixel centres stay on the source grid at small angles.
    let grow = |n: f64, src: f64| {
        let n = n.max(1.0) as usize;
        n + (n + src as usize) % 2
    };
    let nw = grow(snap(w * cos.abs() + h * sin.abs()), w);
    let nh = grow(snap(w * sin.abs() + h * cos.abs()), h);
    let mut out = LineImage::new(nw, nh).expect("non-empty");
    let (cx, cy) = (w / 2.0, h / 2.0);
    let (ncx, ncy) = (nw as f64 / 2.0, nh as f64 / 2.0);
    for y in 0..nh {
        let v = y as f64 + 0.5 - ncy;
        for x in 0..nw {
            let u = x as f64 + 0.5 - ncx;
            let sx = cos * u - sin * v + cx;
            let sy = sin * u + cos * v + cy;
            if sx >= 0.0 && sy >= 0.0 && sx < w && sy < h {
                let val = image.get(sx as usize, sy as usize);
                if val != 0.0 {
                    out.set(x, y, val);
                }
            }
        }
    }
    out
}

/// Shifts row `r` by `(height − 1 − r)·tan(angle)` pixels: the bottom row
/// stays put and positive angles move the top to the right.
pub fn shear_horizontal(image: &LineImage, angle: f64) -> Result<LineImage> {
    check_angle(angle)?;
    let (w, h) = (image.width(), image.height());
    let tan = angle.to_radians().tan();
    let shifts: Vec<i64> = (0..h).map(|r| ((h - 1 - r) as f64 * tan).round() as i64).collect();
    let min = shifts.iter().copied().min().unwrap_or(0).min(0);
    let max = shifts.iter().copied().max().unwrap_or(0).max(0);
    let mut out = LineImage::new(w + (max - min) as usize, h)?;
    for (r, &s) in shifts.iter().enumerate() {
        let off = (s - min) as usize;
        for (x, &v) in image.row(r).iter().enumerate() {
            if v != 0.0 {
                out.set(x + off, r, v);
            }
        }
    }
    Ok(out)
}

fn concentration(counts: impl Iterator<Item = usize>) -> f64 {
    let (mut sum, mut sq) = (0.0, 0.0);
    for c in counts {
        let c = c as f64;
        sum += c;
        sq += c * c;
    }
    if sum == 0.0 {
        0.0
    } else {
        sq / (sum * sum)
    }
}

/// `Σ_rows count² / (Σ count)²`; 1 when all ink sits in one row, 0 when blank.
pub fn score_projection(image: &LineImage) -> Result<f64> {
    require_binary(image)?;
    Ok(concentration((0..image.height()).map(|y| image.row(y).iter().filter(|&&v| v > 0.0).count())))
}

/// Column analogue of [`score_projection`].
pub fn score_column_projection(image: &LineImage) -> Result<f64> {
    require_binary(image)?;
    let mut cols = vec![0usize; image.width()];
    for y in 0..image.height() {
        for (x, &v) in image.row(y).iter().enumerate() {
            if v > 0.0 {
                cols[x] += 1;
            }
        }
    }
    Ok(concentration(cols.into_iter()))
}

/// Angles `-range, -range + step, ..., range` (always including 0 when the
/// grid is symmetric).
fn angle_grid(range: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(range >= 0.0) || range > 45.0 {
        return Err(Error::Domain(format!("invalid angle grid: range {range}, step {step}")));
    }
    let n = (range / step + 1e-9).floor() as i64;
    Ok((-n..=n).map(|i| i as f64 * step).collect())
}

/// Picks the best score; ties go to the angle nearest 0, then the smaller angle.
fn argmax(candidates: &[Candidate]) -> f64 {
    let mut best = &candidates[0];
    for c in &candidates[1..] {
        let better = c.score > best.score
            || (c.score == best.score
                && (c.angle.abs() < best.angle.abs()
                    || (c.angle.abs() == best.angle.abs() && c.angle < best.angle)));
        if better {
            best = c;
        }
    }
    best.angle
}

pub fn rlsa_threshold_for(height: usize) -> usize {
    (RLSA_THRESHOLD_AT_TARGET * height as f64 / TARGET_HEIGHT as f64).round().max(1.0) as usize
}

/// Searches rotations; the returned angle is the correcting rotation.
pub fn search_baseline(image: &LineImage, angle_range: f64, step: f64) -> Result<AngleSearch> {
    let grid = angle_grid(angle_range, step)?;
    let image = if image.is_binary() { image.clone() } else { binarize(image, 0.5)? };
    if image.ink_count() == 0 {
        return Ok(AngleSearch { best_angle: 0.0, candidates: vec![] });
    }
    let run = rlsa_threshold_for(image.height());
    let mut candidates = Vec::with_capacity(grid.len());
    for angle in grid {
        let smoothed = rlsa_horizontal(&rotate(&image, angle)?, run)?;
        candidates.push(Candidate { angle, score: score_projection(&smoothed)? });
    }
    Ok(AngleSearch { best_angle: argmax(&candidates), candidates })
}

/// Searches shears scored by column concentration of the unsmoothed image.
pub fn search_slant(image: &LineImage, angle_range: f64, step: f64) -> Result<AngleSearch> {
    let grid = angle_grid(angle_range, step)?;
    let image = if image.is_binary() { image.clone() } else { binarize(image, 0.5)? };
    if image.ink_count() == 0 {
        return Ok(AngleSearch { best_angle: 0.0, candidates: vec![] });
    }
    let mut candidates = Vec::with_capacity(grid.len());
    for angle in grid {
        let sheared = shear_horizontal(&image, angle)?;
        candidates.push(Candidate { angle, score: score_column_projection(&sheared)? });
    }
    Ok(AngleSearch { best_angle: argmax(&candidates), candidates })
}

pub fn correct_baseline(image: &LineImage, angle_range: f64, step: f64) -> Result<CorrectionResult> {
    let search = search_baseline(image, angle_range, step)?;
    let corrected = if search.best_angle == 0.0 { image.clone() } else { rotate(image, search.best_angle)? };
    Ok(CorrectionResult { image: corrected, baseline_angle: search.best_angle, slant_angle: 0.0 })
}

pub fn correct_slant(image: &LineImage, angle_range: f64, step: f64) -> Result<CorrectionResult> {
    let search = search_slant(image, angle_range, step)?;
    let corrected =
        if search.best_angle == 0.0 { image.clone() } else { shear_horizontal(image, search.best_angle)? };
    Ok(CorrectionResult { image: corrected, baseline_angle: 0.0, slant_angle: search.best_angle })
}

/// Crops to the ink bounding box plus `margin` background pixels per side.
/// Blank images are returned unchanged.
pub fn crop_to_ink(image: &LineImage, margin: usize) -> LineImage {
    let h = image.height();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for (x, &v) in image.row(y).iter().enumerate() {
            if v > 0.0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return image.clone();
    }
    let nw = x1 - x0 + 1 + 2 * margin;
    let nh = y1 - y0 + 1 + 2 * margin;
    let mut out = LineImage::new(nw, nh).expect("non-empty");
    for y in y0..=y1 {
        for x in x0..=x1 {
            out.set(x - x0 + margin, y - y0 + margin, image.get(x, y));
        }
    }
    out
}

/// Bilinear rescale to `target` rows, preserving aspect ratio.
pub fn normalize_height(image: &LineImage, target: usize) -> Result<LineImage> {
    if target == 0 {
        return Err(Error::Domain("target height must be positive".into()));
    }
    let (w, h) = (image.width(), image.height());
    if h == target {
        return Ok(image.clone());
    }
    let scale = target as f64 / h as f64;
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let (sx, sy) = (w as f64 / nw as f64, h as f64 / target as f64);
    let mut out = LineImage::new(nw, target)?;
    let sample = |x: f64, y: f64| {
        let x = x.clamp(0.0, (w - 1) as f64);
        let y = y.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = image.get(x0, y0) * (1.0 - fx) + image.get(x1, y0) * fx;
        let bot = image.get(x0, y1) * (1.0 - fx) + image.get(x1, y1) * fx;
        (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0)
    };
    for y in 0..target {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..nw {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            out.set(x, y, sample(src_x, src_y));
        }
    }
    Ok(out)
}

/// Grid and normalization settings for [`preprocess_line`].
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub baseline_range: f64,
    pub baseline_step: f64,
    pub slant_range: f64,
    pub slant_step: f64,
    pub target_height: usize,
    /// Background border kept around the ink before height normalization.
    pub crop_margin: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            baseline_range: 10.0,
            baseline_step: 0.5,
            slant_range: 25.0,
            slant_step: 1.0,
            target_height: TARGET_HEIGHT,
            crop_margin: 2,
        }
    }
}

/// Debug record of one preprocessed line.
#[derive(Clone, Debug, Serialize)]
pub struct PreprocessReport {
    pub baseline: AngleSearch,
    pub slant: AngleSearch,
    pub width: usize,
    pub height: usize,
}

/// binarize → baseline → slant → crop → normalize height.
pub fn preprocess_line(image: &LineImage, cfg: &PreprocessConfig) -> Result<(CorrectionResult, PreprocessReport)> {
    let binary = binarize(image, 0.5)?;
    let baseline = search_baseline(&binary, cfg.baseline_range, cfg.baseline_step)?;
    let rotated = if baseline.best_angle == 0.0 { binary } else { rotate(&binary, baseline.best_angle)? };
    let slant = search_slant(&rotated, cfg.slant_range, cfg.slant_step)?;
    let sheared = if slant.best_angle == 0.0 { rotated } else { shear_horizontal(&rotated, slant.best_angle)? };
    let cropped = crop_to_ink(&sheared, cfg.crop_margin);
    let normalized = normalize_height(&cropped, cfg.target_height)?;
    let result = CorrectionResult {
        image: normalized,
        baseline_angle: baseline.best_angle,
        slant_angle: slant.best_angle,
    };
    let report = PreprocessReport {
        width: result.image.width(),
        height: result.image.height(),
        baseline,
        slant,
    };
    Ok((result, report))
}
