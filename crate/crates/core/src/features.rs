//! Sliding-window frames, Hann taper, PCA and standardization.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ink::LineImage;
use crate::net::linalg::{gemm_nt, gemm_tn};

pub const FRAME_HEIGHT: usize = 60;
pub const WINDOW: usize = 30;
pub const SHIFT: usize = 3;
pub const PCA_DIM: usize = 50;
pub const STDDEV_FLOOR: f64 = 1e-6;

const CONTAINER_MAGIC: &[u8; 4] = b"CSPC";
const CONTAINER_VERSION: u32 = 1;

/// Time-ordered frames stored row-major (`len × dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::contract(format!("{} values are not whole frames of dim {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureSequence { dim, data })
    }

    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        let dim = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dim) {
            return Err(Error::contract("frames have differing dimensions"));
        }
        Self::new(frames.concat(), dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Reversed time order.
    pub fn reversed(&self) -> Self {
        let data = self.data.chunks_exact(self.dim).rev().flatten().copied().collect();
        FeatureSequence { dim: self.dim, data }
    }

    /// One frame per line, values separated by spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for frame in self.data.chunks_exact(self.dim) {
            for (j, v) in frame.iter().enumerate() {
                if j > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// `ceil(max(width − window, 0) / shift) + 1`.
pub fn frame_count(width: usize, window: usize, shift: usize) -> usize {
    width.saturating_sub(window).div_ceil(shift) + 1
}

fn check_window(window: usize, shift: usize) -> Result<()> {
    if window == 0 || shift == 0 {
        return Err(Error::contract("window and shift must be at least 1"));
    }
    Ok(())
}

fn extract_frame(image: &LineImage, t: usize, window: usize, shift: usize, out: &mut [f64]) {
    let h = image.height();
    let start = t * shift;
    for c in 0..window {
        let x = start + c;
        let col = &mut out[c * h..(c + 1) * h];
        if x >= image.width() {
            col.fill(0.0);
            continue;
        }
        for (r, v) in col.iter_mut().enumerate() {
            *v = image.get(x, r);
        }
    }
}

/// Column-major `window × 60` frames with background padding on the right.
pub fn slide_frames(image: &LineImage, window: usize, shift: usize) -> Result<FeatureSequence> {
    check_window(window, shift)?;
    if image.height() != FRAME_HEIGHT {
        return Err(Error::contract(format!(
            "frame extraction expects image height {FRAME_HEIGHT}, got {}",
            image.height()
        )));
    }
    let dim = window * FRAME_HEIGHT;
    let n = frame_count(image.width(), window, shift);
    let mut data = vec![0.0; n * dim];
    for (t, frame) in data.chunks_exact_mut(dim).enumerate() {
        extract_frame(image, t, window, shift, frame);
    }
    Ok(FeatureSequence { dim, data })
}

/// Hann weight of column `c`: `0.5·(1 − cos(2π(c + 0.5)/window))`.
pub fn hann_weight(c: usize, window: usize) -> f64 {
    0.5 * (1.0 - (2.0 * PI * (c as f64 + 0.5) / window as f64).cos())
}

fn apply_hann(frame: &mut [f64], window: usize, height: usize) {
    for c in 0..window {
        let w = hann_weight(c, window);
        for v in &mut frame[c * height..(c + 1) * height] {
            *v *= w;
        }
    }
}

/// Multiplies every column of a column-major frame by its Hann weight.
pub fn cosine_window(frame: &[f64], window: usize, height: usize) -> Result<Vec<f64>> {
    if frame.len() != window * height {
        return Err(Error::contract(format!(
            "frame of length {} is not {window} x {height}",
            frame.len()
        )));
    }
    let mut out = frame.to_vec();
    apply_hann(&mut out, window, height);
    Ok(out)
}

/// Projection onto the leading principal directions.
#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// `output_dim × input_dim`, rows in descending eigenvalue order.
    pub basis: Vec<f64>,
    /// Eigenvalues of the kept rows (0 for padded rows).
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
}

#[derive(Clone, Debug)]
pub struct PcaFit {
    pub model: PcaModel,
    /// Set when fewer than `output_dim` components carry variance.
    pub warning: Option<String>,
}

/// Streaming sample-covariance accumulator. Rows are shifted by the first
/// row seen to keep the cross products well conditioned.
#[derive(Clone, Debug)]
pub struct CovarianceAccumulator {
    dim: usize,
    count: usize,
    shift: Option<Vec<f64>>,
    sum: Vec<f64>,
    cross: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator { dim, count: 0, shift: None, sum: vec![0.0; dim], cross: vec![0.0; dim * dim] }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds a `rows × dim` block.
    pub fn add_rows(&mut self, rows: &[f64]) -> Result<()> {
        let dim = self.dim;
        if !rows.len().is_multiple_of(dim) {
            return Err(Error::contract("block is not a whole number of rows"));
        }
        if rows.is_empty() {
            return Ok(());
        }
        let shift = self.shift.get_or_insert_with(|| rows[..dim].to_vec());
        let mut centered = rows.to_vec();
        for row in centered.chunks_exact_mut(dim) {
            for ((v, s), acc) in row.iter_mut().zip(shift.iter()).zip(self.sum.iter_mut()) {
                *v -= s;
                *acc += *v;
            }
        }
        let n = rows.len() / dim;
        gemm_tn(dim, n, dim, &centered, &centered, 1.0, &mut self.cross);
        self.count += n;
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        let zero = vec![0.0; self.dim];
        let shift = self.shift.as_ref().unwrap_or(&zero);
        self.sum.iter().zip(shift).map(|(s, r)| r + s / n).collect()
    }

    /// Unbiased sample covariance, row-major `dim × dim`.
    pub fn covariance(&self) -> Vec<f64> {
        let n = self.count as f64;
        let d = self.dim;
        let denom = (n - 1.0).max(1.0);
        let mut cov = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] = (self.cross[i * d + j] - self.sum[i] * self.sum[j] / n) / denom;
            }
        }
        cov
    }

    pub fn fit(&self, out_dim: usize) -> Result<PcaFit> {
        fit_from_covariance(self.mean(), &self.covariance(), self.count, out_dim)
    }
}

fn fit_from_covariance(mean: Vec<f64>, cov: &[f64], samples: usize, out_dim: usize) -> Result<PcaFit> {
    let d = mean.len();
    if out_dim == 0 || out_dim > d {
        return Err(Error::contract(format!("output dim {out_dim} must lie in 1..={d}")));
    }
    if samples < out_dim {
        return Err(Error::contract(format!("PCA needs at least {out_dim} samples, got {samples}")));
    }
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total_variance: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = (top * 1e-10).max(1e-12);
    let mut basis = vec![0.0; out_dim * d];
    let mut eigenvalues = vec![0.0; out_dim];
    let mut kept = 0;
    for (row, &k) in order.iter().take(out_dim).enumerate() {
        let lambda = eig.eigenvalues[k];
        if lambda <= tol {
            break;
        }
        let v = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for i in 1..d {
            if v[i].abs() > v[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = v.norm();
        for i in 0..d {
            basis[row * d + i] = sign * v[i] / norm;
        }
        eigenvalues[row] = lambda;
        kept += 1;
    }
    let warning = (kept < out_dim).then(|| {
        let msg = format!("sample has rank {kept} < {out_dim}; padded the basis with zero rows");
        log::warn!("{msg}");
        msg
    });
    Ok(PcaFit { model: PcaModel { input_dim: d, output_dim: out_dim, mean, basis, eigenvalues, total_variance }, warning })
}

/// Fits on a `samples × dim` row-major block.
pub fn fit_pca(data: &[f64], dim: usize, out_dim: usize) -> Result<PcaFit> {
    let mut acc = CovarianceAccumulator::new(dim);
    acc.add_rows(data)?;
    acc.fit(out_dim)
}

impl PcaModel {
    /// `basis · (frame − mean)`.
    pub fn apply(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.input_dim {
            return Err(Error::contract(format!(
                "frame dim {} does not match PCA input dim {}",
                frame.len(),
                self.input_dim
            )));
        }
        Ok(self.apply_rows(frame, 1))
    }

    fn apply_rows(&self, rows: &[f64], n: usize) -> Vec<f64> {
        let mut centered = rows.to_vec();
        for row in centered.chunks_exact_mut(self.input_dim) {
            for (v, m) in row.iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        let mut out = vec![0.0; n * self.output_dim];
        gemm_nt(n, self.input_dim, self.output_dim, &centered, &self.basis, 0.0, &mut out);
        out
    }

    /// Fraction of the total variance explained by the kept components.
    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().sum::<f64>() / self.total_variance
    }
}

/// Per-dimension `(x − mean)/stddev`, with population statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl Standardizer {
    /// Fits on a `rows × dim` block; returns the indices of floored dimensions.
    pub fn fit(data: &[f64], dim: usize) -> Result<(Self, Vec<usize>)> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::contract("standardizer input is not whole frames"));
        }
        let n = data.len() / dim;
        if n < 2 {
            return Err(Error::contract("standardizer needs at least two frames"));
        }
        let mut mean = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for row in data.chunks_exact(dim) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let mut floored = Vec::new();
        let stddev = var
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let sd = (s / n as f64).sqrt();
                if sd < STDDEV_FLOOR {
                    floored.push(j);
                    STDDEV_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        if !floored.is_empty() {
            log::warn!("{} zero-variance dimensions floored at {STDDEV_FLOOR}", floored.len());
        }
        Ok((Standardizer { mean, stddev }, floored))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.dim() {
            return Err(Error::contract("frame dim does not match the standardizer"));
        }
        let mut out = frame.to_vec();
        self.apply_in_place(&mut out);
        Ok(out)
    }

    fn apply_in_place(&self, rows: &mut [f64]) {
        for row in rows.chunks_exact_mut(self.dim()) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.stddev) {
                *v = (*v - m) / s;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub window: usize,
    pub shift: usize,
    pub output_dim: usize,
    /// Upper bound on frames sampled for the PCA covariance.
    pub pca_sample_cap: usize,
    pub seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { window: WINDOW, shift: SHIFT, output_dim: PCA_DIM, pca_sample_cap: 100_000, seed: 0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub pca_samples: usize,
    pub training_frames: usize,
    pub warnings: Vec<String>,
}

/// Frozen image-to-features transform.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePipeline {
    pub window: usize,
    pub shift: usize,
    pub pca: PcaModel,
    pub standardizer: Standardizer,
}

impl FeaturePipeline {
    /// Fits PCA on a seeded uniform subsample of the windowed training
    /// frames, then the standardizer on all projected training frames.
    pub fn fit(images: &[LineImage], cfg: &FeatureConfig) -> Result<(Self, FitReport)> {
        check_window(cfg.window, cfg.shift)?;
        if images.is_empty() {
            return Err(Error::EmptyInput("no training images for feature fitting".into()));
        }
        if let Some(img) = images.iter().find(|i| i.height() != FRAME_HEIGHT) {
            return Err(Error::contract(format!(
                "frame extraction expects image height {FRAME_HEIGHT}, got {}",
                img.height()
            )));
        }
        let dim = cfg.window * FRAME_HEIGHT;
        let counts: Vec<usize> = images.iter().map(|i| frame_count(i.width(), cfg.window, cfg.shift)).collect();
        let total: usize = counts.iter().sum();
        let cap = cfg.pca_sample_cap.max(1).min(total);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut picks = rand::seq::index::sample(&mut rng, total, cap).into_vec();
        picks.sort_unstable();

        let mut acc = CovarianceAccumulator::new(dim);
        let mut block = Vec::with_capacity(1024 * dim);
        let mut frame = vec![0.0; dim];
        let (mut img, mut base) = (0, 0);
        for &p in &picks {
            while p >= base + counts[img] {
                base += counts[img];
                img += 1;
            }
            extract_frame(&images[img], p - base, cfg.window, cfg.shift, &mut frame);
            apply_hann(&mut frame, cfg.window, FRAME_HEIGHT);
            block.extend_from_slice(&frame);
            if block.len() == 1024 * dim {
                acc.add_rows(&block)?;
                block.clear();
            }
        }
        acc.add_rows(&block)?;
        let fit = acc.fit(cfg.output_dim)?;
        let mut report = FitReport { pca_samples: cap, training_frames: total, warnings: Vec::new() };
        report.warnings.extend(fit.warning);

        let mut projected = Vec::with_capacity(total * cfg.output_dim);
        for image in images {
            let raw = windowed_frames(image, cfg.window, cfg.shift)?;
            projected.extend(fit.model.apply_rows(raw.data(), raw.len()));
        }
        let (standardizer, floored) = if total >= 2 {
            Standardizer::fit(&projected, cfg.output_dim)?
        } else {
            let s = Standardizer { mean: projected.clone(), stddev: vec![1.0; cfg.output_dim] };
            report.warnings.push("single training frame; standardizer only centers".into());
            (s, Vec::new())
        };
        if !floored.is_empty() {
            report.warnings.push(format!("{} zero-variance feature dimensions floored", floored.len()));
        }
        Ok((FeaturePipeline { window: cfg.window, shift: cfg.shift, pca: fit.model, standardizer }, report))
    }

    pub fn output_dim(&self) -> usize {
        self.pca.output_dim
    }

    pub fn apply(&self, image: &LineImage) -> Result<FeatureSequence> {
        let raw = windowed_frames(image, self.window, self.shift)?;
        let mut out = self.pca.apply_rows(raw.data(), raw.len());
        self.standardizer.apply_in_place(&mut out);
        FeatureSequence::new(out, self.output_dim())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(CONTAINER_MAGIC, CONTAINER_VERSION);
        w.u32(self.window as u32);
        w.u32(self.shift as u32);
        w.u32(FRAME_HEIGHT as u32);
        w.u32(self.pca.input_dim as u32);
        w.u32(self.pca.output_dim as u32);
        w.f64s(&self.pca.mean);
        w.f64s(&self.pca.basis);
        w.f64s(&self.pca.eigenvalues);
        w.f64(self.pca.total_variance);
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.stddev);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (mut r, version) = Reader::open(bytes, CONTAINER_MAGIC)?;
        if version != CONTAINER_VERSION {
            return Err(Error::format(format!("unsupported feature model version {version}")));
        }
        let window = r.u32()? as usize;
        let shift = r.u32()? as usize;
        let height = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let output_dim = r.u32()? as usize;
        let mean = r.f64s()?;
        let basis = r.f64s()?;
        let eigenvalues = r.f64s()?;
        let total_variance = r.f64()?;
        let s_mean = r.f64s()?;
        let s_std = r.f64s()?;
        r.expect_end()?;
        let consistent = height == FRAME_HEIGHT
            && window >= 1
            && shift >= 1
            && input_dim == window * height
            && mean.len() == input_dim
            && basis.len() == input_dim * output_dim
            && eigenvalues.len() == output_dim
            && s_mean.len() == output_dim
            && s_std.len() == output_dim
            && s_std.iter().all(|s| *s > 0.0);
        if !consistent {
            return Err(Error::format("feature model dimensions are inconsistent"));
        }
        Ok(FeaturePipeline {
            window,
            shift,
            pca: PcaModel { input_dim, output_dim, mean, basis, eigenvalues, total_variance },
            standardizer: Standardizer { mean: s_mean, stddev: s_std },
        })
    }
}

/// Raw frames with the Hann taper applied.
pub fn windowed_frames(image: &LineImage, window: usize, shift: usize) -> Result<FeatureSequence> {
    let mut seq = slide_frames(image, window, shift)?;
    for frame in seq.data.chunks_exact_mut(seq.dim) {
        apply_hann(frame, window, FRAME_HEIGHT);
    }
    Ok(seq)
}
