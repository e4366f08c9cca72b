//! Feature maps and their disparity scores.
//!
//! Two per-A-scan features separate the registration error by direction:
//! the ILM depth map responds to axial error, the Frangi vesselness map to
//! transverse error. Disparities aggregate per-A-scan absolute differences
//! of co-registered maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enface::{median_of, percentile};
use crate::error::{Error, Result};
use crate::preprocess::{nearest_valid_indices, ValidityMask};
use crate::volume::{EnFaceImage, Volume};

use super::{LayerBoundary, LayerSet};

/// Separable Gaussian blur of a 1-D signal with clamped ends.
pub(crate) fn gaussian_blur_1d(signal: &[f64], sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return signal.to_vec();
    }
    let half = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|o| (-0.5 * (o as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let n = signal.len() as i64;
    (0..n)
        .map(|x| {
            let mut acc = 0.0;
            for (o, k) in kernel.iter().enumerate() {
                let idx = (x + o as i64 - half).clamp(0, n - 1) as usize;
                acc += k * signal[idx];
            }
            acc / ksum
        })
        .collect()
}

/// Separable Gaussian blur of an en-face image.
pub(crate) fn gaussian_blur_image(image: &EnFaceImage, sigma: f64) -> EnFaceImage {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (w, h) = (image.width, image.height);
    let mut rows = EnFaceImage::zeros(w, h);
    for j in 0..h {
        let blurred = gaussian_blur_1d(image.row(j), sigma);
        for (i, v) in blurred.into_iter().enumerate() {
            rows.set(i, j, v);
        }
    }
    let mut out = EnFaceImage::zeros(w, h);
    for i in 0..w {
        let col: Vec<f64> = (0..h).map(|j| rows.at(i, j)).collect();
        let blurred = gaussian_blur_1d(&col, sigma);
        for (j, v) in blurred.into_iter().enumerate() {
            out.set(i, j, v);
        }
    }
    out
}

/// Knobs of the layer-based vessel-map en-face projection.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VesselmapConfig {
    /// Lower/upper percentiles mapped to black and white.
    pub normalize_lo: f64,
    pub normalize_hi: f64,
}

impl Default for VesselmapConfig {
    fn default() -> Self {
        Self {
            normalize_lo: 0.10,
            normalize_hi: 0.95,
        }
    }
}

/// Layer-guided mean projection of a decorrelation volume.
///
/// Per B-scan, a 3×3 median filter in the (fast, depth) plane, then per
/// A-scan the mean between the ILM and the EZ. In alignment mode (validity
/// mask given) invalid B-scans are replaced by their nearest valid neighbor
/// in the projected image. Finally percentile normalization to `[0, 1]`.
/// A-scans where the layer order is degenerate use the single ILM voxel.
pub fn enface_for_vesselmap(
    octa: &Volume,
    layers: &LayerSet,
    validity: Option<&ValidityMask>,
    cfg: &VesselmapConfig,
) -> Result<EnFaceImage> {
    let g = octa.geometry;
    if layers.width != g.width || layers.height != g.height {
        return Err(Error::GeometryMismatch("layer set does not match the volume".into()));
    }
    let ilm = layers.get(LayerBoundary::Ilm)?;
    let ez = layers.get(LayerBoundary::Ez)?;

    // 3x3 median within each B-scan plane (fast axis x depth)
    let filtered = median_filter_bscans(octa);

    let mut image = EnFaceImage::zeros(g.width, g.height);
    for j in 0..g.height {
        for i in 0..g.width {
            let q = j * g.width + i;
            let col = filtered.ascan(i, j);
            let lo = ilm[q].round().max(0.0) as usize;
            let hi = (ez[q].round() as usize).min(g.depth - 1);
            let (lo, hi) = if lo >= hi {
                let z = lo.min(g.depth - 1);
                (z, z)
            } else {
                (lo, hi)
            };
            let mut sum = 0.0;
            for &v in &col[lo..=hi] {
                sum += v as f64;
            }
            image.set(i, j, sum / (hi - lo + 1) as f64);
        }
    }

    if let Some(mask) = validity {
        if mask.len() != g.n_bscans() {
            return Err(Error::GeometryMismatch("validity mask does not match".into()));
        }
        let source = nearest_valid_indices(&mask.values)?;
        let original = image.clone();
        for (b, &src) in source.iter().enumerate() {
            if src == b {
                continue;
            }
            for f in 0..g.bscan_len() {
                let (i, j) = g.ascan_at(b, f);
                let (si, sj) = g.ascan_at(src, f);
                image.set(i, j, original.at(si, sj));
            }
        }
    }

    // percentile normalization with clamping
    let mut pool: Vec<f64> = image.data().to_vec();
    let lo = percentile(&mut pool, cfg.normalize_lo);
    let hi = percentile(&mut pool, cfg.normalize_hi);
    let span = hi - lo;
    if span > 0.0 {
        for v in image.data_mut() {
            *v = ((*v - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        for v in image.data_mut() {
            *v = 0.0;
        }
    }
    Ok(image)
}

/// 3×3 median filter applied within every B-scan plane.
fn median_filter_bscans(volume: &Volume) -> Volume {
    let g = volume.geometry;
    let mut out = volume.clone();
    let n_b = g.n_bscans();
    let len = g.bscan_len();
    let planes: Vec<Vec<f32>> = (0..n_b)
        .into_par_iter()
        .map(|b| {
            let mut plane = vec![0.0f32; len * g.depth];
            let mut window = [0.0f32; 9];
            for f in 0..len {
                let (i, j) = g.ascan_at(b, f);
                for k in 0..g.depth {
                    let mut q = 0;
                    for df in -1i64..=1 {
                        let ff = (f as i64 + df).clamp(0, len as i64 - 1) as usize;
                        let (ii, jj) = g.ascan_at(b, ff);
                        let col = volume.ascan(ii, jj);
                        for dk in -1i64..=1 {
                            let kk = (k as i64 + dk).clamp(0, g.depth as i64 - 1) as usize;
                            window[q] = col[kk];
                            q += 1;
                        }
                    }
                    let (_, m, _) = window.select_nth_unstable_by(4, |a, b| a.total_cmp(b));
                    plane[f * g.depth + k] = *m;
                    let _ = i;
                    let _ = j;
                }
            }
            plane
        })
        .collect();
    for (b, plane) in planes.into_iter().enumerate() {
        for f in 0..len {
            let (i, j) = g.ascan_at(b, f);
            out.ascan_mut(i, j)
                .copy_from_slice(&plane[f * g.depth..(f + 1) * g.depth]);
        }
    }
    out
}

/// Frangi filter parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrangiConfig {
    /// Gaussian scales in pixels.
    pub scales: Vec<f64>,
    /// Blobness sensitivity.
    pub beta: f64,
}

impl Default for FrangiConfig {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 2.0, 4.0],
            beta: 0.5,
        }
    }
}

/// Multi-scale Frangi vesselness of a bright-ridge image, in `[0, 1]`.
///
/// Per scale: σ²-normalized Gaussian-derivative Hessian, eigenvalues with
/// `|λ1| ≤ |λ2|`; bright ridges require `λ2 < 0`. The structureness scale
/// `c` adapts to half the maximum Frobenius norm per scale, making the
/// response invariant to positive affine intensity changes. The output is
/// the maximum over scales.
pub fn frangi_vesselness(image: &EnFaceImage, cfg: &FrangiConfig) -> EnFaceImage {
    let (w, h) = (image.width, image.height);
    let mut best = EnFaceImage::zeros(w, h);
    for &sigma in &cfg.scales {
        let blurred = gaussian_blur_image(image, sigma);
        let s2 = sigma * sigma;
        let at = |i: i64, j: i64| blurred.at(i.clamp(0, w as i64 - 1) as usize, j.clamp(0, h as i64 - 1) as usize);
        // σ²-normalized Hessian via central differences on the blurred image
        let mut hxx = vec![0.0f64; w * h];
        let mut hyy = vec![0.0f64; w * h];
        let mut hxy = vec![0.0f64; w * h];
        for j in 0..h as i64 {
            for i in 0..w as i64 {
                let q = j as usize * w + i as usize;
                hxx[q] = s2 * (at(i + 1, j) - 2.0 * at(i, j) + at(i - 1, j));
                hyy[q] = s2 * (at(i, j + 1) - 2.0 * at(i, j) + at(i, j - 1));
                hxy[q] = s2 * 0.25 * (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1)
                    + at(i - 1, j - 1));
            }
        }
        let mut frobenius_max = 0.0f64;
        let mut eigen = vec![(0.0f64, 0.0f64); w * h];
        for q in 0..w * h {
            let (a, b, c) = (hxx[q], hxy[q], hyy[q]);
            let half_trace = 0.5 * (a + c);
            let det_part = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let l1 = half_trace + det_part;
            let l2 = half_trace - det_part;
            // order by absolute value: |λ1| <= |λ2|
            let (l1, l2) = if l1.abs() <= l2.abs() { (l1, l2) } else { (l2, l1) };
            eigen[q] = (l1, l2);
            frobenius_max = frobenius_max.max((l1 * l1 + l2 * l2).sqrt());
        }
        let c_scale = 0.5 * frobenius_max;
        if c_scale <= 0.0 {
            continue; // constant image at this scale
        }
        for j in 0..h {
            for i in 0..w {
                let q = j * w + i;
                let (l1, l2) = eigen[q];
                if l2 >= 0.0 {
                    continue;
                }
                let rb = l1 / l2;
                let s = (l1 * l1 + l2 * l2).sqrt();
                let v = (-rb * rb / (2.0 * cfg.beta * cfg.beta)).exp()
                    * (1.0 - (-s * s / (2.0 * c_scale * c_scale)).exp());
                if v > best.at(i, j) {
                    best.set(i, j, v);
                }
            }
        }
    }
    best
}

/// Mean/median aggregate of per-A-scan absolute differences.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisparityStats {
    pub mean: f64,
    pub median: f64,
    /// Fraction of A-scans excluded from aggregation.
    pub excluded_fraction: f64,
}

fn aggregate(diffs: Vec<f64>, excluded: usize, total: usize) -> Result<DisparityStats> {
    if diffs.is_empty() {
        return Err(Error::Degenerate("no A-scans left to aggregate".into()));
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let mut d = diffs;
    let median = median_of(&mut d);
    Ok(DisparityStats {
        mean,
        median,
        excluded_fraction: excluded as f64 / total as f64,
    })
}

/// ILM position disparity in µm between two co-registered depth maps.
pub fn ilm_disparity(
    map_a: &EnFaceImage,
    map_b: &EnFaceImage,
    axial_spacing_um: f64,
    exclude: Option<&[bool]>,
) -> Result<DisparityStats> {
    if !map_a.same_shape(map_b) {
        return Err(Error::GeometryMismatch("ILM maps differ in shape".into()));
    }
    let mut diffs = Vec::with_capacity(map_a.data().len());
    let mut excluded = 0usize;
    for (q, (a, b)) in map_a.data().iter().zip(map_b.data()).enumerate() {
        if exclude.map(|m| m[q]).unwrap_or(false) {
            excluded += 1;
            continue;
        }
        diffs.push((a - b).abs() * axial_spacing_um);
    }
    aggregate(diffs, excluded, map_a.data().len())
}

/// Mean absolute difference of two co-registered vessel maps.
pub fn vessel_disparity(
    map_a: &EnFaceImage,
    map_b: &EnFaceImage,
    exclude: Option<&[bool]>,
) -> Result<DisparityStats> {
    if !map_a.same_shape(map_b) {
        return Err(Error::GeometryMismatch("vessel maps differ in shape".into()));
    }
    let mut diffs = Vec::with_capacity(map_a.data().len());
    let mut excluded = 0usize;
    for (q, (a, b)) in map_a.data().iter().zip(map_b.data()).enumerate() {
        if exclude.map(|m| m[q]).unwrap_or(false) {
            excluded += 1;
            continue;
        }
        diffs.push((a - b).abs());
    }
    aggregate(diffs, excluded, map_a.data().len())
}
