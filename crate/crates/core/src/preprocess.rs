//! Structural normalization, saccade detection, and pyramid construction.
//!
//! Structural volumes are standardized per B-scan in the log domain so the
//! similarity term is insensitive to illumination changes, which act
//! multiplicatively on reflectivity (e.g. vitreous opacities dim whole
//! B-scans). Saccadic B-scans saturate the decorrelation signal; they are
//! detected from per-B-scan mean decorrelation and excluded, together with
//! their two neighbors on each side, through a validity mask.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{half_len, FastAxis, GridGeometry};
use crate::volume::{EnFaceImage, Volume};

/// Floor for the per-B-scan standard deviation during normalization.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-B-scan angiography validity: 1 valid, 0 saccadic, fractional after
/// downsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    /// Scan orientation the mask belongs to (its index runs along that
    /// scan's slow axis).
    pub scan: FastAxis,
    pub values: Vec<f64>,
}

impl ValidityMask {
    pub fn all_valid(scan: FastAxis, n_bscans: usize) -> Self {
        Self {
            scan,
            values: vec![1.0; n_bscans],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// B-scan indices with `v == 0` at full resolution.
    pub fn invalid_bscans(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 0.0)
            .map(|(b, _)| b)
            .collect()
    }

    /// 2× box-average downsampling along the B-scan axis.
    pub fn downsample(&self) -> ValidityMask {
        ValidityMask {
            scan: self.scan,
            values: downsample_1d(&self.values),
        }
    }
}

/// Per-B-scan log standardization: `g = ln(1 + f)`, then `(g - mean) / std`
/// with the standard deviation floored at [`STD_FLOOR`].
pub fn normalize_structural(volume: &Volume) -> Volume {
    let g = volume.geometry;
    let mut out = volume.clone();
    let n_bscans = g.n_bscans();
    // log transform first, in place
    out.data_mut().par_iter_mut().for_each(|v| {
        *v = (1.0 + *v as f64).ln() as f32;
    });
    // standardize each B-scan independently
    let stats: Vec<(f64, f64)> = (0..n_bscans)
        .into_par_iter()
        .map(|b| {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            let mut n = 0usize;
            for f in 0..g.bscan_len() {
                let (i, j) = g.ascan_at(b, f);
                for &v in out.ascan(i, j) {
                    let v = v as f64;
                    sum += v;
                    sum2 += v * v;
                    n += 1;
                }
            }
            let mean = sum / n as f64;
            let var = (sum2 / n as f64 - mean * mean).max(0.0);
            (mean, var.sqrt().max(STD_FLOOR))
        })
        .collect();
    for b in 0..n_bscans {
        let (mean, std) = stats[b];
        for f in 0..g.bscan_len() {
            let (i, j) = g.ascan_at(b, f);
            for v in out.ascan_mut(i, j) {
                *v = ((*v as f64 - mean) / std) as f32;
            }
        }
    }
    out
}

/// Per-A-scan log standardization.
///
/// Registration compares orthogonally scanned volumes; any per-B-scan
/// statistic differs between the two scan orientations and the similarity
/// term would chase that difference as if it were motion. Standardizing
/// each depth profile individually is invariant to per-B-scan (and even
/// per-A-scan) illumination changes while treating both scans identically,
/// so identical content yields identical normalized volumes.
pub fn normalize_per_ascan(volume: &Volume) -> Volume {
    let g = volume.geometry;
    let mut out = volume.clone();
    out.data_mut().par_chunks_mut(g.depth).for_each(|col| {
        let mut sum = 0.0f64;
        let mut sum2 = 0.0f64;
        for v in col.iter_mut() {
            let lg = (1.0 + *v as f64).ln();
            *v = lg as f32;
            sum += lg;
            sum2 += lg * lg;
        }
        let n = col.len() as f64;
        let mean = sum / n;
        let std = (sum2 / n - mean * mean).max(0.0).sqrt().max(STD_FLOOR);
        for v in col.iter_mut() {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    });
    out
}

/// Global log standardization: `ln(1 + f)` standardized by the volume-wide
/// mean and standard deviation.
///
/// Orientation-independent like [`normalize_per_ascan`] but preserves
/// transverse brightness structure (vessel shadows, layer contrast), which
/// the similarity term relies on. Invariant to global gain; per-B-scan
/// illumination correction, when the data demands it, is the job of
/// [`normalize_structural`].
pub fn normalize_global(volume: &Volume) -> Volume {
    let mut out = volume.clone();
    out.data_mut().par_iter_mut().for_each(|v| {
        *v = (1.0 + *v as f64).ln() as f32;
    });
    let n = out.data().len() as f64;
    let sum: f64 = out.data().iter().map(|&v| v as f64).sum();
    let mean = sum / n;
    let var: f64 = out
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt().max(STD_FLOOR);
    out.data_mut().par_iter_mut().for_each(|v| {
        *v = ((*v as f64 - mean) / std) as f32;
    });
    out
}

/// Detect saccadic B-scans in an angiography volume.
///
/// A B-scan is flagged when its mean decorrelation exceeds the volume mean by
/// three standard deviations; the mask zeroes the flagged B-scan and the two
/// before and after it.
pub fn detect_saccades(angio: &Volume) -> ValidityMask {
    let g = angio.geometry;
    let n = g.n_bscans();
    let means: Vec<f64> = (0..n)
        .map(|b| {
            let mut sum = 0.0;
            let mut count = 0usize;
            for ascan in angio.bscan_ascans(b) {
                sum += ascan.iter().map(|&v| v as f64).sum::<f64>();
                count += ascan.len();
            }
            sum / count as f64
        })
        .collect();
    let mean = means.iter().sum::<f64>() / n as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n as f64;
    let threshold = mean + 3.0 * var.sqrt();
    let flagged: Vec<bool> = means.iter().map(|&m| m > threshold).collect();
    let values = (0..n)
        .map(|b| {
            let lo = b.saturating_sub(2);
            let hi = (b + 2).min(n - 1);
            if flagged[lo..=hi].iter().any(|&f| f) {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    ValidityMask {
        scan: g.fast_axis,
        values,
    }
}

/// 2× box average of a 1-D signal; an odd tail keeps its single sample.
pub fn downsample_1d(signal: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(half_len(signal.len()));
    let mut chunks = signal.chunks(2);
    for c in &mut chunks {
        out.push(c.iter().sum::<f64>() / c.len() as f64);
    }
    out
}

/// 2× box average of a volume along all three axes.
pub fn downsample_volume(volume: &Volume) -> Volume {
    let g = volume.geometry;
    let hg = g.halved();
    let mut out = Volume::zeros(hg, volume.kind);
    out.data_mut()
        .par_chunks_mut(hg.depth)
        .enumerate()
        .for_each(|(a, ascan)| {
            let i = a % hg.width;
            let j = a / hg.width;
            let i_lo = 2 * i;
            let i_hi = (2 * i + 1).min(g.width - 1);
            let j_lo = 2 * j;
            let j_hi = (2 * j + 1).min(g.height - 1);
            for (k, v) in ascan.iter_mut().enumerate() {
                let k_lo = 2 * k;
                let k_hi = (2 * k + 1).min(g.depth - 1);
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for jj in j_lo..=j_hi {
                    for ii in i_lo..=i_hi {
                        for kk in k_lo..=k_hi {
                            sum += volume.at(ii, jj, kk) as f64;
                            n += 1;
                        }
                    }
                }
                *v = (sum / n as f64) as f32;
            }
        });
    out
}

/// 2× box average of an en-face image along both axes.
pub fn downsample_enface(image: &EnFaceImage) -> EnFaceImage {
    let w = half_len(image.width);
    let h = half_len(image.height);
    EnFaceImage::from_fn(w, h, |i, j| {
        let i_hi = (2 * i + 1).min(image.width - 1);
        let j_hi = (2 * j + 1).min(image.height - 1);
        let mut sum = 0.0;
        let mut n = 0;
        for jj in 2 * j..=j_hi {
            for ii in 2 * i..=i_hi {
                sum += image.at(ii, jj);
                n += 1;
            }
        }
        sum / n as f64
    })
}

/// One multi-resolution level of a scan.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub geometry: GridGeometry,
    pub structural: Volume,
    pub enface: EnFaceImage,
    pub validity: ValidityMask,
}

/// Factor-2 multi-resolution pyramid; level 0 is full resolution.
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Levels coarsest first, with the level's downsampling exponent.
    pub fn coarse_to_fine(&self) -> impl Iterator<Item = (usize, &PyramidLevel)> {
        self.levels.iter().enumerate().rev()
    }
}

/// Default pyramid depth: halve until the coarsest level keeps at least 16
/// A-scans per transverse axis.
pub fn default_pyramid_levels(geometry: &GridGeometry) -> usize {
    let min_dim = geometry.width.min(geometry.height) as f64;
    ((min_dim / 16.0).log2().floor() as i64 + 1).max(1) as usize
}

/// Build a pyramid from full-resolution inputs.
pub fn build_pyramid(
    structural: &Volume,
    enface: &EnFaceImage,
    validity: &ValidityMask,
    levels: usize,
) -> Result<Pyramid> {
    let g = structural.geometry;
    if enface.width != g.width || enface.height != g.height {
        return Err(Error::GeometryMismatch(
            "en-face image does not match the volume's transverse grid".into(),
        ));
    }
    if validity.len() != g.n_bscans() {
        return Err(Error::GeometryMismatch(format!(
            "validity mask length {} does not match {} B-scans",
            validity.len(),
            g.n_bscans()
        )));
    }
    if levels == 0 {
        return Err(Error::InvalidInput("pyramid needs at least one level".into()));
    }
    // check the coarsest level keeps every axis at >= 2 samples
    let shrink = |n: usize| -> usize {
        let mut n = n;
        for _ in 1..levels {
            n = half_len(n);
        }
        n
    };
    if shrink(g.width) < 2 || shrink(g.height) < 2 || shrink(g.depth) < 2 {
        return Err(Error::InvalidInput(format!(
            "{levels} levels would shrink {}x{}x{} below 2 samples per axis",
            g.width, g.height, g.depth
        )));
    }

    let mut out = Vec::with_capacity(levels);
    out.push(PyramidLevel {
        geometry: g,
        structural: structural.clone(),
        enface: enface.clone(),
        validity: validity.clone(),
    });
    for _ in 1..levels {
        let prev = out.last().unwrap();
        let structural = downsample_volume(&prev.structural);
        out.push(PyramidLevel {
            geometry: structural.geometry,
            structural,
            enface: downsample_enface(&prev.enface),
            validity: prev.validity.downsample(),
        });
    }
    Ok(Pyramid { levels: out })
}

/// Replace each invalid B-scan with its nearest valid one (ties pick the
/// lower index). Used before any interpolation touches saturated OCTA data.
pub fn substitute_invalid_bscans(volume: &Volume, validity: &ValidityMask) -> Result<Volume> {
    let g = volume.geometry;
    if validity.len() != g.n_bscans() {
        return Err(Error::GeometryMismatch(
            "validity mask does not match the volume's B-scan count".into(),
        ));
    }
    let source = nearest_valid_indices(&validity.values)?;
    let mut out = volume.clone();
    for (b, &src) in source.iter().enumerate() {
        if src == b {
            continue;
        }
        for f in 0..g.bscan_len() {
            let (i, j) = g.ascan_at(b, f);
            let (si, sj) = g.ascan_at(src, f);
            let col: Vec<f32> = volume.ascan(si, sj).to_vec();
            out.ascan_mut(i, j).copy_from_slice(&col);
        }
    }
    Ok(out)
}

/// For each index, the nearest index with a nonzero value (lower index wins
/// ties). Errors when everything is invalid.
pub fn nearest_valid_indices(values: &[f64]) -> Result<Vec<usize>> {
    let valid: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(b, _)| b)
        .collect();
    if valid.is_empty() {
        return Err(Error::Degenerate("no valid B-scan available".into()));
    }
    Ok((0..values.len())
        .map(|b| {
            let mut best = valid[0];
            let mut best_dist = best.abs_diff(b);
            for &v in &valid[1..] {
                let dist = v.abs_diff(b);
                if dist < best_dist {
                    best = v;
                    best_dist = dist;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    fn angio_with_means(means: &[f64]) -> Volume {
        let g = GridGeometry::desk(4, means.len(), 2, FastAxis::X);
        Volume::from_fn(g, VolumeKind::Angiography, |_, j, _| means[j] as f32)
    }

    #[test]
    fn constant_bscan_normalizes_to_zero() {
        let g = GridGeometry::desk(4, 3, 4, FastAxis::X);
        let v = Volume::from_fn(g, VolumeKind::Structural, |_, j, _| (j + 1) as f32);
        let n = normalize_structural(&v);
        for &x in n.data() {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn log_domain_shift_gives_identical_output() {
        // two B-scans that are multiplicative copies: (1+f) scaled by e
        let g = GridGeometry::desk(4, 2, 4, FastAxis::X);
        let base = |i: usize, k: usize| ((i * 4 + k) as f32).exp2() + 10.0;
        let v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            let f = base(i, k);
            if j == 0 {
                f
            } else {
                std::f32::consts::E * (1.0 + f) - 1.0
            }
        });
        let n = normalize_structural(&v);
        for i in 0..4 {
            for k in 0..4 {
                assert!((n.at(i, 0, k) - n.at(i, 1, k)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn multiplicative_scaling_agrees_to_first_order_for_large_values() {
        let g = GridGeometry::desk(8, 2, 8, FastAxis::X);
        let f = |i: usize, k: usize| 100.0 + 14.0 * (i * 8 + k) as f32; // 100..=996
        let plain = Volume::from_fn(g, VolumeKind::Structural, |i, _, k| f(i, k));
        let scaled = Volume::from_fn(g, VolumeKind::Structural, |i, _, k| {
            std::f32::consts::E * f(i, k)
        });
        let a = normalize_structural(&plain);
        let b = normalize_structural(&scaled);
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff < 0.02, "max diff {max_diff}");
    }

    #[test]
    fn per_bscan_moments_are_standardized() {
        let g = GridGeometry::desk(6, 3, 6, FastAxis::Y);
        let v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            ((i * 31 + j * 17 + k * 7) % 23) as f32
        });
        let n = normalize_structural(&v);
        for b in 0..g.n_bscans() {
            let vals: Vec<f64> = n.bscan_ascans(b).flatten().map(|&x| x as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_angiography_flags_nothing() {
        let v = angio_with_means(&[0.3; 20]);
        let mask = detect_saccades(&v);
        assert!(mask.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn single_spike_zeroes_its_window() {
        let mut means = vec![0.1; 100];
        means[50] = 0.9;
        let mask = detect_saccades(&angio_with_means(&means));
        for (j, &v) in mask.values.iter().enumerate() {
            let expect = if (48..=52).contains(&j) { 0.0 } else { 1.0 };
            assert_eq!(v, expect, "B-scan {j}");
        }
    }

    #[test]
    fn close_spikes_merge_their_windows() {
        let mut means = vec![0.1; 100];
        means[10] = 0.9;
        means[13] = 0.9;
        let mask = detect_saccades(&angio_with_means(&means));
        for (j, &v) in mask.values.iter().enumerate() {
            let expect = if (8..=15).contains(&j) { 0.0 } else { 1.0 };
            assert_eq!(v, expect, "B-scan {j}");
        }
    }

    #[test]
    fn window_rule_matches_brute_force() {
        let mut means = vec![0.2; 64];
        means[3] = 2.0;
        means[40] = 3.0;
        means[63] = 2.5;
        let v = angio_with_means(&means);
        let mask = detect_saccades(&v);
        let mean = means.iter().sum::<f64>() / 64.0;
        let std = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / 64.0).sqrt();
        let flagged: Vec<bool> = means.iter().map(|&m| m > mean + 3.0 * std).collect();
        for j in 0..64 {
            let brute = (0..64).any(|q| flagged[q] && q.abs_diff(j) <= 2);
            assert_eq!(mask.values[j] == 0.0, brute, "B-scan {j}");
        }
    }

    #[test]
    fn mask_downsampling_box_averages() {
        let m = ValidityMask {
            scan: FastAxis::X,
            values: vec![1.0, 1.0, 0.0, 0.0],
        };
        assert_eq!(m.downsample().values, vec![1.0, 0.0]);
        let m = ValidityMask {
            scan: FastAxis::X,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        assert_eq!(m.downsample().values, vec![0.5, 0.5]);
    }

    #[test]
    fn downsampling_preserves_the_mean_for_even_lengths() {
        let g = GridGeometry::desk(8, 6, 4, FastAxis::X);
        let v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            ((i * 13 + j * 5 + k * 29) % 17) as f32
        });
        let d = downsample_volume(&v);
        assert_eq!(d.geometry.width, 4);
        assert!((v.mean() - d.mean()).abs() < 1e-4);
    }

    #[test]
    fn pyramid_dims_follow_ceil_halving() {
        let g = GridGeometry::desk(8, 8, 8, FastAxis::X);
        let v = Volume::zeros(g, VolumeKind::Structural);
        let e = EnFaceImage::zeros(8, 8);
        let m = ValidityMask::all_valid(FastAxis::X, 8);
        let p = build_pyramid(&v, &e, &m, 3).unwrap();
        let dims: Vec<usize> = p.levels.iter().map(|l| l.geometry.width).collect();
        assert_eq!(dims, vec![8, 4, 2]);
        assert_eq!(p.levels[2].validity.len(), 2);

        let single = build_pyramid(&v, &e, &m, 1).unwrap();
        assert_eq!(single.n_levels(), 1);
        assert_eq!(single.levels[0].structural.data(), v.data());

        assert!(build_pyramid(&v, &e, &m, 4).is_err());
    }

    #[test]
    fn default_depth_keeps_16_ascans() {
        let g = GridGeometry::desk(128, 128, 64, FastAxis::X);
        assert_eq!(default_pyramid_levels(&g), 4);
        let g = GridGeometry::desk(500, 500, 465, FastAxis::X);
        assert_eq!(default_pyramid_levels(&g), 5);
    }

    #[test]
    fn nearest_valid_prefers_the_lower_index() {
        let src = nearest_valid_indices(&[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(src, vec![0, 0, 2]); // tie at index 1 goes down
        let src = nearest_valid_indices(&[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(src, vec![2, 2, 2, 2]);
        assert!(nearest_valid_indices(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn substitution_copies_whole_bscans() {
        let g = GridGeometry::desk(3, 4, 2, FastAxis::X);
        let v = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| {
            (j * 100 + i * 10 + k) as f32
        });
        let mask = ValidityMask {
            scan: FastAxis::X,
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let s = substitute_invalid_bscans(&v, &mask).unwrap();
        for i in 0..3 {
            for k in 0..2 {
                assert_eq!(s.at(i, 1, k), v.at(i, 0, k)); // tie -> lower
                assert_eq!(s.at(i, 2, k), v.at(i, 3, k));
            }
        }
    }
}
