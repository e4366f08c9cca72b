//! Fusion of motion-corrected volumes.
//!
//! Each corrected volume gets a per-A-scan weight from its local sampling
//! density: where transverse motion left a coverage gap, the corrected
//! A-scans replicate the acquired B-scan next to the gap, so consecutive
//! corrected A-scans map to nearly the same source coordinate and the
//! density rises far above 1. Such replicated data decays exponentially out
//! of the average. For OCTA, weights are additionally scaled by the
//! resampled saccade validity so saturated B-scans never reach the merged
//! volume. A-scans where every weight vanishes are flagged as gaps and
//! rendered black rather than falling back to saturated data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::geom::FastAxis;
use crate::volume::{EnFaceImage, Volume};

/// Merge parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MergeConfig {
    /// Decay scale of the oversampling weight.
    pub density_sigma: f64,
    /// Weights below this are clipped to zero.
    pub weight_clip: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            density_sigma: 0.5,
            weight_clip: 0.01,
        }
    }
}

/// Floor for the slow-axis source spacing when inverting it into a density.
const SPACING_FLOOR: f64 = 1e-4;

/// Per-A-scan sampling density of one corrected scan.
///
/// For each corrected A-scan the displaced slow-axis source coordinate is
/// compared against its transverse neighbors along the slow axis; the local
/// spacing is the smaller adjacent difference and the density its inverse.
/// Uniform sampling gives exactly 1; replicated A-scans (spacing ≈ 0) give
/// very large densities.
pub fn sampling_density(field: &DisplacementField) -> Vec<f64> {
    let (w, h) = (field.width, field.height);
    let source = |i: usize, j: usize| -> f64 {
        match field.scan {
            FastAxis::X => j as f64 + field.at(i, j)[1],
            FastAxis::Y => i as f64 + field.at(i, j)[0],
        }
    };
    let mut density = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let (prev, next) = match field.scan {
                FastAxis::X => (
                    (j > 0).then(|| (source(i, j) - source(i, j - 1)).abs()),
                    (j + 1 < h).then(|| (source(i, j + 1) - source(i, j)).abs()),
                ),
                FastAxis::Y => (
                    (i > 0).then(|| (source(i, j) - source(i - 1, j)).abs()),
                    (i + 1 < w).then(|| (source(i + 1, j) - source(i, j)).abs()),
                ),
            };
            let spacing = match (prev, next) {
                (Some(a), Some(b)) => a.min(b),
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => 1.0,
            };
            density[j * w + i] = 1.0 / spacing.max(SPACING_FLOOR);
        }
    }
    density
}

/// Per-A-scan, per-volume merge weights plus the gap flags.
#[derive(Debug, Clone)]
pub struct MergeWeights {
    pub width: usize,
    pub height: usize,
    /// Normalized weight per volume per A-scan; weights sum to 1 where any
    /// data survives.
    pub weights: Vec<[f64; 2]>,
    /// A-scans where no volume contributes.
    pub gaps: Vec<bool>,
}

impl MergeWeights {
    pub fn gap_fraction(&self) -> f64 {
        self.gaps.iter().filter(|&&g| g).count() as f64 / self.gaps.len() as f64
    }

    pub fn gap_image(&self) -> EnFaceImage {
        EnFaceImage::from_fn(self.width, self.height, |i, j| {
            if self.gaps[j * self.width + i] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Turn densities (and optional resampled validities) into normalized
/// per-A-scan weights.
///
/// `w = exp(−max(0, density − 1)/σ)`, clipped to zero below the threshold,
/// multiplied by the validity when given (OCTA), clipped again, then
/// normalized over the volumes that keep nonzero weight.
pub fn merge_weights(
    densities: [&[f64]; 2],
    validities: Option<[&[f64]; 2]>,
    width: usize,
    height: usize,
    cfg: &MergeConfig,
) -> MergeWeights {
    let n = width * height;
    assert!(densities.iter().all(|d| d.len() == n));
    if let Some(v) = &validities {
        assert!(v.iter().all(|v| v.len() == n));
    }
    let mut weights = vec![[0.0f64; 2]; n];
    let mut gaps = vec![false; n];
    for a in 0..n {
        let mut pair = [0.0f64; 2];
        for v in 0..2 {
            let mut w = (-(densities[v][a] - 1.0).max(0.0) / cfg.density_sigma).exp();
            if w < cfg.weight_clip {
                w = 0.0;
            }
            if let Some(val) = &validities {
                w *= val[v][a];
                if w < cfg.weight_clip {
                    w = 0.0;
                }
            }
            pair[v] = w;
        }
        let sum = pair[0] + pair[1];
        if sum > 0.0 {
            weights[a] = [pair[0] / sum, pair[1] / sum];
        } else {
            gaps[a] = true;
        }
    }
    MergeWeights {
        width,
        height,
        weights,
        gaps,
    }
}

/// Weighted voxel-wise average of two corrected volumes.
///
/// Gap A-scans come out as zeros ("black gap"); everything else is a convex
/// combination of the inputs.
pub fn merge_volumes(a: &Volume, b: &Volume, weights: &MergeWeights) -> Result<Volume> {
    let g = a.geometry;
    if b.geometry.width != g.width || b.geometry.height != g.height || b.geometry.depth != g.depth
    {
        return Err(Error::GeometryMismatch("merge inputs differ in shape".into()));
    }
    if weights.width != g.width || weights.height != g.height {
        return Err(Error::GeometryMismatch("weights do not match the grid".into()));
    }
    let mut out = Volume::zeros(g, a.kind);
    out.data_mut()
        .par_chunks_mut(g.depth)
        .enumerate()
        .for_each(|(q, ascan)| {
            let i = q % g.width;
            let j = q / g.width;
            if weights.gaps[q] {
                return; // already zero
            }
            let [wa, wb] = weights.weights[q];
            let col_a = a.ascan(i, j);
            let col_b = b.ascan(i, j);
            for (k, v) in ascan.iter_mut().enumerate() {
                *v = (wa * col_a[k] as f64 + wb * col_b[k] as f64) as f32;
            }
        });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridGeometry;
    use crate::volume::VolumeKind;

    #[test]
    fn zero_field_density_is_one() {
        let f = DisplacementField::zeros(4, 5, FastAxis::X);
        assert!(sampling_density(&f).iter().all(|&d| d == 1.0));
        let f = DisplacementField::zeros(4, 5, FastAxis::Y);
        assert!(sampling_density(&f).iter().all(|&d| d == 1.0));
    }

    #[test]
    fn replicated_ascans_blow_up_the_density() {
        // rows 1 and 2 sample the same source row: spacing 0 at both
        let f = DisplacementField::from_fn(2, 4, FastAxis::X, |_, j| {
            [0.0, if j == 2 { -1.0 } else { 0.0 }, 0.0]
        });
        let d = sampling_density(&f);
        assert!(d[2] >= 1.0 / SPACING_FLOOR - 1.0);
        assert!(d[4] >= 1.0 / SPACING_FLOOR - 1.0);
        assert_eq!(d[0], 1.0);
    }

    #[test]
    fn uniform_stretch_halves_the_density() {
        let f = DisplacementField::from_fn(2, 5, FastAxis::X, |_, j| [0.0, j as f64, 0.0]);
        let d = sampling_density(&f);
        assert!(d.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn symmetric_densities_split_evenly() {
        let cfg = MergeConfig::default();
        let d = vec![1.0; 4];
        let w = merge_weights([&d, &d], None, 2, 2, &cfg);
        for pair in &w.weights {
            assert_eq!(*pair, [0.5, 0.5]);
        }
        assert!(w.gaps.iter().all(|&g| !g));
    }

    #[test]
    fn oversampled_volume_is_clipped_out() {
        let cfg = MergeConfig::default();
        let a = vec![1.0; 1];
        let b = vec![11.0; 1]; // exp(-20) < 0.01
        let w = merge_weights([&a, &b], None, 1, 1, &cfg);
        assert_eq!(w.weights[0], [1.0, 0.0]);
    }

    #[test]
    fn octa_weights_follow_validity() {
        let cfg = MergeConfig::default();
        let d = vec![1.0; 2];
        let va = vec![0.0, 1.0];
        let vb = vec![1.0, 0.0];
        let w = merge_weights([&d, &d], Some([&va, &vb]), 2, 1, &cfg);
        assert_eq!(w.weights[0], [0.0, 1.0]);
        assert_eq!(w.weights[1], [1.0, 0.0]);
    }

    #[test]
    fn both_zero_weights_flag_a_gap() {
        let cfg = MergeConfig::default();
        let d = vec![1.0];
        let v0 = vec![0.0];
        let w = merge_weights([&d, &d], Some([&v0, &v0]), 1, 1, &cfg);
        assert!(w.gaps[0]);
        assert_eq!(w.gap_fraction(), 1.0);
    }

    #[test]
    fn weighted_average_arithmetic() {
        let g = GridGeometry::desk(2, 2, 2, FastAxis::X);
        let a = Volume::filled(g, VolumeKind::Structural, 2.0);
        let b = Volume::filled(g, VolumeKind::Structural, 4.0);
        let weights = MergeWeights {
            width: 2,
            height: 2,
            weights: vec![[0.25, 0.75]; 4],
            gaps: vec![false; 4],
        };
        let m = merge_volumes(&a, &b, &weights).unwrap();
        assert!(m.data().iter().all(|&v| (v - 3.5).abs() < 1e-6));
    }

    #[test]
    fn identical_inputs_merge_to_themselves() {
        let g = GridGeometry::desk(3, 3, 3, FastAxis::X);
        let a = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| (i + j * k) as f32);
        let d = vec![1.0; 9];
        let w = merge_weights([&d, &d], None, 3, 3, &MergeConfig::default());
        let m = merge_volumes(&a, &a, &w).unwrap();
        for (x, y) in m.data().iter().zip(a.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn gap_ascans_become_black() {
        let g = GridGeometry::desk(2, 2, 2, FastAxis::X);
        let a = Volume::filled(g, VolumeKind::Angiography, 0.9);
        let weights = MergeWeights {
            width: 2,
            height: 2,
            weights: vec![[0.5, 0.5], [0.0, 0.0], [0.5, 0.5], [0.5, 0.5]],
            gaps: vec![false, true, false, false],
        };
        let m = merge_volumes(&a, &a, &weights).unwrap();
        assert_eq!(m.at(1, 0, 0), 0.0);
        assert_eq!(m.at(1, 0, 1), 0.0);
        assert!((m.at(0, 0, 0) - 0.9).abs() < 1e-6);
    }

    #[test]
    fn merged_values_stay_convex() {
        let g = GridGeometry::desk(4, 4, 3, FastAxis::X);
        let a = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| ((i + j + k) % 5) as f32);
        let b = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| ((i * j + k) % 7) as f32);
        let da: Vec<f64> = (0..16).map(|q| 1.0 + 0.2 * (q % 3) as f64).collect();
        let db: Vec<f64> = (0..16).map(|q| 1.0 + 0.1 * (q % 5) as f64).collect();
        let w = merge_weights([&da, &db], None, 4, 4, &MergeConfig::default());
        let m = merge_volumes(&a, &b, &w).unwrap();
        for j in 0..4 {
            for i in 0..4 {
                for k in 0..3 {
                    let lo = a.at(i, j, k).min(b.at(i, j, k));
                    let hi = a.at(i, j, k).max(b.at(i, j, k));
                    let v = m.at(i, j, k);
                    assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                }
            }
        }
    }
}
