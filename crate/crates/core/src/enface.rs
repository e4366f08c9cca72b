//! Segmentation-free en-face OCTA image generation.
//!
//! The projection selects voxels by local OCTA contrast instead of segmented
//! layer boundaries, so it keeps working under pathology. Decorrelation
//! volumes carry high values wherever the OCT signal is weak (vitreous, deep
//! choroid) and low values in the retina between vessels, so after noise
//! reduction and low-rank filtering the retina stands out as the low-valued
//! region. Thresholding that, together with an OCT signal mask, picks the
//! voxels to average along depth.
//!
//! Pipeline: radius-1 3-D median → width-15 rank-3 filters along the fast,
//! then the slow transverse axis → percentile normalization over valid
//! B-scans → contrast mask at 0.1 → combine with the OCT decorrelation mask
//! → depth average → per-B-scan median subtraction → invalid B-scans
//! replaced by their nearest valid neighbor → min-max normalization.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::FastAxis;
use crate::preprocess::{nearest_valid_indices, ValidityMask};
use crate::volume::{EnFaceImage, Volume};

/// Knobs of the projection; defaults follow the registration pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    /// Rank filter window (odd).
    pub rank_width: usize,
    /// 1-based order statistic selected by the rank filter.
    pub rank: usize,
    /// Threshold on percentile-normalized contrast values.
    pub contrast_threshold: f64,
    /// Quantile of the structural volume above which OCT signal counts as
    /// strong enough for decorrelation to be meaningful.
    pub oct_quantile: f64,
    /// Fixed `(p5, p95)` normalization values; when set, the per-volume
    /// percentile computation is skipped.
    pub fixed_percentiles: Option<(f64, f64)>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self {
            rank_width: 15,
            rank: 3,
            contrast_threshold: 0.1,
            oct_quantile: 0.55,
            fixed_percentiles: None,
        }
    }
}

/// Binary voxel masks steering the depth average.
#[derive(Debug, Clone)]
pub struct ProjectionMasks {
    /// 1 where lateral OCTA contrast exists in the neighborhood (retina).
    pub contrast: Vec<bool>,
    /// 1 where the OCT signal is strong enough for decorrelation.
    pub decorrelation: Vec<bool>,
    /// The percentile window collapsed (constant filtered volume); the
    /// contrast mask is all zeros in that case.
    pub degenerate_contrast: bool,
}

/// Median of the 3×3×3 clamped neighborhood of every voxel.
pub fn median_filter_3d_r1(volume: &Volume) -> Result<Volume> {
    let g = volume.geometry;
    if g.width < 3 || g.height < 3 || g.depth < 3 {
        return Err(Error::InvalidInput(
            "3-D median filter needs at least 3 voxels per axis".into(),
        ));
    }
    let mut out = Volume::zeros(g, volume.kind);
    out.data_mut()
        .par_chunks_mut(g.depth)
        .enumerate()
        .for_each(|(a, ascan)| {
            let i = a % g.width;
            let j = a / g.width;
            let mut window = [0.0f32; 27];
            for (k, v) in ascan.iter_mut().enumerate() {
                let mut n = 0;
                for dj in -1i64..=1 {
                    let jj = (j as i64 + dj).clamp(0, g.height as i64 - 1) as usize;
                    for di in -1i64..=1 {
                        let ii = (i as i64 + di).clamp(0, g.width as i64 - 1) as usize;
                        let col = volume.ascan(ii, jj);
                        for dk in -1i64..=1 {
                            let kk = (k as i64 + dk).clamp(0, g.depth as i64 - 1) as usize;
                            window[n] = col[kk];
                            n += 1;
                        }
                    }
                }
                let (_, median, _) =
                    window.select_nth_unstable_by(13, |a, b| a.total_cmp(b));
                *v = *median;
            }
        });
    Ok(out)
}

/// Sliding-window order statistic of a 1-D signal.
///
/// `output[x]` is the `rank`-th smallest value (1-based) in the window of
/// `width` samples centered at `x`, with indices clamped at the ends.
pub fn rank_filter_1d(signal: &[f32], width: usize, rank: usize) -> Result<Vec<f32>> {
    if width % 2 == 0 || width == 0 {
        return Err(Error::InvalidInput(format!("rank filter width {width} must be odd")));
    }
    if rank == 0 || rank > width {
        return Err(Error::InvalidInput(format!(
            "rank {rank} outside 1..={width}"
        )));
    }
    let n = signal.len() as i64;
    if n == 0 {
        return Ok(Vec::new());
    }
    let half = (width / 2) as i64;
    let mut window = vec![0.0f32; width];
    Ok((0..n)
        .map(|x| {
            for (o, w) in window.iter_mut().enumerate() {
                let idx = (x - half + o as i64).clamp(0, n - 1) as usize;
                *w = signal[idx];
            }
            let (_, v, _) = window.select_nth_unstable_by(rank - 1, |a, b| a.total_cmp(b));
            *v
        })
        .collect())
}

/// Apply the 1-D rank filter along one transverse axis of a volume.
pub fn rank_filter_axis(volume: &Volume, axis: FastAxis, width: usize, rank: usize) -> Result<Volume> {
    // validate parameters once
    rank_filter_1d(&[0.0; 1], width, rank)?;
    let g = volume.geometry;
    let mut out = volume.clone();
    match axis {
        FastAxis::X => {
            let lines: Vec<(usize, usize)> = (0..g.height)
                .flat_map(|j| (0..g.depth).map(move |k| (j, k)))
                .collect();
            let filtered: Vec<Vec<f32>> = lines
                .par_iter()
                .map(|&(j, k)| {
                    let line: Vec<f32> = (0..g.width).map(|i| volume.at(i, j, k)).collect();
                    rank_filter_1d(&line, width, rank).expect("validated parameters")
                })
                .collect();
            for ((j, k), line) in lines.into_iter().zip(filtered) {
                for (i, v) in line.into_iter().enumerate() {
                    out.set(i, j, k, v);
                }
            }
        }
        FastAxis::Y => {
            let lines: Vec<(usize, usize)> = (0..g.width)
                .flat_map(|i| (0..g.depth).map(move |k| (i, k)))
                .collect();
            let filtered: Vec<Vec<f32>> = lines
                .par_iter()
                .map(|&(i, k)| {
                    let line: Vec<f32> = (0..g.height).map(|j| volume.at(i, j, k)).collect();
                    rank_filter_1d(&line, width, rank).expect("validated parameters")
                })
                .collect();
            for ((i, k), line) in lines.into_iter().zip(filtered) {
                for (j, v) in line.into_iter().enumerate() {
                    out.set(i, j, k, v);
                }
            }
        }
    }
    Ok(out)
}

/// Linear-interpolation percentile of a sample set, `q` in `[0, 1]`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    values[lo] * (1.0 - t) + values[hi] * t
}

/// Contrast mask from a median+rank filtered decorrelation volume.
///
/// Percentiles are computed over voxels of valid B-scans only, values are
/// mapped linearly `p5 → 0`, `p95 → 1` without clamping, and the mask keeps
/// voxels below the contrast threshold.
pub fn build_contrast_mask(
    filtered: &Volume,
    validity: &ValidityMask,
    cfg: &ProjectionConfig,
) -> Result<ProjectionMasks> {
    let g = filtered.geometry;
    let (p5, p95) = match cfg.fixed_percentiles {
        Some(pair) => pair,
        None => {
            let mut pool: Vec<f64> = Vec::new();
            for b in 0..g.n_bscans() {
                if validity.values[b] > 0.0 {
                    for ascan in filtered.bscan_ascans(b) {
                        pool.extend(ascan.iter().map(|&v| v as f64));
                    }
                }
            }
            if pool.is_empty() {
                return Err(Error::Degenerate("every B-scan is invalid".into()));
            }
            (percentile(&mut pool, 0.05), percentile(&mut pool, 0.95))
        }
    };
    let span = p95 - p5;
    if span <= 0.0 {
        // no lateral contrast anywhere; nothing qualifies for projection
        return Ok(ProjectionMasks {
            contrast: vec![false; g.n_voxels()],
            decorrelation: vec![false; g.n_voxels()],
            degenerate_contrast: true,
        });
    }
    let threshold = cfg.contrast_threshold;
    let contrast = filtered
        .data()
        .iter()
        .map(|&v| (v as f64 - p5) / span < threshold)
        .collect();
    Ok(ProjectionMasks {
        contrast,
        decorrelation: vec![false; g.n_voxels()],
        degenerate_contrast: false,
    })
}

/// OCT signal mask: voxels at or above the configured quantile of the
/// structural volume.
pub fn build_decorrelation_mask(structural: &Volume, oct_quantile: f64) -> Vec<bool> {
    let mut pool: Vec<f64> = structural.data().iter().map(|&v| v as f64).collect();
    let threshold = percentile(&mut pool, oct_quantile);
    structural
        .data()
        .iter()
        .map(|&v| v as f64 >= threshold)
        .collect()
}

/// Result of [`project_enface`]: the image plus bookkeeping flags.
#[derive(Debug, Clone)]
pub struct Projection {
    pub image: EnFaceImage,
    /// A-scans whose masked depth range was empty.
    pub empty_columns: usize,
    /// The min-max normalization collapsed (flat image).
    pub degenerate_range: bool,
}

/// Project a decorrelation volume to an en-face image.
///
/// Per A-scan, the mean of decorrelation values where both masks are set
/// (empty columns become 0), then per-B-scan median subtraction, nearest
/// valid replacement of invalid B-scans, and min-max normalization to
/// `[0, 1]` over valid rows.
pub fn project_enface(
    angio: &Volume,
    masks: &ProjectionMasks,
    validity: &ValidityMask,
) -> Result<Projection> {
    let g = angio.geometry;
    if masks.contrast.len() != g.n_voxels() || masks.decorrelation.len() != g.n_voxels() {
        return Err(Error::GeometryMismatch("mask size does not match volume".into()));
    }
    if validity.len() != g.n_bscans() {
        return Err(Error::GeometryMismatch("validity mask does not match volume".into()));
    }
    let mut image = EnFaceImage::zeros(g.width, g.height);
    let mut empty_columns = 0usize;
    for j in 0..g.height {
        for i in 0..g.width {
            let base = (j * g.width + i) * g.depth;
            let col = angio.ascan(i, j);
            let mut sum = 0.0;
            let mut n = 0usize;
            for (k, &v) in col.iter().enumerate() {
                if masks.contrast[base + k] && masks.decorrelation[base + k] {
                    sum += v as f64;
                    n += 1;
                }
            }
            if n == 0 {
                empty_columns += 1;
            } else {
                image.set(i, j, sum / n as f64);
            }
        }
    }

    // per-B-scan median subtraction compensates bulk-motion brightening
    for b in 0..g.n_bscans() {
        let mut row: Vec<f64> = (0..g.bscan_len())
            .map(|f| {
                let (i, j) = g.ascan_at(b, f);
                image.at(i, j)
            })
            .collect();
        let med = median_of(&mut row);
        for f in 0..g.bscan_len() {
            let (i, j) = g.ascan_at(b, f);
            let v = image.at(i, j) - med;
            image.set(i, j, v);
        }
    }

    // saturated B-scans are replaced before anything interpolates them
    let source = nearest_valid_indices(&validity.values)?;
    let replaced = image.clone();
    for (b, &src) in source.iter().enumerate() {
        if src == b {
            continue;
        }
        for f in 0..g.bscan_len() {
            let (i, j) = g.ascan_at(b, f);
            let (si, sj) = g.ascan_at(src, f);
            image.set(i, j, replaced.at(si, sj));
        }
    }

    // min-max over valid rows; replaced rows are copies of valid ones and
    // therefore stay inside [0, 1]
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (b, &v) in validity.values.iter().enumerate() {
        if v > 0.0 {
            for f in 0..g.bscan_len() {
                let (i, j) = g.ascan_at(b, f);
                lo = lo.min(image.at(i, j));
                hi = hi.max(image.at(i, j));
            }
        }
    }
    let degenerate_range = !(hi > lo);
    if degenerate_range {
        for v in image.data_mut() {
            *v = 0.0;
        }
    } else {
        let span = hi - lo;
        for v in image.data_mut() {
            *v = (*v - lo) / span;
        }
    }
    Ok(Projection {
        image,
        empty_columns,
        degenerate_range,
    })
}

/// Full §-style en-face pipeline on a (substituted) decorrelation volume.
pub fn enface_from_volumes(
    angio: &Volume,
    structural: &Volume,
    validity: &ValidityMask,
    cfg: &ProjectionConfig,
) -> Result<Projection> {
    let g = angio.geometry;
    let filtered = median_filter_3d_r1(angio)?;
    let filtered = rank_filter_axis(&filtered, g.fast_axis, cfg.rank_width, cfg.rank)?;
    let filtered = rank_filter_axis(&filtered, g.fast_axis.orthogonal(), cfg.rank_width, cfg.rank)?;
    let mut masks = build_contrast_mask(&filtered, validity, cfg)?;
    masks.decorrelation = build_decorrelation_mask(structural, cfg.oct_quantile);
    project_enface(angio, &masks, validity)
}

pub fn median_of(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridGeometry;
    use crate::volume::VolumeKind;

    fn desk(w: usize, h: usize, d: usize) -> GridGeometry {
        GridGeometry::desk(w, h, d, FastAxis::X)
    }

    #[test]
    fn median_keeps_constants_and_kills_impulses() {
        let g = desk(5, 5, 5);
        let c = Volume::filled(g, VolumeKind::Angiography, 0.4);
        assert_eq!(median_filter_3d_r1(&c).unwrap().data(), c.data());

        let mut v = Volume::filled(g, VolumeKind::Angiography, 0.1);
        v.set(2, 2, 2, 9.0);
        let m = median_filter_3d_r1(&v).unwrap();
        for &x in m.data() {
            assert_eq!(x, 0.1);
        }
    }

    #[test]
    fn median_matches_sort_oracle_on_random_volume() {
        let g = desk(5, 5, 5);
        // simple deterministic pseudo-random fill
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f32 / (1u64 << 53) as f32
        };
        let v = Volume::from_fn(g, VolumeKind::Angiography, |_, _, _| next());
        let m = median_filter_3d_r1(&v).unwrap();
        for j in 0..5 {
            for i in 0..5 {
                for k in 0..5 {
                    let mut window = Vec::new();
                    for dj in -1i64..=1 {
                        for di in -1i64..=1 {
                            for dk in -1i64..=1 {
                                let ii = (i as i64 + di).clamp(0, 4) as usize;
                                let jj = (j as i64 + dj).clamp(0, 4) as usize;
                                let kk = (k as i64 + dk).clamp(0, 4) as usize;
                                window.push(v.at(ii, jj, kk));
                            }
                        }
                    }
                    window.sort_by(|a, b| a.total_cmp(b));
                    assert_eq!(m.at(i, j, k), window[13], "voxel ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn rank_filter_order_statistic_definition() {
        let signal: Vec<f32> = (1..=15).map(|v| v as f32).collect();
        let out = rank_filter_1d(&signal, 15, 3).unwrap();
        assert_eq!(out[7], 3.0); // centered window sees 1..=15

        let constant = vec![2.5f32; 40];
        assert_eq!(rank_filter_1d(&constant, 15, 3).unwrap(), constant);

        assert!(rank_filter_1d(&constant, 14, 3).is_err());
        assert!(rank_filter_1d(&constant, 15, 0).is_err());
        assert!(rank_filter_1d(&constant, 15, 16).is_err());
    }

    #[test]
    fn rank_filter_matches_sort_oracle() {
        let mut state = 42u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as f32 / (1u32 as f32).mul_add(2_147_483_648.0, 0.0)
        };
        let signal: Vec<f32> = (0..100).map(|_| next()).collect();
        let out = rank_filter_1d(&signal, 15, 3).unwrap();
        for x in 0..100i64 {
            let mut window: Vec<f32> = (0..15)
                .map(|o| signal[(x - 7 + o).clamp(0, 99) as usize])
                .collect();
            window.sort_by(|a, b| a.total_cmp(b));
            assert_eq!(out[x as usize], window[2], "position {x}");
        }
    }

    #[test]
    fn rank_median_equivalence() {
        let signal: Vec<f32> = (0..60).map(|i| ((i * 37) % 13) as f32).collect();
        let rank = rank_filter_1d(&signal, 7, 4).unwrap();
        for x in 0..60i64 {
            let mut window: Vec<f32> = (0..7)
                .map(|o| signal[(x - 3 + o).clamp(0, 59) as usize])
                .collect();
            window.sort_by(|a, b| a.total_cmp(b));
            // independent median: middle of the sorted 7-window
            assert_eq!(rank[x as usize], window[3]);
        }
    }

    #[test]
    fn contrast_mask_keeps_the_low_valued_retina() {
        let g = desk(4, 4, 4);
        // "retina" = lower half in depth, low filtered values
        let v = Volume::from_fn(g, VolumeKind::Angiography, |_, _, k| {
            if k < 2 {
                0.95
            } else {
                0.05
            }
        });
        let mask = build_contrast_mask(
            &v,
            &ValidityMask::all_valid(FastAxis::X, 4),
            &ProjectionConfig::default(),
        )
        .unwrap();
        for j in 0..4 {
            for i in 0..4 {
                for k in 0..4 {
                    let idx = (j * 4 + i) * 4 + k;
                    assert_eq!(mask.contrast[idx], k >= 2, "voxel ({i},{j},{k})");
                }
            }
        }
    }

    #[test]
    fn degenerate_percentiles_yield_empty_mask_and_flag() {
        let g = desk(4, 4, 4);
        let v = Volume::filled(g, VolumeKind::Angiography, 0.3);
        let mask = build_contrast_mask(
            &v,
            &ValidityMask::all_valid(FastAxis::X, 4),
            &ProjectionConfig::default(),
        )
        .unwrap();
        assert!(mask.degenerate_contrast);
        assert!(mask.contrast.iter().all(|&m| !m));
    }

    #[test]
    fn invalid_bscans_do_not_move_the_percentiles() {
        let g = desk(4, 4, 4);
        let base = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| {
            0.2 + 0.01 * (i + j + k) as f32
        });
        let mut spiked = base.clone();
        for i in 0..4 {
            for k in 0..4 {
                spiked.set(i, 2, k, 50.0);
            }
        }
        let mut validity = ValidityMask::all_valid(FastAxis::X, 4);
        validity.values[2] = 0.0;
        let cfg = ProjectionConfig::default();
        let m_base = build_contrast_mask(&base, &validity, &cfg).unwrap();
        let m_spiked = build_contrast_mask(&spiked, &validity, &cfg).unwrap();
        // masks agree everywhere outside the invalid B-scan
        for j in [0usize, 1, 3] {
            for i in 0..4 {
                for k in 0..4 {
                    let idx = (j * 4 + i) * 4 + k;
                    assert_eq!(m_base.contrast[idx], m_spiked.contrast[idx]);
                }
            }
        }
    }

    #[test]
    fn decorrelation_mask_follows_the_quantile() {
        let g = desk(4, 4, 4);
        let v = Volume::from_fn(g, VolumeKind::Structural, |_, j, _| {
            if j < 2 {
                1.0
            } else {
                5.0
            }
        });
        let mask = build_decorrelation_mask(&v, 0.55);
        for j in 0..4 {
            for i in 0..4 {
                for k in 0..4 {
                    let idx = (j * 4 + i) * 4 + k;
                    assert_eq!(mask[idx], j >= 2);
                }
            }
        }

        // constant volume: >= comparison keeps everything
        let c = Volume::filled(g, VolumeKind::Structural, 2.0);
        assert!(build_decorrelation_mask(&c, 0.55).iter().all(|&m| m));

        // single bright impulse with a quantile above the background fraction
        let mut imp = Volume::filled(g, VolumeKind::Structural, 1.0);
        imp.set(1, 1, 1, 10.0);
        let m = build_decorrelation_mask(&imp, 0.999);
        let idx = (4 + 1) * 4 + 1;
        for (q, &keep) in m.iter().enumerate() {
            assert_eq!(keep, q == idx);
        }
    }

    #[test]
    fn constant_projection_is_zero_after_median_subtraction() {
        let g = desk(4, 3, 4);
        let v = Volume::filled(g, VolumeKind::Angiography, 0.7);
        let masks = ProjectionMasks {
            contrast: vec![true; g.n_voxels()],
            decorrelation: vec![true; g.n_voxels()],
            degenerate_contrast: false,
        };
        let p = project_enface(&v, &masks, &ValidityMask::all_valid(FastAxis::X, 3)).unwrap();
        assert!(p.degenerate_range);
        assert!(p.image.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_projection_means_match_hand_arithmetic() {
        // 3 wide, 3 B-scans, 4 deep; mask keeps k in {1, 2}; row medians land
        // on the middle column by construction
        let g = desk(3, 3, 4);
        let v = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| {
            (0.125 * (i + 1) as f32) * (k as f32) + 0.0625 * j as f32
        });
        let keep = |k: usize| k == 1 || k == 2;
        let masks = ProjectionMasks {
            contrast: (0..g.n_voxels()).map(|q| keep(q % 4)).collect(),
            decorrelation: vec![true; g.n_voxels()],
            degenerate_contrast: false,
        };
        let p = project_enface(&v, &masks, &ValidityMask::all_valid(FastAxis::X, 3)).unwrap();
        // hand values: column mean over k=1,2 is 0.1875*(i+1) + 0.0625*j,
        // median subtraction removes the row middle (i=1), min-max maps
        // i=0 -> 0, i=2 -> 1 in every row
        for j in 0..3 {
            assert!((p.image.at(0, j) - 0.0).abs() < 1e-12);
            assert!((p.image.at(1, j) - 0.5).abs() < 1e-12);
            assert!((p.image.at(2, j) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_rows_copy_their_nearest_valid_neighbor() {
        let g = desk(3, 3, 4);
        let v = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| {
            (i + 2 * j + k) as f32 * 0.03
        });
        let masks = ProjectionMasks {
            contrast: vec![true; g.n_voxels()],
            decorrelation: vec![true; g.n_voxels()],
            degenerate_contrast: false,
        };
        let mut validity = ValidityMask::all_valid(FastAxis::X, 3);
        validity.values[1] = 0.0;
        let p = project_enface(&v, &masks, &validity).unwrap();
        for i in 0..3 {
            // tie between rows 0 and 2 resolves to the lower index
            assert_eq!(p.image.at(i, 1), p.image.at(i, 0));
        }
    }

    #[test]
    fn projection_is_invariant_to_positive_rescaling() {
        let g = desk(6, 6, 6);
        let v = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| {
            0.1 + 0.013 * ((i * 7 + j * 3 + k * 11) % 17) as f32
        });
        let scaled = Volume::from_fn(g, VolumeKind::Angiography, |i, j, k| 3.0 * v.at(i, j, k));
        let validity = ValidityMask::all_valid(FastAxis::X, 6);
        let cfg = ProjectionConfig::default();
        let struct_v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            ((i + j + k) % 5) as f32
        });
        let a = enface_from_volumes(&v, &struct_v, &validity, &cfg).unwrap();
        let b = enface_from_volumes(&scaled, &struct_v, &validity, &cfg).unwrap();
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
