//! Joint multi-boundary layer segmentation.
//!
//! Each B-scan becomes a graph whose nodes are depth tuples
//! `z₁ < … < z_n` satisfying per-pair minimum/maximum distance constraints;
//! a path visits one node per column, each boundary moving by at most one
//! voxel between columns. Node costs come from sign-selected axial
//! gradients, `exp(−max(0, g))`, so strong edges of the expected polarity
//! are cheap. The shortest path assigns every boundary exactly one position
//! per A-scan, and thickness priors live directly in the node set instead
//! of a post-hoc cleanup.
//!
//! Ties resolve toward smaller depth tuples, so a featureless image yields
//! the minimal feasible tuple on every column.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

use super::features::{gaussian_blur_1d, gaussian_blur_image};
use super::{LayerBoundary, LayerSet};

/// Expected intensity transition across a boundary (in +z direction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientPolarity {
    DarkToBright,
    BrightToDark,
}

/// One boundary of a joint segmentation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub polarity: GradientPolarity,
    /// Minimum distance to the previous boundary (ignored for the first).
    pub min_gap: usize,
    /// Maximum distance to the previous boundary (ignored for the first).
    pub max_gap: usize,
}

impl BoundarySpec {
    pub fn first(polarity: GradientPolarity) -> Self {
        Self {
            polarity,
            min_gap: 0,
            max_gap: 0,
        }
    }

    pub fn below(polarity: GradientPolarity, min_gap: usize, max_gap: usize) -> Self {
        Self {
            polarity,
            min_gap,
            max_gap,
        }
    }
}

/// One B-scan as a column-major cost image: `cost[b][x][z]`.
struct CostImage {
    n_cols: usize,
    depth: usize,
    /// per boundary, per column, per depth
    costs: Vec<Vec<f64>>,
}

fn build_costs(bscan: &[Vec<f32>], specs: &[BoundarySpec]) -> CostImage {
    let n_cols = bscan.len();
    let depth = bscan[0].len();
    let costs = specs
        .iter()
        .map(|spec| {
            let sign = match spec.polarity {
                GradientPolarity::DarkToBright => 1.0,
                GradientPolarity::BrightToDark => -1.0,
            };
            let mut c = vec![f64::INFINITY; n_cols * depth];
            for (x, col) in bscan.iter().enumerate() {
                // backward difference: the boundary sits on the first voxel
                // of the new layer
                for z in 1..depth - 1 {
                    let g = sign * (col[z] as f64 - col[z - 1] as f64);
                    c[x * depth + z] = (-g.max(0.0)).exp();
                }
            }
            c
        })
        .collect();
    CostImage {
        n_cols,
        depth,
        costs,
    }
}

/// Enumerate feasible tuples in lexicographic order.
fn feasible_tuples(depth: usize, specs: &[BoundarySpec]) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    let mut stack: Vec<u16> = Vec::with_capacity(specs.len());
    fn recurse(
        depth: usize,
        specs: &[BoundarySpec],
        stack: &mut Vec<u16>,
        out: &mut Vec<Vec<u16>>,
    ) {
        let b = stack.len();
        if b == specs.len() {
            out.push(stack.clone());
            return;
        }
        // gradient support needs z in [1, depth-2]
        let (lo, hi) = if b == 0 {
            (1usize, depth - 2)
        } else {
            let prev = *stack.last().unwrap() as usize;
            (
                prev + specs[b].min_gap.max(1),
                (prev + specs[b].max_gap).min(depth - 2),
            )
        };
        for z in lo..=hi.min(depth - 2) {
            stack.push(z as u16);
            recurse(depth, specs, stack, out);
            stack.pop();
        }
    }
    recurse(depth, specs, &mut stack, &mut out);
    out
}

fn tuple_cost(cost: &CostImage, tuple: &[u16], x: usize) -> f64 {
    tuple
        .iter()
        .enumerate()
        .map(|(b, &z)| cost.costs[b][x * cost.depth + z as usize])
        .sum()
}

/// Shortest tuple path across one B-scan. Returns per-boundary positions.
fn solve_bscan(bscan: &[Vec<f32>], specs: &[BoundarySpec]) -> Result<Vec<Vec<f64>>> {
    let depth = bscan[0].len();
    if depth < 3 {
        return Err(Error::InvalidInput("segmentation needs depth >= 3".into()));
    }
    let cost = build_costs(bscan, specs);
    let tuples = feasible_tuples(depth, specs);
    if tuples.is_empty() {
        return Err(Error::InvalidInput(
            "distance constraints admit no feasible boundary tuple".into(),
        ));
    }
    let index: HashMap<&[u16], u32> = tuples
        .iter()
        .enumerate()
        .map(|(q, t)| (t.as_slice(), q as u32))
        .collect();
    let n_states = tuples.len();
    let n_cols = cost.n_cols;
    let n_b = specs.len();

    let mut dist: Vec<f64> = tuples.iter().map(|t| tuple_cost(&cost, t, 0)).collect();
    let mut pred: Vec<Vec<u32>> = Vec::with_capacity(n_cols.saturating_sub(1));
    let mut deltas: Vec<Vec<i32>> = Vec::new();
    {
        // all {-1, 0, +1}^n delta vectors in lexicographic order of the
        // resulting predecessor tuple
        let mut d = vec![-1i32; n_b];
        loop {
            deltas.push(d.clone());
            let mut q = n_b;
            loop {
                if q == 0 {
                    break;
                }
                q -= 1;
                if d[q] < 1 {
                    d[q] += 1;
                    for dv in d.iter_mut().skip(q + 1) {
                        *dv = -1;
                    }
                    break;
                }
            }
            if d.iter().all(|&v| v == 1) {
                deltas.push(d.clone());
                break;
            }
            if q == 0 && d[0] == 1 && d.iter().skip(1).all(|&v| v == -1) && n_b == 1 {
                // handled by the general loop; nothing special
            }
        }
        deltas.dedup();
    }

    let mut candidate = vec![0u16; n_b];
    for x in 1..n_cols {
        let mut next = vec![f64::INFINITY; n_states];
        let mut back = vec![u32::MAX; n_states];
        for (s, tuple) in tuples.iter().enumerate() {
            let node = tuple_cost(&cost, tuple, x);
            if !node.is_finite() {
                continue;
            }
            let mut best = f64::INFINITY;
            let mut best_pred = u32::MAX;
            'delta: for d in &deltas {
                for b in 0..n_b {
                    let z = tuple[b] as i64 + d[b] as i64;
                    if z < 1 || z > depth as i64 - 2 {
                        continue 'delta;
                    }
                    candidate[b] = z as u16;
                }
                if let Some(&p) = index.get(candidate.as_slice()) {
                    let total = dist[p as usize];
                    if total < best {
                        best = total;
                        best_pred = p;
                    }
                }
            }
            if best_pred != u32::MAX {
                next[s] = best + node;
                back[s] = best_pred;
            }
        }
        dist = next;
        pred.push(back);
    }

    // lexicographically earliest argmin at the final column
    let mut final_state = usize::MAX;
    let mut best = f64::INFINITY;
    for (s, &v) in dist.iter().enumerate() {
        if v < best {
            best = v;
            final_state = s;
        }
    }
    if final_state == usize::MAX {
        return Err(Error::InvalidInput(
            "no feasible path through the boundary graph".into(),
        ));
    }
    let mut states = vec![0u32; n_cols];
    states[n_cols - 1] = final_state as u32;
    for x in (1..n_cols).rev() {
        states[x - 1] = pred[x - 1][states[x] as usize];
    }
    let mut out = vec![vec![0.0f64; n_cols]; n_b];
    for (x, &s) in states.iter().enumerate() {
        for b in 0..n_b {
            out[b][x] = tuples[s as usize][b] as f64;
        }
    }
    Ok(out)
}

/// Joint segmentation of `specs` boundaries on every B-scan of a volume.
///
/// Returns per-boundary position arrays laid out like the transverse grid.
pub fn segment_layers(volume: &Volume, specs: &[BoundarySpec]) -> Result<Vec<Vec<f64>>> {
    if specs.is_empty() {
        return Err(Error::InvalidInput("at least one boundary spec required".into()));
    }
    let g = volume.geometry;
    let n_b = g.n_bscans();
    let per_bscan: Vec<Result<Vec<Vec<f64>>>> = (0..n_b)
        .into_par_iter()
        .map(|b| {
            let cols: Vec<Vec<f32>> = volume.bscan_ascans(b).map(|a| a.to_vec()).collect();
            solve_bscan(&cols, specs)
        })
        .collect();
    let mut out = vec![vec![0.0f64; g.n_ascans()]; specs.len()];
    for (b, solved) in per_bscan.into_iter().enumerate() {
        let solved = solved?;
        for f in 0..g.bscan_len() {
            let (i, j) = g.ascan_at(b, f);
            for (bd, positions) in solved.iter().enumerate() {
                out[bd][j * g.width + i] = positions[f];
            }
        }
    }
    Ok(out)
}

/// Configuration of the full retina segmentation pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetinaSegConfig {
    /// Axial blur before coarse subsampling.
    pub coarse_blur_sigma: f64,
    /// Axial subsampling factor of the coarse pass.
    pub coarse_factor: usize,
    /// Transverse Gaussian smoothing of the coarse estimates (A-scans).
    pub smooth_sigma: f64,
    /// ILM to posterior RPE distance bounds (full-resolution voxels).
    pub ilm_rpe_gap: (usize, usize),
    /// EZ to posterior RPE distance bounds.
    pub ez_rpe_gap: (usize, usize),
    /// EZ to OS-RPE distance bounds.
    pub ez_os_rpe_gap: (usize, usize),
    /// Half-height of the search band around flattened estimates.
    pub band: usize,
}

impl Default for RetinaSegConfig {
    fn default() -> Self {
        Self {
            coarse_blur_sigma: 2.0,
            coarse_factor: 5,
            smooth_sigma: 8.0,
            ilm_rpe_gap: (20, 150),
            ez_rpe_gap: (2, 30),
            ez_os_rpe_gap: (2, 30),
            band: 30,
        }
    }
}

impl RetinaSegConfig {
    /// Bounds scaled for desk-size phantoms.
    pub fn scaled_for_depth(depth: usize) -> Self {
        let d = depth as f64;
        let scale = (d / 465.0).max(0.06);
        let gap = |lo: f64, hi: f64| -> (usize, usize) {
            (((lo * scale).round() as usize).max(2), ((hi * scale).round() as usize).max(4))
        };
        Self {
            coarse_blur_sigma: 1.0,
            coarse_factor: if depth >= 100 { 5 } else { 2 },
            smooth_sigma: 4.0,
            ilm_rpe_gap: gap(140.0, 420.0),
            ez_rpe_gap: gap(14.0, 180.0),
            ez_os_rpe_gap: gap(14.0, 140.0),
            band: ((depth as f64 * 0.25) as usize).max(6),
        }
    }
}

fn axial_blur_and_subsample(volume: &Volume, sigma: f64, factor: usize) -> Volume {
    let g = volume.geometry;
    let coarse_depth = g.depth.div_ceil(factor).max(3);
    let hg = crate::geom::GridGeometry {
        depth: coarse_depth,
        ..g
    };
    let mut out = Volume::zeros(hg, volume.kind);
    for j in 0..g.height {
        for i in 0..g.width {
            let col: Vec<f64> = volume.ascan(i, j).iter().map(|&v| v as f64).collect();
            let blurred = gaussian_blur_1d(&col, sigma);
            let dst = out.ascan_mut(i, j);
            for (m, v) in dst.iter_mut().enumerate() {
                *v = blurred[(m * factor).min(g.depth - 1)] as f32;
            }
        }
    }
    out
}

/// Shift every A-scan so that `reference` lands on a constant depth.
///
/// Returns the flattened volume and the integer per-A-scan shift that must
/// be added to flattened positions to undo the flattening.
fn flatten(volume: &Volume, reference: &[f64]) -> (Volume, Vec<i64>) {
    let g = volume.geometry;
    let mut sorted: Vec<f64> = reference.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let target = sorted[sorted.len() / 2];
    let shifts: Vec<i64> = reference
        .iter()
        .map(|&r| (r - target).round() as i64)
        .collect();
    let mut out = Volume::zeros(g, volume.kind);
    for j in 0..g.height {
        for i in 0..g.width {
            let s = shifts[j * g.width + i];
            let src = volume.ascan(i, j);
            let col: Vec<f32> = (0..g.depth)
                .map(|k| src[(k as i64 + s).clamp(0, g.depth as i64 - 1) as usize])
                .collect();
            out.ascan_mut(i, j).copy_from_slice(&col);
        }
    }
    (out, shifts)
}

fn smooth_map(positions: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let img = crate::volume::EnFaceImage::new(width, height, positions.to_vec())
        .expect("position map matches grid");
    gaussian_blur_image(&img, sigma).data().to_vec()
}

/// Restrict a volume's cost support to a band around per-A-scan estimates
/// by masking values outside the band to a constant (flat gradient).
fn banded(volume: &Volume, center: &[f64], half: usize) -> Volume {
    let g = volume.geometry;
    let mut out = volume.clone();
    for j in 0..g.height {
        for i in 0..g.width {
            let c = center[j * g.width + i];
            let lo = (c - half as f64).floor().max(0.0) as usize;
            let hi = (c + half as f64).ceil().min(g.depth as f64 - 1.0) as usize;
            let col = out.ascan_mut(i, j);
            let fill_lo = col[lo];
            for v in col[..lo].iter_mut() {
                *v = fill_lo;
            }
            let fill_hi = col[hi];
            for v in col[hi + 1..].iter_mut() {
                *v = fill_hi;
            }
        }
    }
    out
}

/// Full retina segmentation: ILM, EZ, OS-RPE and posterior RPE.
///
/// Coarse joint ILM + RPE on axially blurred and subsampled data, Gaussian
/// smoothing of the estimates, flattening to the smooth RPE, joint EZ +
/// posterior RPE refinement at full resolution, then EZ + OS-RPE; the ILM
/// is refined on an ILM-flattened volume; finally all positions are
/// shifted back to the unflattened frame.
pub fn segment_retina(structural: &Volume, cfg: &RetinaSegConfig) -> Result<LayerSet> {
    let g = structural.geometry;
    let (w, h) = (g.width, g.height);
    let factor = cfg.coarse_factor.max(1);

    // coarse joint ILM + posterior RPE
    let coarse = axial_blur_and_subsample(structural, cfg.coarse_blur_sigma, factor);
    let coarse_gap = (
        (cfg.ilm_rpe_gap.0 / factor).max(1),
        (cfg.ilm_rpe_gap.1 / factor).max(2),
    );
    let coarse_specs = [
        BoundarySpec::first(GradientPolarity::DarkToBright),
        BoundarySpec::below(GradientPolarity::BrightToDark, coarse_gap.0, coarse_gap.1),
    ];
    let coarse_layers = segment_layers(&coarse, &coarse_specs)?;
    let ilm_estimate: Vec<f64> = coarse_layers[0].iter().map(|z| z * factor as f64).collect();
    let rpe_estimate: Vec<f64> = coarse_layers[1].iter().map(|z| z * factor as f64).collect();
    let ilm_smooth = smooth_map(&ilm_estimate, w, h, cfg.smooth_sigma);
    let rpe_smooth = smooth_map(&rpe_estimate, w, h, cfg.smooth_sigma);

    // flatten to the smooth RPE and refine the outer boundaries
    let (flat_rpe, rpe_shifts) = flatten(structural, &rpe_smooth);
    let rpe_flat_center: Vec<f64> = rpe_smooth
        .iter()
        .zip(&rpe_shifts)
        .map(|(z, s)| z - *s as f64)
        .collect();
    let flat_banded = banded(&flat_rpe, &rpe_flat_center, cfg.band);

    let ez_rpe_specs = [
        BoundarySpec::first(GradientPolarity::DarkToBright),
        BoundarySpec::below(GradientPolarity::BrightToDark, cfg.ez_rpe_gap.0, cfg.ez_rpe_gap.1),
    ];
    let ez_rpe = segment_layers(&flat_banded, &ez_rpe_specs)?;
    let rpe_final: Vec<f64> = ez_rpe[1]
        .iter()
        .zip(&rpe_shifts)
        .map(|(z, s)| z + *s as f64)
        .collect();

    let ez_os_specs = [
        BoundarySpec::first(GradientPolarity::DarkToBright),
        BoundarySpec::below(
            GradientPolarity::BrightToDark,
            cfg.ez_os_rpe_gap.0,
            cfg.ez_os_rpe_gap.1,
        ),
    ];
    let ez_os = segment_layers(&flat_banded, &ez_os_specs)?;
    let ez_final: Vec<f64> = ez_os[0]
        .iter()
        .zip(&rpe_shifts)
        .map(|(z, s)| z + *s as f64)
        .collect();
    let os_rpe_final: Vec<f64> = ez_os[1]
        .iter()
        .zip(&rpe_shifts)
        .map(|(z, s)| z + *s as f64)
        .collect();

    // refine the ILM on an ILM-flattened volume
    let (flat_ilm, ilm_shifts) = flatten(structural, &ilm_smooth);
    let ilm_flat_center: Vec<f64> = ilm_smooth
        .iter()
        .zip(&ilm_shifts)
        .map(|(z, s)| z - *s as f64)
        .collect();
    let ilm_banded = banded(&flat_ilm, &ilm_flat_center, cfg.band);
    let ilm_specs = [BoundarySpec::first(GradientPolarity::DarkToBright)];
    let ilm = segment_layers(&ilm_banded, &ilm_specs)?;
    let ilm_final: Vec<f64> = ilm[0]
        .iter()
        .zip(&ilm_shifts)
        .map(|(z, s)| z + *s as f64)
        .collect();

    let mut out = LayerSet::new(w, h);
    out.insert(LayerBoundary::Ilm, ilm_final);
    out.insert(LayerBoundary::Ez, ez_final);
    out.insert(LayerBoundary::OsRpe, os_rpe_final);
    out.insert(LayerBoundary::PosteriorRpe, rpe_final);
    Ok(out)
}
