//! Displacement regularizers.

use crate::field::DisplacementField;
use crate::geom::FastAxis;

use super::{pseudo_huber_with_derivative, ObjectiveConfig};

/// Scan-pattern smoothness penalty.
///
/// Sums a pseudo-Huber cost over displacement differences between A-scans
/// that are adjacent along each scan's fast axis, plus the same along the
/// slow axis scaled by the flyback weight (consecutive B-scans are separated
/// by the flyback interval and may legitimately differ more). Gradients are
/// accumulated into per-A-scan 3-vectors laid out like the field.
pub fn smoothness_penalty(
    field: &DisplacementField,
    cfg: &ObjectiveConfig,
    grad: Option<&mut [f64]>,
) -> f64 {
    let (w, h) = (field.width, field.height);
    let eps = cfg.smoothness_eps;
    let (fast_is_x, beta) = match field.scan {
        FastAxis::X => (true, cfg.flyback_weight),
        FastAxis::Y => (false, cfg.flyback_weight),
    };
    let mut total = 0.0;
    let mut sink = grad;
    let mut pair = |a: usize, b: usize, weight: f64, sink: &mut Option<&mut [f64]>| {
        let va = field.vectors()[a];
        let vb = field.vectors()[b];
        for c in 0..3 {
            let (l, dl) = pseudo_huber_with_derivative(va[c] - vb[c], eps);
            total += weight * l;
            if let Some(g) = sink {
                g[a * 3 + c] += weight * dl;
                g[b * 3 + c] -= weight * dl;
            }
        }
    };
    // pairs along x
    let wx = if fast_is_x { 1.0 } else { beta };
    for j in 0..h {
        for i in 0..w - 1 {
            pair(j * w + i, j * w + i + 1, wx, &mut sink);
        }
    }
    // pairs along y
    let wy = if fast_is_x { beta } else { 1.0 };
    for j in 0..h - 1 {
        for i in 0..w {
            pair(j * w + i, (j + 1) * w + i, wy, &mut sink);
        }
    }
    total
}

/// Summed-displacement penalty `μ·Σ_c (Σ_{V,ij} d_c)²`.
///
/// Zero exactly when each component's grand total over both fields vanishes;
/// this pins the translation that the data term cannot see.
pub fn mean_shift_penalty(
    field_x: &DisplacementField,
    field_y: &DisplacementField,
    weight: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let mut sums = [0.0f64; 3];
    for v in field_x.vectors().iter().chain(field_y.vectors()) {
        for c in 0..3 {
            sums[c] += v[c];
        }
    }
    let value = weight * sums.iter().map(|s| s * s).sum::<f64>();
    if let Some((gx, gy)) = grads {
        for c in 0..3 {
            let d = 2.0 * weight * sums[c];
            for g in gx[c..].iter_mut().step_by(3) {
                *g += d;
            }
            for g in gy[c..].iter_mut().step_by(3) {
                *g += d;
            }
        }
    }
    value
}

/// Stage-1 tilt normalization `τ·(Σ_{V,b} s_b)²` over the per-B-scan slopes.
///
/// Splits tilt symmetrically between the two volumes instead of letting both
/// follow whichever scan happens to dominate.
pub fn tilt_penalty(
    slopes_x: &[f64],
    slopes_y: &[f64],
    weight: f64,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let sum: f64 = slopes_x.iter().chain(slopes_y).sum();
    if let Some((gx, gy)) = grads {
        let d = 2.0 * weight * sum;
        for g in gx.iter_mut() {
            *g += d;
        }
        for g in gy.iter_mut() {
            *g += d;
        }
    }
    weight * sum * sum
}
