//! Cubic Hermite interpolation with Catmull-Rom tangents.
//!
//! All resampling in the registration pipeline goes through this module:
//! 1-D signals (validity masks, A-scan columns), 2-D en-face images and 3-D
//! volumes. Tangents are central differences `t_i = (f_{i+1} - f_{i-1}) / 2`
//! in the interior and one-sided differences at the ends, which makes the
//! interpolant C¹ — the optimizer differentiates through every sample.
//!
//! Coordinates outside `[0, n-1]` clamp to the boundary value, so queries
//! past the edge return the edge sample and have zero derivative.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::volume::{EnFaceImage, Volume};

/// Interpolation weights of one 1-D query: four taps starting at `base`,
/// with value weights `w` and derivative weights `dw`.
///
/// Tap indices `base + t` must be clamped to `[0, n-1]` when reading; taps a
/// boundary cell does not use carry zero weight.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub base: isize,
    pub w: [f64; 4],
    pub dw: [f64; 4],
}

/// Hermite basis and its derivative at fractional position `t`.
#[inline]
fn hermite_basis(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let h = [
        2.0 * t3 - 3.0 * t2 + 1.0, // h00: value at left node
        t3 - 2.0 * t2 + t,         // h10: tangent at left node
        -2.0 * t3 + 3.0 * t2,      // h01: value at right node
        t3 - t2,                   // h11: tangent at right node
    ];
    let dh = [
        6.0 * t2 - 6.0 * t,
        3.0 * t2 - 4.0 * t + 1.0,
        -6.0 * t2 + 6.0 * t,
        3.0 * t2 - 2.0 * t,
    ];
    (h, dh)
}

/// Compute the four-tap stencil for coordinate `x` on a signal of length `n`.
pub fn taps(n: usize, x: f64) -> Taps {
    debug_assert!(n >= 2);
    let max = (n - 1) as f64;
    if x <= 0.0 {
        return Taps {
            base: -1,
            w: [0.0, 1.0, 0.0, 0.0],
            dw: [0.0; 4],
        };
    }
    if x >= max {
        return Taps {
            base: n as isize - 2,
            w: [0.0, 0.0, 1.0, 0.0],
            dw: [0.0; 4],
        };
    }
    let cell = (x.floor() as usize).min(n - 2);
    let t = x - cell as f64;
    let (h, dh) = hermite_basis(t);

    // taps are [cell-1, cell, cell+1, cell+2]
    let mut w = [0.0; 4];
    let mut dw = [0.0; 4];
    w[1] += h[0];
    w[2] += h[2];
    dw[1] += dh[0];
    dw[2] += dh[2];

    // left tangent: central difference, one-sided at the first node
    if cell == 0 {
        w[1] -= h[1];
        w[2] += h[1];
        dw[1] -= dh[1];
        dw[2] += dh[1];
    } else {
        w[0] -= 0.5 * h[1];
        w[2] += 0.5 * h[1];
        dw[0] -= 0.5 * dh[1];
        dw[2] += 0.5 * dh[1];
    }
    // right tangent: central difference, one-sided at the last node
    if cell + 1 == n - 1 {
        w[1] -= h[3];
        w[2] += h[3];
        dw[1] -= dh[3];
        dw[2] += dh[3];
    } else {
        w[1] -= 0.5 * h[3];
        w[3] += 0.5 * h[3];
        dw[1] -= 0.5 * dh[3];
        dw[3] += 0.5 * dh[3];
    }
    Taps {
        base: cell as isize - 1,
        w,
        dw,
    }
}

#[inline]
fn clamp_index(idx: isize, n: usize) -> usize {
    idx.clamp(0, n as isize - 1) as usize
}

/// Sample a 1-D signal at a continuous coordinate.
pub fn sample_1d(signal: &[f64], x: f64) -> Result<f64> {
    Ok(sample_1d_with_derivative(signal, x)?.0)
}

/// Sample a 1-D signal and its derivative with respect to `x`.
pub fn sample_1d_with_derivative(signal: &[f64], x: f64) -> Result<(f64, f64)> {
    let n = signal.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "interpolation needs at least 2 samples, got {n}"
        )));
    }
    let t = taps(n, x);
    let mut v = 0.0;
    let mut dv = 0.0;
    for (o, (&w, &dw)) in t.w.iter().zip(t.dw.iter()).enumerate() {
        let s = signal[clamp_index(t.base + o as isize, n)];
        v += w * s;
        dv += dw * s;
    }
    Ok((v, dv))
}

/// `sample_1d` over an `f32` slice (A-scan columns are stored as `f32`).
#[inline]
pub fn sample_1d_f32(signal: &[f32], x: f64) -> (f64, f64) {
    let n = signal.len();
    debug_assert!(n >= 2);
    let t = taps(n, x);
    let mut v = 0.0;
    let mut dv = 0.0;
    for (o, (&w, &dw)) in t.w.iter().zip(t.dw.iter()).enumerate() {
        let s = signal[clamp_index(t.base + o as isize, n)] as f64;
        v += w * s;
        dv += dw * s;
    }
    (v, dv)
}

/// Tri-cubic sample of a volume at a continuous position, voxel units.
pub fn sample_3d(volume: &Volume, x: f64, y: f64, z: f64) -> f64 {
    sample_3d_with_gradient(volume, x, y, z).0
}

/// Tri-cubic sample plus the partial derivatives `(∂x, ∂y, ∂z)`.
///
/// Separable evaluation: the 4×4 transverse stencil is contracted against
/// each of the four needed z-planes, then the axial stencil combines them.
pub fn sample_3d_with_gradient(volume: &Volume, x: f64, y: f64, z: f64) -> (f64, [f64; 3]) {
    let g = &volume.geometry;
    let tx = taps(g.width, x);
    let ty = taps(g.height, y);
    let tz = taps(g.depth, z);

    let mut plane = [0.0f64; 4];
    let mut plane_dx = [0.0f64; 4];
    let mut plane_dy = [0.0f64; 4];
    for (b, (&wy, &dwy)) in ty.w.iter().zip(ty.dw.iter()).enumerate() {
        if wy == 0.0 && dwy == 0.0 {
            continue;
        }
        let j = clamp_index(ty.base + b as isize, g.height);
        for (a, (&wx, &dwx)) in tx.w.iter().zip(tx.dw.iter()).enumerate() {
            if wx == 0.0 && dwx == 0.0 {
                continue;
            }
            let i = clamp_index(tx.base + a as isize, g.width);
            let col = volume.ascan(i, j);
            for (c, p) in plane.iter_mut().enumerate() {
                let s = col[clamp_index(tz.base + c as isize, g.depth)] as f64;
                *p += wx * wy * s;
                plane_dx[c] += dwx * wy * s;
                plane_dy[c] += wx * dwy * s;
            }
        }
    }

    let mut v = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    let mut dz = 0.0;
    for c in 0..4 {
        v += tz.w[c] * plane[c];
        dz += tz.dw[c] * plane[c];
        dx += tz.w[c] * plane_dx[c];
        dy += tz.w[c] * plane_dy[c];
    }
    (v, [dx, dy, dz])
}

/// Bicubic sample of an en-face image plus `(∂x, ∂y)`.
pub fn sample_2d_with_gradient(image: &EnFaceImage, x: f64, y: f64) -> (f64, [f64; 2]) {
    let tx = taps(image.width, x);
    let ty = taps(image.height, y);
    let mut v = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (b, (&wy, &dwy)) in ty.w.iter().zip(ty.dw.iter()).enumerate() {
        if wy == 0.0 && dwy == 0.0 {
            continue;
        }
        let j = clamp_index(ty.base + b as isize, image.height);
        let row = image.row(j);
        for (a, (&wx, &dwx)) in tx.w.iter().zip(tx.dw.iter()).enumerate() {
            let i = clamp_index(tx.base + a as isize, image.width);
            let s = row[i];
            v += wx * wy * s;
            dx += dwx * wy * s;
            dy += wx * dwy * s;
        }
    }
    (v, [dx, dy])
}

pub fn sample_2d(image: &EnFaceImage, x: f64, y: f64) -> f64 {
    sample_2d_with_gradient(image, x, y).0
}

/// Resample a volume onto the motion-corrected grid.
///
/// Output voxel `(i, j, k)` samples the input at
/// `(i + dx_ij, j + dy_ij, k + dz_ij)`. The field must live on the volume's
/// transverse grid. Parallel over A-scans; the output does not depend on the
/// thread count.
pub fn resample_volume(volume: &Volume, field: &DisplacementField) -> Result<Volume> {
    let g = volume.geometry;
    if !field.matches_transverse(&g) {
        return Err(Error::GeometryMismatch(format!(
            "field {}x{} vs volume {}x{}",
            field.width, field.height, g.width, g.height
        )));
    }
    let mut out = Volume::zeros(g, volume.kind);
    out.data_mut()
        .par_chunks_mut(g.depth)
        .enumerate()
        .for_each(|(a, ascan)| {
            let i = a % g.width;
            let j = a / g.width;
            let [dx, dy, dz] = field.at(i, j);
            let x = i as f64 + dx;
            let y = j as f64 + dy;
            for (k, v) in ascan.iter_mut().enumerate() {
                *v = sample_3d(volume, x, y, k as f64 + dz) as f32;
            }
        });
    Ok(out)
}
