//! Structural and angiographic similarity terms.
//!
//! Both terms share the per-A-scan validity weight
//! `δ_ij = δ₀·ṽX_ij·ṽY_ij`, where each `ṽ` interpolates the scan's 1-D
//! B-scan validity mask at the displaced slow-axis coordinate. The
//! structural term weights A-scans by `1 − δ`, the angiographic term by
//! `δ`, so saturated OCTA data fades out of the en-face comparison and the
//! volumetric comparison takes over there.
//!
//! Displacements are stored in full-resolution voxel units; at pyramid level
//! `L` every sampling coordinate and every positional derivative is scaled
//! by `2^-L`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::geom::GridGeometry;
use crate::interp::{sample_1d_with_derivative, sample_2d_with_gradient, taps};
use crate::preprocess::ValidityMask;
use crate::volume::{EnFaceImage, Volume};

use super::pseudo_huber_with_derivative;

/// Everything the data terms need at one pyramid level.
#[derive(Debug, Clone, Copy)]
pub struct LevelData<'a> {
    /// Downsampling exponent: geometry is the full grid halved `level` times.
    pub level: usize,
    pub structural_x: &'a Volume,
    pub structural_y: &'a Volume,
    pub enface_x: &'a EnFaceImage,
    pub enface_y: &'a EnFaceImage,
    /// Validity of the X-fast scan, indexed by row `j`.
    pub validity_x: &'a ValidityMask,
    /// Validity of the Y-fast scan, indexed by column `i`.
    pub validity_y: &'a ValidityMask,
}

impl<'a> LevelData<'a> {
    pub fn geometry(&self) -> &GridGeometry {
        &self.structural_x.geometry
    }

    /// Conversion from full-resolution displacement units to this level's
    /// voxel units.
    pub fn inv_scale(&self) -> f64 {
        1.0 / (1u64 << self.level) as f64
    }

    pub fn check(&self) -> Result<()> {
        let g = self.geometry();
        let gy = &self.structural_y.geometry;
        if g.width != gy.width || g.height != gy.height || g.depth != gy.depth {
            return Err(Error::GeometryMismatch("structural volumes differ in shape".into()));
        }
        if self.enface_x.width != g.width
            || self.enface_x.height != g.height
            || !self.enface_x.same_shape(self.enface_y)
        {
            return Err(Error::GeometryMismatch("en-face images do not match the grid".into()));
        }
        if self.validity_x.len() != g.height || self.validity_y.len() != g.width {
            return Err(Error::GeometryMismatch("validity masks do not match the grid".into()));
        }
        Ok(())
    }
}

/// Values of the two data terms (no η applied).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTerms {
    pub structural: f64,
    pub angiographic: f64,
}

/// Geometric-mean normalization `η = √(S_ang / S_str)`.
///
/// Evaluated once per level at the initial displacements with δ = 0.5 so the
/// two terms enter the combined similarity with equal weight; callers fall
/// back to `η = 1` when a term degenerates to zero.
pub fn compute_eta(s_str: f64, s_ang: f64) -> Result<f64> {
    if !(s_str > 0.0) || !(s_ang > 0.0) {
        return Err(Error::Degenerate(format!(
            "similarity terms must be positive for normalization (str {s_str}, ang {s_ang})"
        )));
    }
    Ok((s_ang / s_str).sqrt())
}

/// `δ_ij = δ₀·ṽX·ṽY`.
#[inline]
pub fn delta_weight(v_x: f64, v_y: f64, delta0: f64) -> f64 {
    delta0 * v_x * v_y
}

/// Interpolate a validity mask at a displaced slow-axis coordinate.
///
/// Returns the value clamped to `[0, 1]` and its derivative with respect to
/// the coordinate (zero where the clamp is active).
pub fn validity_resample(mask: &ValidityMask, coordinate: f64) -> (f64, f64) {
    let (raw, d) = sample_1d_with_derivative(&mask.values, coordinate)
        .expect("validity masks have at least 2 entries");
    if raw <= 0.0 {
        (0.0, 0.0)
    } else if raw >= 1.0 {
        (1.0, 0.0)
    } else {
        (raw, d)
    }
}

/// Structural residual at one voxel of the corrected grid (level units).
pub fn residual_at(
    data: &LevelData,
    fx: &DisplacementField,
    fy: &DisplacementField,
    i: usize,
    j: usize,
    k: usize,
) -> f64 {
    let s = data.inv_scale();
    let dx = fx.at(i, j);
    let dy = fy.at(i, j);
    let vx = crate::interp::sample_3d(
        data.structural_x,
        i as f64 + dx[0] * s,
        j as f64 + dx[1] * s,
        k as f64 + dx[2] * s,
    );
    let vy = crate::interp::sample_3d(
        data.structural_y,
        i as f64 + dy[0] * s,
        j as f64 + dy[1] * s,
        k as f64 + dy[2] * s,
    );
    vx - vy
}

#[inline]
fn clamp_idx(idx: isize, n: usize) -> usize {
    idx.clamp(0, n as isize - 1) as usize
}

/// Transverse contraction of a volume around `(x, y)`: for every z-plane
/// `m`, the bicubic value `g[m]` and its x/y derivatives, so the axial pass
/// only needs the four planes around each sample depth.
struct ContractedColumn {
    g: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
}

fn contract_column(volume: &Volume, x: f64, y: f64, buf: &mut ContractedColumn) {
    let geo = &volume.geometry;
    let d = geo.depth;
    buf.g.clear();
    buf.g.resize(d, 0.0);
    buf.gx.clear();
    buf.gx.resize(d, 0.0);
    buf.gy.clear();
    buf.gy.resize(d, 0.0);
    let tx = taps(geo.width, x);
    let ty = taps(geo.height, y);
    for (b, (&wy, &dwy)) in ty.w.iter().zip(ty.dw.iter()).enumerate() {
        if wy == 0.0 && dwy == 0.0 {
            continue;
        }
        let j = clamp_idx(ty.base + b as isize, geo.height);
        for (a, (&wx, &dwx)) in tx.w.iter().zip(tx.dw.iter()).enumerate() {
            if wx == 0.0 && dwx == 0.0 {
                continue;
            }
            let i = clamp_idx(tx.base + a as isize, geo.width);
            let col = volume.ascan(i, j);
            let w = wx * wy;
            let wdx = dwx * wy;
            let wdy = wx * dwy;
            for m in 0..d {
                let v = col[m] as f64;
                buf.g[m] += w * v;
                buf.gx[m] += wdx * v;
                buf.gy[m] += wdy * v;
            }
        }
    }
}

/// Per-A-scan output of the data-term worker.
#[derive(Default, Clone, Copy)]
struct AscanContribution {
    objective: f64,
    grad_x: [f64; 3],
    grad_y: [f64; 3],
    s_str: f64,
    s_ang: f64,
}

/// Evaluate the combined stage-2 data term over one A-scan.
#[allow(clippy::too_many_arguments)]
fn eval_ascan(
    data: &LevelData,
    fx: &DisplacementField,
    fy: &DisplacementField,
    delta0: f64,
    eta: f64,
    huber_eps: f64,
    with_grad: bool,
    i: usize,
    j: usize,
    bufs: &mut (ContractedColumn, ContractedColumn),
) -> AscanContribution {
    let g = data.geometry();
    let s = data.inv_scale();
    let d = g.depth;
    let dx = fx.at(i, j);
    let dy = fy.at(i, j);
    let (px, py) = (i as f64 + dx[0] * s, j as f64 + dx[1] * s);
    let (qx, qy) = (i as f64 + dy[0] * s, j as f64 + dy[1] * s);

    // validities interpolate along each scan's slow axis
    let (vx, dvx) = validity_resample(data.validity_x, j as f64 + dx[1] * s);
    let (vy, dvy) = validity_resample(data.validity_y, i as f64 + dy[0] * s);
    let delta = delta_weight(vx, vy, delta0);

    // structural: axial sweep over the transversely contracted columns
    let (bx, by) = bufs;
    contract_column(data.structural_x, px, py, bx);
    contract_column(data.structural_y, qx, qy, by);
    let mut e_sum = 0.0;
    let mut ge_x = [0.0f64; 3];
    let mut ge_y = [0.0f64; 3];
    for k in 0..d {
        let tz_x = taps(d, k as f64 + dx[2] * s);
        let tz_y = taps(d, k as f64 + dy[2] * s);
        let mut val_x = 0.0;
        let mut grad_x = [0.0f64; 3];
        for (c, (&w, &dw)) in tz_x.w.iter().zip(tz_x.dw.iter()).enumerate() {
            let m = clamp_idx(tz_x.base + c as isize, d);
            val_x += w * bx.g[m];
            grad_x[0] += w * bx.gx[m];
            grad_x[1] += w * bx.gy[m];
            grad_x[2] += dw * bx.g[m];
        }
        let mut val_y = 0.0;
        let mut grad_y = [0.0f64; 3];
        for (c, (&w, &dw)) in tz_y.w.iter().zip(tz_y.dw.iter()).enumerate() {
            let m = clamp_idx(tz_y.base + c as isize, d);
            val_y += w * by.g[m];
            grad_y[0] += w * by.gx[m];
            grad_y[1] += w * by.gy[m];
            grad_y[2] += dw * by.g[m];
        }
        let (l, dl) = pseudo_huber_with_derivative(val_x - val_y, huber_eps);
        e_sum += l;
        if with_grad {
            for c in 0..3 {
                ge_x[c] += dl * grad_x[c];
                ge_y[c] -= dl * grad_y[c];
            }
        }
    }

    // angiographic: 2-D samples of the en-face images
    let (ax, agx) = sample_2d_with_gradient(data.enface_x, px, py);
    let (ay, agy) = sample_2d_with_gradient(data.enface_y, qx, qy);
    let (l_ang, dl_ang) = pseudo_huber_with_derivative(ax - ay, huber_eps);
    let f_ang = d as f64 * l_ang;

    let mut out = AscanContribution {
        objective: eta * (1.0 - delta) * e_sum + (1.0 / eta) * delta * f_ang,
        s_str: (1.0 - delta) * e_sum,
        s_ang: delta * f_ang,
        ..Default::default()
    };
    if with_grad {
        let w_str = eta * (1.0 - delta);
        let w_ang = (1.0 / eta) * delta * d as f64 * dl_ang;
        for c in 0..3 {
            out.grad_x[c] = w_str * ge_x[c] * s;
            out.grad_y[c] = w_str * ge_y[c] * s;
        }
        out.grad_x[0] += w_ang * agx[0] * s;
        out.grad_x[1] += w_ang * agx[1] * s;
        out.grad_y[0] -= w_ang * agy[0] * s;
        out.grad_y[1] -= w_ang * agy[1] * s;
        // the validity weight itself depends on one displacement component
        // per scan: d(combined)/dδ = f_ang/η − e_sum·η
        let ddelta = f_ang / eta - e_sum * eta;
        out.grad_x[1] += ddelta * delta0 * vy * dvx * s;
        out.grad_y[0] += ddelta * delta0 * vx * dvy * s;
    }
    out
}

/// Combined stage-2 data term `η·S_str + (1/η)·S_ang` with gradients.
///
/// Parallel over rows with a fixed-order reduction; the result is
/// bit-identical for any thread count. Gradient layout matches the stage-2
/// parameter vector: X field first, then Y, 3 components per A-scan, `i`
/// fastest.
pub fn combined_similarity(
    data: &LevelData,
    fx: &DisplacementField,
    fy: &DisplacementField,
    delta0: f64,
    eta: f64,
    huber_eps: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<(f64, SimilarityTerms)> {
    data.check()?;
    let g = *data.geometry();
    let (w, h) = (g.width, g.height);
    let n = w * h;
    let with_grad = grad.is_some();
    if let Some(g) = grad.as_deref_mut() {
        assert_eq!(g.len(), 6 * n, "gradient buffer must cover both fields");
    }

    let rows: Vec<(f64, f64, f64, Vec<[f64; 3]>, Vec<[f64; 3]>)> = (0..h)
        .into_par_iter()
        .map(|j| {
            let mut bufs = (
                ContractedColumn { g: Vec::new(), gx: Vec::new(), gy: Vec::new() },
                ContractedColumn { g: Vec::new(), gx: Vec::new(), gy: Vec::new() },
            );
            let mut obj = 0.0;
            let mut s_str = 0.0;
            let mut s_ang = 0.0;
            let mut gx_row = vec![[0.0f64; 3]; if with_grad { w } else { 0 }];
            let mut gy_row = vec![[0.0f64; 3]; if with_grad { w } else { 0 }];
            for i in 0..w {
                let c = eval_ascan(
                    data, fx, fy, delta0, eta, huber_eps, with_grad, i, j, &mut bufs,
                );
                obj += c.objective;
                s_str += c.s_str;
                s_ang += c.s_ang;
                if with_grad {
                    gx_row[i] = c.grad_x;
                    gy_row[i] = c.grad_y;
                }
            }
            (obj, s_str, s_ang, gx_row, gy_row)
        })
        .collect();

    let mut objective = 0.0;
    let mut terms = SimilarityTerms {
        structural: 0.0,
        angiographic: 0.0,
    };
    for (obj, s_str, s_ang, _, _) in &rows {
        objective += obj;
        terms.structural += s_str;
        terms.angiographic += s_ang;
    }
    if let Some(gr) = grad {
        let (gx_all, gy_all) = gr.split_at_mut(3 * n);
        for (j, (_, _, _, gx_row, gy_row)) in rows.iter().enumerate() {
            for i in 0..w {
                for c in 0..3 {
                    gx_all[(j * w + i) * 3 + c] += gx_row[i][c];
                    gy_all[(j * w + i) * 3 + c] += gy_row[i][c];
                }
            }
        }
    }
    if !objective.is_finite() {
        return Err(Error::Numerical(
            "similarity term produced a non-finite value".into(),
        ));
    }
    Ok((objective, terms))
}

/// The two data-term values at given fields (no gradient, no η weighting).
pub fn similarity_terms(
    data: &LevelData,
    fx: &DisplacementField,
    fy: &DisplacementField,
    delta0: f64,
    huber_eps: f64,
) -> Result<SimilarityTerms> {
    let (_, terms) = combined_similarity(data, fx, fy, delta0, 1.0, huber_eps, None)?;
    Ok(terms)
}
