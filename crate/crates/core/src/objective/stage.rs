//! The two optimization stages as flat-vector objectives.
//!
//! Stage 1 (axial prealignment) estimates one axial offset and one tilt
//! slope per B-scan of each volume; the expanded axial displacement at
//! A-scan `(i, j)` is `offset_b + slope_b · (f − (n_f − 1)/2) · 2^L` with
//! `f` the fast-axis index and `2^L` converting level steps into
//! full-resolution voxel units. Stage 2 estimates a full 3-vector per
//! A-scan of both volumes.
//!
//! Parameter layouts (everything `f64`, full-resolution voxel units):
//!
//! * stage 1: `[offsets_x (h), slopes_x (h), offsets_y (w), slopes_y (w)]`
//! * stage 2: `[X field: (dx, dy, dz) per A-scan, i fastest; then Y field]`

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::geom::FastAxis;
use crate::interp::sample_1d_f32;
use crate::volume::Volume;

use super::regularizers::{mean_shift_penalty, smoothness_penalty, tilt_penalty};
use super::similarity::{combined_similarity, LevelData};
use super::{pseudo_huber_with_derivative, ObjectiveConfig};

/// Resolution of the stage-2 displacement unknowns.
///
/// Coarse pyramid levels estimate one 3-vector per B-scan of each volume;
/// only the last level refines every A-scan individually. The reduced
/// parameterization keeps large-scale modes well conditioned while the
/// expanded field still feeds the same similarity and regularizers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerBscan,
    PerAscan,
}

/// Stage-2 objective: Eq-style combined similarity plus `α·R + M`.
pub struct Stage2Objective<'a> {
    pub data: LevelData<'a>,
    pub cfg: &'a ObjectiveConfig,
    pub eta: f64,
    pub granularity: Granularity,
}

impl<'a> Stage2Objective<'a> {
    pub fn n_params(&self) -> usize {
        let g = self.data.geometry();
        match self.granularity {
            Granularity::PerAscan => 6 * g.n_ascans(),
            // X field: one vector per row; Y field: one per column
            Granularity::PerBscan => 3 * (g.height + g.width),
        }
    }

    pub fn fields_from_params(&self, params: &[f64]) -> (DisplacementField, DisplacementField) {
        let g = self.data.geometry();
        let (w, h) = (g.width, g.height);
        match self.granularity {
            Granularity::PerAscan => {
                let n = w * h;
                let mut fx = DisplacementField::zeros(w, h, FastAxis::X);
                let mut fy = DisplacementField::zeros(w, h, FastAxis::Y);
                for a in 0..n {
                    fx.vectors_mut()[a] = [params[a * 3], params[a * 3 + 1], params[a * 3 + 2]];
                    let b = 3 * n + a * 3;
                    fy.vectors_mut()[a] = [params[b], params[b + 1], params[b + 2]];
                }
                (fx, fy)
            }
            Granularity::PerBscan => {
                let fx = DisplacementField::from_fn(w, h, FastAxis::X, |_, j| {
                    [params[j * 3], params[j * 3 + 1], params[j * 3 + 2]]
                });
                let base = 3 * h;
                let fy = DisplacementField::from_fn(w, h, FastAxis::Y, |i, _| {
                    [
                        params[base + i * 3],
                        params[base + i * 3 + 1],
                        params[base + i * 3 + 2],
                    ]
                });
                (fx, fy)
            }
        }
    }

    /// Project fields onto this parameterization (B-scan means where the
    /// granularity is reduced).
    pub fn params_from_fields(
        &self,
        fx: &DisplacementField,
        fy: &DisplacementField,
    ) -> Vec<f64> {
        match self.granularity {
            Granularity::PerAscan => fx
                .vectors()
                .iter()
                .chain(fy.vectors())
                .flatten()
                .copied()
                .collect(),
            Granularity::PerBscan => {
                let (w, h) = (fx.width, fx.height);
                let mut out = Vec::with_capacity(3 * (h + w));
                for j in 0..h {
                    let mut mean = [0.0f64; 3];
                    for i in 0..w {
                        let v = fx.at(i, j);
                        for c in 0..3 {
                            mean[c] += v[c];
                        }
                    }
                    out.extend(mean.iter().map(|m| m / w as f64));
                }
                for i in 0..w {
                    let mut mean = [0.0f64; 3];
                    for j in 0..h {
                        let v = fy.at(i, j);
                        for c in 0..3 {
                            mean[c] += v[c];
                        }
                    }
                    out.extend(mean.iter().map(|m| m / h as f64));
                }
                out
            }
        }
    }

    /// Accumulate a field-space gradient onto the parameter vector.
    fn contract_grad(&self, gx: &[f64], gy: &[f64], grad: &mut [f64]) {
        let g = self.data.geometry();
        let (w, h) = (g.width, g.height);
        match self.granularity {
            Granularity::PerAscan => {
                let n = w * h;
                grad[..3 * n].copy_from_slice(gx);
                grad[3 * n..].copy_from_slice(gy);
            }
            Granularity::PerBscan => {
                grad.fill(0.0);
                for j in 0..h {
                    for i in 0..w {
                        for c in 0..3 {
                            grad[j * 3 + c] += gx[(j * w + i) * 3 + c];
                        }
                    }
                }
                let base = 3 * h;
                for j in 0..h {
                    for i in 0..w {
                        for c in 0..3 {
                            grad[base + i * 3 + c] += gy[(j * w + i) * 3 + c];
                        }
                    }
                }
            }
        }
    }

    /// Objective value and gradient at `params`.
    pub fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        assert_eq!(params.len(), self.n_params());
        let n = self.data.geometry().n_ascans();
        let (fx, fy) = self.fields_from_params(params);
        let with_grad = grad.is_some();
        let mut field_grad = vec![0.0f64; if with_grad { 6 * n } else { 0 }];
        let (data_term, _) = combined_similarity(
            &self.data,
            &fx,
            &fy,
            self.cfg.delta0,
            self.eta,
            self.cfg.huber_eps,
            with_grad.then_some(field_grad.as_mut_slice()),
        )?;

        let (r, m) = if with_grad {
            let (gx, gy) = field_grad.split_at_mut(3 * n);
            let mut r = 0.0;
            r += smoothness_weighted(&fx, self.cfg, Some(gx));
            r += smoothness_weighted(&fy, self.cfg, Some(gy));
            let m = mean_shift_penalty(&fx, &fy, self.cfg.mean_shift_weight, Some((gx, gy)));
            (r, m)
        } else {
            let r = smoothness_weighted(&fx, self.cfg, None)
                + smoothness_weighted(&fy, self.cfg, None);
            let m = mean_shift_penalty(&fx, &fy, self.cfg.mean_shift_weight, None);
            (r, m)
        };
        if let Some(g) = grad {
            let (gx, gy) = field_grad.split_at(3 * n);
            self.contract_grad(gx, gy, g);
        }
        let total = data_term + r + m;
        if !total.is_finite() {
            return Err(Error::Numerical(non_finite_report(data_term, r, m, None)));
        }
        Ok(total)
    }
}

/// `α · R`, with the α folded into the gradient as well.
fn smoothness_weighted(
    field: &DisplacementField,
    cfg: &ObjectiveConfig,
    grad: Option<&mut [f64]>,
) -> f64 {
    match grad {
        Some(g) => {
            let mut local = vec![0.0; g.len()];
            let r = smoothness_penalty(field, cfg, Some(&mut local));
            for (dst, src) in g.iter_mut().zip(&local) {
                *dst += cfg.alpha * src;
            }
            cfg.alpha * r
        }
        None => cfg.alpha * smoothness_penalty(field, cfg, None),
    }
}

fn non_finite_report(data: f64, r: f64, m: f64, t: Option<f64>) -> String {
    let mut terms = vec![("data", data), ("smoothness", r), ("mean-shift", m)];
    if let Some(t) = t {
        terms.push(("tilt", t));
    }
    let bad: Vec<&str> = terms
        .iter()
        .filter(|(_, v)| !v.is_finite())
        .map(|(n, _)| *n)
        .collect();
    format!("non-finite objective term(s): {}", bad.join(", "))
}

/// Stage-1 objective: per-B-scan axial offsets and tilt slopes.
pub struct Stage1Objective<'a> {
    pub structural_x: &'a Volume,
    pub structural_y: &'a Volume,
    /// Downsampling exponent of the current level.
    pub level: usize,
    pub cfg: &'a ObjectiveConfig,
}

impl<'a> Stage1Objective<'a> {
    pub fn n_params(&self) -> usize {
        let g = self.structural_x.geometry;
        2 * g.height + 2 * g.width
    }

    fn dims(&self) -> (usize, usize, usize) {
        let g = self.structural_x.geometry;
        (g.width, g.height, g.depth)
    }

    fn level_step(&self) -> f64 {
        (1u64 << self.level) as f64
    }

    /// Split the flat parameter vector into the four per-B-scan slices.
    pub fn split_params<'p>(&self, params: &'p [f64]) -> (&'p [f64], &'p [f64], &'p [f64], &'p [f64]) {
        let (w, h, _) = self.dims();
        let (ox, rest) = params.split_at(h);
        let (sx, rest) = rest.split_at(h);
        let (oy, sy) = rest.split_at(w);
        debug_assert_eq!(sy.len(), w);
        (ox, sx, oy, sy)
    }

    /// Expand per-B-scan parameters into axial displacement fields.
    pub fn expand(&self, params: &[f64]) -> (DisplacementField, DisplacementField) {
        let (w, h, _) = self.dims();
        let (ox, sx, oy, sy) = self.split_params(params);
        let step = self.level_step();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let fx = DisplacementField::from_fn(w, h, FastAxis::X, |i, j| {
            [0.0, 0.0, ox[j] + sx[j] * (i as f64 - cx) * step]
        });
        let fy = DisplacementField::from_fn(w, h, FastAxis::Y, |i, j| {
            [0.0, 0.0, oy[i] + sy[i] * (j as f64 - cy) * step]
        });
        (fx, fy)
    }

    /// Contract per-A-scan z-gradients back onto (offset, slope) pairs.
    fn contract(&self, gz_x: &[f64], gz_y: &[f64], grad: &mut [f64]) {
        let (w, h, _) = self.dims();
        let step = self.level_step();
        let cx = (w as f64 - 1.0) / 2.0;
        let cy = (h as f64 - 1.0) / 2.0;
        let (gox, rest) = grad.split_at_mut(h);
        let (gsx, rest) = rest.split_at_mut(h);
        let (goy, gsy) = rest.split_at_mut(w);
        for j in 0..h {
            for i in 0..w {
                let g = gz_x[j * w + i];
                gox[j] += g;
                gsx[j] += g * (i as f64 - cx) * step;
            }
        }
        for j in 0..h {
            for i in 0..w {
                let g = gz_y[j * w + i];
                goy[i] += g;
                gsy[i] += g * (j as f64 - cy) * step;
            }
        }
    }

    /// Unweighted axial structural term and its per-A-scan z-gradients.
    fn axial_similarity(
        &self,
        fx: &DisplacementField,
        fy: &DisplacementField,
        with_grad: bool,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let (w, h, d) = self.dims();
        let inv = 1.0 / self.level_step();
        let eps = self.cfg.huber_eps;
        let rows: Vec<(f64, Vec<f64>, Vec<f64>)> = (0..h)
            .into_par_iter()
            .map(|j| {
                let mut value = 0.0;
                let mut gx_row = vec![0.0; if with_grad { w } else { 0 }];
                let mut gy_row = vec![0.0; if with_grad { w } else { 0 }];
                for i in 0..w {
                    let col_x = self.structural_x.ascan(i, j);
                    let col_y = self.structural_y.ascan(i, j);
                    let dz_x = fx.at(i, j)[2] * inv;
                    let dz_y = fy.at(i, j)[2] * inv;
                    let mut gx_acc = 0.0;
                    let mut gy_acc = 0.0;
                    for k in 0..d {
                        let (vx, dvx) = sample_1d_f32(col_x, k as f64 + dz_x);
                        let (vy, dvy) = sample_1d_f32(col_y, k as f64 + dz_y);
                        let (l, dl) = pseudo_huber_with_derivative(vx - vy, eps);
                        value += l;
                        if with_grad {
                            gx_acc += dl * dvx;
                            gy_acc -= dl * dvy;
                        }
                    }
                    if with_grad {
                        gx_row[i] = gx_acc * inv;
                        gy_row[i] = gy_acc * inv;
                    }
                }
                (value, gx_row, gy_row)
            })
            .collect();
        let mut value = 0.0;
        let mut gz_x = vec![0.0; if with_grad { w * h } else { 0 }];
        let mut gz_y = vec![0.0; if with_grad { w * h } else { 0 }];
        for (j, (v, gx_row, gy_row)) in rows.iter().enumerate() {
            value += v;
            if with_grad {
                gz_x[j * w..(j + 1) * w].copy_from_slice(gx_row);
                gz_y[j * w..(j + 1) * w].copy_from_slice(gy_row);
            }
        }
        (value, gz_x, gz_y)
    }

    /// Objective value and gradient at `params`.
    pub fn eval(&self, params: &[f64], grad: Option<&mut [f64]>) -> Result<f64> {
        assert_eq!(params.len(), self.n_params());
        let (w, h, _) = self.dims();
        let n = w * h;
        let (fx, fy) = self.expand(params);
        let with_grad = grad.is_some();
        let (data_term, gz_x, gz_y) = self.axial_similarity(&fx, &fy, with_grad);

        let (_, sx, _, sy) = self.split_params(params);
        let (r, m, t) = match grad {
            Some(g) => {
                g.fill(0.0);
                // field-space gradients of R and M, contracted afterwards
                let mut gf_x = vec![0.0; 3 * n];
                let mut gf_y = vec![0.0; 3 * n];
                let mut r = 0.0;
                r += smoothness_weighted(&fx, self.cfg, Some(&mut gf_x));
                r += smoothness_weighted(&fy, self.cfg, Some(&mut gf_y));
                let m = mean_shift_penalty(
                    &fx,
                    &fy,
                    self.cfg.mean_shift_weight,
                    Some((&mut gf_x, &mut gf_y)),
                );
                let mut gz_total_x = gz_x;
                let mut gz_total_y = gz_y;
                for a in 0..n {
                    gz_total_x[a] += gf_x[a * 3 + 2];
                    gz_total_y[a] += gf_y[a * 3 + 2];
                }
                self.contract(&gz_total_x, &gz_total_y, g);
                let t = {
                    let (_, gslice) = g.split_at_mut(h);
                    let (gsx, rest) = gslice.split_at_mut(h);
                    let (_, gsy) = rest.split_at_mut(w);
                    tilt_penalty(sx, sy, self.cfg.tilt_weight, Some((gsx, gsy)))
                };
                (r, m, t)
            }
            None => {
                let r = smoothness_weighted(&fx, self.cfg, None)
                    + smoothness_weighted(&fy, self.cfg, None);
                let m = mean_shift_penalty(&fx, &fy, self.cfg.mean_shift_weight, None);
                let t = tilt_penalty(sx, sy, self.cfg.tilt_weight, None);
                (r, m, t)
            }
        };
        let total = data_term + r + m + t;
        if !total.is_finite() {
            return Err(Error::Numerical(non_finite_report(data_term, r, m, Some(t))));
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridGeometry;
    use crate::preprocess::ValidityMask;
    use crate::volume::{EnFaceImage, VolumeKind};

    struct Owned {
        sx: Volume,
        sy: Volume,
        ex: EnFaceImage,
        ey: EnFaceImage,
        vx: ValidityMask,
        vy: ValidityMask,
    }

    fn smooth_pair(w: usize, h: usize, d: usize, seed: u64) -> Owned {
        let gx = GridGeometry::desk(w, h, d, FastAxis::X);
        let gy = GridGeometry::desk(w, h, d, FastAxis::Y);
        let phase = (seed % 97) as f32 * 0.1;
        let field = |i: usize, j: usize, k: usize, off: f32| {
            let (x, y, z) = (i as f32, j as f32, k as f32);
            (0.45 * x + phase).sin() + (0.3 * y - 0.2 * z).cos() + 0.05 * z + off
        };
        let sx = Volume::from_fn(gx, VolumeKind::Structural, |i, j, k| field(i, j, k, 0.0));
        let sy = Volume::from_fn(gy, VolumeKind::Structural, |i, j, k| field(i, j, k, 0.1));
        let ex = EnFaceImage::from_fn(w, h, |i, j| {
            0.5 + 0.4 * ((0.7 * i as f64).sin() * (0.5 * j as f64).cos())
        });
        let ey = EnFaceImage::from_fn(w, h, |i, j| {
            0.5 + 0.4 * ((0.7 * i as f64 + 0.2).sin() * (0.5 * j as f64).cos())
        });
        let mut vx = ValidityMask::all_valid(FastAxis::X, h);
        let mut vy = ValidityMask::all_valid(FastAxis::Y, w);
        vx.values[h / 2] = 0.0;
        vy.values[1] = 0.0;
        Owned { sx, sy, ex, ey, vx, vy }
    }

    fn smooth_params(n: usize, amp: f64, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|q| amp * ((q as f64 * 0.37 + seed as f64 * 0.11).sin()))
            .collect()
    }

    #[test]
    fn stage2_zero_on_identical_inputs() {
        let o = smooth_pair(5, 5, 5, 3);
        let data = LevelData {
            level: 0,
            structural_x: &o.sx,
            structural_y: &o.sx,
            enface_x: &o.ex,
            enface_y: &o.ex,
            validity_x: &o.vx,
            validity_y: &o.vy,
        };
        let cfg = ObjectiveConfig::default();
        let obj = Stage2Objective { data, cfg: &cfg, eta: 1.0, granularity: Granularity::PerAscan };
        let params = vec![0.0; obj.n_params()];
        let mut grad = vec![0.0; obj.n_params()];
        let v = obj.eval(&params, Some(&mut grad)).unwrap();
        assert_eq!(v, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stage2_gradient_matches_finite_differences() {
        let o = smooth_pair(5, 4, 5, 7);
        let data = LevelData {
            level: 0,
            structural_x: &o.sx,
            structural_y: &o.sy,
            enface_x: &o.ex,
            enface_y: &o.ey,
            validity_x: &o.vx,
            validity_y: &o.vy,
        };
        let cfg = ObjectiveConfig::default();
        let obj = Stage2Objective { data, cfg: &cfg, eta: 1.3, granularity: Granularity::PerAscan };
        let params = smooth_params(obj.n_params(), 0.4, 5);
        let mut grad = vec![0.0; obj.n_params()];
        obj.eval(&params, Some(&mut grad)).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for q in 0..params.len() {
            let mut p = params.clone();
            p[q] += h;
            let fp = obj.eval(&p, None).unwrap();
            p[q] -= 2.0 * h;
            let fm = obj.eval(&p, None).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[q].abs()).max(1e-6);
            worst = worst.max((grad[q] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn stage2_at_coarser_level_scales_coordinates() {
        // same check as above but with level = 1 to cover the unit conversion
        let o = smooth_pair(4, 4, 4, 11);
        let data = LevelData {
            level: 1,
            structural_x: &o.sx,
            structural_y: &o.sy,
            enface_x: &o.ex,
            enface_y: &o.ey,
            validity_x: &o.vx,
            validity_y: &o.vy,
        };
        let cfg = ObjectiveConfig::default();
        let obj = Stage2Objective { data, cfg: &cfg, eta: 0.8, granularity: Granularity::PerBscan };
        let params = smooth_params(obj.n_params(), 0.8, 2);
        let mut grad = vec![0.0; obj.n_params()];
        obj.eval(&params, Some(&mut grad)).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for q in (0..params.len()).step_by(7) {
            let mut p = params.clone();
            p[q] += h;
            let fp = obj.eval(&p, None).unwrap();
            p[q] -= 2.0 * h;
            let fm = obj.eval(&p, None).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[q].abs()).max(1e-6);
            worst = worst.max((grad[q] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn delta_zero_reduces_to_structural_plus_regularizers() {
        let o = smooth_pair(5, 5, 4, 13);
        let data = LevelData {
            level: 0,
            structural_x: &o.sx,
            structural_y: &o.sy,
            enface_x: &o.ex,
            enface_y: &o.ey,
            validity_x: &o.vx,
            validity_y: &o.vy,
        };
        let cfg = ObjectiveConfig {
            delta0: 0.0,
            ..ObjectiveConfig::default()
        };
        let eta = 1.7;
        let obj = Stage2Objective { data, cfg: &cfg, eta, granularity: Granularity::PerAscan };
        let params = smooth_params(obj.n_params(), 0.3, 8);
        let combined = obj.eval(&params, None).unwrap();

        // independent composition: η-scaled unweighted structural + α·R + M
        let (fx, fy) = obj.fields_from_params(&params);
        let terms =
            super::super::similarity::similarity_terms(&data, &fx, &fy, 0.0, cfg.huber_eps)
                .unwrap();
        let direct = eta * terms.structural
            + cfg.alpha
                * (smoothness_penalty(&fx, &cfg, None) + smoothness_penalty(&fy, &cfg, None))
            + mean_shift_penalty(&fx, &fy, cfg.mean_shift_weight, None);
        assert!(
            (combined - direct).abs() <= 1e-12 * direct.abs().max(1.0),
            "{combined} vs {direct}"
        );
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let o = smooth_pair(6, 5, 6, 17);
        let cfg = ObjectiveConfig::default();
        let obj = Stage1Objective {
            structural_x: &o.sx,
            structural_y: &o.sy,
            level: 0,
            cfg: &cfg,
        };
        let params = smooth_params(obj.n_params(), 0.3, 21);
        let mut grad = vec![0.0; obj.n_params()];
        obj.eval(&params, Some(&mut grad)).unwrap();
        let h = 1e-4;
        let mut worst = 0.0f64;
        for q in 0..params.len() {
            let mut p = params.clone();
            p[q] += h;
            let fp = obj.eval(&p, None).unwrap();
            p[q] -= 2.0 * h;
            let fm = obj.eval(&p, None).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(grad[q].abs()).max(1e-6);
            worst = worst.max((grad[q] - fd).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn stage1_expansion_centers_the_tilt() {
        let gx = GridGeometry::desk(4, 3, 4, FastAxis::X);
        let gy = GridGeometry::desk(4, 3, 4, FastAxis::Y);
        let sx = Volume::zeros(gx, VolumeKind::Structural);
        let sy = Volume::zeros(gy, VolumeKind::Structural);
        let cfg = ObjectiveConfig::default();
        let obj = Stage1Objective {
            structural_x: &sx,
            structural_y: &sy,
            level: 0,
            cfg: &cfg,
        };
        // offsets_x = [1, 2, 3], slopes_x = [0.5, 0, 0], rest zero
        let mut params = vec![0.0; obj.n_params()];
        params[0] = 1.0;
        params[1] = 2.0;
        params[2] = 3.0;
        params[3] = 0.5;
        let (fx, fy) = obj.expand(&params);
        assert_eq!(fx.at(0, 0)[2], 1.0 + 0.5 * -1.5);
        assert_eq!(fx.at(3, 0)[2], 1.0 + 0.5 * 1.5);
        assert_eq!(fx.at(2, 1)[2], 2.0);
        assert_eq!(fx.at(1, 2)[2], 3.0);
        assert!(fy.vectors().iter().all(|v| *v == [0.0; 3]));
        // the slope term sums to zero across a B-scan: offsets see the mean
        let row_sum: f64 = (0..4).map(|i| fx.at(i, 0)[2]).sum();
        assert!((row_sum - 4.0).abs() < 1e-12);
    }
}
