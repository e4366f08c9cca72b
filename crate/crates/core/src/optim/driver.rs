//! Two-stage multi-resolution registration driver.
//!
//! Both stages run coarse to fine on a factor-2 pyramid, starting from zero
//! displacements at the coarsest level. Stage 1 estimates per-B-scan axial
//! offsets and tilt slopes from the structural volumes alone; stage 2
//! refines full 3-D per-A-scan displacements on the prealigned data using
//! the combined structural + angiographic similarity. Between levels,
//! parameters transfer by linear interpolation — displacement values stay
//! in full-resolution voxel units everywhere, so no rescaling happens at
//! level changes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::field::DisplacementField;
use crate::geom::FastAxis;
use crate::interp::sample_2d_with_gradient;
use crate::objective::{
    compute_eta, Granularity, LevelData, ObjectiveConfig, Stage1Objective, Stage2Objective,
};
use crate::preprocess::{downsample_volume, Pyramid};
use crate::volume::{EnFaceImage, Volume};

use super::lbfgs::{lbfgs_minimize, SolveReport, SolverConfig};

/// Diagnostics for one pyramid level.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelReport {
    /// Downsampling exponent (0 = full resolution).
    pub level: usize,
    /// Similarity normalization used on this level (1.0 in stage 1).
    pub eta: f64,
    /// Objective at the level's initial (upsampled) displacements.
    pub initial_objective: f64,
    pub solve: SolveReport,
}

/// Diagnostics for one optimization stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub levels: Vec<LevelReport>,
}

/// Result of the axial prealignment.
pub struct Prealignment {
    pub field_x: DisplacementField,
    pub field_y: DisplacementField,
    pub report: StageReport,
}

/// Linear interpolation of per-B-scan parameters onto a finer axis.
fn upsample_params_1d(values: &[f64], fine_len: usize) -> Vec<f64> {
    let n = values.len();
    (0..fine_len)
        .map(|b| {
            let x = (b as f64 - 0.5) / 2.0;
            if x <= 0.0 {
                values[0]
            } else if x >= (n - 1) as f64 {
                values[n - 1]
            } else {
                let i0 = x.floor() as usize;
                let t = x - i0 as f64;
                values[i0] * (1.0 - t) + values[i0 + 1] * t
            }
        })
        .collect()
}

/// Stage 1: rough axial prealignment and tilt estimation.
///
/// Takes normalized structural volumes and returns purely axial displacement
/// fields (per-B-scan offset plus tilt, expanded to per-A-scan vectors) for
/// both scans.
pub fn axial_prealign(
    structural_x: &Volume,
    structural_y: &Volume,
    cfg: &ObjectiveConfig,
    solver: &SolverConfig,
    levels: usize,
) -> Result<Prealignment> {
    cfg.validate()?;
    let mut pyr_x = vec![structural_x.clone()];
    let mut pyr_y = vec![structural_y.clone()];
    for _ in 1..levels {
        pyr_x.push(downsample_volume(pyr_x.last().unwrap()));
        pyr_y.push(downsample_volume(pyr_y.last().unwrap()));
    }

    let mut report = StageReport::default();
    let mut params: Vec<f64> = Vec::new();
    for level in (0..levels).rev() {
        let sx = &pyr_x[level];
        let sy = &pyr_y[level];
        let g = sx.geometry;
        let objective = Stage1Objective {
            structural_x: sx,
            structural_y: sy,
            level,
            cfg,
        };
        params = if level == levels - 1 {
            vec![0.0; objective.n_params()]
        } else {
            // previous level is one halving coarser in both axes
            let (ox, sxs, oy, sys) = {
                let coarse = Stage1Objective {
                    structural_x: &pyr_x[level + 1],
                    structural_y: &pyr_y[level + 1],
                    level: level + 1,
                    cfg,
                };
                let (a, b, c, d) = coarse.split_params(&params);
                (a.to_vec(), b.to_vec(), c.to_vec(), d.to_vec())
            };
            let mut p = upsample_params_1d(&ox, g.height);
            p.extend(upsample_params_1d(&sxs, g.height));
            p.extend(upsample_params_1d(&oy, g.width));
            p.extend(upsample_params_1d(&sys, g.width));
            p
        };
        let initial_objective = objective.eval(&params, None)?;
        let (solution, solve) = lbfgs_minimize(
            |x, grad| objective.eval(x, grad),
            &params,
            solver,
        )?;
        params = solution;
        report.levels.push(LevelReport {
            level,
            eta: 1.0,
            initial_objective,
            solve,
        });
    }

    let finest = Stage1Objective {
        structural_x: &pyr_x[0],
        structural_y: &pyr_y[0],
        level: 0,
        cfg,
    };
    let (field_x, field_y) = finest.expand(&params);
    Ok(Prealignment {
        field_x,
        field_y,
        report,
    })
}

/// Result of the 3-D registration stage.
pub struct Registration {
    pub field_x: DisplacementField,
    pub field_y: DisplacementField,
    pub report: StageReport,
}

/// Stage 2: full 3-D registration on prepared pyramids.
///
/// `pyramid_x` carries the (prealigned, normalized) X-fast structural
/// volume, its en-face OCTA image and validity mask per level; likewise for
/// Y. η is recomputed at each level's initial displacements with δ = 0.5
/// and falls back to 1 when a term degenerates.
pub fn register_3d(
    pyramid_x: &Pyramid,
    pyramid_y: &Pyramid,
    cfg: &ObjectiveConfig,
    solver: &SolverConfig,
) -> Result<Registration> {
    cfg.validate()?;
    assert_eq!(pyramid_x.n_levels(), pyramid_y.n_levels());
    let levels = pyramid_x.n_levels();
    let mut report = StageReport::default();
    let mut field_x = {
        let g = pyramid_x.levels[levels - 1].geometry;
        DisplacementField::zeros(g.width, g.height, FastAxis::X)
    };
    let mut field_y = DisplacementField::zeros(field_x.width, field_x.height, FastAxis::Y);

    for level in (0..levels).rev() {
        let lx = &pyramid_x.levels[level];
        let ly = &pyramid_y.levels[level];
        let g = lx.geometry;
        if field_x.width != g.width || field_x.height != g.height {
            field_x = field_x.upsample(g.width, g.height);
            field_y = field_y.upsample(g.width, g.height);
        }
        let data = LevelData {
            level,
            structural_x: &lx.structural,
            structural_y: &ly.structural,
            enface_x: &lx.enface,
            enface_y: &ly.enface,
            validity_x: &lx.validity,
            validity_y: &ly.validity,
        };
        data.check()?;

        // geometric-mean normalization at the level's starting point
        let terms =
            crate::objective::similarity_terms(&data, &field_x, &field_y, 0.5, cfg.huber_eps)?;
        let eta = match compute_eta(terms.structural, terms.angiographic) {
            Ok(eta) => eta,
            Err(_) => 1.0,
        };

        // every level first solves at B-scan granularity, which keeps the
        // large-scale modes well conditioned; the finest level then refines
        // one 3-vector per A-scan
        // the B-scan-granularity solve gets the level's iteration budget;
        // the per-A-scan polish afterwards only needs a short run, since the
        // large-scale modes are already settled
        let refine_iters = (solver.max_iterations / 5).max(10);
        let coarse_solver = *solver;
        let refine_solver = crate::optim::SolverConfig {
            max_iterations: refine_iters,
            ..*solver
        };
        let coarse = Stage2Objective {
            data,
            cfg,
            eta,
            granularity: Granularity::PerBscan,
        };
        let params = coarse.params_from_fields(&field_x, &field_y);
        let initial_objective = coarse.eval(&params, None)?;
        let (solution, mut solve) = lbfgs_minimize(
            |x, grad| coarse.eval(x, grad),
            &params,
            &coarse_solver,
        )?;
        let (fx, fy) = coarse.fields_from_params(&solution);
        field_x = fx;
        field_y = fy;
        if level == 0 {
            let fine = Stage2Objective {
                data,
                cfg,
                eta,
                granularity: Granularity::PerAscan,
            };
            let params = fine.params_from_fields(&field_x, &field_y);
            let (solution, fine_solve) = lbfgs_minimize(
                |x, grad| fine.eval(x, grad),
                &params,
                &refine_solver,
            )?;
            let (fx, fy) = fine.fields_from_params(&solution);
            field_x = fx;
            field_y = fy;
            solve.iterations += fine_solve.iterations;
            solve.final_value = fine_solve.final_value;
            solve.grad_norm = fine_solve.grad_norm;
            solve.termination = fine_solve.termination;
        }
        if let Ok(dir) = std::env::var("XTRACE") {
            let _ = crate::io::write_field(
                std::path::Path::new(&format!("{dir}/trace_L{level}_x.raw")), &field_x);
            let _ = crate::io::write_field(
                std::path::Path::new(&format!("{dir}/trace_L{level}_y.raw")), &field_y);
        }
        report.levels.push(LevelReport {
            level,
            eta,
            initial_objective,
            solve,
        });
    }
    Ok(Registration {
        field_x,
        field_y,
        report,
    })
}

/// Compose two correction fields: `outer` maps corrected space into the
/// `inner`-corrected volume, `inner` maps that into the raw scan.
///
/// `total(p) = outer(p) + inner(p_xy + outer_xy(p))`, with `inner`
/// interpolated bicubically per component over the transverse grid.
pub fn compose_fields(
    inner: &DisplacementField,
    outer: &DisplacementField,
) -> DisplacementField {
    let (w, h) = (outer.width, outer.height);
    let comp = |c: usize| {
        EnFaceImage::from_fn(inner.width, inner.height, |i, j| inner.at(i, j)[c])
    };
    let inner_imgs = [comp(0), comp(1), comp(2)];
    DisplacementField::from_fn(w, h, outer.scan, |i, j| {
        let o = outer.at(i, j);
        let x = i as f64 + o[0];
        let y = j as f64 + o[1];
        let mut total = o;
        for c in 0..3 {
            total[c] += sample_2d_with_gradient(&inner_imgs[c], x, y).0;
        }
        total
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::GridGeometry;
    use crate::volume::VolumeKind;

    #[test]
    fn upsampled_params_interpolate_linearly() {
        let coarse = vec![0.0, 2.0, 4.0];
        let fine = upsample_params_1d(&coarse, 6);
        assert_eq!(fine[0], 0.0);
        assert!((fine[1] - 0.5).abs() < 1e-12);
        assert!((fine[2] - 1.5).abs() < 1e-12);
        assert_eq!(fine[5], 4.0);
    }

    #[test]
    fn identical_volumes_prealign_to_zero() {
        let g = GridGeometry::desk(12, 12, 16, FastAxis::X);
        let v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            ((0.5 * k as f32) - (0.05 * (i + j) as f32)).sin()
        });
        let mut vy = v.clone();
        vy.geometry.fast_axis = FastAxis::Y;
        let pre = axial_prealign(
            &v,
            &vy,
            &ObjectiveConfig::default(),
            &SolverConfig::default(),
            2,
        )
        .unwrap();
        assert!(pre.field_x.max_abs() < 1e-6, "{}", pre.field_x.max_abs());
        assert!(pre.field_y.max_abs() < 1e-6);
    }

    #[test]
    fn composition_adds_fields_at_zero_outer_transverse() {
        let inner = DisplacementField::from_fn(4, 4, FastAxis::X, |i, j| {
            [0.0, 0.0, (i + j) as f64 * 0.5]
        });
        let outer = DisplacementField::from_fn(4, 4, FastAxis::X, |_, _| [0.0, 0.0, 1.0]);
        let total = compose_fields(&inner, &outer);
        for j in 0..4 {
            for i in 0..4 {
                let expect = [0.0, 0.0, 1.0 + (i + j) as f64 * 0.5];
                let got = total.at(i, j);
                for c in 0..3 {
                    assert!((got[c] - expect[c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn composition_resamples_inner_at_displaced_positions() {
        let inner = DisplacementField::from_fn(5, 5, FastAxis::X, |i, _| [i as f64, 0.0, 0.0]);
        let outer = DisplacementField::from_fn(5, 5, FastAxis::X, |_, _| [1.0, 0.0, 0.0]);
        let total = compose_fields(&inner, &outer);
        // inner is linear in i, so inner(i + 1) = i + 1 in the interior
        for i in 0..4 {
            assert!((total.at(i, 2)[0] - (1.0 + (i + 1) as f64)).abs() < 1e-9);
        }
    }
}
