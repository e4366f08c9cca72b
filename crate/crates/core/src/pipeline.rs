//! End-to-end orchestration: phantom generation, motion correction and
//! evaluation, plus the on-disk layout the CLI exposes.
//!
//! A scan lives on disk as a file prefix: `<prefix>.struct.raw` +
//! `<prefix>.angio.raw`, each with its JSON sidecar. The motion-correction
//! flow is normalize → axial prealignment → saccade detection + en-face
//! projection → 3-D registration → resampling with the composed fields →
//! merging with white-line exclusion.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::enface::{enface_from_volumes, ProjectionConfig};
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::geom::FastAxis;
use crate::interp::{resample_volume, sample_2d_with_gradient};
use crate::io;
use crate::merge::{merge_volumes, merge_weights, sampling_density, MergeConfig, MergeWeights};
use crate::metrics::{
    affine_coregister, enface_for_vesselmap, frangi_vesselness, ilm_disparity, segment_retina,
    vessel_disparity, AffineParams, FrangiConfig, LayerBoundary, RetinaSegConfig,
    VesselmapConfig,
};
use crate::objective::{validity_resample, ObjectiveConfig};
use crate::optim::{axial_prealign, compose_fields, register_3d, SolverConfig, StageReport};
use crate::phantom::{apply_motion, generate_phantom, MotionSpec, PhantomSpec};
use crate::preprocess::{
    build_pyramid, default_pyramid_levels, detect_saccades, normalize_global, normalize_per_ascan,
    normalize_structural, substitute_invalid_bscans, ValidityMask,
};
use crate::volume::{EnFaceImage, Volume, VolumeKind};

/// All pipeline knobs in one self-describing config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub objective: ObjectiveConfig,
    pub solver: SolverConfig,
    pub projection: ProjectionConfig,
    pub merge: MergeConfig,
    pub segmentation: Option<RetinaSegConfig>,
    pub vesselmap: VesselmapConfig,
    pub frangi: FrangiConfig,
    /// Pyramid depth; 0 keeps the coarsest level at ≥ 16 A-scans per axis.
    pub pyramid_levels: usize,
    /// Worker threads; 0 uses all cores.
    pub threads: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.objective.validate()?;
        cfg.solver.validate()?;
        Ok(cfg)
    }

    /// Segmentation bounds: explicit config or scaled to the volume depth.
    fn segmentation_for(&self, depth: usize) -> RetinaSegConfig {
        self.segmentation
            .clone()
            .unwrap_or_else(|| RetinaSegConfig::scaled_for_depth(depth))
    }
}

/// Run a closure inside a dedicated rayon pool of `threads` workers
/// (0 = default). All parallel sections reduce in fixed order, so results
/// do not depend on the pool size.
pub fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction cannot fail with these settings");
    pool.install(f)
}

/// One scan (structural + angiography) loaded from a prefix.
pub struct Scan {
    pub structural: Volume,
    pub angiography: Volume,
}

pub fn scan_paths(prefix: &Path) -> (PathBuf, PathBuf) {
    let mut s = prefix.as_os_str().to_owned();
    let mut a = s.clone();
    s.push(".struct.raw");
    a.push(".angio.raw");
    (PathBuf::from(s), PathBuf::from(a))
}

pub fn read_scan(prefix: &Path, expect_fast: FastAxis) -> Result<Scan> {
    let (spath, apath) = scan_paths(prefix);
    let structural = io::read_volume(&spath)?;
    let angiography = io::read_volume(&apath)?;
    if structural.kind != VolumeKind::Structural {
        return Err(Error::Format(format!("{}: not a structural volume", spath.display())));
    }
    if angiography.kind != VolumeKind::Angiography {
        return Err(Error::Format(format!("{}: not an angiography volume", apath.display())));
    }
    if structural.geometry != angiography.geometry {
        return Err(Error::GeometryMismatch(format!(
            "{}: structural and angiography grids differ",
            prefix.display()
        )));
    }
    if structural.geometry.fast_axis != expect_fast {
        return Err(Error::InvalidInput(format!(
            "{}: expected a {:?}-fast scan, found {:?}",
            prefix.display(),
            expect_fast,
            structural.geometry.fast_axis
        )));
    }
    Ok(Scan {
        structural,
        angiography,
    })
}

pub fn write_scan(prefix: &Path, structural: &Volume, angiography: &Volume) -> Result<()> {
    let (spath, apath) = scan_paths(prefix);
    io::write_volume(&spath, structural)?;
    io::write_volume(&apath, angiography)?;
    Ok(())
}

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub read_s: f64,
    pub prealign_s: f64,
    pub project_s: f64,
    pub register_s: f64,
    pub merge_s: f64,
    pub write_s: f64,
}

/// Machine-readable run report of `run_moco`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MocoReport {
    pub prealign: StageReport,
    pub register: StageReport,
    pub gap_fraction: f64,
    pub invalid_bscans_x: Vec<usize>,
    pub invalid_bscans_y: Vec<usize>,
    pub timings: Timings,
    pub threads: usize,
    pub seed: u64,
}

/// In-memory results of a motion-correction run.
pub struct MocoOutput {
    pub field_x: DisplacementField,
    pub field_y: DisplacementField,
    pub merged_structural: Volume,
    pub merged_angiography: Volume,
    pub gap_mask: Vec<bool>,
    pub enface_x: EnFaceImage,
    pub enface_y: EnFaceImage,
    pub report: MocoReport,
}

/// Resampled per-A-scan validity at the final displacements.
fn final_validity(mask: &ValidityMask, field: &DisplacementField) -> Vec<f64> {
    let (w, h) = (field.width, field.height);
    let mut out = vec![0.0; w * h];
    for j in 0..h {
        for i in 0..w {
            let coordinate = match mask.scan {
                FastAxis::X => j as f64 + field.at(i, j)[1],
                FastAxis::Y => i as f64 + field.at(i, j)[0],
            };
            out[j * w + i] = validity_resample(mask, coordinate).0;
        }
    }
    out
}

/// Full motion-correction flow on loaded scans.
pub fn run_moco(scan_x: &Scan, scan_y: &Scan, cfg: &PipelineConfig) -> Result<MocoOutput> {
    cfg.objective.validate()?;
    cfg.solver.validate()?;
    let gx = scan_x.structural.geometry;
    let gy = scan_y.structural.geometry;
    if gx.fast_axis != FastAxis::X || gy.fast_axis != FastAxis::Y {
        return Err(Error::InvalidInput(
            "moco expects an X-fast and a Y-fast scan (orthogonal pair)".into(),
        ));
    }
    if gx.width != gy.width || gx.height != gy.height || gx.depth != gy.depth {
        return Err(Error::GeometryMismatch(
            "the two scans must share the grid dimensions".into(),
        ));
    }
    let levels = if cfg.pyramid_levels > 0 {
        cfg.pyramid_levels
    } else {
        default_pyramid_levels(&gx)
    };

    // saccade detection on the raw decorrelation volumes
    let validity_x = detect_saccades(&scan_x.angiography);
    let validity_y = detect_saccades(&scan_y.angiography);

    // per-A-scan standardization treats both scan orientations identically,
    // which the difference-based similarity needs; the per-B-scan variant
    // stays available for evaluation-side illumination correction
    let xnorm = std::env::var("XNORM").unwrap_or_else(|_| "global".into());
    let (norm_x, norm_y) = match xnorm.as_str() {
        "bscan" => (normalize_structural(&scan_x.structural), normalize_structural(&scan_y.structural)),
        "ascan" => (normalize_per_ascan(&scan_x.structural), normalize_per_ascan(&scan_y.structural)),
        _ => (normalize_global(&scan_x.structural), normalize_global(&scan_y.structural)),
    };

    let t = Instant::now();
    let prealign = axial_prealign(&norm_x, &norm_y, &cfg.objective, &cfg.solver, levels)?;
    let prealign_s = t.elapsed().as_secs_f64();

    // prealigned data feeds the projection and the 3-D registration
    let t = Instant::now();
    let pre_x = resample_volume(&norm_x, &prealign.field_x)?;
    let pre_y = resample_volume(&norm_y, &prealign.field_y)?;
    let subst_x = substitute_invalid_bscans(&scan_x.angiography, &validity_x)?;
    let subst_y = substitute_invalid_bscans(&scan_y.angiography, &validity_y)?;
    let pre_angio_x = resample_volume(&subst_x, &prealign.field_x)?;
    let pre_angio_y = resample_volume(&subst_y, &prealign.field_y)?;
    let proj_x = enface_from_volumes(&pre_angio_x, &pre_x, &validity_x, &cfg.projection)?;
    let proj_y = enface_from_volumes(&pre_angio_y, &pre_y, &validity_y, &cfg.projection)?;
    let pyramid_x = build_pyramid(&pre_x, &proj_x.image, &validity_x, levels)?;
    let pyramid_y = build_pyramid(&pre_y, &proj_y.image, &validity_y, levels)?;
    let project_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let registration = register_3d(&pyramid_x, &pyramid_y, &cfg.objective, &cfg.solver)?;
    let register_s = t.elapsed().as_secs_f64();

    // total field: stage-2 correction into the prealigned frame, then the
    // axial prealignment into the raw scan
    let field_x = compose_fields(&prealign.field_x, &registration.field_x);
    let field_y = compose_fields(&prealign.field_y, &registration.field_y);

    let t = Instant::now();
    let corrected_struct_x = resample_volume(&scan_x.structural, &field_x)?;
    let corrected_struct_y = resample_volume(&scan_y.structural, &field_y)?;
    let corrected_angio_x = resample_volume(&subst_x, &field_x)?;
    let corrected_angio_y = resample_volume(&subst_y, &field_y)?;

    let density_x = sampling_density(&field_x);
    let density_y = sampling_density(&field_y);
    let struct_weights = merge_weights(
        [&density_x, &density_y],
        None,
        gx.width,
        gx.height,
        &cfg.merge,
    );
    let tilde_x = final_validity(&validity_x, &field_x);
    let tilde_y = final_validity(&validity_y, &field_y);
    let octa_weights: MergeWeights = merge_weights(
        [&density_x, &density_y],
        Some([&tilde_x, &tilde_y]),
        gx.width,
        gx.height,
        &cfg.merge,
    );
    let merged_structural =
        merge_volumes(&corrected_struct_x, &corrected_struct_y, &struct_weights)?;
    let merged_angiography =
        merge_volumes(&corrected_angio_x, &corrected_angio_y, &octa_weights)?;
    let merge_s = t.elapsed().as_secs_f64();

    let report = MocoReport {
        prealign: prealign.report,
        register: registration.report,
        gap_fraction: octa_weights.gap_fraction(),
        invalid_bscans_x: validity_x.invalid_bscans(),
        invalid_bscans_y: validity_y.invalid_bscans(),
        timings: Timings {
            prealign_s,
            project_s,
            register_s,
            merge_s,
            ..Timings::default()
        },
        threads: cfg.threads,
        seed: cfg.seed,
    };
    Ok(MocoOutput {
        field_x,
        field_y,
        merged_structural,
        merged_angiography,
        gap_mask: octa_weights.gaps,
        enface_x: proj_x.image,
        enface_y: proj_y.image,
        report,
    })
}

/// `moco` command: read, run, write everything under `out_dir`.
pub fn cmd_moco(
    x_prefix: &Path,
    y_prefix: &Path,
    out_dir: &Path,
    cfg: &PipelineConfig,
    dump_enface: bool,
) -> Result<MocoReport> {
    std::fs::create_dir_all(out_dir)?;
    let t = Instant::now();
    let scan_x = read_scan(x_prefix, FastAxis::X)?;
    let scan_y = read_scan(y_prefix, FastAxis::Y)?;
    let read_s = t.elapsed().as_secs_f64();

    let mut out = run_in_pool(cfg.threads, || run_moco(&scan_x, &scan_y, cfg))?;

    let t = Instant::now();
    io::write_volume(&out_dir.join("merged.struct.raw"), &out.merged_structural)?;
    io::write_volume(&out_dir.join("merged.angio.raw"), &out.merged_angiography)?;
    io::write_field(&out_dir.join("x.field.raw"), &out.field_x)?;
    io::write_field(&out_dir.join("y.field.raw"), &out.field_y)?;
    let g = out.merged_structural.geometry;
    io::write_mask_pgm(&out_dir.join("gap.pgm"), g.width, g.height, &out.gap_mask)?;
    if dump_enface {
        io::write_pgm(&out_dir.join("x.enface.pgm"), &out.enface_x, 0.0, 1.0)?;
        io::write_pgm(&out_dir.join("y.enface.pgm"), &out.enface_y, 0.0, 1.0)?;
    }
    out.report.timings.read_s = read_s;
    out.report.timings.write_s = t.elapsed().as_secs_f64();
    let report_json = serde_json::to_string_pretty(&out.report)
        .map_err(|e| Error::Format(format!("report encode: {e}")))?;
    std::fs::write(out_dir.join("report.json"), report_json)?;
    Ok(out.report)
}

/// Phantom generation config: one phantom, one motion model per scan.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub phantom: PhantomSpec,
    pub motion_x: MotionSpec,
    pub motion_y: MotionSpec,
}

impl PhantomConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Ground-truth sidecar written next to the phantom scan pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub saturated_x: Vec<usize>,
    pub saturated_y: Vec<usize>,
}

/// `phantom` command: synthesize a scan pair with ground truth on disk.
pub fn cmd_phantom(config: &PhantomConfig, out_dir: &Path, threads: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    run_in_pool(threads, || -> Result<()> {
        let phantom = generate_phantom(&config.phantom)?;
        let scan_x = apply_motion(&phantom, &config.motion_x, FastAxis::X)?;
        let scan_y = apply_motion(&phantom, &config.motion_y, FastAxis::Y)?;

        write_scan(&out_dir.join("phantom"), &phantom.structural, &phantom.angiography)?;
        write_scan(&out_dir.join("x"), &scan_x.structural, &scan_x.angiography)?;
        write_scan(&out_dir.join("y"), &scan_y.structural, &scan_y.angiography)?;
        io::write_field(&out_dir.join("x.true_field.raw"), &scan_x.true_field)?;
        io::write_field(&out_dir.join("y.true_field.raw"), &scan_y.true_field)?;
        io::write_image_raw(
            &out_dir.join("truth.ilm.raw"),
            &phantom.layers.feature_map(LayerBoundary::Ilm)?,
        )?;
        io::write_mask_pgm(
            &out_dir.join("truth.vessel_mask.pgm"),
            config.phantom.width,
            config.phantom.height,
            &phantom.vessel_mask,
        )?;
        let truth = PhantomTruth {
            saturated_x: scan_x.saturated,
            saturated_y: scan_y.saturated,
        };
        std::fs::write(
            out_dir.join("truth.json"),
            serde_json::to_string_pretty(&truth)
                .map_err(|e| Error::Format(format!("truth encode: {e}")))?,
        )?;
        Ok(())
    })
}

/// Map a per-A-scan feature map into corrected space via a displacement
/// field; `axial` subtracts the axial displacement (depth features move
/// opposite to the sampling shift).
pub fn map_to_corrected(
    map: &EnFaceImage,
    field: &DisplacementField,
    axial: bool,
) -> EnFaceImage {
    EnFaceImage::from_fn(map.width, map.height, |i, j| {
        let d = field.at(i, j);
        let v = sample_2d_with_gradient(map, i as f64 + d[0], j as f64 + d[1]).0;
        if axial {
            v - d[2]
        } else {
            v
        }
    })
}

/// Feature maps of one scan: ILM depth and Frangi vesselness.
pub struct FeaturePair {
    pub ilm: EnFaceImage,
    pub vessel: EnFaceImage,
}

pub fn compute_features(
    structural: &Volume,
    angiography: &Volume,
    validity: Option<&ValidityMask>,
    cfg: &PipelineConfig,
) -> Result<FeaturePair> {
    let normalized = normalize_structural(structural);
    let seg_cfg = cfg.segmentation_for(structural.geometry.depth);
    let layers = segment_retina(&normalized, &seg_cfg)?;
    let ilm = layers.feature_map(LayerBoundary::Ilm)?;
    let enface = enface_for_vesselmap(angiography, &layers, validity, &cfg.vesselmap)?;
    let vessel = frangi_vesselness(&enface, &cfg.frangi);
    Ok(FeaturePair { ilm, vessel })
}

/// Alignment evaluation: features of both input scans mapped through the
/// estimated fields, then compared.
pub fn eval_alignment(
    scan_x: &Scan,
    scan_y: &Scan,
    field_x: &DisplacementField,
    field_y: &DisplacementField,
    cfg: &PipelineConfig,
    pair_id: &str,
) -> Result<Vec<io::MetricRow>> {
    let validity_x = detect_saccades(&scan_x.angiography);
    let validity_y = detect_saccades(&scan_y.angiography);
    let feat_x = compute_features(
        &scan_x.structural,
        &scan_x.angiography,
        Some(&validity_x),
        cfg,
    )?;
    let feat_y = compute_features(
        &scan_y.structural,
        &scan_y.angiography,
        Some(&validity_y),
        cfg,
    )?;
    let ilm_x = map_to_corrected(&feat_x.ilm, field_x, true);
    let ilm_y = map_to_corrected(&feat_y.ilm, field_y, true);
    let vessel_x = map_to_corrected(&feat_x.vessel, field_x, false);
    let vessel_y = map_to_corrected(&feat_y.vessel, field_y, false);
    let spacing = scan_x.structural.geometry.axial_spacing_um;
    let ilm = ilm_disparity(&ilm_x, &ilm_y, spacing, None)?;
    let vessel = vessel_disparity(&vessel_x, &vessel_y, None)?;
    Ok(vec![
        io::MetricRow {
            pair_id: pair_id.into(),
            metric: "ilm_disparity_um".into(),
            mean: ilm.mean,
            median: ilm.median,
        },
        io::MetricRow {
            pair_id: pair_id.into(),
            metric: "vessel_disparity".into(),
            mean: vessel.mean,
            median: vessel.median,
        },
    ])
}

/// Reproducibility evaluation between two independently merged volumes.
pub struct ReproResult {
    pub rows: Vec<io::MetricRow>,
    pub affine: AffineParams,
}

pub fn eval_reproducibility(
    merged_a: &Scan,
    merged_b: &Scan,
    gap_a: Option<&[bool]>,
    gap_b: Option<&[bool]>,
    cfg: &PipelineConfig,
    pair_id: &str,
) -> Result<ReproResult> {
    let norm_a = normalize_structural(&merged_a.structural);
    let norm_b = normalize_structural(&merged_b.structural);
    let affine = affine_coregister(&norm_a, &norm_b)?;

    let feat_a = compute_features(&merged_a.structural, &merged_a.angiography, None, cfg)?;
    let feat_b = compute_features(&merged_b.structural, &merged_b.angiography, None, cfg)?;

    let g = merged_a.structural.geometry;
    let (w, h) = (g.width, g.height);
    let center = [
        (w as f64 - 1.0) / 2.0,
        (h as f64 - 1.0) / 2.0,
        (g.depth as f64 - 1.0) / 2.0,
    ];
    // transform b's feature maps into a's frame
    let mapped = |map: &EnFaceImage, axial: bool| {
        EnFaceImage::from_fn(w, h, |i, j| {
            let p = affine.map(i as f64, j as f64, 0.0, center, 1.0);
            let v = sample_2d_with_gradient(map, p[0], p[1]).0;
            if axial {
                // p[2] carries tz plus the shear at (i, j)
                v - p[2]
            } else {
                v
            }
        })
    };
    let ilm_b = mapped(&feat_b.ilm, true);
    let vessel_b = mapped(&feat_b.vessel, false);

    // exclude gap A-scans of either merged volume (b's mask transformed)
    let exclude: Option<Vec<bool>> = if gap_a.is_some() || gap_b.is_some() {
        let mut mask = vec![false; w * h];
        for j in 0..h {
            for i in 0..w {
                let q = j * w + i;
                let mut ex = gap_a.map(|m| m[q]).unwrap_or(false);
                if let Some(mb) = gap_b {
                    let p = affine.map(i as f64, j as f64, 0.0, center, 1.0);
                    let bi = p[0].round().clamp(0.0, (w - 1) as f64) as usize;
                    let bj = p[1].round().clamp(0.0, (h - 1) as f64) as usize;
                    ex |= mb[bj * w + bi];
                }
                mask[q] = ex;
            }
        }
        Some(mask)
    } else {
        None
    };
    let spacing = g.axial_spacing_um;
    let ilm = ilm_disparity(&feat_a.ilm, &ilm_b, spacing, exclude.as_deref())?;
    let vessel = vessel_disparity(&feat_a.vessel, &vessel_b, exclude.as_deref())?;
    Ok(ReproResult {
        rows: vec![
            io::MetricRow {
                pair_id: pair_id.into(),
                metric: "ilm_reproducibility_um".into(),
                mean: ilm.mean,
                median: ilm.median,
            },
            io::MetricRow {
                pair_id: pair_id.into(),
                metric: "vessel_reproducibility".into(),
                mean: vessel.mean,
                median: vessel.median,
            },
        ],
        affine,
    })
}
