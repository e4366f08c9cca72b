//! Synthetic retina phantoms with known ground-truth motion.
//!
//! A phantom is a layered structural volume (foveal-pit ILM, bright EZ and
//! RPE bands, speckle) plus a decorrelation volume that is dark inside the
//! retina, bright in the vitreous and choroid (low-OCT-signal noise), and
//! bright inside vessel tubes. [`apply_motion`] scans it with a drift +
//! saccade trajectory and returns the scanned pair element together with
//! the exact correction field, making every downstream stage verifiable
//! without clinical data.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::geom::{FastAxis, GridGeometry};
use crate::interp::sample_3d;
use crate::metrics::{LayerBoundary, LayerSet};
use crate::volume::{Volume, VolumeKind};

/// Deterministic xoshiro-style generator seeded per use site.
///
/// Small and stable: phantom bytes must not depend on any external RNG
/// crate's algorithm choices.
#[derive(Clone)]
pub struct SplitMix(u64);

impl SplitMix {
    pub fn new(seed: u64) -> Self {
        SplitMix(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-12);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Mean-1 gamma with shape 4 (Erlang sum of four exponentials).
    pub fn speckle(&mut self) -> f64 {
        let p = self.uniform().max(1e-12)
            * self.uniform().max(1e-12)
            * self.uniform().max(1e-12)
            * self.uniform().max(1e-12);
        -0.25 * p.ln()
    }
}

/// A vessel centerline in the en-face plane.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vessel {
    /// Polyline vertices in transverse voxel coordinates.
    pub path: Vec<[f64; 2]>,
    pub radius: f64,
}

/// Geometry and content of a phantom retina.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    /// ILM base depth in voxels.
    pub ilm_depth: f64,
    /// Extra ILM depth at the foveal pit center.
    pub pit_depth: f64,
    pub pit_radius: f64,
    /// Additional bowl-shaped curvature toward the corners.
    pub curvature: f64,
    /// EZ band offset below the ILM.
    pub ez_offset: f64,
    /// OS-RPE offset below the EZ.
    pub os_rpe_offset: f64,
    /// Posterior RPE offset below the EZ.
    pub rpe_offset: f64,
    /// Contrast of the layered structure (0 flattens all bands).
    pub layer_contrast: f64,
    /// Depth of vessel centers below the ILM.
    pub vessel_depth: f64,
    pub vessels: Vec<Vessel>,
    /// Speckle / decorrelation noise strength in [0, 1].
    pub noise_level: f64,
    /// Relative amplitude of the smooth inner-retina thickness variation.
    pub thickness_sway: f64,
    /// Axial point-spread blur of band edges in voxels.
    pub axial_psf_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            depth: 64,
            ilm_depth: 14.0,
            pit_depth: 7.0,
            pit_radius: 18.0,
            curvature: 5.0,
            ez_offset: 18.0,
            os_rpe_offset: 22.0,
            rpe_offset: 26.0,
            layer_contrast: 1.0,
            vessel_depth: 4.0,
            vessels: default_vessels(128.0, 128.0),
            noise_level: 0.6,
            thickness_sway: 0.08,
            axial_psf_sigma: 0.7,
            seed: 7,
        }
    }
}

/// A radial vessel tree, two arcs, and a fine capillary mesh covering the
/// field, scaled to the grid. The mesh keeps vascular features available
/// everywhere, as in a real superficial plexus.
pub fn default_vessels(w: f64, h: f64) -> Vec<Vessel> {
    let (cx, cy) = (w * 0.5, h * 0.5);
    let mut vessels = Vec::new();
    let arms = 6;
    for a in 0..arms {
        // 15° base offset keeps every arm at least 15° away from both scan
        // axes; an axis-aligned arteriole would read as a saturated B-scan
        let angle = a as f64 / arms as f64 * std::f64::consts::TAU + 15f64.to_radians();
        let (dx, dy) = (angle.cos(), angle.sin());
        // radial arteriole, tapering toward the avascular center; the outer
        // widths span several voxels so vessels stay visible on coarse
        // pyramid levels without concentrating caliber near the fovea
        let vertex = |s: usize| -> [f64; 2] {
            let r = w * 0.08 + s as f64 / 10.0 * (w * 0.48);
            let bend = (s as f64 / 10.0 * 2.2).sin() * w * 0.05;
            [cx + dx * r - dy * bend, cy + dy * r + dx * bend]
        };
        let full = 2.5 + 0.7 * (a % 3) as f64;
        for (lo, hi, frac) in [(0usize, 4usize, 0.4), (4, 7, 0.7), (7, 10, 1.0)] {
            let path: Vec<[f64; 2]> = (lo..=hi).map(vertex).collect();
            vessels.push(Vessel {
                path,
                radius: full * frac,
            });
        }
    }
    // two circumferential arcs connecting the arms
    for (ring, radius) in [(0.22, 1.8), (0.38, 2.4)] {
        let path: Vec<[f64; 2]> = (0..=24)
            .map(|s| {
                let angle = s as f64 / 24.0 * std::f64::consts::TAU;
                [cx + angle.cos() * w * ring, cy + angle.sin() * h * ring]
            })
            .collect();
        vessels.push(Vessel { path, radius });
    }
    // wavy capillary mesh along the two diagonals; keeping capillaries off
    // the scan axes stops any single B-scan from accumulating a whole
    // vessel, which would mimic a saturated white line
    // aperiodic lane placement: a regular lattice of capillaries would give
    // the similarity terms convincing false matches one period away
    let mut jitter = SplitMix::new(0x5ca1_ab1e);
    let lanes = 13;
    for lane in 0..lanes {
        let c = (((lane as f64 + 0.3 + 0.6 * jitter.uniform()) / lanes as f64) * 2.0 - 1.0)
            * (h - 1.0)
            * 0.95;
        for (dir, phase) in [(1.0f64, 1.7), (-1.0, 2.3)] {
            let freq = 5.0 + 4.0 * jitter.uniform();
            let amp = h * (0.02 + 0.03 * jitter.uniform());
            let radius = 0.7 + 0.5 * jitter.uniform();
            let path: Vec<[f64; 2]> = (0..=20)
                .map(|s| {
                    let t = s as f64 / 20.0; // 0..1 along the diagonal
                    let x = t * (w - 1.0);
                    let mid = if dir > 0.0 {
                        t * (h - 1.0)
                    } else {
                        (1.0 - t) * (h - 1.0)
                    };
                    let y = mid + c + (t * freq + lane as f64 * phase).sin() * amp;
                    [x, y]
                })
                .filter(|p| p[1] > -0.05 * h && p[1] < 1.05 * h)
                .collect();
            if path.len() >= 2 {
                vessels.push(Vessel { path, radius });
            }
        }
    }
    vessels
}

/// Ground-truth phantom content.
pub struct Phantom {
    pub structural: Volume,
    pub angiography: Volume,
    pub layers: LayerSet,
    /// Per-A-scan vessel footprint.
    pub vessel_mask: Vec<bool>,
    pub spec: PhantomSpec,
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let d = [ap[0] - t * ab[0], ap[1] - t * ab[1]];
    (d[0] * d[0] + d[1] * d[1]).sqrt()
}

fn vessel_distance(vessels: &[Vessel], x: f64, y: f64) -> (f64, f64) {
    let mut best = f64::INFINITY;
    let mut radius = 0.0;
    for v in vessels {
        for seg in v.path.windows(2) {
            let d = point_segment_distance([x, y], seg[0], seg[1]);
            if d - v.radius < best - radius {
                best = d;
                radius = v.radius;
            }
        }
    }
    (best, radius)
}

/// Hash-seeded noise volume smoothed with a binomial kernel per axis, so
/// the grain extends over roughly a voxel (the PSF scale) instead of being
/// white. Deterministic per voxel, independent of iteration order.
fn correlated_field(
    w: usize,
    h: usize,
    d: usize,
    seed: u64,
    sample: impl Fn(&mut SplitMix) -> f64 + Sync,
) -> Vec<f32> {
    let mut field: Vec<f32> = (0..w * h * d)
        .into_par_iter()
        .map(|q| {
            let mut rng = SplitMix::new(seed ^ (q as u64).wrapping_mul(0x9e3779b97f4a7c15));
            sample(&mut rng) as f32
        })
        .collect();
    // separable [1,2,1]/4 smoothing along each axis
    let idx = |i: usize, j: usize, k: usize| (j * w + i) * d + k;
    let mut tmp = field.clone();
    for (src, dst, axis) in [(0usize, 1usize, 0usize), (1, 0, 1), (0, 1, 2)] {
        let (from, to): (&Vec<f32>, &mut Vec<f32>) = if src == 0 {
            (&field, &mut tmp)
        } else {
            (&tmp, &mut field)
        };
        let _ = dst;
        to.par_iter_mut().enumerate().for_each(|(q, v)| {
            let k = q % d;
            let i = (q / d) % w;
            let j = q / (d * w);
            let fetch = |ii: i64, jj: i64, kk: i64| {
                from[idx(
                    ii.clamp(0, w as i64 - 1) as usize,
                    jj.clamp(0, h as i64 - 1) as usize,
                    kk.clamp(0, d as i64 - 1) as usize,
                )]
            };
            let (i, j, k) = (i as i64, j as i64, k as i64);
            let (a, b, c) = match axis {
                0 => (fetch(i - 1, j, k), fetch(i, j, k), fetch(i + 1, j, k)),
                1 => (fetch(i, j - 1, k), fetch(i, j, k), fetch(i, j + 1, k)),
                _ => (fetch(i, j, k - 1), fetch(i, j, k), fetch(i, j, k + 1)),
            };
            *v = 0.25 * a + 0.5 * b + 0.25 * c;
        });
    }
    // three passes end in `field` (axis 0 wrote tmp, 1 wrote field, 2 wrote tmp)
    tmp
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 || self.depth < 16 {
            return Err(Error::InvalidInput(
                "phantom grid must be at least 8x8x16".into(),
            ));
        }
        if !(self.ez_offset > 0.0)
            || !(self.os_rpe_offset > self.ez_offset)
            || !(self.rpe_offset > self.os_rpe_offset)
        {
            return Err(Error::InvalidInput(
                "layer offsets must be ordered ILM < EZ < OS-RPE < posterior RPE".into(),
            ));
        }
        let max_depth = self.ilm_depth + self.pit_depth + self.curvature + self.rpe_offset;
        if max_depth >= self.depth as f64 - 2.0 {
            return Err(Error::InvalidInput(format!(
                "layers reach depth {max_depth:.1}, grid has {}",
                self.depth
            )));
        }
        if self.vessels.iter().any(|v| !(v.radius > 0.0)) {
            return Err(Error::InvalidInput("vessel radii must be positive".into()));
        }
        Ok(())
    }

    /// ILM depth surface.
    pub fn ilm_at(&self, x: f64, y: f64) -> f64 {
        let (cx, cy) = ((self.width as f64 - 1.0) / 2.0, (self.height as f64 - 1.0) / 2.0);
        let r2 = (x - cx).powi(2) + (y - cy).powi(2);
        let pit = self.pit_depth * (-r2 / (2.0 * self.pit_radius * self.pit_radius)).exp();
        let corner2 = cx * cx + cy * cy;
        self.ilm_depth + pit + self.curvature * (r2 / corner2)
    }
}

/// Build the phantom volumes and ground truth.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let geometry = GridGeometry::desk(spec.width, spec.height, spec.depth, FastAxis::X);
    let (w, h, d) = (spec.width, spec.height, spec.depth);
    let contrast = spec.layer_contrast;

    let mut layers = LayerSet::new(w, h);
    let mut ilm = vec![0.0; w * h];
    let mut ez = vec![0.0; w * h];
    let mut os_rpe = vec![0.0; w * h];
    let mut rpe = vec![0.0; w * h];
    // inner retina thickness varies smoothly across the field, giving the
    // structural term transverse features between the vessel scales
    let thickness_amp =
        (spec.thickness_sway * spec.ez_offset).min(0.4 * (spec.os_rpe_offset - spec.ez_offset));
    for j in 0..h {
        for i in 0..w {
            let z = spec.ilm_at(i as f64, j as f64);
            let (u, v) = (i as f64 / w as f64, j as f64 / h as f64);
            let sway = thickness_amp
                * ((u * 8.2 + 0.5).sin() * (v * 6.9).cos() * 0.6
                    + (u * 3.1 - v * 5.3 + 1.2).sin() * 0.4);
            ilm[j * w + i] = z;
            ez[j * w + i] = z + spec.ez_offset + sway;
            os_rpe[j * w + i] = z + spec.os_rpe_offset + sway;
            rpe[j * w + i] = z + spec.rpe_offset + sway;
        }
    }
    layers.insert(LayerBoundary::Ilm, ilm.clone());
    layers.insert(LayerBoundary::Ez, ez.clone());
    layers.insert(LayerBoundary::OsRpe, os_rpe.clone());
    layers.insert(LayerBoundary::PosteriorRpe, rpe.clone());

    // transverse vessel geometry per A-scan
    let transverse: Vec<(f64, f64)> = (0..w * h)
        .into_par_iter()
        .map(|q| vessel_distance(&spec.vessels, (q % w) as f64, (q / w) as f64))
        .collect();
    let vessel_mask: Vec<bool> = transverse.iter().map(|&(d, r)| d <= r).collect();

    // shared noise fields with PSF-scale grain: speckle is a tissue
    // interference pattern and decorrelation texture is a flow property, so
    // repeated scans see the same realization
    let speckle_field = correlated_field(w, h, d, spec.seed ^ 0x5eed_51de, |rng| rng.speckle());
    let texture_field =
        correlated_field(w, h, d, spec.seed ^ 0x7e87_0a3b, |rng| rng.uniform() - 0.5);

    let mut structural = Volume::zeros(geometry, VolumeKind::Structural);
    let mut angiography = Volume::zeros(geometry, VolumeKind::Angiography);
    let base = 0.2;
    let _seed = spec.seed;
    let noise = spec.noise_level;
    // axial PSF kernel applied to the noise-free columns
    let psf: Vec<f64> = {
        let sigma = spec.axial_psf_sigma.max(1e-3);
        let half = (3.0 * sigma).ceil() as i64;
        let k: Vec<f64> = (-half..=half)
            .map(|o| (-0.5 * (o as f64 / sigma).powi(2)).exp())
            .collect();
        let sum: f64 = k.iter().sum();
        k.into_iter().map(|v| v / sum).collect()
    };
    let psf_half = (psf.len() / 2) as i64;
    structural
        .data_mut()
        .par_chunks_mut(d)
        .zip(angiography.data_mut().par_chunks_mut(d))
        .enumerate()
        .for_each(|(q, (s_col, a_col))| {
            let zi = ilm[q];
            let ze = ez[q];
            let zo = os_rpe[q];
            let zr = rpe[q];
            let (vdist, vrad) = transverse[q];
            let vz = zi + spec.vessel_depth;
            // the vessel chord above this A-scan controls its shadow
            let chord = if vdist < vrad {
                (vrad * vrad - vdist * vdist).sqrt()
            } else {
                0.0
            };
            let shadow = 1.0 - 0.45 * (chord / vrad.max(1e-6)).min(1.0);
            let structural_at = |z: f64| -> f64 {
                let v = if z < zi {
                    0.04
                } else if z < zi + 2.0 {
                    base + contrast * 0.65
                } else if z < ze {
                    base + contrast * 0.25
                } else if z < ze + 2.0 {
                    base + contrast * 0.7
                } else if z < zo {
                    base + contrast * 0.1
                } else if z < zr {
                    base + contrast * 0.75
                } else {
                    let fall = (-(z - zr) / 8.0).exp();
                    0.08 + (base + contrast * 0.2) * fall
                };
                // light is attenuated under perfused vessels
                if z > vz && chord > 0.0 {
                    v * shadow
                } else {
                    v
                }
            };
            let decorrelation_at = |z: f64| -> f64 {
                if z >= zi && z <= zr {
                    let dz = z - vz;
                    let in_tube = vdist <= vrad && dz * dz <= vrad * vrad - vdist * vdist;
                    if in_tube {
                        0.9
                    } else {
                        0.12
                    }
                } else {
                    0.85
                }
            };
            for k in 0..d {
                // finite axial PSF: band edges transition over ~a voxel
                let mut intensity = 0.0;
                let mut dec = 0.0;
                for (o, &kv) in psf.iter().enumerate() {
                    let z = (k as i64 + o as i64 - psf_half).clamp(0, d as i64 - 1) as f64;
                    intensity += kv * structural_at(z);
                    dec += kv * decorrelation_at(z);
                }
                intensity *= 1.0 + noise * (speckle_field[q * d + k] as f64 - 1.0);
                s_col[k] = intensity.max(0.0) as f32;
                // decorrelation texture is a flow property shared between
                // repeated scans; static tissue decorrelates far less than
                // perfused voxels or the signal-starved background
                let z = k as f64;
                let in_tube =
                    vdist <= vrad && (z - vz) * (z - vz) <= vrad * vrad - vdist * vdist;
                let tex = if in_tube {
                    0.3
                } else if z >= zi && z <= zr {
                    0.1
                } else {
                    0.8
                };
                dec += noise * tex * texture_field[q * d + k] as f64;
                a_col[k] = dec.clamp(0.0, 1.0) as f32;
            }
        });

    Ok(Phantom {
        structural,
        angiography,
        layers,
        vessel_mask,
        spec: spec.clone(),
    })
}

/// One saccadic jump.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Saccade {
    /// Continuous B-scan index at which the jump happens.
    pub time: f64,
    /// Transverse jump in voxels.
    pub jump: [f64; 2],
}

/// Eye-motion model for one scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionSpec {
    /// Peak drift amplitude per axis (x, y, z) in voxels.
    pub drift_amplitude: [f64; 3],
    /// Independent wiggles across the scan duration; higher is rougher.
    pub drift_bandwidth: f64,
    pub saccades: Vec<Saccade>,
    /// Axial sinusoid amplitude in voxels.
    pub breathing_amplitude: f64,
    pub breathing_cycles: f64,
    /// Additive sensor noise per scan (structural std in intensity units).
    pub scan_noise: f64,
    pub seed: u64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            drift_amplitude: [3.0, 3.0, 4.0],
            drift_bandwidth: 3.0,
            saccades: Vec::new(),
            breathing_amplitude: 2.0,
            breathing_cycles: 1.5,
            scan_noise: 0.02,
            seed: 1,
        }
    }
}

/// Sampled motion trajectory over the B-scans of one scan.
pub struct MotionTrajectory {
    /// Per-axis drift (+ breathing) at integer B-scan times.
    drift: Vec<[f64; 3]>,
    saccades: Vec<Saccade>,
}

impl MotionTrajectory {
    /// Motion at a continuous B-scan time.
    pub fn at(&self, t: f64) -> [f64; 3] {
        let n = self.drift.len();
        let tc = t.clamp(0.0, (n - 1) as f64);
        let i0 = (tc.floor() as usize).min(n - 2);
        let frac = tc - i0 as f64;
        let mut m = [0.0; 3];
        for c in 0..3 {
            m[c] = self.drift[i0][c] * (1.0 - frac) + self.drift[i0 + 1][c] * frac;
        }
        for s in &self.saccades {
            if t >= s.time {
                m[0] += s.jump[0];
                m[1] += s.jump[1];
            }
        }
        m
    }
}

/// Build the deterministic trajectory for `n_bscans` acquisitions.
pub fn build_trajectory(motion: &MotionSpec, n_bscans: usize) -> Result<MotionTrajectory> {
    for s in &motion.saccades {
        if !(s.time >= 0.0 && s.time < n_bscans as f64) {
            return Err(Error::InvalidInput(format!(
                "saccade at time {} outside the scan duration (0..{n_bscans})",
                s.time
            )));
        }
    }
    let n = n_bscans;
    let mut rng = SplitMix::new(motion.seed.wrapping_mul(0xa076_1d64_78bd_642f));
    // random walk, smoothed, then pinned to zero start and peak-normalized
    let sigma = n as f64 / (4.0 * motion.drift_bandwidth.max(0.5));
    let half = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|o| (-0.5 * (o as f64 / sigma).powi(2)).exp())
        .collect();
    let ksum: f64 = kernel.iter().sum();
    let mut drift = vec![[0.0f64; 3]; n];
    for c in 0..3 {
        let mut walk = Vec::with_capacity(n);
        let mut acc = 0.0;
        for _ in 0..n {
            acc += rng.normal();
            walk.push(acc);
        }
        let smooth: Vec<f64> = (0..n)
            .map(|b| {
                let mut s = 0.0;
                for (o, kv) in kernel.iter().enumerate() {
                    let idx = (b as i64 + o as i64 - half).clamp(0, n as i64 - 1) as usize;
                    s += kv * walk[idx];
                }
                s / ksum
            })
            .collect();
        let peak = smooth
            .iter()
            .map(|v| (v - smooth[0]).abs())
            .fold(0.0f64, f64::max);
        let scale = if peak > 0.0 {
            motion.drift_amplitude[c] / peak
        } else {
            0.0
        };
        for (b, s) in smooth.iter().enumerate() {
            drift[b][c] = (s - smooth[0]) * scale;
        }
    }
    for (b, m) in drift.iter_mut().enumerate() {
        let phase = b as f64 / (n - 1).max(1) as f64;
        m[2] += motion.breathing_amplitude
            * (std::f64::consts::TAU * motion.breathing_cycles * phase).sin();
    }
    Ok(MotionTrajectory {
        drift,
        saccades: motion.saccades.clone(),
    })
}

/// One scanned element of an orthogonal pair.
pub struct ScannedVolume {
    pub structural: Volume,
    pub angiography: Volume,
    /// Exact field mapping the motion-free grid into this scan.
    pub true_field: DisplacementField,
    /// B-scans acquired during a saccade (saturated in the OCTA volume).
    pub saturated: Vec<usize>,
}

/// Scan a phantom under a motion trajectory.
///
/// The scanned B-scan at slow index `b` samples the phantom displaced by the
/// motion at acquisition time `b` (A-scan timing within B-scans is not
/// modeled). The returned field is the exact per-A-scan correction: sampling
/// the scan at `p + field(p)` reproduces the phantom wherever coverage
/// exists.
pub fn apply_motion(
    phantom: &Phantom,
    motion: &MotionSpec,
    fast_axis: FastAxis,
) -> Result<ScannedVolume> {
    let base = phantom.structural.geometry;
    let geometry = GridGeometry::new(
        base.width,
        base.height,
        base.depth,
        base.transverse_spacing_um,
        base.axial_spacing_um,
        fast_axis,
    )?;
    let n_slow = geometry.n_bscans();
    let trajectory = build_trajectory(motion, n_slow)?;

    let max_motion = (0..n_slow)
        .map(|b| {
            let m = trajectory.at(b as f64);
            m[0].abs().max(m[1].abs()).max(m[2].abs())
        })
        .fold(0.0f64, f64::max);
    let min_dim = geometry.width.min(geometry.height).min(geometry.depth) as f64;
    if max_motion >= min_dim / 2.0 {
        return Err(Error::InvalidInput(format!(
            "motion amplitude {max_motion:.1} leaves the {min_dim}-voxel grid"
        )));
    }

    let saturated: Vec<usize> = {
        let mut list: Vec<usize> = motion
            .saccades
            .iter()
            .map(|s| (s.time.floor() as usize).min(n_slow - 1))
            .collect();
        list.sort_unstable();
        list.dedup();
        list
    };

    let mut structural = Volume::zeros(geometry, VolumeKind::Structural);
    let mut angiography = Volume::zeros(geometry, VolumeKind::Angiography);
    let w = geometry.width;
    let d = geometry.depth;
    let seed = motion.seed;
    let noise = motion.scan_noise;
    structural
        .data_mut()
        .par_chunks_mut(d)
        .zip(angiography.data_mut().par_chunks_mut(d))
        .enumerate()
        .for_each(|(q, (s_col, a_col))| {
            let i = q % w;
            let j = q / w;
            let b = geometry.bscan_of(i, j);
            let m = trajectory.at(b as f64);
            let x = i as f64 - m[0];
            let y = j as f64 - m[1];
            let is_saturated = saturated.binary_search(&b).is_ok();
            let mut rng = SplitMix::new(
                seed ^ (q as u64).wrapping_mul(0xd6e8_feb8_6659_fd93) ^ 0x5851,
            );
            for k in 0..d {
                let z = k as f64 - m[2];
                let sv = sample_3d(&phantom.structural, x, y, z)
                    + noise * rng.normal();
                s_col[k] = sv.max(0.0) as f32;
                let av = if is_saturated {
                    1.0 - 0.02 * rng.uniform()
                } else {
                    sample_3d(&phantom.angiography, x, y, z) + noise * 0.5 * rng.normal()
                };
                a_col[k] = av.clamp(0.0, 1.0) as f32;
            }
        });

    // exact inverse field: solve s - m_slow(s) = p_slow per corrected slow
    // index (first crossing; coverage gaps clamp to the lower edge)
    let slow_axis_of = |m: [f64; 3]| match fast_axis {
        FastAxis::X => m[1],
        FastAxis::Y => m[0],
    };
    let fine_steps = 20usize;
    let g_at = |s: f64| s - slow_axis_of(trajectory.at(s));
    let sources: Vec<f64> = (0..n_slow)
        .map(|p_slow| {
            let target = p_slow as f64;
            let mut prev_s = 0.0;
            let mut prev_g = g_at(0.0);
            if prev_g >= target {
                // coverage starts past this position: extend with the motion
                // at the first B-scan so the field stays continuous
                return target + slow_axis_of(trajectory.at(0.0));
            }
            let total = (n_slow - 1) * fine_steps;
            for step in 1..=total {
                let s = step as f64 / fine_steps as f64;
                let g = g_at(s);
                if g >= target {
                    if g > prev_g {
                        // linear interpolation inside the bracket
                        return prev_s + (target - prev_g) / (g - prev_g) * (s - prev_s);
                    }
                    return s;
                }
                prev_s = s;
                prev_g = g;
            }
            // coverage ends before this position: extend with the last
            // B-scan's motion
            target + slow_axis_of(trajectory.at((n_slow - 1) as f64))
        })
        .collect();

    let true_field = DisplacementField::from_fn(w, geometry.height, fast_axis, |i, j| {
        let p_slow = geometry.bscan_of(i, j);
        let s = sources[p_slow];
        let m = trajectory.at(s);
        match fast_axis {
            FastAxis::X => [m[0], s - p_slow as f64, m[2]],
            FastAxis::Y => [s - p_slow as f64, m[1], m[2]],
        }
    });

    Ok(ScannedVolume {
        structural,
        angiography,
        true_field,
        saturated,
    })
}

/// Relative-displacement error of an estimated field pair against truth.
///
/// Both the estimated and the true relative displacement (X minus Y) are
/// mean-removed per component before comparison: registration is pinned
/// only up to a joint translation.
pub fn displacement_error(
    estimated: (&DisplacementField, &DisplacementField),
    truth: (&DisplacementField, &DisplacementField),
) -> Result<DisplacementError> {
    let (ex, ey) = estimated;
    let (tx, ty) = truth;
    let n = ex.n_ascans();
    if ey.n_ascans() != n || tx.n_ascans() != n || ty.n_ascans() != n {
        return Err(Error::GeometryMismatch("field sizes differ".into()));
    }
    let relative = |a: &DisplacementField, b: &DisplacementField| -> Vec<[f64; 3]> {
        let mut rel: Vec<[f64; 3]> = a
            .vectors()
            .iter()
            .zip(b.vectors())
            .map(|(va, vb)| [va[0] - vb[0], va[1] - vb[1], va[2] - vb[2]])
            .collect();
        let mut mean = [0.0f64; 3];
        for v in &rel {
            for c in 0..3 {
                mean[c] += v[c];
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        for v in &mut rel {
            for c in 0..3 {
                v[c] -= mean[c];
            }
        }
        rel
    };
    let est = relative(ex, ey);
    let tru = relative(tx, ty);
    let mut sq_transverse = 0.0;
    let mut sq_axial = 0.0;
    for (e, t) in est.iter().zip(&tru) {
        sq_transverse += (e[0] - t[0]).powi(2) + (e[1] - t[1]).powi(2);
        sq_axial += (e[2] - t[2]).powi(2);
    }
    Ok(DisplacementError {
        transverse_rmse: (sq_transverse / n as f64).sqrt(),
        axial_rmse: (sq_axial / n as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DisplacementError {
    pub transverse_rmse: f64,
    pub axial_rmse: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interp::resample_volume;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            width: 32,
            height: 32,
            depth: 32,
            ilm_depth: 8.0,
            pit_depth: 3.0,
            pit_radius: 6.0,
            curvature: 2.0,
            ez_offset: 9.0,
            os_rpe_offset: 11.0,
            rpe_offset: 13.0,
            vessels: default_vessels(32.0, 32.0),
            noise_level: 0.0,
            seed: 11,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn flat_layers_report_their_construction_depths() {
        let spec = PhantomSpec {
            pit_depth: 0.0,
            curvature: 0.0,
            ilm_depth: 10.0,
            ez_offset: 20.0,
            os_rpe_offset: 25.0,
            rpe_offset: 30.0,
            width: 16,
            height: 16,
            depth: 48,
            vessels: vec![],
            noise_level: 0.0,
            thickness_sway: 0.0,
            ..PhantomSpec::default()
        };
        let p = generate_phantom(&spec).unwrap();
        for &z in p.layers.get(LayerBoundary::Ilm).unwrap() {
            assert_eq!(z, 10.0);
        }
        for &z in p.layers.get(LayerBoundary::PosteriorRpe).unwrap() {
            assert_eq!(z, 40.0);
        }
    }

    #[test]
    fn vessel_tubes_carry_high_decorrelation() {
        let mut spec = small_spec();
        spec.vessels = vec![Vessel {
            path: vec![[4.0, 16.0], [28.0, 16.0]],
            radius: 2.0,
        }];
        let p = generate_phantom(&spec).unwrap();
        // on the centerline at the vessel depth: high; off it: background
        let zi = spec.ilm_at(16.0, 16.0);
        let zv = (zi + spec.vessel_depth).round() as usize;
        assert!(p.angiography.at(16, 16, zv) > 0.7);
        assert!(p.angiography.at(16, 24, zv) < 0.3);
        assert!(p.vessel_mask[16 * 32 + 16]);
        assert!(!p.vessel_mask[24 * 32 + 16]);
    }

    #[test]
    fn same_seed_reproduces_identical_bytes() {
        let spec = PhantomSpec {
            noise_level: 0.4,
            ..small_spec()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.structural.data(), b.structural.data());
        assert_eq!(a.angiography.data(), b.angiography.data());
        let motion = MotionSpec {
            saccades: vec![Saccade { time: 10.2, jump: [2.0, 0.0] }],
            ..MotionSpec::default()
        };
        let sa = apply_motion(&a, &motion, FastAxis::X).unwrap();
        let sb = apply_motion(&b, &motion, FastAxis::X).unwrap();
        assert_eq!(sa.structural.data(), sb.structural.data());
        assert_eq!(sa.angiography.data(), sb.angiography.data());
        assert_eq!(sa.true_field, sb.true_field);
    }

    #[test]
    fn zero_motion_is_the_identity() {
        let p = generate_phantom(&small_spec()).unwrap();
        let motion = MotionSpec {
            drift_amplitude: [0.0; 3],
            breathing_amplitude: 0.0,
            scan_noise: 0.0,
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::X).unwrap();
        assert_eq!(s.true_field.max_abs(), 0.0);
        assert!(s.saturated.is_empty());
        for (a, b) in s.structural.data().iter().zip(p.structural.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_drift_yields_constant_true_field() {
        let p = generate_phantom(&small_spec()).unwrap();
        // constant +2 x drift on a Y-fast scan (slow axis = x)
        let motion = MotionSpec {
            drift_amplitude: [0.0; 3],
            breathing_amplitude: 0.0,
            scan_noise: 0.0,
            saccades: vec![
                // a saccade at time 0 acts as a constant offset over the scan
                Saccade { time: 0.0, jump: [2.0, 0.0] },
            ],
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::Y).unwrap();
        // interior rows: Δx = 2 exactly (edge rows lose coverage and clamp)
        for i in 0..29 {
            let v = s.true_field.at(i, 7);
            assert!((v[0] - 2.0).abs() < 1e-9, "i={i}: {v:?}");
            assert_eq!(v[1], 0.0);
        }
        // the scan equals the resampled phantom where coverage exists
        let r = resample_volume(&s.structural, &s.true_field).unwrap();
        for j in 0..32 {
            for i in 0..28 {
                for k in 0..32 {
                    let got = r.at(i, j, k);
                    let want = p.structural.at(i, j, k);
                    assert!(
                        (got - want).abs() < 2e-2,
                        "({i},{j},{k}): {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn saccade_steps_the_field_and_saturates_its_bscan() {
        let p = generate_phantom(&small_spec()).unwrap();
        let motion = MotionSpec {
            drift_amplitude: [0.0; 3],
            breathing_amplitude: 0.0,
            scan_noise: 0.0,
            saccades: vec![Saccade { time: 20.0, jump: [3.0, 0.0] }],
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::X).unwrap();
        assert_eq!(s.saturated, vec![20]);
        // fast-axis jump: no coverage gap, Δx steps from 0 to 3 at row 20
        assert_eq!(s.true_field.at(5, 10)[0], 0.0);
        assert!((s.true_field.at(5, 25)[0] - 3.0).abs() < 1e-9);
        // saturated B-scan reads near 1 in the OCTA volume
        let mean: f64 = (0..32)
            .map(|i| s.angiography.at(i, 20, 10) as f64)
            .sum::<f64>()
            / 32.0;
        assert!(mean > 0.95, "saturated mean {mean}");
    }

    #[test]
    fn inverse_resampling_recovers_the_phantom() {
        let p = generate_phantom(&small_spec()).unwrap();
        let motion = MotionSpec {
            drift_amplitude: [1.5, 1.5, 2.0],
            drift_bandwidth: 2.0,
            breathing_amplitude: 1.0,
            scan_noise: 0.0,
            seed: 3,
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::X).unwrap();
        let recovered = resample_volume(&s.structural, &s.true_field).unwrap();
        let mae = |a: &Volume, b: &Volume| -> f64 {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs() as f64)
                .sum::<f64>()
                / a.data().len() as f64
        };
        let motion_error = mae(&recovered, &p.structural);

        // reference: pure resampling round trip with a constant half-voxel
        // shift and its exact inverse
        let shift = DisplacementField::from_fn(32, 32, FastAxis::X, |_, _| [0.5, 0.5, 0.5]);
        let unshift = DisplacementField::from_fn(32, 32, FastAxis::X, |_, _| [-0.5, -0.5, -0.5]);
        let round = resample_volume(&resample_volume(&p.structural, &shift).unwrap(), &unshift)
            .unwrap();
        let reference_error = mae(&round, &p.structural);
        assert!(
            motion_error <= 2.0 * reference_error + 1e-4,
            "{motion_error} vs reference {reference_error}"
        );
    }

    #[test]
    fn true_fields_are_constant_along_the_fast_axis() {
        let p = generate_phantom(&small_spec()).unwrap();
        let motion = MotionSpec {
            saccades: vec![Saccade { time: 11.7, jump: [1.0, -2.0] }],
            seed: 9,
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::X).unwrap();
        for j in 0..32 {
            let first = s.true_field.at(0, j);
            for i in 1..32 {
                assert_eq!(s.true_field.at(i, j), first);
            }
        }
    }

    #[test]
    fn saturated_list_matches_saccade_instants() {
        let p = generate_phantom(&small_spec()).unwrap();
        let motion = MotionSpec {
            saccades: vec![
                Saccade { time: 5.2, jump: [1.0, 0.0] },
                Saccade { time: 5.9, jump: [0.5, 0.0] },
                Saccade { time: 21.0, jump: [0.0, 1.0] },
            ],
            ..MotionSpec::default()
        };
        let s = apply_motion(&p, &motion, FastAxis::X).unwrap();
        assert_eq!(s.saturated, vec![5, 21]);
        assert!(apply_motion(
            &p,
            &MotionSpec {
                saccades: vec![Saccade { time: 40.0, jump: [1.0, 0.0] }],
                ..MotionSpec::default()
            },
            FastAxis::X
        )
        .is_err());
    }

    #[test]
    fn displacement_error_cases() {
        let f = |v: [f64; 3]| DisplacementField::from_fn(4, 4, FastAxis::X, move |_, _| v);
        let zero = f([0.0; 3]);
        // exact estimate
        let e = displacement_error((&zero, &zero), (&zero, &zero)).unwrap();
        assert_eq!(e.transverse_rmse, 0.0);
        assert_eq!(e.axial_rmse, 0.0);
        // a shared global constant cancels
        let c = f([2.0, -1.0, 3.0]);
        let e = displacement_error((&c, &c), (&zero, &zero)).unwrap();
        assert!(e.transverse_rmse < 1e-12 && e.axial_rmse < 1e-12);
        // unit x-step on half the field: mean-removed RMSE 0.5
        let half = DisplacementField::from_fn(4, 4, FastAxis::X, |_, j| {
            [if j < 2 { 1.0 } else { 0.0 }, 0.0, 0.0]
        });
        let e = displacement_error((&half, &zero), (&zero, &zero)).unwrap();
        assert!((e.transverse_rmse - 0.5).abs() < 1e-12);
    }
}
