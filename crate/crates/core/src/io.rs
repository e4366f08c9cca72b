//! On-disk formats.
//!
//! Volumes are little-endian `f32` raw arrays in `k` fastest, then `i`, then
//! `j` order, next to a JSON sidecar (same path with `.json` instead of
//! `.raw`) carrying dimensions, spacings, fast axis and kind. Displacement
//! fields are `f32` `(dx, dy, dz)` triplets per A-scan, `i` fastest, with
//! their own sidecar. Round-trips are bit exact. Images for visual
//! inspection are written as binary 8-bit PGM.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DisplacementField, FieldHeader};
use crate::geom::{FastAxis, GridGeometry};
use crate::volume::{EnFaceImage, Volume, VolumeKind};

/// Sidecar describing a raw volume file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
    pub transverse_spacing_um: f64,
    pub axial_spacing_um: f64,
    pub fast_axis: FastAxis,
    pub kind: VolumeKind,
}

impl VolumeHeader {
    pub fn of(volume: &Volume) -> Self {
        let g = volume.geometry;
        Self {
            width: g.width,
            height: g.height,
            depth: g.depth,
            transverse_spacing_um: g.transverse_spacing_um,
            axial_spacing_um: g.axial_spacing_um,
            fast_axis: g.fast_axis,
            kind: volume.kind,
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(
            self.width,
            self.height,
            self.depth,
            self.transverse_spacing_um,
            self.axial_spacing_um,
            self.fast_axis,
        )
    }
}

fn sidecar_path(raw: &Path) -> PathBuf {
    raw.with_extension("json")
}

pub fn write_volume(path: &Path, volume: &Volume) -> Result<()> {
    let mut bytes = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = VolumeHeader::of(volume);
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let header: VolumeHeader = read_sidecar(&sidecar_path(path))?;
    let geometry = header.geometry()?;
    let bytes = fs::read(path)?;
    let expected = geometry.n_voxels() * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(geometry, header.kind, data)
}

fn read_sidecar<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_field(path: &Path, field: &DisplacementField) -> Result<()> {
    let mut bytes = Vec::with_capacity(field.n_ascans() * 12);
    for v in field.vectors() {
        for c in v {
            bytes.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    let header = FieldHeader {
        width: field.width,
        height: field.height,
        units: "voxels".into(),
        scan: field.scan,
    };
    let json = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<DisplacementField> {
    let header: FieldHeader = read_sidecar(&sidecar_path(path))?;
    if header.units != "voxels" {
        return Err(Error::Format(format!(
            "unsupported displacement units {:?}",
            header.units
        )));
    }
    let bytes = fs::read(path)?;
    let expected = header.width * header.height * 12;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let vectors: Vec<[f64; 3]> = bytes
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| {
                f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64
            };
            [f(0), f(4), f(8)]
        })
        .collect();
    DisplacementField::from_vectors(header.width, header.height, header.scan, vectors)
}

/// Write an en-face image as binary 8-bit PGM, mapping `[lo, hi]` to 0..255.
pub fn write_pgm(path: &Path, image: &EnFaceImage, lo: f64, hi: f64) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = Vec::with_capacity(image.data().len() + 32);
    write!(out, "P5\n{} {}\n255\n", image.width, image.height)?;
    for &v in image.data() {
        let scaled = ((v - lo) / span * 255.0).round().clamp(0.0, 255.0);
        out.push(scaled as u8);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a boolean transverse mask as a 0/255 PGM.
pub fn write_mask_pgm(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::InvalidInput("mask size does not match dimensions".into()));
    }
    let mut out = Vec::with_capacity(mask.len() + 32);
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.extend(mask.iter().map(|&m| if m { 255u8 } else { 0 }));
    fs::write(path, out)?;
    Ok(())
}

/// Read a 0/255 PGM written by [`write_mask_pgm`].
pub fn read_mask_pgm(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let bytes = fs::read(path)?;
    let header_err = || Error::Format(format!("{}: not a binary PGM", path.display()));
    // header: "P5", width, height, maxval as whitespace-separated tokens,
    // then a single whitespace byte before the pixel data
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Option<(usize, usize)> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then_some((start, pos))
    };
    let (s, e) = token(&bytes).ok_or_else(header_err)?;
    if &bytes[s..e] != b"P5" {
        return Err(header_err());
    }
    let mut number = || -> Result<usize> {
        let (s, e) = token(&bytes).ok_or_else(header_err)?;
        std::str::from_utf8(&bytes[s..e])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(header_err)
    };
    let width = number()?;
    let height = number()?;
    let _maxval = number()?;
    let start = pos + 1; // one whitespace byte after maxval
    if bytes.len() < start + width * height {
        return Err(header_err());
    }
    let pixels = &bytes[start..start + width * height];
    Ok((width, height, pixels.iter().map(|&p| p > 127).collect()))
}

/// Sidecar of a raw 2-D feature map.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageHeader {
    pub width: usize,
    pub height: usize,
}

/// Write an en-face/feature image as raw little-endian `f32`, `i` fastest.
pub fn write_image_raw(path: &Path, image: &EnFaceImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(image.data().len() * 4);
    for &v in image.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    let header = ImageHeader {
        width: image.width,
        height: image.height,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&header)
            .map_err(|e| Error::Format(format!("sidecar encode: {e}")))?,
    )?;
    Ok(())
}

pub fn read_image_raw(path: &Path) -> Result<EnFaceImage> {
    let header: ImageHeader = read_sidecar(&sidecar_path(path))?;
    let bytes = fs::read(path)?;
    let expected = header.width * header.height * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EnFaceImage::new(header.width, header.height, data)
}

/// One metric row of the evaluation CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub pair_id: String,
    pub metric: String,
    pub mean: f64,
    pub median: f64,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut out = String::from("pair_id,metric,mean,median\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.pair_id, r.metric, r.mean, r.median));
    }
    fs::write(path, out)?;
    Ok(())
}
