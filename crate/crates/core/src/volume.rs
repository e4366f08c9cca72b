//! Volume and en-face image containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::GridGeometry;

/// What a volume's scalar field means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeKind {
    /// OCT reflectivity.
    Structural,
    /// OCTA decorrelation, normalized to `[0, 1]`.
    Angiography,
}

/// A 3-D scalar field on a scan grid.
///
/// Data is stored A-scan contiguous: index `(i, j, k)` lives at
/// `(j * width + i) * depth + k`, i.e. `k` fastest, then `i`, then `j` —
/// the same order as the on-disk raw format.
#[derive(Debug, Clone)]
pub struct Volume {
    pub geometry: GridGeometry,
    pub kind: VolumeKind,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: GridGeometry, kind: VolumeKind, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.n_voxels() {
            return Err(Error::InvalidInput(format!(
                "volume data length {} does not match grid {}x{}x{}",
                data.len(),
                geometry.width,
                geometry.height,
                geometry.depth
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("volume contains non-finite values".into()));
        }
        Ok(Self { geometry, kind, data })
    }

    pub fn zeros(geometry: GridGeometry, kind: VolumeKind) -> Self {
        Self {
            geometry,
            kind,
            data: vec![0.0; geometry.n_voxels()],
        }
    }

    pub fn filled(geometry: GridGeometry, kind: VolumeKind, value: f32) -> Self {
        Self {
            geometry,
            kind,
            data: vec![value; geometry.n_voxels()],
        }
    }

    /// Build from a function of the voxel index.
    pub fn from_fn(
        geometry: GridGeometry,
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(geometry.n_voxels());
        for j in 0..geometry.height {
            for i in 0..geometry.width {
                for k in 0..geometry.depth {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { geometry, kind, data }
    }

    #[inline]
    pub fn ascan_index(&self, i: usize, j: usize) -> usize {
        j * self.geometry.width + i
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[(j * self.geometry.width + i) * self.geometry.depth + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f32) {
        self.data[(j * self.geometry.width + i) * self.geometry.depth + k] = v;
    }

    /// The depth profile under transverse position `(i, j)`.
    #[inline]
    pub fn ascan(&self, i: usize, j: usize) -> &[f32] {
        let d = self.geometry.depth;
        let base = (j * self.geometry.width + i) * d;
        &self.data[base..base + d]
    }

    pub fn ascan_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let d = self.geometry.depth;
        let base = (j * self.geometry.width + i) * d;
        &mut self.data[base..base + d]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Iterate A-scan slices of B-scan `b` in fast-axis order.
    pub fn bscan_ascans(&self, b: usize) -> impl Iterator<Item = &[f32]> + '_ {
        (0..self.geometry.bscan_len()).map(move |f| {
            let (i, j) = self.geometry.ascan_at(b, f);
            self.ascan(i, j)
        })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// A 2-D per-A-scan image on the transverse grid of its source volume.
///
/// Row-major with `j` as the row index: `(i, j)` lives at `j * width + i`.
#[derive(Debug, Clone)]
pub struct EnFaceImage {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl EnFaceImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "en-face data length {} does not match {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                data.push(f(i, j));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.width + i] = v;
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.width..(j + 1) * self.width]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &EnFaceImage) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::FastAxis;

    #[test]
    fn layout_is_k_fastest_then_i_then_j() {
        let g = GridGeometry::desk(3, 2, 4, FastAxis::X);
        let v = Volume::from_fn(g, VolumeKind::Structural, |i, j, k| {
            (100 * j + 10 * i + k) as f32
        });
        // flat order: j=0 { i=0 {k..}, i=1 {k..}, ... }
        assert_eq!(v.data()[0], 0.0);
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[4], 10.0);
        assert_eq!(v.data()[12], 100.0);
        assert_eq!(v.at(2, 1, 3), 123.0);
        assert_eq!(v.ascan(2, 1), &[120.0, 121.0, 122.0, 123.0]);
    }

    #[test]
    fn rejects_nan_and_bad_lengths() {
        let g = GridGeometry::desk(2, 2, 2, FastAxis::X);
        assert!(Volume::new(g, VolumeKind::Structural, vec![0.0; 7]).is_err());
        let mut data = vec![0.0f32; 8];
        data[3] = f32::NAN;
        assert!(Volume::new(g, VolumeKind::Structural, data).is_err());
    }
}
