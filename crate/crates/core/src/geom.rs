//! Scan-grid geometry.
//!
//! A raster scan samples a `w × h` grid of A-scans, each `d` voxels deep.
//! Voxel coordinates are 0-based with unit spacing internally; the physical
//! spacings are carried along and only applied when metrics are reported in
//! micrometers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which transverse axis the B-scans run along.
///
/// An X-fast scan acquires rows (fixed `j`, sweeping `i`), a Y-fast scan
/// acquires columns. Slices along the fast axis are nearly motion free; the
/// slow axis accumulates eye motion between B-scans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastAxis {
    X,
    Y,
}

impl FastAxis {
    pub fn orthogonal(self) -> FastAxis {
        match self {
            FastAxis::X => FastAxis::Y,
            FastAxis::Y => FastAxis::X,
        }
    }
}

/// Dimensions and spacing of one scan grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    /// A-scans per B-scan row (x extent).
    pub width: usize,
    /// B-scan rows (y extent).
    pub height: usize,
    /// Samples per A-scan (z extent).
    pub depth: usize,
    /// Transverse voxel pitch in µm.
    pub transverse_spacing_um: f64,
    /// Axial voxel pitch in µm.
    pub axial_spacing_um: f64,
    pub fast_axis: FastAxis,
}

impl GridGeometry {
    pub fn new(
        width: usize,
        height: usize,
        depth: usize,
        transverse_spacing_um: f64,
        axial_spacing_um: f64,
        fast_axis: FastAxis,
    ) -> Result<Self> {
        if width < 2 || height < 2 || depth < 2 {
            return Err(Error::InvalidInput(format!(
                "grid must be at least 2 voxels per axis, got {width}x{height}x{depth}"
            )));
        }
        if !(transverse_spacing_um > 0.0) || !(axial_spacing_um > 0.0) {
            return Err(Error::InvalidInput("voxel spacings must be positive".into()));
        }
        Ok(Self {
            width,
            height,
            depth,
            transverse_spacing_um,
            axial_spacing_um,
            fast_axis,
        })
    }

    /// Geometry of a desk-scale test grid with the default 4.5 µm axial pitch.
    pub fn desk(width: usize, height: usize, depth: usize, fast_axis: FastAxis) -> Self {
        Self::new(width, height, depth, 6.0, 4.5, fast_axis).expect("desk geometry is valid")
    }

    pub fn n_ascans(&self) -> usize {
        self.width * self.height
    }

    pub fn n_voxels(&self) -> usize {
        self.width * self.height * self.depth
    }

    /// Number of B-scans for this scan orientation.
    pub fn n_bscans(&self) -> usize {
        match self.fast_axis {
            FastAxis::X => self.height,
            FastAxis::Y => self.width,
        }
    }

    /// Extent of one B-scan (number of A-scans along the fast axis).
    pub fn bscan_len(&self) -> usize {
        match self.fast_axis {
            FastAxis::X => self.width,
            FastAxis::Y => self.height,
        }
    }

    /// Slow-axis index of the B-scan containing transverse A-scan `(i, j)`.
    pub fn bscan_of(&self, i: usize, j: usize) -> usize {
        match self.fast_axis {
            FastAxis::X => j,
            FastAxis::Y => i,
        }
    }

    /// `(i, j)` of the `f`-th A-scan within B-scan `b`.
    pub fn ascan_at(&self, b: usize, f: usize) -> (usize, usize) {
        match self.fast_axis {
            FastAxis::X => (f, b),
            FastAxis::Y => (b, f),
        }
    }

    pub fn same_transverse(&self, other: &GridGeometry) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Geometry one pyramid level up: per-axis ceil-halved dims, doubled spacing.
    pub fn halved(&self) -> GridGeometry {
        GridGeometry {
            width: half_len(self.width),
            height: half_len(self.height),
            depth: half_len(self.depth),
            transverse_spacing_um: self.transverse_spacing_um * 2.0,
            axial_spacing_um: self.axial_spacing_um * 2.0,
            fast_axis: self.fast_axis,
        }
    }
}

/// Length after one 2× box-downsampling step (odd tails keep one sample).
pub fn half_len(n: usize) -> usize {
    n.div_ceil(2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(GridGeometry::new(1, 8, 8, 6.0, 4.5, FastAxis::X).is_err());
        assert!(GridGeometry::new(8, 8, 8, 0.0, 4.5, FastAxis::X).is_err());
        assert!(GridGeometry::new(8, 8, 8, 6.0, -1.0, FastAxis::X).is_err());
    }

    #[test]
    fn bscan_indexing_follows_fast_axis() {
        let gx = GridGeometry::desk(4, 3, 2, FastAxis::X);
        assert_eq!(gx.n_bscans(), 3);
        assert_eq!(gx.bscan_len(), 4);
        assert_eq!(gx.ascan_at(2, 1), (1, 2));
        assert_eq!(gx.bscan_of(1, 2), 2);

        let gy = GridGeometry::desk(4, 3, 2, FastAxis::Y);
        assert_eq!(gy.n_bscans(), 4);
        assert_eq!(gy.bscan_len(), 3);
        assert_eq!(gy.ascan_at(2, 1), (2, 1));
        assert_eq!(gy.bscan_of(1, 2), 1);
    }

    #[test]
    fn halving_matches_ceil_arithmetic() {
        let mut g = GridGeometry::desk(500, 500, 465, FastAxis::X);
        let mut widths = vec![g.width];
        for _ in 0..4 {
            g = g.halved();
            widths.push(g.width);
        }
        assert_eq!(widths, vec![500, 250, 125, 63, 32]);
    }
}
