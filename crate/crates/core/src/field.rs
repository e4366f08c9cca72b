//! Per-A-scan displacement fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{FastAxis, GridGeometry};

/// One displacement vector per A-scan, in voxel units of the full-resolution
/// grid. There is no distortion within an A-scan, so a single 3-vector covers
/// the whole depth profile at `(i, j)`.
///
/// Displacements stay in full-resolution voxel units at every pyramid level;
/// sampling code divides by the level scale instead of rescaling the field
/// when moving between levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    /// Which scan this field corrects (determines its slow axis).
    pub scan: FastAxis,
    /// `[dx, dy, dz]` per A-scan, `i` fastest.
    vectors: Vec<[f64; 3]>,
}

/// Serialized sidecar for a displacement field file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub width: usize,
    pub height: usize,
    pub units: String,
    pub scan: FastAxis,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize, scan: FastAxis) -> Self {
        Self {
            width,
            height,
            scan,
            vectors: vec![[0.0; 3]; width * height],
        }
    }

    pub fn from_vectors(
        width: usize,
        height: usize,
        scan: FastAxis,
        vectors: Vec<[f64; 3]>,
    ) -> Result<Self> {
        if vectors.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "field length {} does not match {}x{}",
                vectors.len(),
                width,
                height
            )));
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("field contains non-finite values".into()));
        }
        Ok(Self {
            width,
            height,
            scan,
            vectors,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        scan: FastAxis,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        let mut vectors = Vec::with_capacity(width * height);
        for j in 0..height {
            for i in 0..width {
                vectors.push(f(i, j));
            }
        }
        Self {
            width,
            height,
            scan,
            vectors,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> [f64; 3] {
        self.vectors[j * self.width + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: [f64; 3]) {
        self.vectors[j * self.width + i] = v;
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.vectors
    }

    pub fn n_ascans(&self) -> usize {
        self.vectors.len()
    }

    pub fn matches_transverse(&self, g: &GridGeometry) -> bool {
        self.width == g.width && self.height == g.height
    }

    /// Mean of each displacement component.
    pub fn component_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for v in &self.vectors {
            for c in 0..3 {
                sums[c] += v[c];
            }
        }
        let n = self.vectors.len() as f64;
        sums.map(|s| s / n)
    }

    pub fn max_abs(&self) -> f64 {
        self.vectors
            .iter()
            .flatten()
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    /// Bilinear 2× upsampling onto a finer transverse grid.
    ///
    /// Coarse sample `c` is the box average of fine samples `2c` and `2c + 1`,
    /// so a fine index `i` maps to the coarse coordinate `(i - 0.5) / 2`.
    /// Values transfer unchanged (they are in full-resolution voxel units).
    pub fn upsample(&self, fine_width: usize, fine_height: usize) -> DisplacementField {
        let mut out = DisplacementField::zeros(fine_width, fine_height, self.scan);
        for j in 0..fine_height {
            let yc = (j as f64 - 0.5) / 2.0;
            let (j0, j1, ty) = linear_cell(yc, self.height);
            for i in 0..fine_width {
                let xc = (i as f64 - 0.5) / 2.0;
                let (i0, i1, tx) = linear_cell(xc, self.width);
                let mut v = [0.0; 3];
                for c in 0..3 {
                    let a = self.at(i0, j0)[c] * (1.0 - tx) + self.at(i1, j0)[c] * tx;
                    let b = self.at(i0, j1)[c] * (1.0 - tx) + self.at(i1, j1)[c] * tx;
                    v[c] = a * (1.0 - ty) + b * ty;
                }
                out.set(i, j, v);
            }
        }
        out
    }
}

/// Clamped linear-interpolation cell for coordinate `x` on `[0, n-1]`.
fn linear_cell(x: f64, n: usize) -> (usize, usize, f64) {
    if x <= 0.0 {
        return (0, 0, 0.0);
    }
    let max = (n - 1) as f64;
    if x >= max {
        return (n - 1, n - 1, 0.0);
    }
    let i0 = x.floor() as usize;
    (i0, i0 + 1, x - i0 as f64)
}
