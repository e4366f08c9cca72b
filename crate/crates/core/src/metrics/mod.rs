//! Evaluation metrics: joint layer segmentation, feature maps, disparity
//! scores, constrained affine co-registration and significance testing.

mod affine;
mod features;
mod segment;
mod wilcoxon;

pub use affine::{affine_coregister, apply_affine, AffineParams};
pub use features::{
    enface_for_vesselmap, frangi_vesselness, ilm_disparity, vessel_disparity, DisparityStats,
    FrangiConfig, VesselmapConfig,
};
pub use segment::{segment_layers, segment_retina, BoundarySpec, GradientPolarity, RetinaSegConfig};
pub use wilcoxon::{wilcoxon_signed_rank, WilcoxonResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::EnFaceImage;

/// The retinal boundaries this pipeline knows about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerBoundary {
    /// Inner limiting membrane (anterior retinal surface).
    Ilm,
    /// Line immediately anterior to the ellipsoid zone / IS-OS junction.
    Ez,
    /// Outer segment / RPE transition.
    OsRpe,
    /// Posterior edge of the retinal pigment epithelium.
    PosteriorRpe,
}

/// Per-boundary, per-A-scan axial positions in (fractional) voxels.
#[derive(Debug, Clone)]
pub struct LayerSet {
    pub width: usize,
    pub height: usize,
    positions: BTreeMap<LayerBoundary, Vec<f64>>,
}

impl LayerSet {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            positions: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, boundary: LayerBoundary, positions: Vec<f64>) {
        assert_eq!(positions.len(), self.width * self.height);
        self.positions.insert(boundary, positions);
    }

    pub fn get(&self, boundary: LayerBoundary) -> Result<&[f64]> {
        self.positions
            .get(&boundary)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::InvalidInput(format!("boundary {boundary:?} not segmented")))
    }

    pub fn at(&self, boundary: LayerBoundary, i: usize, j: usize) -> Result<f64> {
        Ok(self.get(boundary)?[j * self.width + i])
    }

    pub fn boundaries(&self) -> impl Iterator<Item = LayerBoundary> + '_ {
        self.positions.keys().copied()
    }

    /// The boundary positions arranged as an en-face depth map.
    pub fn feature_map(&self, boundary: LayerBoundary) -> Result<EnFaceImage> {
        let p = self.get(boundary)?;
        EnFaceImage::new(self.width, self.height, p.to_vec())
    }
}
