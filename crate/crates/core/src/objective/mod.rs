//! The registration objective and its analytic gradient.
//!
//! Both optimization stages minimize
//!
//! ```text
//! data(D) + α·R(D) + M(D) [+ T]
//! ```
//!
//! over the displacement unknowns `D` of both scans. The data term compares
//! the displaced tri-cubic samples of the two volumes under a pseudo-Huber
//! loss; stage 2 combines it with an en-face angiography term, weighted per
//! A-scan by the resampled saccade validities and balanced by the
//! geometric-mean normalization `η`. `R` favors displacement fields that are
//! smooth along the scan pattern, `M` pins the three translational degrees
//! of freedom, and `T` (stage 1 only) keeps the per-B-scan tilt estimates
//! from collectively drifting.
//!
//! Every term returns an exact gradient; the solver never sees finite
//! differences.

mod regularizers;
mod similarity;
mod stage;

pub use regularizers::{mean_shift_penalty, smoothness_penalty, tilt_penalty};
pub use similarity::{
    combined_similarity, compute_eta, delta_weight, residual_at, similarity_terms,
    validity_resample, LevelData, SimilarityTerms,
};
pub use stage::{Granularity, Stage1Objective, Stage2Objective};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar knobs of the objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    /// Weight of the scan-pattern smoothness regularizer.
    pub alpha: f64,
    /// Angiography weight for fully valid A-scans; 0 disables the OCTA term.
    pub delta0: f64,
    /// Pseudo-Huber scale of the data terms.
    pub huber_eps: f64,
    /// Pseudo-Huber scale of the smoothness penalty (voxels).
    pub smoothness_eps: f64,
    /// Down-weighting of displacement differences across B-scans (flyback).
    pub flyback_weight: f64,
    /// Weight of the summed-displacement penalty.
    pub mean_shift_weight: f64,
    /// Weight of the stage-1 tilt normalization.
    pub tilt_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            delta0: 0.5,
            huber_eps: 1e-3,
            smoothness_eps: 0.1,
            flyback_weight: 0.1,
            mean_shift_weight: 1e-2,
            tilt_weight: 1e-2,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::InvalidInput("alpha must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.delta0) {
            return Err(Error::InvalidInput("delta0 must be in [0, 1]".into()));
        }
        if !(self.huber_eps > 0.0) || !(self.smoothness_eps > 0.0) {
            return Err(Error::InvalidInput("loss scales must be positive".into()));
        }
        if !(self.flyback_weight > 0.0 && self.flyback_weight <= 1.0) {
            return Err(Error::InvalidInput("flyback weight must be in (0, 1]".into()));
        }
        if self.mean_shift_weight < 0.0 || self.tilt_weight < 0.0 {
            return Err(Error::InvalidInput("penalty weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Pseudo-Huber loss `ε·(√(1 + (x/ε)²) − 1)`.
///
/// Quadratic near zero, linear with unit slope far from it, and C^∞
/// everywhere, which keeps the objective well conditioned for L-BFGS while
/// staying robust to speckle outliers.
#[inline]
pub fn pseudo_huber(x: f64, eps: f64) -> f64 {
    let r = x / eps;
    eps * ((1.0 + r * r).sqrt() - 1.0)
}

/// Loss value together with its derivative `x / (ε·√(1 + (x/ε)²))`.
#[inline]
pub fn pseudo_huber_with_derivative(x: f64, eps: f64) -> (f64, f64) {
    let r = x / eps;
    let root = (1.0 + r * r).sqrt();
    (eps * (root - 1.0), x / (eps * root))
}
