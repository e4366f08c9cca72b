//! L-BFGS solver and the multi-resolution registration driver.

mod driver;
mod lbfgs;

pub use driver::{
    axial_prealign, compose_fields, register_3d, LevelReport, Prealignment, Registration,
    StageReport,
};
pub use lbfgs::{lbfgs_minimize, SolveReport, SolverConfig, Termination};
