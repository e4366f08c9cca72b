pub mod error;
pub mod field;
pub mod enface;
pub mod geom;
pub mod interp;
pub mod io;
pub mod merge;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod volume;
