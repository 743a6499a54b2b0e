//! Minimizing-movements solver for quasi-static compressible magnetoelasticity.

pub mod data;
pub mod diagnostics;
pub mod dissipation;
pub mod energy;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod kinematics;
pub mod lbfgs;
pub mod linalg;
pub mod stepper;
pub mod strayfield;
pub mod trajectory;

pub use error::{Error, Result};
