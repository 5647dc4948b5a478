//! Nonlocal minimal surfaces on regular grids.
//!
//! Fractional perimeters of lattice phase fields, exact minimization by
//! graph cuts, nonlocal mean curvature, threshold dynamics for the
//! fractional mean-curvature flow, and the weighted extension energy used to
//! study blow-ups.

pub mod cli;
pub mod curvature;
pub mod energy;
pub mod error;
pub mod extension;
pub mod fft;
pub mod io;
pub mod flow;
pub mod grid;
pub mod kernel;
pub mod maxflow;
pub mod mincut;
pub mod numeric;
pub mod shape;

pub use error::{Error, Result};
