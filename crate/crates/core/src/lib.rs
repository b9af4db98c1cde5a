//! Numerical laboratory for Lagrangian flows of vector fields with
//! anisotropic regularity.

pub mod cloud;
pub mod diffquot;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod maximal;
pub mod singular;
pub mod spectral;
pub mod stability;
pub mod weak_lebesgue;

pub use error::{Error, Result};
pub use grid::{lebesgue_norm, Grid, GridFunction, Region};
