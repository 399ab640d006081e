//! Numerical laboratory for the spectral fractional power of a
//! variable-coefficient elliptic operator: forward and inverse problems for
//! `L^s + q`, the degenerate extension, and unique-continuation diagnostics.

pub mod assembly;
pub mod battery;
pub mod checks;
pub mod diagnostics;
pub mod error;
pub mod extension;
pub mod grid;
pub mod inverse;
pub mod io;
pub mod nonlocal;
pub mod special;
pub mod spectral;

pub use error::{Error, Result};
