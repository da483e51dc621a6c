//! Small numerical kernels: bracketed root finding, bounded scalar
//! optimization and adaptive quadrature.

mod optimize;
mod quadrature;
mod roots;

pub use optimize::{golden_grid_maximize, minimize_scalar, Extremum};
pub use quadrature::{integrate, Integral};
pub use roots::{brent_root, find_brackets};
