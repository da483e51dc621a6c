//! Scattering model of a membrane inside a two-mirror Fabry–Pérot cavity.
//!
//! The crate covers resonance frequencies (exact and closed-form), decay
//! rates, dispersive and dissipative optomechanical couplings, a transfer
//! matrix model of the full mirror–membrane–mirror stack, transmission of a
//! tilted two-surface cavity and the fitting pipelines built on top of them.

pub mod couplings;
pub mod error;
pub mod fitting;
pub mod numerics;
pub mod optics;
pub mod resonance;
pub mod spectra;
pub mod tilt;

pub use error::{Error, Result};
pub use optics::{
    fsr, mode_index_for, slab_coefficients, thin_sheet_coefficients, zero_point_motion, CavityGeometry,
    MechanicalMode, MembraneCoeffs, MembraneSpec, Mirror, HBAR, SPEED_OF_LIGHT,
};
