//! Least-squares engine and the parameter-extraction pipelines.

pub mod loss;
pub mod lsq;
pub mod map;
pub mod stretch;
pub mod transmission;

pub use loss::{fit_loss_budget, loss_forward, synthesize_loss, LossBudget, LossFit, LossFitConfig, LossPoint};
pub use lsq::{least_squares_solve, FitProblem, FitResult, FittedParameter, LsqOptions, Parameter};
pub use map::{fit_resonance_map, synthesize_map, MapFit, MapFitConfig, MapPoint, MapTruth, MembraneModel};
pub use stretch::PolyStretch;
pub use transmission::{
    fit_transmission_global, synthesize_transmission, transmission_forward, L0Candidate, SpectrumPeak, TiltParameters,
    TransmissionFit, TransmissionFitConfig, TransmissionPoint, TransmissionTruth,
};
