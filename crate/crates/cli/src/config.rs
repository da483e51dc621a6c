//! Run configuration: one TOML file, every key optional, SI units.
//!
//! Defaults describe the flexure-tuned cavity: a 10 cm cavity at 1550 nm
//! with an 88 nm silicon-nitride membrane near the input mirror.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use mate_optix::couplings::Placement;
use mate_optix::fitting::{LossBudget, MembraneModel, TiltParameters};
use mate_optix::optics::{mode_index_for, MembraneCoeffs, MembraneSpec, MechanicalMode, Mirror};
use mate_optix::spectra::CavityModel;
use mate_optix::tilt::TiltModel;
use serde::Deserialize;

use crate::failure::Failure;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub cavity: CavitySection,
    pub mirror1: MirrorSection,
    #[serde(default = "MirrorSection::back")]
    pub mirror2: MirrorSection,
    pub membrane: MembraneSection,
    pub mechanics: MechanicsSection,
    pub spectrum: SpectrumSection,
    pub couplings: CouplingsSection,
    pub resonances: ResonancesSection,
    pub tilt: TiltSection,
    pub fit: FitSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cavity: CavitySection::default(),
            mirror1: MirrorSection::default(),
            mirror2: MirrorSection::back(),
            membrane: MembraneSection::default(),
            mechanics: MechanicsSection::default(),
            spectrum: SpectrumSection::default(),
            couplings: CouplingsSection::default(),
            resonances: ResonancesSection::default(),
            tilt: TiltSection::default(),
            fit: FitSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::input(format!("config {}: {e}", path.display())))
    }

    pub fn mode_index(&self) -> Result<u64, Failure> {
        match self.cavity.mode_index_n {
            Some(0) => Err(Failure::input("cavity.mode_index_n must be ≥ 1")),
            Some(n) => Ok(n),
            None => Ok(mode_index_for(self.cavity.length_l, self.cavity.wavelength)?),
        }
    }

    pub fn membrane(&self) -> Result<MembraneSpec, Failure> {
        self.membrane.spec()
    }

    pub fn cavity_model(&self) -> Result<CavityModel, Failure> {
        Ok(CavityModel::new(
            self.mirror1.mirror()?,
            self.mirror2.mirror()?,
            self.membrane()?,
            self.cavity.length_l,
            self.cavity.mode_match_eps,
            self.mode_index()?,
        )?)
    }

    pub fn mechanical_mode(&self) -> Result<MechanicalMode, Failure> {
        Ok(MechanicalMode::new(self.mechanics.mass_m, self.mechanics.omega_mech)?)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CavitySection {
    pub length_l: f64,
    /// Used to pick the longitudinal index when `mode_index_n` is absent.
    pub wavelength: f64,
    pub mode_index_n: Option<u64>,
    pub mode_match_eps: f64,
}

impl Default for CavitySection {
    fn default() -> Self {
        Self {
            length_l: 0.1,
            wavelength: 1550e-9,
            mode_index_n: None,
            mode_match_eps: 0.75,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MirrorSection {
    /// Power transmission `|t|²`; `|r|² = 1 − |t|²`.
    pub t_sq: f64,
    /// Single-pass internal loss `S`.
    pub loss_s: f64,
    pub r_phase: f64,
}

impl Default for MirrorSection {
    fn default() -> Self {
        Self {
            t_sq: 7.5e-3,
            loss_s: 8.0e-4,
            r_phase: PI,
        }
    }
}

impl MirrorSection {
    fn back() -> Self {
        Self {
            t_sq: 6e-4,
            loss_s: 0.0,
            r_phase: PI,
        }
    }

    pub fn mirror(&self) -> Result<Mirror, Failure> {
        let m = Mirror::lossless(self.t_sq)?;
        Ok(Mirror::new(m.r_mag, self.r_phase, m.t_mag, self.loss_s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MembraneKind {
    Slab,
    Sheet,
    /// Presentation convention from `|r_m|` alone.
    Thin,
    /// Explicit lossless coefficients `|r_m|`, `φ_r`.
    Coeffs,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MembraneSection {
    pub model: MembraneKind,
    pub n: f64,
    pub d: f64,
    pub r_mag: Option<f64>,
    pub r_phase: Option<f64>,
}

impl Default for MembraneSection {
    fn default() -> Self {
        Self {
            model: MembraneKind::Slab,
            n: 2.0,
            d: 88e-9,
            r_mag: None,
            r_phase: None,
        }
    }
}

impl MembraneSection {
    fn r_mag(&self) -> Result<f64, Failure> {
        self.r_mag.ok_or_else(|| Failure::input("membrane.r_mag is required for this membrane model"))
    }

    pub fn spec(&self) -> Result<MembraneSpec, Failure> {
        Ok(match self.model {
            MembraneKind::Slab => MembraneSpec::slab(self.n, self.d)?,
            MembraneKind::Sheet => MembraneSpec::sheet(self.n, self.d)?,
            MembraneKind::Thin => MembraneSpec::thin(self.r_mag()?)?,
            MembraneKind::Coeffs => {
                let phase = self
                    .r_phase
                    .ok_or_else(|| Failure::input("membrane.r_phase is required for model = \"coeffs\""))?;
                MembraneSpec::Coeffs(MembraneCoeffs::lossless(self.r_mag()?, phase)?)
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MechanicsSection {
    pub mass_m: f64,
    pub omega_mech: f64,
}

impl Default for MechanicsSection {
    fn default() -> Self {
        // A millimetre-scale 88 nm nitride drum.
        Self {
            mass_m: 6.8e-11,
            omega_mech: 2.0 * PI * 3.5e5,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumSection {
    pub x_min: f64,
    pub x_max: f64,
    pub x_points: usize,
    /// Laser detuning range, rad/s; defaults to one free spectral range.
    pub detuning_min: Option<f64>,
    pub detuning_max: Option<f64>,
    pub detuning_points: usize,
}

impl Default for SpectrumSection {
    fn default() -> Self {
        Self {
            x_min: 21.0e-6,
            x_max: 21.8e-6,
            x_points: 41,
            detuning_min: None,
            detuning_max: None,
            detuning_points: 8001,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingsSection {
    pub placement: Placement,
    pub dx_min: f64,
    pub dx_max: f64,
    pub dx_points: usize,
    /// Rows with `|G⁽¹⁾|` below this fraction of the largest `|G⁽¹⁾|` are
    /// flagged as purely quadratic.
    pub pure_threshold: f64,
}

impl Default for CouplingsSection {
    fn default() -> Self {
        Self {
            placement: Placement::MateInput,
            dx_min: 1e-9,
            dx_max: 775e-9,
            dx_points: 201,
            pure_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResonancesSection {
    pub placement: Placement,
    pub dx_min: f64,
    pub dx_max: f64,
    pub dx_points: usize,
}

impl Default for ResonancesSection {
    fn default() -> Self {
        Self {
            placement: Placement::MateInput,
            dx_min: 21.0e-6,
            dx_max: 21.8e-6,
            dx_points: 81,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TiltSection {
    pub x0: f64,
    pub theta: f64,
    pub beam_sigma: f64,
    pub r1_sq: f64,
    pub phi1: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub lambda_points: usize,
    pub model: TiltModel,
}

impl Default for TiltSection {
    fn default() -> Self {
        Self {
            x0: 18.0e-6,
            theta: 0.18e-3,
            beam_sigma: 100e-6,
            r1_sq: 0.9935,
            phi1: PI,
            lambda_min: 1510e-9,
            lambda_max: 1590e-9,
            lambda_points: 801,
            model: TiltModel::Analytic,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    /// Data file; the `--input` flag takes precedence.
    pub input: Option<PathBuf>,
    pub map: MapFitSection,
    pub loss: LossFitSection,
    pub transmission: TransmissionFitSection,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            input: None,
            map: MapFitSection::default(),
            loss: LossFitSection::default(),
            transmission: TransmissionFitSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapModelKind {
    Slab,
    ThinSheet,
    Coefficients,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MapFitSection {
    pub model: MapModelKind,
    /// Index used by the thickness models.
    pub n: f64,
    /// Initial thickness, or initial `|r_m|` for the coefficient model.
    pub init_membrane: f64,
    /// Initial `φ_r` for the coefficient model.
    pub init_phase: f64,
    pub scale_x: f64,
    pub scale_l: f64,
    pub offset_x: f64,
    pub starts: usize,
}

impl Default for MapFitSection {
    fn default() -> Self {
        Self {
            model: MapModelKind::ThinSheet,
            n: 2.0,
            init_membrane: 70e-9,
            init_phase: 0.0,
            scale_x: 0.5e-6,
            scale_l: 1e-6,
            offset_x: 21e-6,
            starts: 8,
        }
    }
}

impl MapFitSection {
    pub fn model(&self) -> MembraneModel {
        match self.model {
            MapModelKind::Slab => MembraneModel::Slab { n: self.n },
            MapModelKind::ThinSheet => MembraneModel::ThinSheet { n: self.n },
            MapModelKind::Coefficients => MembraneModel::Coefficients,
        }
    }

    pub fn membrane_init(&self) -> [f64; 2] {
        match self.model {
            MapModelKind::Coefficients => [self.init_membrane, self.init_phase],
            _ => [self.init_membrane, 0.0],
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFitSection {
    pub init_eps: f64,
    pub init_t1_sq: f64,
    pub init_s1: f64,
    pub init_t2_sq: f64,
    pub max_iterations: usize,
}

impl Default for LossFitSection {
    fn default() -> Self {
        Self {
            init_eps: 0.6,
            init_t1_sq: 6e-3,
            init_s1: 1.2e-3,
            init_t2_sq: 1e-3,
            max_iterations: 200,
        }
    }
}

impl LossFitSection {
    pub fn init(&self) -> LossBudget {
        LossBudget {
            eps: self.init_eps,
            t1_sq: self.init_t1_sq,
            s1: self.init_s1,
            t2_sq: self.init_t2_sq,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransmissionFitSection {
    pub l0_min: i64,
    pub l0_max: i64,
    pub min_order: i64,
    pub phi1: f64,
    pub beam_sigma: f64,
    pub lambda_ref: f64,
    pub init_r1_sq: f64,
    pub init_theta0: f64,
    pub init_a: f64,
}

impl Default for TransmissionFitSection {
    fn default() -> Self {
        Self {
            l0_min: 18,
            l0_max: 30,
            min_order: 8,
            phi1: PI,
            beam_sigma: 100e-6,
            lambda_ref: 1550e-9,
            init_r1_sq: 0.99,
            init_theta0: 0.1e-3,
            init_a: 0.0,
        }
    }
}

impl TransmissionFitSection {
    pub fn init(&self) -> TiltParameters {
        TiltParameters {
            r1_sq: self.init_r1_sq,
            theta0: self.init_theta0,
            a: self.init_a,
        }
    }
}

/// Generating values for `synth`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    /// Relative noise (loss, transmission) or absolute noise in free
    /// spectral ranges (map).
    pub noise: f64,
    pub loss_x_min: f64,
    pub loss_x_max: f64,
    pub loss_x_points: usize,
    pub loss_truth_eps: f64,
    pub loss_truth_t1_sq: f64,
    pub loss_truth_s1: f64,
    pub loss_truth_t2_sq: f64,
    pub map_points: usize,
    /// Generate ridges from the exact resonance condition.
    pub map_exact: bool,
    pub transmission_l0: i64,
    pub transmission_spectra: i64,
    pub transmission_r1_sq: f64,
    pub transmission_theta0: f64,
    pub transmission_a: f64,
    pub transmission_lambda_min: f64,
    pub transmission_lambda_max: f64,
    pub transmission_lambda_points: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            noise: 0.01,
            loss_x_min: 21.0e-6,
            loss_x_max: 21.8e-6,
            loss_x_points: 41,
            loss_truth_eps: 0.75,
            loss_truth_t1_sq: 7.5e-3,
            loss_truth_s1: 8.0e-4,
            loss_truth_t2_sq: 6e-4,
            map_points: 121,
            map_exact: true,
            transmission_l0: 24,
            transmission_spectra: 17,
            transmission_r1_sq: 0.9935,
            transmission_theta0: 0.18e-3,
            transmission_a: 40.0,
            transmission_lambda_min: 1510e-9,
            transmission_lambda_max: 1590e-9,
            transmission_lambda_points: 200,
        }
    }
}

/// `n` evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize, what: &str) -> Result<Vec<f64>, Failure> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Failure::input(format!("{what}: bounds must be finite")));
    }
    match n {
        0 => Err(Failure::input(format!("{what}: need at least one point"))),
        1 => Ok(vec![lo]),
        _ => {
            if hi <= lo {
                return Err(Failure::input(format!("{what}: need max > min (got [{lo}, {hi}])")));
            }
            Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
        }
    }
}
