//! Shared optical and mechanical domain types.
//!
//! Conventions: lengths in meters, angles in radians, frequencies in rad/s.
//! Coefficients are amplitude (field) quantities; `*_mag` fields are
//! magnitudes and `*_phase` fields their arguments.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = 1.054_571_817e-34;

/// Tolerance on `|r|² + |t|² = 1` for a membrane to count as lossless.
pub const LOSSLESS_POWER_TOL: f64 = 1e-12;
/// Tolerance on `|exp(2i(φt − φr)) + 1|` for a membrane to count as lossless.
pub const LOSSLESS_PHASE_TOL: f64 = 1e-10;

const BOUND_SLACK: f64 = 1e-12;

/// A fixed end mirror.
///
/// The reflection coefficient is `r_mag·exp(i·r_phase)`; the default phase
/// `π` gives the `−|r|` convention. Transmission carries the phase
/// `r_phase − π/2` (`i|t|` for the default), which keeps a lossless
/// symmetric mirror unitary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mirror {
    /// Amplitude reflectivity magnitude `|r_j|`.
    pub r_mag: f64,
    /// Reflection phase, rad.
    pub r_phase: f64,
    /// Amplitude transmission magnitude `|t_j|`.
    pub t_mag: f64,
    /// Power attenuation exponent `S_j` per round trip, applied at the
    /// mirror's inner surface (power factor `exp(−S_j)`).
    pub loss_s: f64,
}

impl Mirror {
    pub fn new(r_mag: f64, r_phase: f64, t_mag: f64, loss_s: f64) -> Result<Self> {
        ensure_finite("mirror r_mag", r_mag)?;
        ensure_finite("mirror r_phase", r_phase)?;
        ensure_finite("mirror t_mag", t_mag)?;
        ensure_finite("mirror loss_s", loss_s)?;
        if !(0.0..=1.0).contains(&r_mag) || !(0.0..=1.0).contains(&t_mag) {
            return Err(Error::invalid(format!(
                "mirror magnitudes must lie in [0, 1] (r_mag = {r_mag}, t_mag = {t_mag})"
            )));
        }
        if r_mag * r_mag + t_mag * t_mag > 1.0 + BOUND_SLACK {
            return Err(Error::invalid(format!(
                "mirror violates |r|² + |t|² ≤ 1 (r_mag = {r_mag}, t_mag = {t_mag})"
            )));
        }
        if loss_s < 0.0 {
            return Err(Error::invalid(format!("mirror loss_s must be ≥ 0, got {loss_s}")));
        }
        Ok(Self {
            r_mag,
            r_phase,
            t_mag,
            loss_s,
        })
    }

    /// Lossless mirror with power transmission `t_sq` and the `−|r|` phase.
    pub fn lossless(t_sq: f64) -> Result<Self> {
        ensure_finite("mirror power transmission", t_sq)?;
        if !(0.0..=1.0).contains(&t_sq) {
            return Err(Error::invalid(format!(
                "mirror power transmission must lie in [0, 1], got {t_sq}"
            )));
        }
        Self::new((1.0 - t_sq).sqrt(), PI, t_sq.sqrt(), 0.0)
    }

    /// Perfect reflector (`r = −1`, `t = 0`).
    pub fn perfect() -> Self {
        Self {
            r_mag: 1.0,
            r_phase: PI,
            t_mag: 0.0,
            loss_s: 0.0,
        }
    }

    pub fn with_loss(self, loss_s: f64) -> Result<Self> {
        Self::new(self.r_mag, self.r_phase, self.t_mag, loss_s)
    }

    pub fn reflection(&self) -> Complex64 {
        Complex64::from_polar(self.r_mag, self.r_phase)
    }

    pub fn transmission(&self) -> Complex64 {
        Complex64::from_polar(self.t_mag, self.r_phase - FRAC_PI_2)
    }

    /// `|t_j|²`.
    pub fn power_transmission(&self) -> f64 {
        self.t_mag * self.t_mag
    }

    /// Transmission plus internal loss, the mirror's share of the round-trip
    /// power loss.
    pub fn total_loss(&self) -> f64 {
        self.power_transmission() + self.loss_s
    }
}

/// Complex reflection and transmission coefficients of a membrane, referenced
/// to its two surfaces. The membrane is taken to be symmetric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembraneCoeffs {
    pub r_mag: f64,
    pub r_phase: f64,
    pub t_mag: f64,
    pub t_phase: f64,
}

impl MembraneCoeffs {
    pub fn new(r_mag: f64, r_phase: f64, t_mag: f64, t_phase: f64) -> Result<Self> {
        for (name, v) in [
            ("membrane r_mag", r_mag),
            ("membrane r_phase", r_phase),
            ("membrane t_mag", t_mag),
            ("membrane t_phase", t_phase),
        ] {
            ensure_finite(name, v)?;
        }
        if !(0.0..=1.0).contains(&r_mag) || !(0.0..=1.0).contains(&t_mag) {
            return Err(Error::invalid(format!(
                "membrane magnitudes must lie in [0, 1] (r_mag = {r_mag}, t_mag = {t_mag})"
            )));
        }
        if r_mag * r_mag + t_mag * t_mag > 1.0 + BOUND_SLACK {
            return Err(Error::invalid(format!(
                "membrane violates |r|² + |t|² ≤ 1 (r_mag = {r_mag}, t_mag = {t_mag})"
            )));
        }
        Ok(Self {
            r_mag,
            r_phase,
            t_mag,
            t_phase,
        })
    }

    /// Lossless membrane in the presentation convention `r = −|r|`, `t = i|t|`.
    pub fn presentation(r_mag: f64) -> Result<Self> {
        ensure_finite("membrane r_mag", r_mag)?;
        if !(0.0..=1.0).contains(&r_mag) {
            return Err(Error::invalid(format!(
                "membrane r_mag must lie in [0, 1], got {r_mag}"
            )));
        }
        Self::new(r_mag, PI, (1.0 - r_mag * r_mag).sqrt(), FRAC_PI_2)
    }

    /// Lossless membrane with an explicit reflection phase; the transmission
    /// phase is chosen as `φr − π/2` so that unitarity holds.
    pub fn lossless(r_mag: f64, r_phase: f64) -> Result<Self> {
        Self::presentation(r_mag).and_then(|c| {
            Self::new(c.r_mag, r_phase, c.t_mag, r_phase - FRAC_PI_2)
        })
    }

    pub fn r(&self) -> Complex64 {
        Complex64::from_polar(self.r_mag, self.r_phase)
    }

    pub fn t(&self) -> Complex64 {
        Complex64::from_polar(self.t_mag, self.t_phase)
    }

    /// `(|r|² + |t|² − 1, |exp(2i(φt − φr)) + 1|)`.
    pub fn unitarity_defect(&self) -> (f64, f64) {
        let power = self.r_mag * self.r_mag + self.t_mag * self.t_mag - 1.0;
        let phase = (Complex64::from_polar(1.0, 2.0 * (self.t_phase - self.r_phase)) + 1.0).norm();
        (power, phase)
    }

    pub fn is_lossless(&self) -> bool {
        let (power, phase) = self.unitarity_defect();
        power.abs() <= LOSSLESS_POWER_TOL && phase <= LOSSLESS_PHASE_TOL
    }
}

/// A membrane, either as a physical dielectric slab or as fixed coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MembraneSpec {
    /// Lossless dielectric slab in vacuum: refractive index `n`, thickness `d` (m).
    Slab { n: f64, d: f64 },
    /// Thin polarizable sheet with the polarizability of a slab of index
    /// `n` and thickness `d` (m).
    Sheet { n: f64, d: f64 },
    /// Explicit (wavelength-independent) coefficients.
    Coeffs(MembraneCoeffs),
}

impl MembraneSpec {
    pub fn slab(n: f64, d: f64) -> Result<Self> {
        validate_slab(n, d)?;
        Ok(MembraneSpec::Slab { n, d })
    }

    pub fn sheet(n: f64, d: f64) -> Result<Self> {
        validate_slab(n, d)?;
        Ok(MembraneSpec::Sheet { n, d })
    }

    /// Presentation-convention membrane (`r = −|r|`, `t = i|t|`).
    pub fn thin(r_mag: f64) -> Result<Self> {
        MembraneCoeffs::presentation(r_mag).map(MembraneSpec::Coeffs)
    }

    /// Coefficients at wavenumber `k` (rad/m). Slabs are evaluated with the
    /// two-interface formula and sheets with the delta-function model;
    /// explicit coefficients are returned as given.
    pub fn coefficients_at(&self, k: f64) -> Result<MembraneCoeffs> {
        match *self {
            MembraneSpec::Slab { n, d } => slab_coefficients(n, d, k),
            MembraneSpec::Sheet { n, d } => thin_sheet_coefficients(n, d, k),
            MembraneSpec::Coeffs(c) => Ok(c),
        }
    }
}

fn validate_slab(n: f64, d: f64) -> Result<()> {
    ensure_finite("slab index n", n)?;
    ensure_finite("slab thickness d", d)?;
    if n < 1.0 {
        return Err(Error::invalid(format!("slab index must be ≥ 1, got {n}")));
    }
    if d < 0.0 {
        return Err(Error::invalid(format!("slab thickness must be ≥ 0, got {d}")));
    }
    Ok(())
}

/// Builds coefficients from complex `r`, `t`, fixing the phase of a vanishing
/// coefficient so that `φt − φr = −π/2` still holds.
fn coeffs_from_complex(r: Complex64, t: Complex64) -> Result<MembraneCoeffs> {
    let t_phase = if t.norm() > 0.0 { t.arg() } else { r.arg() - FRAC_PI_2 };
    let r_phase = if r.norm() > 0.0 { r.arg() } else { t_phase + FRAC_PI_2 };
    MembraneCoeffs::new(r.norm().min(1.0), r_phase, t.norm().min(1.0), t_phase)
}

/// Reflection and transmission of a lossless dielectric slab in vacuum at
/// normal incidence, with reference planes on the slab faces.
pub fn slab_coefficients(n: f64, d: f64, k: f64) -> Result<MembraneCoeffs> {
    validate_slab(n, d)?;
    ensure_positive("wavenumber k", k)?;
    let r12 = (1.0 - n) / (1.0 + n);
    let beta = n * k * d;
    let round_trip = Complex64::from_polar(1.0, 2.0 * beta);
    let denom = Complex64::new(1.0, 0.0) - r12 * r12 * round_trip;
    let r = r12 * (Complex64::new(1.0, 0.0) - round_trip) / denom;
    let t = (1.0 - r12 * r12) * Complex64::from_polar(1.0, beta) / denom;
    coeffs_from_complex(r, t)
}

/// Infinitesimally thin sheet with the same polarizability as a slab:
/// `ζ = (n² − 1)kd/2`, `r = iζ/(1 − iζ)`, `t = 1/(1 − iζ)`.
pub fn thin_sheet_coefficients(n: f64, d: f64, k: f64) -> Result<MembraneCoeffs> {
    validate_slab(n, d)?;
    ensure_positive("wavenumber k", k)?;
    let zeta = 0.5 * (n * n - 1.0) * k * d;
    let denom = Complex64::new(1.0, -zeta);
    let r = Complex64::new(0.0, zeta) / denom;
    let t = Complex64::new(1.0, 0.0) / denom;
    coeffs_from_complex(r, t)
}

/// Empty-cavity free spectral range `ω_FSR = πc/L`, rad/s.
pub fn fsr(length_l: f64) -> Result<f64> {
    ensure_positive("cavity length", length_l)?;
    Ok(PI * SPEED_OF_LIGHT / length_l)
}

/// Zero-point motion `sqrt(ħ/(2mΩ))`, m.
pub fn zero_point_motion(mass_m: f64, omega_mech: f64) -> Result<f64> {
    ensure_positive("mass", mass_m)?;
    ensure_positive("mechanical frequency", omega_mech)?;
    Ok((HBAR / (2.0 * mass_m * omega_mech)).sqrt())
}

/// Cavity length, membrane position and the empty-cavity mode of interest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityGeometry {
    /// End-mirror spacing `L`, m.
    pub length_l: f64,
    /// Membrane position measured from mirror 1, m.
    pub membrane_x: f64,
    /// Empty-cavity mode index `N`.
    pub mode_index_n: u64,
    /// Operating wavenumber, rad/m.
    pub wavenumber_k: f64,
}

impl CavityGeometry {
    /// Geometry operating at the empty-cavity wavenumber `k_N = πN/L`.
    pub fn new(length_l: f64, membrane_x: f64, mode_index_n: u64) -> Result<Self> {
        ensure_positive("cavity length", length_l)?;
        ensure_finite("membrane position", membrane_x)?;
        if mode_index_n == 0 {
            return Err(Error::invalid("mode index N must be ≥ 1"));
        }
        if !(membrane_x > 0.0 && membrane_x < length_l) {
            return Err(Error::invalid(format!(
                "membrane position must satisfy 0 < x < L (x = {membrane_x}, L = {length_l})"
            )));
        }
        Ok(Self {
            length_l,
            membrane_x,
            mode_index_n,
            wavenumber_k: PI * mode_index_n as f64 / length_l,
        })
    }

    /// Geometry using the empty-cavity mode closest to `wavelength`.
    pub fn from_wavelength(length_l: f64, membrane_x: f64, wavelength: f64) -> Result<Self> {
        Self::new(length_l, membrane_x, mode_index_for(length_l, wavelength)?)
    }

    pub fn k_n(&self) -> f64 {
        PI * self.mode_index_n as f64 / self.length_l
    }

    /// Empty-cavity resonance wavelength `λ_N = 2L/N`.
    pub fn lambda_n(&self) -> f64 {
        2.0 * self.length_l / self.mode_index_n as f64
    }

    pub fn fsr(&self) -> f64 {
        PI * SPEED_OF_LIGHT / self.length_l
    }

    pub fn with_membrane_x(&self, membrane_x: f64) -> Result<Self> {
        let mut g = Self::new(self.length_l, membrane_x, self.mode_index_n)?;
        g.wavenumber_k = self.wavenumber_k;
        Ok(g)
    }
}

/// Empty-cavity mode index `N = round(2L/λ)`.
pub fn mode_index_for(length_l: f64, wavelength: f64) -> Result<u64> {
    ensure_positive("cavity length", length_l)?;
    ensure_positive("wavelength", wavelength)?;
    let n = (2.0 * length_l / wavelength).round();
    if n < 1.0 {
        return Err(Error::invalid(format!(
            "cavity length {length_l} m is shorter than half a wavelength ({wavelength} m)"
        )));
    }
    Ok(n as u64)
}

/// A single mechanical mode of the membrane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanicalMode {
    /// Effective mass, kg.
    pub mass_m: f64,
    /// Angular frequency Ω, rad/s.
    pub omega_mech: f64,
}

impl MechanicalMode {
    pub fn new(mass_m: f64, omega_mech: f64) -> Result<Self> {
        ensure_positive("mass", mass_m)?;
        ensure_positive("mechanical frequency", omega_mech)?;
        Ok(Self { mass_m, omega_mech })
    }

    pub fn x_zpf(&self) -> f64 {
        (HBAR / (2.0 * self.mass_m * self.omega_mech)).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const LAMBDA: f64 = 1550e-9;

    fn k0() -> f64 {
        2.0 * PI / LAMBDA
    }

    /// Independent 2x2 characteristic-matrix oracle for a slab in vacuum.
    fn slab_oracle(n: f64, d: f64, k: f64) -> (Complex64, Complex64) {
        let delta = n * k * d;
        let (s, c) = delta.sin_cos();
        let i = Complex64::i();
        let m11 = Complex64::new(c, 0.0);
        let m12 = -i * s / n;
        let m21 = -i * n * s;
        let m22 = Complex64::new(c, 0.0);
        let denom = m11 + m12 + m21 + m22;
        let r = (m11 + m12 - m21 - m22) / denom;
        // Characteristic-matrix t refers the output to the far face; the
        // phase reference matches the two-interface formula.
        let t = Complex64::new(2.0, 0.0) / denom;
        (r, t)
    }

    #[test]
    fn zero_thickness_slab_is_transparent() {
        let c = slab_coefficients(2.0, 0.0, k0()).unwrap();
        assert!(c.r_mag.abs() < 1e-15);
        assert!((c.t_mag - 1.0).abs() < 1e-15);
        assert!(c.is_lossless());
    }

    #[test]
    fn quarter_wave_slab_reflectivity() {
        let n = 2.0;
        let c = slab_coefficients(n, LAMBDA / (4.0 * n), k0()).unwrap();
        assert!((c.r_mag - 0.6).abs() < 1e-12, "{}", c.r_mag);
    }

    #[test]
    fn sin_88nm_slab_matches_matrix_oracle() {
        let (r, t) = slab_oracle(2.0, 88e-9, k0());
        let c = slab_coefficients(2.0, 88e-9, k0()).unwrap();
        assert!((c.r_mag - r.norm()).abs() < 1e-12);
        assert!((c.t_mag - t.norm()).abs() < 1e-12);
        assert!((c.r_mag - 0.44).abs() < 0.005, "{}", c.r_mag);
        assert!((c.r() - r).norm() < 1e-12);
        assert!((c.t() - t).norm() < 1e-12);
    }

    #[test]
    fn thin_sheet_is_lossless_and_reflects_more_than_slab() {
        let sheet = thin_sheet_coefficients(2.0, 88e-9, k0()).unwrap();
        let slab = slab_coefficients(2.0, 88e-9, k0()).unwrap();
        assert!(sheet.is_lossless());
        assert!(sheet.r_mag > slab.r_mag);
    }

    #[test]
    fn fsr_values() {
        let w = fsr(0.1).unwrap();
        assert!((w - 9.418_257_7e9).abs() / w < 1e-7, "{w}");
        assert!((fsr(0.2).unwrap() * 2.0 - w).abs() / w < 1e-15);
        assert!((w / (2.0 * PI) - 1.499e9).abs() < 1e6);
        assert!(fsr(0.0).is_err());
        assert!(fsr(-1.0).is_err());
    }

    #[test]
    fn zero_point_motion_values() {
        let x = zero_point_motion(6.8e-11, 2.0 * PI * 400e3).unwrap();
        assert!((x - 5.6e-16).abs() < 0.1e-16, "{x}");
        let a = zero_point_motion(2.0, 3.0).unwrap();
        let b = zero_point_motion(4.0, 6.0).unwrap();
        assert!((a / b - 2.0).abs() < 1e-14);
        assert!((zero_point_motion(1.0, 1.0).unwrap() - (HBAR / 2.0).sqrt()).abs() < 1e-30);
        assert!(zero_point_motion(0.0, 1.0).is_err());
        assert!(zero_point_motion(1.0, -1.0).is_err());
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(slab_coefficients(f64::NAN, 1e-9, k0()).is_err());
        assert!(slab_coefficients(0.5, 1e-9, k0()).is_err());
        assert!(slab_coefficients(2.0, -1e-9, k0()).is_err());
        assert!(slab_coefficients(2.0, 1e-9, f64::INFINITY).is_err());
        assert!(Mirror::new(0.9, PI, 0.9, 0.0).is_err());
        assert!(Mirror::new(0.9, PI, 0.1, -1.0).is_err());
        assert!(MembraneCoeffs::new(1.1, 0.0, 0.0, 0.0).is_err());
        assert!(CavityGeometry::new(0.1, 0.1, 10).is_err());
        assert!(CavityGeometry::new(0.1, 0.05, 0).is_err());
    }

    #[test]
    fn presentation_convention_is_unitary() {
        let c = MembraneCoeffs::presentation(0.6).unwrap();
        assert!(c.is_lossless());
        assert!((c.r() - Complex64::new(-0.6, 0.0)).norm() < 1e-15);
        assert!((c.t() - Complex64::new(0.0, 0.8)).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn slab_is_unitary(n in 1.0f64..4.0, d in 0.0f64..2e-6, lambda in 400e-9f64..2000e-9) {
            let c = slab_coefficients(n, d, 2.0 * PI / lambda).unwrap();
            let (power, phase) = c.unitarity_defect();
            prop_assert!(power.abs() < 1e-12);
            prop_assert!(phase < 1e-10);
        }

        #[test]
        fn slab_is_half_wave_periodic(n in 1.0f64..4.0, d in 0.0f64..1e-6, lambda in 400e-9f64..2000e-9) {
            let k = 2.0 * PI / lambda;
            let a = slab_coefficients(n, d, k).unwrap();
            let b = slab_coefficients(n, d + lambda / (2.0 * n), k).unwrap();
            prop_assert!((a.r() - b.r()).norm() < 1e-10);
            // A half-wave layer adds π to the transmission phase.
            prop_assert!((a.t() + b.t()).norm() < 1e-10);
        }
    }
}
