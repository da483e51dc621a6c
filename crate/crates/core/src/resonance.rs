//! Cavity resonances, decay rate and sub-cavity power balance.
//!
//! The exact resonance condition is solved in a reduced variable: writing
//! `kL = Nπ + v − φr`, the lossless condition becomes
//! `cos v + |r|·cos(2kx − v + φr) = 0`, which changes sign exactly once on
//! `v ∈ [0, π]` for `|r| < 1`. Branch `N` is therefore the root in that
//! bracket, and the branch is continuous in `x` by construction.
//!
//! Closed forms use `Δx` measured from the cavity center (MIM) or from
//! mirror 1 (MATE).

use std::f64::consts::{FRAC_PI_2, PI};

use log::warn;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::numerics::{brent_root, find_brackets};
use crate::optics::{CavityGeometry, MembraneCoeffs, MembraneSpec, Mirror, SPEED_OF_LIGHT};

/// Largest accepted residual of the resonance condition at a returned root.
pub const RESIDUAL_TOL: f64 = 1e-10;

/// A single resonance of the mirror–membrane–mirror cavity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceSolution {
    /// Membrane position from mirror 1, m.
    pub membrane_x: f64,
    /// Resonant wavenumber, rad/m.
    pub wavenumber_k: f64,
    /// Resonant angular frequency `c·k`, rad/s.
    pub omega: f64,
    pub branch_n: u64,
    /// Decay rate, rad/s; present when the end mirrors were supplied.
    pub kappa: Option<f64>,
    /// Leftover of the resonance condition at the root.
    pub residual: f64,
}

/// Magnitude and phase of a lossless membrane, or an error naming the
/// closed form that needs it.
pub(crate) fn lossless_parts(c: &MembraneCoeffs, what: &str) -> Result<(f64, f64)> {
    if !c.is_lossless() {
        let (p, ph) = c.unitarity_defect();
        return Err(Error::invalid(format!(
            "{what} requires a lossless membrane (power defect {p:.3e}, phase defect {ph:.3e})"
        )));
    }
    Ok((c.r_mag, c.r_phase))
}

fn branch_k(branch_n: u64, v: f64, phi_r: f64, length_l: f64) -> f64 {
    (branch_n as f64 * PI + v - phi_r) / length_l
}

/// Reduced resonance function for a lossless membrane.
fn reduced_lossless(v: f64, r: f64, phi_r: f64, branch_n: u64, x: f64, length_l: f64) -> f64 {
    // θ = 2kx, split so the large Nπ part is reduced exactly.
    let ratio = x / length_l;
    let n_part = (2.0 * branch_n as f64 * ratio).rem_euclid(2.0) * PI;
    let theta = n_part + 2.0 * (v - phi_r) * ratio;
    v.cos() + r * (theta - v + phi_r).cos()
}

/// Reduced resonance function for a general (possibly lossy) membrane.
struct GeneralCondition {
    q: Complex64,
    rot: Complex64,
    r: Complex64,
    phi_r: f64,
}

impl GeneralCondition {
    fn new(c: &MembraneCoeffs) -> Result<Self> {
        if c.r_mag >= 1.0 - 1e-15 {
            return Err(Error::Division(
                "general resonance condition is degenerate for |r_m| = 1".into(),
            ));
        }
        let (r, t) = (c.r(), c.t());
        let q = t * t - r * r;
        let root = (-q).sqrt();
        let psi0 = root.arg();
        let dist = |a: f64| ((a - c.r_phase + PI).rem_euclid(2.0 * PI) - PI).abs();
        let psi = if dist(psi0) <= dist(psi0 + PI) { psi0 } else { psi0 + PI };
        Ok(Self {
            q,
            rot: Complex64::from_polar(1.0, -psi),
            r,
            phi_r: c.r_phase,
        })
    }

    fn eval(&self, v: f64, branch_n: u64, x: f64, length_l: f64) -> f64 {
        let ratio = x / length_l;
        let w = v - self.phi_r;
        let theta = (2.0 * branch_n as f64 * ratio).rem_euclid(2.0) * PI + 2.0 * w * ratio;
        let e = Complex64::from_polar(1.0, w);
        let g = self.q * e - e.conj() - 2.0 * self.r * (theta - w).cos();
        -0.5 * (self.rot * g).re
    }
}

/// Resonant wavenumber of branch `branch_n` for the membrane at
/// `geometry.membrane_x`.
///
/// Lossless membranes use the real condition `−cos(kL+φr) = |r|cos(2kx−kL)`;
/// others use the real part of the general complex condition, rotated so that
/// it reduces to the lossless form. Slab coefficients are re-evaluated at the
/// root until self-consistent.
pub fn solve_resonant_k(
    geometry: &CavityGeometry,
    membrane: &MembraneSpec,
    branch_n: u64,
) -> Result<ResonanceSolution> {
    let length_l = geometry.length_l;
    let x = geometry.membrane_x;
    if branch_n == 0 {
        return Err(Error::invalid("branch N must be ≥ 1"));
    }
    if !(x > 0.0 && x < length_l) {
        return Err(Error::invalid(format!(
            "membrane position must satisfy 0 < x < L (x = {x}, L = {length_l})"
        )));
    }
    let mut k = PI * branch_n as f64 / length_l;
    if length_l < 100.0 * 2.0 * PI / k {
        warn!("cavity length {length_l} m is below 100 wavelengths; long-cavity approximations degrade");
    }
    let mut solution = None;
    for _ in 0..50 {
        let coeffs = membrane.coefficients_at(k)?;
        let s = solve_with_coeffs(&coeffs, branch_n, x, length_l)?;
        let converged = (s.wavenumber_k - k).abs() <= 1e-15 * k;
        k = s.wavenumber_k;
        solution = Some(s);
        if converged || matches!(membrane, MembraneSpec::Coeffs(_)) {
            break;
        }
    }
    let s = solution.expect("loop runs at least once");
    if !(s.residual.abs() < RESIDUAL_TOL) {
        return Err(Error::RootNotFound {
            lo: 0.0,
            hi: PI,
            f_lo: s.residual,
            f_hi: s.residual,
        });
    }
    Ok(s)
}

fn solve_with_coeffs(c: &MembraneCoeffs, branch_n: u64, x: f64, length_l: f64) -> Result<ResonanceSolution> {
    let phi_r = c.r_phase;
    let v = if c.is_lossless() {
        let r = c.r_mag;
        brent_root(
            |v| reduced_lossless(v, r, phi_r, branch_n, x, length_l),
            0.0,
            PI,
            1e-15,
            0.0,
        )?
    } else {
        let g = GeneralCondition::new(c)?;
        let f = |v: f64| g.eval(v, branch_n, x, length_l);
        match brent_root(f, 0.0, PI, 1e-15, 0.0) {
            Ok(v) => v,
            Err(_) => {
                let brackets = find_brackets(f, -PI, 2.0 * PI, 96);
                let (lo, hi) = brackets
                    .into_iter()
                    .min_by(|a, b| {
                        let da = (0.5 * (a.0 + a.1) - FRAC_PI_2).abs();
                        let db = (0.5 * (b.0 + b.1) - FRAC_PI_2).abs();
                        da.total_cmp(&db)
                    })
                    .ok_or(Error::RootNotFound {
                        lo: -PI,
                        hi: 2.0 * PI,
                        f_lo: f(-PI),
                        f_hi: f(2.0 * PI),
                    })?;
                brent_root(f, lo, hi, 1e-15, 0.0)?
            }
        }
    };
    let k = branch_k(branch_n, v, phi_r, length_l);
    // Evaluated in the reduced variable: the unreduced form loses ~1e-10 to
    // rounding of kL at optical lengths.
    let residual = if c.is_lossless() {
        reduced_lossless(v, c.r_mag, phi_r, branch_n, x, length_l)
    } else {
        GeneralCondition::new(c)?.eval(v, branch_n, x, length_l)
    };
    Ok(ResonanceSolution {
        membrane_x: x,
        wavenumber_k: k,
        omega: SPEED_OF_LIGHT * k,
        branch_n,
        kappa: None,
        residual,
    })
}

/// Resonant cavity length at wavenumber `k` for a membrane at `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonantLength {
    /// Shortest resonant length greater than `x`, m.
    pub length_l: f64,
    /// Spacing `π/k` between successive resonant lengths, m.
    pub branch_step: f64,
}

/// Solves `tan(kL) = (cosφr + |r|cos2kx)/(sinφr − |r|sin2kx)` for `L`.
pub fn resonant_length(k: f64, x: f64, membrane: &MembraneSpec) -> Result<ResonantLength> {
    ensure_positive("wavenumber k", k)?;
    ensure_positive("membrane position", x)?;
    let c = membrane.coefficients_at(k)?;
    let (r, phi_r) = lossless_parts(&c, "resonant_length")?;
    let two_kx = 2.0 * k * x;
    let num = phi_r.cos() + r * two_kx.cos();
    let den = phi_r.sin() - r * two_kx.sin();
    if num.abs() < 1e-15 && den.abs() < 1e-15 {
        return Err(Error::Degenerate(
            "resonant length undefined: numerator and denominator both vanish".into(),
        ));
    }
    let base = num.atan2(den).rem_euclid(PI);
    let step = PI / k;
    let j = ((k * x - base) / PI).floor() + 1.0;
    let mut length_l = (base + j.max(0.0) * PI) / k;
    while length_l <= x {
        length_l += step;
    }
    Ok(ResonantLength {
        length_l,
        branch_step: step,
    })
}

/// Branch index `N` containing `k` for a cavity of length `L`.
pub fn branch_of(k: f64, length_l: f64, phi_r: f64) -> u64 {
    ((k * length_l + phi_r) / PI).floor().max(1.0) as u64
}

fn closed_form_guard(dx: f64, length_l: f64, k_n: f64) {
    let lambda = 2.0 * PI / k_n;
    if length_l < 100.0 * lambda {
        warn!("closed form used with L = {length_l} m < 100 λ");
    }
    if dx.abs() > length_l / 20.0 {
        warn!("closed form used with |Δx| = {} m > L/20", dx.abs());
    }
}

fn closed_form_setup(
    dx: f64,
    branch_n: u64,
    membrane: &MembraneSpec,
    length_l: f64,
    what: &str,
) -> Result<(f64, f64, f64)> {
    ensure_finite("Δx", dx)?;
    ensure_positive("cavity length", length_l)?;
    if branch_n == 0 {
        return Err(Error::invalid("branch N must be ≥ 1"));
    }
    let k_n = PI * branch_n as f64 / length_l;
    let c = membrane.coefficients_at(k_n)?;
    let (r, phi_r) = lossless_parts(&c, what)?;
    closed_form_guard(dx, length_l, k_n);
    Ok((k_n, r, phi_r))
}

/// MIM detuning `(ω − Nω_FSR)/ω_FSR` for `Δx` measured from the cavity
/// center.
pub fn detuning_mim_fsr(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<f64> {
    let (k_n, r, phi_r) = closed_form_setup(dx, branch_n, membrane, length_l, "omega_mim")?;
    Ok(mim_phase(dx, branch_n, k_n, r, phi_r) / PI)
}

pub(crate) fn mim_phase(dx: f64, branch_n: u64, k_n: f64, r: f64, phi_r: f64) -> f64 {
    let sign = if branch_n % 2 == 0 { -1.0 } else { 1.0 };
    (sign * r * (2.0 * k_n * dx).cos()).clamp(-1.0, 1.0).acos() - phi_r
}

/// MATE detuning `(ω − Nω_FSR)/ω_FSR` for `Δx` measured from mirror 1.
///
/// The arctangent is unwrapped to the continuous branch with
/// `ω − Nω_FSR ∈ [−φr, π − φr)·ω_FSR/π`, the same labelling as the exact
/// solver.
pub fn detuning_mate_fsr(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<f64> {
    let (k_n, r, phi_r) = closed_form_setup(dx, branch_n, membrane, length_l, "omega_mate")?;
    Ok(mate_phase(dx, k_n, r, phi_r) / PI)
}

pub(crate) fn mate_phase(dx: f64, k_n: f64, r: f64, phi_r: f64) -> f64 {
    let c = 2.0 * k_n * dx + phi_r;
    let v = FRAC_PI_2 + (r * c.sin()).atan2(1.0 + r * c.cos());
    v - phi_r
}

/// Closed-form MIM resonance frequency, rad/s.
pub fn omega_mim(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<f64> {
    let w = PI * SPEED_OF_LIGHT / length_l;
    Ok(w * (branch_n as f64 + detuning_mim_fsr(dx, branch_n, membrane, length_l)?))
}

/// Closed-form MATE resonance frequency, rad/s.
pub fn omega_mate(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<f64> {
    let w = PI * SPEED_OF_LIGHT / length_l;
    Ok(w * (branch_n as f64 + detuning_mate_fsr(dx, branch_n, membrane, length_l)?))
}

/// Decay rate of the resonance at membrane position `x` and resonant
/// wavenumber `k`, rad/s.
///
/// Each mirror contributes its transmission plus internal loss,
/// `|t_j|² + S_j`. A cavity with no loss at all yields zero (with a warning).
pub fn kappa(
    x: f64,
    k: f64,
    membrane: &MembraneSpec,
    mirror1: &Mirror,
    mirror2: &Mirror,
    length_l: f64,
) -> Result<f64> {
    ensure_positive("wavenumber k", k)?;
    ensure_positive("cavity length", length_l)?;
    if !(x > 0.0 && x < length_l) {
        return Err(Error::invalid(format!(
            "membrane position must satisfy 0 < x < L (x = {x}, L = {length_l})"
        )));
    }
    let c = membrane.coefficients_at(k)?;
    let (r, phi_r) = lossless_parts(&c, "kappa")?;
    let (l1, l2) = (mirror1.total_loss(), mirror2.total_loss());
    if l1 == 0.0 && l2 == 0.0 {
        warn!("both mirrors lossless: decay rate is zero");
        return Ok(0.0);
    }
    let one_m_r2 = 1.0 - r * r;
    let p = 1.0 + r * r + 2.0 * r * (2.0 * k * x + phi_r).cos();
    let num = SPEED_OF_LIGHT * (one_m_r2 * l1 + p * l2);
    let den = 2.0 * x * one_m_r2 + 2.0 * (length_l - x) * p;
    if den <= 0.0 {
        return Err(Error::Division("decay-rate denominator vanishes".into()));
    }
    Ok(num / den)
}

/// Ratio of intracavity powers `P₂/P₁` in the two sub-cavities.
pub fn subcavity_power_ratio(x: f64, k: f64, membrane: &MembraneSpec) -> Result<f64> {
    ensure_finite("membrane position", x)?;
    ensure_positive("wavenumber k", k)?;
    let c = membrane.coefficients_at(k)?;
    let (r, phi_r) = lossless_parts(&c, "subcavity_power_ratio")?;
    if r >= 1.0 {
        return Err(Error::Division("power ratio undefined for |r_m| = 1".into()));
    }
    Ok((1.0 + r * r + 2.0 * r * (2.0 * k * x + phi_r).cos()) / (1.0 - r * r))
}

/// Follows branch `branch_n` across a monotone grid of membrane positions,
/// attaching the decay rate at each point.
pub fn trace_branch(
    x_grid: &[f64],
    branch_n: u64,
    membrane: &MembraneSpec,
    mirror1: &Mirror,
    mirror2: &Mirror,
    length_l: f64,
) -> Result<Vec<ResonanceSolution>> {
    if x_grid.is_empty() {
        return Err(Error::invalid("empty position grid"));
    }
    let increasing = x_grid.windows(2).all(|w| w[1] > w[0]);
    let decreasing = x_grid.windows(2).all(|w| w[1] < w[0]);
    if !(increasing || decreasing) {
        return Err(Error::invalid("position grid must be strictly monotone"));
    }
    let w_fsr = PI * SPEED_OF_LIGHT / length_l;
    let mut out: Vec<ResonanceSolution> = Vec::with_capacity(x_grid.len());
    for (i, &x) in x_grid.iter().enumerate() {
        let g = CavityGeometry::new(length_l, x, branch_n).map_err(|e| Error::at_index(i, e))?;
        let mut s = solve_resonant_k(&g, membrane, branch_n).map_err(|e| Error::at_index(i, e))?;
        s.kappa = Some(
            kappa(x, s.wavenumber_k, membrane, mirror1, mirror2, length_l)
                .map_err(|e| Error::at_index(i, e))?,
        );
        if let Some(prev) = out.last() {
            let jump = (s.omega - prev.omega).abs();
            if jump > 0.5 * w_fsr {
                return Err(Error::Discontinuity {
                    index: i,
                    jump,
                    limit: 0.5 * w_fsr,
                });
            }
        }
        out.push(s);
    }
    Ok(out)
}
