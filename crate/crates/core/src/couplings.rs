//! Dispersive and dissipative optomechanical couplings.
//!
//! `Δx` is the membrane offset from the cavity center for MIM quantities and
//! from the nearest end mirror for MATE quantities. The membrane is assumed
//! lossless and evaluated at the empty-cavity wavenumber `k_N`.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::numerics::golden_grid_maximize;
use crate::optics::{CavityGeometry, MechanicalMode, MembraneSpec, Mirror, SPEED_OF_LIGHT};
use crate::resonance::{kappa, lossless_parts, mate_phase, mim_phase, solve_resonant_k};

/// Cavity geometry for the dispersive closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Mim,
    Mate,
}

/// Where the membrane sits relative to the input mirror (mirror 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Near the cavity center, `x = L/2 + Δx`.
    Mim,
    /// Next to the input mirror, `x = Δx`.
    MateInput,
    /// Next to the back mirror, `x = L − Δx`.
    MateBackstop,
}

impl Placement {
    /// Membrane position measured from mirror 1.
    pub fn position(self, dx: f64, length_l: f64) -> f64 {
        match self {
            Placement::Mim => 0.5 * length_l + dx,
            Placement::MateInput => dx,
            Placement::MateBackstop => length_l - dx,
        }
    }

    pub fn geometry(self) -> Geometry {
        match self {
            Placement::Mim => Geometry::Mim,
            Placement::MateInput | Placement::MateBackstop => Geometry::Mate,
        }
    }
}

/// How the dissipative coupling is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Closed-form derivative of the decay rate, with `dk/dx` from the
    /// closed-form resonance.
    Analytic,
    /// Centered finite difference of the decay rate along the exact
    /// resonance branch.
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremumKind {
    G1Max,
    G2Max,
}

/// A closed-form extremum of a dispersive coupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingExtremum {
    /// Location within one period `[0, λ_N/2)`, m.
    pub dx: f64,
    /// Coupling value at the location (rad/s/m or rad/s/m²).
    pub value: f64,
    pub kind: ExtremumKind,
}

/// All coupling quantities at one membrane position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    /// Offset `Δx`, m.
    pub dx: f64,
    /// First-order dispersive coupling, rad/s/m.
    pub g1: f64,
    /// Second-order dispersive coupling, rad/s/m².
    pub g2: f64,
    /// Decay rate, rad/s.
    pub kappa: f64,
    /// Dissipative coupling, unitless.
    pub b_tilde: f64,
    /// Linear strong-coupling parameter `−G⁽¹⁾x_zpf/κ`.
    pub a1_tilde: f64,
    /// Quadratic strong-coupling parameter `−G⁽²⁾x_zpf²/κ`.
    pub a2_tilde: f64,
}

#[derive(Debug, Clone, Copy)]
struct ClosedForm {
    n: u64,
    k_n: f64,
    r: f64,
    phi_r: f64,
    w_fsr: f64,
    length_l: f64,
}

impl ClosedForm {
    fn new(membrane: &MembraneSpec, branch_n: u64, length_l: f64, what: &str) -> Result<Self> {
        ensure_positive("cavity length", length_l)?;
        if branch_n == 0 {
            return Err(Error::invalid("branch N must be ≥ 1"));
        }
        let k_n = PI * branch_n as f64 / length_l;
        let c = membrane.coefficients_at(k_n)?;
        let (r, phi_r) = lossless_parts(&c, what)?;
        Ok(Self {
            n: branch_n,
            k_n,
            r,
            phi_r,
            w_fsr: PI * SPEED_OF_LIGHT / length_l,
            length_l,
        })
    }

    fn lambda_n(&self) -> f64 {
        2.0 * PI / self.k_n
    }

    fn t(&self) -> f64 {
        (1.0 - self.r * self.r).sqrt()
    }

    fn parity(&self) -> f64 {
        if self.n % 2 == 0 {
            -1.0
        } else {
            1.0
        }
    }

    fn mim(&self, dx: f64) -> Result<(f64, f64)> {
        let (r, s) = (self.r, self.parity());
        let theta = 2.0 * self.k_n * dx;
        let q = 1.0 - r * r * theta.cos().powi(2);
        if q <= 0.0 {
            return Err(Error::Division(format!(
                "MIM coupling singular at Δx = {dx} (|r_m| = {r}, cos²(2k_NΔx) = 1)"
            )));
        }
        let g1 = s * (2.0 * self.w_fsr * self.k_n / PI) * r * theta.sin() / q.sqrt();
        let g2 = s * (4.0 * self.w_fsr * self.k_n * self.k_n / PI) * r * (1.0 - r * r) * theta.cos()
            / q.powf(1.5);
        Ok((g1, g2))
    }

    fn mate(&self, dx: f64) -> Result<(f64, f64)> {
        let r = self.r;
        let c = 2.0 * self.k_n * dx + self.phi_r;
        let p = 1.0 + r * r + 2.0 * r * c.cos();
        if p <= 0.0 {
            return Err(Error::Division(format!(
                "MATE coupling singular at Δx = {dx} (|r_m| = 1 at 2k_NΔx + φr = π)"
            )));
        }
        let g1 = (2.0 * self.k_n / PI) * self.w_fsr * r * (r + c.cos()) / p;
        let g2 = -(4.0 * self.k_n * self.k_n / PI) * self.w_fsr * r * (1.0 - r * r) * c.sin() / (p * p);
        Ok((g1, g2))
    }

    fn dispersive(&self, geometry: Geometry, dx: f64) -> Result<(f64, f64)> {
        match geometry {
            Geometry::Mim => self.mim(dx),
            Geometry::Mate => self.mate(dx),
        }
    }

    /// Resonant wavenumber, its derivative along `x` and the round-trip
    /// phase `ψ = 2kx + φr` from the closed forms, with `ψ` reduced exactly.
    fn branch(&self, placement: Placement, dx: f64) -> Result<(f64, f64, f64)> {
        let nf = self.n as f64;
        match placement {
            Placement::Mim => {
                let u = mim_phase(dx, self.n, self.k_n, self.r, self.phi_r);
                let k = (nf * PI + u) / self.length_l;
                let (g1, _) = self.mim(dx)?;
                let psi = (self.n % 2) as f64 * PI + u + 2.0 * k * dx + self.phi_r;
                Ok((k, g1 / SPEED_OF_LIGHT, psi))
            }
            Placement::MateInput | Placement::MateBackstop => {
                let u = mate_phase(dx, self.k_n, self.r, self.phi_r);
                let k = (nf * PI + u) / self.length_l;
                let (g1, _) = self.mate(dx)?;
                if placement == Placement::MateInput {
                    Ok((k, g1 / SPEED_OF_LIGHT, 2.0 * k * dx + self.phi_r))
                } else {
                    Ok((k, -g1 / SPEED_OF_LIGHT, 2.0 * u - 2.0 * k * dx + self.phi_r))
                }
            }
        }
    }

    fn mate_guard(&self, placement: Placement, dx: f64) {
        if placement != Placement::Mim {
            let t2 = 1.0 - self.r * self.r;
            if 4.0 * dx.abs() / self.length_l >= t2 / 10.0 {
                warn!("MATE expressions assume 4Δx/L ≪ |t_m|²: 4Δx/L = {:.3e}, |t_m|² = {t2:.3e}", 4.0 * dx / self.length_l);
            }
        }
    }
}

/// Decay rate and its logarithmic derivative from the closed-form branch.
struct DecayTerms {
    kappa: f64,
    log_slope: f64,
}

fn decay_terms(r: f64, psi: f64, x: f64, length_l: f64, k: f64, dkdx: f64, l1: f64, l2: f64) -> Result<DecayTerms> {
    let one_m_r2 = 1.0 - r * r;
    let p = 1.0 + r * r + 2.0 * r * psi.cos();
    let dp = -2.0 * r * psi.sin() * 2.0 * (k + x * dkdx);
    let num = one_m_r2 * l1 + p * l2;
    let den = 2.0 * x * one_m_r2 + 2.0 * (length_l - x) * p;
    if num <= 0.0 {
        return Err(Error::Division("decay rate is zero; dissipative coupling undefined".into()));
    }
    if den <= 0.0 {
        return Err(Error::Division("decay-rate denominator vanishes".into()));
    }
    let dnum = l2 * dp;
    let dden = 2.0 * one_m_r2 - 2.0 * p + 2.0 * (length_l - x) * dp;
    Ok(DecayTerms {
        kappa: SPEED_OF_LIGHT * num / den,
        log_slope: dnum / num - dden / den,
    })
}

/// Linear and quadratic MIM dispersive couplings `(G⁽¹⁾, G⁽²⁾)`.
pub fn dispersive_mim(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<(f64, f64)> {
    ensure_finite("Δx", dx)?;
    ClosedForm::new(membrane, branch_n, length_l, "dispersive_mim")?.mim(dx)
}

/// Linear and quadratic MATE dispersive couplings `(G⁽¹⁾, G⁽²⁾)`.
pub fn dispersive_mate(dx: f64, branch_n: u64, membrane: &MembraneSpec, length_l: f64) -> Result<(f64, f64)> {
    ensure_finite("Δx", dx)?;
    ClosedForm::new(membrane, branch_n, length_l, "dispersive_mate")?.mate(dx)
}

/// Closed-form extrema of `G⁽¹⁾` and `G⁽²⁾` within one period `[0, λ_N/2)`.
pub fn extremal_couplings(
    membrane: &MembraneSpec,
    length_l: f64,
    branch_n: u64,
    geometry: Geometry,
) -> Result<Vec<CouplingExtremum>> {
    let cf = ClosedForm::new(membrane, branch_n, length_l, "extremal_couplings")?;
    if cf.r >= 1.0 {
        return Err(Error::invalid("extremal couplings need |r_m| < 1"));
    }
    let period = cf.lambda_n() / 2.0;
    let wrap = |dx: f64| dx.rem_euclid(period);
    let (g1_at, g2_at): (Vec<f64>, Vec<f64>) = match geometry {
        Geometry::Mim => {
            let lam = cf.lambda_n();
            (vec![lam / 8.0, 3.0 * lam / 8.0], vec![0.0, lam / 4.0])
        }
        Geometry::Mate => {
            let r = cf.r;
            let g1 = vec![wrap((PI - cf.phi_r) / (2.0 * cf.k_n))];
            let root = ((6.0 * r + (r.powi(4) + 34.0 * r * r + 1.0).sqrt()) / (1.0 - r).powi(2)).sqrt();
            let half = 2.0 * root.atan();
            let g2 = vec![
                wrap((-cf.phi_r + half) / (2.0 * cf.k_n)),
                wrap((-cf.phi_r - half) / (2.0 * cf.k_n)),
            ];
            (g1, g2)
        }
    };
    let mut out = Vec::with_capacity(g1_at.len() + g2_at.len());
    for dx in g1_at {
        out.push(CouplingExtremum {
            dx,
            value: cf.dispersive(geometry, dx)?.0,
            kind: ExtremumKind::G1Max,
        });
    }
    for dx in g2_at {
        out.push(CouplingExtremum {
            dx,
            value: cf.dispersive(geometry, dx)?.1,
            kind: ExtremumKind::G2Max,
        });
    }
    Ok(out)
}

/// MATE positions within `[0, λ_N/2)` where `G⁽¹⁾` vanishes:
/// `Δx = (±arccos(−|r_m|) − φr + 2πj)/(2k_N)`.
pub fn pure_quadratic_points(membrane: &MembraneSpec, branch_n: u64, length_l: f64) -> Result<Vec<f64>> {
    let cf = ClosedForm::new(membrane, branch_n, length_l, "pure_quadratic_points")?;
    let period = cf.lambda_n() / 2.0;
    let a = (-cf.r).acos();
    let mut pts: Vec<f64> = [a, -a]
        .iter()
        .map(|s| ((s - cf.phi_r) / (2.0 * cf.k_n)).rem_euclid(period))
        .collect();
    pts.sort_by(f64::total_cmp);
    pts.dedup_by(|a, b| (*a - *b).abs() < 1e-18);
    Ok(pts)
}

/// Dissipative coupling `B̃ = (dκ/dx)·x_zpf/κ` with `x` moving the membrane
/// away from mirror 1 and `k` following the resonance branch.
#[allow(clippy::too_many_arguments)]
pub fn dissipative_b(
    dx: f64,
    branch_n: u64,
    membrane: &MembraneSpec,
    mirror1: &Mirror,
    mirror2: &Mirror,
    length_l: f64,
    mode: &MechanicalMode,
    placement: Placement,
    method: Method,
) -> Result<f64> {
    ensure_finite("Δx", dx)?;
    let cf = ClosedForm::new(membrane, branch_n, length_l, "dissipative_b")?;
    cf.mate_guard(placement, dx);
    let x = placement.position(dx, length_l);
    if !(x > 0.0 && x < length_l) {
        return Err(Error::invalid(format!("membrane position {x} m outside (0, L)")));
    }
    match method {
        Method::Analytic => {
            let (k, dkdx, psi) = cf.branch(placement, dx)?;
            let t = decay_terms(cf.r, psi, x, length_l, k, dkdx, mirror1.total_loss(), mirror2.total_loss())?;
            Ok(t.log_slope * mode.x_zpf())
        }
        Method::Numeric => {
            let h = cf.lambda_n() / 1e4;
            let kap = |x: f64| -> Result<f64> {
                let g = CavityGeometry::new(length_l, x, branch_n)?;
                let s = solve_resonant_k(&g, membrane, branch_n)?;
                kappa(x, s.wavenumber_k, membrane, mirror1, mirror2, length_l)
            };
            let k0 = kap(x)?;
            if k0 <= 0.0 {
                return Err(Error::Division("decay rate is zero; dissipative coupling undefined".into()));
            }
            let slope = (kap(x + h)? - kap(x - h)?) / (2.0 * h);
            Ok(slope * mode.x_zpf() / k0)
        }
    }
}

/// `B̃` at the purely quadratic points of `placement`, as `(Δx, B̃)` pairs.
///
/// MIM points are the nodes/antinodes `Δx = jλ_N/4`; MATE points are those
/// of [`pure_quadratic_points`]. Magnitudes are the small-`|t_m|` closed
/// forms; signs follow the analytic coupling at the same point.
pub fn pure_point_dissipative(
    membrane: &MembraneSpec,
    mode: &MechanicalMode,
    length_l: f64,
    branch_n: u64,
    placement: Placement,
) -> Result<Vec<(f64, f64)>> {
    let cf = ClosedForm::new(membrane, branch_n, length_l, "pure_point_dissipative")?;
    let t = cf.t();
    if t == 0.0 {
        return Err(Error::Division("pure-point dissipative coupling undefined for |t_m| = 0".into()));
    }
    let x_zpf = mode.x_zpf();
    let points = match placement {
        Placement::Mim => vec![0.0, cf.lambda_n() / 4.0],
        _ => pure_quadratic_points(membrane, branch_n, length_l)?,
    };
    let single_port = Mirror::perfect();
    let input = Mirror::lossless(1e-4)?;
    points
        .into_iter()
        .map(|dx| {
            let magnitude = match placement {
                Placement::Mim => 2.0 * cf.k_n * x_zpf * cf.r / t,
                Placement::MateInput => 4.0 * cf.k_n * x_zpf * cf.r / t,
                Placement::MateBackstop => 4.0 * cf.k_n * x_zpf * (dx / length_l) * cf.r / t,
            };
            if magnitude == 0.0 {
                return Ok((dx, 0.0));
            }
            let sign = match placement {
                Placement::MateBackstop if dx == 0.0 => 1.0,
                _ => dissipative_b(dx.max(f64::MIN_POSITIVE), branch_n, membrane, &input, &single_port, length_l, mode, placement, Method::Analytic)?.signum(),
            };
            Ok((dx, sign * magnitude))
        })
        .collect()
}

/// `(Ã⁽¹⁾, Ã⁽²⁾) = (−G⁽¹⁾x_zpf/κ, −G⁽²⁾x_zpf²/κ)`.
pub fn strong_parameters(g1: f64, g2: f64, kappa: f64, x_zpf: f64) -> Result<(f64, f64)> {
    if kappa == 0.0 {
        return Err(Error::Division("strong-coupling parameters undefined for κ = 0".into()));
    }
    ensure_finite("κ", kappa)?;
    Ok((-g1 * x_zpf / kappa, -g2 * x_zpf * x_zpf / kappa))
}

/// Small-`|t_m|` maxima of the strong-coupling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongMaxima {
    /// `Ã⁽¹⁾max = −8k_N x_zpf/(|t₁|²|t_m|²)`, equal for MIM and MATE.
    pub a1_max: f64,
    /// MATE/MIM ratio of `Ã⁽²⁾` maxima, `4/(3√3|t_m|)`.
    pub a2_ratio: f64,
}

pub fn strong_maxima(t1_sq: f64, t_m: f64, k_n: f64, x_zpf: f64) -> Result<StrongMaxima> {
    ensure_positive("|t₁|²", t1_sq)?;
    ensure_positive("|t_m|", t_m)?;
    Ok(StrongMaxima {
        a1_max: -8.0 * k_n * x_zpf / (t1_sq * t_m * t_m),
        a2_ratio: 4.0 / (3.0 * 3f64.sqrt() * t_m),
    })
}

/// Every coupling quantity at one position, from the closed forms.
#[allow(clippy::too_many_arguments)]
pub fn coupling_report(
    dx: f64,
    branch_n: u64,
    membrane: &MembraneSpec,
    mirror1: &Mirror,
    mirror2: &Mirror,
    length_l: f64,
    mode: &MechanicalMode,
    placement: Placement,
) -> Result<CouplingReport> {
    ensure_finite("Δx", dx)?;
    let cf = ClosedForm::new(membrane, branch_n, length_l, "coupling_report")?;
    cf.mate_guard(placement, dx);
    let x = placement.position(dx, length_l);
    if !(x > 0.0 && x < length_l) {
        return Err(Error::invalid(format!("membrane position {x} m outside (0, L)")));
    }
    let (mut g1, g2) = cf.dispersive(placement.geometry(), dx)?;
    if placement == Placement::MateBackstop {
        // Moving the membrane toward mirror 1 shrinks Δx.
        g1 = -g1;
    }
    let (k, dkdx, psi) = cf.branch(placement, dx)?;
    let terms = decay_terms(cf.r, psi, x, length_l, k, dkdx, mirror1.total_loss(), mirror2.total_loss())?;
    let x_zpf = mode.x_zpf();
    let (a1_tilde, a2_tilde) = strong_parameters(g1, g2, terms.kappa, x_zpf)?;
    Ok(CouplingReport {
        dx,
        g1,
        g2,
        kappa: terms.kappa,
        b_tilde: terms.log_slope * x_zpf,
        a1_tilde,
        a2_tilde,
    })
}

/// Measured MATE/MIM enhancement ratios next to their small-`|t_m|` limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnhancementRatios {
    pub t_m: f64,
    pub g1: f64,
    pub g1_limit: f64,
    pub g2: f64,
    pub g2_limit: f64,
    pub b: f64,
    pub b_limit: f64,
    pub a2: f64,
    pub a2_limit: f64,
}

/// Largest `Δx` satisfying the MATE validity guard `4Δx/L < |t_m|²/10`.
pub fn mate_guard_dx(t_m: f64, length_l: f64) -> f64 {
    length_l * t_m * t_m / 40.0
}

/// Maximizes each coupling magnitude over `Δx` for both geometries and
/// reports the MATE/MIM ratios.
///
/// Single-port cavity (mirror 2 perfect). Dispersive maxima are taken over a
/// full period; `B̃` and `Ã⁽²⁾`, which depend on the explicit position through
/// `κ`, are maximized for MATE only where the validity guard holds.
pub fn enhancement_ratios(
    membrane: &MembraneSpec,
    length_l: f64,
    branch_n: u64,
    mirror1: &Mirror,
    mode: &MechanicalMode,
) -> Result<EnhancementRatios> {
    let cf = ClosedForm::new(membrane, branch_n, length_l, "enhancement_ratios")?;
    let t_m = cf.t();
    if t_m == 0.0 || cf.r == 0.0 {
        return Err(Error::Degenerate("enhancement ratios need 0 < |r_m| < 1".into()));
    }
    let period = cf.lambda_n() / 2.0;
    let grid = 20_000;
    let tol = 1e-12;
    let m2 = Mirror::perfect();
    let x_zpf = mode.x_zpf();
    let max_abs = |f: &dyn Fn(f64) -> Result<f64>, lo: f64, hi: f64| -> Result<f64> {
        // Probe once so that errors surface instead of being maximized away.
        f(0.5 * (lo + hi))?;
        let e = golden_grid_maximize(|d| f(d).map(f64::abs).unwrap_or(f64::NEG_INFINITY), lo, hi, grid, tol);
        Ok(e.value)
    };
    let g1_mim = max_abs(&|d| Ok(cf.mim(d)?.0), 0.0, period)?;
    let g1_mate = max_abs(&|d| Ok(cf.mate(d)?.0), 0.0, period)?;
    let g2_mim = max_abs(&|d| Ok(cf.mim(d)?.1), 0.0, period)?;
    let g2_mate = max_abs(&|d| Ok(cf.mate(d)?.1), 0.0, period)?;

    let (l1, l2) = (mirror1.total_loss(), m2.total_loss());
    let terms = |p: Placement, d: f64| -> Result<DecayTerms> {
        let (k, dkdx, psi) = cf.branch(p, d)?;
        decay_terms(cf.r, psi, p.position(d, length_l), length_l, k, dkdx, l1, l2)
    };
    let guard = mate_guard_dx(t_m, length_l).min(period);
    let lo = guard * 1e-9;
    let b_mim = max_abs(&|d| Ok(terms(Placement::Mim, d)?.log_slope * x_zpf), -period / 2.0, period / 2.0)?;
    let b_mate = max_abs(&|d| Ok(terms(Placement::MateInput, d)?.log_slope * x_zpf), lo, guard)?;
    let a2_mim = max_abs(
        &|d| Ok(cf.mim(d)?.1 * x_zpf * x_zpf / terms(Placement::Mim, d)?.kappa),
        -period / 2.0,
        period / 2.0,
    )?;
    let a2_mate = max_abs(
        &|d| Ok(cf.mate(d)?.1 * x_zpf * x_zpf / terms(Placement::MateInput, d)?.kappa),
        lo,
        guard,
    )?;
    let s3 = 3f64.sqrt();
    Ok(EnhancementRatios {
        t_m,
        g1: g1_mate / g1_mim,
        g1_limit: 2.0 / (t_m * t_m),
        g2: g2_mate / g2_mim,
        g2_limit: 9.0 / (2.0 * s3) / t_m.powi(3),
        b: b_mate / b_mim,
        b_limit: 8.0 / (3.0 * s3) / t_m,
        a2: a2_mate / a2_mim,
        a2_limit: 4.0 / (3.0 * s3 * t_m),
    })
}
