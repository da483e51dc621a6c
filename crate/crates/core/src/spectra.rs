//! Transfer-matrix model of the mirror–membrane–mirror stack and the
//! reflection observables derived from it.
//!
//! Detunings are angular-frequency offsets from the empty-cavity resonance
//! `Nω_FSR` of the model's reference mode.

use std::f64::consts::PI;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::fitting::lsq::{least_squares_solve, FitProblem, LsqOptions, Parameter};
use crate::numerics::{brent_root, minimize_scalar};
use crate::optics::{CavityGeometry, MembraneSpec, Mirror, SPEED_OF_LIGHT};
use crate::resonance::{kappa, solve_resonant_k};

/// Full cavity model for reflection measurements through mirror 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CavityModel {
    /// Input mirror; `loss_s` is the internal loss `S₁`.
    pub mirror1: Mirror,
    /// Back mirror; its transmission stands for its total loss.
    pub mirror2: Mirror,
    pub membrane: MembraneSpec,
    /// Mirror spacing, m.
    pub length_l: f64,
    /// Fraction ε of the input power coupled to the cavity mode.
    pub mode_match_eps: f64,
    /// Empty-cavity mode index `N` that anchors the detuning axis.
    pub mode_index_n: u64,
}

impl CavityModel {
    pub fn new(
        mirror1: Mirror,
        mirror2: Mirror,
        membrane: MembraneSpec,
        length_l: f64,
        mode_match_eps: f64,
        mode_index_n: u64,
    ) -> Result<Self> {
        ensure_positive("cavity length", length_l)?;
        ensure_finite("mode matching ε", mode_match_eps)?;
        if !(0.0..=1.0).contains(&mode_match_eps) {
            return Err(Error::invalid(format!("mode matching ε must lie in [0, 1], got {mode_match_eps}")));
        }
        if mode_index_n == 0 {
            return Err(Error::invalid("mode index N must be ≥ 1"));
        }
        Mirror::new(mirror1.r_mag, mirror1.r_phase, mirror1.t_mag, mirror1.loss_s)?;
        Mirror::new(mirror2.r_mag, mirror2.r_phase, mirror2.t_mag, mirror2.loss_s)?;
        Ok(Self {
            mirror1,
            mirror2,
            membrane,
            length_l,
            mode_match_eps,
            mode_index_n,
        })
    }

    pub fn fsr(&self) -> f64 {
        PI * SPEED_OF_LIGHT / self.length_l
    }

    pub fn k_n(&self) -> f64 {
        PI * self.mode_index_n as f64 / self.length_l
    }

    /// Wavenumber at detuning `delta` (rad/s) from `Nω_FSR`.
    pub fn k_at(&self, delta: f64) -> f64 {
        self.k_n() + delta / SPEED_OF_LIGHT
    }

    /// Detuning of wavenumber `k` from `Nω_FSR`, rad/s.
    pub fn detuning_of(&self, k: f64) -> f64 {
        (k - self.k_n()) * SPEED_OF_LIGHT
    }

    /// Empty-cavity decay rate `c(|t₁|² + |t₂|² + S₁ + S₂)/(2L)`.
    pub fn empty_kappa(&self) -> f64 {
        SPEED_OF_LIGHT * (self.mirror1.total_loss() + self.mirror2.total_loss()) / (2.0 * self.length_l)
    }
}

type M2 = [[Complex64; 2]; 2];

fn mul(a: &M2, b: &M2) -> M2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

/// Transfer matrix of a symmetric element scaled by its transmission `t`,
/// so that opaque elements (`t = 0`) stay finite.
fn element(r: Complex64, t: Complex64) -> M2 {
    let one = Complex64::new(1.0, 0.0);
    [[one, -r], [r, t * t - r * r]]
}

fn propagation(phase: f64) -> M2 {
    let e = Complex64::from_polar(1.0, phase);
    [[e.conj(), Complex64::new(0.0, 0.0)], [Complex64::new(0.0, 0.0), e]]
}

/// Attenuating layer with power transmission `exp(−s/2)` per traversal.
fn loss_layer(s: f64) -> M2 {
    let a = (-0.25 * s).exp();
    [[Complex64::new(1.0 / a, 0.0), Complex64::new(0.0, 0.0)], [Complex64::new(0.0, 0.0), Complex64::new(a, 0.0)]]
}

/// Complex reflection and transmission amplitudes of the stack at
/// wavenumber `k` with the membrane at `x` from mirror 1.
///
/// Mirror 1's internal loss sits on its cavity-side face and removes
/// `exp(−S₁)` of the power per round trip; mirror 2's loss, if any, is
/// treated the same way on its own face.
pub fn stack_response(model: &CavityModel, k: f64, x: f64) -> Result<(Complex64, Complex64)> {
    ensure_positive("wavenumber k", k)?;
    stack_response_detuned(model, k - model.k_n(), x)
}

/// Round-trip phases `(kx, k(L − x))` at `k = k_N + dk`. The `k_N` part is
/// reduced modulo 2π before the offset is added, so that small offsets
/// keep full relative precision.
fn phases(model: &CavityModel, dk: f64, x: f64) -> (f64, f64) {
    let n = model.mode_index_n;
    let l = model.length_l;
    let a = PI * ((n as f64 * (x / l)) % 2.0);
    let half = if n % 2 == 0 { 0.0 } else { PI };
    (a + dk * x, half - a + dk * (l - x))
}

/// [`stack_response`] at wavenumber offset `dk` (rad/m) from `k_N`.
pub fn stack_response_detuned(model: &CavityModel, dk: f64, x: f64) -> Result<(Complex64, Complex64)> {
    let l = model.length_l;
    if !(x > 0.0 && x < l) {
        return Err(Error::invalid(format!("membrane position must satisfy 0 < x < L (x = {x}, L = {l})")));
    }
    let k = model.k_n() + dk;
    ensure_positive("wavenumber k", k)?;
    let (p1, p2) = phases(model, dk, x);
    let m = model.membrane.coefficients_at(k)?;
    let (m1, m2) = (&model.mirror1, &model.mirror2);
    let mut total = element(m1.reflection(), m1.transmission());
    if m1.loss_s > 0.0 {
        total = mul(&total, &loss_layer(m1.loss_s));
    }
    total = mul(&total, &propagation(p1));
    total = mul(&total, &element(m.r(), m.t()));
    total = mul(&total, &propagation(p2));
    if m2.loss_s > 0.0 {
        total = mul(&total, &loss_layer(m2.loss_s));
    }
    total = mul(&total, &element(m2.reflection(), m2.transmission()));
    let n00 = total[0][0];
    if n00.norm() < 1e-300 {
        return Err(Error::Singular("stack transfer matrix has a vanishing (0,0) element".into()));
    }
    let r = total[1][0] / n00;
    let t = m1.transmission() * m.t() * m2.transmission() / n00;
    Ok((r, t))
}

/// Fraction of the incident power absorbed by the internal loss layers,
/// from the field flux on either side of each layer.
pub fn absorbed_fraction(model: &CavityModel, k: f64, x: f64) -> Result<f64> {
    let (r, _) = stack_response(model, k, x)?;
    let (m1, m2) = (&model.mirror1, &model.mirror2);
    if m1.t_mag == 0.0 {
        return Ok(0.0);
    }
    let m = model.membrane.coefficients_at(k)?;
    // Inverse transfer matrices carry (forward, backward) amplitudes from
    // left to right; each has unit determinant once divided by its t.
    let inv_element = |r: Complex64, t: Complex64| -> M2 {
        let n = element(r, t);
        [[n[1][1] / t, -n[0][1] / t], [-n[1][0] / t, n[0][0] / t]]
    };
    let apply = |a: &M2, v: [Complex64; 2]| [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]];
    let flux = |v: [Complex64; 2]| v[0].norm_sqr() - v[1].norm_sqr();
    let inv_loss = |s: f64| -> M2 {
        let a = (-0.25 * s).exp();
        [[Complex64::new(a, 0.0), Complex64::new(0.0, 0.0)], [Complex64::new(0.0, 0.0), Complex64::new(1.0 / a, 0.0)]]
    };
    let mut v = apply(&inv_element(m1.reflection(), m1.transmission()), [Complex64::new(1.0, 0.0), r]);
    let mut absorbed = 0.0;
    if m1.loss_s > 0.0 {
        let after = apply(&inv_loss(m1.loss_s), v);
        absorbed += flux(v) - flux(after);
        v = after;
    }
    if m2.loss_s > 0.0 {
        let (p1, p2) = phases(model, k - model.k_n(), x);
        v = apply(&propagation(-p1), v);
        if m.t_mag == 0.0 {
            return Ok(absorbed);
        }
        v = apply(&inv_element(m.r(), m.t()), v);
        v = apply(&propagation(-p2), v);
        absorbed += flux(v) - flux(apply(&inv_loss(m2.loss_s), v));
    }
    Ok(absorbed)
}

/// Normalized reflected power `(1 − ε) + ε|r(δ)|²` across detunings.
pub fn reflection_trace(model: &CavityModel, x: f64, detuning_grid: &[f64]) -> Result<Vec<f64>> {
    if detuning_grid.is_empty() {
        return Err(Error::invalid("empty detuning grid"));
    }
    let eps = model.mode_match_eps;
    detuning_grid
        .iter()
        .map(|&d| {
            let (r, _) = stack_response_detuned(model, d / SPEED_OF_LIGHT, x)?;
            Ok((1.0 - eps) + eps * r.norm_sqr())
        })
        .collect()
}

/// Reflection spectra over a grid of membrane positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumMap {
    pub x_grid: Vec<f64>,
    pub detuning_grid: Vec<f64>,
    /// `values[i][j]` is the normalized reflection at `x_grid[i]`,
    /// `detuning_grid[j]`.
    pub values: Vec<Vec<f64>>,
    /// Set when the detuning step exceeds a third of the narrowest
    /// expected linewidth.
    pub coarse_grid: bool,
}

pub fn spectrum_map(model: &CavityModel, x_grid: &[f64], detuning_grid: &[f64]) -> Result<SpectrumMap> {
    if x_grid.is_empty() || detuning_grid.is_empty() {
        return Err(Error::invalid("empty grid"));
    }
    let monotone = |g: &[f64]| g.windows(2).all(|w| w[1] > w[0]) || g.windows(2).all(|w| w[1] < w[0]);
    if !monotone(x_grid) || !monotone(detuning_grid) {
        return Err(Error::invalid("grids must be strictly monotone"));
    }
    let values = x_grid
        .par_iter()
        .enumerate()
        .map(|(i, &x)| reflection_trace(model, x, detuning_grid).map_err(|e| Error::at_index(i, e)))
        .collect::<Result<Vec<_>>>()?;
    let step = detuning_grid
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .fold(0.0, f64::max);
    let k_n = model.k_n();
    let narrowest = x_grid
        .iter()
        .filter_map(|&x| kappa(x, k_n, &model.membrane, &model.mirror1, &model.mirror2, model.length_l).ok())
        .fold(f64::INFINITY, f64::min);
    let coarse_grid = detuning_grid.len() > 1 && step > narrowest / 3.0;
    if coarse_grid {
        warn!("detuning step {step:.3e} rad/s does not resolve the narrowest linewidth {narrowest:.3e} rad/s");
    }
    Ok(SpectrumMap {
        x_grid: x_grid.to_vec(),
        detuning_grid: detuning_grid.to_vec(),
        values,
        coarse_grid,
    })
}

/// Resonance located directly on the transfer-matrix response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonanceDip {
    pub x: f64,
    /// Detuning of the reflection minimum from `Nω_FSR`, rad/s.
    pub detuning: f64,
    /// Full width at half maximum of the coupled power `1 − |r|²`, rad/s.
    pub kappa: f64,
    /// Normalized reflection at resonance, `(1 − ε) + ε|r|²`.
    pub r_res: f64,
}

/// Finds the resonance of branch `N` nearest the exact lossless prediction
/// and measures its width on the stack response.
pub fn resonance_dip(model: &CavityModel, x: f64) -> Result<ResonanceDip> {
    let n = model.mode_index_n;
    let g = CavityGeometry::new(model.length_l, x, n)?;
    let guess = solve_resonant_k(&g, &model.membrane, n)?.wavenumber_k;
    let kap_guess = kappa(x, guess, &model.membrane, &model.mirror1, &model.mirror2, model.length_l)
        .unwrap_or(0.0)
        .max(model.empty_kappa() * 1e-3);
    if kap_guess <= 0.0 {
        return Err(Error::Degenerate("lossless cavity has no reflection dip".into()));
    }
    // Coupled power as a function of wavenumber offset (rad/m) from the guess.
    let base = guess - model.k_n();
    let coupled = |dk: f64| -> f64 {
        stack_response_detuned(model, base + dk, x)
            .map(|(r, _)| 1.0 - r.norm_sqr())
            .unwrap_or(f64::NAN)
    };
    let w = kap_guess / SPEED_OF_LIGHT;
    let peak = minimize_scalar(|d| -coupled(d), -5.0 * w, 5.0 * w, 1e-12);
    let (dk0, top) = (peak.x, -peak.value);
    if !(top > 0.0) {
        return Err(Error::Degenerate(format!("no coupled power at x = {x} m (lossless cavity?)")));
    }
    let half = |d: f64| coupled(d) - 0.5 * top;
    let mut far = 2.0 * w;
    while half(dk0 + far) > 0.0 || half(dk0 - far) > 0.0 {
        far *= 2.0;
        if far > 1e3 * w {
            return Err(Error::Degenerate(format!("resonance at x = {x} m has no half-maximum crossing")));
        }
    }
    let hi = brent_root(half, dk0, dk0 + far, 0.0, 4.0 * f64::EPSILON)?;
    let lo = brent_root(half, dk0 - far, dk0, 0.0, 4.0 * f64::EPSILON)?;
    let eps = model.mode_match_eps;
    Ok(ResonanceDip {
        x,
        detuning: (base + dk0) * SPEED_OF_LIGHT,
        kappa: (hi - lo) * SPEED_OF_LIGHT,
        r_res: (1.0 - eps) + eps * (1.0 - top),
    })
}

/// Lorentzian fit of a reflection dip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinewidthFit {
    /// FWHM, rad/s.
    pub kappa: f64,
    /// Dip center, rad/s.
    pub center: f64,
    /// Dip depth below the off-resonance baseline.
    pub depth: f64,
    pub baseline: f64,
}

/// Fits `B − D/(1 + 4(δ − δ₀)²/κ²)` to a reflection trace containing one
/// dip.
pub fn extract_linewidth(trace: &[f64], detuning_grid: &[f64]) -> Result<LinewidthFit> {
    if trace.len() != detuning_grid.len() || trace.len() < 5 {
        return Err(Error::invalid("trace and grid must have equal length ≥ 5"));
    }
    let (imin, &vmin) = trace
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty");
    let baseline = {
        let mut sorted = trace.to_vec();
        sorted.sort_by(f64::total_cmp);
        sorted[(sorted.len() * 9) / 10]
    };
    let noise = {
        let diffs: Vec<f64> = trace.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let mut d = diffs.clone();
        d.sort_by(f64::total_cmp);
        d[d.len() / 2]
    };
    let depth0 = baseline - vmin;
    if !(depth0 > 5.0 * noise.max(1e-12)) {
        return Err(Error::FitFailed(format!(
            "no dip below the noise floor (depth {depth0:.3e}, noise {noise:.3e})"
        )));
    }
    // Quadratic refinement of the minimum location.
    let mut center0 = detuning_grid[imin];
    if imin > 0 && imin + 1 < trace.len() {
        let (x0, x1, x2) = (detuning_grid[imin - 1], detuning_grid[imin], detuning_grid[imin + 1]);
        let (y0, y1, y2) = (trace[imin - 1], trace[imin], trace[imin + 1]);
        let denom = (x0 - x1) * (x0 - x2) * (x1 - x2);
        if denom != 0.0 {
            let a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom;
            let b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom;
            if a > 0.0 {
                center0 = (-b / (2.0 * a)).clamp(x0, x2);
            }
        }
    }
    // Width guess from the half-depth crossings.
    let half = baseline - 0.5 * depth0;
    let left = (0..imin).rev().find(|&i| trace[i] > half).map(|i| detuning_grid[i]);
    let right = (imin..trace.len()).find(|&i| trace[i] > half).map(|i| detuning_grid[i]);
    let span = (detuning_grid[detuning_grid.len() - 1] - detuning_grid[0]).abs();
    let width0 = match (left, right) {
        (Some(l), Some(r)) => (r - l).abs(),
        _ => span / 4.0,
    }
    .max(span / trace.len() as f64);
    let params = vec![
        Parameter::new("baseline", baseline).with_scale(1.0),
        Parameter::new("depth", depth0).with_scale(depth0),
        Parameter::new("center", center0).with_scale(width0),
        Parameter::new("kappa", width0).bounded(0.0, f64::INFINITY).with_scale(width0),
    ];
    let problem = FitProblem::new(params, |p: &[f64]| {
        detuning_grid
            .iter()
            .zip(trace)
            .map(|(&d, &y)| {
                let u = 2.0 * (d - p[2]) / p[3];
                p[0] - p[1] / (1.0 + u * u) - y
            })
            .collect()
    })
    .with_options(LsqOptions {
        sigma_known: false,
        ..LsqOptions::default()
    });
    let fit = least_squares_solve(&problem)?;
    let kappa = fit.value("kappa").expect("named parameter").abs();
    if !fit.converged || !(kappa > 0.0) {
        return Err(Error::FitFailed(format!("Lorentzian fit did not converge: {}", fit.message)));
    }
    Ok(LinewidthFit {
        kappa,
        center: fit.value("center").expect("named parameter"),
        depth: fit.value("depth").expect("named parameter"),
        baseline: fit.value("baseline").expect("named parameter"),
    })
}

/// Decay rate and resonant reflection at one membrane position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub x: f64,
    pub detuning: f64,
    pub kappa: f64,
    pub r_res: f64,
}

/// `(κ(x), R_res(x))` across membrane positions, measured on the transfer
/// matrix response.
pub fn position_sweep(model: &CavityModel, x_grid: &[f64]) -> Result<Vec<SweepPoint>> {
    x_grid
        .par_iter()
        .enumerate()
        .map(|(i, &x)| {
            let d = resonance_dip(model, x).map_err(|e| Error::at_index(i, e))?;
            Ok(SweepPoint {
                x,
                detuning: d.detuning,
                kappa: d.kappa,
                r_res: d.r_res,
            })
        })
        .collect()
}

/// Detuning equivalent of a back-mirror displacement `ΔL` at wavenumber
/// `k`: `δ = −2kΔL·c/(2L)`.
pub fn backstop_to_detuning(delta_l: f64, k: f64, length_l: f64) -> f64 {
    -2.0 * k * delta_l * SPEED_OF_LIGHT / (2.0 * length_l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::MembraneCoeffs;
    use crate::resonance::omega_mate;
    use proptest::prelude::*;

    const L: f64 = 0.1;
    const N: u64 = 129_032;

    fn lam() -> f64 {
        2.0 * L / N as f64
    }

    fn phased(r: f64, phi: f64) -> MembraneSpec {
        MembraneSpec::Coeffs(MembraneCoeffs::lossless(r, phi).unwrap())
    }

    fn nominal_model() -> CavityModel {
        CavityModel::new(
            Mirror::lossless(7.5e-3).unwrap().with_loss(8.0e-4).unwrap(),
            Mirror::lossless(6e-4).unwrap(),
            MembraneSpec::slab(2.0, 88e-9).unwrap(),
            L,
            0.75,
            N,
        )
        .unwrap()
    }

    fn model(t1: f64, t2: f64, s1: f64, m: MembraneSpec, eps: f64) -> CavityModel {
        CavityModel::new(
            Mirror::lossless(t1).unwrap().with_loss(s1).unwrap(),
            if t2 > 0.0 { Mirror::lossless(t2).unwrap() } else { Mirror::perfect() },
            m,
            L,
            eps,
            N,
        )
        .unwrap()
    }

    #[test]
    fn lossless_two_port_is_unitary() {
        let m = model(1e-2, 3e-3, 0.0, phased(0.6, PI), 1.0);
        for i in 0..400 {
            let k = m.k_n() + (i as f64 - 200.0) * 3.7;
            let (r, t) = stack_response(&m, k, 1.234e-5).unwrap();
            assert!((r.norm_sqr() + t.norm_sqr() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn single_lossless_port_reflects_everything() {
        let m = model(1e-2, 0.0, 0.0, phased(0.6, PI), 1.0);
        for i in 0..400 {
            let k = m.k_n() + (i as f64 - 200.0) * 3.7;
            let (r, t) = stack_response(&m, k, 3.3e-6).unwrap();
            assert!((r.norm() - 1.0).abs() < 1e-10);
            assert_eq!(t.norm(), 0.0);
        }
    }

    #[test]
    fn energy_balance_with_loss() {
        let m = nominal_model();
        let x = 2.5e-6;
        for i in 0..200 {
            let k = m.k_n() + (i as f64 - 100.0) * 0.5;
            let (r, t) = stack_response(&m, k, x).unwrap();
            let absorbed = absorbed_fraction(&m, k, x).unwrap();
            assert!(absorbed >= 0.0);
            assert!((r.norm_sqr() + t.norm_sqr() + absorbed - 1.0).abs() < 1e-9);
        }
        // With S₁ = 0 and t₂ = 0, everything comes back.
        let lossless = model(7.5e-3, 0.0, 0.0, MembraneSpec::slab(2.0, 88e-9).unwrap(), 1.0);
        let (r, _) = stack_response(&lossless, lossless.k_n(), x).unwrap();
        assert!((r.norm_sqr() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_cavity_linewidth() {
        let m = model(1e-3, 4e-4, 2e-4, phased(0.0, 0.0), 1.0);
        let dip = resonance_dip(&m, 0.03).unwrap();
        assert!((dip.kappa / m.empty_kappa() - 1.0).abs() < 1e-3, "{}", dip.kappa / m.empty_kappa());
        let eq3 = kappa(0.03, m.k_n(), &m.membrane, &m.mirror1, &m.mirror2, L).unwrap();
        assert!((eq3 - SPEED_OF_LIGHT * 1.6e-3 / (2.0 * L)).abs() / eq3 < 1e-12);
    }

    #[test]
    fn dip_width_matches_decay_rate_at_high_finesse() {
        let m = model(1e-3, 0.0, 1e-3, phased(0.6, PI), 1.0);
        for i in 1..12 {
            let x = lam() * i as f64 / 24.0;
            let dip = resonance_dip(&m, x).unwrap();
            let g = CavityGeometry::new(L, x, N).unwrap();
            let k = solve_resonant_k(&g, &m.membrane, N).unwrap().wavenumber_k;
            let eq3 = kappa(x, k, &m.membrane, &m.mirror1, &m.mirror2, L).unwrap();
            assert!((dip.kappa / eq3 - 1.0).abs() < 0.01, "{x} {} {}", dip.kappa, eq3);
        }
    }

    #[test]
    fn critical_coupling_empties_the_dip() {
        // |t₁|² equal to the other losses: impedance matched.
        let m = model(1e-3, 6e-4, 4e-4, phased(0.0, 0.0), 1.0);
        let dip = resonance_dip(&m, 0.02).unwrap();
        assert!(dip.r_res < 1e-4, "{}", dip.r_res);
    }

    #[test]
    fn unmatched_light_is_reflected() {
        let m = model(1e-3, 6e-4, 4e-4, phased(0.4, PI), 0.0);
        let grid: Vec<f64> = (0..50).map(|i| (i as f64 - 25.0) * 1e5).collect();
        assert!(reflection_trace(&m, 1e-6, &grid).unwrap().iter().all(|&v| v == 1.0));
        assert!(reflection_trace(&m, 1e-6, &[]).is_err());
    }

    #[test]
    fn off_resonance_reflection_returns_to_one() {
        let m = nominal_model();
        let dip = resonance_dip(&m, 3e-6).unwrap();
        let far = [dip.detuning + 60.0 * dip.kappa, dip.detuning - 60.0 * dip.kappa];
        let tr = reflection_trace(&m, 3e-6, &far).unwrap();
        // A residual 1 − |r|² of order κ²/(4δ²) remains at finite detuning.
        assert!(tr.iter().all(|v| (v - 1.0).abs() < 1e-3), "{tr:?}");
    }

    #[test]
    fn lorentzian_round_trip() {
        let kap = 2.0 * PI * 1e6;
        let grid: Vec<f64> = (0..401).map(|i| (i as f64 - 200.0) * kap / 40.0).collect();
        let center = 0.13 * kap;
        let trace: Vec<f64> = grid
            .iter()
            .map(|&d| 1.0 - 0.6 / (1.0 + 4.0 * (d - center).powi(2) / (kap * kap)))
            .collect();
        let fit = extract_linewidth(&trace, &grid).unwrap();
        assert!((fit.kappa / kap - 1.0).abs() < 1e-3);
        assert!((fit.center - center).abs() < 1e-3 * kap);
        assert!((fit.depth - 0.6).abs() < 1e-6);

        let sym: Vec<f64> = grid.iter().map(|&d| 1.0 - 0.5 / (1.0 + 4.0 * d * d / (kap * kap))).collect();
        let fit = extract_linewidth(&sym, &grid).unwrap();
        assert!(fit.center.abs() < 1e-6 * kap);

        assert!(matches!(extract_linewidth(&vec![1.0; 401], &grid), Err(Error::FitFailed(_))));
    }

    #[test]
    fn extracted_linewidth_matches_dip_width() {
        let m = nominal_model();
        let dip = resonance_dip(&m, 4e-6).unwrap();
        let grid: Vec<f64> = (0..401).map(|i| dip.detuning + (i as f64 - 200.0) * dip.kappa / 20.0).collect();
        let tr = reflection_trace(&m, 4e-6, &grid).unwrap();
        let fit = extract_linewidth(&tr, &grid).unwrap();
        assert!((fit.kappa / dip.kappa - 1.0).abs() < 1e-3);
        assert!((fit.baseline - fit.depth - dip.r_res).abs() < 1e-3);
    }

    #[test]
    fn sweep_modulation_depth() {
        // t₂ = 0, x ≪ L: κ_max/κ_min → ((1 + r)/(1 − r))² = 16. The dip
        // needs some absorption to be visible in reflection.
        let m = model(1e-3, 0.0, 1e-3, phased(0.6, 0.0), 1.0);
        let grid: Vec<f64> = (0..200).map(|i| 5e-8 + lam() / 2.0 * i as f64 / 200.0).collect();
        let sweep = position_sweep(&m, &grid).unwrap();
        let kmax = sweep.iter().map(|p| p.kappa).fold(0.0, f64::max);
        let kmin = sweep.iter().map(|p| p.kappa).fold(f64::INFINITY, f64::min);
        assert!((kmax / kmin / 16.0 - 1.0).abs() < 0.01, "{}", kmax / kmin);

        let flat = model(1e-3, 2e-4, 3e-4, phased(0.0, 0.0), 0.8);
        let sweep = position_sweep(&flat, &grid).unwrap();
        assert!(sweep.iter().all(|p| (p.kappa / flat.empty_kappa() - 1.0).abs() < 1e-3));
    }

    #[test]
    fn map_ridges_follow_mate_closed_form() {
        let m = nominal_model();
        let w = m.fsr();
        let x_grid: Vec<f64> = (0..24).map(|i| 1e-7 + lam() / 2.0 * i as f64 / 24.0).collect();
        let det: Vec<f64> = (0..2000).map(|i| (i as f64 / 2000.0 - 0.5) * 2.0 * w).collect();
        let map = spectrum_map(&m, &x_grid, &det).unwrap();
        assert!(map.coarse_grid);
        for (i, row) in map.values.iter().enumerate() {
            let dip = resonance_dip(&m, x_grid[i]).unwrap();
            let ridge = omega_mate(x_grid[i], N, &m.membrane, L).unwrap() - N as f64 * w;
            assert!((dip.detuning - ridge).abs() < 1e-3 * w);
            assert!(row.iter().all(|v| (0.0..=1.0 + 1e-9).contains(v)));
        }
    }

    #[test]
    fn transparent_membrane_gives_straight_ridges() {
        let m = model(1e-3, 2e-4, 3e-4, phased(0.0, 0.0), 0.8);
        let dets: Vec<f64> = (0..20)
            .map(|i| resonance_dip(&m, 1e-7 + i as f64 * 5e-8).unwrap().detuning)
            .collect();
        assert!(dets.iter().all(|d| (d - dets[0]).abs() < 1e-6 * m.fsr()));
    }

    #[test]
    fn backstop_mapping_sign() {
        let k = 2.0 * PI / 1550e-9;
        let d = backstop_to_detuning(1e-9, k, L);
        assert!(d < 0.0);
        assert!((d + k * 1e-9 * SPEED_OF_LIGHT / L).abs() < 1e-6 * d.abs());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn stack_conserves_energy(
            t1 in 1e-4f64..0.1, t2 in 0.0f64..0.1, s1 in 0.0f64..1e-2, s2 in 0.0f64..1e-2,
            r in 0.0f64..0.99, phi in 0.0f64..(2.0 * PI), frac in 0.001f64..0.999, dk in -1e3f64..1e3,
        ) {
            let mut m = model(t1, t2, s1, phased(r, phi), 1.0);
            m.mirror2 = m.mirror2.with_loss(s2).unwrap();
            let x = frac * L;
            let k = m.k_n() + dk;
            let (rr, tt) = stack_response(&m, k, x).unwrap();
            let absorbed = absorbed_fraction(&m, k, x).unwrap();
            prop_assert!(absorbed >= -1e-12);
            prop_assert!((rr.norm_sqr() + tt.norm_sqr() + absorbed - 1.0).abs() < 1e-9);
        }
    }
}
