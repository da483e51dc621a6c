//! Transmission through a wedged mirror–membrane cavity, and the sagitta
//! of a flexed chip.
//!
//! The gap varies across the beam as `x = x₀ + θy`. Each transverse
//! position is treated as an independent plane-parallel cavity and the
//! results are weighted by the Gaussian intensity profile
//! `sqrt(2/(πσ²)) exp(−2y²/σ²)`.

use std::f64::consts::PI;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::numerics::integrate;
use crate::optics::{MembraneSpec, Mirror};

/// Largest `kθσ` for which the second-order expansion is trusted.
pub const EXPANSION_LIMIT: f64 = 0.3;

/// Wedged two-surface cavity probed in transmission.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedCavity {
    /// Separation at the beam center, m.
    pub x0: f64,
    /// Wedge slope, rad.
    pub theta: f64,
    /// Beam radius, m.
    pub sigma: f64,
    pub mirror1: Mirror,
    pub membrane: MembraneSpec,
    /// Sum of the mirror and membrane reflection phases, rad.
    pub phi: f64,
}

impl TiltedCavity {
    /// Builds the cavity with the membrane coefficients frozen at the
    /// reference wavenumber `k_ref` and `φ = φ₁ + φ_m` taken from them, the
    /// right model for sweeps narrow compared with the coating bandwidth.
    pub fn new(x0: f64, theta: f64, sigma: f64, mirror1: Mirror, membrane: MembraneSpec, k_ref: f64) -> Result<Self> {
        ensure_positive("reference wavenumber", k_ref)?;
        let frozen = membrane.coefficients_at(k_ref)?;
        let phi = mirror1.r_phase + frozen.r_phase;
        Self::with_phase(x0, theta, sigma, mirror1, MembraneSpec::Coeffs(frozen), phi)
    }

    pub fn with_phase(x0: f64, theta: f64, sigma: f64, mirror1: Mirror, membrane: MembraneSpec, phi: f64) -> Result<Self> {
        ensure_positive("separation x0", x0)?;
        ensure_positive("beam radius sigma", sigma)?;
        ensure_finite("tilt theta", theta)?;
        ensure_finite("phase phi", phi)?;
        Ok(Self {
            x0,
            theta,
            sigma,
            mirror1,
            membrane,
            phi,
        })
    }

    /// `kθσ`, the expansion parameter.
    pub fn tilt_parameter(&self, k: f64) -> f64 {
        (k * self.theta * self.sigma).abs()
    }

    /// `(|t₁|²|t_m|², |r₁||r_m|)` at wavenumber `k`.
    fn factors(&self, k: f64) -> Result<(f64, f64)> {
        ensure_positive("wavenumber k", k)?;
        let m = self.membrane.coefficients_at(k)?;
        let t_sq = self.mirror1.t_mag.powi(2) * m.t_mag.powi(2);
        Ok((t_sq, self.mirror1.r_mag * m.r_mag))
    }
}

/// Transmitted power with a flag for the expansion's validity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedTransmission {
    pub value: f64,
    /// False when `kθσ` exceeds [`EXPANSION_LIMIT`].
    pub expansion_valid: bool,
}

fn airy_denominator(rr: f64, u: f64) -> f64 {
    1.0 + rr * rr - 2.0 * rr * u.cos()
}

/// Plane-wave transmission `|t₁t_m e^{ikx}/(1 − r₁r_m e^{2ikx})|²` with the
/// coefficients' own phases.
pub fn airy_transmission(x0: f64, k: f64, mirror1: &Mirror, membrane: &MembraneSpec) -> Result<f64> {
    ensure_positive("separation x0", x0)?;
    ensure_positive("wavenumber k", k)?;
    let m = membrane.coefficients_at(k)?;
    let rr = mirror1.r_mag * m.r_mag;
    let u = 2.0 * k * x0 + mirror1.r_phase + m.r_phase;
    let den = airy_denominator(rr, u);
    if den <= 0.0 {
        return Err(Error::Singular("lossless resonator on resonance: |r₁r_m| = 1".into()));
    }
    Ok(mirror1.t_mag.powi(2) * m.t_mag.powi(2) / den)
}

/// Second-order expansion of the beam-averaged transmission in `kθσ`.
pub fn tilted_transmission_analytic(cavity: &TiltedCavity, k: f64) -> Result<TiltedTransmission> {
    let (t_sq, rr) = cavity.factors(k)?;
    let u = 2.0 * k * cavity.x0 + cavity.phi;
    let den = airy_denominator(rr, u);
    if den <= 0.0 {
        return Err(Error::Singular("lossless resonator on resonance: |r₁r_m| = 1".into()));
    }
    let s = cavity.tilt_parameter(k);
    let curvature = rr * ((1.0 + rr * rr) * u.cos() + rr * ((2.0 * u).cos() - 3.0)) / (den * den);
    Ok(TiltedTransmission {
        value: t_sq / den * (1.0 - s * s * curvature),
        expansion_valid: s < EXPANSION_LIMIT,
    })
}

/// Beam average of the per-ray transmission by adaptive quadrature over
/// `|y| ≤ 6σ`, to the requested absolute tolerance.
pub fn tilted_transmission_quadrature_tol(cavity: &TiltedCavity, k: f64, abs_tol: f64) -> Result<f64> {
    ensure_positive("tolerance", abs_tol)?;
    let (t_sq, rr) = cavity.factors(k)?;
    let sigma = cavity.sigma;
    let u0 = 2.0 * k * cavity.x0 + cavity.phi;
    let slope = 2.0 * k * cavity.theta;
    if rr >= 1.0 {
        return Err(Error::Singular("lossless resonator: |r₁r_m| = 1".into()));
    }
    let norm = (2.0 / (PI * sigma * sigma)).sqrt();
    let f = |y: f64| t_sq / airy_denominator(rr, u0 + slope * y) * norm * (-2.0 * y * y / (sigma * sigma)).exp();
    // Split into pieces no wider than one fringe or σ/2, so the adaptive
    // rule starts from a grid that resolves the integrand.
    let span = 12.0 * sigma;
    let fringe = if slope != 0.0 { 2.0 * PI / slope.abs() } else { f64::INFINITY };
    let pieces = ((span / fringe.min(0.5 * sigma)).ceil() as usize).clamp(1, 20_000);
    let h = span / pieces as f64;
    let per_piece = abs_tol / pieces as f64;
    let mut total = 0.0;
    let mut comp = 0.0;
    for i in 0..pieces {
        let a = -6.0 * sigma + h * i as f64;
        let part = integrate(f, a, a + h, per_piece, 1e-15, 4000)?;
        // Kahan summation keeps the many pieces from losing digits.
        let y = part.value - comp;
        let t = total + y;
        comp = (t - total) - y;
        total = t;
    }
    Ok(total)
}

/// Beam average of the per-ray transmission by adaptive quadrature, to
/// 1e-8 absolute.
pub fn tilted_transmission_quadrature(cavity: &TiltedCavity, k: f64) -> Result<f64> {
    tilted_transmission_quadrature_tol(cavity, k, 1e-8)
}

/// Beam average evaluated exactly through the Fourier series of the Airy
/// function: each harmonic `n` of the fringe pattern is damped by the
/// Gaussian's characteristic function `exp(−n²(kθσ)²/2)`. Converges
/// geometrically in `|r₁r_m|`.
pub fn tilted_transmission_series(cavity: &TiltedCavity, k: f64) -> Result<f64> {
    let (t_sq, rr) = cavity.factors(k)?;
    if rr >= 1.0 {
        return Err(Error::Singular("lossless resonator: |r₁r_m| = 1".into()));
    }
    let u = 2.0 * k * cavity.x0 + cavity.phi;
    let s2 = cavity.tilt_parameter(k).powi(2);
    let (c1, s1) = (u.cos(), u.sin());
    let (mut cn, mut sn) = (1.0, 0.0);
    let mut rn = 1.0;
    let mut sum = 0.0;
    let mut n = 0.0;
    loop {
        n += 1.0;
        // cos(nu) by the angle-addition recurrence.
        let c = cn * c1 - sn * s1;
        sn = sn * c1 + cn * s1;
        cn = c;
        rn *= rr;
        let damp = (-0.5 * n * n * s2).exp();
        let term = rn * damp;
        sum += term * cn;
        if term < 1e-18 || n > 1e6 {
            break;
        }
    }
    Ok(t_sq / (1.0 - rr * rr) * (1.0 + 2.0 * sum))
}

/// Forward model used by [`wavelength_spectrum`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TiltModel {
    /// Second-order expansion; what the transmission fits use.
    #[default]
    Analytic,
    /// Exact beam average.
    Exact,
}

/// `P_t(λ)` across a wavelength grid (m). Reflection phases are held at
/// `cavity.phi`; magnitudes follow `cavity.membrane`, which
/// [`TiltedCavity::new`] freezes.
pub fn wavelength_spectrum(cavity: &TiltedCavity, lambda_grid: &[f64], model: TiltModel) -> Result<Vec<f64>> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("empty wavelength grid"));
    }
    if model == TiltModel::Analytic {
        let s = lambda_grid.iter().map(|&lam| cavity.tilt_parameter(2.0 * PI / lam)).fold(0.0, f64::max);
        if s >= EXPANSION_LIMIT {
            warn!("kθσ = {s:.3} exceeds the expansion limit {EXPANSION_LIMIT}");
        }
    }
    lambda_grid
        .par_iter()
        .enumerate()
        .map(|(i, &lam)| {
            ensure_positive("wavelength", lam).map_err(|e| Error::at_index(i, e))?;
            let k = 2.0 * PI / lam;
            match model {
                TiltModel::Analytic => tilted_transmission_analytic(cavity, k).map(|t| t.value),
                TiltModel::Exact => tilted_transmission_series(cavity, k),
            }
            .map_err(|e| Error::at_index(i, e))
        })
        .collect()
}

/// Separation at which the transmission peak of order `l` sits at
/// wavelength `lambda`: `2kx₀ + φ = 2πl`.
pub fn peak_separation(l: i64, lambda: f64, phi: f64) -> f64 {
    (2.0 * PI * l as f64 - phi) * lambda / (4.0 * PI)
}

/// Circular-arc sagitta `offset²/(2·roc)`; approximate for a flexed chip.
pub fn flexure_sagitta(roc: f64, lateral_offset: f64) -> Result<f64> {
    ensure_positive("radius of curvature", roc)?;
    ensure_finite("lateral offset", lateral_offset)?;
    Ok(lateral_offset * lateral_offset / (2.0 * roc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::MembraneCoeffs;
    use proptest::prelude::*;

    const LAMBDA: f64 = 1550e-9;

    fn k0() -> f64 {
        2.0 * PI / LAMBDA
    }

    fn m1() -> Mirror {
        Mirror::lossless(1.0 - 0.9935).unwrap()
    }

    fn slab() -> MembraneSpec {
        MembraneSpec::slab(2.0, 88e-9).unwrap()
    }

    fn cavity(x0: f64, theta: f64) -> TiltedCavity {
        TiltedCavity::new(x0, theta, 100e-6, m1(), slab(), k0()).unwrap()
    }

    /// Separation that puts order `l` exactly on resonance at `LAMBDA`.
    fn on_resonance(l: i64) -> f64 {
        let phi = cavity(1e-6, 0.0).phi;
        peak_separation(l, LAMBDA, phi)
    }

    #[test]
    fn no_cavity_without_mirror() {
        let bare = Mirror::new(0.0, PI, 1.0, 0.0).unwrap();
        let m = slab().coefficients_at(k0()).unwrap();
        let t = airy_transmission(3e-6, k0(), &bare, &slab()).unwrap();
        assert!((t - m.t_mag.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn resonant_airy_peak() {
        let x0 = on_resonance(10);
        let m = slab().coefficients_at(k0()).unwrap();
        let rr = m1().r_mag * m.r_mag;
        let expect = m1().t_mag.powi(2) * m.t_mag.powi(2) / (1.0 - rr).powi(2);
        let got = airy_transmission(x0, k0(), &m1(), &slab()).unwrap();
        assert!((got / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn peaks_repeat_every_half_wavelength() {
        let base = on_resonance(5);
        let a = airy_transmission(base, k0(), &m1(), &slab()).unwrap();
        for j in 1..5 {
            let b = airy_transmission(base + j as f64 * LAMBDA / 2.0, k0(), &m1(), &slab()).unwrap();
            assert!((a - b).abs() < 1e-9 * a);
        }
        // Maximum over a fine x₀ scan sits on the resonance condition.
        let n = 20_001;
        let xs: Vec<f64> = (0..n).map(|i| base - LAMBDA / 4.0 + LAMBDA / 2.0 * i as f64 / (n - 1) as f64).collect();
        let best = xs
            .iter()
            .copied()
            .max_by(|p, q| {
                let tp = airy_transmission(*p, k0(), &m1(), &slab()).unwrap();
                let tq = airy_transmission(*q, k0(), &m1(), &slab()).unwrap();
                tp.total_cmp(&tq)
            })
            .unwrap();
        assert!((best - base).abs() <= LAMBDA / 2.0 / (n - 1) as f64);
    }

    #[test]
    fn perfect_pair_is_guarded() {
        let mirror = Mirror::perfect();
        let m = MembraneSpec::Coeffs(MembraneCoeffs::new(1.0, 0.0, 0.0, -PI / 2.0).unwrap());
        // 2kx + π = 2π l.
        let x = LAMBDA / 4.0;
        assert!(matches!(airy_transmission(x, k0(), &mirror, &m), Err(Error::Singular(_))));
    }

    #[test]
    fn zero_tilt_reduces_to_airy() {
        for i in 0..50 {
            let x0 = 2e-6 + i as f64 * 37e-9;
            let c = cavity(x0, 0.0);
            let airy = airy_transmission(x0, k0(), &m1(), &slab()).unwrap();
            let an = tilted_transmission_analytic(&c, k0()).unwrap();
            assert!(an.expansion_valid);
            assert!((an.value - airy).abs() < 1e-14);
            assert!((tilted_transmission_quadrature(&c, k0()).unwrap() - airy).abs() < 1e-8);
            assert!((tilted_transmission_series(&c, k0()).unwrap() - airy).abs() < 1e-13);
        }
    }

    #[test]
    fn transparent_membrane_passes_mirror_transmission() {
        let open = MembraneSpec::Coeffs(MembraneCoeffs::new(0.0, PI, 1.0, PI / 2.0).unwrap());
        let c = TiltedCavity::new(3e-6, 2e-4, 100e-6, m1(), open, k0()).unwrap();
        let p = tilted_transmission_quadrature(&c, k0()).unwrap();
        assert!((p - m1().t_mag.powi(2)).abs() < 1e-8);
    }

    #[test]
    fn series_and_quadrature_agree() {
        for &theta in &[1e-5, 1e-4, 5e-4, 2e-3] {
            for j in 0..7 {
                let c = cavity(on_resonance(12) + j as f64 * 40e-9, theta);
                let q = tilted_transmission_quadrature_tol(&c, k0(), 1e-14).unwrap();
                let s = tilted_transmission_series(&c, k0()).unwrap();
                assert!((q - s).abs() < 1e-13, "{theta} {j}: {q} {s}");
            }
        }
    }

    #[test]
    fn tilt_lowers_the_resonant_peak() {
        let x0 = on_resonance(20);
        let mut last = f64::INFINITY;
        for i in 0..8 {
            let c = cavity(x0, i as f64 * 5e-5);
            let p = tilted_transmission_analytic(&c, k0()).unwrap().value;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn expansion_matches_quadrature_at_small_tilt() {
        // kθσ = 0.05.
        let theta = 0.05 / (k0() * 100e-6);
        for j in 0..9 {
            let c = cavity(on_resonance(15) + j as f64 * 10e-9, theta);
            let an = tilted_transmission_analytic(&c, k0()).unwrap().value;
            let q = tilted_transmission_quadrature_tol(&c, k0(), 1e-13).unwrap();
            assert!(((an - q) / q).abs() < 1e-4, "{j}: {}", (an - q) / q);
        }
    }

    #[test]
    fn expansion_error_is_fourth_order() {
        let x0 = on_resonance(15);
        let pts: Vec<(f64, f64)> = (0..9)
            .map(|i| {
                let s = 10f64.powf(-3.0 + 2.0 * i as f64 / 8.0);
                let c = cavity(x0, s / (k0() * 100e-6));
                let an = tilted_transmission_analytic(&c, k0()).unwrap().value;
                let q = tilted_transmission_quadrature_tol(&c, k0(), 1e-16).unwrap();
                (s.ln(), ((an - q) / q).abs().ln())
            })
            .collect();
        let n = pts.len() as f64;
        let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 4.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn expansion_guard_flags_large_tilt() {
        let c = cavity(on_resonance(15), 0.4 / (k0() * 100e-6));
        assert!(!tilted_transmission_analytic(&c, k0()).unwrap().expansion_valid);
    }

    #[test]
    fn spectrum_peaks_and_widths() {
        let phi = cavity(1e-6, 0.0).phi;
        let grid: Vec<f64> = (0..40_001).map(|i| 1500e-9 + 100e-9 * i as f64 / 40_000.0).collect();
        // Both separations resonate at 1550 nm, inside the grid.
        let width = |x0: f64| {
            let c = TiltedCavity::new(x0, 0.0, 100e-6, m1(), slab(), k0()).unwrap();
            let tr = wavelength_spectrum(&c, &grid, TiltModel::Exact).unwrap();
            let (imax, &pmax) = tr.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
            // Peak sits on 2kx₀ + φ = 2πl.
            let u = 4.0 * PI * x0 / grid[imax] + phi;
            let l = (u / (2.0 * PI)).round();
            let du = 4.0 * PI * x0 * (grid[1] - grid[0]) / grid[imax].powi(2);
            assert!((u - 2.0 * PI * l).abs() <= du);
            let lo = (0..imax).rev().find(|&i| tr[i] < pmax / 2.0).unwrap();
            let hi = (imax..tr.len()).find(|&i| tr[i] < pmax / 2.0).unwrap();
            (grid[hi] - grid[lo]) / grid[imax]
        };
        let x0 = peak_separation(20, 1550e-9, phi);
        let ratio = width(peak_separation(10, 1550e-9, phi)) / width(x0);
        assert!((ratio - 2.0).abs() < 0.1, "{ratio}");
        assert!(wavelength_spectrum(&cavity(x0, 0.0), &[], TiltModel::Analytic).is_err());
    }

    #[test]
    fn nominal_fit_spectrum() {
        // l₀ = 24, |r₁|² = 0.9935, θ₀ = 0.18 mrad: a visible peak, reduced
        // but not erased by tilt.
        let c0 = cavity(1e-6, 0.0);
        let x0 = peak_separation(24, LAMBDA, c0.phi);
        let flat = cavity(x0, 0.0);
        let tilted = cavity(x0, 0.18e-3);
        let grid: Vec<f64> = (0..401).map(|i| LAMBDA * (1.0 + (i as f64 - 200.0) * 5e-6)).collect();
        let a = wavelength_spectrum(&flat, &grid, TiltModel::Analytic).unwrap();
        let b = wavelength_spectrum(&tilted, &grid, TiltModel::Analytic).unwrap();
        let (pa, pb) = (a[200], b[200]);
        assert!(pb < pa && pb > 0.5 * pa);
        assert!(tilted.tilt_parameter(k0()) < EXPANSION_LIMIT);
        assert!(a.iter().all(|&v| v <= pa + 1e-15));
    }

    #[test]
    fn sagitta_values() {
        assert_eq!(flexure_sagitta(80.0, 0.0).unwrap(), 0.0);
        let s80 = flexure_sagitta(80.0, 11e-3).unwrap();
        assert!((s80 - 0.756e-6).abs() < 0.005e-6);
        assert!((s80 - 775e-9).abs() / 775e-9 < 0.05);
        let s3 = flexure_sagitta(3.0, 11e-3).unwrap();
        assert!((s3 - 20.17e-6).abs() < 0.01e-6 && s3 > 15e-6);
        assert!(flexure_sagitta(0.0, 1e-3).is_err());
        assert!(flexure_sagitta(-1.0, 1e-3).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn transmission_is_a_fraction(
            t1 in 1e-4f64..0.5, d in 1e-9f64..300e-9, x0 in 0.3e-6f64..30e-6, theta in 0.0f64..2e-3,
        ) {
            let m = Mirror::lossless(t1).unwrap();
            let c = TiltedCavity::new(x0, theta, 100e-6, m, MembraneSpec::slab(2.0, d).unwrap(), k0()).unwrap();
            let p = tilted_transmission_series(&c, k0()).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
            let a = airy_transmission(x0, k0(), &m, &c.membrane).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&a));
        }
    }
}
