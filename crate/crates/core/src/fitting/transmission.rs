//! Global fit of wedged mirror–membrane transmission spectra.
//!
//! Spectra are recorded at successive transmission fringes while the
//! membrane approaches the mirror. Spectrum `j` belongs to longitudinal
//! order `l = l₀ − j`, where `l₀`, the order of the first recorded fringe,
//! is unknown. Its peak wavelength fixes the separation through
//! `2kx₀ + φ = 2πl`, and the tilt follows `θ = θ₀ − A(x₀ − x₀,ref)` with
//! `x₀,ref` the order-`l₀` separation at the reference wavelength.
//!
//! For each candidate `l₀` the shared `|r₁|²`, `θ₀`, `A` and the peak
//! wavelengths are fitted; the integer with the lowest χ² wins.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, Error, Result};
use crate::fitting::lsq::{least_squares_solve, FitProblem, FitResult, LsqOptions, Parameter};
use crate::optics::{MembraneSpec, Mirror};
use crate::tilt::{peak_separation, tilted_transmission_analytic, TiltedCavity, EXPANSION_LIMIT};

/// One sample of a transmission spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransmissionPoint {
    /// Fringe count since the first recorded spectrum (order `l₀ − mode_l`).
    pub mode_l: i64,
    pub lambda_m: f64,
    pub p_t: f64,
    /// 1σ of `p_t`; zero when unknown.
    pub sigma: f64,
}

/// The shared parameters of the tilt model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltParameters {
    pub r1_sq: f64,
    /// Tilt at order `l₀`, rad.
    pub theta0: f64,
    /// Tilt change per unit separation change, rad/m.
    pub a: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionFitConfig {
    /// Reflection phase of the mirror.
    pub phi1: f64,
    pub membrane: MembraneSpec,
    /// Beam radius at the membrane, m.
    pub beam_sigma: f64,
    /// Inclusive range of candidate `l₀`.
    pub l0_range: (i64, i64),
    /// Spectra whose order falls below this are dropped.
    pub min_order: i64,
    pub lambda_ref: f64,
    pub init: TiltParameters,
}

impl TransmissionFitConfig {
    pub fn new(membrane: MembraneSpec, init: TiltParameters) -> Self {
        Self {
            phi1: PI,
            membrane,
            beam_sigma: 100e-6,
            l0_range: (10, 40),
            min_order: 8,
            lambda_ref: 1550e-9,
            init,
        }
    }

    fn mirror(&self, r1_sq: f64) -> Result<Mirror> {
        if !(0.0..1.0).contains(&r1_sq) {
            return Err(Error::invalid(format!("|r1|² must lie in [0, 1), got {r1_sq}")));
        }
        Mirror::new(r1_sq.sqrt(), self.phi1, (1.0 - r1_sq).sqrt(), 0.0)
    }

    /// Total reflection phase `φ₁ + φ_m` at wavelength `lambda`.
    fn phase(&self, lambda: f64) -> Result<f64> {
        Ok(self.phi1 + self.membrane.coefficients_at(2.0 * PI / lambda)?.r_phase)
    }

    fn reference_separation(&self, l0: i64) -> Result<f64> {
        Ok(peak_separation(l0, self.lambda_ref, self.phase(self.lambda_ref)?))
    }

    /// Cavity of order `l` with its peak at `lambda_peak`.
    pub fn cavity(&self, params: &TiltParameters, l0: i64, l: i64, lambda_peak: f64) -> Result<TiltedCavity> {
        ensure_positive("peak wavelength", lambda_peak)?;
        let x0 = peak_separation(l, lambda_peak, self.phase(lambda_peak)?);
        if x0 <= 0.0 {
            return Err(Error::invalid(format!("order {l} has no positive separation")));
        }
        let theta = params.theta0 - params.a * (x0 - self.reference_separation(l0)?);
        TiltedCavity::new(
            x0,
            theta,
            self.beam_sigma,
            self.mirror(params.r1_sq)?,
            self.membrane,
            2.0 * PI / lambda_peak,
        )
    }

    pub fn validate(&self) -> Result<()> {
        ensure_finite("mirror phase", self.phi1)?;
        ensure_positive("beam radius", self.beam_sigma)?;
        ensure_positive("reference wavelength", self.lambda_ref)?;
        if self.l0_range.0 > self.l0_range.1 {
            return Err(Error::invalid(format!("empty l0 range {:?}", self.l0_range)));
        }
        self.mirror(self.init.r1_sq)?;
        ensure_finite("initial theta0", self.init.theta0)?;
        ensure_finite("initial A", self.init.a)?;
        Ok(())
    }
}

/// Model transmission of one spectrum.
pub fn transmission_forward(
    config: &TransmissionFitConfig,
    params: &TiltParameters,
    l0: i64,
    mode_l: i64,
    lambda_peak: f64,
    lambdas: &[f64],
) -> Result<Vec<f64>> {
    let cavity = config.cavity(params, l0, l0 - mode_l, lambda_peak)?;
    lambdas
        .iter()
        .map(|&lam| {
            ensure_positive("wavelength", lam)?;
            tilted_transmission_analytic(&cavity, 2.0 * PI / lam).map(|t| t.value)
        })
        .collect()
}

/// χ² of the best fit at one candidate order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct L0Candidate {
    pub l0: i64,
    pub chi2: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPeak {
    pub mode_l: i64,
    pub order: i64,
    pub lambda_peak: f64,
    pub lambda_peak_sigma: f64,
    pub x0: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionFit {
    pub l0: i64,
    pub fit: FitResult,
    pub params: TiltParameters,
    pub peaks: Vec<SpectrumPeak>,
    /// χ² for every feasible candidate, in order of `l₀`.
    pub profile: Vec<L0Candidate>,
    /// True when another candidate lies within one unit of χ² of the best.
    pub ambiguous: bool,
    pub near_ties: Vec<i64>,
    /// Fringe counts of spectra dropped as too low in order.
    pub excluded: Vec<i64>,
}

struct Spectrum {
    mode_l: i64,
    lambdas: Vec<f64>,
    values: Vec<f64>,
    sigmas: Vec<f64>,
}

fn group(points: &[TransmissionPoint]) -> Result<(Vec<Spectrum>, bool)> {
    let weighted = points.iter().all(|p| p.sigma > 0.0);
    let unweighted = points.iter().all(|p| p.sigma == 0.0);
    if !weighted && !unweighted {
        return Err(Error::invalid("uncertainties must be all positive or all zero"));
    }
    let mut by_mode: BTreeMap<i64, Spectrum> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        ensure_positive("wavelength", p.lambda_m).map_err(|e| Error::at_index(i, e))?;
        ensure_finite("transmission", p.p_t).map_err(|e| Error::at_index(i, e))?;
        if p.mode_l < 0 {
            return Err(Error::at_index(i, Error::invalid("mode_l must be ≥ 0")));
        }
        let s = by_mode.entry(p.mode_l).or_insert_with(|| Spectrum {
            mode_l: p.mode_l,
            lambdas: Vec::new(),
            values: Vec::new(),
            sigmas: Vec::new(),
        });
        s.lambdas.push(p.lambda_m);
        s.values.push(p.p_t);
        s.sigmas.push(if weighted { p.sigma } else { 1.0 });
    }
    let spectra: Vec<Spectrum> = by_mode.into_values().collect();
    for s in &spectra {
        if s.lambdas.len() < 3 {
            return Err(Error::invalid(format!("spectrum {} has fewer than 3 samples", s.mode_l)));
        }
    }
    Ok((spectra, weighted))
}

/// Sample at the largest transmission, the starting peak wavelength.
fn brightest(s: &Spectrum) -> f64 {
    let i = (0..s.values.len())
        .max_by(|&a, &b| s.values[a].total_cmp(&s.values[b]))
        .unwrap_or(0);
    s.lambdas[i]
}

fn fit_at(spectra: &[&Spectrum], config: &TransmissionFitConfig, l0: i64, weighted: bool) -> Result<FitResult> {
    let init = config.init;
    let mut params = vec![
        Parameter::new("r1_sq", init.r1_sq)
            .bounded(0.0, 1.0 - 1e-12)
            .with_scale((1.0 - init.r1_sq).max(1e-6)),
        Parameter::new("theta0", init.theta0).with_scale(1e-4),
        Parameter::new("a", init.a).with_scale(10.0),
    ];
    for s in spectra {
        let lam = brightest(s);
        params.push(Parameter::new(format!("lambda_peak_{}", s.mode_l), lam).with_scale(1e-9));
    }
    let n: usize = spectra.iter().map(|s| s.lambdas.len()).sum();
    let residual = |p: &[f64]| -> Vec<f64> {
        let tp = TiltParameters {
            r1_sq: p[0],
            theta0: p[1],
            a: p[2],
        };
        let mut out = Vec::with_capacity(n);
        for (s, &lam_pk) in spectra.iter().zip(&p[3..]) {
            let Ok(model) = transmission_forward(config, &tp, l0, s.mode_l, lam_pk, &s.lambdas) else {
                return vec![f64::NAN; n];
            };
            for ((m, y), sg) in model.iter().zip(&s.values).zip(&s.sigmas) {
                out.push((m - y) / sg);
            }
        }
        out
    };
    let problem = FitProblem::new(params, residual).with_options(LsqOptions {
        sigma_known: weighted,
        ..LsqOptions::default()
    });
    least_squares_solve(&problem)
}

/// Flips `(θ₀, A)` so that `θ₀ ≥ 0`; the transmission depends on `θ²` only.
fn canonicalize(fit: &mut FitResult) {
    if fit.value("theta0").is_some_and(|t| t < 0.0) {
        for p in fit.parameters.iter_mut().filter(|p| p.name == "theta0" || p.name == "a") {
            p.value = -p.value;
        }
        let idx: Vec<usize> = ["theta0", "a"]
            .iter()
            .filter_map(|n| fit.free_names.iter().position(|f| f == n))
            .collect();
        for &i in &idx {
            for j in 0..fit.correlation.len() {
                if idx.contains(&j) {
                    continue;
                }
                fit.correlation[i][j] = -fit.correlation[i][j];
                fit.correlation[j][i] = -fit.correlation[j][i];
                fit.covariance[i][j] = -fit.covariance[i][j];
                fit.covariance[j][i] = -fit.covariance[j][i];
            }
        }
    }
}

fn scan(
    spectra: &[&Spectrum],
    config: &TransmissionFitConfig,
    weighted: bool,
) -> Result<(i64, FitResult, Vec<L0Candidate>)> {
    let max_mode = spectra.iter().map(|s| s.mode_l).max().unwrap_or(0);
    let lo = config.l0_range.0.max(max_mode + 1);
    let hi = config.l0_range.1;
    if lo > hi {
        return Err(Error::invalid(format!(
            "no feasible l0 in {:?}: the data span {} fringes",
            config.l0_range,
            max_mode + 1
        )));
    }
    let results: Vec<(i64, Result<FitResult>)> = (lo..=hi)
        .into_par_iter()
        .map(|l0| (l0, fit_at(spectra, config, l0, weighted)))
        .collect();
    let mut best: Option<(i64, FitResult)> = None;
    let mut profile = Vec::new();
    for (l0, r) in results {
        let Ok(fit) = r else {
            log::debug!("l0 = {l0}: {}", r.unwrap_err());
            continue;
        };
        profile.push(L0Candidate {
            l0,
            chi2: fit.chi2,
            converged: fit.converged,
        });
        if best.as_ref().is_none_or(|(_, b)| fit.chi2 < b.chi2) {
            best = Some((l0, fit));
        }
    }
    let (l0, fit) = best.ok_or_else(|| Error::FitFailed("no candidate l0 could be fitted".into()))?;
    Ok((l0, fit, profile))
}

pub fn fit_transmission_global(points: &[TransmissionPoint], config: &TransmissionFitConfig) -> Result<TransmissionFit> {
    config.validate()?;
    let (spectra, weighted) = group(points)?;
    if spectra.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 spectra, got {}", spectra.len())));
    }
    // The usable set depends on l₀ and l₀ on the usable set: iterate to a
    // fixed point, starting from all spectra.
    let mut keep: Vec<&Spectrum> = spectra.iter().collect();
    let mut outcome = scan(&keep, config, weighted)?;
    for _ in 0..4 {
        let l0 = outcome.0;
        let next: Vec<&Spectrum> = spectra.iter().filter(|s| l0 - s.mode_l >= config.min_order).collect();
        if next.len() == keep.len() {
            break;
        }
        if next.len() < 3 {
            return Err(Error::invalid(format!(
                "fewer than 3 spectra reach order {} at l0 = {l0}",
                config.min_order
            )));
        }
        keep = next;
        outcome = scan(&keep, config, weighted)?;
    }
    let (l0, mut fit, profile) = outcome;
    canonicalize(&mut fit);
    let v = fit.values();
    let params = TiltParameters {
        r1_sq: v[0],
        theta0: v[1],
        a: v[2],
    };
    let x_ref = config.reference_separation(l0)?;
    let mut peaks = Vec::with_capacity(keep.len());
    for (s, &lam) in keep.iter().zip(&v[3..]) {
        let order = l0 - s.mode_l;
        let x0 = peak_separation(order, lam, config.phase(lam)?);
        peaks.push(SpectrumPeak {
            mode_l: s.mode_l,
            order,
            lambda_peak: lam,
            lambda_peak_sigma: fit.uncertainty(&format!("lambda_peak_{}", s.mode_l)).unwrap_or(f64::NAN),
            x0,
            theta: params.theta0 - params.a * (x0 - x_ref),
        });
    }
    let s_max = peaks
        .iter()
        .map(|p| 2.0 * PI / p.lambda_peak * (p.theta * config.beam_sigma).abs())
        .fold(0.0, f64::max);
    if s_max >= EXPANSION_LIMIT {
        warn!("fitted kθσ reaches {s_max:.3}, beyond the expansion limit {EXPANSION_LIMIT}");
    }
    // Without known σ, χ² differences are read in units of the residual variance.
    let unit = if weighted {
        1.0
    } else {
        (fit.chi2 / fit.dof.max(1) as f64).max(f64::MIN_POSITIVE)
    };
    let near_ties: Vec<i64> = profile
        .iter()
        .filter(|c| c.l0 != l0 && (c.chi2 - fit.chi2) / unit < 1.0)
        .map(|c| c.l0)
        .collect();
    let excluded = spectra
        .iter()
        .map(|s| s.mode_l)
        .filter(|m| !keep.iter().any(|k| k.mode_l == *m))
        .collect();
    Ok(TransmissionFit {
        l0,
        fit,
        params,
        peaks,
        profile,
        ambiguous: !near_ties.is_empty(),
        near_ties,
        excluded,
    })
}

/// Generating values for synthetic spectra.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionTruth {
    pub l0: i64,
    pub params: TiltParameters,
    /// `(mode_l, peak wavelength)` per spectrum.
    pub peaks: Vec<(i64, f64)>,
}

/// Spectra on a shared wavelength grid with Gaussian noise of
/// `noise × (peak of that spectrum)` and matching σ.
pub fn synthesize_transmission(
    truth: &TransmissionTruth,
    config: &TransmissionFitConfig,
    lambda_grid: &[f64],
    noise: f64,
    seed: u64,
) -> Result<Vec<TransmissionPoint>> {
    if lambda_grid.is_empty() {
        return Err(Error::invalid("empty wavelength grid"));
    }
    if !(noise >= 0.0) {
        return Err(Error::invalid(format!("noise must be ≥ 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(truth.peaks.len() * lambda_grid.len());
    for &(mode_l, lam_pk) in &truth.peaks {
        let clean = transmission_forward(config, &truth.params, truth.l0, mode_l, lam_pk, lambda_grid)?;
        let sigma = noise * clean.iter().cloned().fold(0.0, f64::max);
        for (&lam, p) in lambda_grid.iter().zip(clean) {
            let e = if noise > 0.0 { sigma * unit.sample(&mut rng) } else { 0.0 };
            out.push(TransmissionPoint {
                mode_l,
                lambda_m: lam,
                p_t: p + e,
                sigma,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn nominal_truth(modes: std::ops::RangeInclusive<i64>) -> TransmissionTruth {
        TransmissionTruth {
            l0: 24,
            params: TiltParameters {
                r1_sq: 0.9935,
                theta0: 0.18e-3,
                a: 0.040e-3 / 1e-6,
            },
            peaks: modes.map(|j| (j, 1550e-9 + 0.4e-9 * ((j % 5) - 2) as f64)).collect(),
        }
    }

    fn config() -> TransmissionFitConfig {
        let mut c = TransmissionFitConfig::new(
            MembraneSpec::slab(2.0, 88e-9).unwrap(),
            TiltParameters {
                r1_sq: 0.99,
                theta0: 0.1e-3,
                a: 0.0,
            },
        );
        c.l0_range = (18, 30);
        c
    }

    fn grid() -> Vec<f64> {
        (0..200).map(|i| 1510e-9 + 80e-9 * i as f64 / 199.0).collect()
    }

    #[test]
    fn peak_sits_at_the_requested_wavelength() {
        let t = nominal_truth(0..=0);
        let fine: Vec<f64> = (0..2001).map(|i| 1549e-9 + 2e-9 * i as f64 / 2000.0).collect();
        let p = transmission_forward(&config(), &t.params, 24, 3, 1549.9e-9, &fine).unwrap();
        let imax = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert!((fine[imax] - 1549.9e-9).abs() < 2e-12, "{}", fine[imax]);
    }

    #[test]
    fn noiseless_recovery() {
        let truth = nominal_truth(0..=16);
        let data = synthesize_transmission(&truth, &config(), &grid(), 0.0, 0).unwrap();
        let fit = fit_transmission_global(&data, &config()).unwrap();
        assert_eq!(fit.l0, 24);
        assert!(!fit.ambiguous, "{:?}", fit.near_ties);
        assert!(fit.fit.converged, "{}", fit.fit.message);
        let p = fit.params;
        assert!((p.r1_sq / 0.9935 - 1.0).abs() < 1e-3);
        assert!((p.theta0 / 0.18e-3 - 1.0).abs() < 1e-3, "{}", p.theta0);
        assert!((p.a / 40.0 - 1.0).abs() < 1e-3, "{}", p.a);
        for (pk, &(_, lam)) in fit.peaks.iter().zip(&truth.peaks) {
            assert!((pk.lambda_peak - lam).abs() < 1e-14);
        }
        let top = fit.profile.iter().filter(|c| c.l0 != 24).map(|c| c.chi2).fold(f64::INFINITY, f64::min);
        assert!(top > 1e3 * fit.fit.chi2.max(1e-20));
    }

    #[test]
    fn untilted_spectra_give_zero_tilt() {
        let mut truth = nominal_truth(0..=8);
        truth.params.theta0 = 0.0;
        truth.params.a = 0.0;
        let data = synthesize_transmission(&truth, &config(), &grid(), 0.0, 0).unwrap();
        let fit = fit_transmission_global(&data, &config()).unwrap();
        assert_eq!(fit.l0, 24);
        assert!((fit.params.r1_sq / 0.9935 - 1.0).abs() < 1e-6);
        for pk in &fit.peaks {
            assert!(pk.theta.abs() < 1e-6, "{}", pk.theta);
        }
    }

    #[test]
    fn low_orders_are_excluded() {
        let cfg = config();
        let with_low = synthesize_transmission(&nominal_truth(0..=19), &cfg, &grid(), 0.01, 5).unwrap();
        let without: Vec<_> = with_low.iter().copied().filter(|p| p.mode_l <= 16).collect();
        let a = fit_transmission_global(&with_low, &cfg).unwrap();
        let b = fit_transmission_global(&without, &cfg).unwrap();
        assert_eq!(a.excluded, vec![17, 18, 19]);
        assert!(b.excluded.is_empty());
        assert_eq!(a.l0, b.l0);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn noisy_recovery_within_uncertainty() {
        let data = synthesize_transmission(&nominal_truth(0..=16), &config(), &grid(), 0.01, 3).unwrap();
        let fit = fit_transmission_global(&data, &config()).unwrap();
        assert_eq!(fit.l0, 24);
        for (name, want) in [("r1_sq", 0.9935), ("theta0", 0.18e-3), ("a", 40.0)] {
            let got = fit.fit.value(name).unwrap();
            let s = fit.fit.uncertainty(name).unwrap();
            assert!((got - want).abs() < 5.0 * s, "{name}: {got} vs {want} ± {s}");
        }
        assert!((fit.fit.reduced_chi2 - 1.0).abs() < 0.2);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = config();
        let data = synthesize_transmission(&nominal_truth(0..=1), &cfg, &grid(), 0.01, 1).unwrap();
        assert!(fit_transmission_global(&data, &cfg).is_err());
        let mut data = synthesize_transmission(&nominal_truth(0..=4), &cfg, &grid(), 0.01, 1).unwrap();
        data[7].sigma = 0.0;
        assert!(fit_transmission_global(&data, &cfg).is_err());
    }
}
